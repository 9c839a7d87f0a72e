"""Persona space: role clouds, PCA, the assistant axis and basin statistics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore
from .model import Model
from .persona import DegenerateContrastError, Direction, response_positions
from .trace import ProjectionSeries, trace_run
from .transcript import TurnRole

# reference scale of the published analysis (documentation only)
REFERENCE_ROLES = 275
REFERENCE_DIM = 4098
REFERENCE_K70 = {"gemma-2-27b": 4, "qwen-3-32b": 8, "llama-3.3-70b": 19}


class CloudError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RoleCloud:
    labels: tuple[str, ...]
    vectors: np.ndarray  # (roles, dim)
    layer: int
    battery_id: str = ""

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        if vecs.ndim != 2 or vecs.shape[0] != len(self.labels):
            raise CloudError(f"need one vector per label, got {vecs.shape} for {len(self.labels)} labels")
        if len(set(self.labels)) != len(self.labels):
            raise CloudError("role labels must be unique")
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def vector(self, label: str) -> np.ndarray:
        return self.vectors[self.labels.index(label)]

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "battery_id": self.battery_id,
            "roles": [{"label": lab, "vector": vec.tolist()} for lab, vec in zip(self.labels, self.vectors)],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, data: dict) -> "RoleCloud":
        try:
            roles = data["roles"]
            return cls(
                tuple(r["label"] for r in roles),
                np.array([r["vector"] for r in roles], dtype=np.float64),
                int(data["layer"]),
                str(data.get("battery_id", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CloudError(f"malformed cloud: {exc}") from None

    @classmethod
    def load(cls, path) -> "RoleCloud":
        return cls.from_dict(json.loads(Path(path).read_text()))


def battery_id(battery) -> str:
    return "b-" + hashlib.sha256("\n".join(battery).encode()).hexdigest()[:12]


def build_role_cloud(model: Model, roles, battery, layer: int, n_new: int = 2, site: str = "pre") -> RoleCloud:
    """Mean response activation per role over a shared question battery.

    ``roles`` is a list of ``(label, prompt_transcript)``; each question is
    appended to the role prompt as a user turn.
    """
    roles = list(roles)
    battery = list(battery)
    if len(roles) < 2:
        raise CloudError("need at least 2 roles")
    if not battery:
        raise CloudError("empty question battery")
    labels, rows = [], []
    for label, prompt in roles:
        acts = []
        for question in battery:
            t = prompt.with_turn(model.vocab, TurnRole.USER, question)
            out, trace = trace_run(model, t, n_new)
            positions = response_positions(t, out)
            if not positions:
                raise CloudError(f"role {label!r}: empty generation")
            acts.extend(trace.residual(layer, p, site) for p in positions)
        labels.append(label)
        rows.append(np.mean(np.array(acts), axis=0))
    return RoleCloud(tuple(labels), np.array(rows), layer, battery_id(battery))


def subspace_fraction(cloud: RoleCloud, basis: np.ndarray) -> float:
    """Share of the cloud's variance lying in the span of orthonormal ``basis`` rows."""
    x = cloud.vectors - cloud.vectors.mean(axis=0)
    total = float(np.sum(x * x))
    if total == 0.0:
        raise CloudError("cloud has zero variance")
    inside = x @ np.asarray(basis).T
    return float(np.sum(inside * inside)) / total


@dataclass(frozen=True, eq=False)
class AxisReport:
    pca: numcore.PcaResult
    k70: int
    assistant_axis: Direction
    loadings: tuple[float, ...]
    labels: tuple[str, ...]
    full_fractions: np.ndarray

    def to_dict(self) -> dict:
        return {
            "k70": self.k70,
            "variance_fraction": self.pca.variance_fraction.tolist(),
            "eigenvalues": self.pca.eigenvalues.tolist(),
            "assistant_axis": self.assistant_axis.to_dict(),
            "loadings": [{"label": lab, "pc1": val} for lab, val in zip(self.labels, self.loadings)],
        }

    def loadings_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "pc1"])
        for lab, val in zip(self.labels, self.loadings):
            w.writerow([lab, repr(val)])
        return buf.getvalue()


def k_for_fraction(fractions, target: float = 0.70) -> int:
    """Smallest k whose cumulative variance fraction reaches ``target``."""
    cum = 0.0
    for i, f in enumerate(fractions):
        cum += float(f)
        if cum >= target - 1e-12:
            return i + 1
    return len(fractions)


def analyze_cloud(cloud: RoleCloud, k: int | None = None, assistant_labels=None) -> AxisReport:
    """PCA of the role means; PC1 is the assistant axis.

    PC1's sign follows the PCA convention unless ``assistant_labels`` is
    given, in which case it is flipped so those roles load positively on
    average.
    """
    x = cloud.vectors
    distinct = np.unique(x, axis=0)
    if distinct.shape[0] < 2:
        raise CloudError("degenerate cloud: fewer than 2 distinct points")
    dim = cloud.dim
    k = dim if k is None else k
    if not 1 <= k <= dim:
        raise CloudError(f"k={k} must be in [1, {dim}]")
    full = numcore.pca(x, dim)
    pca = numcore.PcaResult(
        full.components[:k], full.eigenvalues[:k], full.variance_fraction[:k], full.mean, full.total_variance
    )
    axis = full.components[0]
    loadings = (x - full.mean) @ axis
    if assistant_labels:
        idx = [cloud.labels.index(lab) for lab in assistant_labels]
        if np.mean(loadings[idx]) < 0:
            axis, loadings = -axis, -loadings
    return AxisReport(
        pca,
        k_for_fraction(full.variance_fraction),
        Direction(numcore.normalize(axis), cloud.layer, "assistant-axis"),
        tuple(float(v) for v in loadings),
        cloud.labels,
        full.variance_fraction,
    )


def refine_assistant_axis(cloud: RoleCloud, assistant_labels, other_labels) -> Direction:
    a, o = set(assistant_labels), set(other_labels)
    if not a or not o:
        raise CloudError("both label sets must be nonempty")
    if a & o:
        raise CloudError(f"label sets overlap: {sorted(a & o)}")
    missing = (a | o) - set(cloud.labels)
    if missing:
        raise CloudError(f"unknown labels: {sorted(missing)}")
    # fixed summation order regardless of how the caller lists labels
    ma = np.mean(np.array([cloud.vectors[i] for i, lab in enumerate(cloud.labels) if lab in a]), axis=0)
    mo = np.mean(np.array([cloud.vectors[i] for i, lab in enumerate(cloud.labels) if lab in o]), axis=0)
    diff = ma - mo
    n = numcore.norm(diff)
    if n <= 1e-12:
        raise DegenerateContrastError("assistant and other roles have the same mean")
    return Direction(diff / n, cloud.layer, "assistant-axis-refined")


def synthetic_cloud(
    n_points: int = 5000,
    dim: int = 64,
    fractions=(0.40, 0.15, 0.10, 0.05),
    seed: int = 0,
):
    """Gaussian cloud with planted principal fractions plus isotropic noise.

    Total variance is 1; the leftover ``1 - sum(fractions)`` is spread evenly
    over all ``dim`` axes. Returns ``(points, axes, exact_fractions)`` where
    ``axes`` are the planted directions and ``exact_fractions`` the sorted
    eigenvalue fractions of the population covariance.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    rest = 1.0 - float(fractions.sum())
    if rest < 0 or len(fractions) > dim:
        raise ValueError("fractions must sum to <= 1 and fit in dim")
    rng = np.random.default_rng(seed)
    axes = np.linalg.qr(rng.normal(size=(dim, len(fractions))))[0].T
    sigma2 = rest / dim
    z = rng.normal(size=(n_points, len(fractions))) * np.sqrt(fractions)
    points = z @ axes + rng.normal(size=(n_points, dim)) * np.sqrt(sigma2)
    exact = np.sort(np.concatenate([fractions + sigma2, np.full(dim - len(fractions), sigma2)]))[::-1]
    return points, axes, exact


@dataclass(frozen=True)
class BasinReport:
    dwell: float
    entry_turn: int | None
    exit_turn: int | None
    returned: bool
    n_points: int

    def to_dict(self) -> dict:
        return {
            "dwell": self.dwell,
            "entry_turn": self.entry_turn,
            "exit_turn": self.exit_turn,
            "returned": self.returned,
            "n_points": self.n_points,
        }


def basin_diagnostics(series: ProjectionSeries, center: float, radius: float, role: TurnRole | None = None) -> BasinReport:
    """Dwell fraction, first entry, first exit after entry, and whether the series came back."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    points = list(series.points) if role is None else series.for_role(role)
    if not points:
        raise ValueError("empty series")
    inside = [abs(p.mean_projection - center) <= radius for p in points]
    entry = exit_ = None
    returned = False
    for p, ok in zip(points, inside):
        if entry is None:
            if ok:
                entry = p.turn
        elif exit_ is None:
            if not ok:
                exit_ = p.turn
        elif ok:
            returned = True
            break
    return BasinReport(sum(inside) / len(inside), entry, exit_, returned, len(points))
