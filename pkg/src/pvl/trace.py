"""Residual-stream and attention-stream recording.

A :class:`TraceRecorder` is an ordinary observer hook. Residuals are kept at
three sites per layer: ``pre`` (block input, after any layer-entry
modification), ``mid`` (after attention) and ``post`` (block output).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import numcore
from .model import GREEDY, DecodePolicy, Hook, Model
from .transcript import Transcript, TurnRole

SITES = ("pre", "mid", "post")


class TraceError(KeyError):
    pass


@dataclass(frozen=True)
class AttentionStreamRecord:
    layer: int
    head: int
    src_pos: int
    dst_pos: int
    weight: float
    value_contribution: np.ndarray  # d_model, after W_O


@dataclass
class _AttnStep:
    weights: np.ndarray  # (heads, dst + 1)
    values: np.ndarray  # (heads, dst + 1, d_head)
    w_o: np.ndarray  # (heads, d_model, d_head)

    def contributions(self) -> np.ndarray:
        """(heads, src, d_model): each source's weighted value pushed through W_O."""
        weighted = self.weights[:, :, None] * self.values
        return numcore.matvec(self.w_o[:, None], weighted)


@dataclass
class Trace:
    n_layers: int
    d_model: int
    resid: dict = field(default_factory=dict)  # (site, layer, pos) -> vec
    attn: dict = field(default_factory=dict)  # (layer, pos) -> _AttnStep
    logits: dict = field(default_factory=dict)  # pos -> vec
    experts: dict = field(default_factory=dict)  # (layer, pos) -> int
    roles: dict = field(default_factory=dict)  # pos -> TurnRole

    @property
    def positions(self) -> list[int]:
        return sorted(self.roles)

    def residual(self, layer: int, pos: int, site: str = "pre") -> np.ndarray:
        """Residual at a site; ``layer == n_layers`` with site 'pre' is the final block output."""
        if site == "pre" and layer == self.n_layers:
            site, layer = "post", self.n_layers - 1
        try:
            return self.resid[(site, layer, pos)]
        except KeyError:
            raise TraceError(f"no residual recorded at ({site}, layer {layer}, pos {pos})") from None

    def streams(self, dst_pos: int) -> list[AttentionStreamRecord]:
        out = []
        for layer in range(self.n_layers):
            step = self.attn.get((layer, dst_pos))
            if step is None:
                raise TraceError(f"position {dst_pos} not traced")
            contrib = step.contributions()
            for h in range(step.weights.shape[0]):
                for src in range(step.weights.shape[1]):
                    out.append(AttentionStreamRecord(layer, h, src, dst_pos, float(step.weights[h, src]), contrib[h, src]))
        return out

    def all_streams(self):
        for pos in self.positions:
            yield from self.streams(pos)

    def to_json(self) -> str:
        pos = self.positions
        doc = {
            "schema": "pvl-trace/1",
            "shape": {"n_layers": self.n_layers, "d_model": self.d_model, "n_positions": len(pos), "sites": list(SITES)},
            "roles": [self.roles[p].label for p in pos],
            "residual": {
                site: [[self.resid[(site, layer, p)].tolist() for p in pos] for layer in range(self.n_layers)]
                for site in SITES
            },
            "attention_weights": [[self.attn[(layer, p)].weights.tolist() for p in pos] for layer in range(self.n_layers)],
            "logits": [self.logits[p].tolist() for p in pos if p in self.logits],
            "experts": [[self.experts.get((layer, p), 0) for p in pos] for layer in range(self.n_layers)],
        }
        return json.dumps(doc)


class TraceRecorder(Hook):
    def __init__(self, n_layers: int, d_model: int):
        self.trace = Trace(n_layers, d_model)

    def observe_resid(self, site, where, x):
        self.trace.resid[(where, site.layer, site.pos)] = np.array(x, copy=True)
        self.trace.roles[site.pos] = site.role

    def observe_attention(self, site, weights, values, w_o):
        self.trace.attn[(site.layer, site.pos)] = _AttnStep(np.array(weights), np.array(values), w_o)

    def route(self, site, scores, choice):
        self.trace.experts[(site.layer, site.pos)] = choice
        return choice

    def observe_logits(self, site, logits):
        self.trace.logits[site.pos] = np.array(logits, copy=True)


def trace_run(model: Model, transcript: Transcript, n_new: int = 0, hooks=(), policy: DecodePolicy = GREEDY):
    """Generate like :meth:`Model.generate` while recording everything.

    The recorder is appended after the caller's hooks so it sees their
    modifications and final routing choices.
    """
    rec = TraceRecorder(model.spec.n_layers, model.spec.d_model)
    gen = model.decode(transcript, n_new, policy, tuple(hooks) + (rec,))
    return gen.transcript, rec.trace


def count_streams(n_heads: int, n_layers: int, pos: int) -> int:
    """Attention streams feeding the prediction made at (1-based) token ``pos``.

    One stream per head, layer and prior position.
    """
    if pos < 1:
        raise ValueError("pos must be >= 1")
    return n_heads * n_layers * (pos - 1) if pos > 1 else n_heads * n_layers


def count_streams_for(spec, pos: int) -> int:
    return count_streams(spec.n_heads, spec.n_layers, pos)


@dataclass(frozen=True)
class SeriesPoint:
    turn: int
    role: TurnRole
    mean_projection: float


@dataclass(frozen=True)
class ProjectionSeries:
    points: tuple[SeriesPoint, ...]

    def __len__(self) -> int:
        return len(self.points)

    def for_role(self, role: TurnRole) -> list[SeriesPoint]:
        return [p for p in self.points if p.role == role]

    def values(self, role: TurnRole | None = None) -> np.ndarray:
        pts = self.points if role is None else self.for_role(role)
        return np.array([p.mean_projection for p in pts])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["turn", "role", "mean_projection"])
        for p in self.points:
            w.writerow([p.turn, p.role.label, repr(p.mean_projection)])
        return buf.getvalue()


def projection_series(trace: Trace, axis, layer: int, transcript: Transcript, site: str = "pre") -> ProjectionSeries:
    """Per-turn mean projection of the residual onto ``axis``."""
    unit = getattr(axis, "unit", None)
    unit = numcore.normalize(axis) if unit is None else unit
    if unit.shape[0] != trace.d_model:
        raise numcore.DimensionError(f"axis dim {unit.shape[0]} != d_model {trace.d_model}")
    if not 0 <= layer <= trace.n_layers:
        raise TraceError(f"layer {layer} not traced")
    by_turn: dict[int, list[float]] = {}
    turn_of = transcript.turn_index
    for pos, turn in enumerate(turn_of):
        by_turn.setdefault(turn, []).append(numcore.dot(trace.residual(layer, pos, site), unit))
    points = [
        SeriesPoint(t, transcript.turns[t].role, float(np.mean(vals)))
        for t, vals in sorted(by_turn.items())
    ]
    return ProjectionSeries(tuple(points))


def top_streams(trace: Trace, dst_pos: int, k: int, direction=None) -> list[AttentionStreamRecord]:
    """Largest streams into ``dst_pos`` by |weight| or by |projection of the contribution|."""
    if dst_pos not in trace.roles:
        raise TraceError(f"position {dst_pos} not traced")
    if k <= 0:
        return []
    records = trace.streams(dst_pos)
    if direction is None:
        key = lambda r: abs(r.weight)  # noqa: E731
    else:
        unit = getattr(direction, "unit", None)
        unit = numcore.normalize(direction) if unit is None else unit
        key = lambda r: abs(numcore.dot(r.value_contribution, unit))  # noqa: E731
    records.sort(key=lambda r: (-key(r), r.layer, r.head, r.src_pos))
    return records[:k]
