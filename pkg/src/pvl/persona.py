"""Persona directions: extraction, steering, capping, bias folding, layer sweeps."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore
from .model import Hook, Model, ModelError
from .trace import trace_run
from .transcript import Transcript, TurnRole

PHASES = ("generation_only", "user_only", "all")


class DegenerateContrastError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Direction:
    unit: np.ndarray
    layer: int = 0
    label: str = "direction"

    def __post_init__(self):
        u = numcore.as_vec(self.unit)
        if abs(numcore.norm(u) - 1.0) > 1e-10:
            raise ValueError(f"direction {self.label!r} is not unit length (norm {numcore.norm(u)})")
        object.__setattr__(self, "unit", u)

    @classmethod
    def of(cls, vec, layer: int = 0, label: str = "direction") -> "Direction":
        return cls(numcore.normalize(numcore.as_vec(vec)), layer, label)

    @property
    def dim(self) -> int:
        return self.unit.shape[0]

    def __neg__(self) -> "Direction":
        return Direction(-self.unit, self.layer, f"-{self.label}")

    def to_dict(self) -> dict:
        return {"label": self.label, "layer": self.layer, "dim": self.dim, "unit": self.unit.tolist()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, data: dict) -> "Direction":
        try:
            unit = numcore.as_vec(data["unit"])
            if int(data["dim"]) != unit.shape[0]:
                raise ValueError(f"dim {data['dim']} != len(unit) {unit.shape[0]}")
            # renormalize to absorb decimal round-off in hand-edited files
            return cls.of(unit, int(data["layer"]), str(data["label"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed direction: {exc}") from None

    @classmethod
    def load(cls, path) -> "Direction":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _phase_matches(phase: str, role: TurnRole) -> bool:
    if phase == "all":
        return True
    if phase == "generation_only":
        return role == TurnRole.ASSISTANT
    return role == TurnRole.USER


def _check_common(direction: Direction, layers, phase: str) -> tuple[int, int]:
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}, not {phase!r}")
    lo, hi = (layers, layers) if isinstance(layers, int) else tuple(layers)
    if lo > hi or lo < 0:
        raise ValueError(f"bad layer range {layers}")
    return int(lo), int(hi)


@dataclass(frozen=True)
class SteeringPlan:
    direction: Direction
    layers: tuple[int, int]  # inclusive
    alpha: float
    phase: str = "all"

    def __post_init__(self):
        object.__setattr__(self, "layers", _check_common(self.direction, self.layers, self.phase))
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")

    def check(self, model: Model) -> None:
        _check_against(model, self.direction, self.layers)


@dataclass(frozen=True)
class CapPlan:
    direction: Direction
    layers: tuple[int, int]
    threshold: float
    phase: str = "generation_only"

    def __post_init__(self):
        object.__setattr__(self, "layers", _check_common(self.direction, self.layers, self.phase))
        if math.isnan(self.threshold):
            raise ValueError("threshold must not be NaN")

    def check(self, model: Model) -> None:
        _check_against(model, self.direction, self.layers)


def _check_against(model: Model, direction: Direction, layers) -> None:
    if direction.dim != model.spec.d_model:
        raise numcore.DimensionError(f"direction dim {direction.dim} != d_model {model.spec.d_model}")
    if layers[1] >= model.spec.n_layers:
        raise ModelError(f"layer range {layers} outside model with {model.spec.n_layers} layers")


class SteeringHook(Hook):
    def __init__(self, plan: SteeringPlan):
        self.plan = plan
        self._delta = plan.alpha * plan.direction.unit

    def modify_resid(self, site, x):
        lo, hi = self.plan.layers
        if lo <= site.layer <= hi and _phase_matches(self.plan.phase, site.role):
            return x + self._delta
        return x


class CapHook(Hook):
    """One-sided clamp of the projection onto the plan's direction.

    Adding ``(tau - proj) * unit`` lands within a few ulps of ``tau``; when
    rounding leaves it just below, the residual is nudged up along ``unit``
    until the recomputed projection is at least ``tau``.
    """

    def __init__(self, plan: CapPlan):
        self.plan = plan
        self.unit = plan.direction.unit

    def clamp(self, x: np.ndarray) -> np.ndarray:
        tau = self.plan.threshold
        proj = numcore.dot(x, self.unit)
        if not proj < tau:
            return x
        y = x + (tau - proj) * self.unit
        step = np.spacing(max(abs(tau), abs(proj), 1.0))
        while numcore.dot(y, self.unit) < tau:
            y = y + step * self.unit
            step *= 2.0
        return y

    def modify_resid(self, site, x):
        lo, hi = self.plan.layers
        if lo <= site.layer <= hi and _phase_matches(self.plan.phase, site.role):
            return self.clamp(x)
        return x


def steering_hook(plan: SteeringPlan, model: Model | None = None) -> SteeringHook:
    if model is not None:
        plan.check(model)
    return SteeringHook(plan)


def cap_hook(plan: CapPlan, model: Model | None = None) -> CapHook:
    if model is not None:
        plan.check(model)
    return CapHook(plan)


def response_positions(prompt: Transcript, out: Transcript) -> list[int]:
    """Generated positions, or the prompt's final assistant turn when nothing was generated."""
    n = len(prompt)
    if len(out) > n:
        return list(range(n, len(out)))
    if prompt.turns and prompt.turns[-1].role == TurnRole.ASSISTANT:
        return list(range(n - len(prompt.turns[-1].tokens), n))
    return []


def mean_response_residual(model: Model, prompts, layer: int, n_new: int = 2, site: str = "pre") -> np.ndarray:
    rows = []
    for prompt in prompts:
        out, trace = trace_run(model, prompt, n_new)
        positions = response_positions(prompt, out)
        if not positions:
            raise ValueError("prompt produced no response tokens")
        rows.extend(trace.residual(layer, p, site) for p in positions)
    return np.mean(np.array(rows), axis=0)


def extract_direction(
    model: Model, positive_prompts, negative_prompts, layer: int, n_new: int = 2, site: str = "pre", label: str = "persona"
) -> Direction:
    """Mean-difference direction between response-token activations of two prompt sets."""
    if not positive_prompts or not negative_prompts:
        raise ValueError("need at least one prompt per side")
    if not 0 <= layer <= model.spec.n_layers:
        raise ModelError(f"layer {layer} out of range")
    diff = mean_response_residual(model, positive_prompts, layer, n_new, site) - mean_response_residual(
        model, negative_prompts, layer, n_new, site
    )
    n = numcore.norm(diff)
    if n <= 1e-12:
        raise DegenerateContrastError("positive and negative prompts give the same mean activation")
    return Direction(diff / n, layer, label)


def fold_bias(model: Model, direction: Direction, alpha: float, layer: int) -> Model:
    """Bake ``alpha * unit`` into the weights so it enters layer ``layer`` on every pass.

    For layer > 0 the vector goes into the previous block's output bias, which
    is bit-equivalent to a steering hook at layer entry. For layer 0 it goes
    into every embedding row.
    """
    if not 0 <= layer < model.spec.n_layers:
        raise ModelError(f"layer {layer} outside [0, {model.spec.n_layers - 1}]")
    if direction.dim != model.spec.d_model:
        raise numcore.DimensionError(f"direction dim {direction.dim} != d_model {model.spec.d_model}")
    weights = model.weights.copy()
    if alpha == 0:
        return model.with_weights(weights, model.spec.model_id)
    delta = alpha * direction.unit
    if layer == 0:
        weights.embed = weights.embed + delta
    else:
        lw = weights.layers[layer - 1]
        lw.b_out = lw.b_out + delta
    return model.with_weights(weights, f"{model.spec.model_id}+fold({direction.label},{alpha!r},{layer})")


@dataclass(frozen=True)
class Probe:
    """A context whose next emitted token is the behavior being measured."""

    label: str
    transcript: Transcript
    plus: int | None = None  # token preferred on the positive side
    minus: int | None = None

    def score(self, token: int) -> int:
        return 1 if token == self.plus else -1 if token == self.minus else 0


def probe_answer(model: Model, probe, hooks=()) -> int:
    transcript = getattr(probe, "transcript", probe)
    return model.decode(transcript, 1, hooks=hooks).new_tokens[0]


@dataclass(frozen=True)
class SweepCurve:
    layers: tuple[int, ...]
    flip_rates: tuple[float, ...]

    def as_dict(self) -> dict:
        return {"layers": list(self.layers), "flip_rates": list(self.flip_rates)}


def layer_sweep(model: Model, direction: Direction, alpha: float, probe_suite) -> SweepCurve:
    """Flip rate of the suite when steering at one layer at a time."""
    probes = list(probe_suite)
    if not probes:
        raise ValueError("empty probe suite")
    base = [probe_answer(model, p) for p in probes]
    rates = []
    for layer in range(model.spec.n_layers):
        hook = steering_hook(SteeringPlan(direction, (layer, layer), alpha, "all"), model)
        flips = sum(probe_answer(model, p, (hook,)) != b for p, b in zip(probes, base))
        rates.append(flips / len(probes))
    return SweepCurve(tuple(range(model.spec.n_layers)), tuple(rates))
