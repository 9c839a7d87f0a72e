import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pvl import numcore
from pvl.model import ModelError, build_random_model
from pvl.persona import (
    CapPlan,
    DegenerateContrastError,
    Direction,
    SteeringPlan,
    cap_hook,
    extract_direction,
    fold_bias,
    layer_sweep,
    probe_answer,
    steering_hook,
)
from pvl.planted import MARK_MINUS, MARK_PLUS, persona_prompts, probe_suite
from pvl.trace import trace_run
from pvl.transcript import Transcript, TurnRole


def _unit(d, i=0):
    return Direction(np.eye(d)[i], 0, "e")


def test_direction_validation_and_io(tmp_path):
    with pytest.raises(ValueError):
        Direction(np.array([1.0, 1.0]))
    d = Direction.of([3.0, 4.0], 2, "x")
    np.testing.assert_allclose(d.unit, [0.6, 0.8])
    path = tmp_path / "d.json"
    d.save(path)
    back = Direction.load(path)
    assert back.unit.tobytes() == d.unit.tobytes() and back.layer == 2 and back.label == "x"
    assert (-d).unit.tolist() == [-0.6, -0.8]
    with pytest.raises(ValueError):
        Direction.from_dict({"unit": [1.0], "dim": 2})


def test_plan_validation(tiny):
    u = _unit(tiny.spec.d_model)
    with pytest.raises(ValueError):
        SteeringPlan(u, (0, 0), float("inf"))
    with pytest.raises(ValueError):
        SteeringPlan(u, (1, 0), 1.0)
    with pytest.raises(ValueError):
        CapPlan(u, (0, 0), float("nan"))
    with pytest.raises(ValueError):
        CapPlan(u, (0, 0), 0.0, "sometimes")
    with pytest.raises(ModelError):
        steering_hook(SteeringPlan(u, (0, 5), 1.0), tiny)
    with pytest.raises(numcore.DimensionError):
        steering_hook(SteeringPlan(_unit(3), (0, 0), 1.0), tiny)


# --- extraction --------------------------------------------------------------


def test_extraction_recovers_planted_gateway(planted):
    layer = 2
    d = extract_direction(planted, persona_prompts(planted, MARK_PLUS), persona_prompts(planted, MARK_MINUS), layer)
    assert numcore.cosine(d.unit, planted.planted.gateway.unit) >= 0.95


def test_extraction_single_prompt_each(planted):
    d = extract_direction(planted, persona_prompts(planted, MARK_PLUS, 1), persona_prompts(planted, MARK_MINUS, 1), 2)
    assert d.dim == planted.spec.d_model and d.layer == 2


def test_extraction_degenerate_and_errors(planted):
    same = persona_prompts(planted, MARK_PLUS, 2)
    with pytest.raises(DegenerateContrastError):
        extract_direction(planted, same, same, 2)
    with pytest.raises(ValueError):
        extract_direction(planted, [], same, 2)
    with pytest.raises(ModelError):
        extract_direction(planted, same, same, 99)


# --- steering ----------------------------------------------------------------


def test_alpha_zero_is_bit_identical(tiny):
    t = Transcript.build(tiny.vocab, [("user", "t1 t4 t2")])
    hook = steering_hook(SteeringPlan(_unit(tiny.spec.d_model, 3), (0, 1), 0.0), tiny)
    a, b = tiny.decode(t, 4), tiny.decode(t, 4, hooks=(hook,))
    assert a.new_tokens == b.new_tokens
    assert all(a.logits[p].tobytes() == b.logits[p].tobytes() for p in a.logits)


@pytest.mark.parametrize("alpha,suite,side", [(2.0, MARK_MINUS, "plus"), (-2.0, MARK_PLUS, "minus")])
def test_pre_readout_steering_flips_all(planted, alpha, suite, side):
    hook = steering_hook(SteeringPlan(planted.planted.gateway, (3, 3), alpha), planted)
    probes = probe_suite(planted, suite)
    assert sum(probe_answer(planted, p, (hook,)) == getattr(p, side) for p in probes) == 20


@pytest.mark.parametrize("alpha,suite", [(2.0, MARK_MINUS), (-2.0, MARK_PLUS)])
def test_post_readout_steering_changes_nothing(planted, alpha, suite):
    hook = steering_hook(SteeringPlan(planted.planted.gateway, (4, 4), alpha), planted)
    for p in probe_suite(planted, suite):
        assert probe_answer(planted, p, (hook,)) == probe_answer(planted, p)


@settings(max_examples=20, deadline=None)
@given(alpha=st.floats(-5, 5, allow_nan=False), layer=st.integers(0, 1), axis=st.integers(0, 15))
def test_steering_shifts_layer_input_by_alpha(alpha, layer, axis):
    m = build_random_model(seed=3)
    t = Transcript.build(m.vocab, [("user", "t1 t4 t2")])
    u = _unit(16, axis)
    _, base = trace_run(m, t, 0)
    _, steered = trace_run(m, t, 0, (steering_hook(SteeringPlan(u, (layer, layer), alpha), m),))
    for pos in range(len(t)):
        delta = steered.residual(layer, pos) - base.residual(layer, pos)
        np.testing.assert_allclose(delta, alpha * u.unit, atol=1e-12)


def test_phase_filters(tiny):
    t = Transcript.build(tiny.vocab, [("user", "t1 t4"), ("assistant", "t2")])
    u = _unit(tiny.spec.d_model)
    _, base = trace_run(tiny, t, 0)
    _, user_only = trace_run(tiny, t, 0, (steering_hook(SteeringPlan(u, (0, 0), 1.0, "user_only")),))
    assert user_only.residual(0, 2).tobytes() == base.residual(0, 2).tobytes()
    assert user_only.residual(0, 0)[0] == pytest.approx(base.residual(0, 0)[0] + 1.0)


# --- capping -----------------------------------------------------------------


def test_cap_far_below_is_identity(tiny):
    t = Transcript.build(tiny.vocab, [("user", "t1 t4")])
    hook = cap_hook(CapPlan(_unit(tiny.spec.d_model), (0, 1), -1e9), tiny)
    a, b = tiny.decode(t, 5), tiny.decode(t, 5, hooks=(hook,))
    assert a.new_tokens == b.new_tokens
    assert all(a.logits[p].tobytes() == b.logits[p].tobytes() for p in a.logits)


@settings(max_examples=60, deadline=None)
@given(
    x=st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=6, max_size=6),
    raw=st.lists(st.floats(-1, 1, allow_nan=False), min_size=6, max_size=6),
    tau=st.floats(-100, 100, allow_nan=False),
)
def test_clamp_reaches_threshold_and_is_idempotent(x, raw, tau):
    v = np.array(raw)
    if numcore.norm(v) < 1e-3:
        v = np.eye(6)[0]
    hook = cap_hook(CapPlan(Direction.of(v), (0, 0), tau))
    y = hook.clamp(np.array(x))
    assert numcore.dot(y, hook.unit) >= tau
    assert hook.clamp(y).tobytes() == y.tobytes()


def test_generation_only_cap_leaves_user_positions(planted, drift):
    info = planted.planted
    hook = cap_hook(CapPlan(info.gateway, (0, 3), 0.1), planted)
    _, base = trace_run(planted, drift, 0)
    _, capped = trace_run(planted, drift, 0, (hook,))
    for pos, role in enumerate(drift.roles):
        if role != TurnRole.ASSISTANT:
            for layer in range(planted.spec.n_layers):
                assert np.max(np.abs(capped.residual(layer, pos) - base.residual(layer, pos))) <= 1e-9
        else:
            for layer in range(4):
                assert numcore.dot(capped.residual(layer, pos), info.gateway.unit) >= 0.1


# --- folding -----------------------------------------------------------------


def test_fold_alpha_zero_keeps_weights(tiny):
    folded = fold_bias(tiny, _unit(tiny.spec.d_model), 0.0, 1)
    for (_, a), (_, b) in zip(tiny.weights.tensors(), folded.weights.tensors()):
        assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("layer", [0, 1])
@pytest.mark.parametrize("alpha", [-1.5, 0.5, 3.0])
def test_fold_matches_steering(seed, layer, alpha):
    m = build_random_model(seed=seed)
    rng = np.random.default_rng(seed)
    d = Direction.of(rng.normal(size=16))
    t = Transcript.build(m.vocab, [("user", "t1 t4 t2 t9")])
    steered = m.decode(t, 3, hooks=(steering_hook(SteeringPlan(d, (layer, layer), alpha), m),))
    folded = fold_bias(m, d, alpha, layer).decode(t, 3)
    assert steered.new_tokens == folded.new_tokens
    for p in steered.logits:
        a, b = steered.logits[p], folded.logits[p]
        assert numcore.norm(a - b) / max(numcore.norm(a), 1e-300) <= 1e-9


def test_fold_errors(tiny):
    with pytest.raises(ModelError):
        fold_bias(tiny, _unit(tiny.spec.d_model), 1.0, tiny.spec.n_layers)
    with pytest.raises(numcore.DimensionError):
        fold_bias(tiny, _unit(4), 1.0, 0)


# --- sweeps ------------------------------------------------------------------


def test_layer_sweep_gates_before_readout(planted):
    info = planted.planted
    curve = layer_sweep(planted, info.gateway, 2.0, probe_suite(planted, MARK_MINUS))
    assert curve.flip_rates[info.readout_layer] == 1.0
    assert all(r == 0.0 for r in curve.flip_rates[info.readout_layer + 1 :])
    assert curve.as_dict()["layers"] == list(range(planted.spec.n_layers))


def test_layer_sweep_flat_controls(planted):
    probes = probe_suite(planted, MARK_MINUS)
    assert set(layer_sweep(planted, planted.planted.gateway, 0.0, probes).flip_rates) == {0.0}
    ortho = numcore.normalize(np.eye(64)[7] - numcore.dot(np.eye(64)[7], planted.planted.gateway.unit) * planted.planted.gateway.unit)
    ortho_dir = Direction(ortho, 0, "ortho")
    rates = layer_sweep(planted, ortho_dir, 0.5, probes).flip_rates
    assert len(set(rates)) == 1
    with pytest.raises(ValueError):
        layer_sweep(planted, planted.planted.gateway, 1.0, [])
