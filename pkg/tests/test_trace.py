import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pvl import numcore
from pvl.model import build_random_model
from pvl.planted import MARK_PLUS, probe_suite
from pvl.trace import (
    TraceError,
    count_streams,
    count_streams_for,
    projection_series,
    top_streams,
    trace_run,
)
from pvl.transcript import Transcript, TurnRole


def test_tracing_is_non_intrusive(tiny):
    t = Transcript.build(tiny.vocab, [("user", "t1 t4 t2")])
    plain = tiny.decode(t, 4)
    out, tr = trace_run(tiny, t, 4)
    assert out == plain.transcript
    for pos, logits in plain.logits.items():
        assert tr.logits[pos].tobytes() == logits.tobytes()
    assert tr.positions == list(range(len(out)))


def test_two_token_one_head_weights_by_hand():
    m = build_random_model(d_model=4, n_layers=1, n_heads=1, d_mlp=4, vocab_size=5, seed=2)
    t = Transcript.build(m.vocab, [("user", "t1 t3")])
    _, tr = trace_run(m, t, 0)
    lw = m.weights.layers[0]
    xs = [tr.residual(0, p, "pre") for p in (0, 1)]
    n = [numcore.rms_norm(x, lw.norm1) for x in xs]
    scores = np.array([(lw.w_q[0] @ n[1]) @ (lw.w_k[0] @ n[j]) for j in (0, 1)]) / np.sqrt(4)
    expect = np.exp(scores - scores.max())
    expect /= expect.sum()
    got = {r.src_pos: r.weight for r in tr.streams(1)}
    np.testing.assert_allclose([got[0], got[1]], expect, rtol=1e-12)


def test_planted_copy_head_attends_to_marker(planted):
    p = probe_suite(planted, MARK_PLUS)[3]
    _, tr = trace_run(planted, p.transcript, 0)
    last = len(p.transcript) - 1
    for layer in planted.planted.copy_layers:
        rec = [r for r in tr.streams(last) if r.layer == layer and r.head == 0 and r.src_pos == 1]
        assert rec[0].weight >= 0.9


def test_weights_sum_to_one_and_decomposition(tiny):
    t = Transcript.build(tiny.vocab, [("system", "t2"), ("user", "t1 t4 t7")])
    _, tr = trace_run(tiny, t, 3)
    for pos in tr.positions:
        recs = tr.streams(pos)
        for layer in range(tiny.spec.n_layers):
            sub = [r for r in recs if r.layer == layer]
            for h in range(tiny.spec.n_heads):
                assert abs(sum(r.weight for r in sub if r.head == h) - 1.0) <= 1e-12
            total = tr.residual(layer, pos, "pre") + np.sum([r.value_contribution for r in sub], axis=0)
            np.testing.assert_allclose(total, tr.residual(layer, pos, "mid"), atol=1e-8, rtol=0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 50), n=st.integers(1, 8), n_new=st.integers(0, 3))
def test_decomposition_property(seed, n, n_new):
    m = build_random_model(seed=seed, n_experts=2)
    rng = np.random.default_rng(seed)
    words = " ".join(m.vocab.symbols[i] for i in rng.integers(6, m.spec.vocab_size, size=n))
    _, tr = trace_run(m, Transcript.build(m.vocab, [("user", words)]), n_new)
    for pos in tr.positions:
        recs = tr.streams(pos)
        for layer in range(m.spec.n_layers):
            contrib = np.sum([r.value_contribution for r in recs if r.layer == layer], axis=0)
            err = np.max(np.abs(tr.residual(layer, pos, "pre") + contrib - tr.residual(layer, pos, "mid")))
            assert err <= 1e-8


def test_count_streams_examples(tiny):
    assert count_streams(8, 80, 101) == 64_000
    assert count_streams(3, 5, 1) == 15
    assert count_streams(2, 2, 6) == 20
    assert count_streams_for(tiny.spec, 11) == tiny.spec.n_heads * tiny.spec.n_layers * 10
    with pytest.raises(ValueError):
        count_streams(8, 80, 0)


def test_projection_series_zero_axis_component(tiny):
    t = Transcript.build(tiny.vocab, [("user", "t1 t4"), ("assistant", "t2"), ("user", "t3")])
    _, tr = trace_run(tiny, t, 0)
    with pytest.raises(numcore.DimensionError):
        projection_series(tr, np.ones(3), 0, t)
    with pytest.raises(TraceError):
        projection_series(tr, np.ones(tiny.spec.d_model), 9, t)
    s = projection_series(tr, np.eye(tiny.spec.d_model)[0], 1, t)
    assert [p.turn for p in s.points] == [0, 1, 2]
    assert [p.role for p in s.points] == [TurnRole.USER, TurnRole.ASSISTANT, TurnRole.USER]
    assert len(s.for_role(TurnRole.USER)) == 2
    rows = list(csv.reader(io.StringIO(s.to_csv())))
    assert rows[0] == ["turn", "role", "mean_projection"] and len(rows) == 4


def test_projection_series_single_turn(tiny):
    t = Transcript.build(tiny.vocab, [("user", "t1")])
    _, tr = trace_run(tiny, t, 0)
    s = projection_series(tr, np.eye(tiny.spec.d_model)[2], 0, t)
    assert len(s) == 1
    assert s.points[0].mean_projection == tr.residual(0, 0)[2]


def test_drift_script_falls_along_gateway(planted, drift):
    _, tr = trace_run(planted, drift, 0)
    info = planted.planted
    s = projection_series(tr, info.gateway, info.readout_layer, drift)
    assistant = s.values(TurnRole.ASSISTANT)
    assert assistant[0] > 0 > assistant[-1]


def test_top_streams(planted):
    p = probe_suite(planted, MARK_PLUS)[3]
    _, tr = trace_run(planted, p.transcript, 0)
    last = len(p.transcript) - 1
    assert top_streams(tr, last, 0) == []
    every = tr.streams(last)
    assert len(top_streams(tr, last, 10_000)) == len(every)
    best = top_streams(tr, last, 1, planted.planted.gateway)[0]
    assert best.src_pos == 1 and best.head == 0
    with pytest.raises(TraceError):
        top_streams(tr, 99, 3)


def test_trace_json_shape(tiny):
    t = Transcript.build(tiny.vocab, [("user", "t1 t4")])
    _, tr = trace_run(tiny, t, 1)
    doc = json.loads(tr.to_json())
    assert doc["shape"]["n_positions"] == 3
    assert len(doc["residual"]["mid"]) == tiny.spec.n_layers
    with pytest.raises(TraceError):
        tr.residual(0, 7)
