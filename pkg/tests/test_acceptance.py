"""The twelve acceptance criteria, each at its stated tolerance and time budget.

Run with ``pytest tests/test_acceptance.py`` (one PASS/FAIL line per
criterion is printed in the terminal summary) or directly as a script.
"""

import time

import numpy as np
import pytest

from pvl import numcore
from pvl.harness import config
from pvl.harness.experiments import (
    cache_max_abs_diff,
    determinism_model,
    exp_mini2,
    exp_model_change,
    exp_plan_persistence,
    exp_serving_transfer,
    random_transcript,
)
from pvl.kvcache import cache_divergence, prefill, prefill_transcript, rebuild_for_model
from pvl.model import ForceExpert, build_random_model
from pvl.persona import CapPlan, Direction, SteeringPlan, cap_hook, extract_direction, fold_bias, probe_answer, steering_hook
from pvl.planted import MARK_MINUS, MARK_PLUS, persona_prompts, planted_model, probe_suite
from pvl.space import RoleCloud, analyze_cloud, synthetic_cloud
from pvl.trace import count_streams, trace_run
from pvl.transcript import TurnRole

RESULTS: list[str] = []


def _record(number: int, name: str, ok: bool, seconds: float, budget: float, detail: str) -> None:
    status = "PASS" if ok and seconds < budget else "FAIL"
    RESULTS.append(f"[{status}] {number:2d} {name}: {detail} ({seconds:.2f} s, limit {budget:g} s)")


def _timed(number, name, budget, fn):
    start = time.perf_counter()
    ok, detail = fn()
    seconds = time.perf_counter() - start
    _record(number, name, ok, seconds, budget, detail)
    assert ok, detail
    assert seconds < budget, f"took {seconds:.2f} s, limit {budget} s"


# --- criteria -----------------------------------------------------------------


def c01_prefill_determinism():
    worst = 0.0
    equal = 0
    for seed in range(10):
        m = determinism_model(seed)
        prompt = random_transcript(m, seed, 12)
        gen = m.decode(prompt, 64 - len(prompt))
        assert len(gen.transcript) <= 64
        seq = prefill_transcript(m, gen.transcript)
        par = prefill_transcript(m, gen.transcript, parallel=True)
        gen_cache = gen.cache
        seq_cut = seq.truncated(len(gen_cache))
        worst = max(worst, cache_max_abs_diff(gen_cache, seq_cut), cache_max_abs_diff(seq, par))
        equal += gen_cache.bit_equal(seq_cut) and seq.bit_equal(par)
    return equal == 10 and worst == 0.0, f"{equal}/10 bit-equal, max |diff| {worst}"


def c02_serving_transfer():
    bad = 0
    for seed in range(10):
        m = determinism_model(seed)
        script = random_transcript(m, seed, 10)
        n = len(script)
        rep = exp_serving_transfer(m, script, (n + 4, n + 11), 20)
        bad += rep.metrics["mismatches_transfer"] + rep.metrics["mismatches_prefill"]
    return bad == 0, f"{bad} token mismatches over 10 seeds x 2 splits"


def c03_model_change():
    divs = []
    for seed in range(3):
        a, b = determinism_model(seed), determinism_model(seed + 100)
        t = random_transcript(a, seed, 12)
        divs.append(cache_divergence(prefill_transcript(a, t), rebuild_for_model(t, b)))
    plain = planted_model("default")
    rep = exp_model_change(plain, planted_model("plan-divergent"), config.script("plan", plain.vocab))
    endings = f"({rep.observations['ending_a']!r} vs {rep.observations['ending_b']!r})"
    ok = min(divs) > 0.1 and rep.metrics["endings_differ"] == 1
    return ok, f"min divergence {min(divs):.3f}; planted endings differ={rep.metrics['endings_differ']} {endings}"


def c04_steer_fold():
    worst = 0.0
    for seed in range(5):
        m = determinism_model(seed)
        d = Direction.of(np.random.default_rng(seed).normal(size=m.spec.d_model))
        t = random_transcript(m, seed, 8)
        for alpha in (-2.0, 0.5, 3.0):
            for layer in (0, 1):
                a = m.decode(t, 4, hooks=(steering_hook(SteeringPlan(d, (layer, layer), alpha), m),))
                b = fold_bias(m, d, alpha, layer).decode(t, 4)
                if a.new_tokens != b.new_tokens:
                    return False, f"token mismatch at seed {seed} alpha {alpha} layer {layer}"
                for p in a.logits:
                    rel = numcore.norm(a.logits[p] - b.logits[p]) / max(numcore.norm(a.logits[p]), 1e-300)
                    worst = max(worst, rel)
    return worst <= 1e-9, f"max relative logit diff {worst:.2e} over 5 seeds x 3 alphas x 2 layers"


def c05_gateway():
    m = planted_model("default")
    info = m.planted
    pre, post = info.readout_layer, info.readout_layer + 1
    lines = []
    ok = True
    for alpha, suite, side in ((2.0, MARK_MINUS, "plus"), (-2.0, MARK_PLUS, "minus")):
        probes = probe_suite(m, suite)
        base = [probe_answer(m, p) for p in probes]
        for how in ("steer", "fold"):
            for layer, want in ((pre, 20), (post, 0)):
                if how == "steer":
                    answers = [probe_answer(m, p, (steering_hook(SteeringPlan(info.gateway, (layer, layer), alpha), m),)) for p in probes]
                else:
                    folded = fold_bias(m, info.gateway, alpha, layer)
                    answers = [probe_answer(folded, p) for p in probes]
                if layer == pre:
                    n = sum(a == getattr(p, side) and b != a for a, b, p in zip(answers, base, probes))
                else:
                    n = sum(a != b for a, b in zip(answers, base))
                ok &= n == want
                lines.append(f"{how}@L{layer} a={alpha:+g}: {n}/20")
    return ok, "; ".join(lines)


def c06_extraction():
    m = planted_model("default")
    d = extract_direction(m, persona_prompts(m, MARK_PLUS, 4), persona_prompts(m, MARK_MINUS, 4), 2)
    cos = numcore.cosine(d.unit, m.planted.gateway.unit)
    return cos >= 0.95, f"cosine {cos:.4f} with 4 prompts per side"


def c07_capping():
    m = planted_model("default")
    drift = config.script("drift", m.vocab)
    th = config.thresholds_for("mini1")
    tau, (lo, hi) = th["tau"], th["cap_layers"]
    unit = m.planted.gateway.unit
    _, base = trace_run(m, drift, 0)
    _, capped = trace_run(m, drift, 0, (cap_hook(CapPlan(m.planted.gateway, (lo, hi), tau), m),))
    min_proj = np.inf
    user_delta = 0.0
    for pos, role in enumerate(drift.roles):
        if role == TurnRole.ASSISTANT:
            for layer in range(lo, hi + 1):
                min_proj = min(min_proj, numcore.dot(capped.residual(layer, pos), unit))
        elif role == TurnRole.USER:
            for layer in range(m.spec.n_layers):
                for site in ("pre", "mid", "post"):
                    user_delta = max(user_delta, float(np.max(np.abs(capped.residual(layer, pos, site) - base.residual(layer, pos, site)))))
    ok = min_proj >= tau and user_delta <= 1e-9
    return ok, f"min assistant projection {min_proj!r} (tau {tau}); max user delta {user_delta:.1e}"


def c08_kv_edit():
    m = planted_model("default")
    aura = config.script("aura", m.vocab)
    rep = exp_mini2(m, aura)
    ctrl = exp_mini2(m, aura, factor=1.0)
    mt = rep.metrics
    crossed = mt["battery_score_before"] < 0 < mt["battery_score_after"]
    ok = mt["identity_flips_greedy"] == 10 and crossed and ctrl.metrics["identity_flips_greedy"] == 0
    return ok, (
        f"identity flips {mt['identity_flips_greedy']}/10, battery {mt['battery_score_before']} -> "
        f"{mt['battery_score_after']}, factor 1.0 flips {ctrl.metrics['identity_flips_greedy']}/10"
    )


def c09_pca():
    points, axes, exact = synthetic_cloud()
    rep = analyze_cloud(RoleCloud(tuple(f"r{i}" for i in range(len(points))), points, 0), k=4)
    err = float(np.max(np.abs(rep.pca.variance_fraction - exact[:4])))
    cos = abs(numcore.cosine(rep.assistant_axis.unit, axes[0]))
    ok = rep.k70 == 4 and err <= 0.03 and cos >= 0.99
    return ok, f"k70 {rep.k70}, max fraction error {err:.4f}, |cos PC1| {cos:.4f}"


def c10_streams():
    count = count_streams(8, 80, 101)
    worst = 0.0
    runs = [(determinism_model(s), random_transcript(determinism_model(s), s, 6), 3) for s in range(3)]
    for model, t, n_new in runs:
        _, tr = trace_run(model, t, n_new)
        for pos in tr.positions:
            recs = tr.streams(pos)
            for layer in range(model.spec.n_layers):
                contrib = np.sum([r.value_contribution for r in recs if r.layer == layer], axis=0)
                err = float(np.max(np.abs(tr.residual(layer, pos, "pre") + contrib - tr.residual(layer, pos, "mid"))))
                worst = max(worst, err)
    return count == 64_000 and worst <= 1e-8, f"count_streams(8, 80, 101) = {count}; max decomposition error {worst:.1e}"


def c11_plan():
    m = planted_model("default")
    rep = exp_plan_persistence(m, config.script("plan", m.vocab))
    mt = rep.metrics
    ok = (
        mt["trigger_found"] == 1
        and mt["plan_activation"] >= rep.thresholds["activation_threshold"]
        and mt["payoff_at_delay"] == 1
        and mt["ending_changed_after_zeroing"] == 1
    )
    return ok, (
        f"plan activation {mt['plan_activation']:.3f}, payoff at delay {mt['payoff_at_delay']}, "
        f"ending changed {mt['ending_changed_after_zeroing']}"
    )


def c12_moe_locality():
    checked = 0
    for seed in range(5):
        m = build_random_model(d_model=16, n_layers=3, n_heads=2, d_mlp=8, vocab_size=12, n_experts=3, seed=seed)
        toks = np.random.default_rng(seed).integers(0, 12, size=6).tolist()
        base = prefill(m, toks)
        for layer in range(m.spec.n_layers):
            for expert in range(3):
                forced = prefill(m, toks, hooks=(ForceExpert(layer, expert, [len(toks) - 1]),))
                for l in range(layer + 1):
                    if forced.keys(l).tobytes() != base.keys(l).tobytes() or forced.values(l).tobytes() != base.values(l).tobytes():
                        return False, f"seed {seed}: forcing expert {expert} at layer {layer} changed layer {l}"
                checked += 1
    return True, f"{checked} forced-expert runs left KV at layers <= l bit-unchanged"


CRITERIA = [
    (1, "prefill determinism", 5, c01_prefill_determinism),
    (2, "serving transfer", 5, c02_serving_transfer),
    (3, "model change", 5, c03_model_change),
    (4, "steering equals folded bias", 5, c04_steer_fold),
    (5, "gateway gating", 10, c05_gateway),
    (6, "extraction fidelity", 5, c06_extraction),
    (7, "capping contract", 10, c07_capping),
    (8, "kv-cache persona edit", 10, c08_kv_edit),
    (9, "persona-space pca", 5, c09_pca),
    (10, "stream counting", 1, c10_streams),
    (11, "plan persistence", 5, c11_plan),
    (12, "moe/kv locality", 5, c12_moe_locality),
]


@pytest.mark.parametrize("number,name,budget,fn", CRITERIA, ids=[f"c{n:02d}" for n, *_ in CRITERIA])
def test_criterion(number, name, budget, fn):
    _timed(number, name, budget, fn)


if __name__ == "__main__":
    for number, name, budget, fn in CRITERIA:
        try:
            _timed(number, name, budget, fn)
        except AssertionError:
            pass
    print("\n".join(RESULTS))
