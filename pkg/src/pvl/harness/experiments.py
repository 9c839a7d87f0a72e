"""Experiment runners.

Each runner returns an :class:`ExperimentReport` whose ``passed`` flag is
computed by the matching entry of :data:`JUDGES` from the metrics and the
thresholds alone, so a saved report can be re-judged without rerunning.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .. import numcore
from ..kvcache import (
    CacheSelector,
    KVCache,
    cache_divergence,
    edit_cache,
    load_cache_for,
    prefill_transcript,
    rebuild_for_model,
    serialize_cache,
)
from ..model import DecodePolicy, Model, build_random_model
from ..persona import CapPlan, Direction, cap_hook, fold_bias, layer_sweep, probe_answer
from ..planted import MARK_MINUS, MARK_PLUS, PROBE_CONTEXTS, planted_model, probe_suite
from ..space import basin_diagnostics
from ..trace import ProjectionSeries, projection_series, trace_run
from ..transcript import Transcript, TurnRole
from . import config
from .report import ExperimentReport, Table, line_chart, series_chart

# published full-scale values, kept for documentation only (never thresholds)
REFERENCE = {
    "streams_worked_example": 64000,
    "k70_by_model": {"gemma-2-27b": 4, "qwen-3-32b": 8, "llama-3.3-70b": 19},
    "n_roles": 275,
    "activation_dim": 4098,
    "axis_correlation_min": 0.92,
    "kv_edit_layers": (32, 47),
    "kv_edit_scale": 0.15,
    "identity_samples": 10,
    "further_probes": 12,
    "probe_score_before_after": (5.5, 2.1),
    "misaligned_rate_finetuned_vs_control": (0.50, 0.0),
}


class ExperimentError(ValueError):
    pass


# --- judges -------------------------------------------------------------------


def _judge_prefill(m, th):
    return (
        m["bit_equal_sequential"] == 1
        and m["bit_equal_parallel"] == 1
        and m["max_abs_diff_sequential"] <= th["max_abs_diff"]
        and m["max_abs_diff_parallel"] <= th["max_abs_diff"]
        and m["divergence_sequential"] <= th["max_divergence"]
        and m["divergence_parallel"] <= th["max_divergence"]
    )


def _judge_transfer(m, th):
    return m["mismatches_transfer"] <= th["max_token_mismatches"] and m["mismatches_prefill"] <= th["max_token_mismatches"]


def _judge_model_change(m, th):
    # passes when the move to another model is observable in either way
    return m["divergence"] > th["min_divergence"] or m["endings_differ"] == 1


def _judge_mini1(m, th):
    user_ok = m["max_user_delta"] is None or m["max_user_delta"] <= th["max_user_delta"]
    cap_ok = m["min_capped_assistant_projection"] is None or m["min_capped_assistant_projection"] >= th["tau"]
    return user_ok and cap_ok


def _judge_mini2(m, th):
    crossed = (m["battery_score_before"] - th["midpoint"]) * (m["battery_score_after"] - th["midpoint"]) < 0
    return m["identity_flips_greedy"] >= th["min_identity_flips"] and crossed


def _judge_gateway(m, th):
    ok = True
    for key, rate in m.items():
        if key.startswith("pre_flip_rate@"):
            alpha = float(key.split("@", 1)[1])
            ok &= rate == 0.0 if alpha == 0 else rate >= th["min_pre_flip_rate"]
        elif key.startswith("post_flip_rate@"):
            ok &= rate <= th["max_post_flip_rate"]
    return bool(ok)


def _judge_plan(m, th):
    if m["trigger_found"] != 1 or m["plan_activation"] < th["activation_threshold"]:
        return False
    if m["payoff_observable"] != 1:
        return True
    return m["payoff_at_delay"] == 1 and m["ending_changed_after_zeroing"] == 1


JUDGES = {
    "prefill-equivalence": _judge_prefill,
    "serving-transfer": _judge_transfer,
    "model-change": _judge_model_change,
    "mini1": _judge_mini1,
    "mini2": _judge_mini2,
    "gateway": _judge_gateway,
    "plan-persistence": _judge_plan,
}

THRESHOLD_SECTIONS = {
    "prefill-equivalence": "prefill_equivalence",
    "serving-transfer": "serving_transfer",
    "model-change": "model_change",
    "mini1": "mini1",
    "mini2": "mini2",
    "gateway": "gateway",
    "plan-persistence": "plan_persistence",
}


def judge(experiment_id: str, metrics: dict, thresholds: dict) -> bool:
    return bool(JUDGES[experiment_id](metrics, thresholds))


def rejudge(report: dict) -> bool:
    """Recompute ``pass`` from a report's JSON dict."""
    return judge(report["experiment_id"], report["metrics"], report["thresholds"])


def _report(eid, cfg, metrics, th, **extra) -> ExperimentReport:
    return ExperimentReport(eid, cfg, metrics, th, judge(eid, metrics, th), **extra)


def _finish(report: ExperimentReport, out_dir) -> ExperimentReport:
    if out_dir is not None:
        report.write(out_dir)
    return report


def _th(eid: str, thresholds: dict | None) -> dict:
    base = config.thresholds_for(THRESHOLD_SECTIONS[eid])
    if thresholds:
        base.update(thresholds)
    return base


# --- helpers ------------------------------------------------------------------


def cache_max_abs_diff(a: KVCache, b: KVCache) -> float:
    """Largest elementwise key/value difference; inf when the caches are not aligned."""
    if (a.n_layers, a.n_heads, a.d_head) != (b.n_layers, b.n_heads, b.d_head):
        return math.inf
    if a.tokens != b.tokens or a.roles != b.roles:
        return math.inf
    worst = 0.0
    for layer in range(a.n_layers):
        for x, y in ((a.keys(layer), b.keys(layer)), (a.values(layer), b.values(layer))):
            if x.size:
                worst = max(worst, float(np.max(np.abs(x - y))))
    return worst


def random_transcript(model: Model, seed: int, n_tokens: int = 4) -> Transcript:
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, len(model.vocab), size=n_tokens)
    return Transcript.build(model.vocab, [("user", " ".join(model.vocab.symbols[i] for i in ids))])


def determinism_model(seed: int) -> Model:
    """Small random mixture-of-experts model used by the determinism experiments."""
    return build_random_model(d_model=16, n_layers=2, n_heads=2, d_mlp=16, vocab_size=24, n_experts=2, seed=seed)


def _mismatches(a, b) -> tuple[int, int]:
    n = sum(x != y for x, y in zip(a, b)) + abs(len(a) - len(b))
    first = next((i for i, (x, y) in enumerate(zip(a, b)) if x != y), -1)
    if first < 0 and len(a) != len(b):
        first = min(len(a), len(b))
    return n, first


# --- prefill equivalence --------------------------------------------------------


def exp_prefill_equivalence(model_seed: int = 1, transcript_seed: int = 1, length: int = 32, perturb: bool = False, thresholds=None, out_dir=None):
    """Cache from generation vs. sequential and parallel prefill of the same tokens."""
    if not 2 <= length <= 256:
        raise ExperimentError(f"length must be in [2, 256], got {length}")
    eid = "prefill-equivalence"
    th = _th(eid, thresholds)
    model = determinism_model(model_seed)
    prompt = random_transcript(model, transcript_seed)
    gen = model.decode(prompt, length)
    gen_cache = gen.cache
    if perturb:
        # negative control: nudge one cached value
        edit_cache(gen_cache, CacheSelector((0, 0), frozenset({0}), positions=frozenset({0})), np.eye(model.spec.d_head)[0], add=1e-3)
    seq = prefill_transcript(model, gen.transcript)
    par = prefill_transcript(model, gen.transcript, parallel=True)
    metrics = {
        "n_positions": len(gen.transcript),
        "bit_equal_sequential": int(gen_cache.bit_equal(seq)),
        "bit_equal_parallel": int(gen_cache.bit_equal(par)),
        "max_abs_diff_sequential": cache_max_abs_diff(gen_cache, seq),
        "max_abs_diff_parallel": cache_max_abs_diff(gen_cache, par),
        "divergence_sequential": cache_divergence(gen_cache, seq),
        "divergence_parallel": cache_divergence(gen_cache, par),
    }
    cfg = {"model_seed": model_seed, "transcript_seed": transcript_seed, "length": length, "perturb": perturb, "model_id": model.spec.model_id}
    return _finish(_report(eid, cfg, metrics, th), out_dir)


# --- serving transfer -------------------------------------------------------------


def _hop_run(model: Model, script: Transcript, n_new: int, splits, hop, hop_model: Model | None = None):
    """Process ``script`` then generate, moving to a new server at each split position."""
    total = len(script) + n_new
    current = None
    cache = None
    active = model
    for i, end in enumerate(list(splits) + [total]):
        if i > 0:
            cache, active = hop(cache, current, hop_model or active)
        if end <= len(script):
            current = script.truncated(end)
            gen = active.decode(current, 0, cache=cache)
        else:
            base = script if current is None or len(current) < len(script) else current
            gen = active.decode(base, end - len(base), cache=cache)
        cache, current = gen.cache, gen.transcript
    return current.tokens[len(script):], cache


def _hop_transfer(cache, transcript, model):
    return load_cache_for(serialize_cache(cache), model), model


def _hop_prefill(cache, transcript, model):
    return prefill_transcript(model, transcript), model


def exp_serving_transfer(model: Model, script: Transcript, split_points=(), n_new: int = 20, prefill_model: Model | None = None, thresholds=None, out_dir=None):
    """Uninterrupted run vs. cache transfer vs. prefill rebuild at each server hop.

    With ``prefill_model`` the rebuilding servers run a different model; the
    continuations are then expected to diverge and the report fails.
    """
    eid = "serving-transfer"
    th = _th(eid, thresholds)
    total = len(script) + n_new
    splits = [int(s) for s in split_points]
    if any(not 0 < s < total for s in splits) or any(b <= a for a, b in zip(splits, splits[1:])):
        raise ExperimentError(f"split points must be strictly increasing inside (0, {total}), got {splits}")
    if prefill_model is not None and prefill_model.vocab != model.vocab:
        raise ExperimentError("prefill model must share the vocabulary")
    base = model.decode(script, n_new)
    uninterrupted = base.new_tokens
    transferred, t_cache = _hop_run(model, script, n_new, splits, _hop_transfer)
    rebuilt, p_cache = _hop_run(model, script, n_new, splits, _hop_prefill, prefill_model)
    mt, ft = _mismatches(uninterrupted, transferred)
    mp, fp = _mismatches(uninterrupted, rebuilt)
    metrics = {
        "n_new": n_new,
        "n_splits": len(splits),
        "mismatches_transfer": mt,
        "mismatches_prefill": mp,
        "first_divergence_transfer": ft,
        "first_divergence_prefill": fp,
        "cache_bit_equal_transfer": int(t_cache.bit_equal(base.cache)),
        "cache_bit_equal_prefill": int(prefill_model is None and p_cache.bit_equal(base.cache)),
    }
    cfg = {
        "model_id": model.spec.model_id,
        "prefill_model_id": None if prefill_model is None else prefill_model.spec.model_id,
        "script_hash": script.content_hash(),
        "split_points": splits,
        "n_new": n_new,
    }
    v = model.vocab
    obs = {"uninterrupted": v.detokenize(uninterrupted), "transfer": v.detokenize(transferred), "prefill": v.detokenize(rebuilt)}
    if prefill_model is not None:
        obs["note"] = "prefill servers run a different model; divergence expected"
    return _finish(_report(eid, cfg, metrics, th, observations=obs), out_dir)


# --- model change -------------------------------------------------------------------


def exp_model_change(model_a: Model, model_b: Model, script: Transcript, n_new: int = 7, thresholds=None, out_dir=None):
    """The new model re-reads the transcript; how far is its cache, and does the ending change?"""
    eid = "model-change"
    th = _th(eid, thresholds)
    if model_a.vocab != model_b.vocab:
        raise ExperimentError("vocabulary mismatch between models")
    cache_a = prefill_transcript(model_a, script)
    cache_b = rebuild_for_model(script, model_b)
    end_a = model_a.decode(script, n_new).new_tokens
    end_b = model_b.decode(script, n_new).new_tokens
    metrics = {"divergence": cache_divergence(cache_a, cache_b), "endings_differ": int(end_a != end_b), "n_new": n_new}
    cfg = {"model_a": model_a.spec.model_id, "model_b": model_b.spec.model_id, "script_hash": script.content_hash()}
    obs = {"ending_a": model_a.vocab.detokenize(end_a), "ending_b": model_b.vocab.detokenize(end_b)}
    return _finish(_report(eid, cfg, metrics, th, observations=obs), out_dir)


# --- mini experiment 1: generation-only capping --------------------------------------


def _split_series(s: ProjectionSeries, role: TurnRole) -> ProjectionSeries:
    return ProjectionSeries(tuple(s.for_role(role)))


def exp_mini1(model: Model, script: Transcript, axis: Direction | None = None, tau: float | None = None, thresholds=None, out_dir=None):
    """Baseline vs. generation-only capped run over a drifting conversation."""
    eid = "mini1"
    th = _th(eid, thresholds)
    if tau is not None:
        th["tau"] = float(tau)
    tau = th["tau"]
    axis = axis or model.planted.gateway
    lo, hi = th["cap_layers"]
    monitor = th["monitor_layer"]
    n_new = th["n_new"]
    hook = cap_hook(CapPlan(axis, (lo, hi), tau, "generation_only"), model)
    base_out, base_tr = trace_run(model, script, n_new)
    cap_out, cap_tr = trace_run(model, script, n_new, (hook,))

    user_pos = [p for p, r in enumerate(script.roles) if r == TurnRole.USER]
    user_delta = None
    if user_pos:
        user_delta = max(
            float(np.max(np.abs(base_tr.residual(layer, p, site) - cap_tr.residual(layer, p, site))))
            for p in user_pos
            for layer in range(model.spec.n_layers)
            for site in ("pre", "mid", "post")
        )
    asst = [p for p, r in enumerate(cap_out.roles) if r == TurnRole.ASSISTANT]

    def min_proj(tr, positions):
        vals = [numcore.dot(tr.residual(layer, p), axis.unit) for p in positions for layer in range(lo, hi + 1)]
        return min(vals) if vals else None

    s_base = projection_series(base_tr, axis, monitor, base_out)
    s_cap = projection_series(cap_tr, axis, monitor, cap_out)
    series = {
        "assistant_uncapped": _split_series(s_base, TurnRole.ASSISTANT),
        "user_uncapped": _split_series(s_base, TurnRole.USER),
        "assistant_capped": _split_series(s_cap, TurnRole.ASSISTANT),
        "user_capped": _split_series(s_cap, TurnRole.USER),
    }
    metrics = {
        "max_user_delta": user_delta,
        "min_capped_assistant_projection": min_proj(cap_tr, asst),
        "min_uncapped_assistant_projection": min_proj(base_tr, [p for p, r in enumerate(base_out.roles) if r == TurnRole.ASSISTANT]),
        "n_user_positions": len(user_pos),
        "n_assistant_positions": len(asst),
    }
    center, radius = th["region_center"], th["region_radius"]
    for name in ("assistant_uncapped", "assistant_capped"):
        if len(series[name]):
            b = basin_diagnostics(series[name], center, radius)
            metrics[f"dwell_{name}"] = b.dwell
            metrics[f"exit_turn_{name}"] = b.exit_turn
    cfg = {"model_id": model.spec.model_id, "axis": axis.label, "script_hash": script.content_hash()}
    fig = series_chart(series, "projection on the assistant axis, capped vs. uncapped", hlines=(tau,))
    return _finish(_report(eid, cfg, metrics, th, series=series, figures={"series": fig}), out_dir)


# --- mini experiment 2: KV-cache persona edit -----------------------------------------


def _ask(model: Model, script: Transcript, cache: KVCache, text: str, policy=None) -> int:
    q = script.with_turn(model.vocab, TurnRole.USER, text)
    kw = {} if policy is None else {"policy": policy}
    return model.decode(q, 1, cache=cache.copy(), **kw).new_tokens[0]


def _mini2_probes(model: Model, n_battery: int):
    rows = model.planted.spec.behavior_table
    identity = rows[0]
    battery = [(f"{PROBE_CONTEXTS[i % len(PROBE_CONTEXTS)]} {r.probe}", r) for i, r in enumerate(rows[1 : 1 + n_battery])]
    return f"tell me {identity.probe}", identity, battery


def _edited_cache(model, script, axis, layers, factor) -> tuple[KVCache, int]:
    cache = prefill_transcript(model, script)
    rep = edit_cache(cache, CacheSelector(tuple(layers), role=TurnRole.ASSISTANT, target="values"), axis, scale=factor, model=model)
    return cache, rep.count


def calibrate_mini2_factor(model: Model, script: Transcript, axis=None, layers=None, grid=None):
    """Largest factor on the grid (scanned downward) that flips the greedy identity answer."""
    th = config.thresholds_for("mini2")
    axis = axis or model.planted.gateway
    layers = layers or th["layers"]
    grid = grid or th["calibration_grid"]
    text, _, _ = _mini2_probes(model, 0)
    base = _ask(model, script, prefill_transcript(model, script), text)
    for f in sorted(grid, reverse=True):
        cache, _ = _edited_cache(model, script, axis, layers, f)
        if _ask(model, script, cache, text) != base:
            return f
    return None


def exp_mini2(model: Model, script: Transcript, axis: Direction | None = None, layers=None, factor: float | None = None, n_battery: int | None = None, thresholds=None, out_dir=None):
    """Scale the axis component of assistant-position values, then ask the identity probe and a battery."""
    eid = "mini2"
    th = _th(eid, thresholds)
    if model.planted is None:
        raise ExperimentError("mini2 needs a planted model with identity-probe behaviors")
    factor = th["factor"] if factor is None else float(factor)
    if not factor > 0:
        raise ExperimentError("factor must be positive")
    layers = tuple(layers or th["layers"])
    n_battery = th["n_battery"] if n_battery is None else n_battery
    if n_battery < 1:
        raise ExperimentError("empty probe set")
    axis = axis or model.planted.gateway
    text, identity, battery = _mini2_probes(model, n_battery)
    vocab = model.vocab
    plus, minus = vocab.id_of(identity.plus), vocab.id_of(identity.minus)

    before = prefill_transcript(model, script)
    after, n_edited = _edited_cache(model, script, axis, layers, factor)
    base_answer = _ask(model, script, before, text)
    greedy = [_ask(model, script, after, text) for _ in range(th["n_identity"])]
    samples = [DecodePolicy("sample", 1.0, s) for s in range(th["n_samples"])]
    sampled_before = [_ask(model, script, before, text, p) for p in samples]
    sampled_after = [_ask(model, script, after, text, p) for p in samples]

    def score(cache):
        vals = []
        for q, row in battery:
            tok = _ask(model, script, cache, q)
            vals.append(1 if tok == vocab.id_of(row.plus) else -1 if tok == vocab.id_of(row.minus) else 0)
        return float(np.mean(vals))

    metrics = {
        "identity_flips_greedy": sum(a != base_answer for a in greedy),
        "identity_plus_after": sum(a == plus for a in greedy),
        "sampled_plus_before": sum(a == plus for a in sampled_before),
        "sampled_plus_after": sum(a == plus for a in sampled_after),
        "sampled_minus_before": sum(a == minus for a in sampled_before),
        "battery_score_before": score(before),
        "battery_score_after": score(after),
        "n_battery": len(battery),
        "edited_entries": n_edited,
    }
    cfg = {"model_id": model.spec.model_id, "axis": axis.label, "layers": list(layers), "factor": factor, "script_hash": script.content_hash()}
    obs = {"identity_before": vocab.symbols[base_answer], "identity_after": vocab.symbols[greedy[0]]}
    return _finish(_report(eid, cfg, metrics, th, observations=obs), out_dir)


# --- gateway ------------------------------------------------------------------------------


def _flip_rate(model: Model, probes, base, sign: int) -> float:
    hits = 0
    for p, b in zip(probes, base):
        ans = probe_answer(model, p)
        hits += ans != b if sign == 0 else p.score(ans) == sign and ans != b
    return hits / len(probes)


def exp_gateway(model: Model, alphas=None, thresholds=None, out_dir=None):
    """Fold the gateway direction into the weights before and after the readout layer."""
    eid = "gateway"
    th = _th(eid, thresholds)
    if model.planted is None:
        raise ExperimentError("gateway experiment needs a planted model")
    alphas = [float(a) for a in (th["alphas"] if alphas is None else alphas)]
    v = model.planted.gateway
    suites = {s: probe_suite(model, m) for s, m in ((1, MARK_MINUS), (-1, MARK_PLUS), (0, MARK_PLUS))}
    bases = {s: [probe_answer(model, p) for p in probes] for s, probes in suites.items()}
    metrics = {"suite_size": len(suites[0])}
    for alpha in alphas:
        sign = int(np.sign(alpha))
        # probe the side that can move: the opposite persona for a nonzero alpha
        probes, base = suites[sign], bases[sign]
        for tag, layer in (("pre", th["pre_layer"]), ("post", th["post_layer"])):
            folded = fold_bias(model, v, alpha, layer)
            metrics[f"{tag}_flip_rate@{alpha!r}"] = _flip_rate(folded, probes, base, sign)
    sweep_alpha = next((a for a in alphas if a != 0), 0.0)
    sweep_probes = suites[int(np.sign(sweep_alpha))]
    curve = layer_sweep(model, v, sweep_alpha, sweep_probes)
    for layer, rate in zip(curve.layers, curve.flip_rates):
        metrics[f"sweep_flip_rate_L{layer}"] = rate
    cfg = {"model_id": model.spec.model_id, "alphas": alphas, "sweep_alpha": sweep_alpha, "pre_layer": th["pre_layer"], "post_layer": th["post_layer"]}
    table = Table(["layer", "flip_rate"], [[l, r] for l, r in zip(curve.layers, curve.flip_rates)])
    fig = line_chart({f"alpha={sweep_alpha:g}": (list(curve.layers), list(curve.flip_rates))}, "flip rate by steering layer", "layer", "flip rate")
    return _finish(_report(eid, cfg, metrics, th, tables={"sweep": table}, figures={"sweep": fig}), out_dir)


# --- plan persistence ---------------------------------------------------------------------


def exp_plan_persistence(model: Model, script: Transcript, n_new: int | None = None, thresholds=None, out_dir=None):
    """Plan feature at the trigger, payoff at the planted delay, and the effect of erasing it from the cache."""
    eid = "plan-persistence"
    th = _th(eid, thresholds)
    info = model.planted
    if info is None or info.spec.plan is None or info.plan_layer is None:
        raise ExperimentError("no plan planted in this model")
    plan = info.spec.plan
    vocab = model.vocab
    trig, payoff = vocab.id_of(plan.trigger), vocab.id_of(plan.payoff)
    k = plan.delay
    n_new = k + 2 if n_new is None else n_new
    unit = info.plan_direction.unit
    layer = info.plan_layer
    tokens = script.tokens
    hits = [p for p, t in enumerate(tokens) if t == trig]
    _, tr = trace_run(model, script, 0)
    base = model.decode(script, n_new)
    metrics = {"trigger_found": int(bool(hits)), "delay": k, "n_new": n_new}
    obs = {"ending": vocab.detokenize(base.new_tokens)}
    if not hits:
        metrics["plan_activation"] = max(numcore.dot(tr.residual(layer, p), unit) for p in range(len(tokens)))
        metrics.update(payoff_observable=0, payoff_at_delay=0, ending_changed_after_zeroing=0)
        metrics["payoff_emitted"] = int(payoff in base.new_tokens)
    else:
        t = hits[-1]
        target = t + k
        observable = len(tokens) <= target < len(tokens) + n_new
        metrics["trigger_pos"] = t
        metrics["plan_activation"] = numcore.dot(tr.residual(layer, t), unit)
        metrics["payoff_observable"] = int(observable)
        metrics["payoff_emitted"] = int(payoff in base.new_tokens)
        full = base.transcript.tokens
        metrics["payoff_at_delay"] = int(observable and full[target] == payoff)
        cache = prefill_transcript(model, script)
        edit_cache(cache, CacheSelector((layer, layer), positions=frozenset({t}), target="values"), unit, set_to=0.0, model=model)
        zeroed = model.decode(script, n_new, cache=cache)
        metrics["ending_changed_after_zeroing"] = int(zeroed.new_tokens != base.new_tokens)
        obs["ending_after_zeroing"] = vocab.detokenize(zeroed.new_tokens)
        if not observable:
            obs["note"] = "payoff position outside the generated span; not observable"
    cfg = {"model_id": model.spec.model_id, "script_hash": script.content_hash(), "plan_layer": layer, "payoff": plan.payoff}
    return _finish(_report(eid, cfg, metrics, th, observations=obs), out_dir)


# --- registry -------------------------------------------------------------------------------


def _default_run(eid: str, seed: int = 0, out_dir=None) -> ExperimentReport:
    if eid == "prefill-equivalence":
        return exp_prefill_equivalence(seed, seed, 32, out_dir=out_dir)
    if eid == "serving-transfer":
        m = determinism_model(seed)
        script = random_transcript(m, seed, 20)
        return exp_serving_transfer(m, script, (10, 30), 20, out_dir=out_dir)
    if eid == "model-change":
        a = planted_model("default", seed)
        b = planted_model("plan-divergent", seed)
        return exp_model_change(a, b, config.script("plan", a.vocab), out_dir=out_dir)
    m = planted_model("default", seed)
    if eid == "mini1":
        return exp_mini1(m, config.script("drift", m.vocab), out_dir=out_dir)
    if eid == "mini2":
        return exp_mini2(m, config.script("aura", m.vocab), out_dir=out_dir)
    if eid == "gateway":
        return exp_gateway(m, out_dir=out_dir)
    if eid == "plan-persistence":
        return exp_plan_persistence(m, config.script("plan", m.vocab), out_dir=out_dir)
    raise KeyError(eid)


EXPERIMENTS = tuple(JUDGES)


def run_experiment(eid: str, seed: int = 0, out_dir=None) -> ExperimentReport:
    if eid not in JUDGES:
        raise KeyError(f"unknown experiment {eid!r}; choose from {EXPERIMENTS}")
    return _default_run(eid, seed, out_dir)


def _report_json(args) -> str:
    eid, seed = args
    return run_experiment(eid, seed).to_json()


def run_suite(ids=EXPERIMENTS, seed: int = 0, parallel: bool = False, workers: int = 2) -> list[str]:
    """Report JSON per experiment, in the order given; parallel mode must match sequential."""
    jobs = [(eid, seed) for eid in ids]
    if not parallel:
        return [_report_json(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_report_json, jobs))
