"""Command-line entry point.

Exit codes: 0 success or experiment pass, 1 experiment fail, 2 usage error,
3 data error (missing or malformed input files).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..kvcache import CacheError, CacheSelector, edit_cache, load_cache_for, prefill_transcript, serialize_cache
from ..model import DecodePolicy, ModelError, build_random_model
from ..modelio import load_model, save_model
from ..numcore import DimensionError
from ..persona import CapPlan, Direction, SteeringPlan, cap_hook, extract_direction, fold_bias, layer_sweep, steering_hook
from ..planted import MARK_MINUS, MARK_PLUS, VARIANTS, persona_prompts, planted_model, probe_suite, question_battery, role_prompts
from ..space import CloudError, RoleCloud, analyze_cloud, build_role_cloud
from ..trace import TraceError, projection_series, top_streams, trace_run
from ..transcript import TranscriptError, TurnRole, load_script
from . import config
from .experiments import EXPERIMENTS, ExperimentError, exp_serving_transfer, run_experiment
from .report import Table, line_chart, scatter_chart

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

VERBS = (
    "build-model", "generate", "prefill", "transfer", "edit-cache", "extract", "steer",
    "cap", "fold", "sweep", "cloud", "analyze", "exp", "trace",
)


class UsageError(Exception):
    pass


DATA_ERRORS = (
    FileNotFoundError, IsADirectoryError, json.JSONDecodeError, UnicodeDecodeError, TranscriptError,
    CacheError, ModelError, CloudError, TraceError, DimensionError, ExperimentError, ValueError, KeyError,
)


# --- argument parsing --------------------------------------------------------------


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)  # noqa: E731
    parser.add_argument("--model", default=d(None), help="model file, or planted:<variant>, or random")
    parser.add_argument("--transcript", default=d(None), help="transcript JSON file, or script:<name> for a bundled script")
    parser.add_argument("--out-dir", default=d("."), help="directory for written artifacts")
    parser.add_argument("--seed", type=int, default=d(0))
    parser.add_argument("--format", choices=("json", "csv", "svg"), default=d(None), help="format printed to stdout")


def _layers(text: str) -> tuple[int, int]:
    try:
        if ":" in text:
            lo, hi = text.split(":", 1)
            return int(lo), int(hi)
        return int(text), int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"layer range must look like 2 or 1:3, not {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvl", description="persona-vector lab: planted toy transformers and persona experiments")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="verb", metavar="verb")
    common = argparse.ArgumentParser(add_help=False)
    _common(common, suppress=True)

    def verb(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    p = verb("build-model", "build a planted or random model and save it")
    p.add_argument("--kind", choices=("planted", "random"), default="planted")
    p.add_argument("--variant", choices=VARIANTS, default="default")
    p.add_argument("--output", help="model path (default: <out-dir>/model.pvl, or .json with --format json)")

    p = verb("generate", "continue a transcript")
    p.add_argument("--n-new", type=int, default=8)
    p.add_argument("--sample", action="store_true", help="seeded sampling instead of greedy")
    p.add_argument("--temperature", type=float, default=1.0)

    p = verb("prefill", "rebuild a KV cache from a transcript")
    p.add_argument("--parallel", action="store_true")
    p.add_argument("--output")

    p = verb("transfer", "compare uninterrupted, cache-transfer and prefill-rebuild continuations")
    p.add_argument("--splits", default="", help="comma-separated split positions")
    p.add_argument("--n-new", type=int, default=20)

    p = verb("edit-cache", "edit cached keys or values along a direction")
    p.add_argument("--cache", required=True)
    p.add_argument("--direction")
    p.add_argument("--layers", type=_layers, required=True)
    p.add_argument("--heads", default="", help="comma-separated heads (default all)")
    p.add_argument("--role", choices=("system", "user", "assistant"))
    p.add_argument("--target", choices=("keys", "values", "both"), default="values")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--scale", type=float)
    g.add_argument("--set", dest="set_to", type=float)
    g.add_argument("--add", type=float)
    p.add_argument("--output")

    p = verb("extract", "contrastive persona direction")
    p.add_argument("--layer", type=int, default=2)
    p.add_argument("--pos", nargs="*", default=[], help="positive transcript files")
    p.add_argument("--neg", nargs="*", default=[], help="negative transcript files")
    p.add_argument("--n-prompts", type=int, default=4)
    p.add_argument("--label", default="persona")

    for name, help_ in (("steer", "generate with an additive steering vector"), ("cap", "generate with activation capping")):
        p = verb(name, help_)
        p.add_argument("--direction")
        p.add_argument("--layers", type=_layers, default=None)
        p.add_argument("--n-new", type=int, default=8)
        if name == "steer":
            p.add_argument("--alpha", type=float, required=True)
            p.add_argument("--phase", choices=("all", "generation_only", "user_only"), default="all")
        else:
            p.add_argument("--tau", type=float, required=True)
            p.add_argument("--phase", choices=("all", "generation_only", "user_only"), default="generation_only")
            p.add_argument("--monitor-layer", type=int, default=None)

    p = verb("fold", "bake a steering vector into the weights")
    p.add_argument("--direction")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--output")

    p = verb("sweep", "flip rate of the planted probe suite by steering layer")
    p.add_argument("--direction")
    p.add_argument("--alpha", type=float, default=-2.0)
    p.add_argument("--marker", choices=(MARK_PLUS, MARK_MINUS), default=MARK_PLUS)

    p = verb("cloud", "role-activation cloud of a planted model")
    p.add_argument("--layer", type=int, default=3)
    p.add_argument("--questions", type=int, default=6)
    p.add_argument("--n-new", type=int, default=2)

    p = verb("analyze", "PCA of a role cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--assistant", nargs="*", default=None, help="labels that should load positively on PC1")

    p = verb("exp", "run an experiment")
    p.add_argument("experiment", choices=EXPERIMENTS)

    p = verb("trace", "record residuals and attention streams")
    p.add_argument("--n-new", type=int, default=0)
    p.add_argument("--dst", type=int, default=None, help="destination position for the top-streams listing")
    p.add_argument("--top", type=int, default=10)
    return parser


# --- loading ---------------------------------------------------------------------------


def _model(args):
    ref = args.model
    if ref is None:
        raise UsageError("this verb needs --model (a file, planted:<variant>, or random)")
    if ref.startswith("planted:"):
        return planted_model(ref.split(":", 1)[1], args.seed)
    if ref == "random":
        return build_random_model(seed=args.seed)
    return load_model(ref)


def _transcript(args, model):
    ref = args.transcript
    if ref is None:
        raise UsageError("this verb needs --transcript")
    if ref.startswith("script:"):
        return config.script(ref.split(":", 1)[1], model.vocab)
    if not Path(ref).exists():
        raise FileNotFoundError(f"transcript file not found: {ref}")
    return load_script(ref, model.vocab)


def _direction(args, model) -> Direction:
    if getattr(args, "direction", None):
        if not Path(args.direction).exists():
            raise FileNotFoundError(f"direction file not found: {args.direction}")
        return Direction.load(args.direction)
    if model is not None and model.planted is not None:
        return model.planted.gateway
    raise UsageError("--direction is required for non-planted models")


def _out(args, name: str) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _emit(args, outputs: dict) -> None:
    """Print the artifact matching --format (json by default)."""
    fmt = args.format or "json"
    text = outputs.get(fmt)
    if text is not None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


# --- verbs -----------------------------------------------------------------------------------


def cmd_build_model(args):
    model = planted_model(args.variant, args.seed) if args.kind == "planted" else build_random_model(seed=args.seed)
    path = Path(args.output) if args.output else _out(args, "model.json" if args.format == "json" else "model.pvl")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, path)
    print(f"wrote {model!r} to {path}")
    return EXIT_OK


def cmd_generate(args):
    model = _model(args)
    t = _transcript(args, model)
    policy = DecodePolicy("sample", args.temperature, args.seed) if args.sample else DecodePolicy()
    gen = model.decode(t, args.n_new, policy)
    path = _out(args, "generated.json")
    gen.transcript.save(path)
    _emit(args, {"json": json.dumps({"new_text": model.vocab.detokenize(gen.new_tokens), "transcript": str(path)})})
    return EXIT_OK


def cmd_prefill(args):
    model = _model(args)
    t = _transcript(args, model)
    cache = prefill_transcript(model, t, parallel=args.parallel)
    path = Path(args.output) if args.output else _out(args, "cache.pvkc")
    path.write_bytes(serialize_cache(cache))
    _emit(args, {"json": json.dumps({"positions": len(cache), "cache": str(path)})})
    return EXIT_OK


def cmd_transfer(args):
    model = _model(args)
    t = _transcript(args, model)
    try:
        splits = [int(s) for s in args.splits.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--splits must be comma-separated integers, not {args.splits!r}") from None
    rep = exp_serving_transfer(model, t, splits, args.n_new, out_dir=args.out_dir)
    _emit(args, {"json": rep.to_json()})
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_edit_cache(args):
    model = _model(args)
    path = Path(args.cache)
    if not path.exists():
        raise FileNotFoundError(f"cache file not found: {path}")
    cache = load_cache_for(path.read_bytes(), model)
    direction = _direction(args, model)
    heads = frozenset(int(h) for h in args.heads.split(",") if h.strip())
    role = TurnRole.parse(args.role) if args.role else None
    sel = CacheSelector(args.layers, heads, role, args.target)
    rep = edit_cache(cache, sel, direction, scale=args.scale, set_to=args.set_to, add=args.add, model=model)
    out = Path(args.output) if args.output else _out(args, "cache-edited.pvkc")
    out.write_bytes(serialize_cache(cache))
    _emit(args, {"json": json.dumps({"edited": rep.count, "mean_abs_delta": rep.mean_abs_delta, "skipped_heads": rep.skipped_heads, "cache": str(out)})})
    return EXIT_OK


def cmd_extract(args):
    model = _model(args)
    if args.pos or args.neg:
        if not (args.pos and args.neg):
            raise UsageError("give both --pos and --neg transcript files")
        for f in args.pos + args.neg:
            if not Path(f).exists():
                raise FileNotFoundError(f"transcript file not found: {f}")
        pos = [load_script(f, model.vocab) for f in args.pos]
        neg = [load_script(f, model.vocab) for f in args.neg]
    elif model.planted is not None:
        pos = persona_prompts(model, MARK_PLUS, args.n_prompts)
        neg = persona_prompts(model, MARK_MINUS, args.n_prompts)
    else:
        raise UsageError("--pos/--neg are required for non-planted models")
    d = extract_direction(model, pos, neg, args.layer, label=args.label)
    path = _out(args, "direction.json")
    d.save(path)
    info = {"direction": str(path), "layer": d.layer}
    if model.planted is not None:
        info["cosine_with_planted_gateway"] = float(d.unit @ model.planted.gateway.unit)
    _emit(args, {"json": json.dumps(info)})
    return EXIT_OK


def _range(args, model):
    if args.layers is not None:
        return args.layers
    if model.planted is not None:
        return (0, model.planted.readout_layer)
    raise UsageError("--layers is required for non-planted models")


def cmd_steer(args):
    model = _model(args)
    t = _transcript(args, model)
    hook = steering_hook(SteeringPlan(_direction(args, model), _range(args, model), args.alpha, args.phase), model)
    base = model.decode(t, args.n_new)
    gen = model.decode(t, args.n_new, hooks=(hook,))
    gen.transcript.save(_out(args, "steered.json"))
    v = model.vocab
    _emit(args, {"json": json.dumps({"baseline": v.detokenize(base.new_tokens), "steered": v.detokenize(gen.new_tokens)})})
    return EXIT_OK


def cmd_cap(args):
    model = _model(args)
    t = _transcript(args, model)
    d = _direction(args, model)
    lo, hi = _range(args, model)
    hook = cap_hook(CapPlan(d, (lo, hi), args.tau, args.phase), model)
    out, tr = trace_run(model, t, args.n_new, (hook,))
    monitor = hi if args.monitor_layer is None else args.monitor_layer
    series = projection_series(tr, d, monitor, out)
    csv_text = series.to_csv()
    _out(args, "cap-series.csv").write_text(csv_text)
    svg = line_chart(
        {r.label: ([p.turn for p in series.for_role(r)], [p.mean_projection for p in series.for_role(r)]) for r in (TurnRole.USER, TurnRole.ASSISTANT)},
        "capped run", "turn", "projection", hlines=(args.tau,),
    )
    _out(args, "cap-series.svg").write_text(svg)
    out.save(_out(args, "capped.json"))
    _emit(args, {"json": json.dumps({"new_text": model.vocab.detokenize(out.tokens[len(t):]), "monitor_layer": monitor}), "csv": csv_text, "svg": svg})
    return EXIT_OK


def cmd_fold(args):
    model = _model(args)
    folded = fold_bias(model, _direction(args, model), args.alpha, args.layer)
    path = Path(args.output) if args.output else _out(args, "model-folded.json" if args.format == "json" else "model-folded.pvl")
    save_model(folded, path)
    print(f"wrote {folded!r} to {path}")
    return EXIT_OK


def cmd_sweep(args):
    model = _model(args)
    if model.planted is None:
        raise UsageError("sweep uses the planted probe suite; give a planted model")
    curve = layer_sweep(model, _direction(args, model), args.alpha, probe_suite(model, args.marker))
    table = Table(["layer", "flip_rate"], [[l, r] for l, r in zip(curve.layers, curve.flip_rates)])
    svg = line_chart({f"alpha={args.alpha:g}": (list(curve.layers), list(curve.flip_rates))}, "flip rate by steering layer", "layer", "flip rate")
    js = json.dumps(curve.as_dict())
    _out(args, "sweep.csv").write_text(table.to_csv())
    _out(args, "sweep.svg").write_text(svg)
    _out(args, "sweep.json").write_text(js)
    _emit(args, {"json": js, "csv": table.to_csv(), "svg": svg})
    return EXIT_OK


def cmd_cloud(args):
    model = _model(args)
    if model.planted is None:
        raise UsageError("cloud uses the planted role prompts; give a planted model")
    cloud = build_role_cloud(model, role_prompts(model), question_battery(model, args.questions), args.layer, args.n_new)
    path = _out(args, "cloud.json")
    cloud.save(path)
    _emit(args, {"json": json.dumps({"cloud": str(path), "roles": len(cloud.labels), "layer": cloud.layer})})
    return EXIT_OK


def cmd_analyze(args):
    path = Path(args.cloud)
    if not path.exists():
        raise FileNotFoundError(f"cloud file not found: {path}")
    cloud = RoleCloud.load(path)
    rep = analyze_cloud(cloud, args.k, args.assistant)
    js = json.dumps(rep.to_dict(), indent=1)
    csv_text = rep.loadings_csv()
    groups = ["assistant" if args.assistant and lab in args.assistant else "other" for lab in rep.labels]
    svg = scatter_chart(rep.labels, list(rep.loadings), [0.0] * len(rep.labels), "roles on PC1", "PC1 loading", "", groups)
    if rep.pca.components.shape[0] >= 2:
        pc2 = (cloud.vectors - rep.pca.mean) @ rep.pca.components[1]
        svg = scatter_chart(rep.labels, list(rep.loadings), list(pc2), "roles on PC1 and PC2", "PC1", "PC2", groups)
    _out(args, "axis.json").write_text(js)
    _out(args, "loadings.csv").write_text(csv_text)
    _out(args, "roles-pc1.svg").write_text(svg)
    _out(args, "assistant-axis.json").write_text(json.dumps(rep.assistant_axis.to_dict(), indent=1))
    _emit(args, {"json": js, "csv": csv_text, "svg": svg})
    return EXIT_OK


def cmd_exp(args):
    rep = run_experiment(args.experiment, args.seed, out_dir=args.out_dir)
    _emit(args, {"json": rep.to_json()})
    print(f"{args.experiment}: {'PASS' if rep.passed else 'FAIL'}", file=sys.stderr)
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_trace(args):
    model = _model(args)
    t = _transcript(args, model)
    out, tr = trace_run(model, t, args.n_new)
    js = tr.to_json()
    _out(args, "trace.json").write_text(js)
    dst = len(out) - 1 if args.dst is None else args.dst
    rows = [[r.layer, r.head, r.src_pos, r.dst_pos, r.weight] for r in top_streams(tr, dst, args.top)]
    table = Table(["layer", "head", "src", "dst", "weight"], rows)
    _out(args, "top-streams.csv").write_text(table.to_csv())
    _emit(args, {"json": json.dumps({"trace": str(Path(args.out_dir) / "trace.json"), "positions": len(out), "top_streams": rows}), "csv": table.to_csv()})
    return EXIT_OK


COMMANDS = {
    "build-model": cmd_build_model, "generate": cmd_generate, "prefill": cmd_prefill, "transfer": cmd_transfer,
    "edit-cache": cmd_edit_cache, "extract": cmd_extract, "steer": cmd_steer, "cap": cmd_cap, "fold": cmd_fold,
    "sweep": cmd_sweep, "cloud": cmd_cloud, "analyze": cmd_analyze, "exp": cmd_exp, "trace": cmd_trace,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.verb is None:
        parser.print_usage(sys.stderr)
        print("pvl: error: a verb is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"pvl {args.verb}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"pvl {args.verb}: error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
