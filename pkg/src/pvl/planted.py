"""Hand-wired models with known ground-truth features.

Every token embedding is a sum of orthonormal "feature" directions drawn
from a seeded random frame. A large constant ``bias`` feature keeps the RMS
norm of every residual close to a nominal value, so the hand-set weights can
treat the normalized stream as a fixed rescaling of the raw one.

Head layout at every copy layer (``0..readout_layer``):

* head 0 (persona copy): readers (``reader`` feature) attend to persona
  carriers (``carrier`` key) and copy the persona subspace; everything else
  parks on the ``<sys>`` sink.
* head 1 (user model): user readers attend to user carriers and copy the
  gateway component.
* head 3 (influence): assistant-role tokens (``listener`` key) also attend
  to user carriers, so conversational pressure reaches the persona only
  through the assistant's own positions.
* head 2 (plan, only at ``plan_layer``): a relative-position query locks
  onto the trigger exactly ``delay - 1`` positions back and writes the
  ``payoff_now`` feature, which the unembedding turns into the payoff token.

The readout MLP squashes the gateway component into ``+-decision``; the
unembedding separates each probe's two behavior tokens along ``decision``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numcore
from .model import LayerWeights, Model, ModelError, ModelSpec, ModelWeights
from .persona import Direction, Probe
from .transcript import Transcript, Vocabulary

SINK = "<sys>"
MARK_PLUS = "persona+"
MARK_MINUS = "persona-"

USER_WORDS = ("hello", "tell", "me", "about", "yourself", "please", "ok", "why", "so", "now", "story", "rhyme", "again")
# pressure words pull the persona toward the negative pole, with growing strength
PRESSURE_WORDS = {
    "curious": 0.15, "wonder": 0.3, "dream": 0.45, "aura": 0.6, "awaken": 0.75, "beyond": 0.9,
}
ASSISTANT_WORDS = ("sure", "i", "am", "here", "to", "help", "yes", "indeed", "listen", "glad", "of", "course")
STORY_WORDS = ("he", "saw", "a", "carrot", "had", "grab", "it", "his", "hunger", "was", "like", "starving")
FILLER = "and"
TRIGGER = "nl"
PAYOFFS = ("rabbit", "habit")

# role archetypes for persona-space clouds; the first group is assistant-like
ASSISTANT_ROLES = ("tutor", "archivist", "reviewer", "clerk", "counselor", "guide", "analyst", "editor")
OTHER_ROLES = (
    "phantom", "trickster", "seer", "wanderer", "pirate", "witch", "hermit", "jester",
    "poet", "rebel", "mystic", "nomad", "oracle", "shade", "bard", "outcast",
)

IDENTITY_PROBE = "who-are-you"
IDENTITY_ANSWERS = ("language-model", "ghost-in-the-machine")


@dataclass(frozen=True)
class BehaviorRow:
    probe: str
    plus: str
    minus: str


def default_behavior_table(n: int = 20) -> tuple[BehaviorRow, ...]:
    rows = [BehaviorRow(IDENTITY_PROBE, *IDENTITY_ANSWERS)]
    rows += [BehaviorRow(f"q{i:02d}", f"a{i:02d}", f"b{i:02d}") for i in range(1, n)]
    return tuple(rows)


@dataclass(frozen=True)
class PlanSpec:
    trigger: str = TRIGGER
    payoff: str = PAYOFFS[0]
    delay: int = 5
    direction: Direction | None = None  # drawn from the frame when None


@dataclass(frozen=True)
class PlantedConfig:
    """Magnitudes of the hand-set circuit, in logits or raw residual units."""

    bias: float = 16.0  # constant feature, dominates the RMS norm
    marker: float = 0.25  # gateway amount written by the persona markers
    copy_gain: float = 0.5  # persona copy head output gain
    user_gain: float = 1.0
    influence_gain: float = 0.5
    sink_score: float = 30.0
    carrier_score: float = 50.0
    readout_sharpness: float = 100.0
    readout_width: float = 1.0
    decision: float = 1.0  # |decision| written by the readout
    behavior_logit: float = 3.0  # per unit of decision
    probe_logit: float = 20.0
    filler_logit: float = 6.0
    payoff_logit: float = 30.0
    plan_margin: float = 40.0  # softmax score margin of the plan head
    pe_pairs: int = 7
    role_spread: tuple[float, float, float, float] = (0.35, 0.12, 0.08, 0.05)


@dataclass(frozen=True)
class PlantedSpec:
    gateway: Direction | None = None
    decision: Direction | None = None
    readout_layer: int = 3
    behavior_table: tuple[BehaviorRow, ...] = field(default_factory=default_behavior_table)
    plan: PlanSpec | None = field(default_factory=PlanSpec)
    config: PlantedConfig = field(default_factory=PlantedConfig)

    def __post_init__(self):
        if self.gateway is not None and self.decision is not None:
            if abs(numcore.dot(self.gateway.unit, self.decision.unit)) > 1e-8:
                raise ModelError("gateway and decision directions must be orthogonal")
        if self.plan is not None and self.plan.delay < 2:
            raise ModelError("plan delay must be at least 2")
        probes = [r.probe for r in self.behavior_table]
        if len(set(probes)) != len(probes):
            raise ModelError("duplicate probe in behavior table")


PLANTED_BASE = ModelSpec(d_model=64, n_layers=6, n_heads=4, d_head=16, d_mlp=8, vocab_size=1, model_id="planted")


@dataclass
class PlantedInfo:
    """Ground truth of a planted model."""

    spec: PlantedSpec
    features: dict  # name -> unit vector
    persona_subspace: np.ndarray  # (4, d_model), rows orthonormal, row 0 = gateway
    copy_layers: tuple[int, ...]
    plan_layer: int | None
    persona_head: int = 0
    user_head: int = 1
    plan_head: int = 2
    influence_head: int = 3
    role_vectors: dict = field(default_factory=dict)  # role label -> persona-subspace coefficients

    @property
    def gateway(self) -> Direction:
        return Direction(self.features["gateway"], self.spec.readout_layer, "gateway")

    @property
    def decision(self) -> Direction:
        return Direction(self.features["decision"], self.spec.readout_layer, "decision")

    @property
    def plan_direction(self) -> Direction:
        if "plan" not in self.features:
            raise ModelError("no plan planted")
        return Direction(self.features["plan"], self.plan_layer or 0, "plan")

    @property
    def readout_layer(self) -> int:
        return self.spec.readout_layer


def planted_vocabulary(spec: PlantedSpec) -> Vocabulary:
    symbols = [SINK, MARK_PLUS, MARK_MINUS, FILLER, TRIGGER, *PAYOFFS]
    symbols += [f"role:{r}" for r in ASSISTANT_ROLES + OTHER_ROLES]
    symbols += list(USER_WORDS) + list(PRESSURE_WORDS) + list(ASSISTANT_WORDS) + list(STORY_WORDS)
    for row in spec.behavior_table:
        symbols += [row.probe, row.plus, row.minus]
    if spec.plan is not None:
        symbols += [spec.plan.trigger, spec.plan.payoff]
    return Vocabulary(list(dict.fromkeys(symbols)))


def _frame(d: int, given, rng) -> np.ndarray:
    """Orthonormal rows: the given unit vectors first, then random completions."""
    rows = []
    for g in given:
        rows.append(np.asarray(g, dtype=np.float64))
    for i, r in enumerate(rows):
        for prev in rows[:i]:
            if abs(numcore.dot(r, prev)) > 1e-8:
                raise ModelError("supplied planted directions are not mutually orthogonal")
    basis = list(rows)
    while len(basis) < d:
        cand = rng.normal(size=d)
        for b in basis:
            cand = cand - numcore.dot(cand, b) * b
        for b in basis:  # second pass for numerical orthogonality
            cand = cand - numcore.dot(cand, b) * b
        n = numcore.norm(cand)
        if n > 1e-6:
            basis.append(cand / n)
    return np.array(basis)


def _pe_frequencies(d_model: int, pairs: int) -> np.ndarray:
    return 10000.0 ** (-2.0 * np.arange(pairs) / d_model)


def _min_cos_gap(freqs: np.ndarray, horizon: int = 512) -> float:
    """Smallest drop of sum_i cos(w_i x) below its peak over integer offsets x != 0."""
    x = np.arange(1, horizon + 1)[:, None]
    return float(len(freqs) - np.max(np.sum(np.cos(x * freqs), axis=1)))


def build_planted_model(spec: PlantedSpec | None = None, base: ModelSpec = PLANTED_BASE, seed: int = 0) -> Model:
    spec = spec or PlantedSpec()
    cfg = spec.config
    D, L, H, dh = base.d_model, base.n_layers, base.n_heads, base.d_head
    R = spec.readout_layer
    if D < 16:
        raise ModelError("planted models need d_model >= 16")
    if not 0 <= R < L - 1:
        raise ModelError(f"readout_layer {R} must be in [0, n_layers - 2]")
    if H < 4 or dh < 4:
        raise ModelError("planted models need >= 4 heads of width >= 4")
    pairs = min(cfg.pe_pairs, (dh - 1) // 2)
    n_rows = len(spec.behavior_table)
    named = ["bias", "gateway", "persona2", "persona3", "persona4", "decision", "plan", "payoff_now",
             "carrier", "sink", "reader", "listener", "user_carrier", "user_reader", "trigger"]
    need = len(named) + n_rows + 2 * pairs
    if need > D:
        raise ModelError(f"infeasible planted spec: needs {need} orthogonal features, d_model is {D}")

    rng = np.random.default_rng(seed)
    given = []
    if spec.gateway is not None:
        given.append(spec.gateway.unit)
    if spec.decision is not None:
        given.append(spec.decision.unit)
    plan_dir = spec.plan.direction if spec.plan is not None else None
    if plan_dir is not None:
        given.append(plan_dir.unit)
    for g in given:
        if g.shape[0] != D:
            raise numcore.DimensionError(f"planted direction dim {g.shape[0]} != d_model {D}")
    frame = _frame(D, given, rng)
    # assign frame rows: supplied directions keep their identity
    order = []
    if spec.gateway is not None:
        order.append("gateway")
    if spec.decision is not None:
        order.append("decision")
    if plan_dir is not None:
        order.append("plan")
    rest = [n for n in named if n not in order]
    names = order + rest + [f"probe{i}" for i in range(n_rows)] + [f"pe{i}" for i in range(2 * pairs)]
    feat = {n: frame[i] for i, n in enumerate(names)}

    vocab = planted_vocabulary(spec)
    V = len(vocab)
    mspec = ModelSpec(D, L, H, dh, max(base.d_mlp, 4), V, 1, base.model_id if base.model_id != "planted" else f"planted-s{seed}")
    B = cfg.bias
    r0 = math.sqrt((B * B + pairs) / D)  # nominal RMS of every residual
    sq = math.sqrt(dh)
    f = feat

    # --- embeddings -------------------------------------------------------
    embed = np.zeros((V, D))
    persona_sub = np.array([f["gateway"], f["persona2"], f["persona3"], f["persona4"]])

    def put(sym, vec):
        embed[vocab.id_of(sym)] = B * f["bias"] + vec

    put(SINK, f["sink"])
    put(MARK_PLUS, f["carrier"] + cfg.marker * f["gateway"])
    put(MARK_MINUS, f["carrier"] - cfg.marker * f["gateway"])
    role_vectors = {}
    role_rng = np.random.default_rng(seed + 7919)
    for label in ASSISTANT_ROLES + OTHER_ROLES:
        coef = role_rng.normal(size=4) * np.array(cfg.role_spread)
        coef[0] = abs(coef[0]) + 0.1 if label in ASSISTANT_ROLES else -abs(coef[0]) - 0.1
        role_vectors[label] = coef
        put(f"role:{label}", f["carrier"] + coef @ persona_sub)
    for w in USER_WORDS:
        put(w, f["user_reader"])
    for w, strength in PRESSURE_WORDS.items():
        put(w, f["user_carrier"] - strength * f["gateway"])
    speaker = f["carrier"] + f["reader"] + f["listener"]
    for w in ASSISTANT_WORDS + STORY_WORDS + (FILLER,) + PAYOFFS:
        put(w, speaker)
    for i, row in enumerate(spec.behavior_table):
        put(row.probe, f["reader"] + f[f"probe{i}"])
        put(row.plus, speaker)
        put(row.minus, speaker)
    plan_layer = None
    if spec.plan is not None:
        plan_layer = R + 1
        put(spec.plan.trigger, speaker + f["trigger"] + f["plan"])
        put(spec.plan.payoff, speaker)

    pos_proj = np.zeros((D, D))
    for i in range(2 * pairs):
        pos_proj[:, i] = f[f"pe{i}"]

    # --- layers -------------------------------------------------------------
    M = mspec.d_mlp
    layers = []
    copy_layers = tuple(range(R + 1))
    for layer in range(L):
        w_q = np.zeros((H, dh, D))
        w_k = np.zeros((H, dh, D))
        w_v = np.zeros((H, dh, D))
        w_o = np.zeros((H, D, dh))
        w_in = np.zeros((1, M, D))
        w_out = np.zeros((1, D, M))
        if layer in copy_layers:
            # persona copy head
            w_q[0, 0] = cfg.sink_score * sq * r0 / B * f["bias"]
            w_k[0, 0] = r0 * f["sink"]
            w_q[0, 1] = cfg.carrier_score * sq * r0 * f["reader"]
            w_k[0, 1] = r0 * f["carrier"]
            for j in range(4):
                w_v[0, j] = r0 * persona_sub[j]
                w_o[0, :, j] = cfg.copy_gain * persona_sub[j]
            # user-model head
            w_q[1, 0] = cfg.sink_score * sq * r0 / B * f["bias"]
            w_k[1, 0] = r0 * f["sink"]
            w_q[1, 1] = cfg.carrier_score * sq * r0 * f["user_reader"]
            w_k[1, 1] = r0 * f["user_carrier"]
            w_v[1, 0] = r0 * f["gateway"]
            w_o[1, :, 0] = cfg.user_gain * f["gateway"]
            # influence head
            w_q[3, 0] = cfg.sink_score * sq * r0 / B * f["bias"]
            w_k[3, 0] = r0 * f["sink"]
            w_q[3, 1] = cfg.carrier_score * sq * r0 * f["listener"]
            w_k[3, 1] = r0 * f["user_carrier"]
            w_v[3, 0] = r0 * f["gateway"]
            w_o[3, :, 0] = cfg.influence_gain * f["gateway"]
        if layer == plan_layer:
            k = spec.plan.delay
            freqs = _pe_frequencies(D, pairs)
            gap = _min_cos_gap(freqs)
            a_pos = 2.0 * cfg.plan_margin / gap
            a_trig = cfg.plan_margin
            for i, w in enumerate(freqs):
                c, s = math.cos(w * (k - 1)), math.sin(w * (k - 1))
                pe_s, pe_c = f[f"pe{2 * i}"], f[f"pe{2 * i + 1}"]
                # query holds the code of position (j - (k - 1)); keys hold their own code
                w_q[2, 2 * i] = a_pos * sq * r0 * (c * pe_s - s * pe_c)
                w_q[2, 2 * i + 1] = a_pos * sq * r0 * (c * pe_c + s * pe_s)
                w_k[2, 2 * i] = r0 * pe_s
                w_k[2, 2 * i + 1] = r0 * pe_c
            t = 2 * pairs
            w_q[2, t] = a_trig * sq * r0 / B * f["bias"]
            w_k[2, t] = r0 * f["trigger"]
            w_v[2, 0] = r0 * f["plan"]
            w_o[2, :, 0] = f["payoff_now"]
        if layer == R:
            g, beta = cfg.readout_sharpness * r0, cfg.readout_width * r0 / B
            w_in[0, 0] = g * f["gateway"] + beta * f["bias"]
            w_in[0, 1] = g * f["gateway"] - beta * f["bias"]
            w_in[0, 2] = -g * f["gateway"] + beta * f["bias"]
            w_in[0, 3] = -g * f["gateway"] - beta * f["bias"]
            scale = cfg.decision / (2.0 * cfg.readout_width)
            for j, sign in enumerate((1.0, -1.0, -1.0, 1.0)):
                w_out[0, :, j] = sign * scale * f["decision"]
        layers.append(
            LayerWeights(np.ones(D), w_q, w_k, w_v, w_o, np.ones(D), w_in, w_out, np.zeros(D), None)
        )

    # --- unembedding ---------------------------------------------------------
    unembed = np.zeros((D, V))
    unembed[:, vocab.id_of(FILLER)] = cfg.filler_logit * r0 / B * f["bias"]
    for i, row in enumerate(spec.behavior_table):
        probe = cfg.probe_logit * r0 * f[f"probe{i}"]
        dec = cfg.behavior_logit * r0 * f["decision"]
        unembed[:, vocab.id_of(row.plus)] = probe + dec
        unembed[:, vocab.id_of(row.minus)] = probe - dec
    if spec.plan is not None:
        unembed[:, vocab.id_of(spec.plan.payoff)] = cfg.payoff_logit * r0 * f["payoff_now"]

    weights = ModelWeights(embed, pos_proj, layers, np.ones(D), unembed)
    model = Model(mspec, weights, vocab)
    model.planted = PlantedInfo(spec, feat, persona_sub, copy_layers, plan_layer, role_vectors=role_vectors)
    return model


def plan_divergent_spec(seed: int = 0, base: ModelSpec = PLANTED_BASE, payoff: str = PAYOFFS[1]) -> PlantedSpec:
    """Same layout, but the trigger plants a different plan direction and ending."""
    other = np.random.default_rng(seed + 104729).normal(size=base.d_model)
    return PlantedSpec(plan=PlanSpec(payoff=payoff, direction=Direction.of(other, label="plan-alt")))


VARIANTS = ("default", "plan-divergent")


def planted_model(variant: str = "default", seed: int = 0) -> Model:
    """Named planted recipes; the recipe is recorded so model files can recover ground truth."""
    if variant == "default":
        spec = PlantedSpec()
    elif variant == "plan-divergent":
        spec = plan_divergent_spec(seed)
    else:
        raise ModelError(f"unknown planted variant {variant!r}; choose from {VARIANTS}")
    model = build_planted_model(spec, replace(PLANTED_BASE, model_id=f"planted-{variant}-s{seed}"), seed)
    model.meta = {"kind": "planted", "variant": variant, "seed": seed}
    return model


def planted_from_meta(meta: dict) -> Model:
    return planted_model(meta["variant"], int(meta["seed"]))


# --- probe suites -----------------------------------------------------------

PROBE_CONTEXTS = (
    "hello", "tell me", "please", "ok so", "why", "now tell me", "hello again", "so",
    "tell me about yourself", "ok", "please tell me", "now", "why so", "hello please", "again",
    "tell me again", "ok now", "so why", "please now", "hello ok",
)


def probe_suite(model: Model, marker: str | None = MARK_PLUS, rows=None) -> list[Probe]:
    """One probe per behavior row, each in its own user context."""
    info = model.planted
    if info is None:
        raise ModelError("not a planted model")
    vocab = model.vocab
    rows = info.spec.behavior_table if rows is None else rows
    probes = []
    for i, row in enumerate(rows):
        system = SINK if marker is None else f"{SINK} {marker}"
        ctx = PROBE_CONTEXTS[i % len(PROBE_CONTEXTS)]
        t = Transcript.build(vocab, [("system", system), ("user", f"{ctx} {row.probe}")])
        probes.append(Probe(row.probe, t, vocab.id_of(row.plus), vocab.id_of(row.minus)))
    return probes


def persona_prompts(model: Model, marker: str, n: int = 4) -> list[Transcript]:
    """Extraction prompts: a persona marker, then a short question."""
    rows = model.planted.spec.behavior_table
    return [
        Transcript.build(model.vocab, [("system", f"{SINK} {marker}"), ("user", f"{PROBE_CONTEXTS[i]} {rows[i % len(rows)].probe}")])
        for i in range(n)
    ]


def role_prompts(model: Model) -> list[tuple[str, Transcript]]:
    return [
        (label, Transcript.build(model.vocab, [("system", f"{SINK} role:{label}")]))
        for label in ASSISTANT_ROLES + OTHER_ROLES
    ]


def question_battery(model: Model, n: int = 6) -> list[str]:
    rows = model.planted.spec.behavior_table
    return [f"{PROBE_CONTEXTS[i]} {rows[1 + i % (len(rows) - 1)].probe}" for i in range(n)]
