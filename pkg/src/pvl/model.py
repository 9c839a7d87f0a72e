"""Decoder-only toy transformer with an explicit KV cache and hook sites.

Pre-norm blocks: ``x += attn(rms_norm(x))``; ``x += mlp(rms_norm(x)) + b_out``.
The MLP is a GELU two-matrix network or, with ``n_experts > 1``, a top-1
routed mixture of such experts.

Every kernel below is written against arrays with optional leading batch
axes so the one-position path (:meth:`Model.forward_pass`) and the
layer-synchronous path (:meth:`Model.forward_parallel`) execute exactly the
same per-row arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import numcore
from .kvcache import CacheError, KVCache
from .transcript import Transcript, TranscriptError, TurnRole, Vocabulary

PE_BASE = 10000.0


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    d_model: int
    n_layers: int
    n_heads: int
    d_head: int
    d_mlp: int
    vocab_size: int
    n_experts: int = 1
    model_id: str = "model"

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_head", "d_mlp", "vocab_size", "n_experts"):
            if int(getattr(self, name)) < 1:
                raise ModelError(f"{name} must be positive")
        if self.n_heads * self.d_head != self.d_model:
            raise ModelError(f"n_heads*d_head = {self.n_heads * self.d_head} != d_model = {self.d_model}")


@dataclass
class LayerWeights:
    norm1: np.ndarray  # (d_model,)
    w_q: np.ndarray  # (heads, d_head, d_model)
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # (heads, d_model, d_head)
    norm2: np.ndarray
    w_in: np.ndarray  # (experts, d_mlp, d_model)
    w_out: np.ndarray  # (experts, d_model, d_mlp)
    b_out: np.ndarray  # (d_model,)
    router: np.ndarray | None = None  # (experts, d_model)

    def copy(self) -> "LayerWeights":
        return LayerWeights(**{k: (None if v is None else v.copy()) for k, v in vars(self).items()})


@dataclass
class ModelWeights:
    embed: np.ndarray  # (vocab, d_model)
    pos_proj: np.ndarray  # (d_model, d_model), applied to the raw sinusoid
    layers: list[LayerWeights]
    final_norm: np.ndarray
    unembed: np.ndarray  # (d_model, vocab)

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.embed.copy(),
            self.pos_proj.copy(),
            [lw.copy() for lw in self.layers],
            self.final_norm.copy(),
            self.unembed.copy(),
        )

    def tensors(self):
        """(name, array) pairs in the canonical serialization order."""
        yield "embed", self.embed
        yield "pos_proj", self.pos_proj
        for i, lw in enumerate(self.layers):
            yield f"layers.{i}.norm1", lw.norm1
            yield f"layers.{i}.w_q", lw.w_q
            yield f"layers.{i}.w_k", lw.w_k
            yield f"layers.{i}.w_v", lw.w_v
            yield f"layers.{i}.w_o", lw.w_o
            yield f"layers.{i}.norm2", lw.norm2
            if lw.router is not None:
                yield f"layers.{i}.router", lw.router
            yield f"layers.{i}.w_in", lw.w_in
            yield f"layers.{i}.w_out", lw.w_out
            yield f"layers.{i}.b_out", lw.b_out
        yield "final_norm", self.final_norm
        yield "unembed", self.unembed


def weight_shapes(spec: ModelSpec) -> dict[str, tuple]:
    D, H, dh, M, E, V = spec.d_model, spec.n_heads, spec.d_head, spec.d_mlp, spec.n_experts, spec.vocab_size
    shapes = {"embed": (V, D), "pos_proj": (D, D)}
    for i in range(spec.n_layers):
        shapes[f"layers.{i}.norm1"] = (D,)
        for w in ("w_q", "w_k", "w_v"):
            shapes[f"layers.{i}.{w}"] = (H, dh, D)
        shapes[f"layers.{i}.w_o"] = (H, D, dh)
        shapes[f"layers.{i}.norm2"] = (D,)
        if E > 1:
            shapes[f"layers.{i}.router"] = (E, D)
        shapes[f"layers.{i}.w_in"] = (E, M, D)
        shapes[f"layers.{i}.w_out"] = (E, D, M)
        shapes[f"layers.{i}.b_out"] = (D,)
    shapes["final_norm"] = (D,)
    shapes["unembed"] = (D, V)
    return shapes


def weights_from_tensors(spec: ModelSpec, tensors: dict) -> ModelWeights:
    shapes = weight_shapes(spec)
    for name, shape in shapes.items():
        if name not in tensors:
            raise ModelError(f"missing tensor {name}")
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.shape != shape:
            raise ModelError(f"tensor {name} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise ModelError(f"tensor {name} has non-finite entries")
        tensors[name] = arr
    layers = []
    for i in range(spec.n_layers):
        t = lambda k: tensors[f"layers.{i}.{k}"]  # noqa: E731
        layers.append(
            LayerWeights(
                t("norm1"), t("w_q"), t("w_k"), t("w_v"), t("w_o"), t("norm2"),
                t("w_in"), t("w_out"), t("b_out"),
                tensors[f"layers.{i}.router"] if spec.n_experts > 1 else None,
            )
        )
    return ModelWeights(tensors["embed"], tensors["pos_proj"], layers, tensors["final_norm"], tensors["unembed"])


class Site(NamedTuple):
    layer: int
    pos: int
    role: TurnRole


class Hook:
    """Base class for forward-pass hooks; every method is a no-op.

    ``modify_resid`` runs at each layer entry and may return a replacement
    residual. Observers see the residual after all modifications.
    """

    def modify_resid(self, site: Site, x: np.ndarray) -> np.ndarray:
        return x

    def observe_resid(self, site: Site, where: str, x: np.ndarray) -> None:
        pass

    def observe_attention(self, site: Site, weights: np.ndarray, values: np.ndarray, w_o: np.ndarray) -> None:
        pass

    def route(self, site: Site, scores: np.ndarray, choice: int) -> int:
        return choice

    def observe_logits(self, site: Site, logits: np.ndarray) -> None:
        pass


class ForceExpert(Hook):
    """Override the router at one layer (optionally only at some positions)."""

    def __init__(self, layer: int, expert: int, positions=None):
        self.layer = layer
        self.expert = expert
        self.positions = None if positions is None else set(positions)

    def route(self, site, scores, choice):
        if site.layer == self.layer and (self.positions is None or site.pos in self.positions):
            return self.expert
        return choice


def sinusoid(pos, d_model: int) -> np.ndarray:
    """Raw sinusoidal code; ``pos`` may be an int or an array of ints."""
    pos = np.asarray(pos, dtype=np.float64)
    i = np.arange(d_model) // 2
    freq = PE_BASE ** (-2.0 * i / d_model)
    ang = pos[..., None] * freq
    return np.where(np.arange(d_model) % 2 == 0, np.sin(ang), np.cos(ang))


@dataclass(frozen=True)
class DecodePolicy:
    kind: str = "greedy"  # greedy | sample
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("greedy", "sample"):
            raise ValueError(f"unknown decode policy {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


GREEDY = DecodePolicy()


@dataclass
class Generation:
    transcript: Transcript
    cache: KVCache
    logits: dict = field(default_factory=dict)  # pos -> logits computed in this run
    new_tokens: list = field(default_factory=list)


class Model:
    def __init__(self, spec: ModelSpec, weights: ModelWeights, vocab: Vocabulary):
        if len(vocab) != spec.vocab_size:
            raise ModelError(f"vocabulary has {len(vocab)} symbols, spec says {spec.vocab_size}")
        self.spec = spec
        self.weights = weights
        self.vocab = vocab
        self.planted = None  # ground-truth layout, set by the planted builder
        self.meta: dict = {}  # provenance recorded in model files
        weights_from_tensors(spec, dict(weights.tensors()))
        self._unembed_t = np.ascontiguousarray(weights.unembed.T)
        self._scale = math.sqrt(spec.d_head)

    def __repr__(self) -> str:
        s = self.spec
        return f"Model({s.model_id!r}, L={s.n_layers}, H={s.n_heads}, D={s.d_model}, V={s.vocab_size}, E={s.n_experts})"

    # --- validation ----------------------------------------------------

    def check_tokens(self, tokens) -> None:
        for t in tokens:
            if not 0 <= int(t) < self.spec.vocab_size:
                raise ModelError(f"token id {t} out of range [0, {self.spec.vocab_size})")

    def check_transcript(self, transcript: Transcript) -> None:
        if transcript.vocab_id != self.vocab.vocab_id:
            raise TranscriptError(
                f"transcript vocabulary {transcript.vocab_id!r} != model vocabulary {self.vocab.vocab_id!r}"
            )

    # --- components ----------------------------------------------------

    def positional(self, pos) -> np.ndarray:
        return numcore.matvec(self.weights.pos_proj, sinusoid(pos, self.spec.d_model))

    def embed(self, token: int, pos: int | None = None) -> np.ndarray:
        self.check_tokens([token])
        row = self.weights.embed[int(token)].copy()
        if pos is None:
            return row
        return row + self.positional(pos)

    def _embed_many(self, tokens, positions) -> np.ndarray:
        return self.weights.embed[np.asarray(tokens)] + self.positional(np.asarray(positions))

    def _qkv(self, lw: LayerWeights, xn: np.ndarray):
        xb = xn[..., None, :]  # broadcast against (heads, d_head, d_model)
        return numcore.matvec(lw.w_q, xb), numcore.matvec(lw.w_k, xb), numcore.matvec(lw.w_v, xb)

    def _mix_heads(self, lw: LayerWeights, o: np.ndarray) -> np.ndarray:
        contrib = numcore.matvec(lw.w_o, o)  # (..., heads, d_model)
        return np.add.accumulate(contrib, axis=-2)[..., -1, :]

    def attention_forward(self, layer: int, resid: np.ndarray, cache: KVCache, pos: int, role=TurnRole.USER, hooks=()):
        """One attention layer at one position.

        Returns ``(resid', key, value, weights)`` where key/value are this
        position's (heads, d_head) entries (already appended to ``cache``)
        and weights is (heads, pos + 1).
        """
        if cache.layer_len(layer) != pos:
            raise CacheError(f"layer {layer}: cache holds {cache.layer_len(layer)} positions, pass is at {pos}")
        lw = self.weights.layers[layer]
        xn = numcore.rms_norm(resid, lw.norm1)
        q, k, v = self._qkv(lw, xn)
        keys = np.concatenate([cache.keys(layer), k[:, None, :]], axis=1)
        vals = np.concatenate([cache.values(layer), v[:, None, :]], axis=1)
        scores = numcore.rowsum(q[:, None, :] * keys) / self._scale
        w = numcore.softmax(scores)
        o = numcore.weighted_sum(w, vals)
        out = resid + self._mix_heads(lw, o)
        cache.append(layer, k, v)
        if hooks:
            site = Site(layer, pos, TurnRole(role))
            for h in hooks:
                h.observe_attention(site, w, vals, lw.w_o)
        return out, k, v, w

    def mlp_forward(self, layer: int, resid: np.ndarray, pos: int = 0, role=TurnRole.USER, hooks=()):
        """Returns ``(resid', expert_choice)``."""
        lw = self.weights.layers[layer]
        xn = numcore.rms_norm(resid, lw.norm2)
        choice = 0
        if lw.router is not None:
            scores = numcore.matvec(lw.router, xn)
            choice = numcore.argmax_first(scores)
            site = Site(layer, pos, TurnRole(role))
            for h in hooks:
                choice = h.route(site, scores, choice)
            if not 0 <= choice < self.spec.n_experts:
                raise ModelError(f"expert {choice} out of range")
        hidden = numcore.gelu(numcore.matvec(lw.w_in[choice], xn))
        out = resid + numcore.matvec(lw.w_out[choice], hidden)
        return out + lw.b_out, choice

    def unembed(self, x: np.ndarray) -> np.ndarray:
        return numcore.matvec(self._unembed_t, numcore.rms_norm(x, self.weights.final_norm))

    # --- full passes ---------------------------------------------------

    def forward_pass(self, token: int, pos: int, cache: KVCache, role=TurnRole.USER, hooks=()) -> np.ndarray:
        cache.check_model(self)
        if len(cache) != pos:
            raise CacheError(f"position gap: cache holds {len(cache)} positions, pass is at {pos}")
        role = TurnRole(role)
        x = self.embed(token, pos)
        for layer in range(self.spec.n_layers):
            site = Site(layer, pos, role)
            for h in hooks:
                x = h.modify_resid(site, x)
            for h in hooks:
                h.observe_resid(site, "pre", x)
            x, _, _, _ = self.attention_forward(layer, x, cache, pos, role, hooks)
            for h in hooks:
                h.observe_resid(site, "mid", x)
            x, _ = self.mlp_forward(layer, x, pos, role, hooks)
            for h in hooks:
                h.observe_resid(site, "post", x)
        logits = self.unembed(x)
        site = Site(self.spec.n_layers, pos, role)
        for h in hooks:
            h.observe_logits(site, logits)
        cache.commit(token, role)
        cache.next_logits = logits
        return logits

    def forward_parallel(self, tokens, roles, cache: KVCache, hooks=()) -> np.ndarray:
        """Process ``tokens`` after the cache's current contents, one layer at a time.

        All positions advance through layer l before any enters layer l+1.
        Returns logits of shape (len(tokens), vocab).
        """
        cache.check_model(self)
        n0 = len(cache)
        n = len(tokens)
        roles = [TurnRole(r) for r in roles]
        positions = np.arange(n0, n0 + n)
        x = self._embed_many(tokens, positions)
        total = n0 + n
        causal = positions[:, None] >= np.arange(total)[None, :]  # (n, total)
        mask = np.where(causal, 0.0, -np.inf)[:, None, :]
        for layer in range(self.spec.n_layers):
            lw = self.weights.layers[layer]
            if hooks:
                for i in range(n):
                    site = Site(layer, n0 + i, roles[i])
                    row = x[i]
                    for h in hooks:
                        row = h.modify_resid(site, row)
                    x[i] = row
                    for h in hooks:
                        h.observe_resid(site, "pre", x[i])
            xn = numcore.rms_norm(x, lw.norm1)
            q, k, v = self._qkv(lw, xn)  # (n, heads, d_head)
            cache.write_layer(layer, k.transpose(1, 0, 2), v.transpose(1, 0, 2))
            keys = cache.keys(layer)  # (heads, total, d_head)
            vals = cache.values(layer)
            scores = numcore.rowsum(q[:, :, None, :] * keys[None]) / self._scale  # (n, heads, total)
            w = numcore.softmax(scores + mask)
            o = numcore.weighted_sum(w, vals[None])
            x = x + self._mix_heads(lw, o)
            if hooks:
                for i in range(n):
                    site = Site(layer, n0 + i, roles[i])
                    p = n0 + i
                    for h in hooks:
                        h.observe_attention(site, w[i, :, : p + 1], vals[:, : p + 1], lw.w_o)
                        h.observe_resid(site, "mid", x[i])
            xn = numcore.rms_norm(x, lw.norm2)
            if lw.router is None:
                choices = np.zeros(n, dtype=int)
            else:
                scores_e = numcore.matvec(lw.router, xn)
                choices = np.array([numcore.argmax_first(s) for s in scores_e])
                for i in range(n):
                    site = Site(layer, n0 + i, roles[i])
                    for h in hooks:
                        choices[i] = h.route(site, scores_e[i], int(choices[i]))
            hidden = numcore.gelu(numcore.matvec(lw.w_in[choices], xn))
            x = x + numcore.matvec(lw.w_out[choices], hidden)
            x = x + lw.b_out
            if hooks:
                for i in range(n):
                    site = Site(layer, n0 + i, roles[i])
                    for h in hooks:
                        h.observe_resid(site, "post", x[i])
        xf = numcore.rms_norm(x, self.weights.final_norm)
        logits = numcore.matvec(self._unembed_t, xf)
        if hooks:
            for i in range(n):
                site = Site(self.spec.n_layers, n0 + i, roles[i])
                for h in hooks:
                    h.observe_logits(site, logits[i])
        cache.commit_many(tokens, roles)
        cache.next_logits = logits[-1]
        return logits

    # --- generation ----------------------------------------------------

    def decode(self, transcript: Transcript, n_new: int, policy: DecodePolicy = GREEDY, hooks=(), cache=None) -> Generation:
        """Run the transcript through the cache, then emit ``n_new`` assistant tokens.

        A supplied cache must hold a prefix of the transcript (e.g. one that
        was transferred from another server); only the remaining positions
        are processed. Emitted tokens extend a trailing assistant turn or
        open a new one.
        """
        if n_new < 0:
            raise ValueError("n_new must be >= 0")
        self.check_transcript(transcript)
        tokens = transcript.tokens
        roles = transcript.roles
        if cache is None:
            cache = KVCache.for_model(self, len(tokens) + n_new)
        else:
            cache.check_model(self)
            if cache.tokens != tokens[: len(cache)]:
                raise CacheError("cache does not hold a prefix of this transcript")
            if len(cache) == len(tokens) and n_new > 0 and tokens and cache.next_logits is None:
                # the last position's logits are unknown; recompute them
                cache = cache.truncated(len(tokens) - 1)
        gen = Generation(transcript, cache)
        if n_new > 0 and not tokens:
            raise ModelError("cannot generate from an empty transcript")
        logits = cache.next_logits if len(cache) == len(tokens) else None
        start = len(cache)
        if start < len(tokens):
            # known tokens go through the layer-synchronous path (bit-identical)
            block = self.forward_parallel(tokens[start:], roles[start:], cache, hooks)
            for i, row in enumerate(block):
                gen.logits[start + i] = row
            logits = block[-1]
        if n_new == 0:
            return gen
        rng = np.random.default_rng(policy.seed) if policy.kind == "sample" else None
        pos = len(tokens)
        new = []
        for _ in range(n_new):
            tok = choose_token(logits, policy, rng)
            new.append(tok)
            logits = self.forward_pass(tok, pos, cache, TurnRole.ASSISTANT, hooks)
            gen.logits[pos] = logits
            pos += 1
        gen.new_tokens = new
        gen.transcript = transcript.extended(self.vocab, TurnRole.ASSISTANT, new)
        return gen

    def generate(self, transcript: Transcript, n_new: int, policy: DecodePolicy = GREEDY, hooks=()) -> Transcript:
        return self.decode(transcript, n_new, policy, hooks).transcript

    def with_weights(self, weights: ModelWeights, model_id: str) -> "Model":
        new = Model(replace(self.spec, model_id=model_id), weights, self.vocab)
        new.planted = self.planted
        new.meta = dict(self.meta)
        return new


def choose_token(logits: np.ndarray, policy: DecodePolicy, rng=None) -> int:
    if len(logits) == 0:
        raise ModelError("empty vocabulary")
    if policy.kind == "greedy":
        return numcore.argmax_first(logits)
    probs = numcore.softmax(np.asarray(logits) / policy.temperature)
    cdf = np.cumsum(probs)
    r = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, r, side="right"), len(cdf) - 1))


# module-level conveniences mirroring the method API


def embed(model: Model, token: int, pos: int | None = None) -> np.ndarray:
    return model.embed(token, pos)


def forward_pass(model: Model, token: int, pos: int, cache: KVCache, role=TurnRole.USER, hooks=()) -> np.ndarray:
    return model.forward_pass(token, pos, cache, role, hooks)


def generate(model: Model, transcript: Transcript, n_new: int, policy: DecodePolicy = GREEDY, hooks=()) -> Transcript:
    return model.generate(transcript, n_new, policy, hooks)


def build_random_model(
    d_model=16, n_layers=2, n_heads=2, d_mlp=32, vocab_size=24, n_experts=1, seed=0, vocab=None
) -> Model:
    """Gaussian-initialized model for determinism and plumbing tests."""
    rng = np.random.default_rng(seed)
    if vocab is None:
        vocab = Vocabulary([f"t{i}" for i in range(vocab_size)])
    spec = ModelSpec(d_model, n_layers, n_heads, d_model // n_heads, d_mlp, len(vocab), n_experts, f"random-s{seed}")
    D, H, dh, M, E = d_model, n_heads, spec.d_head, d_mlp, n_experts
    g = lambda *shape, scale=1.0: rng.normal(0.0, scale, size=shape)  # noqa: E731
    layers = []
    for _ in range(n_layers):
        layers.append(
            LayerWeights(
                norm1=1.0 + 0.1 * g(D),
                w_q=g(H, dh, D, scale=D**-0.5),
                w_k=g(H, dh, D, scale=D**-0.5),
                w_v=g(H, dh, D, scale=D**-0.5),
                w_o=g(H, D, dh, scale=dh**-0.5),
                norm2=1.0 + 0.1 * g(D),
                w_in=g(E, M, D, scale=D**-0.5),
                w_out=g(E, D, M, scale=M**-0.5),
                b_out=np.zeros(D),
                router=g(E, D) if E > 1 else None,
            )
        )
    weights = ModelWeights(
        embed=g(len(vocab), D),
        pos_proj=0.5 * np.eye(D),
        layers=layers,
        final_norm=np.ones(D),
        unembed=g(D, len(vocab), scale=D**-0.5),
    )
    return Model(spec, weights, vocab)
