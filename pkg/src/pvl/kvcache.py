"""KV-cache storage and lifecycle: prefill, transfer, rebuild, divergence, edits."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import numcore
from .transcript import TurnRole

CACHE_MAGIC = b"PVKC"
CACHE_VERSION = 1
DIVERGENCE_EPS = 1e-12


class CacheError(ValueError):
    pass


class CacheFormatError(CacheError):
    pass


class ModelMismatchError(CacheError):
    pass


@dataclass(frozen=True)
class KVEntry:
    key: np.ndarray
    value: np.ndarray
    layer: int
    head: int
    pos: int
    role: TurnRole


class KVCache:
    """Dense per-layer store of keys and values, shaped (heads, positions, d_head).

    Positions per layer always form a gapless prefix. During a forward pass
    lower layers run one position ahead of higher ones; :meth:`commit` closes
    the position once every layer holds it.
    """

    def __init__(self, model_id: str, n_layers: int, n_heads: int, d_head: int, capacity: int = 16):
        self.model_id = model_id
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_head = d_head
        cap = max(1, capacity)
        self._k = [np.zeros((n_heads, cap, d_head)) for _ in range(n_layers)]
        self._v = [np.zeros((n_heads, cap, d_head)) for _ in range(n_layers)]
        self._len = [0] * n_layers
        self.roles: list[TurnRole] = []
        self.tokens: list[int] = []
        # logits computed at the last committed position (what comes next)
        self.next_logits: np.ndarray | None = None

    @classmethod
    def for_model(cls, model, capacity: int = 16) -> "KVCache":
        s = model.spec
        return cls(s.model_id, s.n_layers, s.n_heads, s.d_head, capacity)

    def __len__(self) -> int:
        return len(self.tokens)

    def layer_len(self, layer: int) -> int:
        return self._len[layer]

    def keys(self, layer: int) -> np.ndarray:
        return self._k[layer][:, : self._len[layer]]

    def values(self, layer: int) -> np.ndarray:
        return self._v[layer][:, : self._len[layer]]

    def _reserve(self, layer: int, n: int) -> None:
        cap = self._k[layer].shape[1]
        if n <= cap:
            return
        new_cap = max(n, 2 * cap)
        for store in (self._k, self._v):
            grown = np.zeros((self.n_heads, new_cap, self.d_head))
            grown[:, :cap] = store[layer]
            store[layer] = grown

    def append(self, layer: int, key: np.ndarray, value: np.ndarray) -> None:
        n = self._len[layer]
        if n != len(self.tokens):
            raise CacheError(f"layer {layer} holds {n} positions, expected {len(self.tokens)}")
        self._reserve(layer, n + 1)
        self._k[layer][:, n] = key
        self._v[layer][:, n] = value
        self._len[layer] = n + 1

    def write_layer(self, layer: int, keys: np.ndarray, values: np.ndarray) -> None:
        """Bulk-append positions (heads, n, d_head) to one layer."""
        n0 = self._len[layer]
        n = keys.shape[1]
        self._reserve(layer, n0 + n)
        self._k[layer][:, n0 : n0 + n] = keys
        self._v[layer][:, n0 : n0 + n] = values
        self._len[layer] = n0 + n

    def commit(self, token: int, role: TurnRole) -> None:
        n = len(self.tokens) + 1
        if any(length != n for length in self._len):
            raise CacheError(f"commit with uneven layer lengths {self._len}, expected {n}")
        self.tokens.append(int(token))
        self.roles.append(TurnRole(role))

    def commit_many(self, tokens, roles) -> None:
        n = len(self.tokens) + len(tokens)
        if any(length != n for length in self._len):
            raise CacheError(f"commit with uneven layer lengths {self._len}, expected {n}")
        self.tokens.extend(int(t) for t in tokens)
        self.roles.extend(TurnRole(r) for r in roles)

    def entry(self, layer: int, head: int, pos: int) -> KVEntry:
        if not 0 <= pos < len(self.tokens):
            raise IndexError(f"position {pos} not cached")
        return KVEntry(
            self._k[layer][head, pos].copy(),
            self._v[layer][head, pos].copy(),
            layer,
            head,
            pos,
            self.roles[pos],
        )

    def copy(self) -> "KVCache":
        out = KVCache(self.model_id, self.n_layers, self.n_heads, self.d_head, len(self) or 1)
        for layer in range(self.n_layers):
            out.write_layer(layer, self.keys(layer).copy(), self.values(layer).copy())
        out.tokens = list(self.tokens)
        out.roles = list(self.roles)
        out.next_logits = None if self.next_logits is None else self.next_logits.copy()
        return out

    def truncated(self, n: int) -> "KVCache":
        out = KVCache(self.model_id, self.n_layers, self.n_heads, self.d_head, n or 1)
        for layer in range(self.n_layers):
            out.write_layer(layer, self.keys(layer)[:, :n].copy(), self.values(layer)[:, :n].copy())
        out.tokens = list(self.tokens[:n])
        out.roles = list(self.roles[:n])
        return out

    def check_model(self, model) -> None:
        s = model.spec
        if self.model_id != s.model_id:
            raise ModelMismatchError(f"cache built by model {self.model_id!r}, executing {s.model_id!r}")
        if (self.n_layers, self.n_heads, self.d_head) != (s.n_layers, s.n_heads, s.d_head):
            raise ModelMismatchError("cache shape does not match model spec")

    def bit_equal(self, other: "KVCache") -> bool:
        if (self.n_layers, self.n_heads, self.d_head) != (other.n_layers, other.n_heads, other.d_head):
            return False
        if self.tokens != other.tokens or self.roles != other.roles or self.model_id != other.model_id:
            return False
        for layer in range(self.n_layers):
            if self.keys(layer).tobytes() != other.keys(layer).tobytes():
                return False
            if self.values(layer).tobytes() != other.values(layer).tobytes():
                return False
        return True

    def __eq__(self, other) -> bool:
        return isinstance(other, KVCache) and self.bit_equal(other)

    __hash__ = None


# --- transfer -------------------------------------------------------------


def serialize_cache(cache: KVCache) -> bytes:
    n = len(cache)
    mid = cache.model_id.encode("utf-8")
    parts = [
        CACHE_MAGIC,
        struct.pack("<H", CACHE_VERSION),
        struct.pack("<I", len(mid)),
        mid,
        struct.pack("<4I", cache.n_layers, cache.n_heads, cache.d_head, n),
        bytes(int(r) for r in cache.roles),
        struct.pack(f"<{n}I", *cache.tokens),
    ]
    logits = cache.next_logits
    parts.append(struct.pack("<I", 0 if logits is None else len(logits)))
    if logits is not None:
        parts.append(np.asarray(logits).astype("<f8").tobytes())
    for layer in range(cache.n_layers):
        k = cache.keys(layer)
        v = cache.values(layer)
        for head in range(cache.n_heads):
            for pos in range(n):
                parts.append(k[head, pos].astype("<f8").tobytes())
                parts.append(v[head, pos].astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CacheFormatError("truncated payload")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize_cache(data: bytes) -> KVCache:
    if len(data) < 10:
        raise CacheFormatError("truncated payload")
    body, trailer = data[:-4], data[-4:]
    if data[:4] != CACHE_MAGIC:
        raise CacheFormatError("bad magic, not a cache file")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != CACHE_VERSION:
        raise CacheFormatError(f"unsupported cache version {version}")
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body):
        raise CacheFormatError("checksum mismatch (corrupt or truncated cache)")
    (mlen,) = r.unpack("<I")
    model_id = r.take(mlen).decode("utf-8")
    n_layers, n_heads, d_head, n = r.unpack("<4I")
    roles = [TurnRole(b) for b in r.take(n)]
    tokens = list(r.unpack(f"<{n}I"))
    (n_logits,) = r.unpack("<I")
    next_logits = np.frombuffer(r.take(8 * n_logits), dtype="<f8").astype(np.float64) if n_logits else None
    cache = KVCache(model_id, n_layers, n_heads, d_head, n or 1)
    row = 8 * d_head
    for layer in range(n_layers):
        k = np.zeros((n_heads, n, d_head))
        v = np.zeros((n_heads, n, d_head))
        for head in range(n_heads):
            for pos in range(n):
                k[head, pos] = np.frombuffer(r.take(row), dtype="<f8")
                v[head, pos] = np.frombuffer(r.take(row), dtype="<f8")
        cache.write_layer(layer, k, v)
    if r.off != len(body):
        raise CacheFormatError("trailing bytes after cache payload")
    cache.tokens = tokens
    cache.roles = roles
    cache.next_logits = next_logits
    return cache


def load_cache_for(data: bytes, model) -> KVCache:
    """Deserialize and check the cache belongs to ``model``."""
    cache = deserialize_cache(data)
    cache.check_model(model)
    return cache


# --- prefill ---------------------------------------------------------------


def _split(tokens, roles):
    tokens = list(tokens)
    if roles is None:
        roles = [TurnRole.USER] * len(tokens)
    roles = [TurnRole(r) for r in roles]
    if not tokens:
        raise CacheError("prefill needs at least one token")
    if len(roles) != len(tokens):
        raise CacheError("tokens and roles differ in length")
    return tokens, roles


def prefill(model, tokens, roles=None, hooks=()) -> KVCache:
    """Rebuild a cache by running forward passes one position at a time."""
    tokens, roles = _split(tokens, roles)
    model.check_tokens(tokens)
    cache = KVCache.for_model(model, len(tokens))
    for pos, (tok, role) in enumerate(zip(tokens, roles)):
        model.forward_pass(tok, pos, cache, role=role, hooks=hooks)
    return cache


def prefill_parallel(model, tokens, roles=None, hooks=()) -> KVCache:
    """Layer-synchronous prefill: all positions advance one layer at a time."""
    tokens, roles = _split(tokens, roles)
    model.check_tokens(tokens)
    cache = KVCache.for_model(model, len(tokens))
    model.forward_parallel(tokens, roles, cache, hooks=hooks)
    return cache


def prefill_transcript(model, transcript, parallel: bool = False, hooks=()) -> KVCache:
    model.check_transcript(transcript)
    fn = prefill_parallel if parallel else prefill
    return fn(model, transcript.tokens, transcript.roles, hooks=hooks)


def rebuild_for_model(transcript, other_model, parallel: bool = False) -> KVCache:
    """The new model cannot reuse a foreign cache; it re-reads the transcript."""
    return prefill_transcript(other_model, transcript, parallel=parallel)


# --- comparison ------------------------------------------------------------


def cache_divergence(a: KVCache, b: KVCache) -> float:
    """Mean relative distance between aligned key and value vectors."""
    if (a.n_layers, a.n_heads, a.d_head) != (b.n_layers, b.n_heads, b.d_head):
        raise CacheError("incomparable caches: shapes differ")
    if len(a) != len(b):
        raise CacheError(f"incomparable caches: lengths {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise CacheError("incomparable caches: empty")
    total = 0.0
    count = 0
    for layer in range(a.n_layers):
        for xa, xb in ((a.keys(layer), b.keys(layer)), (a.values(layer), b.values(layer))):
            diff = np.sqrt(numcore.rowsum((xa - xb) ** 2))
            scale = np.maximum(np.maximum(np.sqrt(numcore.rowsum(xa * xa)), np.sqrt(numcore.rowsum(xb * xb))), DIVERGENCE_EPS)
            rel = diff / scale
            total += float(rel.sum())
            count += rel.size
    return total / count


# --- editing ---------------------------------------------------------------


@dataclass(frozen=True)
class CacheSelector:
    layers: tuple[int, int]  # inclusive
    heads: frozenset = frozenset()  # empty = all heads
    role: TurnRole | None = None
    target: str = "values"  # keys | values | both
    positions: frozenset | None = None  # None = every position (after the role filter)

    def __post_init__(self):
        if self.target not in ("keys", "values", "both"):
            raise ValueError(f"target must be keys, values or both, not {self.target!r}")
        lo, hi = self.layers
        if lo > hi:
            raise ValueError(f"empty layer range {self.layers}")

    def validate(self, cache: KVCache) -> None:
        lo, hi = self.layers
        if lo < 0 or hi >= cache.n_layers:
            raise CacheError(f"layer range {self.layers} outside [0, {cache.n_layers - 1}]")
        bad = [h for h in self.heads if not 0 <= h < cache.n_heads]
        if bad:
            raise CacheError(f"heads {bad} outside [0, {cache.n_heads - 1}]")

    def head_list(self, n_heads: int) -> list[int]:
        return sorted(self.heads) if self.heads else list(range(n_heads))


@dataclass
class EditReport:
    count: int = 0
    mean_abs_delta: float = 0.0
    skipped_heads: list = field(default_factory=list)
    positions: list = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.count == 0


def head_directions(model, direction, layer: int, target: str) -> list:
    """Map a residual-space direction into each head's key or value space.

    The residual direction is pushed through the head's W_K or W_V and
    renormalized; heads that annihilate it get ``None``.
    """
    w = model.weights.layers[layer]
    mat = w.w_v if target == "values" else w.w_k
    unit = getattr(direction, "unit", None)
    unit = numcore.normalize(direction) if unit is None else unit
    out = []
    for h in range(mat.shape[0]):
        mapped = numcore.matvec(mat[h], unit)
        n = numcore.norm(mapped)
        out.append(None if n < 1e-12 else mapped / n)
    return out


def edit_cache(cache: KVCache, sel: CacheSelector, direction, *, scale=None, set_to=None, add=None, model=None) -> EditReport:
    """Transform the component of selected entries along ``direction`` in place.

    ``direction`` may live in head space (d_head) and then applies to every
    selected head as is, or in residual space (d_model), in which case
    ``model`` is required to map it through each head's W_V / W_K. Only the
    component along the (per-head) direction changes.
    """
    modes = [m for m in (scale, set_to, add) if m is not None]
    if len(modes) != 1:
        raise ValueError("give exactly one of scale=, set_to=, add=")
    sel.validate(cache)
    unit = getattr(direction, "unit", None)
    unit = np.asarray(direction, dtype=np.float64) if unit is None else unit

    report = EditReport()
    deltas = []
    lo, hi = sel.layers
    heads = sel.head_list(cache.n_heads)
    positions = [
        p for p, r in enumerate(cache.roles)
        if (sel.role is None or r == sel.role) and (sel.positions is None or p in sel.positions)
    ]
    report.positions = positions
    targets = ["keys", "values"] if sel.target == "both" else [sel.target]
    for layer in range(lo, hi + 1):
        for target in targets:
            if unit.shape[0] == cache.d_head:
                dirs = [numcore.normalize(unit)] * cache.n_heads
            else:
                if model is None:
                    raise numcore.DimensionError("residual-space direction needs the model to map into heads")
                if unit.shape[0] != model.spec.d_model:
                    raise numcore.DimensionError(f"direction dim {unit.shape[0]} is neither d_head nor d_model")
                dirs = head_directions(model, unit, layer, target)
            store = cache._k[layer] if target == "keys" else cache._v[layer]
            for h in heads:
                d = dirs[h]
                if d is None:
                    report.skipped_heads.append((layer, h, target))
                    continue
                for p in positions:
                    x = store[h, p]
                    proj = numcore.dot(x, d)
                    if scale is not None:
                        new = proj * scale
                    elif set_to is not None:
                        new = float(set_to)
                    else:
                        new = proj + add
                    if new != proj:
                        store[h, p] = x + (new - proj) * d
                    deltas.append(abs(new - proj))
    report.count = len(deltas)
    report.mean_abs_delta = float(np.mean(deltas)) if deltas else 0.0
    return report
