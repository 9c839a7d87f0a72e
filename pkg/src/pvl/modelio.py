"""Model files: the ``PVL1`` binary format and a JSON mirror.

Binary layout (little-endian)::

    b"PVL1"  u16 version
    u32 x 7  d_model n_layers n_heads d_head d_mlp vocab_size n_experts
    u32 len + utf-8    model_id
    u32 count, then (u32 len + utf-8) per symbol   vocabulary
    u32 len + utf-8    metadata JSON
    f64 tensors in ModelWeights.tensors() order, row-major
    u32 CRC32 of everything above
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import Model, ModelError, ModelSpec, weight_shapes, weights_from_tensors
from .transcript import Vocabulary

MODEL_MAGIC = b"PVL1"
MODEL_VERSION = 1
JSON_FORMAT = "pvl-json/1"
_SPEC_FIELDS = ("d_model", "n_layers", "n_heads", "d_head", "d_mlp", "vocab_size", "n_experts")


class ModelFormatError(ModelError):
    pass


def _meta_of(model: Model) -> dict:
    return dict(getattr(model, "meta", None) or {})


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def model_to_bytes(model: Model) -> bytes:
    s = model.spec
    parts = [MODEL_MAGIC, struct.pack("<H", MODEL_VERSION), struct.pack("<7I", *(getattr(s, f) for f in _SPEC_FIELDS))]
    parts.append(_str(s.model_id))
    parts.append(struct.pack("<I", len(model.vocab)))
    parts.extend(_str(sym) for sym in model.vocab.symbols)
    parts.append(_str(json.dumps(_meta_of(model), sort_keys=True)))
    for _, arr in model.weights.tensors():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ModelFormatError("truncated model file")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise ModelFormatError("invalid utf-8 in model file") from None


def model_from_bytes(data: bytes) -> Model:
    if data[:4] != MODEL_MAGIC:
        raise ModelFormatError("bad magic, not a PVL1 model file")
    if len(data) < 10:
        raise ModelFormatError("truncated model file")
    r = _Reader(data[:-4])
    r.take(4)
    (version,) = r.unpack("<H")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model file version {version}")
    if struct.unpack("<I", data[-4:])[0] != zlib.crc32(data[:-4]):
        raise ModelFormatError("checksum mismatch (corrupt or truncated model file)")
    dims = r.unpack("<7I")
    model_id = r.string()
    (n_sym,) = r.unpack("<I")
    symbols = [r.string() for _ in range(n_sym)]
    try:
        meta = json.loads(r.string())
        spec = ModelSpec(*dims, model_id=model_id)
    except (json.JSONDecodeError, ModelError) as exc:
        raise ModelFormatError(f"bad model header: {exc}") from None
    tensors = {}
    for name, shape in weight_shapes(spec).items():
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.off != len(r.buf):
        raise ModelFormatError("trailing bytes after model tensors")
    return _assemble(spec, tensors, Vocabulary(symbols), meta)


def model_to_json(model: Model) -> str:
    s = model.spec
    doc = {
        "format": JSON_FORMAT,
        "spec": {f: getattr(s, f) for f in _SPEC_FIELDS} | {"model_id": s.model_id},
        "vocab": list(model.vocab.symbols),
        "meta": _meta_of(model),
        "tensors": {name: arr.tolist() for name, arr in model.weights.tensors()},
    }
    return json.dumps(doc)


def model_from_json(text: str) -> Model:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"malformed model JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != JSON_FORMAT:
        raise ModelFormatError(f"model JSON must declare format {JSON_FORMAT!r}")
    try:
        spec = ModelSpec(**doc["spec"])
        vocab = Vocabulary(doc["vocab"])
        tensors = {k: np.asarray(v, dtype=np.float64) for k, v in doc["tensors"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad model JSON: {exc}") from None
    return _assemble(spec, tensors, vocab, doc.get("meta") or {})


def _assemble(spec: ModelSpec, tensors: dict, vocab: Vocabulary, meta: dict) -> Model:
    try:
        weights = weights_from_tensors(spec, tensors)
        model = Model(spec, weights, vocab)
    except ModelError as exc:
        raise ModelFormatError(str(exc)) from None
    model.meta = meta
    if meta.get("kind") == "planted":
        _reattach_planted(model, meta)
    return model


def _reattach_planted(model: Model, meta: dict) -> None:
    """Recover ground truth by rebuilding from the recorded recipe; only if bit-equal."""
    from .planted import planted_from_meta

    try:
        ref = planted_from_meta(meta)
    except (ModelError, KeyError, ValueError):
        return
    same = ref.spec == model.spec and all(
        a.tobytes() == b.tobytes() for (_, a), (_, b) in zip(ref.weights.tensors(), model.weights.tensors())
    )
    if same:
        model.planted = ref.planted


def save_model(model: Model, path) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(model_to_json(model))
    else:
        path.write_bytes(model_to_bytes(model))


def load_model(path) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    data = path.read_bytes()
    if data[:4] == MODEL_MAGIC:
        return model_from_bytes(data)
    if data.lstrip()[:1] == b"{":
        return model_from_json(data.decode("utf-8"))
    raise ModelFormatError(f"{path}: neither a PVL1 binary nor a model JSON file")
