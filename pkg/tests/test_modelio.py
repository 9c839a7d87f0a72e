import numpy as np
import pytest

from pvl.modelio import (
    ModelFormatError,
    load_model,
    model_from_bytes,
    model_from_json,
    model_to_bytes,
    model_to_json,
    save_model,
)
from pvl.transcript import Transcript


def _same_weights(a, b):
    return a.spec == b.spec and all(
        x.tobytes() == y.tobytes() for (_, x), (_, y) in zip(a.weights.tensors(), b.weights.tensors())
    )


@pytest.mark.parametrize("suffix", [".pvl", ".json"])
def test_round_trip_is_bit_exact(tiny, tmp_path, suffix):
    path = tmp_path / f"m{suffix}"
    save_model(tiny, path)
    back = load_model(path)
    assert _same_weights(tiny, back)
    assert back.vocab.vocab_id == tiny.vocab.vocab_id
    t = Transcript.build(tiny.vocab, [("user", "t1 t5 t9")])
    assert tiny.decode(t, 3).new_tokens == back.decode(t, 3).new_tokens


def test_bytes_and_json_agree(tiny):
    assert _same_weights(model_from_bytes(model_to_bytes(tiny)), model_from_json(model_to_json(tiny)))


def test_corrupt_and_truncated(tiny):
    data = model_to_bytes(tiny)
    with pytest.raises(ModelFormatError):
        model_from_bytes(data[: len(data) // 2])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    with pytest.raises(ModelFormatError):
        model_from_bytes(bytes(flipped))
    with pytest.raises(ModelFormatError):
        model_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ModelFormatError):
        model_from_json("{not json")
    with pytest.raises(ModelFormatError):
        model_from_json('{"format": "other"}')


def test_missing_and_unknown_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "absent.pvl")
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"\x00\x01garbage")
    with pytest.raises(ModelFormatError):
        load_model(junk)


def test_planted_ground_truth_reattached(planted, tmp_path):
    path = tmp_path / "planted.pvl"
    save_model(planted, path)
    back = load_model(path)
    assert back.planted is not None
    np.testing.assert_array_equal(back.planted.gateway.unit, planted.planted.gateway.unit)


def test_tampered_planted_loses_ground_truth(planted):
    w = planted.weights.copy()
    w.embed[0, 0] += 1.0
    m = planted.with_weights(w, planted.spec.model_id)
    m.meta = dict(planted.meta)
    back = model_from_bytes(model_to_bytes(m))
    assert back.planted is None
