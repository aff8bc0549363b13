"""Hash encoder behavior and encoder-name resolution."""
import numpy as np
import pytest

from encoder_export.encoders import HashEncoder, load_encoder
from encoder_export.errors import EncoderLoadError


def test_load_encoder_hash():
    enc = load_encoder("hash:48")
    assert isinstance(enc, HashEncoder)
    assert enc.dim == 48
    assert enc.name == "hash:48"


@pytest.mark.parametrize("name", ["hash", "hash:", "hash:0", "hash:-3",
                                  "hash:abc", "hash:99999", "hf:", "hf",
                                  "word2vec:64", ""])
def test_load_encoder_rejects_bad_names(name):
    with pytest.raises(EncoderLoadError):
        load_encoder(name)


def test_hash_encoder_deterministic():
    a = HashEncoder(32).encode(["the quick brown fox", "oi"], 64)
    b = HashEncoder(32).encode(["the quick brown fox", "oi"], 64)
    assert a.dtype == np.float32 and a.shape == (2, 32)
    assert np.array_equal(a, b)


def test_hash_encoder_rows_unit_norm():
    vecs = HashEncoder(16).encode(["a", "a b", "a b c d e f g"], 64)
    assert np.allclose(np.linalg.norm(vecs, axis=1), 1.0, atol=1e-6)


def test_hash_encoder_order_sensitive():
    enc = HashEncoder(32)
    ab, ba = enc.encode(["alpha beta", "beta alpha"], 64)
    assert not np.array_equal(ab, ba)


def test_hash_encoder_truncates_to_budget():
    enc = HashEncoder(32)
    tokens = [f"tok{i}" for i in range(100)]
    full = enc.encode([" ".join(tokens)], 5)
    head = enc.encode([" ".join(tokens[:5])], 5)
    longer = enc.encode([" ".join(tokens[:6])], 6)
    assert np.array_equal(full, head)
    assert not np.array_equal(full, longer)


def test_hash_encoder_rejects_empty_text():
    with pytest.raises(ValueError):
        HashEncoder(8).encode(["ok", "   "], 64)
