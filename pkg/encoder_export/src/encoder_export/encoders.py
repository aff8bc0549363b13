"""Text encoders producing unit-norm float32 sentence embeddings.

Encoder names are scheme-prefixed. "hash:<dim>" is a deterministic hashing
encoder with no model weights, for pipelines over synthetic text and for
tests. "hf:<model>" loads a pretrained transformer by hub name or local
path; its pooling rule is fixed: mean over final-layer token states
restricted to attention-masked positions, then L2 normalization.

`encode(texts, max_tokens)` truncates with the encoder's own tokenizer, so
the token budget binds at the level the model actually sees.
"""
from __future__ import annotations

import hashlib
from typing import Protocol, Sequence

import numpy as np

from .errors import EncoderLoadError

MAX_HASH_DIM = 4096


class TextEncoder(Protocol):
    name: str
    dim: int

    def encode(self, texts: Sequence[str], max_tokens: int) -> np.ndarray:
        """Embed each text as a unit-norm float32 row, [len(texts), dim]."""
        ...


class HashEncoder:
    """Deterministic whitespace-token hashing encoder.

    Every token hashes (SHA-256) to the seed of a fixed Gaussian direction;
    a text embeds as the position-weighted sum of its token directions
    (weight 1/sqrt(1+i)), L2-normalized. Stable across runs and platforms,
    and order-sensitive, so prefix tokens and truncation show up in the
    output exactly like they would for a learned encoder.
    """

    def __init__(self, dim: int):
        if not 1 <= dim <= MAX_HASH_DIM:
            raise ValueError(f"hash encoder dim must be in [1, {MAX_HASH_DIM}], got {dim}")
        self.dim = dim
        self.name = f"hash:{dim}"
        self._cache: dict = {}

    def _token_vec(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
            vec = np.random.default_rng(seed).standard_normal(self.dim)
            self._cache[token] = vec
        return vec

    def encode(self, texts: Sequence[str], max_tokens: int) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        for row, text in enumerate(texts):
            tokens = text.split()[:max_tokens]
            if not tokens:
                raise ValueError(f"cannot encode empty text (row {row})")
            acc = np.zeros(self.dim)
            for i, tok in enumerate(tokens):
                acc += self._token_vec(tok) / np.sqrt(1.0 + i)
            norm = np.linalg.norm(acc)
            if norm < 1e-12:
                raise ValueError(f"degenerate embedding for text {text!r}")
            out[row] = (acc / norm).astype(np.float32)
        return out


class TransformerEncoder:
    """Masked mean-pooling over a pretrained transformer's final layer.

    Frozen inference on CPU; truncation happens in the model's tokenizer via
    max_length. Any failure to load the tokenizer or weights is a hard error
    by contract, never a silent fallback.
    """

    def __init__(self, model_name: str):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise EncoderLoadError(f"transformers backend unavailable: {exc}") from exc
        try:
            self._tokenizer = AutoTokenizer.from_pretrained(model_name)
            self._model = AutoModel.from_pretrained(model_name)
        except Exception as exc:
            raise EncoderLoadError(f"cannot load encoder {model_name!r}: {exc}") from exc
        self._model.eval()
        self._torch = torch
        self.dim = int(self._model.config.hidden_size)
        self.name = f"hf:{model_name}"

    def encode(self, texts: Sequence[str], max_tokens: int) -> np.ndarray:
        torch = self._torch
        enc = self._tokenizer(list(texts), padding=True, truncation=True,
                              max_length=max_tokens, return_tensors="pt")
        with torch.no_grad():
            states = self._model(**enc).last_hidden_state
        mask = enc["attention_mask"].unsqueeze(-1).to(states.dtype)
        pooled = (states * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1)
        arr = pooled.cpu().numpy().astype(np.float32)
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        if norms.min() == 0.0:
            raise ValueError("encoder produced a zero embedding")
        return arr / norms


def load_encoder(name: str) -> TextEncoder:
    """Resolve an encoder name; raises EncoderLoadError if it cannot be built."""
    scheme, sep, rest = name.partition(":")
    if scheme == "hash" and sep:
        try:
            return HashEncoder(int(rest))
        except ValueError as exc:
            raise EncoderLoadError(f"bad hash encoder spec {name!r}: {exc}") from exc
    if scheme == "hf" and sep and rest:
        return TransformerEncoder(rest)
    raise EncoderLoadError(
        f"unknown encoder {name!r}; expected 'hash:<dim>' or 'hf:<model>'")
