"""Precomputed-embedding corpora: synthetic generation and binary file IO.

A corpus is a list of (language, message text, reply text, message embedding,
reply embedding) records with unit-norm float32 embeddings. The on-disk
format ("CGME") is little-endian:

    magic b"CGME" | u32 version=1 | u32 dim | u32 n_languages
    n_languages x (u32 byte_len, utf-8 name)
    u64 n_records
    per record: u32 lang_index
                u32 byte_len, utf-8 message text
                u32 byte_len, utf-8 reply text
                dim x f32 message embedding
                dim x f32 reply embedding

Reply-only records (used for response-set files) carry an empty message text
and an all-zero message embedding; frequency is carried by multiplicity, one
record per occurrence.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataFormatError

MAGIC = b"CGME"
VERSION = 1

# float32 quantization of a unit vector moves the norm by ~1e-6; allow slack
NORM_TOL = 1e-5


@dataclass(frozen=True, eq=False)
class EncodedPair:
    lang: str
    message_text: str
    reply_text: str
    theta_m: np.ndarray  # [d] float32, unit norm (zero for reply-only records)
    theta_r: np.ndarray  # [d] float32, unit norm

    @property
    def reply_only(self) -> bool:
        return self.message_text == "" and not self.theta_m.any()


@dataclass
class Corpus:
    dim: int
    languages: list
    pairs: list

    def __len__(self):
        return len(self.pairs)

    def by_language(self) -> dict:
        out = {lang: [] for lang in self.languages}
        for p in self.pairs:
            out[p.lang].append(p)
        return out

    def language_counts(self) -> dict:
        counts = {lang: 0 for lang in self.languages}
        for p in self.pairs:
            counts[p.lang] += 1
        return counts

    def partition(self, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict:
        """Stratified train/val/test split, shuffled per language."""
        if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
            raise ConfigError(f"fractions must be 3 values summing to 1, got {fractions}")
        rng = np.random.default_rng(seed)
        buckets = {"train": [], "val": [], "test": []}
        for lang, pairs in self.by_language().items():
            idx = rng.permutation(len(pairs))
            n_train = int(round(fractions[0] * len(pairs)))
            n_val = int(round(fractions[1] * len(pairs)))
            for j in idx[:n_train]:
                buckets["train"].append(pairs[j])
            for j in idx[n_train:n_train + n_val]:
                buckets["val"].append(pairs[j])
            for j in idx[n_train + n_val:]:
                buckets["test"].append(pairs[j])
        return {name: Corpus(self.dim, list(self.languages), ps) for name, ps in buckets.items()}


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Knobs for the synthetic multilingual corpus.

    Languages occupy orthogonal subspace offsets; each language holds
    `intents_per_language` intent clusters, each with a handful of reply
    variants. The message-variant -> reply-variant association is random
    jitter, so raw embeddings identify the intent but not the variant: models
    must learn the association from pairs.

    variant_share blends a cross-language component into the variant offsets:
    at 0 every language's association is independent, at 1 the offsets are
    identical across languages, so the association rule learned on a
    high-resource language carries over to low-resource ones.

    variant_skew tilts how often each variant of an intent occurs: 0 keeps the
    round-robin uniform, larger values concentrate pairs on the first variants
    (weights proportional to (1 - skew)^v), giving the response sets a
    non-flat frequency profile for the LM bias to exploit.

    generic_variant_tokens makes the first (most frequent, under skew) variant
    of every intent end in that many language-level filler tokens, the way
    high-frequency real replies lean on stock phrases. Texts stay distinct
    across intents, so exact-text dedup still separates them; only the n-gram
    metrics see the overlap.
    """

    num_languages: int
    pairs_per_language: tuple
    embedding_dim: int
    intents_per_language: int = 8
    cluster_spread: float = 0.25
    vocab_size: int = 60
    seed: int = 0
    variants_per_intent: int = 3
    intent_scale: float = 0.8
    variant_scale: float = 0.35
    variant_share: float = 0.0
    variant_skew: float = 0.0
    generic_variant_tokens: int = 0

    def __post_init__(self):
        g, m, v = self.num_languages, self.intents_per_language, self.variants_per_intent
        if g < 1 or m < 1 or v < 1:
            raise ConfigError("num_languages, intents_per_language, variants_per_intent must be >= 1")
        if len(self.pairs_per_language) != g:
            raise ConfigError(
                f"pairs_per_language has {len(self.pairs_per_language)} entries for {g} languages")
        if g * (m + 1) > self.embedding_dim:
            raise ConfigError(
                f"embedding_dim {self.embedding_dim} too small to separate "
                f"{g}x{m} clusters (needs >= {g * (m + 1)})")
        if m * (3 + v) > self.vocab_size:
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small for {m} intents x {v} variants "
                f"(needs >= {m * (3 + v)})")
        if self.cluster_spread <= 0:
            raise ConfigError("cluster_spread must be positive")
        if not 0.0 <= self.variant_share <= 1.0:
            raise ConfigError(f"variant_share must be in [0, 1], got {self.variant_share}")
        if not 0.0 <= self.variant_skew < 1.0:
            raise ConfigError(f"variant_skew must be in [0, 1), got {self.variant_skew}")
        if not 0 <= self.generic_variant_tokens <= 3:
            raise ConfigError(
                f"generic_variant_tokens must be in [0, 3], got {self.generic_variant_tokens}")


def _reply_text(lang_idx: int, intent: int, variant: int, variants: int,
                generic: int = 0) -> str:
    stride = 3 + variants
    tokens = [f"l{lang_idx}w{intent * stride + t}" for t in range(3)]
    tokens.append(f"l{lang_idx}w{intent * stride + 3 + variant}")
    if variant == 0 and generic > 0:
        # at most 3 filler tokens, so at least one intent token survives and
        # texts never collide across intents
        tokens[4 - generic:] = [f"l{lang_idx}g{t}" for t in range(generic)]
    return " ".join(tokens)


def _message_text(lang_idx: int, intent: int, variant: int, n: int) -> str:
    return f"l{lang_idx}q{intent} v{variant} n{n}"


def generate_synthetic(spec: SyntheticCorpusSpec) -> Corpus:
    """Deterministic synthetic corpus for a given spec (seed included)."""
    rng = np.random.default_rng(spec.seed)
    g, m, v, d = (spec.num_languages, spec.intents_per_language,
                  spec.variants_per_intent, spec.embedding_dim)
    languages = [f"lang{i}" for i in range(g)]

    # orthonormal directions: one per language plus m per language
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lang_dirs = basis[:g]
    intent_dirs = basis[g:g + g * m].reshape(g, m, d)

    # variant centers; message and reply jitters are independent, so the
    # pairing is learnable only from supervision
    jm = rng.standard_normal((g, m, v, d)) * spec.variant_scale
    jr = rng.standard_normal((g, m, v, d)) * spec.variant_scale
    if spec.variant_share > 0:
        # mix in a language-independent component at fixed total variance
        w_shared = np.sqrt(spec.variant_share)
        w_local = np.sqrt(1.0 - spec.variant_share)
        jm = w_shared * rng.standard_normal((1, m, v, d)) * spec.variant_scale + w_local * jm
        jr = w_shared * rng.standard_normal((1, m, v, d)) * spec.variant_scale + w_local * jr
    anchors = lang_dirs[:, None, None, :] + spec.intent_scale * intent_dirs[:, :, None, :]
    msg_centers = anchors + jm
    rep_centers = anchors + jr

    pairs = []
    for li in range(g):
        count = int(spec.pairs_per_language[li])
        if spec.variant_skew > 0:
            # greedy largest-deficit apportionment tracks the skew weights
            # exactly at every prefix, deterministically
            w = (1.0 - spec.variant_skew) ** np.arange(v)
            w = w / w.sum()
            alloc = np.zeros((m, v))
            seen = np.zeros(m)
            cells = []
            for n in range(count):
                intent = n % m
                seen[intent] += 1
                variant = int(np.argmax(w * seen[intent] - alloc[intent]))
                alloc[intent, variant] += 1
                cells.append((intent, variant))
        else:
            # round-robin over (intent, variant) guarantees coverage
            cells = [(n % m, (n // m) % v) for n in range(count)]
        rng.shuffle(cells)
        noise = rng.standard_normal((count, 2, d)) * spec.cluster_spread
        for n, (intent, variant) in enumerate(cells):
            tm = msg_centers[li, intent, variant] + noise[n, 0]
            tr = rep_centers[li, intent, variant] + noise[n, 1]
            tm = (tm / np.linalg.norm(tm)).astype(np.float32)
            tr = (tr / np.linalg.norm(tr)).astype(np.float32)
            pairs.append(EncodedPair(
                lang=languages[li],
                message_text=_message_text(li, intent, variant, n),
                reply_text=_reply_text(li, intent, variant, v,
                                       spec.generic_variant_tokens),
                theta_m=tm,
                theta_r=tr,
            ))
    return Corpus(dim=d, languages=languages, pairs=pairs)


# ---- binary IO ----

def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_cgme(corpus: Corpus, path) -> None:
    lang_index = {lang: i for i, lang in enumerate(corpus.languages)}
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, corpus.dim)
    out += struct.pack("<I", len(corpus.languages))
    for lang in corpus.languages:
        out += _pack_str(lang)
    out += struct.pack("<Q", len(corpus.pairs))
    for p in corpus.pairs:
        out += struct.pack("<I", lang_index[p.lang])
        out += _pack_str(p.message_text)
        out += _pack_str(p.reply_text)
        out += np.asarray(p.theta_m, dtype="<f4").tobytes()
        out += np.asarray(p.theta_r, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path
        self.record = None

    def fail(self, why):
        raise DataFormatError(f"{self.path}: {why}", offset=self.off, record_index=self.record)

    def pull(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            self.fail(f"truncated, wanted {n} bytes")
        chunk = self.blob[self.off:self.off + n]
        self.off += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.pull(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.pull(8))[0]

    def text(self) -> str:
        n = self.u32()
        if n > 1 << 20:
            self.fail(f"implausible string length {n}")
        try:
            return self.pull(n).decode("utf-8")
        except UnicodeDecodeError:
            self.fail("invalid utf-8")

    def f32vec(self, dim: int) -> np.ndarray:
        return np.frombuffer(self.pull(4 * dim), dtype="<f4").astype(np.float32)


def load_cgme(path) -> Corpus:
    """Read a CGME file, validating structure and embedding norms."""
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, path)
    if r.pull(4) != MAGIC:
        r.off = 0
        r.fail("bad magic, not a CGME file")
    version = r.u32()
    if version != VERSION:
        r.fail(f"unsupported version {version}")
    dim = r.u32()
    if dim == 0 or dim > 1 << 16:
        r.fail(f"implausible dim {dim}")
    n_langs = r.u32()
    if n_langs == 0 or n_langs > 1 << 16:
        r.fail(f"implausible language count {n_langs}")
    languages = [r.text() for _ in range(n_langs)]
    n_records = r.u64()
    pairs = []
    for i in range(n_records):
        r.record = i
        li = r.u32()
        if li >= n_langs:
            r.fail(f"language index {li} out of range")
        msg = r.text()
        reply = r.text()
        tm = r.f32vec(dim)
        tr = r.f32vec(dim)
        reply_only = msg == "" and not tm.any()
        if not reply_only and abs(float(np.linalg.norm(tm)) - 1.0) > NORM_TOL:
            r.fail(f"message embedding norm {float(np.linalg.norm(tm)):.6f} not unit")
        if abs(float(np.linalg.norm(tr)) - 1.0) > NORM_TOL:
            r.fail(f"reply embedding norm {float(np.linalg.norm(tr)):.6f} not unit")
        pairs.append(EncodedPair(languages[li], msg, reply, tm, tr))
    if r.off != len(blob):
        r.record = None
        r.fail(f"{len(blob) - r.off} trailing bytes after last record")
    return Corpus(dim=dim, languages=languages, pairs=pairs)


def save_response_records(corpus: Corpus, path) -> None:
    """Write replies only (empty messages), one record per occurrence."""
    zero = np.zeros(corpus.dim, dtype=np.float32)
    stripped = [replace(p, message_text="", theta_m=zero) for p in corpus.pairs]
    save_cgme(Corpus(corpus.dim, list(corpus.languages), stripped), path)
