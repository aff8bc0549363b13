"""Writer for CGME corpus files.

The layout (little-endian) is the engine's interchange format, reproduced
here so this package stays importable without the engine installed:

    magic b"CGME" | u32 version=1 | u32 dim | u32 n_languages
    n_languages x (u32 byte_len, utf-8 name)
    u64 n_records
    per record: u32 lang_index
                u32 byte_len, utf-8 message text
                u32 byte_len, utf-8 reply text
                dim x f32 message embedding
                dim x f32 reply embedding

Embeddings are unit-norm float32. Reply-only records (response-set files)
carry an empty message text together with an all-zero message embedding;
reply frequency is carried by multiplicity, one record per occurrence.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAGIC = b"CGME"
VERSION = 1

# float32 quantization of a unit vector moves the norm by ~1e-6; allow slack
NORM_TOL = 1e-5

_MAX_TEXT_BYTES = 1 << 20


@dataclass(frozen=True, eq=False)
class CgmeRecord:
    lang_index: int
    message_text: str
    reply_text: str
    message_vec: np.ndarray  # [dim] float32 unit norm; all-zero for reply-only
    reply_vec: np.ndarray  # [dim] float32 unit norm

    @property
    def reply_only(self) -> bool:
        return self.message_text == "" and not np.asarray(self.message_vec).any()


def _packed_str(text: str, what: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > _MAX_TEXT_BYTES:
        raise ValueError(f"{what} exceeds {_MAX_TEXT_BYTES} bytes")
    return struct.pack("<I", len(raw)) + raw


def _checked_vec(vec, dim: int, what: str, allow_zero: bool) -> np.ndarray:
    arr = np.asarray(vec, dtype="<f4")
    if arr.shape != (dim,):
        raise ValueError(f"{what} has shape {arr.shape}, expected ({dim},)")
    if not np.isfinite(arr).all():
        raise ValueError(f"{what} contains non-finite values")
    norm = float(np.linalg.norm(arr.astype(np.float64)))
    if allow_zero and norm == 0.0:
        return arr
    if abs(norm - 1.0) > NORM_TOL:
        raise ValueError(f"{what} norm {norm:.8f} is not 1 within {NORM_TOL}")
    return arr


def write_cgme(path, dim: int, languages: Sequence[str],
               records: Sequence[CgmeRecord]) -> None:
    """Write records to `path`; buffers everything, single-pass output.

    Validates what the engine's loader will check: language table sanity,
    index bounds, text byte lengths, unit (or, for reply-only records, zero)
    norms. An empty message text must pair with an all-zero message vector
    and vice versa.
    """
    if dim < 1:
        raise ValueError(f"dim must be positive, got {dim}")
    languages = list(languages)
    if len(set(languages)) != len(languages):
        raise ValueError(f"duplicate language names in {languages}")
    if any(not isinstance(l, str) or not l for l in languages):
        raise ValueError(f"language names must be non-empty strings: {languages}")
    if not languages and records:
        raise ValueError("records present but the language table is empty")

    blob = [MAGIC, struct.pack("<II", VERSION, dim), struct.pack("<I", len(languages))]
    for name in languages:
        blob.append(_packed_str(name, f"language name {name!r}"))
    blob.append(struct.pack("<Q", len(records)))
    for i, rec in enumerate(records):
        if not 0 <= rec.lang_index < len(languages):
            raise ValueError(f"record {i}: lang_index {rec.lang_index} out of range")
        if (rec.message_text == "") != rec.reply_only:
            raise ValueError(
                f"record {i}: empty message text requires an all-zero message"
                " embedding and vice versa")
        msg_vec = _checked_vec(rec.message_vec, dim, f"record {i} message embedding",
                               allow_zero=rec.reply_only)
        rep_vec = _checked_vec(rec.reply_vec, dim, f"record {i} reply embedding",
                               allow_zero=False)
        blob.append(struct.pack("<I", rec.lang_index))
        blob.append(_packed_str(rec.message_text, f"record {i} message text"))
        blob.append(_packed_str(rec.reply_text, f"record {i} reply text"))
        blob.append(msg_vec.tobytes())
        blob.append(rep_vec.tobytes())

    with open(path, "wb") as fh:
        fh.write(b"".join(blob))
