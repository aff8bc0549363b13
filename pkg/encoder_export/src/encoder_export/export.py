"""Batch export of text corpora into CGME embedding files.

Pair corpora arrive as JSONL, one {"message": ..., "reply": ..., "lang": ...}
object per line; response sets as {"reply": ..., "count": ..., "lang": ...}
with count defaulting to 1. Each text is prefixed with its language token
(the upper-cased language code) and truncated to the job's token budget,
prefix included, before encoding. The stored record text is the kept
original tokens, whitespace-normalized, without the prefix: the prefix is
an encoding artifact, and downstream overlap metrics read the reply texts.

Malformed records (bad JSON, missing or empty fields, over-long text) and
records in undeclared languages are skipped with a logged count, never
fatal. A missing or unloadable encoder is fatal.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cgme import _MAX_TEXT_BYTES, CgmeRecord, write_cgme
from .encoders import TextEncoder, load_encoder

log = logging.getLogger("encoder_export")


@dataclass(frozen=True)
class ExportJob:
    input_path: str
    output_path: str
    encoder: str = "hash:64"
    languages: tuple = ()  # declared table; empty = derive sorted from input
    batch_size: int = 32
    max_message_tokens: int = 64
    max_reply_tokens: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        # budget must fit the language token plus at least one text token
        for field in ("max_message_tokens", "max_reply_tokens"):
            if getattr(self, field) < 2:
                raise ValueError(f"{field} must be at least 2, got {getattr(self, field)}")
        if len(set(self.languages)) != len(self.languages):
            raise ValueError(f"duplicate languages in {self.languages}")


@dataclass(frozen=True)
class ExportReport:
    written: int
    skipped_malformed: int
    skipped_unknown_lang: int
    languages: tuple
    dim: int


def _language_token(lang: str) -> str:
    return lang.upper()


def _prepare(text: str, lang_token: str, max_tokens: int) -> tuple:
    """Prefix the language token and truncate to the token budget.

    Returns (model_input, stored_text): the string handed to the encoder and
    the kept original tokens recorded in the output file.
    """
    kept = text.split()[:max_tokens - 1]
    return " ".join([lang_token, *kept]), " ".join(kept)


def _valid_text(value) -> bool:
    return (isinstance(value, str) and value.split() != []
            and len(value.encode("utf-8")) <= _MAX_TEXT_BYTES)


def _valid_lang(value) -> bool:
    return isinstance(value, str) and value != "" and value.split() == [value]


def _read_jsonl(path):
    """Yield parsed objects, or None per line that fails to parse; blank
    lines are ignored."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                yield None


def _encode_chunked(encoder: TextEncoder, texts: Sequence[str], max_tokens: int,
                    batch_size: int) -> np.ndarray:
    parts = [encoder.encode(texts[i:i + batch_size], max_tokens)
             for i in range(0, len(texts), batch_size)]
    if not parts:
        return np.zeros((0, encoder.dim), dtype=np.float32)
    return np.vstack(parts)


def export(job: ExportJob) -> ExportReport:
    """Encode a pair corpus to `job.output_path`; one record per valid pair."""
    encoder = load_encoder(job.encoder)
    rows = []
    malformed = 0
    for obj in _read_jsonl(job.input_path):
        if (isinstance(obj, dict) and _valid_text(obj.get("message"))
                and _valid_text(obj.get("reply")) and _valid_lang(obj.get("lang"))):
            rows.append((obj["message"], obj["reply"], obj["lang"]))
        else:
            malformed += 1

    if job.languages:
        languages = tuple(job.languages)
        known = set(languages)
        unknown = sum(1 for _, _, lang in rows if lang not in known)
        rows = [r for r in rows if r[2] in known]
    else:
        languages = tuple(sorted({lang for _, _, lang in rows}))
        unknown = 0
    index_of = {lang: i for i, lang in enumerate(languages)}

    msg_inputs, msg_stored, rep_inputs, rep_stored = [], [], [], []
    for message, reply, lang in rows:
        token = _language_token(lang)
        m_in, m_st = _prepare(message, token, job.max_message_tokens)
        r_in, r_st = _prepare(reply, token, job.max_reply_tokens)
        msg_inputs.append(m_in)
        msg_stored.append(m_st)
        rep_inputs.append(r_in)
        rep_stored.append(r_st)

    msg_vecs = _encode_chunked(encoder, msg_inputs, job.max_message_tokens, job.batch_size)
    rep_vecs = _encode_chunked(encoder, rep_inputs, job.max_reply_tokens, job.batch_size)

    records = [CgmeRecord(lang_index=index_of[lang], message_text=m_st,
                          reply_text=r_st, message_vec=msg_vecs[i],
                          reply_vec=rep_vecs[i])
               for i, ((_, _, lang), m_st, r_st)
               in enumerate(zip(rows, msg_stored, rep_stored))]
    write_cgme(job.output_path, encoder.dim, languages, records)

    if malformed or unknown:
        log.warning("skipped %d malformed and %d unknown-language records",
                    malformed, unknown)
    log.info("wrote %d records (dim %d, languages %s) to %s",
             len(records), encoder.dim, list(languages), job.output_path)
    return ExportReport(written=len(records), skipped_malformed=malformed,
                        skipped_unknown_lang=unknown, languages=languages,
                        dim=encoder.dim)


def export_response_set(input_path, lang: str, output_path, *,
                        encoder: str = "hash:64", batch_size: int = 32,
                        max_reply_tokens: int = 32,
                        threshold: int = 20) -> ExportReport:
    """Encode a reply frequency table to a reply-only CGME file.

    Replies are deduplicated by exact text before encoding, counts summed
    across duplicates; a reply is kept only when its total count is strictly
    greater than `threshold` (the engine's response-set rule). Each kept
    reply is encoded once and written count-many times, since the format
    carries frequency by record multiplicity.
    """
    if not _valid_lang(lang):
        raise ValueError(f"bad language code {lang!r}")
    if threshold < 0:
        raise ValueError(f"threshold must be non-negative, got {threshold}")
    enc = load_encoder(encoder)

    counts: dict = {}
    malformed = 0
    unknown = 0
    for obj in _read_jsonl(input_path):
        if not (isinstance(obj, dict) and _valid_text(obj.get("reply"))):
            malformed += 1
            continue
        count = obj.get("count", 1)
        if isinstance(count, bool) or not isinstance(count, int) or count < 1:
            malformed += 1
            continue
        rec_lang = obj.get("lang", lang)
        if not _valid_lang(rec_lang):
            malformed += 1
            continue
        if rec_lang != lang:
            unknown += 1
            continue
        counts[obj["reply"]] = counts.get(obj["reply"], 0) + count

    kept = [(text, total) for text, total in counts.items() if total > threshold]
    dropped = len(counts) - len(kept)

    token = _language_token(lang)
    prepared = [_prepare(text, token, max_reply_tokens) for text, _ in kept]
    vecs = _encode_chunked(enc, [model for model, _ in prepared],
                           max_reply_tokens, batch_size)
    zero = np.zeros(enc.dim, dtype=np.float32)
    records = []
    for (_, total), (_, stored), vec in zip(kept, prepared, vecs):
        records.extend(CgmeRecord(lang_index=0, message_text="", reply_text=stored,
                                  message_vec=zero, reply_vec=vec)
                       for _ in range(total))
    write_cgme(output_path, enc.dim, [lang], records)

    if malformed or unknown:
        log.warning("skipped %d malformed and %d wrong-language records",
                    malformed, unknown)
    log.info("wrote %d unique replies (%d records, %d below threshold %d) to %s",
             len(kept), len(records), dropped, threshold, output_path)
    return ExportReport(written=len(records), skipped_malformed=malformed,
                        skipped_unknown_lang=unknown, languages=(lang,),
                        dim=enc.dim)
