"""Test-set evaluation: gold ranking quality plus suggestion diversity.

Per language, every test message is ranked against that language's response
set and contributes:

  mrr        reciprocal rank of the gold reply (0 when absent from the pool)
  p_at_1     did the gold reply land on top
  relevance  mean 1/2/3-gram ROUGE-F1 of the top suggestion vs the gold reply
  diversity  mean pairwise ROUGE-F1 among the top-3 suggestions (lower means
             the suggestions differ more; the field stores the measured
             quantity, self-similarity)

Language groups aggregate the same metrics with message-count weights. The
worker count comes from the CGM_THREADS environment variable; results are
bit-identical for any thread count because each message's rng is seeded from
(seed, language, message index) alone.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import models
from .corpus import Corpus
from .errors import ConfigError
from .prediction import rank_responses

ROUGE_ORDERS = (1, 2, 3)
METRICS = ("mrr", "p_at_1", "relevance", "diversity")


def _ngrams(tokens, n: int) -> dict:
    out = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i:i + n])
        out[g] = out.get(g, 0) + 1
    return out


def rouge_f1(candidate: str, reference: str, n: int) -> float:
    """Clipped n-gram F1; 0 when either side has no n-grams."""
    if n < 1:
        raise ConfigError(f"n-gram order must be >= 1, got {n}")
    c = _ngrams(candidate.split(), n)
    r = _ngrams(reference.split(), n)
    if not c or not r:
        return 0.0
    overlap = sum(min(cnt, r.get(g, 0)) for g, cnt in c.items())
    precision = overlap / sum(c.values())
    recall = overlap / sum(r.values())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def rouge_mean(candidate: str, reference: str) -> float:
    return float(np.mean([rouge_f1(candidate, reference, n) for n in ROUGE_ORDERS]))


def self_rouge(texts) -> float:
    """Mean pairwise rouge_mean over exactly three suggestions."""
    if len(texts) != 3:
        raise ConfigError(f"self_rouge is defined over exactly 3 texts, got {len(texts)}")
    return float(np.mean([rouge_mean(a, b) for a, b in combinations(texts, 2)]))


@dataclass
class EvalReport:
    variant: str
    seed: int
    n_samples: int
    preselect_k: int
    languages: dict  # lang -> {"messages": int, metric: float...}
    groups: dict     # name -> {"messages": int, "languages": [...], metric: float...}
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"variant": self.variant, "seed": self.seed,
                "n_samples": self.n_samples, "preselect_k": self.preselect_k,
                "languages": self.languages, "groups": self.groups,
                "extra": self.extra}

    @classmethod
    def from_json(cls, blob: dict) -> "EvalReport":
        return cls(variant=blob["variant"], seed=blob["seed"],
                   n_samples=blob["n_samples"], preselect_k=blob["preselect_k"],
                   languages=blob["languages"], groups=blob["groups"],
                   extra=blob.get("extra", {}))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, sort_keys=True, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as f:
            return cls.from_json(json.load(f))


def thread_count() -> int:
    raw = os.environ.get("CGM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CGM_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"CGM_THREADS must be >= 1, got {n}")
    return n


def _score_message(state, pair, rs, rng, n_samples, preselect_k):
    k = preselect_k if state.config.is_vae else None
    result = rank_responses(state, pair.theta_m, rs, rng,
                            n_samples=n_samples, preselect_k=k)
    if len(result.top3) < 3:
        raise ConfigError("diversity needs at least 3 ranked candidates; "
                          "raise preselect_k or the response-set size")
    rr, hit = 0.0, 0.0
    for pos, (text, _) in enumerate(result.ranked):
        if text == pair.reply_text:
            rr = 1.0 / (pos + 1)
            hit = 1.0 if pos == 0 else 0.0
            break
    top_texts = [t for t, _ in result.top3]
    return {"mrr": rr, "p_at_1": hit,
            "relevance": rouge_mean(top_texts[0], pair.reply_text),
            "diversity": self_rouge(top_texts)}


def _weighted(rows_by_lang: dict, langs) -> dict:
    total = sum(rows_by_lang[l]["messages"] for l in langs)
    out = {"messages": total, "languages": sorted(langs)}
    for m in METRICS:
        out[m] = float(sum(rows_by_lang[l][m] * rows_by_lang[l]["messages"]
                           for l in langs) / total)
    return out


def evaluate(state: models.ModelState, corpus: Corpus, response_sets: dict,
             seed: int = 0, n_samples: int | None = None,
             preselect_k: int | None = None, bottom_n: int = 2,
             max_messages_per_language: int = 0) -> EvalReport:
    """Score every message of the corpus against its language's response set."""
    cfg = state.config
    n_samples = cfg.num_prediction_samples if n_samples is None else n_samples
    preselect_k = cfg.preselect_k if preselect_k is None else preselect_k
    by_lang = corpus.by_language()
    workers = thread_count()

    lang_rows = {}
    for li, lang in enumerate(corpus.languages):
        pairs = by_lang[lang]
        if max_messages_per_language:
            pairs = pairs[:max_messages_per_language]
        if not pairs:
            raise ConfigError(f"no evaluation pairs for language {lang!r}")
        if lang not in response_sets:
            raise ConfigError(f"no response set for language {lang!r}")
        rs = response_sets[lang]

        def score(mi_pair):
            mi, pair = mi_pair
            rng = np.random.default_rng(np.random.SeedSequence((seed, li, mi)))
            return _score_message(state, pair, rs, rng, n_samples, preselect_k)

        tasks = list(enumerate(pairs))
        if workers == 1:
            rows = [score(t) for t in tasks]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(score, tasks))
        agg = {"messages": len(rows)}
        for m in METRICS:
            agg[m] = float(np.mean([r[m] for r in rows]))
        lang_rows[lang] = agg

    counts = {l: lang_rows[l]["messages"] for l in corpus.languages}
    dominant = max(corpus.languages, key=lambda l: counts[l])
    n_bottom = min(bottom_n, len(corpus.languages))
    bottom = sorted(corpus.languages, key=lambda l: (counts[l], corpus.languages.index(l)))[:n_bottom]
    groups = {"all": _weighted(lang_rows, corpus.languages)}
    non_dominant = [l for l in corpus.languages if l != dominant]
    if non_dominant:
        groups["without_top_language"] = _weighted(lang_rows, non_dominant)
    if bottom:
        groups[f"bottom_{n_bottom}"] = _weighted(lang_rows, bottom)

    return EvalReport(variant=cfg.variant, seed=seed, n_samples=n_samples,
                      preselect_k=preselect_k, languages=lang_rows, groups=groups,
                      extra={"dominant_language": dominant})


def _pct(before: float, after: float):
    if before == 0.0:
        return None
    return 100.0 * (after - before) / abs(before)


def diff_reports(before: EvalReport, after: EvalReport) -> dict:
    """Percent change per metric, per language and per group.

    None marks an undefined change (baseline metric is exactly 0).
    """
    out = {"variant": {"before": before.variant, "after": after.variant},
           "languages": {}, "groups": {}}
    for lang in sorted(set(before.languages) & set(after.languages)):
        out["languages"][lang] = {
            m: _pct(before.languages[lang][m], after.languages[lang][m])
            for m in METRICS}
    for g in sorted(set(before.groups) & set(after.groups)):
        out["groups"][g] = {
            m: _pct(before.groups[g][m], after.groups[g][m]) for m in METRICS}
    return out
