"""Response-set construction and reply ranking.

Matching ranks a response set once by adapted dot product. The VAE variants
draw N latent samples from the message-conditional prior, decode each into a
synthetic reply embedding, and let every sample rank a pre-selected candidate
pool; a candidate's final score is the mean reciprocal rank it earned across
samples. Everything here runs tape-free.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models
from .corpus import Corpus
from .distributions import (GaussianParams, log_density, sample_categorical)
from .errors import ConfigError, ContractError, DivergenceError, UnsupportedOpError


@dataclass
class ResponseEntry:
    text: str
    embedding: np.ndarray  # [d] float32 unit norm
    frequency: int
    lm_bias: float  # log(frequency / total replies in language)


@dataclass
class ResponseSet:
    lang: str
    dim: int
    entries: list

    def __len__(self):
        return len(self.entries)

    def embedding_matrix(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries]).astype(np.float64)

    def bias_vector(self) -> np.ndarray:
        return np.array([e.lm_bias for e in self.entries])

    def index_of(self, text: str) -> int | None:
        for i, e in enumerate(self.entries):
            if e.text == text:
                return i
        return None


def build_response_set(corpus: Corpus, lang: str, threshold: int = 20) -> ResponseSet:
    """Dedup replies of one language by exact text; keep frequency > threshold.

    Entry embeddings are the renormalized mean over duplicates; lm_bias is
    log(count / total replies in the language), so included probabilities sum
    to at most 1.
    """
    if lang not in corpus.languages:
        raise ConfigError(f"language {lang!r} not in corpus ({corpus.languages})")
    groups = {}
    total = 0
    for p in corpus.pairs:
        if p.lang != lang:
            continue
        total += 1
        groups.setdefault(p.reply_text, []).append(p.theta_r)
    entries = []
    for text, vecs in groups.items():
        if len(vecs) <= threshold:
            continue
        mean = np.mean(np.asarray(vecs, dtype=np.float64), axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            continue
        entries.append(ResponseEntry(
            text=text,
            embedding=(mean / norm).astype(np.float32),
            frequency=len(vecs),
            lm_bias=float(np.log(len(vecs) / total)),
        ))
    if not entries:
        raise ConfigError(
            f"no reply of language {lang!r} clears frequency threshold {threshold}")
    entries.sort(key=lambda e: (-e.frequency, e.text))
    return ResponseSet(lang=lang, dim=corpus.dim, entries=entries)


def build_all_response_sets(corpus: Corpus, threshold: int = 20) -> dict:
    return {lang: build_response_set(corpus, lang, threshold) for lang in corpus.languages}


@dataclass
class PredictionResult:
    ranked: list  # [(text, score)] best first; vae score is the sample MRR
    top3: list
    diagnostics: dict


def _check_finite_params(state: models.ModelState):
    for name, p in state.params.items():
        if not np.all(np.isfinite(p.data)):
            raise DivergenceError(f"parameter {name} contains non-finite values; "
                                  f"model is unusable for prediction")


def _prep_message(state: models.ModelState, theta_m_raw) -> np.ndarray:
    x = np.asarray(theta_m_raw, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape != (1, state.config.d):
        raise ContractError(f"expected one message embedding of dim {state.config.d}, "
                            f"got shape {x.shape}")
    return models.adapt(state, x, "m").data


def _adapted_entries(state: models.ModelState, rs: ResponseSet) -> np.ndarray:
    if rs.dim != state.config.d:
        raise ConfigError(f"response set dim {rs.dim} vs model dim {state.config.d}")
    return models.adapt(state, rs.embedding_matrix(), "r").data


def matching_scores(state: models.ModelState, theta_m_raw, rs: ResponseSet) -> np.ndarray:
    """Adapted dot product plus weighted log-frequency bias, [n_entries]."""
    tm = _prep_message(state, theta_m_raw)
    r = _adapted_entries(state, rs)
    return r @ tm[0] + state.config.lm_bias_weight * rs.bias_vector()


def matching_predict(state: models.ModelState, theta_m_raw, rs: ResponseSet,
                     k: int | None = None) -> list:
    """Top-k (entry_index, score), ties broken by entry index."""
    _check_finite_params(state)
    scores = matching_scores(state, theta_m_raw, rs)
    k = len(rs) if k is None else min(k, len(rs))
    if k < 1:
        raise ConfigError(f"preselect k must be >= 1, got {k}")
    order = np.argsort(-scores, kind="stable")[:k]
    return [(int(i), float(scores[i])) for i in order]


def _sample_prior(state: models.ModelState, prior: models.PriorOutput, n: int,
                  rng: np.random.Generator) -> np.ndarray:
    h = state.config.h
    if isinstance(prior.dist, GaussianParams):
        mu, sigma = prior.dist.mu.data, prior.dist.sigma.data
        return mu + rng.standard_normal((n, h)) * sigma
    comps = sample_categorical(prior.dist.weights.data[0], n, rng)
    mus = np.stack([c.mu.data[0] for c in prior.dist.components])
    sigmas = np.stack([c.sigma.data[0] for c in prior.dist.components])
    return mus[comps] + rng.standard_normal((n, h)) * sigmas[comps]


def vae_predict(state: models.ModelState, theta_m_raw, rs: ResponseSet,
                rng: np.random.Generator, n_samples: int | None = None,
                preselect_k: int | None = None, trace: dict | None = None) -> PredictionResult:
    """Sample, decode, rank: candidates scored by mean reciprocal rank.

    Per sample i and candidate c the score is the in-pool reconstruction
    log-softmax, minus (when enabled) the latent log-density gap
    log q(z_i | theta_m, theta_r_c) - log p(z_i | theta_m). Ranks break ties
    by candidate pool order; the pool keeps matching-score order.
    """
    cfg = state.config
    if not cfg.is_vae:
        raise UnsupportedOpError("vae_predict needs a latent-variable variant")
    _check_finite_params(state)
    n = cfg.num_prediction_samples if n_samples is None else n_samples
    if n < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n}")
    tm = _prep_message(state, theta_m_raw)
    tm_t = ad.constant(tm)

    prior = models.prior_forward(state, tm_t)
    z = _sample_prior(state, prior, n, rng)
    gen = models.generate(state, tm_t, ad.constant(z)).data  # [n, d]

    pool = matching_predict(state, theta_m_raw, rs,
                            cfg.preselect_k if preselect_k is None else preselect_k)
    cand_idx = [i for i, _ in pool]
    r_adapted = _adapted_entries(state, rs)[cand_idx]  # [k, d]
    k = len(cand_idx)

    scores = gen @ r_adapted.T  # [n, k]
    m = scores.max(axis=1, keepdims=True)
    log_soft = scores - (m + np.log(np.exp(scores - m).sum(axis=1, keepdims=True)))

    lq = None
    lp = None
    if cfg.prediction_kl:
        z_t = ad.constant(z)
        lp = log_density(prior.dist, z_t).data  # [n]
        lq = np.empty((n, k))
        for c in range(k):
            post = models.posterior_forward(state, tm_t, ad.constant(r_adapted[c][None]))
            lq[:, c] = log_density(post.dist, z_t).data
        log_soft = log_soft - (lq - lp[:, None])

    # rank per sample, ties by candidate order
    order = np.argsort(-log_soft, axis=1, kind="stable")
    ranks = np.empty_like(order)
    cols = np.arange(k)
    for i in range(n):
        ranks[i, order[i]] = cols
    recip = 1.0 / (ranks + 1.0)
    mrr = recip.mean(axis=0)  # [k]

    final = np.argsort(-mrr, kind="stable")
    ranked = [(rs.entries[cand_idx[j]].text, float(mrr[j])) for j in final]
    diagnostics = {
        "n_samples": n,
        "candidates_scored": k,
        "pool_size": len(rs),
        "prediction_kl": bool(cfg.prediction_kl),
    }
    if trace is not None:
        trace.update(z=z, candidate_indices=list(cand_idx), scores=scores,
                     log_scores=log_soft, mrr=mrr, ranks=ranks,
                     log_q=lq, log_p=lp, message_adapted=tm, generated=gen,
                     candidates_adapted=r_adapted)
    return PredictionResult(ranked=ranked, top3=ranked[:3], diagnostics=diagnostics)


def rank_responses(state: models.ModelState, theta_m_raw, rs: ResponseSet,
                   rng: np.random.Generator, n_samples: int | None = None,
                   preselect_k: int | None = None) -> PredictionResult:
    """Variant-dispatching ranking with a uniform result shape.

    For matching, the score column is the deterministic 1/position so that it
    lives on the same (0, 1] scale as a sample MRR.
    """
    if state.config.is_vae:
        return vae_predict(state, theta_m_raw, rs, rng, n_samples=n_samples,
                           preselect_k=preselect_k)
    pool = matching_predict(state, theta_m_raw, rs, k=preselect_k)
    ranked = [(rs.entries[i].text, 1.0 / (pos + 1)) for pos, (i, _) in enumerate(pool)]
    return PredictionResult(ranked=ranked, top3=ranked[:3],
                            diagnostics={"candidates_scored": len(pool),
                                         "pool_size": len(rs),
                                         "deterministic": True})


def cross_lingual_predict(state: models.ModelState, theta_m_raw, target_lang: str,
                          response_sets: dict, rng: np.random.Generator,
                          n_samples: int | None = None,
                          preselect_k: int | None = None) -> PredictionResult:
    """Rank a message (any source language) against another language's set."""
    if target_lang not in response_sets:
        raise ConfigError(f"no response set for target language {target_lang!r} "
                          f"(have {sorted(response_sets)})")
    return rank_responses(state, theta_m_raw, response_sets[target_lang], rng,
                          n_samples=n_samples, preselect_k=preselect_k)
