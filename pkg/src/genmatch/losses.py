"""Training objectives for all variants.

Sign convention: matching and reconstruction terms are log-likelihoods
(higher is better, always <= 0 here); compute_loss returns a total in the
minimization direction, flipping those terms. The breakdown keeps each piece
in its natural direction for reporting.

Homoscedastic-uncertainty (HSU) weighting combines the active loss
components c_i as sum_i c_i / (2 sigma_i^2) + log sigma_i with one learned
log-sigma per component slot; an absent component contributes neither term.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .distributions import (GaussianParams, MixtureParams, gumbel_softmax, kl_diag_gaussian,
                            kl_mixture_variational, sample_gaussian)
from .errors import ContractError

# fixed HSU slot order; cgm drops the classifier slot, mcvae uses none
HSU_SLOTS = ("reconstruction", "kl", "matching_reg", "language_cls")


def matching_loss_rows(theta_m: Tensor, theta_r: Tensor) -> Tensor:
    """Per-pair in-batch log-softmax of the paired dot product, [B]."""
    b = theta_m.data.shape[0]
    if b == 0:
        raise ContractError("matching loss needs a non-empty batch")
    if theta_m.data.shape != theta_r.data.shape or theta_m.data.ndim != 2:
        raise ContractError(
            f"matching loss expects equal [B, d] shapes, got {theta_m.data.shape} vs {theta_r.data.shape}")
    scores = ad.matmul(theta_m, ad.transpose(theta_r))
    return ad.diag(ad.log_softmax(scores, axis=1))


def matching_loss(theta_m: Tensor, theta_r: Tensor) -> Tensor:
    """Mean in-batch matching log-likelihood (scalar, <= 0; 0 when B = 1)."""
    return ad.tmean(matching_loss_rows(theta_m, theta_r))


def reconstruction_rows(theta_r_prime: Tensor, theta_r: Tensor) -> Tensor:
    """Log-likelihood of each generated row against its own reply, [B]."""
    return matching_loss_rows(theta_r_prime, theta_r)


def reconstruction_loss(theta_r_prime: Tensor, candidates: Tensor, target: int) -> Tensor:
    """Single-row variant: log softmax score of `target` among candidates."""
    if theta_r_prime.data.ndim != 2 or theta_r_prime.data.shape[0] != 1:
        raise ContractError(f"expected a [1, d] generated row, got {theta_r_prime.data.shape}")
    scores = ad.matmul(theta_r_prime, ad.transpose(candidates))
    return ad.take(ad.reshape(ad.log_softmax(scores, axis=1), (candidates.data.shape[0],)), target)


def focal(log_likelihood: Tensor, alpha: float) -> Tensor:
    """Focal weighting FL(L) = (1 - e^L)^alpha * L for log-likelihoods L <= 0.

    Well-fit pairs (L near 0) are down-weighted toward 0; poorly fit pairs
    keep their full magnitude. alpha = 0 is the identity.
    """
    if alpha < 0:
        raise ContractError(f"focal alpha must be >= 0, got {alpha}")
    if np.any(log_likelihood.data > 0):
        raise ContractError(
            f"focal input must be a log-likelihood <= 0, max was {log_likelihood.data.max()}")
    if alpha == 0:
        return log_likelihood
    return ad.pow_const(1.0 - ad.exp(log_likelihood), alpha) * log_likelihood


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels, scalar >= 0.

    A scalar label (single-language batch) applies to every row.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if labels.ndim == 0:
        labels = np.full(logits.data.shape[0], int(labels), dtype=np.intp)
    return -ad.tmean(ad.take_per_row(ad.log_softmax(logits, axis=1), labels))


def hsu_combine(components: dict, log_sigmas: Tensor) -> Tensor:
    """Weight minimize-direction components by learned per-slot variances."""
    total = None
    for slot, name in enumerate(HSU_SLOTS):
        c = components.get(name)
        if c is None:
            continue
        log_s = ad.take(log_sigmas, slot)
        term = c * ad.exp(log_s * -2.0) * 0.5 + log_s
        total = term if total is None else total + term
    if total is None:
        raise ContractError("hsu_combine needs at least one component")
    return total


@dataclass
class LossBreakdown:
    """Scalar views of one loss evaluation. Log-likelihood fields are in
    their natural direction (<= 0); kl and language_cls are >= 0; the totals
    are in the minimization direction."""

    variant: str
    reconstruction: float = 0.0
    kl: float = 0.0
    matching_reg: float = 0.0
    language_cls: float = 0.0
    raw_total: float = 0.0
    hsu_weighted_total: float = 0.0
    hsu_sigmas: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "variant": self.variant,
            "reconstruction": self.reconstruction,
            "kl": self.kl,
            "matching_reg": self.matching_reg,
            "language_cls": self.language_cls,
            "raw_total": self.raw_total,
            "hsu_weighted_total": self.hsu_weighted_total,
        }


def _scale_sigma(dist, k: int):
    if k == 1:
        return dist
    f = 1.0 / np.sqrt(k)
    if isinstance(dist, GaussianParams):
        return GaussianParams(dist.mu, dist.sigma * f)
    return MixtureParams(dist.weights, [GaussianParams(c.mu, c.sigma * f) for c in dist.components])


def _kl_rows(cfg: models.ModelConfig, q_dist, p_dist) -> Tensor:
    if isinstance(q_dist, GaussianParams):
        return kl_diag_gaussian(q_dist, p_dist)
    sign = -1.0 if cfg.gmm_kl_exponent == "standard" else 1.0
    return kl_mixture_variational(q_dist, p_dist, exponent_sign=sign)


def compute_loss(state: models.ModelState, theta_m_raw, theta_r_raw, lang_idx,
                 rng: np.random.Generator, progress: float = 1.0):
    """One training objective evaluation.

    Returns (total Tensor in minimization direction, LossBreakdown). The rng
    drives gumbel and reparameterization noise; identical rng state gives an
    identical value.
    """
    cfg = state.config
    theta_m = models.adapt(state, theta_m_raw, "m")
    theta_r = models.adapt(state, theta_r_raw, "r")

    if cfg.variant == "matching":
        ml = matching_loss(theta_m, theta_r)
        total = -ml
        bd = LossBreakdown(variant=cfg.variant, matching_reg=ml.item(),
                           raw_total=total.item(), hsu_weighted_total=total.item())
        return total, bd

    if cfg.variant == "mcvae":
        post = models.posterior_forward(state, theta_m, theta_r)
        prior = models.prior_forward(state, theta_m)
        z = sample_gaussian(post.dist, rng)
        recon = ad.tmean(ad.minimum_const(
            reconstruction_rows(models.generate(state, theta_m, z), theta_r), 0.0))
        kl = ad.tmean(kl_diag_gaussian(post.dist, prior.dist))
        total = kl - recon
        bd = LossBreakdown(variant=cfg.variant, reconstruction=recon.item(), kl=kl.item(),
                           raw_total=total.item(), hsu_weighted_total=total.item())
        return total, bd

    # cgm / cgm-m: full suite
    post = models.posterior_forward(state, theta_m, theta_r)
    prior = models.prior_forward(state, theta_m)
    temperature = cfg.gumbel_temperature_at(progress)
    cat = gumbel_softmax(post.logits, temperature, rng)
    if cfg.categorical_mode == "hard-st":
        sel = cat.hard
    elif cfg.categorical_mode == "soft":
        sel = cat.soft
    else:  # detached: hard one-hot as a constant
        sel = ad.detach(cat.hard)
    mu_sel = ad.select_components(post.mu_bank, sel, cfg.h, cfg.K)
    sigma_sel = ad.select_components(post.sigma_bank, sel, cfg.h, cfg.K)

    k = cfg.multisample_k
    scale = 1.0 / np.sqrt(k)
    recon_rows_acc = None
    z_first = None
    for _ in range(k):
        eps = rng.standard_normal(mu_sel.data.shape)
        z = mu_sel + ad.constant(eps * scale) * sigma_sel
        z_first = z if z_first is None else z_first
        rows = reconstruction_rows(models.generate(state, theta_m, z), theta_r)
        recon_rows_acc = rows if recon_rows_acc is None else recon_rows_acc + rows
    recon_rows = recon_rows_acc * (1.0 / k)
    # guard against +eps float noise before the focal contract check
    recon_rows = ad.minimum_const(recon_rows, 0.0)
    recon = ad.tmean(focal(recon_rows, cfg.focal_alpha))

    q_dist = _scale_sigma(post.dist, k) if cfg.kl_on_scaled else post.dist
    kl = ad.tmean(_kl_rows(cfg, q_dist, prior.dist))

    components = {"reconstruction": -recon, "kl": kl}
    bd = LossBreakdown(variant=cfg.variant, reconstruction=recon.item(), kl=kl.item())

    if cfg.matching_regularizer:
        reg = matching_loss(theta_m, theta_r)
        components["matching_reg"] = -reg
        bd.matching_reg = reg.item()

    if cfg.uses_classifier:
        logits = models.classify_language(state, prior, z=z_first)
        lc = cross_entropy(logits, np.asarray(lang_idx, dtype=np.intp))
        components["language_cls"] = lc
        bd.language_cls = lc.item()

    raw_total = None
    for c in components.values():
        raw_total = c if raw_total is None else raw_total + c
    bd.raw_total = raw_total.item()

    if cfg.hsu_enabled:
        total = hsu_combine(components, state.params["hsu.log_sigma"])
        bd.hsu_sigmas = list(np.exp(state.params["hsu.log_sigma"].data))
    else:
        total = raw_total
    bd.hsu_weighted_total = total.item()
    return total, bd
