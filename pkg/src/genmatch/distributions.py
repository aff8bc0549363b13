"""Diagonal Gaussians, mixtures, and the latent-sampling toolkit.

Parameters live as Tensors so every density and divergence here is
differentiable end to end. Batched rows broadcast: a distribution with [1, h]
parameters scores [N, h] points row-wise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

LOG_2PI = float(np.log(2.0 * np.pi))

# mixture weights are clamped here before any log; softmax output can
# underflow to exact zero for extreme logits
WEIGHT_FLOOR = 1e-12


@dataclass
class GaussianParams:
    """Diagonal Gaussian; sigma holds standard deviations, strictly positive."""

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.data.shape != self.sigma.data.shape:
            raise DimensionError(
                f"gaussian mu {self.mu.data.shape} vs sigma {self.sigma.data.shape}")


@dataclass
class MixtureParams:
    """Gaussian mixture with one weight column per component."""

    weights: Tensor  # [B, K] rows on the simplex
    components: list  # K GaussianParams, each [B, h]

    def __post_init__(self):
        if self.weights.data.ndim != 2:
            raise DimensionError(f"mixture weights must be [B, K], got {self.weights.data.shape}")
        if self.weights.data.shape[1] != len(self.components):
            raise DimensionError(
                f"{len(self.components)} components vs weight shape {self.weights.data.shape}")

    @property
    def k(self) -> int:
        return len(self.components)


@dataclass
class CategoricalSample:
    """Gumbel-Softmax draw: soft relaxation plus straight-through one-hot."""

    soft: Tensor  # [B, K] simplex rows
    hard: Tensor  # [B, K] exact one-hot, gradients flow to soft
    temperature: float


def sample_gaussian(params: GaussianParams, rng: np.random.Generator, n: int | None = None) -> Tensor:
    """Reparameterized draw mu + eps * sigma.

    With n given, params must be a single row [1, h] and the result stacks n
    independent draws [n, h].
    """
    shape = params.mu.data.shape
    if n is not None:
        if shape[0] != 1:
            raise ContractError(f"n-draw sampling needs [1, h] params, got {shape}")
        shape = (n, shape[1])
    eps = rng.standard_normal(shape)
    return params.mu + ad.constant(eps) * params.sigma


def sample_gaussian_scaled(params: GaussianParams, k: int, rng: np.random.Generator) -> Tensor:
    """Draw from the mean-of-k family N(mu, sigma^2 / k)."""
    if k < 1:
        raise ContractError(f"sample count k must be >= 1, got {k}")
    eps = rng.standard_normal(params.mu.data.shape)
    return params.mu + ad.constant(eps / np.sqrt(k)) * params.sigma


def scale_gaussian(params: GaussianParams, k: int) -> GaussianParams:
    """The N(mu, sigma^2/k) family itself, for KL on the scaled posterior."""
    return GaussianParams(params.mu, params.sigma * (1.0 / np.sqrt(k)))


def gumbel_softmax(logits: Tensor, temperature: float, rng: np.random.Generator) -> CategoricalSample:
    """Hard Gumbel-Softmax with straight-through gradients.

    The hard field is an exact one-hot at the argmax of the soft relaxation;
    backward treats hard as identity into soft.
    """
    if temperature <= 0:
        raise ContractError(f"gumbel temperature must be positive, got {temperature}")
    if logits.data.ndim != 2:
        raise DimensionError(f"gumbel logits must be [B, K], got {logits.data.shape}")
    u = rng.uniform(low=np.finfo(np.float64).tiny, high=1.0, size=logits.data.shape)
    g = -np.log(-np.log(u))
    soft = ad.softmax((logits + ad.constant(g)) * (1.0 / temperature), axis=1)
    hard = np.zeros_like(soft.data)
    hard[np.arange(hard.shape[0]), soft.data.argmax(axis=1)] = 1.0
    return CategoricalSample(soft=soft, hard=ad.straight_through(soft, hard), temperature=temperature)


def sample_categorical(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Plain (non-relaxed) categorical draws, for prediction-time sampling."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    w = w / w.sum()
    return rng.choice(w.size, size=n, p=w)


def kl_diag_gaussian(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Closed-form KL(q || p) per row, summed over the feature axis."""
    var_ratio = ad.pow_const(q.sigma / p.sigma, 2.0)
    mean_term = ad.pow_const((q.mu - p.mu) / p.sigma, 2.0)
    per_dim = ad.log(p.sigma) - ad.log(q.sigma) + (var_ratio + mean_term) * 0.5 - 0.5
    return ad.tsum(per_dim, axis=per_dim.data.ndim - 1)


def log_density(dist, z: Tensor) -> Tensor:
    """Row-wise log density of z under a Gaussian or mixture."""
    if isinstance(dist, GaussianParams):
        std = (z - dist.mu) / dist.sigma
        per_dim = ad.pow_const(std, 2.0) * -0.5 - ad.log(dist.sigma) - 0.5 * LOG_2PI
        return ad.tsum(per_dim, axis=per_dim.data.ndim - 1)
    if isinstance(dist, MixtureParams):
        logw = ad.log(ad.maximum_const(dist.weights, WEIGHT_FLOOR))
        cols = []
        for k, comp in enumerate(dist.components):
            lk = log_density(comp, z)
            lw = ad.narrow(logw, 1, k, k + 1)
            if lw.data.shape[0] == 1 and lk.data.shape[0] != 1:
                lw = ad.reshape(lw, (1,))
            else:
                lw = ad.reshape(lw, (lk.data.shape[0],))
            cols.append(ad.reshape(lk + lw, (lk.data.shape[0], 1)))
        return ad.logsumexp(ad.concat(cols, axis=1), axis=1)
    raise ContractError(f"log_density: unsupported distribution {type(dist).__name__}")


def kl_mixture_variational(q: MixtureParams, p: MixtureParams, exponent_sign: float = -1.0) -> Tensor:
    """Variational upper-style approximation of KL(q || p) for mixtures.

    Per row: sum_i w_q[i] * ( log sum_j w_q[j] exp(s * KL(q_i || q_j))
                            - log sum_k w_p[k] exp(s * KL(q_i || p_k)) )
    with s = exponent_sign. The standard form uses s = -1 and reduces to the
    closed-form Gaussian KL at K = 1; s = +1 is kept only as a documented
    variant switch.
    """
    if exponent_sign not in (-1.0, 1.0):
        raise ContractError(f"exponent_sign must be +/-1, got {exponent_sign}")
    logwq = ad.log(ad.maximum_const(q.weights, WEIGHT_FLOOR))
    logwp = ad.log(ad.maximum_const(p.weights, WEIGHT_FLOOR))
    b = q.weights.data.shape[0]
    total = None
    for i, qi in enumerate(q.components):
        qq_cols = []
        for j, qj in enumerate(q.components):
            kl_ij = kl_diag_gaussian(qi, qj) * exponent_sign
            qq_cols.append(ad.reshape(ad.narrow(logwq, 1, j, j + 1), (b,)) + kl_ij)
        qp_cols = []
        for k, pk in enumerate(p.components):
            kl_ik = kl_diag_gaussian(qi, pk) * exponent_sign
            lw = ad.narrow(logwp, 1, k, k + 1)
            lw = ad.reshape(lw, (1,)) if lw.data.shape[0] == 1 and b != 1 else ad.reshape(lw, (b,))
            qp_cols.append(lw + kl_ik)
        inner_q = ad.logsumexp(ad.concat([ad.reshape(c, (b, 1)) for c in qq_cols], axis=1), axis=1)
        inner_p = ad.logsumexp(ad.concat([ad.reshape(c, (b, 1)) for c in qp_cols], axis=1), axis=1)
        wi = ad.reshape(ad.narrow(q.weights, 1, i, i + 1), (b,))
        term = wi * (inner_q - inner_p)
        total = term if total is None else total + term
    return total
