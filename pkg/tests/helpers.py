"""Shared test oracles: finite differences and Monte-Carlo KL estimates.

These deliberately avoid the library's own gradient and KL code paths so the
comparisons stay independent.
"""
import numpy as np


def finite_difference(loss_fn, arrays, coords=None, h=1e-5, rng=None):
    """Central-difference gradients of loss_fn at the given numpy arrays.

    loss_fn takes the list of arrays and returns a float; it must be a
    deterministic function of them (freeze any sampling outside). Returns a
    list of (array_index, flat_index, grad) triples. `coords` limits the
    check to that many randomly chosen coordinates per array.
    """
    triples = []
    for ai, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        if coords is None or coords >= flat.size:
            picks = range(flat.size)
        else:
            picks = rng.choice(flat.size, size=coords, replace=False)
        for fi in picks:
            fi = int(fi)
            orig = flat[fi]
            flat[fi] = orig + h
            up = loss_fn(arrays)
            flat[fi] = orig - h
            down = loss_fn(arrays)
            flat[fi] = orig
            triples.append((ai, fi, (up - down) / (2.0 * h)))
    return triples


def grads_close(g_ad, g_fd, rel=1e-4, abs_floor=1e-8):
    """Relative comparison with a noise floor for near-zero gradients."""
    return abs(g_ad - g_fd) <= rel * max(abs(g_ad), abs(g_fd)) + abs_floor


def mc_kl_gaussian(mu_q, sigma_q, mu_p, sigma_p, n, rng):
    """Monte-Carlo KL(q||p) for diagonal Gaussians via scipy logpdfs.

    Returns (estimate, standard_error).
    """
    from scipy import stats

    z = rng.standard_normal((n, mu_q.size)) * sigma_q + mu_q
    lq = stats.norm.logpdf(z, loc=mu_q, scale=sigma_q).sum(axis=1)
    lp = stats.norm.logpdf(z, loc=mu_p, scale=sigma_p).sum(axis=1)
    diff = lq - lp
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n))


def mc_kl_mixture(wq, mus_q, sigmas_q, wp, mus_p, sigmas_p, n, rng):
    """Monte-Carlo KL(q||p) for two diagonal-Gaussian mixtures.

    Components are [K, h] arrays; weights are [K]. scipy-based, independent
    of the library's density code. Returns (estimate, standard_error).
    """
    from scipy import stats
    from scipy.special import logsumexp

    kq = len(wq)
    comp = rng.choice(kq, size=n, p=wq)
    z = rng.standard_normal((n, mus_q.shape[1])) * sigmas_q[comp] + mus_q[comp]

    def mix_logpdf(w, mus, sigmas):
        parts = [stats.norm.logpdf(z, loc=mus[i], scale=sigmas[i]).sum(axis=1) + np.log(w[i])
                 for i in range(len(w))]
        return logsumexp(np.stack(parts, axis=0), axis=0)

    diff = mix_logpdf(wq, mus_q, sigmas_q) - mix_logpdf(wp, mus_p, sigmas_p)
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n))
