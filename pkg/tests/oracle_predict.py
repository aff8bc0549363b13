"""Plain-numpy re-implementation of the VAE ranking pipeline.

Independent oracle for prediction: consumes only raw parameter arrays, the
config, and the trace captured by vae_predict (latent draws plus candidate
pool). Shares no code with the graph ops, so any disagreement points at a
real bug on one side.
"""
import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
WEIGHT_FLOOR = 1e-12


def _arrays(state):
    return {k: v.data for k, v in state.params.items()}


def ffn(arrays, name, x):
    li, out = 0, x
    while f"{name}.{li}.W" in arrays:
        out = out @ arrays[f"{name}.{li}.W"] + arrays[f"{name}.{li}.b"]
        li += 1
        if f"{name}.{li}.W" in arrays:
            out = np.tanh(out)
    return out


def l2norm(x):
    return x / np.sqrt((x * x).sum(axis=1, keepdims=True) + 1e-12)


def adapt(arrays, cfg, x, side):
    if not cfg.adapters_enabled:
        return x
    w, b = arrays[f"adapter_{side}.W"], arrays[f"adapter_{side}.b"]
    return l2norm(x + np.tanh(x @ w + b))


def softmax(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def softplus(x):
    return np.logaddexp(0.0, x)


def unbank(bank, h, k):
    """[1, h*k] h-major bank -> [k, h] per-component rows."""
    return np.stack([bank[0, c::k] for c in range(k)])


def prior(arrays, cfg, tm):
    """(pi [K], mus [K, h], sigmas [K, h]); standard normal for mcvae."""
    if cfg.variant == "mcvae":
        return np.ones(1), np.zeros((1, cfg.h)), np.ones((1, cfg.h))
    pi = softmax(ffn(arrays, "prior_cat", tm), axis=1)[0]
    mus = unbank(ffn(arrays, "prior_mu", tm), cfg.h, cfg.K)
    sigmas = unbank(softplus(ffn(arrays, "prior_sigma", tm)) + 1e-6, cfg.h, cfg.K)
    return pi, mus, sigmas


def posterior(arrays, cfg, tm, tr):
    if cfg.posterior_message_only:
        x = tm
    else:
        x = np.concatenate([tm, ffn(arrays, "r_proj", tr)], axis=1)
    rho = softmax(ffn(arrays, "post_cat", x), axis=1)[0]
    mus = unbank(ffn(arrays, "post_mu", x), cfg.h, cfg.K)
    sigmas = unbank(softplus(ffn(arrays, "post_sigma", x)) + 1e-6, cfg.h, cfg.K)
    return rho, mus, sigmas


def generate(arrays, cfg, tm, z):
    x = np.concatenate([z, np.repeat(tm, z.shape[0], axis=0)], axis=1)
    return l2norm(ffn(arrays, "generator", x))


def gaussian_logpdf(z, mu, sigma):
    t = (z - mu) / sigma
    return (-0.5 * t * t - np.log(sigma) - 0.5 * LOG_2PI).sum(axis=1)


def mixture_logpdf(z, pi, mus, sigmas):
    logw = np.log(np.maximum(pi, WEIGHT_FLOOR))
    cols = np.stack([logw[c] + gaussian_logpdf(z, mus[c], sigmas[c])
                     for c in range(len(pi))], axis=1)
    m = cols.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(cols - m).sum(axis=1, keepdims=True)))[:, 0]


def vae_rank(state, theta_m_raw, rs, trace):
    """Recompute the ranked (text, mrr) list from a vae_predict trace."""
    cfg = state.config
    arrays = _arrays(state)
    tm = adapt(arrays, cfg, np.asarray(theta_m_raw, dtype=np.float64).reshape(1, -1), "m")
    r_all = adapt(arrays, cfg, rs.embedding_matrix(), "r")
    cand = trace["candidate_indices"]
    r = r_all[cand]
    z = trace["z"]
    n, k = z.shape[0], len(cand)

    log_soft = log_softmax(generate(arrays, cfg, tm, z) @ r.T, axis=1)
    if cfg.prediction_kl:
        pi, mus, sigmas = prior(arrays, cfg, tm)
        lp = mixture_logpdf(z, pi, mus, sigmas)
        lq = np.empty((n, k))
        for c in range(k):
            rho, qmus, qsigmas = posterior(arrays, cfg, tm, r[c][None])
            lq[:, c] = mixture_logpdf(z, rho, qmus, qsigmas)
        log_soft = log_soft - (lq - lp[:, None])

    order = np.argsort(-log_soft, axis=1, kind="stable")
    ranks = np.empty_like(order)
    cols = np.arange(k)
    for i in range(n):
        ranks[i, order[i]] = cols
    mrr = (1.0 / (ranks + 1.0)).mean(axis=0)
    final = np.argsort(-mrr, kind="stable")
    return [(rs.entries[cand[j]].text, float(mrr[j])) for j in final], mrr
