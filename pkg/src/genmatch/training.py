"""Optimization loop: Adam, warmup/decay schedule, single-language batches.

Every batch holds pairs of exactly one language; "uniform" picks the language
uniformly so small languages see as many updates as large ones, while
"proportional" picks it by corpus share. Validation gold-MRR feeds a
checkpoint ledger that keeps the best universal parameters and the best
parameters per language. Checkpoints capture optimizer moments and the rng
stream, so a resumed run is bit-identical to an uninterrupted one.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from . import models
from .corpus import Corpus
from .errors import ConfigError, ContractError, DivergenceError
from .losses import compute_loss
from .prediction import build_all_response_sets, rank_responses

LATEST_CKPT = "latest.ckpt"
UNIVERSAL_CKPT = "best_universal.ckpt"


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int
    peak_lr: float = 1e-5
    decay: float = 0.999
    warmup_steps: int = 1000
    batch_size: int = 256
    sampling: str = "uniform"  # "uniform" | "proportional", language per batch
    seed: int = 0
    grad_clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 0  # 0: evaluate only at step 0 and the final step
    val_messages_per_language: int = 0  # 0: every validation message
    val_n_samples: int = 64
    val_preselect_k: int = 8

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.sampling not in ("uniform", "proportional"):
            raise ConfigError(f"bad sampling {self.sampling!r}")
        if self.peak_lr <= 0 or not (0 < self.decay <= 1) or self.warmup_steps < 1:
            raise ConfigError("need peak_lr > 0, 0 < decay <= 1, warmup_steps >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")


def learning_rate(config: TrainConfig, step: int) -> float:
    """Linear warmup to peak, then exponential decay; step is 1-based."""
    if step < 1:
        raise ContractError(f"schedule step is 1-based, got {step}")
    if step <= config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    return config.peak_lr * config.decay ** (step - config.warmup_steps)


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter dict."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def apply(self, grads: dict, lr: float):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {"m": self.m, "v": self.v, "step": self.t,
                "hypers": {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}}

    def load_state_dict(self, st: dict):
        hyp = st["hypers"]
        self.beta1, self.beta2, self.eps = hyp["beta1"], hyp["beta2"], hyp["eps"]
        self.t = st["step"]
        for name in self.params:
            if name not in st["m"]:
                raise ContractError(f"optimizer state missing moments for {name!r}")
            self.m[name] = np.asarray(st["m"][name], dtype=np.float64).copy()
            self.v[name] = np.asarray(st["v"][name], dtype=np.float64).copy()


def clip_gradients(grads: dict, max_norm: float):
    """Global-norm clipping; returns (grads, pre-clip norm)."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {name: g * scale for name, g in grads.items()}
    return grads, float(norm)


class BatchSampler:
    """Single-language batches, language picked per batch, rows with replacement."""

    def __init__(self, corpus: Corpus, batch_size: int, sampling: str,
                 rng: np.random.Generator):
        self.languages = list(corpus.languages)
        by_lang = corpus.by_language()
        self.pools = []
        for lang in self.languages:
            pairs = by_lang[lang]
            if not pairs:
                raise ConfigError(f"language {lang!r} has no training pairs")
            self.pools.append((
                np.stack([p.theta_m for p in pairs]).astype(np.float64),
                np.stack([p.theta_r for p in pairs]).astype(np.float64)))
        counts = np.array([p[0].shape[0] for p in self.pools], dtype=np.float64)
        self.weights = (np.full(len(counts), 1.0 / len(counts))
                        if sampling == "uniform" else counts / counts.sum())
        self.batch_size = batch_size
        self.rng = rng

    def next_batch(self):
        """(lang, lang_index, theta_m [B, d], theta_r [B, d])"""
        li = int(self.rng.choice(len(self.languages), p=self.weights))
        tm, tr = self.pools[li]
        rows = self.rng.choice(tm.shape[0], size=self.batch_size, replace=True)
        return self.languages[li], li, tm[rows], tr[rows]


def lang_checkpoint_name(lang: str) -> str:
    return f"best_lang_{lang}.ckpt"


class CheckpointLedger:
    """Best-so-far tracking over validation evals.

    universal_best keeps the parameters with the highest mean gold-MRR across
    languages; language_best keeps, per language, the parameters that scored
    highest on that language alone. Ties keep the earlier step.
    """

    def __init__(self):
        self.evals = []
        self.universal_best = None  # {"step", "mean", "params"}
        self.language_best = {}     # lang -> {"step", "mrr", "params"}

    def record(self, step: int, per_lang: dict, state: models.ModelState) -> dict:
        mean = float(np.mean(list(per_lang.values())))
        self.evals.append({"step": step, "mrr": dict(per_lang), "mean": mean})
        improved = {"universal": False, "languages": []}
        if self.universal_best is None or mean > self.universal_best["mean"]:
            self.universal_best = {"step": step, "mean": mean, "params": state.clone_params()}
            improved["universal"] = True
        for lang, mrr in per_lang.items():
            cur = self.language_best.get(lang)
            if cur is None or mrr > cur["mrr"]:
                self.language_best[lang] = {"step": step, "mrr": float(mrr),
                                            "params": state.clone_params()}
                improved["languages"].append(lang)
        return improved

    def metrics_json(self) -> dict:
        return {
            "evals": self.evals,
            "universal_best": {"step": self.universal_best["step"],
                               "mean": self.universal_best["mean"]} if self.universal_best else None,
            "language_best": {lang: {"step": b["step"], "mrr": b["mrr"]}
                              for lang, b in self.language_best.items()},
        }


def _eval_rng(seed: int, step: int, lang_index: int) -> np.random.Generator:
    # independent of the training stream so evals never perturb resume
    return np.random.default_rng(np.random.SeedSequence((seed, step, lang_index)))


def validation_mrr(state: models.ModelState, val_corpus: Corpus, response_sets: dict,
                   seed: int, step: int, n_samples: int, preselect_k: int,
                   max_messages: int = 0) -> dict:
    """Gold-reply mean reciprocal rank per language.

    A validation pair scores 1/rank of its own reply text in the ranked list,
    or 0 when the reply is missing from the candidate pool. The latent
    variants rank a preselected pool; matching ranks the full set.
    """
    out = {}
    for li, lang in enumerate(val_corpus.languages):
        pairs = val_corpus.by_language()[lang]
        if max_messages:
            pairs = pairs[:max_messages]
        if not pairs:
            raise ConfigError(f"validation split has no pairs for language {lang!r}")
        rs = response_sets[lang]
        rng = _eval_rng(seed, step, li)
        k = preselect_k if state.config.is_vae else None
        total = 0.0
        for p in pairs:
            result = rank_responses(state, p.theta_m, rs, rng,
                                    n_samples=n_samples, preselect_k=k)
            rr = 0.0
            for pos, (text, _) in enumerate(result.ranked):
                if text == p.reply_text:
                    rr = 1.0 / (pos + 1)
                    break
            total += rr
        out[lang] = total / len(pairs)
    return out


@dataclass
class TrainResult:
    state: models.ModelState
    ledger: CheckpointLedger
    steps_run: int
    final_mrr: dict
    history_path: str | None = None


def _save_latest(path_dir: str, state: models.ModelState, step: int, adam: Adam,
                 rng: np.random.Generator, ledger: CheckpointLedger,
                 config: TrainConfig):
    models.save_checkpoint(
        os.path.join(path_dir, LATEST_CKPT), state, step=step,
        optimizer=adam.state_dict(),
        rng_state=rng.bit_generator.state,
        extra={"ledger": ledger.metrics_json(), "train_config": asdict(config)})


def _restore_ledger(path_dir: str, metrics: dict) -> CheckpointLedger:
    ledger = CheckpointLedger()
    ledger.evals = list(metrics["evals"])
    if metrics["universal_best"] is not None:
        p = os.path.join(path_dir, UNIVERSAL_CKPT)
        if not os.path.exists(p):
            raise ConfigError(f"resume: missing {p}")
        snap, _, _, _, _ = models.load_checkpoint(p)
        ledger.universal_best = dict(metrics["universal_best"], params=snap.clone_params())
    for lang, best in metrics["language_best"].items():
        p = os.path.join(path_dir, lang_checkpoint_name(lang))
        if not os.path.exists(p):
            raise ConfigError(f"resume: missing {p}")
        snap, _, _, _, _ = models.load_checkpoint(p)
        ledger.language_best[lang] = dict(best, params=snap.clone_params())
    return ledger


def train(state: models.ModelState, train_corpus: Corpus, val_corpus: Corpus,
          config: TrainConfig, response_sets: dict | None = None,
          response_threshold: int = 0, history_path: str | None = None,
          checkpoint_dir: str | None = None, resume: bool = False) -> TrainResult:
    """Run the optimization loop; returns the mutated state plus the ledger.

    The final step is always evaluated, and a fresh run starts with a step-0
    baseline eval so the ledger is never empty. With checkpoint_dir set, the
    latest/best checkpoints are written at every eval; resume=True picks up
    the latest checkpoint bit-exactly (parameters, Adam moments, rng stream,
    ledger).
    """
    cfg = state.config.validated()
    if cfg.uses_classifier and cfg.num_languages != len(train_corpus.languages):
        raise ConfigError(f"model expects {cfg.num_languages} languages, corpus has "
                          f"{len(train_corpus.languages)}")
    if cfg.d != train_corpus.dim:
        raise ConfigError(f"model dim {cfg.d} vs corpus dim {train_corpus.dim}")
    if response_sets is None:
        response_sets = build_all_response_sets(train_corpus, threshold=response_threshold)

    rng = np.random.default_rng(config.seed)
    ledger = CheckpointLedger()
    start_step = 0

    if resume:
        if not checkpoint_dir:
            raise ConfigError("resume needs a checkpoint_dir")
        latest = os.path.join(checkpoint_dir, LATEST_CKPT)
        if not os.path.exists(latest):
            raise ConfigError(f"resume: no checkpoint at {latest}")
        loaded, start_step, opt_state, rng_state, extra = models.load_checkpoint(latest)
        if loaded.config != cfg:
            raise ConfigError("resume: checkpoint model config differs from the given state")
        state.load_param_arrays(loaded.clone_params())
        if loaded.adapters_frozen:
            state.freeze_adapters()
        rng.bit_generator.state = rng_state
        ledger = _restore_ledger(checkpoint_dir, extra["ledger"])
    elif checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)

    adam = Adam(state.trainable(), config.beta1, config.beta2, config.adam_eps)
    if resume:
        adam.load_state_dict(opt_state)

    sampler = BatchSampler(train_corpus, config.batch_size, config.sampling, rng)
    history = open(history_path, "a" if resume else "w") if history_path else None

    def emit(record: dict):
        if history is not None:
            history.write(json.dumps(record, sort_keys=True) + "\n")

    def run_eval(step: int):
        per_lang = validation_mrr(state, val_corpus, response_sets, config.seed, step,
                                  config.val_n_samples, config.val_preselect_k,
                                  config.val_messages_per_language)
        improved = ledger.record(step, per_lang, state)
        emit({"kind": "eval", "step": step, "mrr": per_lang,
              "mean_mrr": float(np.mean(list(per_lang.values()))),
              "new_universal_best": improved["universal"],
              "new_language_best": improved["languages"]})
        if checkpoint_dir:
            if improved["universal"]:
                models.save_checkpoint(os.path.join(checkpoint_dir, UNIVERSAL_CKPT),
                                       state, step=step)
            for lang in improved["languages"]:
                models.save_checkpoint(os.path.join(checkpoint_dir, lang_checkpoint_name(lang)),
                                       state, step=step)
            _save_latest(checkpoint_dir, state, step, adam, rng, ledger, config)
        return per_lang

    try:
        final_mrr = ledger.evals[-1]["mrr"] if ledger.evals else {}
        if start_step == 0:
            final_mrr = run_eval(0)
        for step in range(start_step + 1, config.max_steps + 1):
            lang, li, tm, tr = sampler.next_batch()
            with ad.tape() as tape:
                total, bd = compute_loss(state, tm, tr, li, rng,
                                         progress=step / config.max_steps)
                if not np.isfinite(total.data):
                    raise DivergenceError(
                        f"loss became non-finite at step {step} (language {lang})")
                grads = tape.backward(total)
            grads = {name: grads[p] for name, p in adam.params.items() if p in grads}
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise DivergenceError(
                        f"gradient for parameter {name} became non-finite at step {step}")
            clipped, gnorm = clip_gradients(grads, config.grad_clip)
            lr = learning_rate(config, step)
            adam.apply(clipped, lr)
            emit({"kind": "train", "step": step, "lang": lang, "lr": lr,
                  "grad_norm": gnorm, **bd.as_dict()})
            if step == config.max_steps or (config.eval_every
                                            and step % config.eval_every == 0):
                final_mrr = run_eval(step)
    finally:
        if history is not None:
            history.close()

    return TrainResult(state=state, ledger=ledger, steps_run=config.max_steps,
                       final_mrr=final_mrr, history_path=history_path)


ADAPTER_PARAMS = ("adapter_m.W", "adapter_m.b", "adapter_r.W", "adapter_r.b")


def pretrain_matching_then_freeze(vae_state: models.ModelState, train_corpus: Corpus,
                                  val_corpus: Corpus, matching_config: TrainConfig,
                                  vae_config: TrainConfig, response_sets: dict | None = None,
                                  response_threshold: int = 0,
                                  history_path: str | None = None,
                                  checkpoint_dir: str | None = None):
    """Two-phase protocol: matching pretrain, copy best adapters, freeze, train VAE.

    Phase 1 trains a matching model (adapters are its only parameters); its
    best-universal adapters seed the VAE, which then trains with adapters
    frozen. Returns (matching TrainResult, vae TrainResult).
    """
    if not vae_state.config.is_vae:
        raise ConfigError("pretrain protocol needs a latent-variable variant")
    if not vae_state.config.adapters_enabled:
        raise ConfigError("pretrain protocol needs adapters_enabled")
    match_cfg = replace(vae_state.config, variant="matching")
    match_state = models.init_state(match_cfg, seed=matching_config.seed)
    res_match = train(match_state, train_corpus, val_corpus, matching_config,
                      response_sets=response_sets, response_threshold=response_threshold,
                      history_path=None if history_path is None else f"{history_path}.pretrain",
                      checkpoint_dir=None if checkpoint_dir is None
                      else os.path.join(checkpoint_dir, "pretrain"))
    best = res_match.ledger.universal_best["params"]
    for name in ADAPTER_PARAMS:
        vae_state.params[name].data = best[name].copy()
    vae_state.freeze_adapters()
    res_vae = train(vae_state, train_corpus, val_corpus, vae_config,
                    response_sets=response_sets, response_threshold=response_threshold,
                    history_path=history_path, checkpoint_dir=checkpoint_dir)
    return res_match, res_vae
