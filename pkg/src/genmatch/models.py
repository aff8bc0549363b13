"""Model variants over precomputed embeddings.

Four variants share one parameter layout:

  matching  dual-encoder dot product; only the residual adapters train.
  mcvae     fixed N(0, I) prior, Gaussian posterior, frozen adapters.
  cgm       message-conditional Gaussian prior (K = 1 mixture).
  cgm-m     message-conditional Gaussian-mixture prior, categorical latent
            via hard Gumbel-Softmax, optional language classifier on pi.

All dense blocks are tanh MLPs: two layers for the prior/posterior heads,
three for the generator. Mixture heads emit [h*K] banks laid out h-major, and
component selection multiplies a one-hot against that bank.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import GaussianParams, MixtureParams
from .errors import ConfigError, ContractError, DataFormatError, UnsupportedOpError

VARIANTS = ("matching", "mcvae", "cgm", "cgm-m")

CKPT_MAGIC = b"GMCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    d: int
    h: int = 512
    K: int = 20
    r_proj_dim: int = 16
    num_languages: int = 1
    num_prediction_samples: int = 1000
    preselect_k: int = 100
    lm_bias_weight: float = 0.0
    focal_alpha: float = 1.0
    multisample_k: int = 1
    adapters_enabled: bool = True
    alignment_enabled: bool = True
    classifier_input: str = "pi"  # "pi" | "moments" | "sample"
    posterior_message_only: bool = False
    prediction_kl: bool = True
    gmm_kl_exponent: str = "standard"  # "standard" | "as-printed"
    gumbel_temperature: float = 1.0
    gumbel_final_temperature: float | None = None
    # hard-st: one-hot forward, straight-through backward (training default).
    # soft: relaxed simplex weights end to end, fully differentiable.
    # detached: one-hot forward, categorical branch treated as constant.
    # The soft/detached modes exist because the straight-through estimator is
    # deliberately not the derivative of the hard forward, so gradient checks
    # need a path whose backward is exact.
    categorical_mode: str = "hard-st"
    kl_on_scaled: bool = False
    hsu_enabled: bool = True
    matching_regularizer: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.variant in ("cgm", "mcvae") and self.K != 1:
            # cgm is the K=1 special case and mcvae has no categorical latent;
            # coerce rather than reject
            object.__setattr__(self, "K", 1)
        if self.d < 1 or self.h < 1 or self.K < 1:
            raise ConfigError("d, h, K must all be >= 1")
        if self.r_proj_dim > self.d:
            raise ConfigError(f"r_proj_dim {self.r_proj_dim} must not exceed d {self.d}")
        if self.classifier_input not in ("pi", "moments", "sample"):
            raise ConfigError(f"bad classifier_input {self.classifier_input!r}")
        if self.gmm_kl_exponent not in ("standard", "as-printed"):
            raise ConfigError(f"bad gmm_kl_exponent {self.gmm_kl_exponent!r}")
        if self.categorical_mode not in ("hard-st", "soft", "detached"):
            raise ConfigError(f"bad categorical_mode {self.categorical_mode!r}")
        if self.multisample_k < 1:
            raise ConfigError("multisample_k must be >= 1")

    def validated(self) -> "ModelConfig":
        """Entry-point validation, stricter than the raw dataclass."""
        if self.variant == "cgm-m" and self.K < 2:
            raise ConfigError("cgm-m needs K >= 2 mixture components")
        if self.variant == "cgm-m" and self.alignment_enabled and self.num_languages < 2:
            raise ConfigError("alignment needs at least 2 languages")
        return self

    @property
    def is_vae(self) -> bool:
        return self.variant != "matching"

    @property
    def has_mixture_prior(self) -> bool:
        return self.variant in ("cgm", "cgm-m")

    @property
    def uses_classifier(self) -> bool:
        return self.variant == "cgm-m" and self.alignment_enabled

    def gumbel_temperature_at(self, progress: float) -> float:
        """Linear anneal from gumbel_temperature to the final value, if set."""
        if self.gumbel_final_temperature is None:
            return self.gumbel_temperature
        p = min(max(progress, 0.0), 1.0)
        return self.gumbel_temperature + p * (self.gumbel_final_temperature - self.gumbel_temperature)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _ffn_shapes(sizes) -> list:
    return [(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]


class ModelState:
    """Named parameters plus config; the graph functions below consume it."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params  # name -> Tensor, insertion-ordered
        self.adapters_frozen = False

    def trainable(self) -> dict:
        out = {}
        for name, p in self.params.items():
            if self.adapters_frozen and name.startswith("adapter_"):
                continue
            out[name] = p
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def freeze_adapters(self):
        self.adapters_frozen = True
        for name, p in self.params.items():
            if name.startswith("adapter_"):
                p.requires_grad = False

    def clone_params(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_param_arrays(self, arrays: dict):
        for name, arr in arrays.items():
            if name not in self.params:
                raise ContractError(f"unknown parameter {name!r} in state load")
            if self.params[name].data.shape != arr.shape:
                raise ContractError(
                    f"shape mismatch for {name}: {self.params[name].data.shape} vs {arr.shape}")
            self.params[name].data = arr.astype(np.float64).copy()


def _layer_specs(config: ModelConfig) -> list:
    """(name, sizes) for every dense block the variant owns, in init order."""
    d, h, k = config.d, config.h, config.K
    specs = []
    if config.adapters_enabled:
        specs.append(("adapter_m", [d, d]))
        specs.append(("adapter_r", [d, d]))
    if config.variant == "matching":
        return specs
    post_in = d if config.posterior_message_only else d + config.r_proj_dim
    if not config.posterior_message_only:
        specs.append(("r_proj", [d, config.r_proj_dim]))
    if config.has_mixture_prior:
        specs.append(("prior_cat", [d, h, k]))       # FFN over theta_m -> K logits
        specs.append(("prior_mu", [d, h, h * k]))
        specs.append(("prior_sigma", [d, h, h * k]))
    specs.append(("post_cat", [post_in, h, k]))
    specs.append(("post_mu", [post_in, h, h * k]))
    specs.append(("post_sigma", [post_in, h, h * k]))
    specs.append(("generator", [h + d, h, h, d]))    # one hidden layer deeper
    if config.uses_classifier:
        cls_in = {"pi": k, "moments": 2 * h, "sample": h}[config.classifier_input]
        specs.append(("classifier", [cls_in, h, config.num_languages]))
    return specs


def expected_param_count(config: ModelConfig) -> int:
    total = 0
    for name, sizes in _layer_specs(config):
        if name.startswith("adapter"):
            total += sizes[0] * sizes[1] + sizes[1]
            continue
        for fi, fo in _ffn_shapes(sizes):
            total += fi * fo + fo
    if config.is_vae:
        total += 4  # hsu log-sigmas
    return total


def init_state(config: ModelConfig, seed: int = 0) -> ModelState:
    """Seeded parameter init: Glorot-uniform weights, zero biases.

    Adapters start at exact zero so they are the identity on unit inputs.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, sizes in _layer_specs(config):
        if name.startswith("adapter"):
            params[f"{name}.W"] = ad.parameter(np.zeros((sizes[0], sizes[1])))
            params[f"{name}.b"] = ad.parameter(np.zeros(sizes[1]))
            continue
        for li, (fi, fo) in enumerate(_ffn_shapes(sizes)):
            params[f"{name}.{li}.W"] = ad.parameter(_glorot(rng, fi, fo))
            params[f"{name}.{li}.b"] = ad.parameter(np.zeros(fo))
    if config.is_vae:
        params["hsu.log_sigma"] = ad.parameter(np.zeros(4))
    return ModelState(config, params)


def _apply_ffn(state: ModelState, name: str, x: Tensor) -> Tensor:
    """tanh MLP; final layer is linear."""
    li = 0
    out = x
    while f"{name}.{li}.W" in state.params:
        w = state.params[f"{name}.{li}.W"]
        b = state.params[f"{name}.{li}.b"]
        if state.adapters_frozen and name.startswith("adapter_"):
            w, b = ad.detach(w), ad.detach(b)
        out = ad.matmul(out, w) + b
        li += 1
        if f"{name}.{li}.W" in state.params:
            out = ad.tanh(out)
    if li == 0:
        raise ContractError(f"no parameters found for block {name!r}")
    return out


def adapt(state: ModelState, raw, side: str) -> Tensor:
    """Residual-tanh adapter over raw embeddings; identity when disabled.

    Zero-initialized, so adapt(x) == x exactly at init for unit-norm x.
    """
    if side not in ("m", "r"):
        raise ContractError(f"adapter side must be 'm' or 'r', got {side!r}")
    x = raw if isinstance(raw, Tensor) else ad.constant(np.asarray(raw, dtype=np.float64))
    if x.data.ndim != 2 or x.data.shape[1] != state.config.d:
        raise ContractError(f"adapt expects [B, {state.config.d}] input, got {x.data.shape}")
    if not state.config.adapters_enabled:
        return x
    name = f"adapter_{side}"
    w, b = state.params[f"{name}.W"], state.params[f"{name}.b"]
    if state.adapters_frozen:
        w, b = ad.detach(w), ad.detach(b)
    return ad.l2_normalize(x + ad.tanh(ad.matmul(x, w) + b), axis=1)


def _mixture_heads(state: ModelState, prefix: str, x: Tensor):
    """Shared shape logic for prior/posterior heads.

    Returns (logits [B,K], weights [B,K], mu_bank [B,h*K], sigma_bank [B,h*K]).
    """
    logits = _apply_ffn(state, f"{prefix}_cat", x)
    weights = ad.softmax(logits, axis=1)
    mu = _apply_ffn(state, f"{prefix}_mu", x)
    sigma = ad.softplus(_apply_ffn(state, f"{prefix}_sigma", x)) + 1e-6
    return logits, weights, mu, sigma


def _bank_to_mixture(weights: Tensor, mu: Tensor, sigma: Tensor, h: int, k: int):
    comps = []
    for c in range(k):
        # columns of component c sit at stride K; narrow cannot express that,
        # so select via a constant one-hot instead
        onehot = np.zeros((1, k))
        onehot[0, c] = 1.0
        oh = ad.constant(np.repeat(onehot, mu.data.shape[0], axis=0))
        comps.append(GaussianParams(
            ad.select_components(mu, oh, h, k),
            ad.select_components(sigma, oh, h, k)))
    if k == 1:
        return comps[0]
    return MixtureParams(weights, comps)


@dataclass
class PriorOutput:
    logits: Tensor | None  # [B, K] pre-softmax, None for mcvae
    pi: Tensor | None      # [B, K] mixture weights
    dist: object           # GaussianParams | MixtureParams
    mu_bank: Tensor | None = None
    sigma_bank: Tensor | None = None


def prior_forward(state: ModelState, theta_m: Tensor) -> PriorOutput:
    cfg = state.config
    if cfg.variant == "matching":
        raise UnsupportedOpError("matching variant has no latent prior")
    b = theta_m.data.shape[0]
    if cfg.variant == "mcvae":
        mu = ad.constant(np.zeros((b, cfg.h)))
        sigma = ad.constant(np.ones((b, cfg.h)))
        return PriorOutput(logits=None, pi=None, dist=GaussianParams(mu, sigma))
    logits, pi, mu, sigma = _mixture_heads(state, "prior", theta_m)
    dist = _bank_to_mixture(pi, mu, sigma, cfg.h, cfg.K)
    return PriorOutput(logits=logits, pi=pi, dist=dist, mu_bank=mu, sigma_bank=sigma)


@dataclass
class PosteriorOutput:
    logits: Tensor | None
    rho: Tensor | None
    dist: object
    mu_bank: Tensor | None = None
    sigma_bank: Tensor | None = None


def posterior_forward(state: ModelState, theta_m: Tensor, theta_r: Tensor) -> PosteriorOutput:
    cfg = state.config
    if cfg.variant == "matching":
        raise UnsupportedOpError("matching variant has no posterior")
    if cfg.posterior_message_only:
        x = theta_m
    else:
        # low-rank projection of the reply side limits how much of theta_r
        # the posterior can leak into z
        proj = _apply_ffn(state, "r_proj", theta_r)
        x = ad.concat([theta_m, proj], axis=1)
    logits, rho, mu, sigma = _mixture_heads(state, "post", x)
    dist = _bank_to_mixture(rho, mu, sigma, cfg.h, cfg.K)
    return PosteriorOutput(logits=logits, rho=rho, dist=dist, mu_bank=mu, sigma_bank=sigma)


def generate(state: ModelState, theta_m: Tensor, z: Tensor) -> Tensor:
    """Decode latent + message into a unit-norm synthetic reply embedding."""
    cfg = state.config
    if not cfg.is_vae:
        raise UnsupportedOpError("matching variant has no generator")
    if z.data.ndim != 2 or z.data.shape[1] != cfg.h:
        raise ContractError(f"z must be [B, {cfg.h}], got {z.data.shape}")
    bm, bz = theta_m.data.shape[0], z.data.shape[0]
    if bm == 1 and bz > 1:
        theta_m = ad.constant(np.repeat(theta_m.data, bz, axis=0)) if not theta_m.requires_grad \
            else theta_m  # grads through tiling are only needed for B == Bz
    if theta_m.data.shape[0] != z.data.shape[0]:
        raise ContractError(f"batch mismatch: theta_m {theta_m.data.shape} vs z {z.data.shape}")
    out = _apply_ffn(state, "generator", ad.concat([z, theta_m], axis=1))
    return ad.l2_normalize(out, axis=1)


def classify_language(state: ModelState, prior: PriorOutput, z: Tensor | None = None) -> Tensor:
    """Language logits from the prior mixture; cgm-m with alignment only."""
    cfg = state.config
    if not cfg.uses_classifier:
        raise UnsupportedOpError("language classifier needs cgm-m with alignment enabled")
    if cfg.classifier_input == "pi":
        x = prior.pi
    elif cfg.classifier_input == "moments":
        k = cfg.K
        # average moment banks over components
        ones = ad.constant(np.ones((prior.mu_bank.data.shape[0], k)) / k)
        x = ad.concat([ad.select_components(prior.mu_bank, ones, cfg.h, k),
                       ad.select_components(prior.sigma_bank, ones, cfg.h, k)], axis=1)
    else:
        if z is None:
            raise ContractError("classifier_input='sample' needs a latent sample")
        x = z
    return _apply_ffn(state, "classifier", x)


# ---- checkpoint IO ----

def _config_to_json(config: ModelConfig) -> dict:
    return asdict(config)


def save_checkpoint(path, state: ModelState, step: int = 0, optimizer: dict | None = None,
                    rng_state: dict | None = None, extra: dict | None = None) -> None:
    """Binary checkpoint: json header + raw float64 blobs, deterministic bytes."""
    manifest = [(name, list(p.data.shape)) for name, p in state.params.items()]
    opt_manifest = {}
    blobs = [p.data for _, p in state.params.items()]
    if optimizer:
        for group in ("m", "v"):
            opt_manifest[group] = [(name, list(arr.shape)) for name, arr in optimizer[group].items()]
            blobs.extend(optimizer[group].values())
        opt_manifest["hypers"] = optimizer["hypers"]
        opt_manifest["step"] = optimizer["step"]
    header = {
        "config": _config_to_json(state.config),
        "step": step,
        "params": manifest,
        "optimizer": opt_manifest,
        "rng_state": rng_state,
        "adapters_frozen": state.adapters_frozen,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(raw)))
        f.write(raw)
        for blob in blobs:
            f.write(np.ascontiguousarray(blob, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (state, step, optimizer|None, rng_state|None, extra)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CKPT_MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file", offset=0)
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != CKPT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: corrupt header ({e})", offset=16)
    config = ModelConfig(**header["config"])
    state = init_state(config, seed=0)
    off = 16 + hlen

    def read_block(shape):
        nonlocal off
        n = int(np.prod(shape)) if shape else 1
        end = off + 8 * n
        if end > len(blob):
            raise DataFormatError(f"{path}: truncated blob", offset=off)
        arr = np.frombuffer(blob[off:end], dtype="<f8").reshape(shape).copy()
        off = end
        return arr

    arrays = {name: read_block(shape) for name, shape in header["params"]}
    state.load_param_arrays(arrays)
    if header.get("adapters_frozen"):
        state.freeze_adapters()
    optimizer = None
    if header["optimizer"]:
        optimizer = {"m": {}, "v": {},
                     "hypers": header["optimizer"]["hypers"],
                     "step": header["optimizer"]["step"]}
        for group in ("m", "v"):
            for name, shape in header["optimizer"][group]:
                optimizer[group][name] = read_block(shape)
    if off != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - off} trailing bytes", offset=off)
    return state, header["step"], optimizer, header.get("rng_state"), header.get("extra", {})
