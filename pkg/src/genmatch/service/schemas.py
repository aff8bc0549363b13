"""Request/response bodies for the HTTP service."""
from __future__ import annotations

from pydantic import BaseModel, Field


class ErrorBody(BaseModel):
    code: str
    message: str


class ErrorEnvelope(BaseModel):
    error: ErrorBody


class GenerateCorpusRequest(BaseModel):
    out_path: str
    num_languages: int = Field(ge=1)
    pairs_per_language: list[int]
    embedding_dim: int = Field(ge=1)
    intents_per_language: int = 8
    variants_per_intent: int = 3
    cluster_spread: float = 0.25
    intent_scale: float = 0.8
    variant_scale: float = 0.35
    variant_share: float = 0.0
    variant_skew: float = 0.0
    generic_variant_tokens: int = 0
    vocab_size: int = 60
    seed: int = 0


class GenerateCorpusResponse(BaseModel):
    path: str
    dim: int
    languages: list[str]
    records: int


class ModelSpec(BaseModel):
    """Model hyperparameters; embedding dim and language count come from the
    corpus, everything else defaults to the engine's standard settings."""

    variant: str
    h: int = 512
    K: int = 20
    r_proj_dim: int = 16
    num_prediction_samples: int = 1000
    preselect_k: int = 100
    lm_bias_weight: float = 0.0
    focal_alpha: float = 1.0
    multisample_k: int = 1
    adapters_enabled: bool = True
    alignment_enabled: bool = True
    classifier_input: str = "pi"
    posterior_message_only: bool = False
    prediction_kl: bool = True
    gmm_kl_exponent: str = "standard"
    gumbel_temperature: float = 1.0
    gumbel_final_temperature: float | None = None
    categorical_mode: str = "hard-st"
    kl_on_scaled: bool = False
    hsu_enabled: bool = True
    matching_regularizer: bool = True
    init_seed: int = 0


class TrainSpec(BaseModel):
    max_steps: int = Field(ge=1)
    peak_lr: float = 1e-5
    decay: float = 0.999
    warmup_steps: int = 1000
    batch_size: int = 256
    sampling: str = "uniform"
    seed: int = 0
    grad_clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 0
    val_messages_per_language: int = 0
    val_n_samples: int = 64
    val_preselect_k: int = 8


class TrainRequest(BaseModel):
    corpus_path: str
    output_dir: str
    model: ModelSpec
    training: TrainSpec
    partition_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    partition_seed: int = 0
    response_threshold: int = 0
    protocol: str = "standard"  # "standard" | "pretrain"
    pretrain: TrainSpec | None = None
    resume: bool = False


class TrainResponse(BaseModel):
    run_id: str
    output_dir: str
    steps_run: int
    final_mrr: dict[str, float]
    ledger: dict
    checkpoints: dict[str, str]


class LoadModelRequest(BaseModel):
    checkpoint_path: str
    response_corpus_path: str
    response_threshold: int = 20
    # which slice of the response corpus feeds the response sets
    partition: str = "all"  # "all" | "train" | "val" | "test"
    partition_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    partition_seed: int = 0


class LoadModelResponse(BaseModel):
    model_id: str
    variant: str
    dim: int
    step: int
    languages: list[str]
    response_set_sizes: dict[str, int]


class PredictRequest(BaseModel):
    model_id: str
    embedding: list[float]
    lang: str
    message_text: str = ""
    n_samples: int | None = None
    preselect_k: int | None = None
    seed: int = 0


class Suggestion(BaseModel):
    text: str
    score: float


class PredictResponse(BaseModel):
    message_text: str
    lang: str
    top3: list[Suggestion]
    ranked: list[Suggestion]
    diagnostics: dict


class EvaluateRequest(BaseModel):
    model_id: str
    corpus_path: str
    split: str = "all"  # "all" | "train" | "val" | "test"
    partition_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    partition_seed: int = 0
    seed: int = 0
    n_samples: int | None = None
    preselect_k: int | None = None
    bottom_n: int = 2
    max_messages_per_language: int = 0
    out_path: str | None = None


class EvaluateResponse(BaseModel):
    report: dict
    path: str | None = None


class DiffRequest(BaseModel):
    before: dict | None = None
    after: dict | None = None
    before_path: str | None = None
    after_path: str | None = None


class DiffResponse(BaseModel):
    diff: dict
