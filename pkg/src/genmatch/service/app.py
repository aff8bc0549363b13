"""FastAPI application exposing the engine.

All engine errors surface as a JSON envelope {"error": {"code", "message"}}
whose code the CLI maps onto its exit codes: config problems (including
missing files and unknown ids) are "config", malformed binary inputs are
"data-format", numeric blowups are "divergence".
"""
from __future__ import annotations

import os
from dataclasses import asdict

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, models
from ..corpus import generate_synthetic, load_cgme, save_cgme, SyntheticCorpusSpec
from ..errors import (ConfigError, ContractError, DataFormatError, DivergenceError,
                      GenMatchError)
from ..evaluation import EvalReport, diff_reports, evaluate
from ..manifest import RunManifest
from ..prediction import build_all_response_sets, cross_lingual_predict
from ..training import (LATEST_CKPT, UNIVERSAL_CKPT, TrainConfig, lang_checkpoint_name,
                        pretrain_matching_then_freeze, train)
from . import schemas

ERROR_CODES = [
    (ConfigError, "config", 400),
    (DataFormatError, "data-format", 400),
    (DivergenceError, "divergence", 500),
    (ContractError, "contract", 500),
]


def _error_response(code: str, message: str, status: int) -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"error": {"code": code, "message": message}})


def _split_corpus(corpus, split, fractions, seed):
    if split == "all":
        return corpus
    parts = corpus.partition(fractions=tuple(fractions), seed=seed)
    if split not in parts:
        raise ConfigError(f"unknown split {split!r}, expected all/train/val/test")
    return parts[split]


def create_app() -> FastAPI:
    app = FastAPI(title="genmatch", version=__version__)
    app.state.models = {}
    app.state.next_model = 1

    @app.exception_handler(GenMatchError)
    async def engine_error(request: Request, exc: GenMatchError):
        for cls, code, status in ERROR_CODES:
            if isinstance(exc, cls):
                return _error_response(code, str(exc), status)
        return _error_response("engine", str(exc), 500)

    @app.exception_handler(OSError)
    async def unreadable_file(request: Request, exc: OSError):
        detail = f"{exc.filename}: {exc.strerror}" if exc.filename else str(exc)
        return _error_response("config", detail, 400)

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/corpus/generate", response_model=schemas.GenerateCorpusResponse)
    def corpus_generate(req: schemas.GenerateCorpusRequest):
        spec = SyntheticCorpusSpec(
            num_languages=req.num_languages,
            pairs_per_language=tuple(req.pairs_per_language),
            embedding_dim=req.embedding_dim,
            intents_per_language=req.intents_per_language,
            variants_per_intent=req.variants_per_intent,
            cluster_spread=req.cluster_spread,
            intent_scale=req.intent_scale,
            variant_scale=req.variant_scale,
            variant_share=req.variant_share,
            variant_skew=req.variant_skew,
            generic_variant_tokens=req.generic_variant_tokens,
            vocab_size=req.vocab_size,
            seed=req.seed)
        corpus = generate_synthetic(spec)
        save_cgme(corpus, req.out_path)
        return schemas.GenerateCorpusResponse(
            path=req.out_path, dim=corpus.dim, languages=corpus.languages,
            records=len(corpus))

    @app.post("/train", response_model=schemas.TrainResponse)
    def train_model(req: schemas.TrainRequest):
        corpus = load_cgme(req.corpus_path)
        parts = corpus.partition(fractions=tuple(req.partition_fractions),
                                 seed=req.partition_seed)
        mspec = req.model.model_dump()
        init_seed = mspec.pop("init_seed")
        cfg = models.ModelConfig(d=corpus.dim, num_languages=len(corpus.languages),
                                 **mspec).validated()
        state = models.init_state(cfg, seed=init_seed)
        tcfg = TrainConfig(**req.training.model_dump())
        sets = build_all_response_sets(parts["train"], threshold=req.response_threshold)

        if req.protocol not in ("standard", "pretrain"):
            raise ConfigError(f"unknown protocol {req.protocol!r}")
        os.makedirs(req.output_dir, exist_ok=True)
        manifest = RunManifest(
            model=dict(asdict(cfg), init_seed=init_seed),
            training=req.training.model_dump(),
            corpus={"path": req.corpus_path, "dim": corpus.dim,
                    "languages": corpus.languages, "records": len(corpus)},
            partition={"fractions": list(req.partition_fractions),
                       "seed": req.partition_seed},
            response_threshold=req.response_threshold,
            protocol=req.protocol)
        manifest.save(os.path.join(req.output_dir, "manifest.json"))

        history = os.path.join(req.output_dir, "history.jsonl")
        if req.protocol == "pretrain":
            pre = TrainConfig(**(req.pretrain or req.training).model_dump())
            _, result = pretrain_matching_then_freeze(
                state, parts["train"], parts["val"], pre, tcfg,
                response_sets=sets, history_path=history,
                checkpoint_dir=req.output_dir)
        else:
            result = train(state, parts["train"], parts["val"], tcfg,
                           response_sets=sets, history_path=history,
                           checkpoint_dir=req.output_dir, resume=req.resume)

        ckpts = {"latest": os.path.join(req.output_dir, LATEST_CKPT),
                 "best_universal": os.path.join(req.output_dir, UNIVERSAL_CKPT)}
        for lang in corpus.languages:
            ckpts[f"best_{lang}"] = os.path.join(req.output_dir, lang_checkpoint_name(lang))
        return schemas.TrainResponse(
            run_id=manifest.run_id(), output_dir=req.output_dir,
            steps_run=result.steps_run, final_mrr=result.final_mrr,
            ledger=result.ledger.metrics_json(), checkpoints=ckpts)

    @app.post("/models/load", response_model=schemas.LoadModelResponse)
    def load_model(req: schemas.LoadModelRequest):
        state, step, _, _, _ = models.load_checkpoint(req.checkpoint_path)
        corpus = load_cgme(req.response_corpus_path)
        if corpus.dim != state.config.d:
            raise ConfigError(f"response corpus dim {corpus.dim} vs model dim "
                              f"{state.config.d}")
        source = _split_corpus(corpus, req.partition, req.partition_fractions,
                               req.partition_seed)
        sets = build_all_response_sets(source, threshold=req.response_threshold)
        model_id = f"m{app.state.next_model}"
        app.state.next_model += 1
        app.state.models[model_id] = {"state": state, "sets": sets, "step": step}
        return schemas.LoadModelResponse(
            model_id=model_id, variant=state.config.variant, dim=state.config.d,
            step=step, languages=sorted(sets),
            response_set_sizes={lang: len(rs) for lang, rs in sets.items()})

    def _registry(model_id: str) -> dict:
        entry = app.state.models.get(model_id)
        if entry is None:
            raise ConfigError(f"unknown model id {model_id!r}; load a checkpoint first")
        return entry

    @app.post("/predict", response_model=schemas.PredictResponse)
    def predict(req: schemas.PredictRequest):
        entry = _registry(req.model_id)
        state = entry["state"]
        emb = np.asarray(req.embedding, dtype=np.float64)
        if emb.shape != (state.config.d,):
            raise ConfigError(f"embedding must have dim {state.config.d}, "
                              f"got {emb.shape}")
        rng = np.random.default_rng(req.seed)
        result = cross_lingual_predict(state, emb, req.lang, entry["sets"], rng,
                                       n_samples=req.n_samples,
                                       preselect_k=req.preselect_k)
        return schemas.PredictResponse(
            message_text=req.message_text, lang=req.lang,
            top3=[schemas.Suggestion(text=t, score=s) for t, s in result.top3],
            ranked=[schemas.Suggestion(text=t, score=s) for t, s in result.ranked],
            diagnostics=result.diagnostics)

    @app.post("/evaluate", response_model=schemas.EvaluateResponse)
    def evaluate_model(req: schemas.EvaluateRequest):
        entry = _registry(req.model_id)
        corpus = load_cgme(req.corpus_path)
        part = _split_corpus(corpus, req.split, req.partition_fractions,
                             req.partition_seed)
        report = evaluate(entry["state"], part, entry["sets"], seed=req.seed,
                          n_samples=req.n_samples, preselect_k=req.preselect_k,
                          bottom_n=req.bottom_n,
                          max_messages_per_language=req.max_messages_per_language)
        if req.out_path:
            report.save(req.out_path)
        return schemas.EvaluateResponse(report=report.to_json(), path=req.out_path)

    @app.post("/report/diff", response_model=schemas.DiffResponse)
    def report_diff(req: schemas.DiffRequest):
        def pick(inline, path, tag):
            if (inline is None) == (path is None):
                raise ConfigError(f"give exactly one of {tag} or {tag}_path")
            if inline is not None:
                return EvalReport.from_json(inline)
            return EvalReport.load(path)

        before = pick(req.before, req.before_path, "before")
        after = pick(req.after, req.after_path, "after")
        return schemas.DiffResponse(diff=diff_reports(before, after))

    return app
