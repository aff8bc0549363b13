"""Command-line client for the engine's HTTP service.

Every data subcommand drives the service API. By default each invocation
spins up an in-process app instance; --server points the same requests at a
running instance instead. Exit codes: 0 success, 2 configuration problems,
3 malformed data files, 4 numeric divergence, 1 anything else.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import httpx

from . import __version__
from .corpus import load_cgme
from .errors import DataFormatError, GenMatchError
from .service import create_app

EXIT_BY_CODE = {"config": 2, "data-format": 3, "divergence": 4}


class ServiceError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _client(args) -> httpx.AsyncClient:
    if args.server:
        return httpx.AsyncClient(base_url=args.server, timeout=None)
    return httpx.AsyncClient(transport=httpx.ASGITransport(app=create_app()),
                             base_url="http://genmatch", timeout=None)


async def _call(client: httpx.AsyncClient, path: str, payload: dict | None = None,
                method: str = "POST") -> dict:
    resp = await client.request(method, path, json=payload)
    if resp.status_code >= 400:
        try:
            err = resp.json()["error"]
            raise ServiceError(err["code"], err["message"])
        except (KeyError, ValueError):
            raise ServiceError("http", f"{resp.status_code}: {resp.text[:500]}")
    return resp.json()


def _emit(obj, out_path: str | None):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if out_path:
        with open(out_path, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _csv_ints(raw: str) -> list:
    return [int(x) for x in raw.split(",") if x.strip()]


def _csv_floats(raw: str) -> list:
    return [float(x) for x in raw.split(",") if x.strip()]


def _load_toml(path: str) -> dict:
    with open(path, "rb") as f:
        try:
            return tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise DataFormatError(f"{path}: invalid TOML ({e})")


def _override(base: dict, updates: dict) -> dict:
    out = dict(base)
    for k, v in updates.items():
        if v is not None:
            out[k] = v
    return out


async def cmd_gen_synth(args) -> int:
    payload = {"out_path": args.out, "num_languages": args.languages,
               "pairs_per_language": _csv_ints(args.pairs),
               "embedding_dim": args.dim,
               "intents_per_language": args.intents,
               "variants_per_intent": args.variants,
               "cluster_spread": args.cluster_spread,
               "intent_scale": args.intent_scale,
               "variant_scale": args.variant_scale,
               "variant_share": args.variant_share,
               "variant_skew": args.variant_skew,
               "generic_variant_tokens": args.generic_variant_tokens,
               "vocab_size": args.vocab_size, "seed": args.seed}
    async with _client(args) as client:
        data = await _call(client, "/corpus/generate", payload)
    _emit(data, None)
    return 0


async def cmd_train(args) -> int:
    toml_cfg = _load_toml(args.config) if args.config else {}
    model = _override(toml_cfg.get("model", {}), {
        "variant": args.variant, "h": args.h, "K": args.K,
        "r_proj_dim": args.r_proj_dim, "focal_alpha": args.focal_alpha,
        "multisample_k": args.multisample_k,
        "num_prediction_samples": args.prediction_samples,
        "preselect_k": args.preselect_k, "lm_bias_weight": args.lm_bias_weight,
        "categorical_mode": args.categorical_mode, "init_seed": args.init_seed})
    training = _override(toml_cfg.get("training", {}), {
        "max_steps": args.steps, "peak_lr": args.peak_lr, "decay": args.decay,
        "warmup_steps": args.warmup, "batch_size": args.batch_size,
        "sampling": args.sampling, "seed": args.seed,
        "eval_every": args.eval_every,
        "val_messages_per_language": args.val_messages,
        "val_n_samples": args.val_samples,
        "val_preselect_k": args.val_preselect})
    if "variant" not in model:
        raise ServiceError("config", "model variant is required (--variant or [model] in --config)")
    if "max_steps" not in training:
        raise ServiceError("config", "step count is required (--steps or [training] in --config)")
    payload = {"corpus_path": args.corpus, "output_dir": args.out,
               "model": model, "training": training,
               "response_threshold": args.threshold if args.threshold is not None
               else toml_cfg.get("response_threshold", 0),
               "partition_seed": args.partition_seed,
               "protocol": args.protocol or toml_cfg.get("protocol", "standard"),
               "resume": args.resume}
    if args.fractions:
        payload["partition_fractions"] = _csv_floats(args.fractions)
    if "pretrain" in toml_cfg:
        payload["pretrain"] = toml_cfg["pretrain"]
    async with _client(args) as client:
        data = await _call(client, "/train", payload)
    _emit(data, args.report_out)
    return 0


async def _load_model(client, args, partition: str) -> dict:
    return await _call(client, "/models/load", {
        "checkpoint_path": args.checkpoint,
        "response_corpus_path": args.responses,
        "response_threshold": args.threshold,
        "partition": partition,
        "partition_fractions": _csv_floats(args.fractions) if args.fractions
        else [0.8, 0.1, 0.1],
        "partition_seed": args.partition_seed})


async def cmd_predict(args) -> int:
    messages = load_cgme(args.input)
    lines = []
    async with _client(args) as client:
        loaded = await _load_model(client, args, args.responses_partition)
        for i, pair in enumerate(messages.pairs):
            if pair.reply_only:
                raise ServiceError("config",
                                   f"input record {i} has no message embedding")
            payload = {"model_id": loaded["model_id"],
                       "embedding": [float(x) for x in pair.theta_m],
                       "lang": args.lang or pair.lang,
                       "message_text": pair.message_text,
                       "n_samples": args.n_samples,
                       "preselect_k": args.preselect_k, "seed": args.seed + i}
            data = await _call(client, "/predict", payload)
            lines.append(json.dumps(data, sort_keys=True))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


async def cmd_eval(args) -> int:
    async with _client(args) as client:
        loaded = await _load_model(client, args, args.responses_partition)
        payload = {"model_id": loaded["model_id"], "corpus_path": args.corpus,
                   "split": args.split, "partition_seed": args.partition_seed,
                   "seed": args.seed, "n_samples": args.n_samples,
                   "preselect_k": args.preselect_k, "bottom_n": args.bottom_n,
                   "max_messages_per_language": args.max_messages,
                   "out_path": args.out}
        if args.fractions:
            payload["partition_fractions"] = _csv_floats(args.fractions)
        data = await _call(client, "/evaluate", payload)
    if not args.out:
        _emit(data["report"], None)
    return 0


async def cmd_report_diff(args) -> int:
    def read(path):
        with open(path) as f:
            try:
                return json.load(f)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}: not a report ({e})")

    async with _client(args) as client:
        data = await _call(client, "/report/diff",
                           {"before": read(args.before), "after": read(args.after)})
    _emit(data["diff"], args.out)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--server", default=None,
                        help="base URL of a running service (default: in-process)")

    p = argparse.ArgumentParser(prog="genmatch",
                                description="generative-matching reply suggestion engine")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", parents=[common],
                       help="generate a synthetic multilingual corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--languages", type=int, required=True)
    g.add_argument("--pairs", required=True, help="per-language pair counts, comma separated")
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--intents", type=int, default=8)
    g.add_argument("--variants", type=int, default=3)
    g.add_argument("--cluster-spread", type=float, default=0.25)
    g.add_argument("--intent-scale", type=float, default=0.8)
    g.add_argument("--variant-scale", type=float, default=0.35)
    g.add_argument("--variant-share", type=float, default=0.0)
    g.add_argument("--variant-skew", type=float, default=0.0)
    g.add_argument("--generic-variant-tokens", type=int, default=0)
    g.add_argument("--vocab-size", type=int, default=60)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(handler=cmd_gen_synth)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True, help="output directory for checkpoints")
    t.add_argument("--config", help="TOML file with [model]/[training]/[pretrain] tables")
    t.add_argument("--variant", choices=["matching", "mcvae", "cgm", "cgm-m"])
    t.add_argument("--h", type=int)
    t.add_argument("--K", type=int)
    t.add_argument("--r-proj-dim", type=int)
    t.add_argument("--focal-alpha", type=float)
    t.add_argument("--multisample-k", type=int)
    t.add_argument("--prediction-samples", type=int)
    t.add_argument("--preselect-k", type=int)
    t.add_argument("--lm-bias-weight", type=float)
    t.add_argument("--categorical-mode", choices=["hard-st", "soft", "detached"])
    t.add_argument("--init-seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--peak-lr", type=float)
    t.add_argument("--decay", type=float)
    t.add_argument("--warmup", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--sampling", choices=["uniform", "proportional"])
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--val-messages", type=int)
    t.add_argument("--val-samples", type=int)
    t.add_argument("--val-preselect", type=int)
    t.add_argument("--threshold", type=int, help="response-set frequency threshold")
    t.add_argument("--fractions", help="train,val,test fractions")
    t.add_argument("--partition-seed", type=int, default=0)
    t.add_argument("--protocol", choices=["standard", "pretrain"])
    t.add_argument("--resume", action="store_true")
    t.add_argument("--report-out", help="write the train summary JSON here instead of stdout")
    t.set_defaults(handler=cmd_train)

    def model_source_args(sp, default_partition):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--responses", required=True,
                        help="corpus file feeding the response sets")
        sp.add_argument("--threshold", type=int, default=20)
        sp.add_argument("--responses-partition", default=default_partition,
                        choices=["all", "train", "val", "test"])
        sp.add_argument("--fractions", help="train,val,test fractions")
        sp.add_argument("--partition-seed", type=int, default=0)

    pr = sub.add_parser("predict", parents=[common],
                        help="rank replies for every message in a corpus file")
    model_source_args(pr, "all")
    pr.add_argument("--input", required=True, help="corpus file with the messages to answer")
    pr.add_argument("--lang", help="target response-set language (default: each record's own)")
    pr.add_argument("--n-samples", type=int)
    pr.add_argument("--preselect-k", type=int)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", help="write JSON lines here instead of stdout")
    pr.set_defaults(handler=cmd_predict)

    ev = sub.add_parser("eval", parents=[common], help="score a model on a corpus split")
    model_source_args(ev, "train")
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--split", default="test", choices=["all", "train", "val", "test"])
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--n-samples", type=int)
    ev.add_argument("--preselect-k", type=int)
    ev.add_argument("--bottom-n", type=int, default=2)
    ev.add_argument("--max-messages", type=int, default=0)
    ev.add_argument("--out", help="write the report JSON here instead of stdout")
    ev.set_defaults(handler=cmd_eval)

    rd = sub.add_parser("report-diff", parents=[common],
                        help="percent change between two evaluation reports")
    rd.add_argument("--before", required=True)
    rd.add_argument("--after", required=True)
    rd.add_argument("--out")
    rd.set_defaults(handler=cmd_report_diff)

    sv = sub.add_parser("serve", help="run the HTTP service")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8000)
    sv.set_defaults(handler=cmd_serve)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "serve":
            return args.handler(args)
        return asyncio.run(args.handler(args))
    except ServiceError as e:
        sys.stderr.write(f"error ({e.code}): {e}\n")
        return EXIT_BY_CODE.get(e.code, 1)
    except GenMatchError as e:
        sys.stderr.write(f"error: {e}\n")
        return getattr(e, "exit_code", 1)
    except OSError as e:
        detail = f"{e.filename}: {e.strerror}" if e.filename else str(e)
        sys.stderr.write(f"error: {detail}\n")
        return 2
    except httpx.HTTPError as e:
        sys.stderr.write(f"error: cannot reach service: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
