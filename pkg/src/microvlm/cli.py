"""Command-line entry point: ``microvlm <command> [flags]``.

Failures print one JSON object on stderr, e.g.
``{"code": 3, "error": "io", "message": "...", "type": "BadMagic"}``,
and exit with that code.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint, datagen, gradcheck, metrics, pipeline, synthetic
from .config import RunConfig, load_config
from .errors import (
    BadMagic,
    CheckpointIOError,
    ConfigError,
    EmptyImageDir,
    ImageFormatError,
    MalformedRecord,
    MicroVLMError,
    MockMiss,
    ShapeMismatchOnLoad,
)
from .fusion import classify, generate
from .tokenizer import assemble_prompt
from .vision import is_image_file, load_image

log = logging.getLogger("microvlm")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4, 5
_IO_ERRORS = (OSError, CheckpointIOError, BadMagic, ShapeMismatchOnLoad, ImageFormatError, MalformedRecord,
              EmptyImageDir, MockMiss)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(code: int, kind: str, exc) -> int:
    msg = " ".join(str(exc).split())
    print(json.dumps({"code": code, "error": kind, "message": msg, "type": type(exc).__name__}, sort_keys=True),
          file=sys.stderr)
    return code


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for spec in getattr(args, "set", None) or []:
        if "=" not in spec or "." not in spec.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {spec!r}")
        key, value = spec.split("=", 1)
        section, name = key.split(".", 1)
        cfg.set(section.strip(), name.strip(), value)
    return cfg


def _load_model(path, rank=None):
    model, meta = checkpoint.load_checkpoint(path)
    if rank is not None:
        model.set_rank(rank)
    return model, meta


def _encode_one(model, image_path):
    return model.encode_images([load_image(image_path)])[0]


# ------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    out = Path(args.out)
    rows = synthetic.write_corpus(out, size=args.size, indices=args.indices)
    styles = tuple(args.styles.split(","))
    n = synthetic.write_mock_answers(rows, out, args.mock, styles) if args.mock else 0
    print(json.dumps({"images": len(rows), "mock_answers": n}))
    return EXIT_OK


def cmd_datagen(args) -> int:
    cfg = _run_config(args)
    if args.endpoint:
        cfg.set("teacher", "endpoint", args.endpoint)
    if args.parallel is not None:
        cfg.set("teacher", "parallel", args.parallel)
    if args.styles:
        cfg.set("teacher", "answer_styles", args.styles)
    cfg.echo()
    t = cfg.teacher_config()
    if not args.mock and not t.endpoint:
        raise UsageError("datagen needs --mock DIR or --endpoint URL")
    client = datagen.TeacherClient(endpoint=t.endpoint, model=t.model, api_key_env=t.api_key_env,
                                   timeout=t.timeout, max_retries=t.max_retries, backoff=t.backoff,
                                   mock_dir=args.mock)
    fractions = tuple(float(x) for x in args.fractions.split(","))
    if len(fractions) != 3:
        raise UsageError("--fractions expects three comma-separated numbers")
    styles = tuple(s.strip() for s in t.answer_styles.split(","))
    if any(s not in datagen.STYLES for s in styles):
        raise ConfigError(f"answer_styles must be drawn from {datagen.STYLES}")
    counts = datagen.generate_dataset(args.images, client, args.out, fractions, args.seed, styles, t.parallel)
    counts["retries"] = client.retries
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"), ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            cfg.set("train", key, value)
    samples = datagen.load_samples(args.data)
    vocab_size = len(pipeline.dataset_vocab(samples))
    cfg.echo(vocab_size)
    tcfg = cfg.train_config()
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        model, result, _ = pipeline.fit_dataset(samples, Path(args.data).parent, cfg.fusion_config,
                                                cfg.vision_config(), tcfg, log_file=log_fh)
    finally:
        if log_fh:
            log_fh.close()
    checkpoint.save_checkpoint(model, args.out, {"train_config": tcfg.to_dict(), "best_epoch": result.best_epoch})
    print(json.dumps({"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
                      "epochs_run": len(result.history), "stopped_early": result.stopped_early}, sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = _load_model(args.ckpt)
    samples = [s for s in datagen.load_samples(args.data) if args.split == "all" or s.split == args.split]
    if not samples:
        raise MalformedRecord(f"no records in split {args.split!r}")
    pairs = pipeline.predict_samples(model, samples, Path(args.data).parent, args.rank, args.max_new)
    with open(args.out, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p, sort_keys=True, ensure_ascii=False) + "\n")
    print(json.dumps({"pairs": len(pairs)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    report = metrics.evaluate_corpus(args.pairs)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.table())
    return EXIT_OK


def _answer(args, question) -> int:
    model, _ = _load_model(args.ckpt, args.rank)
    states = _encode_one(model, args.image)
    prompt = assemble_prompt(model.vocab, args.description or "", question)
    text, _ = generate(model, prompt, states, args.max_new)
    print(text)
    return EXIT_OK


def cmd_caption(args) -> int:
    return _answer(args, args.question or synthetic.CAPTION_QUESTION)


def cmd_vqa(args) -> int:
    return _answer(args, args.question)


def cmd_classify(args) -> int:
    model, _ = _load_model(args.ckpt, args.rank)
    labels = [x.strip() for x in args.labels.split(",") if x.strip()]
    states = _encode_one(model, args.image)
    ranked = classify(model, states, labels, args.question, args.description or "")
    for label, score in ranked[: args.topk or len(ranked)]:
        print(f"{label}\t{score:.6f}")
    return EXIT_OK


def cmd_sample_shots(args) -> int:
    model, _ = _load_model(args.ckpt)
    root = Path(args.corpus)
    paths = sorted(p for p in root.rglob("*") if p.is_file() and is_image_file(p))
    if not paths:
        raise EmptyImageDir(f"no images under {root}")
    target_path = Path(args.image).resolve()
    exclude = next((i for i, p in enumerate(paths) if p.resolve() == target_path), None)
    corpus = model.encode_images([load_image(p) for p in paths])[:, 0]
    target = _encode_one(model, args.image)[0]
    if args.strategy == "topk":
        idx = datagen.select_few_shot(target, corpus, args.k, exclude)
    else:
        labels = [p.relative_to(root).parts[0] if len(p.relative_to(root).parts) > 1 else None for p in paths]
        if any(lab is None for lab in labels):
            labels = None
        target_label = args.label or (labels[exclude] if labels and exclude is not None else None)
        select = datagen.select_intra_dissimilar if args.strategy == "intra" else datagen.select_inter_similar
        idx = select(target, target_label, corpus, labels, args.k, exclude)
    for i in idx:
        print(paths[i])
    return EXIT_OK


def cmd_quantize(args) -> int:
    model, meta = _load_model(args.ckpt)
    model.quantize()
    model.cfg.quantize_base = True
    extra = {k: v for k, v in meta.items() if k not in checkpoint.model_metadata(model)}
    checkpoint.save_checkpoint(model, args.out, extra)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results, seconds = gradcheck.run_all(args.seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'} {sum(r.passed for r in results)}/{len(results)} checks")
    log.info("gradient checks took %.2fs", seconds)
    return EXIT_OK if ok else EXIT_RUNTIME


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="microvlm", description="Small multimodal assistant with dynamic-rank adapters.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")

    def infer_flags(p, question_required=False):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--image", required=True)
        p.add_argument("--question", required=question_required)
        p.add_argument("--description", default="")
        p.add_argument("--max-new", type=int, default=48)
        p.add_argument("--rank", type=int, help="adapter rank to deploy at (default r_max)")

    p = sub.add_parser("synth", help="write the synthetic texture corpus and mock teacher answers")
    p.add_argument("--out", required=True)
    p.add_argument("--mock")
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--indices", type=lambda s: [int(x) for x in s.split(",")])
    p.add_argument("--styles", default="long")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("datagen", help="query the teacher for every template of every image")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--mock", help="directory of content-addressed answers")
    src.add_argument("--endpoint", help="chat-completions URL")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--parallel", type=int)
    p.add_argument("--styles", help="comma list of long,short")
    config_flags(p)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="instruction-tune on a JSONL dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--log", help="per-epoch JSONL training log")
    config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="answer dataset questions, writing metric pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--rank", type=int)
    p.add_argument("--max-new", type=int, default=64)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="BLEU/ROUGE/METEOR over a pair file")
    p.add_argument("--pairs", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("caption", help="describe an image")
    infer_flags(p)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("vqa", help="answer a question about an image")
    infer_flags(p, question_required=True)
    p.set_defaults(func=cmd_vqa)

    p = sub.add_parser("classify", help="rank candidate labels for an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True, help="comma-separated labels")
    p.add_argument("--topk", type=int)
    p.add_argument("--question", default=synthetic.CAPTION_QUESTION)
    p.add_argument("--description", default="")
    p.add_argument("--rank", type=int)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("sample-shots", help="pick demonstration images by cls-embedding similarity")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--corpus", required=True, help="image directory; sub-directories are classes")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--strategy", choices=("topk", "intra", "inter"), default="topk")
    p.add_argument("--label", help="class of the target when it is outside the corpus")
    p.set_defaults(func=cmd_sample_shots)

    p = sub.add_parser("quantize", help="rewrite a checkpoint with int8 base weights")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except _IO_ERRORS as exc:
        return _fail(EXIT_IO, "io", exc)
    except (MicroVLMError, ValueError, FloatingPointError) as exc:
        return _fail(EXIT_RUNTIME, "runtime", exc)


if __name__ == "__main__":
    sys.exit(main())
