"""Command-line entry points: ``dst <verb> [options]``.

Model and training settings come from dataclass defaults, then an optional
``--config`` key=value file, then ``--set key=value`` flags and the dedicated
flags of each verb, in that order of precedence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Iterator, TextIO

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, parse_key_values
from .data import TASKS, Vocabulary, generate_task, read_parallel, write_parallel
from .evaluate import evaluate, plot_curve, write_reports
from .inference import translate_stream
from .model import DST, EOS, SSA, UNK, WRITE, ModelConfig, make_batch
from .training import (STAGE_FINETUNE, STAGE_PRETRAIN, TrainConfig, objective, source_masses,
                       train_stage)

log = logging.getLogger("dst")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _settings(args) -> dict[str, str]:
    values: dict[str, str] = {}
    if args.config:
        values.update(parse_key_values(Path(args.config).read_text(encoding="utf-8")))
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    known = {f.name for f in dataclasses.fields(ModelConfig)} | {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise SystemExit(f"unknown setting(s): {', '.join(unknown)}")
    return values


def _model_config(values: dict, **fixed) -> ModelConfig:
    return ModelConfig.from_dict({**values, **{k: v for k, v in fixed.items() if v is not None}})


def _load_model(path: str, values: dict) -> DST:
    ckpt = Checkpoint.load(path)
    overrides = {k: v for k, v in values.items() if k in ("delta_infer", "allocation_mode", "decision_layers")}
    config = ModelConfig.from_dict({**ckpt.config.to_dict(), **overrides}) if overrides else None
    return ckpt.to_model(config)


def _corpus(args, vocab: Vocabulary):
    return read_parallel(args.src, args.tgt, vocab, getattr(args, "align", None))


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    values = _settings(args)
    seed = int(values.get("seed", 1))
    vocab = Vocabulary.synthetic(args.vocab)
    corpus = generate_task(args.task, args.vocab, (args.min_len, args.max_len), args.count,
                           seed, k=args.k, w=args.w)
    # generated ids are 4 + content index, matching the synthetic vocabulary order
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_parallel(corpus, vocab, f"{out}.src", f"{out}.tgt", f"{out}.align")
    vocab.save(f"{out}.vocab")
    print(f"wrote {len(corpus)} pairs to {out}.{{src,tgt,align,vocab}}")
    return 0


def _train(args, stage: str) -> int:
    values = _settings(args)
    vocab = Vocabulary.load(args.vocab)
    corpus = _corpus(args, vocab)
    init = None
    if stage == STAGE_FINETUNE:
        init = Checkpoint.load(args.init)
        mc = ModelConfig.from_dict({**init.config.to_dict(),
                                    **{k: v for k, v in values.items() if k in ModelConfig.__dataclass_fields__}})
    else:
        mc = _model_config(values, vocab_size=len(vocab))
    tc = TrainConfig.from_dict({**values, **({"steps": args.steps} if args.steps else {})})

    def report(rec):
        if rec["update"] % args.print_every == 0:
            log.info("update %d total %.4f simt %.4f", rec["update"], rec["total"], rec["l_simt"])

    ckpt, _ = train_stage(mc, tc, corpus.training_pairs(), stage, init=init,
                          log_path=args.log, callback=report)
    ckpt.save(args.out)
    print(f"saved {stage} checkpoint to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    return _train(args, STAGE_PRETRAIN)


def cmd_finetune(args) -> int:
    return _train(args, STAGE_FINETUNE)


def _delta(args, model: DST) -> float:
    return args.delta if args.delta is not None else model.config.delta_infer


def cmd_translate(args) -> int:
    values = _settings(args)
    model = _load_model(args.ckpt, values)
    vocab = Vocabulary.load(args.vocab)
    delta = _delta(args, model)
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    trace = open(args.trace, "w", encoding="utf-8") if args.trace else None
    try:
        for line in Path(args.input).read_text(encoding="utf-8").splitlines():
            src = vocab.encode(line.split())
            if not src:
                out.write("\n")
                continue
            res = translate_stream(model, src, delta, max_len=min(2 * len(src) + 10,
                                                                   model.config.max_target_len - 1))
            out.write(" ".join(vocab.decode(res.tokens)) + "\n")
            if trace:
                trace.write(json.dumps({"g": res.g, "J": len(src), "truncated": res.truncated}) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
        if trace:
            trace.close()
    return 0


class TokenReader:
    """Pulls whitespace-separated tokens from a text stream as they arrive.

    ``sentence()`` yields tokens until a newline; ``eof`` is set once the
    stream ends.
    """

    def __init__(self, stream: TextIO):
        self.stream = stream
        self.eof = False

    def sentence(self) -> Iterator[str]:
        word = []
        while True:
            ch = self.stream.read(1)
            if ch == "":
                self.eof = True
            if ch == "" or ch.isspace():
                if word:
                    yield "".join(word)
                    word = []
                if ch in ("", "\n"):
                    return
                continue
            word.append(ch)


def cmd_stream(args) -> int:
    values = _settings(args)
    model = _load_model(args.ckpt, values)
    vocab = Vocabulary.load(args.vocab)
    delta = _delta(args, model)
    reader = TokenReader(sys.stdin)
    trace = open(args.trace, "w", encoding="utf-8") if args.trace else None
    sent = 0
    try:
        while not reader.eof:
            tokens = (vocab.index.get(w, UNK) for w in reader.sentence())

            def on_event(event, sent=sent):
                if event["action"] == WRITE and event["token"] != EOS:
                    sys.stdout.write(vocab.tokens[event["token"]] + " ")
                    sys.stdout.flush()
                if trace:
                    trace.write(json.dumps({"sentence": sent, **event}) + "\n")

            try:
                res = translate_stream(model, tokens, delta, max_len=model.config.max_target_len - 1,
                                       on_event=on_event)
            except ValueError:
                continue  # blank line
            for _ in tokens:
                pass  # the model may finish before the line does
            sys.stdout.write("\n")
            sys.stdout.flush()
            if trace:
                trace.write(json.dumps({"sentence": sent, "g": res.g, "J": res.source_read}) + "\n")
                trace.flush()
            sent += 1
    finally:
        if trace:
            trace.close()
    return 0


def cmd_evaluate(args) -> int:
    values = _settings(args)
    model = _load_model(args.ckpt, values)
    vocab = Vocabulary.load(args.vocab)
    corpus = _corpus(args, vocab)
    if args.limit:
        corpus = corpus.subset(0, args.limit)
    deltas = [float(d) for d in args.deltas.split(",")]
    reports = evaluate(model, corpus, deltas)
    for r in reports:
        print(f"delta={r.delta_infer:g} AL={r.AL:.3f} BLEU={r.BLEU:.2f} HR={r.HR:.3f}")
    if args.out:
        write_reports(reports, args.out)
    if args.plot:
        plot_curve(reports, args.plot)
    return 0


def cmd_grad_check(args) -> int:
    values = _settings(args)
    seed = int(values.get("seed", 1))
    mc = _model_config({**values, "dtype": "float64"}, layers=args.layers, model_dim=args.dim,
                       ffn_dim=2 * args.dim, decision_layers=min(2, args.layers), vocab_size=12)
    model = DST(mc)
    rng = np.random.default_rng(seed)
    pairs = [([int(t) for t in rng.integers(4, 12, size=args.length - 1)] + [EOS],
              [int(t) for t in rng.integers(4, 12, size=args.length - 1)] + [EOS])]
    batch = make_batch(pairs)
    tc = TrainConfig.from_dict(values)
    stage = STAGE_PRETRAIN if args.stage == "pretrain" else STAGE_FINETUNE
    with T.no_grad():
        betas = source_masses(model.forward(batch, SSA), batch)
    err = T.grad_check(lambda: objective(model, batch, stage, tc, None, betas).total,
                       model.parameters())
    ok = err < args.tol
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAIL'}, tolerance {args.tol:g})")
    return 0 if ok else 1


def cmd_dump_attention(args) -> int:
    values = _settings(args)
    model = _load_model(args.ckpt, values)
    vocab = Vocabulary.load(args.vocab)
    src = vocab.encode(args.source.split()) + [EOS]
    tgt = vocab.encode(args.target.split()) + [EOS]
    with T.no_grad():
        out = model.forward(make_batch([(src, tgt)]), SSA)
    with open(args.out, "w", encoding="utf-8") as fh:
        for n, rec in enumerate(out.layers):
            mats = {"alpha_s": rec.alpha_s[0], "alpha_t": rec.alpha_t[0]}
            if rec.p is not None:
                mats = {"p": rec.p.data[0], **mats}
            for name, mat in mats.items():
                fh.write(json.dumps({"layer": n, "name": name,
                                     "shape": list(np.shape(mat)),
                                     "values": np.asarray(mat).tolist()}) + "\n")
    print(f"wrote {len(out.layers)} layers to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dst", description="Streaming translation toolkit.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic parallel corpus")
    p.add_argument("--task", choices=TASKS, default="copy")
    p.add_argument("--vocab", type=int, default=20, help="content vocabulary size")
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--max-len", type=int, default=15)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--k", type=int, default=3, help="delay for delayed_copy")
    p.add_argument("--w", type=int, default=2, help="block width for local_reorder")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_gen_data)

    def corpus_args(p, align=False):
        p.add_argument("--src", required=True)
        p.add_argument("--tgt", required=True)
        p.add_argument("--vocab", required=True)
        if align:
            p.add_argument("--align")

    for verb, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(verb, parents=[common], help=f"{verb} stage")
        corpus_args(p)
        if verb == "finetune":
            p.add_argument("--init", required=True, help="pretrained checkpoint")
        p.add_argument("--steps", type=int)
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--log", help="JSON-lines loss log")
        p.add_argument("--print-every", type=int, default=100)
        p.set_defaults(func=func)

    p = sub.add_parser("translate", parents=[common], help="stream-decode every line of a file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--trace", help="JSON-lines read trace per sentence")
    p.add_argument("--delta", type=float)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("stream", parents=[common], help="live decoding from stdin")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--trace", help="JSON-lines decisions and traces")
    p.add_argument("--delta", type=float)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("evaluate", parents=[common], help="AL/BLEU/HR over thresholds")
    p.add_argument("--ckpt", required=True)
    corpus_args(p, align=True)
    p.add_argument("--deltas", default="0.2,0.35,0.5,0.65,0.8")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", help="report JSON")
    p.add_argument("--plot", help="BLEU-vs-AL image")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the loss")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--length", type=int, default=4)
    p.add_argument("--stage", choices=("pretrain", "finetune"), default="finetune")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump-attention", parents=[common], help="write p/alpha matrices as JSON-lines")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--source", required=True, help="whitespace-tokenised source")
    p.add_argument("--target", required=True, help="whitespace-tokenised target")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
