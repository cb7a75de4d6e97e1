"""Command-line interface.

Subcommands: ``parse`` (graph validation/simplification dump), ``train``,
``generate``, ``eval``, ``gradcheck``, ``report``.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
invalid inputs, bad config values), 3 numeric failure (non-finite loss,
gradient check above tolerance).

Configuration is a JSON file with optional sections ``model``
(EncoderConfig fields), ``train`` (TrainConfig fields), ``decode``
(DecodingConfig fields), and ``data`` (``min_freq``).  Explicit CLI
flags override file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, amr
from .autodiff import grad_check
from .data import (
    Vocab,
    build_vocab,
    detokenize,
    encode_examples,
    ingest_dialogues,
    tokenize,
)
from .decoder import DecodingConfig, generate
from .encoders import ABLATIONS, EncoderConfig
from .metrics import score_corpus
from .model import init_params
from .report import format_table, render_figures, write_report
from .training import (
    NonFiniteLoss,
    TrainConfig,
    batch_loss,
    load_checkpoint,
    train,
)

_CONFIG_SECTIONS = {"model", "train", "decode", "data"}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    config = json.loads(Path(path).read_text())
    if not isinstance(config, dict):
        raise ValueError("config file must hold a JSON object")
    unknown = set(config) - _CONFIG_SECTIONS
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return config


def _overrides(**pairs) -> dict:
    return {key: value for key, value in pairs.items() if value is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amrdia",
        description="Graph-augmented medical dialogue generation toolkit.",
    )
    parser.add_argument("--version", action="version", version=f"amrdia {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="validate, simplify, and linearize graphs")
    p.add_argument("--in", dest="in_path", required=True, metavar="JSONL")
    p.add_argument("--out", required=True, metavar="TXT")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", metavar="JSON")
    p.add_argument("--data", required=True, metavar="JSONL")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--min-freq", type=int)
    p.add_argument(
        "--resume",
        action="store_true",
        help="continue from OUT/last.ckpt",
    )

    p = sub.add_parser("generate", help="decode responses for a corpus")
    p.add_argument("--ckpt", required=True, metavar="FILE")
    p.add_argument("--data", required=True, metavar="JSONL")
    p.add_argument("--out", required=True, metavar="TXT")
    p.add_argument("--beam", type=int, default=1, metavar="W")
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--length-penalty", type=float, default=0.0)
    p.add_argument(
        "--refs-out",
        metavar="TXT",
        help="also write the gold responses, one per line",
    )

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("--preds", required=True, metavar="TXT")
    p.add_argument("--refs", required=True, metavar="TXT")
    p.add_argument("--out", required=True, metavar="TXT")
    p.add_argument("--system", default="amrdia")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config", metavar="JSON")

    p = sub.add_parser("report", help="render figures from score/loss records")
    p.add_argument("--scores", required=True, metavar="JSONL")
    p.add_argument("--losses", metavar="JSONL")
    p.add_argument("--out-dir", required=True, metavar="DIR")

    return parser


def _report_skips(skipped) -> None:
    for line_no, reason in skipped:
        print(f"skipped line {line_no}: {reason}", file=sys.stderr)


def cmd_parse(args) -> int:
    result = ingest_dialogues(args.in_path)
    _report_skips(result.skipped)
    blocks = []
    for example in result.examples:
        graph = amr.simplify(example.graph)
        blocks.append(
            f"# {example.example_id}\n"
            f"{amr.serialize_penman(graph)}\n"
            f"# tokens: {' '.join(amr.linearize(graph))}\n"
        )
    Path(args.out).write_text("\n".join(blocks))
    print(
        f"parsed {len(result.examples)} examples"
        f" ({len(result.skipped)} skipped) -> {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    enc_cfg = EncoderConfig(**config.get("model", {}))
    train_cfg = TrainConfig(
        **{
            **config.get("train", {}),
            **_overrides(
                max_epochs=args.epochs,
                batch_size=args.batch_size,
                learning_rate=args.lr,
                seed=args.seed,
                ablation=args.ablation,
            ),
        }
    )
    min_freq = (
        args.min_freq
        if args.min_freq is not None
        else config.get("data", {}).get("min_freq", 1)
    )

    result = ingest_dialogues(args.data)
    _report_skips(result.skipped)

    resume_from = None
    if args.resume:
        resume_from = load_checkpoint(Path(args.out) / "last.ckpt")
        vocab, rel_vocab = resume_from.vocab, resume_from.rel_vocab
    else:
        vocab, rel_vocab = build_vocab(result.examples, min_freq=min_freq)
    encoded = encode_examples(result.examples, vocab, rel_vocab)

    outcome = train(
        encoded,
        enc_cfg,
        train_cfg,
        vocab,
        rel_vocab,
        out_dir=args.out,
        resume_from=resume_from,
        log=print,
    )
    if outcome.epoch_losses:
        print(f"final loss {outcome.epoch_losses[-1]:.6f}")
    print(f"checkpoints -> {args.out}")
    return 0


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dcfg = DecodingConfig(
        mode="beam" if args.beam > 1 else "greedy",
        beam_width=args.beam,
        max_gen_len=args.max_len,
        length_penalty=args.length_penalty,
    )
    result = ingest_dialogues(args.data)
    _report_skips(result.skipped)
    encoded = encode_examples(result.examples, ckpt.vocab, ckpt.rel_vocab)

    predictions = []
    references = []
    for example, enc in zip(result.examples, encoded):
        ids = generate(
            enc.x_ids,
            enc.node_ids,
            enc.rel_ids,
            ckpt.params,
            ckpt.enc_cfg,
            dcfg,
            bos_id=Vocab.BOS,
            eos_id=Vocab.EOS,
            pad_id=Vocab.PAD,
            ablation=ckpt.train_cfg.ablation,
        )
        predictions.append(detokenize(ckpt.vocab.decode(ids)))
        references.append(detokenize(tokenize(example.response)))

    Path(args.out).write_text("".join(line + "\n" for line in predictions))
    if args.refs_out:
        Path(args.refs_out).write_text("".join(line + "\n" for line in references))
    print(f"wrote {len(predictions)} predictions -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    candidates = [tokenize(line) for line in Path(args.preds).read_text().splitlines()]
    references = [tokenize(line) for line in Path(args.refs).read_text().splitlines()]
    report = score_corpus(candidates, references)
    jsonl_path = write_report(report, args.out, system=args.system)
    print(format_table(report, system=args.system), end="")
    print(f"report -> {args.out} and {jsonl_path}")
    return 0


def cmd_gradcheck(args) -> int:
    config = load_config(args.config)
    settings = {
        "d_model": 8,
        "n_heads": 1,
        "n_layers": 1,
        "ffn_dim": 16,
        "max_seq_len": 16,
        "dropout_rate": 0.0,
        **config.get("model", {}),
    }
    enc_cfg = EncoderConfig(**settings)

    from .amr import RelationVocab
    from .data import EncodedExample

    rel_vocab = RelationVocab((":ARG0", ":ARG1"))
    rel = np.full((4, 4), RelationVocab.NONE, dtype=np.int64)
    np.fill_diagonal(rel, RelationVocab.SELF)
    rel[0, 1] = rel_vocab.id_of(":ARG0")
    rel[1, 0] = rel_vocab.reverse_id_of(":ARG0")
    rel[0, 2] = rel_vocab.id_of(":ARG1")
    rel[2, 0] = rel_vocab.reverse_id_of(":ARG1")
    rng = np.random.default_rng(0)
    example = EncodedExample(
        example_id="gradcheck",
        x_ids=rng.integers(4, 16, size=5),
        y_ids=rng.integers(4, 16, size=3),
        node_ids=rng.integers(4, 16, size=4),
        rel_ids=rel,
    )
    params = init_params(enc_cfg, 16, rel_vocab.size, seed=0)

    def fn(p):
        loss, _ = batch_loss([example], p, enc_cfg)
        return loss

    error = grad_check(fn, params, h=1e-4)
    print(f"max relative gradient error: {error:.3e}")
    if error > 1e-4:
        print("gradient check FAILED (tolerance 1e-4)", file=sys.stderr)
        return 3
    return 0


def cmd_report(args) -> int:
    written = render_figures(args.scores, args.out_dir, losses_path=args.losses)
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "parse": cmd_parse,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return 0 if exc.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](args)
    except NonFiniteLoss as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError, TypeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
