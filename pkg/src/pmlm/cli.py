"""Command-line entry point: ``pmlm <subcommand> ...``.

Progress goes to stderr, results to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from pmlm import __version__
from pmlm.assembly import assemble_pmlm_input, audit_leakage, format_mask
from pmlm.config import OBJECTIVES, RunConfig
from pmlm.corpus import Vocab, build_vocab, corpus_files, pack_pair
from pmlm.finetune import (
    FinetuneConfig,
    classification_instance,
    decode_beam,
    finetune_classifier,
    finetune_seq2seq,
    read_tsv,
)
from pmlm.masking import FactorizationOrder, format_plan, plan_corruption, sample_blockwise_mask
from pmlm.objectives import load_training_state, pretrain, save_training_state

log = logging.getLogger("pmlm")

SUITES = ("ae", "par", "leak", "grad", "sampler", "passes")


def _default_seed() -> int:
    return int(os.environ.get("PMLM_SEED", "0"))


def _add_vocab_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--vocab", required=required, help="vocabulary file (one token per line)")
    p.add_argument("--mode", choices=("word", "char"), default="word")
    p.add_argument("--no-lowercase", action="store_true")


def _load_vocab(args, checkpoint: str | None = None) -> Vocab:
    path = args.vocab
    if path is None and checkpoint is not None:
        path = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "vocab.txt")
    return Vocab.load(path, mode=args.mode, lowercase=not args.no_lowercase)


def _packed_from_args(args, vocab: Vocab):
    s1 = vocab.encode(args.s1)
    s2 = vocab.encode(args.s2 or "")
    max_len = args.max_len or len(s1) + len(s2) + 3
    return pack_pair(s1, s2, max_len, vocab)


def _parse_order(text: str) -> FactorizationOrder:
    steps = [tuple(int(p) for p in chunk.split(",")) for chunk in text.split(";") if chunk.strip()]
    return FactorizationOrder(tuple(steps))


def cmd_build_vocab(args) -> int:
    files = corpus_files(args.corpus)
    texts = (line for path in files for line in open(path, encoding="utf-8"))
    vocab = build_vocab(texts, args.max_size, args.mode, not args.no_lowercase)
    vocab.save(args.out)
    print(json.dumps({"vocab_size": len(vocab), "out": args.out}))
    return 0


def _mask_inputs(args):
    vocab = _load_vocab(args)
    x = _packed_from_args(args, vocab)
    rng = np.random.default_rng(args.seed)
    if getattr(args, "order", None):
        order = _parse_order(args.order)
    else:
        order = sample_blockwise_mask(x, rng, vocab)
    if getattr(args, "all_mask", False):
        from pmlm.masking import CorruptionPlan

        plan = CorruptionPlan.all_masked(order.positions)
    else:
        plan = plan_corruption(order, vocab, rng)
    return vocab, x, order, plan


def cmd_sample_mask(args) -> int:
    vocab, x, order, plan = _mask_inputs(args)
    print("# tokens\t" + " ".join(vocab.id_to_token[t] for t in x.token_ids))
    print("# step\tpositions\tactions\toriginal")
    print(format_plan(order, plan, x, vocab))
    return 0


def cmd_audit_mask(args) -> int:
    vocab, x, order, plan = _mask_inputs(args)
    inst = assemble_pmlm_input(x, order, plan, vocab)
    if args.inject:
        edges = [tuple(int(v) for v in e.split(",")) for e in args.inject]
        inst = inst.add_edges(edges)
    print(format_mask(inst, vocab))
    report = audit_leakage(inst, vocab)
    print(str(report))
    return 0 if report.passed else 1


def _run_config(args) -> RunConfig:
    run = RunConfig.base_size() if args.paper_size else RunConfig()
    if args.config:
        run = RunConfig.load(args.config)
    if args.objective:
        run.objective = args.objective
    if args.steps is not None:
        run.train.training_steps = args.steps
    if args.seed is not None:
        run.train.seed = args.seed
    elif "PMLM_SEED" in os.environ:
        run.train.seed = _default_seed()
    if args.mode:
        run.tokenizer = args.mode
    return run


def cmd_pretrain(args) -> int:
    run = _run_config(args)
    vocab = None
    if args.vocab:
        vocab = Vocab.load(args.vocab, mode=run.tokenizer, lowercase=run.lowercase)
    last: dict = {}
    checkpoints = pretrain(run, args.corpus, args.out, vocab=vocab, resume=args.resume, on_metrics=last.update)
    print(json.dumps({"checkpoint": checkpoints[-1] if checkpoints else None, **last}))
    return 0


def _finetune_config(args) -> FinetuneConfig:
    return FinetuneConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed if args.seed is not None else _default_seed(),
        dropout=args.dropout,
        freeze_body=getattr(args, "freeze_body", False),
        label_smoothing=getattr(args, "label_smoothing", 0.1),
    )


def _write_finetune_config(out: str, cfg: FinetuneConfig) -> None:
    with open(os.path.join(out, "finetune_config.txt"), "w", encoding="utf-8") as f:
        for k, v in vars(cfg).items():
            f.write(f"{k}={v}\n")


def cmd_finetune_cls(args) -> int:
    vocab = _load_vocab(args, args.checkpoint)
    model, run, _, _ = load_training_state(args.checkpoint, len(vocab))
    rows = read_tsv(args.data)
    data = [(vocab.encode(text), int(label)) for text, label in rows]
    num_labels = args.num_labels or max(y for _, y in data) + 1
    cfg = _finetune_config(args)
    clf = finetune_classifier(model, data, num_labels, vocab, cfg, max_len=run.train.max_len)
    preds = clf.predict([classification_instance(ids, vocab, run.train.max_len) for ids, _ in data])
    acc = float(np.mean(preds == np.array([y for _, y in data])))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "classifier.bin")
    head = {f"head.{k}": v for k, v in clf.head.state_dict().items()}
    save_training_state(path, model, None, run, 0, extra={"num_labels": num_labels}, extra_tensors=head)
    vocab.save(os.path.join(args.out, "vocab.txt"))
    run.save(os.path.join(args.out, "run_config.txt"))
    _write_finetune_config(args.out, cfg)
    print(json.dumps({"checkpoint": path, "train_accuracy": acc, "num_labels": num_labels}))
    return 0


def cmd_finetune_gen(args) -> int:
    vocab = _load_vocab(args, args.checkpoint)
    model, run, _, _ = load_training_state(args.checkpoint, len(vocab))
    pairs = [(vocab.encode(s), vocab.encode(t)) for s, t in read_tsv(args.data)]
    cfg = _finetune_config(args)
    model, skipped = finetune_seq2seq(model, pairs, vocab, cfg, max_len=run.model.max_positions)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "seq2seq.bin")
    save_training_state(path, model, None, run, 0)
    vocab.save(os.path.join(args.out, "vocab.txt"))
    run.save(os.path.join(args.out, "run_config.txt"))
    _write_finetune_config(args.out, cfg)
    print(json.dumps({"checkpoint": path, "pairs": len(pairs), "skipped": skipped}))
    return 0


def cmd_generate(args) -> int:
    vocab = _load_vocab(args, args.checkpoint)
    model, _, _, _ = load_training_state(args.checkpoint, len(vocab))
    stream = sys.stdin if args.input == "-" else open(args.input, encoding="utf-8")
    with stream:
        for line in stream:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            src = line.split("\t")[0]
            out = decode_beam(model, vocab.encode(src), vocab, args.beam, args.alpha, args.max_out)
            print(vocab.decode(out))
    return 0


def cmd_verify(args) -> int:
    from pmlm.verification import run_suite

    suites = SUITES if args.suite == "all" else (args.suite,)
    all_ok = True
    for name in suites:
        log.info("running suite %s", name)
        ok, lines = run_suite(name, seed=args.seed or 0, quick=args.quick)
        all_ok &= ok
        print("\n".join(lines))
    print("VERIFY " + ("PASS" if all_ok else "FAIL"))
    return 0 if all_ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmlm", description="Pseudo-masked LM pre-training toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--deterministic", action="store_true", help="force deterministic torch kernels")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("build-vocab", help="count a corpus and write a vocabulary file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-size", type=int, default=30000)
    p.add_argument("--mode", choices=("word", "char"), default="word")
    p.add_argument("--no-lowercase", action="store_true")
    p.set_defaults(func=cmd_build_vocab)

    for name, func, help_ in (
        ("sample-mask", cmd_sample_mask, "print a sampled factorization order and corruption plan"),
        ("audit-mask", cmd_audit_mask, "print the attention mask of an instance and audit it for leaks"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_vocab_args(p)
        p.add_argument("--s1", required=True, help="first segment text")
        p.add_argument("--s2", default="", help="second segment text")
        p.add_argument("--max-len", type=int, default=None)
        p.add_argument("--seed", type=int, default=_default_seed())
        p.add_argument("--order", help="explicit order over packed positions, e.g. '4,5;2'")
        p.add_argument("--all-mask", action="store_true", help="use [MASK] for every masked slot")
        if name == "audit-mask":
            p.add_argument("--inject", action="append", metavar="ROW,COL", help="allow an extra attention edge")
        p.set_defaults(func=func)

    p = sub.add_parser("pretrain", help="run PMLM pre-training")
    p.add_argument("--corpus", required=True, help="text file or directory of .txt files")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--objective", choices=OBJECTIVES)
    p.add_argument("--vocab")
    p.add_argument("--mode", choices=("word", "char"))
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--paper-size", action="store_true", help="BASE-size model and optimiser defaults")
    p.set_defaults(func=cmd_pretrain)

    for name, func in (("finetune-cls", cmd_finetune_cls), ("finetune-gen", cmd_finetune_gen)):
        p = sub.add_parser(name, help="fine-tune a checkpoint" + (" for classification" if name == "finetune-cls" else " for generation"))
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="tab-separated file")
        p.add_argument("--out", required=True)
        _add_vocab_args(p, required=False)
        p.add_argument("--steps", type=int, default=300)
        p.add_argument("--batch-size", type=int, default=16)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--dropout", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        if name == "finetune-cls":
            p.add_argument("--num-labels", type=int, default=None)
            p.add_argument("--freeze-body", action="store_true")
        else:
            p.add_argument("--label-smoothing", type=float, default=0.1)
        p.set_defaults(func=func)

    p = sub.add_parser("generate", help="beam-search decode sources, one per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", default="-", help="source file (first tab column used) or - for stdin")
    _add_vocab_args(p, required=False)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.7)
    p.add_argument("--max-out", type=int, default=48)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("verify", help="run the verification suites")
    p.add_argument("--suite", choices=(*SUITES, "all"), default="all")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--quick", action="store_true", help="smaller sample counts")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except (OSError, ValueError, FloatingPointError, KeyError, IndexError) as e:
        print(f"pmlm {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
