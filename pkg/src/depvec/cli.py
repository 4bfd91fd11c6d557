"""``depvec`` command line: corpora, pre-training, embedding, fine-tuning, probing."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

from depvec.mir import CorpusError, ParseError, Program, load_corpus, parse_program, validate
from depvec.model import MODES, ModelConfig, code_embedding
from depvec.pretrain import (STRATEGIES, CheckpointError, PretrainConfig, graphs_of, initial_model,
                             load_checkpoint, pretrain, save_checkpoint)

GNNS = ("gcn", "gin", "sage", "gat")
TASKS = ("solution_class", "clone", "name_pred")
PROBE_FEATURES = ("lexical", "dependence", "both")


class CliError(Exception):
    """A user-facing failure; reported on stderr with exit code 1."""


def _seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("DEPVEC_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"DEPVEC_SEED must be an integer, got {env!r}") from None


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {path}")
    return p


def _read_program(path: str) -> Program:
    p = _existing(path)
    try:
        prog = parse_program(p.read_text(encoding="utf-8"), name=p.stem)
    except ParseError as exc:
        raise CliError(f"{path}: {exc}") from None
    problems = validate(prog)
    if problems:
        raise CliError(f"{path}: " + "; ".join(problems))
    return prog


def _read_corpus(path: str):
    try:
        records = load_corpus(_existing(path))
    except CorpusError as exc:
        raise CliError(str(exc)) from None
    if not records:
        raise CliError(f"{path}: corpus is empty")
    return records


def _read_checkpoint(path: str):
    try:
        return load_checkpoint(_existing(path))
    except CheckpointError as exc:
        raise CliError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- commands


def cmd_gen_corpora(args) -> int:
    from depvec.corpora import generate_desk_corpora

    corpora = generate_desk_corpora(seed=args.seed, out_dir=args.out)
    summary = {name: len(recs) for name, recs in corpora.items()}
    print(json.dumps({"out": str(args.out), "records": summary, "seed": args.seed}, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    records = _read_corpus(args.corpus)
    programs = [r.program for r in records]
    config = ModelConfig(gnn=args.gnn, layers=args.layers, dropout=args.dropout, seed=args.seed)
    model = initial_model(programs, config)
    losses: list[float] = []
    if args.strategy != "none":
        cfg = PretrainConfig(strategy=args.strategy, epochs=args.epochs, seed=args.seed)
        losses = pretrain(graphs_of(programs), model, cfg).losses
    save_checkpoint(model, args.out, strategy=args.strategy)
    print(json.dumps({"checkpoint": str(args.out), "strategy": args.strategy, "gnn": args.gnn,
                      "losses": [round(x, 6) for x in losses], "seed": args.seed,
                      "programs": len(programs)}, sort_keys=True))
    return 0


def cmd_embed(args) -> int:
    prog = _read_program(args.file)
    model = _read_checkpoint(args.checkpoint)
    z = code_embedding(prog, model, mode=args.mode)
    print(" ".join(f"{v:.9g}" for v in z))
    return 0


def cmd_clone_sim(args) -> int:
    from depvec.tasks import clone_score

    a, b = _read_program(args.a), _read_program(args.b)
    model = _read_checkpoint(args.checkpoint)
    print(f"{clone_score(a, b, model, mode=args.mode):.6f}")
    return 0


def cmd_finetune(args) -> int:
    from depvec.tasks import DatasetError, finetune_task

    records = _read_corpus(args.corpus)
    model = _read_checkpoint(args.checkpoint)
    try:
        result = finetune_task(args.task, records, model, mode=args.mode, epochs=args.epochs, seed=args.seed,
                               checkpoint=str(args.checkpoint))
    except DatasetError as exc:
        raise CliError(str(exc)) from None
    report = result.report
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    print(report.to_table(), file=sys.stderr)
    return 0


def cmd_probe(args) -> int:
    from depvec.tasks import DatasetError, probe

    records = _read_corpus(args.corpus)
    model = _read_checkpoint(args.checkpoint)
    try:
        rep = probe(model, records, feature=args.feature, seed=args.seed)
    except DatasetError as exc:
        raise CliError(str(exc)) from None
    print(json.dumps({"feature": rep.feature, "accuracy": rep.accuracy, "width": rep.width,
                      "model_hash": rep.hash_after, "n_train": rep.n_train, "n_test": rep.n_test,
                      "seed": args.seed, "checkpoint": str(args.checkpoint)}, sort_keys=True))
    return 0


def cmd_selfcheck(args) -> int:
    from depvec.selfcheck import main as selfcheck_main

    return 0 if selfcheck_main() else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depvec", description="Lexical + dependence code embeddings.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help: str, func) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--seed", type=int, default=None, help="random seed (default: $DEPVEC_SEED or 0)")
        p.set_defaults(func=func)
        return p

    p = add("gen-corpora", "write the built-in desk corpora as JSONL files", cmd_gen_corpora)
    p.add_argument("--out", required=True, help="output directory")

    p = add("pretrain", "build a model over a corpus and pre-train it", cmd_pretrain)
    p.add_argument("--corpus", required=True, help="JSONL corpus")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--gnn", choices=GNNS, default="gat")
    p.add_argument("--strategy", choices=STRATEGIES + ("none",), default="context")
    p.add_argument("--layers", type=int, default=5)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=1)

    p = add("embed", "print the code embedding of a program file", cmd_embed)
    p.add_argument("file", help="program file (.mir)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=MODES, default="both")

    p = add("clone-sim", "print the cosine similarity of two program files", cmd_clone_sim)
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=MODES, default="both")

    p = add("finetune", "fine-tune on a task corpus and report held-out metrics", cmd_finetune)
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--corpus", required=True, help="JSONL corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=MODES, default="both")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--out", default=None, help="also write the metrics JSON here")

    p = add("probe", "linear probe on frozen embeddings", cmd_probe)
    p.add_argument("--corpus", required=True, help="labelled JSONL corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--feature", choices=PROBE_FEATURES, default="both")

    add("selfcheck", "run the gradient, graph and invariant oracle suites", cmd_selfcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.seed = _seed(args.seed)
        return args.func(args)
    except CliError as exc:
        print(f"depvec: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"depvec: error: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
