"""``flowemb`` command line: synth, split, partition, train, embed, rank, eval, baseline, sweep."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import formats
from .config import ConfigError, ExperimentConfig, load_config
from .data import (
    ClassTable,
    FlowFormatError,
    FlowSet,
    SplitSpec,
    prepare_eval,
    read_flows_csv,
    select_classes,
    split_classes,
    write_flows_csv,
)
from .metrics import EvalReport, baseline_classify, compute_report
from .model import EmbeddingModel
from .retrieval import SCHEMES, EmbeddingDB, rank, vote_all
from .synth import GeneratorConfig, gen_dataset
from .train import NumericalError, evaluate, fit

log = logging.getLogger("flowemb")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_CHECKSUM = 4
EXIT_NUMERIC = 5

THREADS_ENV = "FLOWEMB_THREADS"


class UsageError(Exception):
    pass


def _manifest(out: Path, command: str, config: dict, inputs: dict, outputs: dict) -> None:
    formats.write_manifest(out.with_name(out.name + ".manifest.json"), command, config, inputs, outputs)


def _emit_report(report: EvalReport, names: list[str], out: str | None) -> None:
    print(report.table(names))
    print(report.line())
    if out:
        Path(out).write_text(report.line() + "\n", encoding="utf-8")


def _model_from(path: str, cfg: ExperimentConfig) -> EmbeddingModel:
    tensors = formats.load_weights(path)
    try:
        return EmbeddingModel.from_state(tensors, cfg.arcface())
    except (KeyError, ValueError) as exc:
        raise formats.ArtifactError(f"weights: {exc}") from None


def _parse_counts(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--counts expects three integers, got {text!r}") from None
    if len(parts) != 3:
        raise UsageError("--counts expects train,val,test")
    return parts  # type: ignore[return-value]


# ---------------------------------------------------------------- subcommands


def cmd_synth(a) -> int:
    gen = GeneratorConfig(n_classes=a.n_classes, samples_total=a.samples, zipf_exponent=a.zipf, seed=a.seed)
    flows, table = gen_dataset(gen)
    out, classes = Path(a.out), Path(a.classes_out)
    write_flows_csv(flows, out)
    table.save(classes)
    _manifest(out, "synth", dict(gen.__dict__), {}, {"flows": out, "classes": classes})
    return EXIT_OK


def cmd_split(a) -> int:
    table = ClassTable.load(a.classes)
    spec = split_classes(table, _parse_counts(a.counts), a.seed)
    spec.save(a.out, table)
    out = Path(a.out)
    outputs = {p: out / f"{p}.txt" for p in ("train", "val", "test", "seed")}
    _manifest(out / "split", "split", {"counts": a.counts, "seed": a.seed}, {"classes": a.classes}, outputs)
    return EXIT_OK


def cmd_partition(a) -> int:
    cfg = load_config(a.config)
    table = ClassTable.load(a.classes)
    spec = SplitSpec.load(a.splits, table)
    flows = select_classes(read_flows_csv(a.flows), getattr(spec, f"{a.part}_classes"))
    if len(flows) == 0:
        raise FlowFormatError(f"no flows belong to the {a.part} classes")
    lam = cfg.lambda_db if a.lambda_db is None else a.lambda_db
    n = len(flows)
    part = prepare_eval(flows, int(n * cfg.query_frac), int(n * cfg.db_frac), lam, cfg.seed, a.part)
    write_flows_csv(part.database, a.db_out)
    write_flows_csv(part.queries, a.queries_out)
    conf = {**cfg.to_dict(), "part": a.part, "lambda_db": lam}
    _manifest(Path(a.db_out), "partition", conf, {"flows": a.flows, "classes": a.classes},
              {"database": a.db_out, "queries": a.queries_out})
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = load_config(a.config)
    if a.seed is not None:
        cfg = cfg.replace(seed=a.seed)
    if a.epochs is not None:
        cfg = cfg.replace(epochs=a.epochs)
    table = ClassTable.load(a.classes)
    spec = SplitSpec.load(a.splits, table)
    flows = read_flows_csv(a.flows)
    out = Path(a.out)
    log_path = Path(a.log) if a.log else out.with_name(out.name + ".metrics.csv")
    result = fit(flows, table, spec, cfg.train(), cfg.backbone(), cfg.arcface(), log_path)
    formats.save_weights(out, result.best.state)
    log.info("best epoch %d: %s", result.best.epoch, result.best.report.line())
    inputs = {"flows": a.flows, "classes": a.classes, "splits_train": Path(a.splits) / "train.txt",
              "splits_val": Path(a.splits) / "val.txt", "splits_test": Path(a.splits) / "test.txt"}
    _manifest(out, "train", cfg.to_dict(), inputs, {"weights": out, "metrics": log_path})
    return EXIT_OK


def cmd_embed(a) -> int:
    cfg = load_config(a.config)
    table = ClassTable.load(a.classes)
    model = _model_from(a.weights, cfg)
    flows = read_flows_csv(a.flows)
    if len(flows) == 0:
        raise FlowFormatError(f"{a.flows}: no flows to embed")
    if flows.labels.max() >= len(table):
        raise FlowFormatError(f"{a.flows}: label outside the class table")
    emb = model.embed(flows.batch())
    if not np.all(np.isfinite(emb)):
        raise NumericalError("non-finite embeddings")
    db = EmbeddingDB(emb, flows.labels, table.names)
    formats.save_embdb(a.out, db, table.names)
    _manifest(Path(a.out), "embed", cfg.to_dict(), {"weights": a.weights, "flows": a.flows, "classes": a.classes}, {"embdb": a.out})
    return EXIT_OK


def _check_dims(db: EmbeddingDB, q: EmbeddingDB) -> None:
    if db.dim != q.dim:
        raise FlowFormatError(f"query dimension {q.dim} differs from database dimension {db.dim}")


def cmd_rank(a) -> int:
    db = formats.load_embdb(a.db)
    q = formats.load_embdb(a.queries)
    _check_dims(db, q)
    nb = rank(db, q.vectors, a.k)
    formats.save_neighbors(a.out, nb)
    _manifest(Path(a.out), "rank", {"k": a.k}, {"db": a.db, "queries": a.queries}, {"neighbors": a.out})
    return EXIT_OK


def cmd_eval(a) -> int:
    db = formats.load_embdb(a.db)
    q = formats.load_embdb(a.queries)
    _check_dims(db, q)
    table = ClassTable.load(a.classes)
    if db.names is not None and list(db.names) != list(table.names):
        raise FlowFormatError("database name table does not match the class table")
    nb = rank(db, q.vectors, max(a.k, SCHEMES[a.scheme]))
    report = compute_report(vote_all(nb, db.labels, a.scheme), q.labels, table, a.scheme)
    _emit_report(report, table.names, a.out)
    return EXIT_OK


def cmd_baseline(a) -> int:
    table = ClassTable.load(a.classes)
    train, test = read_flows_csv(a.train), read_flows_csv(a.test)
    if len(train) == 0 or len(test) == 0:
        raise FlowFormatError("baseline needs non-empty train and test files")
    report = compute_report(baseline_classify(train, test, a.sign_fold), test.labels, table, "top1")
    _emit_report(report, table.names, a.out)
    return EXIT_OK


def cmd_sweep(a) -> int:
    """Repeat an evaluation across values of one knob.

    ``lambda_db`` reuses one trained model and only rebuilds the test
    partition; ``lambda_sampler`` and ``embedding_size`` retrain per value.
    """
    cfg = load_config(a.config)
    table = ClassTable.load(a.classes)
    spec = SplitSpec.load(a.splits, table)
    flows = read_flows_csv(a.flows)
    try:
        values = [float(v) for v in a.values.split(",")]
    except ValueError:
        raise UsageError(f"--values expects numbers, got {a.values!r}") from None
    test = select_classes(flows, spec.test_classes)
    n = len(test)
    lines = [f"{a.param},scheme,accuracy,macro_recall,q1,q2,q3,q4"]
    if a.param == "lambda_db" and not a.weights:
        raise UsageError("lambda_db sweeps need --weights")
    model = _model_from(a.weights, cfg) if a.param == "lambda_db" else None
    for v in values:
        run = cfg
        if a.param == "lambda_db":
            run = cfg.replace(lambda_db=v)
        elif a.param == "lambda_sampler":
            run = cfg.replace(lambda_sampler=v)
        else:
            run = cfg.replace(embedding_size=int(v))
        if a.param != "lambda_db":
            result = fit(flows, table, spec, run.train(), run.backbone(), run.arcface())
            model = EmbeddingModel.from_state(result.best.state, run.arcface())
        part = prepare_eval(test, int(n * run.query_frac), int(n * run.db_frac), run.lambda_db, run.seed, "test")
        report = evaluate(model, part.database, part.queries, table, run.k, a.scheme)
        lines.append(f"{v:g}," + report.line())
        print(lines[-1], flush=True)
    if a.out:
        Path(a.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowemb", description="Flow embedding training, retrieval and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic flow dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes-out", required=True)
    s.add_argument("--n-classes", type=int, default=60)
    s.add_argument("--samples", type=int, default=30_000)
    s.add_argument("--zipf", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", parents=[common], help="write disjoint train/val/test class files")
    s.add_argument("--classes", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--counts", default="30,15,15")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("partition", parents=[common], help="database/query CSVs for one split part")
    s.add_argument("--flows", required=True)
    s.add_argument("--classes", required=True)
    s.add_argument("--splits", required=True)
    s.add_argument("--part", choices=("train", "val", "test"), default="test")
    s.add_argument("--db-out", required=True)
    s.add_argument("--queries-out", required=True)
    s.add_argument("--lambda-db", type=float)
    s.add_argument("--config")
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("train", parents=[common], help="fit the embedding model")
    s.add_argument("--flows", required=True)
    s.add_argument("--classes", required=True)
    s.add_argument("--splits", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", parents=[common], help="embed flows into an EMBDB1 file")
    s.add_argument("--weights", required=True)
    s.add_argument("--flows", required=True)
    s.add_argument("--classes", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("rank", parents=[common], help="k nearest database rows for every query")
    s.add_argument("--db", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("eval", parents=[common], help="vote over neighborhoods and report metrics")
    s.add_argument("--db", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--classes", required=True)
    s.add_argument("--scheme", choices=sorted(SCHEMES), default="top1")
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("baseline", parents=[common], help="L1 nearest neighbor on the first ten packets")
    s.add_argument("--train", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--classes", required=True)
    s.add_argument("--sign-fold", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("sweep", parents=[common], help="repeat evaluation over lambda_db, lambda_sampler or embedding_size")
    s.add_argument("--flows", required=True)
    s.add_argument("--classes", required=True)
    s.add_argument("--splits", required=True)
    s.add_argument("--param", choices=("lambda_db", "lambda_sampler", "embedding_size"), required=True)
    s.add_argument("--values", required=True)
    s.add_argument("--weights")
    s.add_argument("--scheme", choices=sorted(SCHEMES), default="top1")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def _threads() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads = _threads()
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except formats.ChecksumError as exc:
        print(f"checksum error: {exc}", file=sys.stderr)
        return EXIT_CHECKSUM
    except (formats.ArtifactError, FlowFormatError, FileNotFoundError) as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
