"""Command-line toolchain: gen-data, train, encode, query, bench.

Every failure exits nonzero after printing a single machine-parsable JSON
line to stderr. All JSON outputs are UTF-8 with stable key order. The
ROTAR_SEED environment variable overrides dataset and training seeds.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import tensor as T
from .bench import bench
from .data import (
    Statement,
    SyntheticConfig,
    Table,
    generate_synthetic,
    load_dataset,
    load_tables,
    row_text,
    save_dataset,
)
from .encoder import encode_rows, load_checkpoint, save_checkpoint
from .repstore import RepStore
from .threads import single_threaded_blas
from .training import (
    TeacherModel,
    StudentModel,
    default_experiment_config,
    merge_config,
    run_experiment,
)

SEED_ENV = "ROTAR_SEED"


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _fail(exc: BaseException) -> int:
    line = json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True)
    print(line, file=sys.stderr)
    return 1


def _parse_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("..")
    if not sep:
        raise ValueError(f"expected MIN..MAX, got {text!r}")
    return int(lo), int(hi)


def _seed_override(seed: int) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env else seed


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = SyntheticConfig(
        num_tables=args.tables,
        rows_range=_parse_range(args.rows),
        cols_range=_parse_range(args.cols),
        statements_per_table=args.statements_per_table,
        seed=_seed_override(args.seed),
    )
    tables, statements = generate_synthetic(config)
    out = save_dataset(tables, statements, args.out, manifest_extra={
        "seed": config.seed,
        "generator": config.to_dict(),
    })
    _emit({"out": str(out), "tables": len(tables), "statements": len(statements),
           "seed": config.seed})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    tables, statements, _ = load_dataset(args.data)
    override = {}
    if args.config:
        override = json.loads(Path(args.config).read_text(encoding="utf-8"))
    config = merge_config(default_experiment_config(), override)
    config["train"]["seed"] = _seed_override(config["train"]["seed"])

    teacher = None
    if args.teacher:
        teacher = TeacherModel.from_checkpoint(load_checkpoint(args.teacher))

    result = run_experiment(tables, statements, config, teacher=teacher)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.student.to_checkpoint(), out / "student.ckpt")
    artifacts = {"student": str(out / "student.ckpt")}
    if result.teacher is not None and args.teacher is None:
        save_checkpoint(result.teacher.to_checkpoint(), out / "teacher.ckpt")
        artifacts["teacher"] = str(out / "teacher.ckpt")
    result.student_metrics.write_csv(out / "metrics.csv")
    if result.teacher_metrics is not None:
        result.teacher_metrics.write_csv(out / "teacher_metrics.csv")
    summary = {
        "artifacts": artifacts,
        "config": result.config,
        "student": result.student_metrics.summary(),
    }
    if result.teacher_metrics is not None:
        summary["teacher"] = result.teacher_metrics.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    _emit({"out": str(out), "best_val_accuracy": result.student_metrics.best_val_accuracy,
           "epochs_run": len(result.student_metrics.epochs)})
    return 0


def cmd_encode(args: argparse.Namespace) -> int:
    student = StudentModel.from_checkpoint(load_checkpoint(args.model))
    tables, _, _ = load_dataset(args.data)
    fingerprint = student.fingerprint()
    store = RepStore(args.store, dim=student.encoder.config.dim, fingerprint=fingerprint)

    def encode_one(table):
        return table.table_id, encode_rows(table, student.encoder, student.vocab)

    if args.parallel:
        with ThreadPoolExecutor() as pool:
            encoded = list(pool.map(encode_one, tables))
    else:
        encoded = [encode_one(t) for t in tables]
    for table_id, vectors in encoded:
        store.put(table_id, vectors, fingerprint)
    store.save()
    _emit({"store": str(store.path), "tables": len(store), "rows": store.row_count})
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    student = StudentModel.from_checkpoint(load_checkpoint(args.model))

    def lookup_table() -> Table:
        if not args.data:
            raise ValueError("--data DIR is required to read the table itself "
                             "(uncached query or text-based aggregation)")
        for table in load_tables(args.data):
            if table.table_id == args.table_id:
                return table
        raise KeyError(f"table {args.table_id!r} not found under {args.data}")

    statement = Statement(statement_id="query", table_id=args.table_id,
                          text=args.statement, label=False)
    used_cache = False
    row_vectors = None
    if not args.no_cache:
        if not args.store:
            raise ValueError("--store FILE is required unless --no-cache is given")
        store = RepStore.open(args.store)
        row_vectors = store.get(args.table_id, student.fingerprint())
        used_cache = True

    if used_cache and not student.agg_spec.needs_text:
        out = student.forward_vectors(statement, row_vectors)
    elif used_cache:
        table = lookup_table()
        texts = [row_text(table, i) for i in range(table.n_rows)]
        out = student.forward_vectors(statement, row_vectors, row_texts=texts)
    else:
        table = lookup_table()
        out = student.forward(table, statement, mode="eval")

    probs = T.softmax(out.logits, axis=1).data[0]
    score = float(probs[1])
    _emit({
        "score": score,
        "statement": args.statement,
        "used_cache": used_cache,
        "verdict": "entailed" if score > 0.5 else "refuted",
    })
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    student = StudentModel.from_checkpoint(load_checkpoint(args.model))
    sizes = [int(s) for s in args.sizes.split(",") if s]
    report = bench(student, sizes, repeats=args.repeats)
    if args.out:
        report.write_json(args.out)
    _emit(report.to_dict())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rowtab",
        description="Row-based table representation learning toolchain",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic fact-verification dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--tables", type=int, required=True)
    p.add_argument("--rows", required=True, help="MIN..MAX rows per table")
    p.add_argument("--cols", required=True, help="MIN..MAX columns per table")
    p.add_argument("--statements-per-table", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train student (and teacher if distilling)")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--teacher", default=None, help="pretrained teacher checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="fill a representation store for all tables")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("query", help="score one statement against one table")
    p.add_argument("--model", required=True)
    p.add_argument("--store", default=None)
    p.add_argument("--table-id", required=True)
    p.add_argument("--statement", required=True)
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--data", default=None,
                   help="dataset dir; needed without cache or with text-based aggregation")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="cold vs warm latency benchmark")
    p.add_argument("--model", required=True)
    p.add_argument("--sizes", default="8,32,64,256")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with single_threaded_blas():
            return args.func(args)
    except Exception as exc:  # single machine-parsable error line, nonzero exit
        return _fail(exc)


if __name__ == "__main__":
    raise SystemExit(main())
