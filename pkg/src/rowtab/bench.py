"""Cold-versus-warm latency benchmark for the cached query path.

Per table size N: the cold path answers a query by encoding all N rows, then
aggregating and classifying; the warm path reuses stored row vectors and runs
only the query encoder, aggregation, and head. Encoder-call counters verify
the structure (cold = N + 1 sequences, warm = 1), timings use the monotonic
clock around the full query path with one discarded warmup iteration, and
warm and cold logits are checked to agree.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Statement, SyntheticConfig, Table, generate_synthetic
from .repstore import RepStore
from .threads import single_threaded_blas
from .training import StudentModel

__all__ = ["LatencyStats", "SizeResult", "BenchReport", "bench", "bench_tables"]


@dataclass
class LatencyStats:
    mean: float
    p50: float
    p95: float

    @classmethod
    def from_samples(cls, samples: list[float]) -> "LatencyStats":
        arr = np.asarray(samples, dtype=np.float64)
        return cls(mean=float(arr.mean()),
                   p50=float(np.percentile(arr, 50)),
                   p95=float(np.percentile(arr, 95)))

    def to_dict(self) -> dict:
        return {"mean_s": self.mean, "p50_s": self.p50, "p95_s": self.p95}


@dataclass
class SizeResult:
    n_rows: int
    cold: LatencyStats
    warm: LatencyStats
    ratio: float
    encoder_calls_cold: int
    encoder_calls_warm: int
    max_logit_gap: float

    def to_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "cold": self.cold.to_dict(),
            "warm": self.warm.to_dict(),
            "ratio_cold_over_warm": self.ratio,
            "encoder_calls_cold_per_query": self.encoder_calls_cold,
            "encoder_calls_warm_per_query": self.encoder_calls_warm,
            "max_logit_gap": self.max_logit_gap,
        }


@dataclass
class BenchReport:
    repeats: int
    sizes: list[SizeResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"repeats": self.repeats, "sizes": [s.to_dict() for s in self.sizes]}

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def result_for(self, n_rows: int) -> SizeResult:
        for r in self.sizes:
            if r.n_rows == n_rows:
                return r
        raise KeyError(f"no benchmark result for n_rows={n_rows}")


def _bench_table(n_rows: int, seed: int) -> tuple[Table, Statement]:
    cfg = SyntheticConfig(
        num_tables=1, rows_range=(n_rows, n_rows), cols_range=(4, 4),
        statements_per_table=1, seed=seed, values_per_attribute=max(40, n_rows),
    )
    tables, statements = generate_synthetic(cfg)
    table = Table(table_id=f"bench{n_rows}", schema=tables[0].schema, rows=tables[0].rows)
    statement = Statement(statement_id=statements[0].statement_id, table_id=table.table_id,
                          text=statements[0].text, label=statements[0].label)
    return table, statement


def _encoder_calls(student: StudentModel) -> int:
    return student.encoder.calls + student.query_encoder.calls


def bench_tables(
    student: StudentModel,
    pairs: list[tuple[Table, Statement]],
    repeats: int = 20,
) -> BenchReport:
    """Measure the given (table, statement) pairs; one SizeResult per pair."""
    if repeats < 5:
        raise ValueError(f"repeats must be >= 5, got {repeats}")
    report = BenchReport(repeats=repeats)
    with single_threaded_blas():
        _bench_pairs(student, pairs, repeats, report)
    return report


def _bench_pairs(student, pairs, repeats, report):
    for table, statement in pairs:
        store = RepStore(path=Path("unused.repstore"), dim=student.encoder.config.dim,
                         fingerprint=student.fingerprint())
        out_cold = student.forward(table, statement, mode="eval")
        store.put(table.table_id, out_cold.row_vectors, student.fingerprint())

        # warmup iterations are discarded
        student.forward(table, statement, mode="eval")
        cached = store.get(table.table_id, student.fingerprint())
        student.forward(table, statement, mode="eval", row_vectors=cached)

        cold_times, warm_times = [], []
        calls_cold = calls_warm = 0
        gap = 0.0
        for _ in range(repeats):
            before = _encoder_calls(student)
            t0 = time.perf_counter()
            out = student.forward(table, statement, mode="eval")
            cold_times.append(time.perf_counter() - t0)
            calls_cold = _encoder_calls(student) - before

            before = _encoder_calls(student)
            t0 = time.perf_counter()
            cached = store.get(table.table_id, student.fingerprint())
            warm = student.forward(table, statement, mode="eval", row_vectors=cached)
            warm_times.append(time.perf_counter() - t0)
            calls_warm = _encoder_calls(student) - before
            gap = max(gap, float(np.abs(warm.logits.data - out.logits.data).max()))

        cold = LatencyStats.from_samples(cold_times)
        warm = LatencyStats.from_samples(warm_times)
        report.sizes.append(SizeResult(
            n_rows=table.n_rows, cold=cold, warm=warm,
            ratio=cold.mean / warm.mean,
            encoder_calls_cold=calls_cold, encoder_calls_warm=calls_warm,
            max_logit_gap=gap,
        ))
    return report


def bench(
    student: StudentModel,
    table_sizes: list[int],
    repeats: int = 20,
    seed: int = 1234,
) -> BenchReport:
    """Synthetic-table benchmark across ``table_sizes``."""
    if not table_sizes or min(table_sizes) < 1:
        raise ValueError("table_sizes must be nonempty positive integers")
    pairs = [_bench_table(n, seed + i) for i, n in enumerate(table_sizes)]
    return bench_tables(student, pairs, repeats=repeats)
