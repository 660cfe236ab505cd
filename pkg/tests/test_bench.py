"""Latency benchmark structure: call counters, logits agreement, report shape."""

import numpy as np
import pytest

from rowtab.aggregation import AggregationSpec
from rowtab.bench import bench
from rowtab.training import StudentModel

from conftest import tiny_encoder_config


@pytest.fixture(scope="module")
def bench_student(small_vocab):
    enc_cfg = tiny_encoder_config(len(small_vocab))
    q_cfg = tiny_encoder_config(len(small_vocab), positions=dict(
        absolute=True, cell_index=False, intra_cell=True, attribute=False))
    return StudentModel.init(enc_cfg, q_cfg, AggregationSpec(phi="mlp_rich", rho="mean"),
                             head_dim=16, vocab=small_vocab, seed=0, head_dropout=0.0)


class TestBench:
    def test_call_counters_and_logit_agreement(self, bench_student):
        report = bench(bench_student, [6, 12], repeats=5)
        for result in report.sizes:
            assert result.encoder_calls_cold == result.n_rows + 1
            assert result.encoder_calls_warm == 1
            assert result.max_logit_gap <= 1e-5
            assert result.cold.mean > 0 and result.warm.mean > 0

    def test_report_json_roundtrip(self, bench_student, tmp_path):
        report = bench(bench_student, [4], repeats=5)
        path = report.write_json(tmp_path / "report.json")
        import json

        data = json.loads(path.read_text())
        assert data["repeats"] == 5
        assert data["sizes"][0]["n_rows"] == 4
        assert set(data["sizes"][0]["cold"]) == {"mean_s", "p50_s", "p95_s"}

    def test_repeats_floor(self, bench_student):
        with pytest.raises(ValueError):
            bench(bench_student, [4], repeats=4)

    def test_sizes_validated(self, bench_student):
        with pytest.raises(ValueError):
            bench(bench_student, [], repeats=5)

    def test_warm_path_never_runs_row_encoder(self, bench_student):
        from rowtab.data import Statement, SyntheticConfig, generate_synthetic
        from rowtab.repstore import RepStore

        tables, statements = generate_synthetic(SyntheticConfig(
            num_tables=1, rows_range=(5, 5), cols_range=(3, 3),
            statements_per_table=1, seed=9, values_per_attribute=8))
        out = bench_student.forward(tables[0], statements[0])
        store = RepStore("unused", dim=bench_student.encoder.config.dim,
                         fingerprint=bench_student.fingerprint())
        store.put(tables[0].table_id, out.row_vectors, bench_student.fingerprint())
        bench_student.encoder.reset_calls()
        bench_student.query_encoder.reset_calls()
        cached = store.get(tables[0].table_id, bench_student.fingerprint())
        bench_student.forward_vectors(statements[0], cached)
        assert bench_student.encoder.calls == 0
        assert bench_student.query_encoder.calls == 1
