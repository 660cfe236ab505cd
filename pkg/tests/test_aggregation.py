"""phi/rho variants, Dice n-gram similarity, and the head stack."""

import string

import numpy as np
import pytest

from rowtab import tensor as T
from rowtab.aggregation import (
    AggregationParams,
    AggregationSpec,
    EmptyAggregationError,
    HeadStack,
    PHI_CHOICES,
    RHO_CHOICES,
    apply_phi,
    apply_rho,
    classify,
    ngram_set,
    ngram_similarity,
    table_representation,
)
from rowtab.tensor import Tensor

from helpers import check_gradients, dice_oracle


class TestNgramSet:
    def test_word_unigrams(self):
        assert ngram_set("a b", 1, "word") == {("a",), ("b",)}

    def test_char_trigrams(self):
        assert ngram_set("abcd", 3, "char") == {"abc", "bcd"}

    def test_short_text_yields_whole_text(self):
        assert ngram_set("a", 3, "char") == {"a"}
        assert ngram_set("a b", 3, "word") == {("a", "b")}

    def test_empty_text(self):
        assert ngram_set("", 2, "char") == set()
        assert ngram_set("", 2, "word") == set()

    def test_deduplication(self):
        assert ngram_set("x x x", 1, "word") == {("x",)}


class TestNgramSimilarity:
    def test_identical_nonempty(self):
        assert ngram_similarity("table fact", "table fact") == 1.0

    def test_disjoint(self):
        assert ngram_similarity("aa bb", "cc dd") == 0.0

    def test_hand_enumerated_dice(self):
        assert ngram_similarity("ab cd", "ab ce") == pytest.approx(0.5)

    def test_both_empty(self):
        assert ngram_similarity("", "") == 0.0

    def test_symmetry_identity_bounds_vs_oracle(self):
        rng = np.random.default_rng(31)
        alphabet = list(string.ascii_lowercase[:6]) + [" "]
        for _ in range(300):
            n = int(rng.integers(1, 4))
            unit = "char" if rng.random() < 0.5 else "word"
            a = "".join(rng.choice(alphabet, size=rng.integers(0, 12)))
            b = "".join(rng.choice(alphabet, size=rng.integers(0, 12)))
            s_ab = ngram_similarity(a, b, n, unit)
            assert s_ab == pytest.approx(dice_oracle(a, b, n, unit))
            assert s_ab == ngram_similarity(b, a, n, unit)
            assert 0.0 <= s_ab <= 1.0
            if ngram_set(a, n, unit):
                assert ngram_similarity(a, a, n, unit) == 1.0


class TestApplyPhi:
    def test_hadamard_definition(self):
        spec = AggregationSpec(phi="hadamard", rho="mean")
        out = apply_phi(spec, Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [3.0, 8.0])

    def test_ngram_weighted_identity_on_identical_texts(self):
        spec = AggregationSpec(phi="ngram_weighted", rho="mean")
        v = Tensor([0.5, -1.5])
        out = apply_phi(spec, v, None, c_text="alice 42", q_text="alice 42")
        np.testing.assert_allclose(out.data, v.data)

    def test_threshold_excludes_below(self):
        spec = AggregationSpec(phi="ngram_threshold", rho="mean", threshold=0.6)
        # dice("ab cd", "ab ce") = 0.5 <= 0.6: excluded
        out = apply_phi(spec, Tensor([1.0]), None, c_text="ab cd", q_text="ab ce")
        assert out is None

    def test_threshold_keeps_above(self):
        spec = AggregationSpec(phi="ngram_threshold", rho="mean", threshold=0.4)
        out = apply_phi(spec, Tensor([1.0]), None, c_text="ab cd", q_text="ab ce")
        np.testing.assert_allclose(out.data, [1.0])

    def test_dim_mismatch(self):
        spec = AggregationSpec(phi="hadamard", rho="mean")
        with pytest.raises(T.ShapeError):
            apply_phi(spec, Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_mlp_variants_output_feature_dim(self):
        rng = np.random.default_rng(0)
        for phi in ("mlp_concat", "mlp_rich"):
            spec = AggregationSpec(phi=phi, rho="mean")
            params = AggregationParams.init(spec, 6, seed=1)
            out = apply_phi(spec, Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6)),
                            params=params)
            assert out.shape == (6,)


class TestApplyRho:
    def test_mean(self):
        spec = AggregationSpec(rho="mean")
        out = apply_rho(spec, Tensor([[1.0, 3.0], [3.0, 5.0]]))
        np.testing.assert_allclose(out.data, [2.0, 4.0])

    def test_logmeanexp_known_value(self):
        spec = AggregationSpec(rho="logmeanexp")
        out = apply_rho(spec, Tensor([[0.0], [np.log(3.0)]]))
        np.testing.assert_allclose(out.data, [np.log(2.0)], atol=1e-7)

    def test_multihead_identity_projection(self):
        spec = AggregationSpec(rho="multihead", heads=1)
        params = AggregationParams.init(spec, 1, seed=0)
        params.params["rho.thetas"].data[:] = np.array([[0.5]], dtype=np.float32)
        params.params["rho.proj_w"].data[:] = np.eye(1, dtype=np.float32)
        params.params["rho.proj_b"].data[:] = 0.0
        out = apply_rho(spec, Tensor([[2.0], [4.0]]), params)
        np.testing.assert_allclose(out.data, [1.5])

    def test_empty_set_raises(self):
        with pytest.raises(EmptyAggregationError):
            apply_rho(AggregationSpec(rho="mean"), Tensor(np.zeros((0, 4))))

    def test_elementwise_bounds(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((7, 5)).astype(np.float64)
        t = Tensor(x)
        mean = apply_rho(AggregationSpec(rho="mean"), t).data
        mn = apply_rho(AggregationSpec(rho="min"), t).data
        mx = apply_rho(AggregationSpec(rho="max"), t).data
        lme = apply_rho(AggregationSpec(rho="logmeanexp"), t).data
        assert (mn <= mean + 1e-6).all() and (mean <= mx + 1e-6).all()
        assert (lme <= mx + 1e-6).all()
        assert (lme >= mx - np.log(7) - 1e-6).all()


class TestTableRepresentation:
    def test_single_row_hadamard_mean(self):
        spec = AggregationSpec(phi="hadamard", rho="mean")
        v1, vq = Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])
        out = table_representation(v1, None, vq, None, spec)
        np.testing.assert_allclose(out.data, [3.0, 8.0])

    def test_identical_rows_collapse_to_single_row_result(self):
        rng = np.random.default_rng(1)
        row = rng.standard_normal(4)
        vq = Tensor(rng.standard_normal(4))
        for rho in ("mean", "min", "max", "logmeanexp"):
            spec = AggregationSpec(phi="hadamard", rho=rho)
            single = table_representation(Tensor(row[None, :]), None, vq, None, spec)
            many = table_representation(Tensor(np.tile(row, (5, 1))), None, vq, None, spec)
            np.testing.assert_allclose(many.data, single.data, atol=1e-6)

    @pytest.mark.parametrize("phi", PHI_CHOICES)
    @pytest.mark.parametrize("rho", RHO_CHOICES)
    def test_row_permutation_invariance(self, phi, rho):
        rng = np.random.default_rng(hash((phi, rho)) % 2**32)
        n, dim = 6, 8
        spec = AggregationSpec(phi=phi, rho=rho, threshold=0.3)
        params = AggregationParams.init(spec, dim, seed=3)
        rows = rng.standard_normal((n, dim)).astype(np.float32)
        vq = Tensor(rng.standard_normal(dim).astype(np.float32))
        texts = [f"word{i} shared" for i in range(n)]
        q = "shared word0"
        perm = rng.permutation(n)
        a = table_representation(Tensor(rows), texts, vq, q, spec, params).data
        b = table_representation(Tensor(rows[perm]), [texts[i] for i in perm], vq, q, spec, params).data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_empty_fallback_zero(self):
        spec = AggregationSpec(phi="ngram_threshold", rho="mean", threshold=0.99,
                               empty_fallback="zero")
        rows = Tensor(np.ones((3, 4)))
        out = table_representation(rows, ["aa", "bb", "cc"], None, "zz", spec)
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_empty_fallback_unfiltered_mean(self):
        spec = AggregationSpec(phi="ngram_threshold", rho="mean", threshold=0.99,
                               empty_fallback="unfiltered_mean")
        rows = Tensor(np.array([[1.0, 3.0], [3.0, 5.0]]))
        out = table_representation(rows, ["aa", "bb"], None, "zz", spec)
        np.testing.assert_allclose(out.data, [2.0, 4.0])

    def test_query_scaling_scales_hadamard_and_not_threshold_membership(self):
        rng = np.random.default_rng(4)
        rows = Tensor(rng.standard_normal((4, 5)))
        vq = rng.standard_normal(5)
        spec = AggregationSpec(phi="hadamard", rho="mean")
        base = table_representation(rows, None, Tensor(vq), None, spec).data
        scaled = table_representation(rows, None, Tensor(3.0 * vq), None, spec).data
        np.testing.assert_allclose(scaled, 3.0 * base, rtol=1e-5)

        tspec = AggregationSpec(phi="ngram_threshold", rho="mean", threshold=0.4)
        texts = ["ab cd", "zz ww", "ab ce", "ab ce"]
        a = table_representation(rows, texts, Tensor(vq), "ab ce", tspec).data
        b = table_representation(rows, texts, Tensor(3.0 * vq), "ab ce", tspec).data
        np.testing.assert_array_equal(a, b)  # membership is text-only; vq unused

    def test_list_of_rows_equals_matrix(self):
        rng = np.random.default_rng(5)
        rows = rng.standard_normal((3, 4)).astype(np.float32)
        vq = Tensor(rng.standard_normal(4).astype(np.float32))
        spec = AggregationSpec(phi="hadamard", rho="mean")
        a = table_representation(Tensor(rows), None, vq, None, spec).data
        b = table_representation([Tensor(rows[i]) for i in range(3)], None, vq, None, spec).data
        assert a.tobytes() == b.tobytes()


class TestHeadStack:
    def test_classify_shape_and_eval_determinism(self):
        head = HeadStack.init(feature_dim=6, head_dim=10, seed=0)
        x = Tensor(np.random.default_rng(0).standard_normal(6))
        a = classify(x, head)
        b = classify(x, head)
        assert a.shape == (2,)
        assert a.data.tobytes() == b.data.tobytes()

    def test_transform_output_dim(self):
        head = HeadStack.init(feature_dim=6, head_dim=10, seed=0)
        out = head.transform(Tensor(np.zeros((3, 6))))
        assert out.shape == (3, 10)

    def test_dim_mismatch(self):
        head = HeadStack.init(feature_dim=6, head_dim=10, seed=0)
        with pytest.raises(T.ShapeError):
            classify(Tensor(np.zeros(5)), head)

    def test_gradients_through_full_stack(self):
        # O(1)-scale weights keep LeakyReLU pre-activations far from the kink
        # relative to the finite-difference step.
        rng = np.random.default_rng(2)
        names = sorted(HeadStack.expected_shapes(4, 5))
        shapes = HeadStack.expected_shapes(4, 5)
        arrays = [rng.standard_normal(4)] + [rng.standard_normal(shapes[n]) * 0.5 for n in names]

        def build(xt, *tensors):
            h = HeadStack(4, 5, dict(zip(names, tensors)), dropout=0.0)
            return T.cross_entropy(h.classifier(h.transform(xt.reshape(1, 4))), [1])

        check_gradients(build, arrays)

    def test_gradients_through_learnable_aggregation_paths(self):
        rng = np.random.default_rng(6)
        rows = rng.standard_normal((3, 4))
        vq = rng.standard_normal(4)
        for phi, rho in (("mlp_rich", "mean"), ("mlp_concat", "max"), ("hadamard", "multihead")):
            spec = AggregationSpec(phi=phi, rho=rho, heads=2)
            params = AggregationParams.init(spec, 4, seed=7, dtype=np.float64)
            names = sorted(params.params)

            def build(r, q, *tensors):
                p = AggregationParams(spec, 4, dict(zip(names, tensors)))
                return (table_representation(r, None, q, None, spec, p) ** 2.0).sum()

            check_gradients(build, [rows, vq] + [params.params[n].data for n in names])
