"""Query-specific aggregation over cached row vectors.

A per-row information-extraction function (phi) combines each row vector with
the query — numerically (Hadamard product, MLP fusions) or textually (n-gram
Dice weighting, hard threshold) — and a permutation-invariant set reduction
(rho: mean, min, max, log-mean-exp, or a learned multi-head projection) folds
the results into one table vector. A transformation module then lifts that
vector to the shared head dimension and a small classifier scores the query.

Everything here is independent of the number of rows in the original table
and never runs the row encoder, which is what makes cached vectors reusable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import tokenize
from .tensor import Tensor

__all__ = [
    "PHI_CHOICES", "RHO_CHOICES", "AggregationSpec", "AggregationParams",
    "EmptyAggregationError", "ngram_set", "ngram_similarity",
    "apply_phi", "apply_rho", "table_representation",
    "HeadStack", "classify",
]

PHI_CHOICES = ("hadamard", "mlp_concat", "mlp_rich", "ngram_weighted", "ngram_threshold")
RHO_CHOICES = ("mean", "min", "max", "logmeanexp", "multihead")

LEAKY_SLOPE = 0.01


class EmptyAggregationError(ValueError):
    """The aggregation set is empty and no fallback policy was applied."""


@dataclass(frozen=True)
class AggregationSpec:
    phi: str = "mlp_rich"
    rho: str = "max"
    ngram_order: int = 1
    ngram_unit: str = "word"
    threshold: float = 0.5
    heads: int = 4
    empty_fallback: str = "zero"

    def __post_init__(self):
        if self.phi not in PHI_CHOICES:
            raise ValueError(f"phi must be one of {PHI_CHOICES}, got {self.phi!r}")
        if self.rho not in RHO_CHOICES:
            raise ValueError(f"rho must be one of {RHO_CHOICES}, got {self.rho!r}")
        if self.ngram_order < 1:
            raise ValueError(f"ngram_order must be >= 1, got {self.ngram_order}")
        if self.ngram_unit not in ("char", "word"):
            raise ValueError(f"ngram_unit must be 'char' or 'word', got {self.ngram_unit!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if self.empty_fallback not in ("zero", "unfiltered_mean"):
            raise ValueError(f"empty_fallback must be 'zero' or 'unfiltered_mean', got {self.empty_fallback!r}")

    @property
    def needs_text(self) -> bool:
        return self.phi in ("ngram_weighted", "ngram_threshold")

    def to_dict(self) -> dict:
        return {
            "phi": self.phi,
            "rho": self.rho,
            "ngram_order": self.ngram_order,
            "ngram_unit": self.ngram_unit,
            "threshold": self.threshold,
            "heads": self.heads,
            "empty_fallback": self.empty_fallback,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AggregationSpec":
        return cls(**d)


def ngram_set(text: str, n: int, unit: str = "word") -> set:
    """Deduplicated contiguous grams; shorter-than-n text yields itself whole."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if unit == "word":
        toks = tokenize(text)
        if not toks:
            return set()
        if len(toks) < n:
            return {tuple(toks)}
        return {tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)}
    if unit == "char":
        s = text.lower()
        if not s:
            return set()
        if len(s) < n:
            return {s}
        return {s[i:i + n] for i in range(len(s) - n + 1)}
    raise ValueError(f"unit must be 'char' or 'word', got {unit!r}")


def ngram_similarity(a: str, b: str, n: int = 1, unit: str = "word") -> float:
    """Dice coefficient of the two gram sets, in [0, 1]; both-empty gives 0."""
    ga = ngram_set(a, n, unit)
    gb = ngram_set(b, n, unit)
    denom = len(ga) + len(gb)
    if denom == 0:
        return 0.0
    return 2.0 * len(ga & gb) / denom


class AggregationParams:
    """Learnable tensors behind the MLP phi variants and multi-head rho.

    Only the parameters the spec actually uses are allocated, so an optimizer
    over ``named_parameters()`` never sees a gradient-less tensor.
    """

    def __init__(self, spec: AggregationSpec, feature_dim: int, params: dict[str, Tensor]):
        self.spec = spec
        self.feature_dim = feature_dim
        self.params = params

    @classmethod
    def init(cls, spec: AggregationSpec, feature_dim: int, seed: int, dtype=np.float32) -> "AggregationParams":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}

        def normal(shape):
            return Tensor((rng.standard_normal(shape) * 0.02).astype(dtype), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        if spec.phi in ("mlp_concat", "mlp_rich"):
            fan_in = 2 * feature_dim if spec.phi == "mlp_concat" else 4 * feature_dim
            params["phi.w1"] = normal((fan_in, feature_dim))
            params["phi.b1"] = zeros((feature_dim,))
            params["phi.w2"] = normal((feature_dim, feature_dim))
            params["phi.b2"] = zeros((feature_dim,))
        if spec.rho == "multihead":
            params["rho.thetas"] = Tensor(
                (rng.standard_normal((spec.heads, feature_dim)) * 0.02 + 1.0).astype(dtype),
                requires_grad=True,
            )
            params["rho.proj_w"] = normal((spec.heads * feature_dim, feature_dim))
            params["rho.proj_b"] = zeros((feature_dim,))
        return cls(spec, feature_dim, params)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    @classmethod
    def from_tensors(cls, spec: AggregationSpec, feature_dim: int, tensors: dict[str, np.ndarray]) -> "AggregationParams":
        params = {name: Tensor(np.array(arr, copy=True), requires_grad=True) for name, arr in tensors.items()}
        return cls(spec, feature_dim, params)


def _phi_mlp(params: AggregationParams, fused: Tensor) -> Tensor:
    p = params.params
    h = T.leaky_relu(fused @ p["phi.w1"] + p["phi.b1"], LEAKY_SLOPE)
    return h @ p["phi.w2"] + p["phi.b2"]


def _phi_batch(
    spec: AggregationSpec,
    params: AggregationParams | None,
    rows: Tensor,
    v_q: Tensor,
    row_texts: Sequence[str] | None,
    q_text: str | None,
) -> tuple[Tensor | None, np.ndarray]:
    """Features of the kept rows plus the kept-row index array."""
    n = rows.shape[0]
    kept = np.arange(n)
    if spec.needs_text:
        if row_texts is None or q_text is None:
            raise ValueError(f"phi {spec.phi!r} needs row texts and the query text")
        sims = np.array(
            [ngram_similarity(t, q_text, spec.ngram_order, spec.ngram_unit) for t in row_texts],
            dtype=rows.dtype.type,
        )
        if spec.phi == "ngram_threshold":
            kept = np.nonzero(sims > spec.threshold)[0]
            if kept.size == 0:
                return None, kept
            return T.index_select(rows, kept), kept
        return rows * Tensor(sims[:, None]), kept

    if v_q is None:
        raise ValueError(f"phi {spec.phi!r} needs a query vector")
    if v_q.size != rows.shape[1]:
        raise T.ShapeError(f"query vector dim {v_q.size} != row vector dim {rows.shape[1]}")
    vq = T.broadcast_to(v_q.reshape(1, rows.shape[1]), rows.shape)
    if spec.phi == "hadamard":
        return rows * vq, kept
    if spec.phi == "mlp_concat":
        fused = T.concat([rows, vq], axis=1)
    else:  # mlp_rich
        fused = T.concat([rows, vq, T.absolute(rows - vq), rows * vq], axis=1)
    if params is None:
        raise ValueError(f"phi {spec.phi!r} needs learnable parameters")
    return _phi_mlp(params, fused), kept


def apply_phi(
    spec: AggregationSpec,
    v_i: Tensor,
    v_q: Tensor | None,
    c_text: str | None = None,
    q_text: str | None = None,
    params: AggregationParams | None = None,
) -> Tensor | None:
    """Per-row feature, or None when a hard threshold excludes the row."""
    row = v_i.reshape(1, v_i.size) if v_i.ndim == 1 else v_i
    texts = [c_text] if c_text is not None else None
    feats, _ = _phi_batch(spec, params, row, v_q, texts, q_text)
    if feats is None:
        return None
    return feats.reshape(feats.shape[1])


def apply_rho(spec: AggregationSpec, features: Tensor, params: AggregationParams | None = None) -> Tensor:
    """Fold an [N, dim] feature set into one [dim] vector, order-independent."""
    if features.shape[0] == 0:
        raise EmptyAggregationError("apply_rho on an empty feature set")
    if spec.rho == "mean":
        return features.mean(axis=0)
    if spec.rho == "min":
        return T.reduce_min(features, axis=0)
    if spec.rho == "max":
        return T.reduce_max(features, axis=0)
    if spec.rho == "logmeanexp":
        # log((1/N) sum exp(x)), elementwise, with max-subtraction stability.
        m = T.reduce_max(features, axis=0, keepdims=True).detach()
        out = T.log(T.exp(features - m).mean(axis=0))
        return out + m.reshape(m.shape[1])
    # multihead: per head, mean-pooled LeakyReLU(x * theta_l); concat; project.
    if params is None:
        raise ValueError("rho 'multihead' needs learnable parameters")
    p = params.params
    thetas = p["rho.thetas"]
    heads = []
    for l in range(spec.heads):
        theta = thetas[l:l + 1, :]
        heads.append(T.leaky_relu(features * T.broadcast_to(theta, features.shape), LEAKY_SLOPE).mean(axis=0))
    fused = T.concat(heads, axis=0).reshape(1, spec.heads * features.shape[1])
    out = fused @ p["rho.proj_w"] + p["rho.proj_b"]
    return out.reshape(out.shape[1])


def table_representation(
    row_vectors: Tensor | Sequence[Tensor],
    row_texts: Sequence[str] | None,
    v_q: Tensor | None,
    q_text: str | None,
    spec: AggregationSpec,
    params: AggregationParams | None = None,
) -> Tensor:
    """Query-specific table vector: rho over phi of every row.

    ``row_vectors`` is an [N, dim] tensor or a list of per-row tensors (the
    list form lets selective backward detach individual rows). When a hard
    threshold empties the set, the configured fallback applies: a zero vector
    or the rho of the unfiltered row set.
    """
    if not isinstance(row_vectors, Tensor):
        rows = [v.reshape(1, v.size) if v.ndim == 1 else v for v in row_vectors]
        row_vectors = T.concat(rows, axis=0) if len(rows) > 1 else rows[0]
    if row_vectors.shape[0] < 1:
        raise ValueError("table_representation needs at least one row vector")
    features, _ = _phi_batch(spec, params, row_vectors, v_q, row_texts, q_text)
    if features is None:
        if spec.empty_fallback == "zero":
            return Tensor(np.zeros(row_vectors.shape[1], dtype=row_vectors.dtype.type))
        return apply_rho(spec, row_vectors, params)
    return apply_rho(spec, features, params)


class HeadStack:
    """Transformation module plus binary classifier shared by every model.

    The transformation is a two-layer net (hidden size = the input feature
    dimension) that lifts features to a common head dimension so teacher and
    student features are directly comparable; the classifier is a three-layer
    net with hidden size equal to that head dimension. Both use LeakyReLU
    slope 0.01 and dropout 0.1 while training.
    """

    def __init__(self, feature_dim: int, head_dim: int, params: dict[str, Tensor], dropout: float = 0.1):
        self.feature_dim = feature_dim
        self.head_dim = head_dim
        self.dropout = dropout
        self.params = params

    @classmethod
    def init(cls, feature_dim: int, head_dim: int, seed: int, dropout: float = 0.1, dtype=np.float32) -> "HeadStack":
        rng = np.random.default_rng(seed)
        shapes = cls.expected_shapes(feature_dim, head_dim)
        params = {}
        for name, shape in shapes.items():
            if name.endswith(("b1", "b2", "b3")):
                params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
            else:
                params[name] = Tensor((rng.standard_normal(shape) * 0.02).astype(dtype), requires_grad=True)
        return cls(feature_dim, head_dim, params, dropout)

    @staticmethod
    def expected_shapes(feature_dim: int, head_dim: int) -> dict[str, tuple[int, ...]]:
        return {
            "transform.w1": (feature_dim, feature_dim),
            "transform.b1": (feature_dim,),
            "transform.w2": (feature_dim, head_dim),
            "transform.b2": (head_dim,),
            "classifier.w1": (head_dim, head_dim),
            "classifier.b1": (head_dim,),
            "classifier.w2": (head_dim, head_dim),
            "classifier.b2": (head_dim,),
            "classifier.w3": (head_dim, 2),
            "classifier.b3": (2,),
        }

    @classmethod
    def from_tensors(cls, feature_dim: int, head_dim: int, tensors: dict[str, np.ndarray], dropout: float = 0.1) -> "HeadStack":
        expected = cls.expected_shapes(feature_dim, head_dim)
        params = {}
        for name, shape in expected.items():
            if name not in tensors:
                raise ValueError(f"head stack is missing tensor {name!r}")
            if tuple(tensors[name].shape) != shape:
                raise ValueError(f"head tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
            params[name] = Tensor(np.array(tensors[name], copy=True), requires_grad=True)
        return cls(feature_dim, head_dim, params, dropout)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def _maybe_dropout(self, x: Tensor, mode: str, rng) -> Tensor:
        if mode == "train" and self.dropout > 0:
            if rng is None:
                raise ValueError("train-mode head forward with dropout needs an rng")
            return T.dropout(x, self.dropout, rng)
        return x

    def transform(self, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        p = self.params
        h = T.leaky_relu(x @ p["transform.w1"] + p["transform.b1"], LEAKY_SLOPE)
        h = self._maybe_dropout(h, mode, rng)
        return h @ p["transform.w2"] + p["transform.b2"]

    def classifier(self, feature: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        p = self.params
        h = T.leaky_relu(feature @ p["classifier.w1"] + p["classifier.b1"], LEAKY_SLOPE)
        h = self._maybe_dropout(h, mode, rng)
        h = T.leaky_relu(h @ p["classifier.w2"] + p["classifier.b2"], LEAKY_SLOPE)
        h = self._maybe_dropout(h, mode, rng)
        return h @ p["classifier.w3"] + p["classifier.b3"]

    def forward(self, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """(feature at head_dim, 2-class logits), both [batch, .]."""
        feature = self.transform(x, mode, rng)
        return feature, self.classifier(feature, mode, rng)


def classify(v_table: Tensor, head: HeadStack, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    """2-class logits for one table vector."""
    if v_table.ndim == 1:
        if v_table.size != head.feature_dim:
            raise T.ShapeError(f"table vector has dim {v_table.size}, head expects {head.feature_dim}")
        v_table = v_table.reshape(1, v_table.size)
    _, logits = head.forward(v_table, mode, rng)
    return logits.reshape(2) if logits.shape[0] == 1 else logits
