"""Teacher and student models, the combined distillation loss, selective
backward over sampled rows, and the training loop.

The student encodes every table row independently (query-agnostic), encodes
the query separately, and folds the two through the aggregation module. The
teacher is the same transformer family applied to one long query-aware
serialization of the whole table; it is trained first on the task, then
frozen, and the student optionally mimics its features or logits through the
combined loss  alpha * task(teacher) + beta * task(student) + gamma *
distance(teacher, student).

Selective backward detaches the row vectors of non-sampled rows, so encoder
gradients flow only through the sampled subset while forward values, and the
gradients of the aggregation and head parameters, are unaffected.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .aggregation import (
    AggregationParams,
    AggregationSpec,
    HeadStack,
    ngram_similarity,
    table_representation,
)
from .data import (
    Statement,
    Table,
    Vocabulary,
    build_vocab,
    row_text,
    serialize_query,
    serialize_row,
    serialize_table_with_query,
)
from .encoder import (
    EncoderConfig,
    ModelCheckpoint,
    PackedRows,
    RowEncoder,
    _tensors_from_checkpoint,
    pack_rows,
)
from .optim import AdamW, cosine_lr
from .tensor import Tape, Tensor, backward, cross_entropy, mse
from .threads import single_threaded_blas

__all__ = [
    "DistillationWeights", "TrainConfig", "TeacherModel", "StudentModel",
    "StudentOutput", "TrainingDivergedError", "combined_loss",
    "combined_loss_terms", "select_rows", "split_statements",
    "EpochMetrics", "RunMetrics", "fit_teacher", "fit_student",
    "default_experiment_config", "merge_config", "run_experiment",
    "ExperimentResult",
]


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


@dataclass(frozen=True)
class DistillationWeights:
    alpha: float = 0.0
    beta: float = 1.0
    gamma: float = 0.0
    distance_target: str = "logits"

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("distillation weights must be nonnegative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ValueError("at least one distillation weight must be nonzero")
        if self.distance_target not in ("features", "logits"):
            raise ValueError(f"distance_target must be 'features' or 'logits', got {self.distance_target!r}")

    @property
    def needs_teacher(self) -> bool:
        return self.alpha > 0 or self.gamma > 0

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
                "distance_target": self.distance_target}

    @classmethod
    def from_dict(cls, d: dict) -> "DistillationWeights":
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    virtual_batch_size: int = 64
    micro_batch_size: int = 1
    lr: float = 2e-5
    lr_floor: float = 0.0
    weight_decay: float = 1e-5
    warmup_epochs: int = 2
    early_stop_patience: int = 8
    selective_mode: str = "off"   # off | random | ngram_weighted
    selective_rows: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.virtual_batch_size % self.micro_batch_size != 0:
            raise ValueError(
                f"micro_batch_size {self.micro_batch_size} must divide "
                f"virtual_batch_size {self.virtual_batch_size}"
            )
        if self.selective_mode not in ("off", "random", "ngram_weighted"):
            raise ValueError(f"unknown selective_mode {self.selective_mode!r}")
        if self.selective_mode != "off" and self.selective_rows < 1:
            raise ValueError("selective_rows must be >= 1 when selective backward is on")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "virtual_batch_size": self.virtual_batch_size,
            "micro_batch_size": self.micro_batch_size, "lr": self.lr,
            "lr_floor": self.lr_floor, "weight_decay": self.weight_decay,
            "warmup_epochs": self.warmup_epochs,
            "early_stop_patience": self.early_stop_patience,
            "selective_mode": self.selective_mode,
            "selective_rows": self.selective_rows, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# -- models ---------------------------------------------------------------------


@dataclass
class StudentOutput:
    feature: Tensor      # [1, head_dim]
    logits: Tensor       # [1, 2]
    row_vectors: np.ndarray  # [N, dim], detached values


@dataclass
class _PreparedStatement:
    statement: Statement
    label: int
    packed_rows: PackedRows | None     # shared per table (student)
    row_texts: list[str] | None
    packed_query: PackedRows | None
    teacher_packed: PackedRows | None  # whole-table serialization (teacher)


class StudentModel:
    """Row encoder + query encoder + aggregation + head, as one unit.

    With a text-similarity phi the query vector never enters the computation,
    so the query encoder is skipped entirely and excluded from the trainable
    parameters.
    """

    def __init__(
        self,
        encoder: RowEncoder,
        query_encoder: RowEncoder,
        agg_spec: AggregationSpec,
        agg_params: AggregationParams,
        head: HeadStack,
        vocab: Vocabulary,
    ):
        if encoder.config.dim != query_encoder.config.dim:
            raise ValueError("row and query encoders must share the hidden dimension")
        self.encoder = encoder
        self.query_encoder = query_encoder
        self.agg_spec = agg_spec
        self.agg_params = agg_params
        self.head = head
        self.vocab = vocab

    @classmethod
    def init(
        cls,
        encoder_config: EncoderConfig,
        query_config: EncoderConfig,
        agg_spec: AggregationSpec,
        head_dim: int,
        vocab: Vocabulary,
        seed: int,
        head_dropout: float = 0.1,
        dtype=np.float32,
    ) -> "StudentModel":
        seeds = np.random.SeedSequence(seed).generate_state(4)
        encoder = RowEncoder.init(encoder_config, int(seeds[0]), dtype=dtype)
        query_encoder = RowEncoder.init(query_config, int(seeds[1]), dtype=dtype)
        agg_params = AggregationParams.init(agg_spec, encoder_config.dim, int(seeds[2]), dtype=dtype)
        head = HeadStack.init(encoder_config.dim, head_dim, int(seeds[3]), dropout=head_dropout, dtype=dtype)
        return cls(encoder, query_encoder, agg_spec, agg_params, head, vocab)

    @property
    def uses_query_encoder(self) -> bool:
        return not self.agg_spec.needs_text

    def named_parameters(self) -> dict[str, Tensor]:
        params = {f"encoder.{n}": p for n, p in self.encoder.named_parameters().items()}
        if self.uses_query_encoder:
            params.update({f"query.{n}": p for n, p in self.query_encoder.named_parameters().items()})
        params.update({f"agg.{n}": p for n, p in self.agg_params.named_parameters().items()})
        params.update({f"head.{n}": p for n, p in self.head.named_parameters().items()})
        return params

    def prepare_table(self, table: Table, include_texts: bool | None = None) -> tuple[PackedRows, list[str] | None]:
        cfg = self.encoder.config
        rows = [
            serialize_row(table.schema, row, self.vocab, cfg.max_len, cfg.attribute_buckets)
            for row in table.rows
        ]
        if include_texts is None:
            include_texts = self.agg_spec.needs_text
        texts = [row_text(table, i) for i in range(table.n_rows)] if include_texts else None
        return pack_rows(rows), texts

    def prepare_query(self, statement: Statement) -> PackedRows | None:
        if not self.uses_query_encoder:
            return None
        return pack_rows([
            serialize_query(statement.text, self.vocab, self.query_encoder.config.max_len)
        ])

    def prepare(self, table: Table, statement: Statement,
                include_texts: bool | None = None) -> _PreparedStatement:
        packed_rows, texts = self.prepare_table(table, include_texts)
        return _PreparedStatement(
            statement=statement,
            label=int(statement.label),
            packed_rows=packed_rows,
            row_texts=texts,
            packed_query=self.prepare_query(statement),
            teacher_packed=None,
        )

    def forward(
        self,
        table: Table,
        statement: Statement,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        selected: np.ndarray | None = None,
        row_vectors: np.ndarray | None = None,
    ) -> StudentOutput:
        prep = self.prepare(table, statement)
        return self.forward_prepared(prep, mode=mode, rng=rng, selected=selected, row_vectors=row_vectors)

    def forward_prepared(
        self,
        prep: _PreparedStatement,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        selected: np.ndarray | None = None,
        row_vectors: np.ndarray | None = None,
    ) -> StudentOutput:
        if row_vectors is not None:
            rows = Tensor(np.asarray(row_vectors))
        else:
            rows = self.encoder.forward(prep.packed_rows, mode=mode, rng=rng)
        n = rows.shape[0]
        rows_in: Tensor | list[Tensor] = rows
        if selected is not None:
            chosen = {int(i) for i in np.asarray(selected).ravel()}
            bad = [i for i in chosen if not 0 <= i < n]
            if bad:
                raise ValueError(f"selected row indices out of range: {bad}")
            if not chosen:
                raise ValueError("selected row set is empty")
            rows_in = [rows[i:i + 1, :] if i in chosen else rows[i:i + 1, :].detach() for i in range(n)]
        v_q = None
        if self.uses_query_encoder:
            v_q = self.query_encoder.forward(prep.packed_query, mode=mode, rng=rng)
        v_table = table_representation(
            rows_in, prep.row_texts, v_q, prep.statement.text, self.agg_spec, self.agg_params,
        )
        feature, logits = self.head.forward(v_table.reshape(1, v_table.size), mode=mode, rng=rng)
        return StudentOutput(feature=feature, logits=logits,
                             row_vectors=rows.data if row_vectors is None else np.asarray(row_vectors))

    def forward_vectors(
        self,
        statement: Statement,
        row_vectors: np.ndarray,
        row_texts: list[str] | None = None,
    ) -> StudentOutput:
        """Warm path: score a statement from stored row vectors, no row encoding."""
        prep = _PreparedStatement(
            statement=statement, label=int(statement.label), packed_rows=None,
            row_texts=row_texts, packed_query=self.prepare_query(statement),
            teacher_packed=None,
        )
        return self.forward_prepared(prep, mode="eval", row_vectors=row_vectors)

    def fingerprint(self) -> bytes:
        return self.encoder.fingerprint()

    def to_checkpoint(self) -> ModelCheckpoint:
        config = {
            "kind": "student",
            "encoder": self.encoder.config.to_dict(),
            "query_encoder": self.query_encoder.config.to_dict(),
            "aggregation": self.agg_spec.to_dict(),
            "head": {"feature_dim": self.head.feature_dim, "head_dim": self.head.head_dim,
                     "dropout": self.head.dropout},
            "vocab": self.vocab.to_list(),
        }
        named: dict[str, Tensor] = {}
        named.update({f"encoder.{n}": p for n, p in self.encoder.named_parameters().items()})
        named.update({f"query.{n}": p for n, p in self.query_encoder.named_parameters().items()})
        named.update({f"agg.{n}": p for n, p in self.agg_params.named_parameters().items()})
        named.update({f"head.{n}": p for n, p in self.head.named_parameters().items()})
        return ModelCheckpoint.snapshot(config, named)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "StudentModel":
        if ckpt.config.get("kind") != "student":
            raise ValueError(f"not a student checkpoint (kind={ckpt.config.get('kind')!r})")
        enc_cfg = EncoderConfig.from_dict(ckpt.config["encoder"])
        q_cfg = EncoderConfig.from_dict(ckpt.config["query_encoder"])
        spec = AggregationSpec.from_dict(ckpt.config["aggregation"])
        head_cfg = ckpt.config["head"]
        vocab = Vocabulary.from_list(ckpt.config["vocab"])

        def section(prefix: str) -> dict[str, np.ndarray]:
            plen = len(prefix)
            return {n[plen:]: a for n, a in ckpt.tensors.items() if n.startswith(prefix)}

        encoder = RowEncoder(enc_cfg, _tensors_from_checkpoint(section("encoder."), enc_cfg.expected_shapes()))
        query_encoder = RowEncoder(q_cfg, _tensors_from_checkpoint(section("query."), q_cfg.expected_shapes()))
        agg_params = AggregationParams.from_tensors(spec, enc_cfg.dim, section("agg."))
        head = HeadStack.from_tensors(head_cfg["feature_dim"], head_cfg["head_dim"],
                                      section("head."), dropout=head_cfg.get("dropout", 0.1))
        return cls(encoder, query_encoder, spec, agg_params, head, vocab)


class TeacherModel:
    """Query-aware whole-table encoder plus head; the distillation teacher."""

    def __init__(self, encoder: RowEncoder, head: HeadStack, vocab: Vocabulary):
        self.encoder = encoder
        self.head = head
        self.vocab = vocab

    @classmethod
    def init(cls, encoder_config: EncoderConfig, head_dim: int, vocab: Vocabulary,
             seed: int, head_dropout: float = 0.1, dtype=np.float32) -> "TeacherModel":
        seeds = np.random.SeedSequence(seed).generate_state(2)
        encoder = RowEncoder.init(encoder_config, int(seeds[0]), dtype=dtype)
        head = HeadStack.init(encoder_config.dim, head_dim, int(seeds[1]), dropout=head_dropout, dtype=dtype)
        return cls(encoder, head, vocab)

    def named_parameters(self) -> dict[str, Tensor]:
        params = {f"encoder.{n}": p for n, p in self.encoder.named_parameters().items()}
        params.update({f"head.{n}": p for n, p in self.head.named_parameters().items()})
        return params

    def prepare(self, table: Table, statement: Statement) -> PackedRows:
        cfg = self.encoder.config
        seq = serialize_table_with_query(table, statement, self.vocab, cfg.max_len, cfg.attribute_buckets)
        return pack_rows([seq])

    def forward(self, table: Table, statement: Statement, mode: str = "eval",
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        return self.forward_packed(self.prepare(table, statement), mode=mode, rng=rng)

    def forward_packed(self, packed: PackedRows, mode: str = "eval",
                       rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        pooled = self.encoder.forward(packed, mode=mode, rng=rng)
        return self.head.forward(pooled, mode=mode, rng=rng)

    def to_checkpoint(self) -> ModelCheckpoint:
        config = {
            "kind": "teacher",
            "encoder": self.encoder.config.to_dict(),
            "head": {"feature_dim": self.head.feature_dim, "head_dim": self.head.head_dim,
                     "dropout": self.head.dropout},
            "vocab": self.vocab.to_list(),
        }
        named: dict[str, Tensor] = {}
        named.update({f"encoder.{n}": p for n, p in self.encoder.named_parameters().items()})
        named.update({f"head.{n}": p for n, p in self.head.named_parameters().items()})
        return ModelCheckpoint.snapshot(config, named)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "TeacherModel":
        if ckpt.config.get("kind") != "teacher":
            raise ValueError(f"not a teacher checkpoint (kind={ckpt.config.get('kind')!r})")
        enc_cfg = EncoderConfig.from_dict(ckpt.config["encoder"])
        head_cfg = ckpt.config["head"]
        vocab = Vocabulary.from_list(ckpt.config["vocab"])

        def section(prefix: str) -> dict[str, np.ndarray]:
            plen = len(prefix)
            return {n[plen:]: a for n, a in ckpt.tensors.items() if n.startswith(prefix)}

        encoder = RowEncoder(enc_cfg, _tensors_from_checkpoint(section("encoder."), enc_cfg.expected_shapes()))
        head = HeadStack.from_tensors(head_cfg["feature_dim"], head_cfg["head_dim"],
                                      section("head."), dropout=head_cfg.get("dropout", 0.1))
        return cls(encoder, head, vocab)


# -- loss ------------------------------------------------------------------------


def combined_loss_terms(
    weights: DistillationWeights,
    teacher_out: tuple[Tensor, Tensor] | None,
    student_out: tuple[Tensor, Tensor] | StudentOutput,
    label,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted total loss plus the raw per-term values for metrics."""
    if weights.needs_teacher and teacher_out is None:
        raise ValueError("combined_loss: teacher outputs required when alpha > 0 or gamma > 0")
    if isinstance(student_out, StudentOutput):
        s_feat, s_logits = student_out.feature, student_out.logits
    else:
        s_feat, s_logits = student_out
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    components = {"task_teacher": 0.0, "task_student": 0.0, "distance": 0.0}

    s_ce = cross_entropy(s_logits, labels)
    components["task_student"] = s_ce.item()
    terms: list[Tensor] = []
    if weights.beta != 0:
        terms.append(s_ce * weights.beta)
    if teacher_out is not None and weights.needs_teacher:
        t_feat, t_logits = teacher_out
        t_ce = cross_entropy(t_logits, labels)
        components["task_teacher"] = t_ce.item()
        if weights.alpha != 0:
            terms.append(t_ce * weights.alpha)
        if weights.gamma != 0:
            if weights.distance_target == "features":
                dist = mse(s_feat, t_feat)
            else:
                dist = mse(s_logits, t_logits)
            components["distance"] = dist.item()
            terms.append(dist * weights.gamma)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, components


def combined_loss(
    weights: DistillationWeights,
    teacher_out: tuple[Tensor, Tensor] | None,
    student_out: tuple[Tensor, Tensor] | StudentOutput,
    label,
) -> Tensor:
    total, _ = combined_loss_terms(weights, teacher_out, student_out, label)
    return total


# -- selective backward -----------------------------------------------------------

SIMILARITY_SMOOTHING = 1e-6


def select_rows(
    n_rows: int,
    k: int,
    mode: str,
    row_texts: list[str] | None = None,
    q_text: str | None = None,
    spec: AggregationSpec | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """K distinct row indices to backpropagate through (all, if k >= n).

    'random' samples uniformly without replacement; 'ngram_weighted' samples
    without replacement proportionally to the row/query n-gram similarity plus
    a small smoothing term so zero-similarity rows stay reachable.
    """
    if n_rows < 1:
        raise ValueError("select_rows needs at least one row")
    if k < 1:
        raise ValueError("select_rows needs k >= 1")
    if mode not in ("random", "ngram_weighted"):
        raise ValueError(f"unknown selection mode {mode!r}")
    if k >= n_rows:
        return np.arange(n_rows)
    if rng is None:
        raise ValueError("select_rows needs an rng")
    if mode == "random":
        picks = rng.choice(n_rows, size=k, replace=False)
        return np.sort(picks)
    if row_texts is None or q_text is None:
        raise ValueError("ngram_weighted selection needs row texts and the query text")
    spec = spec or AggregationSpec()
    weights = np.array(
        [ngram_similarity(t, q_text, spec.ngram_order, spec.ngram_unit) for t in row_texts],
        dtype=np.float64,
    ) + SIMILARITY_SMOOTHING
    picks = rng.choice(n_rows, size=k, replace=False, p=weights / weights.sum())
    return np.sort(picks)


# -- training loop -----------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    task_teacher: float
    task_student: float
    distance: float
    val_accuracy: float
    lr: float
    seconds: float


@dataclass
class RunMetrics:
    epochs: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = 0.0
    stopped_early: bool = False

    CSV_HEADER = "epoch,task_T,task_S,distance,val_acc,lr,seconds"

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        lines = [self.CSV_HEADER]
        for e in self.epochs:
            lines.append(
                f"{e.epoch},{e.task_teacher:.8f},{e.task_student:.8f},{e.distance:.8f},"
                f"{e.val_accuracy:.6f},{e.lr:.10g},{e.seconds:.4f}"
            )
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def summary(self) -> dict:
        return {
            "epochs_run": len(self.epochs),
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "stopped_early": self.stopped_early,
        }

    def loss_trace(self) -> list[tuple[float, float, float]]:
        return [(e.task_teacher, e.task_student, e.distance) for e in self.epochs]

    def comparable_rows(self) -> list[tuple]:
        """Everything except wall-clock timings (for determinism checks)."""
        return [
            (e.epoch, e.task_teacher, e.task_student, e.distance, e.val_accuracy, e.lr)
            for e in self.epochs
        ]


def split_statements(statements: list[Statement], val_mod: int = 10) -> tuple[list[Statement], list[Statement]]:
    """Deterministic 1/val_mod validation split keyed on statement id hashes."""
    train, val = [], []
    for s in statements:
        digest = hashlib.sha256(s.statement_id.encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:8], "little") % val_mod
        (val if bucket == 0 else train).append(s)
    return train, val


class _StudentTask:
    def __init__(
        self,
        student: StudentModel,
        weights: DistillationWeights,
        teacher_cache: dict[str, tuple[np.ndarray, np.ndarray]] | None,
        config: TrainConfig,
    ):
        self.student = student
        self.weights = weights
        self.teacher_cache = teacher_cache
        self.config = config

    def named_parameters(self):
        return self.student.named_parameters()

    def loss(self, prep: _PreparedStatement, rng: np.random.Generator,
             select_rng: np.random.Generator) -> tuple[Tensor, dict[str, float]]:
        selected = None
        if self.config.selective_mode != "off":
            selected = select_rows(
                prep.packed_rows.batch, self.config.selective_rows, self.config.selective_mode,
                row_texts=prep.row_texts, q_text=prep.statement.text,
                spec=self.student.agg_spec, rng=select_rng,
            )
        out = self.student.forward_prepared(prep, mode="train", rng=rng, selected=selected)
        teacher_out = None
        if self.weights.needs_teacher:
            feat, logits = self.teacher_cache[prep.statement.statement_id]
            teacher_out = (Tensor(feat), Tensor(logits))
        return combined_loss_terms(self.weights, teacher_out, out, prep.label)

    def predict(self, prep: _PreparedStatement) -> int:
        out = self.student.forward_prepared(prep, mode="eval")
        return int(np.argmax(out.logits.data[0]))


class _TeacherTask:
    def __init__(self, teacher: TeacherModel):
        self.teacher = teacher

    def named_parameters(self):
        return self.teacher.named_parameters()

    def loss(self, prep: _PreparedStatement, rng, select_rng) -> tuple[Tensor, dict[str, float]]:
        _, logits = self.teacher.forward_packed(prep.teacher_packed, mode="train", rng=rng)
        ce = cross_entropy(logits, np.asarray([prep.label]))
        return ce, {"task_teacher": ce.item(), "task_student": 0.0, "distance": 0.0}

    def predict(self, prep: _PreparedStatement) -> int:
        _, logits = self.teacher.forward_packed(prep.teacher_packed, mode="eval")
        return int(np.argmax(logits.data[0]))


def _fit(task, train_preps: list[_PreparedStatement], val_preps: list[_PreparedStatement],
         config: TrainConfig) -> RunMetrics:
    with single_threaded_blas():
        return _fit_inner(task, train_preps, val_preps, config)


def _fit_inner(task, train_preps: list[_PreparedStatement], val_preps: list[_PreparedStatement],
               config: TrainConfig) -> RunMetrics:
    params = task.named_parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    steps_per_epoch = max(1, math.ceil(len(train_preps) / config.virtual_batch_size))
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = min(config.warmup_epochs * steps_per_epoch, total_steps - 1)

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    shuffle_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])
    select_rng = np.random.default_rng(seeds[2])

    metrics = RunMetrics()
    best_snapshot: dict[str, np.ndarray] | None = None
    step_idx = 0
    lr_now = 0.0

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_preps))
        sums = {"task_teacher": 0.0, "task_student": 0.0, "distance": 0.0}
        for start in range(0, len(order), config.virtual_batch_size):
            virtual = order[start:start + config.virtual_batch_size]
            micro_count = 0
            for mstart in range(0, len(virtual), config.micro_batch_size):
                micro = virtual[mstart:mstart + config.micro_batch_size]
                with Tape():
                    total = None
                    for idx in micro:
                        loss, comps = task.loss(train_preps[idx], dropout_rng, select_rng)
                        for key in sums:
                            sums[key] += comps[key]
                        total = loss if total is None else total + loss
                    if len(micro) > 1:
                        total = total * (1.0 / len(micro))
                    if not np.isfinite(total.item()):
                        raise TrainingDivergedError(
                            f"loss became non-finite at epoch {epoch}, optimizer step {step_idx}"
                        )
                    backward(total)
                micro_count += 1
            inv = 1.0 / micro_count
            for p in params.values():
                if p.grad is not None:
                    p.grad = p.grad * inv
            lr_now = cosine_lr(min(step_idx + 1, total_steps), warmup_steps, total_steps,
                               config.lr, config.lr_floor)
            opt.step(lr=lr_now)
            opt.zero_grad()
            step_idx += 1

        correct = sum(1 for prep in val_preps if task.predict(prep) == prep.label)
        val_acc = correct / max(1, len(val_preps))
        denom = max(1, len(train_preps))
        metrics.epochs.append(EpochMetrics(
            epoch=epoch,
            task_teacher=sums["task_teacher"] / denom,
            task_student=sums["task_student"] / denom,
            distance=sums["distance"] / denom,
            val_accuracy=val_acc,
            lr=lr_now,
            seconds=time.perf_counter() - t0,
        ))
        if val_acc > metrics.best_val_accuracy or metrics.best_epoch < 0:
            metrics.best_val_accuracy = val_acc
            metrics.best_epoch = epoch
            best_snapshot = {n: p.data.copy() for n, p in params.items()}
        elif epoch - metrics.best_epoch >= config.early_stop_patience:
            metrics.stopped_early = True
            break

    if best_snapshot is not None:
        for name, p in params.items():
            p.data = best_snapshot[name].copy()
    return metrics


def fit_teacher(
    teacher: TeacherModel,
    tables: list[Table],
    train_statements: list[Statement],
    val_statements: list[Statement],
    config: TrainConfig,
) -> RunMetrics:
    by_id = {t.table_id: t for t in tables}

    def prep(s: Statement) -> _PreparedStatement:
        return _PreparedStatement(
            statement=s, label=int(s.label), packed_rows=None, row_texts=None,
            packed_query=None, teacher_packed=teacher.prepare(by_id[s.table_id], s),
        )

    return _fit(_TeacherTask(teacher), [prep(s) for s in train_statements],
                [prep(s) for s in val_statements], config)


def fit_student(
    student: StudentModel,
    tables: list[Table],
    train_statements: list[Statement],
    val_statements: list[Statement],
    config: TrainConfig,
    weights: DistillationWeights,
    teacher: TeacherModel | None = None,
) -> RunMetrics:
    """Train the student; the teacher, when needed, is frozen and precomputed."""
    by_id = {t.table_id: t for t in tables}
    include_texts = student.agg_spec.needs_text or config.selective_mode == "ngram_weighted"
    table_prepared: dict[str, tuple[PackedRows, list[str] | None]] = {}

    def prep(s: Statement) -> _PreparedStatement:
        if s.table_id not in table_prepared:
            table_prepared[s.table_id] = student.prepare_table(by_id[s.table_id], include_texts)
        packed_rows, texts = table_prepared[s.table_id]
        return _PreparedStatement(
            statement=s, label=int(s.label), packed_rows=packed_rows,
            row_texts=texts, packed_query=student.prepare_query(s), teacher_packed=None,
        )

    train_preps = [prep(s) for s in train_statements]
    val_preps = [prep(s) for s in val_statements]

    teacher_cache = None
    if weights.needs_teacher:
        if teacher is None:
            raise ValueError("distillation weights require a teacher model")
        teacher_cache = {}
        for s in train_statements + val_statements:
            feat, logits = teacher.forward(by_id[s.table_id], s, mode="eval")
            teacher_cache[s.statement_id] = (feat.data.copy(), logits.data.copy())

    task = _StudentTask(student, weights, teacher_cache, config)
    return _fit(task, train_preps, val_preps, config)


# -- experiment orchestration --------------------------------------------------------


def default_experiment_config() -> dict:
    """Toy-scale defaults sized for a laptop CPU; every section overridable."""
    return {
        "data": {"min_count": 1},
        "encoder": {
            "dim": 64, "layers": 2, "heads": 4, "ffn_dim": 256, "max_len": 128,
            "pooling": "mean", "dropout": 0.0, "attribute_buckets": 1024,
            "positions": {"absolute": True, "cell_index": True, "intra_cell": True, "attribute": False},
        },
        "query_encoder": {
            "dim": 64, "layers": 2, "heads": 4, "ffn_dim": 256, "max_len": 128,
            "pooling": "mean", "dropout": 0.0, "attribute_buckets": 1024,
            "positions": {"absolute": True, "cell_index": False, "intra_cell": True, "attribute": False},
        },
        "aggregation": {
            "phi": "mlp_rich", "rho": "max", "ngram_order": 1, "ngram_unit": "word",
            "threshold": 0.5, "heads": 4, "empty_fallback": "zero",
            "head_dim": 128, "head_dropout": 0.1,
        },
        "teacher": {
            "dim": 64, "layers": 2, "heads": 4, "ffn_dim": 256, "max_len": 512,
            "pooling": "mean", "dropout": 0.0, "attribute_buckets": 1024,
            "positions": {"absolute": True, "cell_index": True, "intra_cell": True, "attribute": False},
        },
        "train": {
            "epochs": 30, "virtual_batch_size": 64, "micro_batch_size": 1,
            "lr": 1e-3, "lr_floor": 0.0, "weight_decay": 1e-5, "warmup_epochs": 2,
            "early_stop_patience": 8, "selective_mode": "off", "selective_rows": 8,
            "seed": 17,
        },
        "distill": {"alpha": 0.0, "beta": 1.0, "gamma": 0.0, "distance_target": "logits"},
    }


def merge_config(base: dict, override: dict | None) -> dict:
    """Recursive dict merge; override wins on leaves."""
    if override is None:
        return base
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_config(merged[key], value)
        else:
            merged[key] = value
    return merged


@dataclass
class ExperimentResult:
    student: StudentModel
    teacher: TeacherModel | None
    student_metrics: RunMetrics
    teacher_metrics: RunMetrics | None
    config: dict


def run_experiment(
    tables: list[Table],
    statements: list[Statement],
    config: dict | None = None,
    teacher: TeacherModel | None = None,
) -> ExperimentResult:
    """Build vocab and models from a config dict, train, return everything.

    The teacher, when the distillation weights call for one and none is
    supplied, is trained first on the task and then frozen for the student
    run.
    """
    cfg = merge_config(default_experiment_config(), config)
    vocab = build_vocab(tables, statements, min_count=cfg["data"].get("min_count", 1))
    train_cfg = TrainConfig.from_dict(cfg["train"])
    weights = DistillationWeights.from_dict(cfg["distill"])

    agg_section = dict(cfg["aggregation"])
    head_dim = agg_section.pop("head_dim")
    head_dropout = agg_section.pop("head_dropout")
    agg_spec = AggregationSpec.from_dict(agg_section)

    enc_cfg = EncoderConfig.from_dict({**cfg["encoder"], "vocab_size": len(vocab)})
    q_cfg = EncoderConfig.from_dict({**cfg["query_encoder"], "vocab_size": len(vocab)})

    seeds = np.random.SeedSequence(train_cfg.seed).generate_state(4)
    student = StudentModel.init(enc_cfg, q_cfg, agg_spec, head_dim, vocab,
                                seed=int(seeds[0]), head_dropout=head_dropout)

    train_stmts, val_stmts = split_statements(statements)

    teacher_metrics = None
    if weights.needs_teacher and teacher is None:
        t_cfg = EncoderConfig.from_dict({**cfg["teacher"], "vocab_size": len(vocab)})
        teacher = TeacherModel.init(t_cfg, head_dim, vocab, seed=int(seeds[1]),
                                    head_dropout=head_dropout)
        teacher_metrics = fit_teacher(teacher, tables, train_stmts, val_stmts, train_cfg)

    student_metrics = fit_student(student, tables, train_stmts, val_stmts,
                                  train_cfg, weights, teacher)
    return ExperimentResult(student=student, teacher=teacher,
                            student_metrics=student_metrics,
                            teacher_metrics=teacher_metrics, config=cfg)
