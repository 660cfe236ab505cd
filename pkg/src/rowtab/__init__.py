"""Row-based table representation learning.

Tables are encoded one row at a time by a weight-shared transformer into
query-agnostic vectors that can be cached and reused; answering a query then
costs only a query encoding plus a permutation-invariant aggregation and a
small classifier. Includes the numerics substrate (tape autodiff, AdamW,
cosine schedule), the data model and synthetic fact-verification generator,
cell-aware position embeddings, phi/rho aggregation variants, teacher-student
distillation with selective backward, a persistent representation store, and
a cold-vs-warm latency benchmark.
"""

from .tensor import Tensor, Tape, backward
from .data import (
    Table,
    Statement,
    Vocabulary,
    TokenizedRow,
    tokenize,
    build_vocab,
    serialize_cell,
    serialize_row,
    serialize_query,
    serialize_table_with_query,
    SyntheticConfig,
    generate_synthetic,
)
from .encoder import (
    EncoderConfig,
    PositionSwitches,
    RowEncoder,
    RowVector,
    ModelCheckpoint,
    save_checkpoint,
    load_checkpoint,
    encode_rows,
    encode_row,
    encode_query,
    encoder_fingerprint,
)
from .aggregation import (
    AggregationSpec,
    AggregationParams,
    HeadStack,
    ngram_set,
    ngram_similarity,
    apply_phi,
    apply_rho,
    table_representation,
    classify,
)
from .training import (
    DistillationWeights,
    TrainConfig,
    StudentModel,
    TeacherModel,
    combined_loss,
    select_rows,
    split_statements,
    RunMetrics,
    fit_student,
    fit_teacher,
    run_experiment,
    default_experiment_config,
)
from .repstore import RepStore, store_put, store_get
from .bench import bench, BenchReport

__version__ = "0.1.0"
