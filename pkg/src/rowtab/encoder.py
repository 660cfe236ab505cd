"""Weight-shared transformer row encoder with cell-aware position embeddings.

Each table row is encoded independently into a fixed-dimension, query-agnostic
vector; no sequence ever exceeds the per-row length limit regardless of how
many rows a table has. Position information decomposes into four independently
switchable components: absolute index, cell index, intra-cell index, and an
attribute-keyed bucket. With both order-bearing inter-cell components
(absolute, cell index) disabled, the encoding is invariant to column order.

The same architecture instantiates the query encoder and the whole-table
query-aware encoder used as a distillation teacher.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special as _sp

from . import tensor as T
from .data import NON_CELL, Table, TokenizedRow, Vocabulary, serialize_query, serialize_row
from .tensor import Tensor

__all__ = [
    "PositionSwitches", "EncoderConfig", "PackedRows", "pack_rows",
    "compose_position_embedding", "pool", "RowEncoder", "RowVector",
    "encode_rows", "encode_row", "encode_query",
    "ModelCheckpoint", "save_checkpoint", "load_checkpoint",
    "checkpoint_checksum", "encoder_fingerprint",
    "CheckpointError", "ChecksumMismatchError", "MissingTensorError",
    "TensorShapeError", "EmbeddingRangeError",
]

CHECKPOINT_MAGIC = b"RTCK"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {"f": {4: 0, 8: 1}}

_NEG_INF = -1e9


class CheckpointError(ValueError):
    """Checkpoint file cannot be parsed or does not match its config echo."""


class ChecksumMismatchError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass


class TensorShapeError(CheckpointError):
    pass


class EmbeddingRangeError(IndexError):
    """An annotation index falls outside its embedding table (never clamped)."""


@dataclass(frozen=True)
class PositionSwitches:
    absolute: bool = True
    cell_index: bool = True
    intra_cell: bool = True
    attribute: bool = False

    def to_dict(self) -> dict:
        return {
            "absolute": self.absolute,
            "cell_index": self.cell_index,
            "intra_cell": self.intra_cell,
            "attribute": self.attribute,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PositionSwitches":
        return cls(**d)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    max_len: int = 128
    positions: PositionSwitches = field(default_factory=PositionSwitches)
    pooling: str = "mean"
    dropout: float = 0.0
    attribute_buckets: int = 1024

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.pooling not in ("mean", "cls"):
            raise ValueError(f"pooling must be 'mean' or 'cls', got {self.pooling!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_len < 2:
            raise ValueError(f"max_len must be >= 2, got {self.max_len}")
        if self.vocab_size < 5:
            raise ValueError(f"vocab_size must cover the reserved tokens, got {self.vocab_size}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "dim": self.dim,
            "layers": self.layers,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "max_len": self.max_len,
            "positions": self.positions.to_dict(),
            "pooling": self.pooling,
            "dropout": self.dropout,
            "attribute_buckets": self.attribute_buckets,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["positions"] = PositionSwitches.from_dict(d.get("positions", {}))
        return cls(**d)

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        """Name -> shape for every parameter this config implies."""
        dim, ffn = self.dim, self.ffn_dim
        shapes: dict[str, tuple[int, ...]] = {"tok_emb": (self.vocab_size, dim)}
        # Annotation index -1 (non-cell tokens) maps to a dedicated row 0,
        # so the shifted tables carry one extra row.
        if self.positions.absolute:
            shapes["pos_abs"] = (self.max_len, dim)
        if self.positions.cell_index:
            shapes["pos_cell"] = (self.max_len + 1, dim)
        if self.positions.intra_cell:
            shapes["pos_intra"] = (self.max_len + 1, dim)
        if self.positions.attribute:
            shapes["pos_attr"] = (self.attribute_buckets + 1, dim)
        for i in range(self.layers):
            p = f"layer{i}."
            for name in ("wq", "wk", "wv", "wo"):
                shapes[p + "attn." + name] = (dim, dim)
            for name in ("bq", "bk", "bv", "bo"):
                shapes[p + "attn." + name] = (dim,)
            shapes[p + "ln1.gain"] = (dim,)
            shapes[p + "ln1.bias"] = (dim,)
            shapes[p + "ffn.w1"] = (dim, ffn)
            shapes[p + "ffn.b1"] = (ffn,)
            shapes[p + "ffn.w2"] = (ffn, dim)
            shapes[p + "ffn.b2"] = (dim,)
            shapes[p + "ln2.gain"] = (dim,)
            shapes[p + "ln2.bias"] = (dim,)
        shapes["ln_f.gain"] = (dim,)
        shapes["ln_f.bias"] = (dim,)
        return shapes


@dataclass
class PackedRows:
    """A batch of tokenized sequences padded to a common length."""

    ids: np.ndarray            # [B, T] int64
    mask: np.ndarray           # [B, T] float, 1 at real tokens
    cell_index: np.ndarray     # [B, T] int64, NON_CELL at non-cell/pad
    intra_index: np.ndarray    # [B, T]
    attribute_id: np.ndarray   # [B, T]
    absolute_index: np.ndarray  # [B, T]

    @property
    def batch(self) -> int:
        return self.ids.shape[0]

    @property
    def length(self) -> int:
        return self.ids.shape[1]


def pack_rows(rows: list[TokenizedRow], pad_to: int | None = None) -> PackedRows:
    if not rows:
        raise ValueError("pack_rows needs at least one row")
    width = max(len(r) for r in rows)
    if pad_to is not None:
        if pad_to < width:
            raise ValueError(f"pad_to {pad_to} shorter than longest row {width}")
        width = pad_to
    n = len(rows)
    ids = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width), dtype=np.float32)
    cell = np.full((n, width), NON_CELL, dtype=np.int64)
    intra = np.full((n, width), NON_CELL, dtype=np.int64)
    attr = np.full((n, width), NON_CELL, dtype=np.int64)
    absolute = np.broadcast_to(np.arange(width, dtype=np.int64), (n, width)).copy()
    for i, row in enumerate(rows):
        k = len(row)
        ids[i, :k] = row.token_ids
        mask[i, :k] = 1.0
        cell[i, :k] = row.cell_index
        intra[i, :k] = row.intra_cell_index
        attr[i, :k] = row.attribute_id
        absolute[i, :k] = row.absolute_index
    return PackedRows(ids, mask, cell, intra, attr, absolute)


def _lookup_shifted(table: Tensor, raw_indices: np.ndarray, what: str) -> Tensor:
    # Sentinel NON_CELL (-1) selects row 0; real index j selects row j+1.
    shifted = raw_indices + 1
    if shifted.min() < 0 or shifted.max() >= table.shape[0]:
        raise EmbeddingRangeError(
            f"{what} index out of range: table has {table.shape[0]} rows, "
            f"got shifted index range [{shifted.min()}, {shifted.max()}]"
        )
    return T.embedding(table, shifted)


def compose_position_embedding(packed: PackedRows, config: EncoderConfig, params: dict[str, Tensor]) -> Tensor:
    """Sum of the enabled position components; disabled ones contribute exactly zero."""
    parts: list[Tensor] = []
    sw = config.positions
    if sw.absolute:
        if packed.absolute_index.max() >= config.max_len:
            raise EmbeddingRangeError(
                f"absolute index {packed.absolute_index.max()} >= max_len {config.max_len}"
            )
        parts.append(T.embedding(params["pos_abs"], packed.absolute_index))
    if sw.cell_index:
        parts.append(_lookup_shifted(params["pos_cell"], packed.cell_index, "cell"))
    if sw.intra_cell:
        parts.append(_lookup_shifted(params["pos_intra"], packed.intra_index, "intra-cell"))
    if sw.attribute:
        parts.append(_lookup_shifted(params["pos_attr"], packed.attribute_id, "attribute"))
    if not parts:
        dtype = params["tok_emb"].dtype
        return Tensor(np.zeros((packed.batch, packed.length, config.dim), dtype=dtype))
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def pool(hidden: Tensor, mask: np.ndarray, method: str) -> Tensor:
    """Reduce [B, T, dim] hidden states to [B, dim] per-sequence vectors."""
    if method not in ("mean", "cls"):
        raise ValueError(f"pooling must be 'mean' or 'cls', got {method!r}")
    if method == "cls":
        return hidden[:, 0, :]
    counts = mask.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("pool: a sequence has no unmasked positions")
    m = Tensor(mask[:, :, None].astype(hidden.dtype.type))
    inv = Tensor((1.0 / counts).astype(hidden.dtype.type))
    return (hidden * m).sum(axis=1) * inv


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    # Exact +-2 sigma truncated normal via inverse CDF; deterministic per rng.
    lo, hi = _sp.ndtr(-2.0), _sp.ndtr(2.0)
    u = rng.uniform(lo, hi, size=shape)
    return (std * _sp.ndtri(u)).astype(dtype)


class RowEncoder:
    """Pre-norm transformer encoder over packed token batches.

    ``calls`` counts encoded sequences (a batched forward of N rows counts N),
    which is what cache-hit assertions and the latency benchmark read.
    """

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.calls = 0
        self._calls_lock = threading.Lock()

    @classmethod
    def init(cls, config: EncoderConfig, seed: int, dtype=np.float32) -> "RowEncoder":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        for name, shape in config.expected_shapes().items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("bq", "bk", "bv", "bo", "b1", "b2", "bias"):
                data = np.zeros(shape, dtype=dtype)
            elif leaf == "gain":
                data = np.ones(shape, dtype=dtype)
            else:
                data = _trunc_normal(rng, shape, std=0.02, dtype=dtype)
            params[name] = Tensor(data, requires_grad=True)
        return cls(config, params)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def _count(self, n: int) -> None:
        with self._calls_lock:
            self.calls += n

    def reset_calls(self) -> None:
        with self._calls_lock:
            self.calls = 0

    def _attention(self, h: Tensor, add_mask: Tensor, prefix: str) -> Tensor:
        cfg = self.config
        b, t, d = h.shape
        heads, dh = cfg.heads, cfg.dim // cfg.heads
        p = self.params

        def proj(name: str) -> Tensor:
            x = h @ p[prefix + "attn.w" + name] + p[prefix + "attn.b" + name]
            return T.transpose(x.reshape(b, t, heads, dh), (0, 2, 1, 3))

        q, k, v = proj("q"), proj("k"), proj("v")
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        scores = scores + add_mask
        probs = T.softmax(scores, axis=-1)
        ctx = T.transpose(probs @ v, (0, 2, 1, 3)).reshape(b, t, d)
        return ctx @ p[prefix + "attn.wo"] + p[prefix + "attn.bo"]

    def forward(self, packed: PackedRows, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        """Pooled [B, dim] vectors for a packed batch."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        cfg = self.config
        if packed.length > cfg.max_len:
            raise ValueError(f"sequence length {packed.length} exceeds max_len {cfg.max_len}")
        if packed.ids.max() >= cfg.vocab_size:
            raise EmbeddingRangeError(
                f"token id {packed.ids.max()} >= vocab_size {cfg.vocab_size}"
            )
        train = mode == "train"
        if train and cfg.dropout > 0 and rng is None:
            raise ValueError("train-mode forward with dropout needs an rng")
        p = self.params
        dtype = p["tok_emb"].dtype

        x = T.embedding(p["tok_emb"], packed.ids) + compose_position_embedding(packed, cfg, p)
        if train and cfg.dropout > 0:
            x = T.dropout(x, cfg.dropout, rng)
        add_mask = Tensor(((1.0 - packed.mask) * _NEG_INF).astype(dtype)[:, None, None, :])
        for i in range(cfg.layers):
            prefix = f"layer{i}."
            h = T.layer_norm(x, p[prefix + "ln1.gain"], p[prefix + "ln1.bias"])
            attn = self._attention(h, add_mask, prefix)
            if train and cfg.dropout > 0:
                attn = T.dropout(attn, cfg.dropout, rng)
            x = x + attn
            h = T.layer_norm(x, p[prefix + "ln2.gain"], p[prefix + "ln2.bias"])
            ff = T.gelu(h @ p[prefix + "ffn.w1"] + p[prefix + "ffn.b1"])
            ff = ff @ p[prefix + "ffn.w2"] + p[prefix + "ffn.b2"]
            if train and cfg.dropout > 0:
                ff = T.dropout(ff, cfg.dropout, rng)
            x = x + ff
        x = T.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])
        pooled = pool(x, packed.mask, cfg.pooling)
        self._count(packed.batch)
        return pooled

    # -- persistence -------------------------------------------------------

    def to_checkpoint(self) -> "ModelCheckpoint":
        tensors = {name: np.array(t.data, copy=True) for name, t in self.params.items()}
        return ModelCheckpoint(config=self.config.to_dict(), tensors=tensors,
                               checksum=checkpoint_checksum(tensors))

    @classmethod
    def from_checkpoint(cls, ckpt: "ModelCheckpoint") -> "RowEncoder":
        config = EncoderConfig.from_dict(ckpt.config)
        params = _tensors_from_checkpoint(ckpt.tensors, config.expected_shapes())
        return cls(config, params)

    def fingerprint(self) -> bytes:
        return encoder_fingerprint(self.config, {n: t.data for n, t in self.params.items()})


def _tensors_from_checkpoint(tensors: dict[str, np.ndarray], expected: dict[str, tuple[int, ...]]) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, shape in expected.items():
        if name not in tensors:
            raise MissingTensorError(f"checkpoint is missing tensor {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != shape:
            raise TensorShapeError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, config implies {shape}"
            )
        params[name] = Tensor(np.array(arr, copy=True), requires_grad=True)
    extra = set(tensors) - set(expected)
    if extra:
        raise TensorShapeError(f"checkpoint holds unexpected tensors: {sorted(extra)}")
    return params


@dataclass
class RowVector:
    """A query-agnostic row embedding plus the identity of what produced it."""

    table_id: str
    row_index: int
    vector: np.ndarray
    encoder_fingerprint: bytes


def encode_rows(
    table: Table,
    encoder: RowEncoder,
    vocab: Vocabulary,
    max_len: int | None = None,
    mode: str = "eval",
) -> np.ndarray:
    """All rows of a table as an [N, dim] array (one batched forward)."""
    max_len = encoder.config.max_len if max_len is None else max_len
    rows = [
        serialize_row(table.schema, row, vocab, max_len, encoder.config.attribute_buckets)
        for row in table.rows
    ]
    pooled = encoder.forward(pack_rows(rows), mode=mode)
    return pooled.data


def encode_row(
    table: Table,
    row_index: int,
    encoder: RowEncoder,
    vocab: Vocabulary,
    mode: str = "eval",
) -> RowVector:
    tok = serialize_row(table.schema, table.rows[row_index], vocab,
                        encoder.config.max_len, encoder.config.attribute_buckets)
    pooled = encoder.forward(pack_rows([tok]), mode=mode)
    return RowVector(
        table_id=table.table_id,
        row_index=row_index,
        vector=pooled.data[0],
        encoder_fingerprint=encoder.fingerprint(),
    )


def encode_query(
    text: str,
    encoder: RowEncoder,
    vocab: Vocabulary,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """[1, dim] query vector from the dedicated query encoder."""
    tok = serialize_query(text, vocab, encoder.config.max_len)
    return encoder.forward(pack_rows([tok]), mode=mode, rng=rng)


# -- checkpoint file format ----------------------------------------------------
#
# magic "RTCK" | u16 version | u32 config length | canonical-JSON config |
# u32 tensor count | per tensor (name-sorted): u16 name length | name UTF-8 |
# u8 dtype tag (0=f32, 1=f64) | u8 ndim | u32 per dim | little-endian payload |
# trailing u32 CRC32 over all payload bytes. All integers little-endian.


@dataclass
class ModelCheckpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    checksum: str

    @classmethod
    def snapshot(cls, config: dict, named: dict[str, Tensor | np.ndarray]) -> "ModelCheckpoint":
        tensors = {
            name: np.array(t.data if isinstance(t, Tensor) else t, copy=True)
            for name, t in named.items()
        }
        return cls(config=config, tensors=tensors, checksum=checkpoint_checksum(tensors))


def checkpoint_checksum(tensors: dict[str, np.ndarray]) -> str:
    """SHA-256 over every tensor's little-endian payload, in name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = tensors[name]
        h.update(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()


def canonical_config_json(config: dict) -> bytes:
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encoder_fingerprint(config: EncoderConfig | dict, tensors: dict[str, np.ndarray]) -> bytes:
    """32-byte SHA-256 digest of (canonical config JSON || weights checksum).

    Any change to the encoder config or any weight byte changes the digest;
    the representation store refuses lookups under a different fingerprint.
    """
    cfg = config.to_dict() if isinstance(config, EncoderConfig) else config
    checksum = checkpoint_checksum(tensors)
    return hashlib.sha256(canonical_config_json(cfg) + bytes.fromhex(checksum)).digest()


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> Path:
    path = Path(path)
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<H", CHECKPOINT_VERSION)
    cfg = canonical_config_json(ckpt.config)
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    blob += struct.pack("<I", len(ckpt.tensors))
    crc = 0
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        if arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8):
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        tag = _TAG_FOR_KIND["f"][arr.dtype.itemsize]
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", tag, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        blob += payload
        crc = zlib.crc32(payload, crc)
    blob += struct.pack("<I", crc)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint file truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    config = json.loads(r.take(cfg_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    crc = 0
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for tensor {name!r}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dtype = _DTYPE_TAGS[tag]
        payload = r.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
        crc = zlib.crc32(payload, crc)
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    (stored_crc,) = r.unpack("<I")
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    if stored_crc != crc:
        raise ChecksumMismatchError(f"{path}: payload CRC mismatch (stored {stored_crc:#010x}, computed {crc:#010x})")
    return ModelCheckpoint(config=config, tensors=tensors, checksum=checkpoint_checksum(tensors))
