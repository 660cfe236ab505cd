"""Persistent store of query-agnostic row vectors, keyed by (table_id, row).

File format (all integers little-endian)::

    magic "ROTR" | u16 version=1 | u32 dim | u32 table count |
    32-byte encoder fingerprint |
    per table (sorted by id): u16 id length | UTF-8 id | u32 row count |
        row-major float32 payload |
    trailing u32 CRC32 over every preceding byte

The header fingerprint identifies the encoder config and weights that
produced the vectors; puts and gets under any other fingerprint are refused,
so a retrained or reconfigured encoder can never silently read stale vectors.
Many concurrent readers are fine; writes take an advisory lock file.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

__all__ = [
    "RepStore", "store_put", "store_get",
    "StoreError", "StaleCacheError", "TableNotFoundError", "StoreLockedError",
    "FINGERPRINT_BYTES",
]

STORE_MAGIC = b"ROTR"
STORE_VERSION = 1
FINGERPRINT_BYTES = 32


class StoreError(ValueError):
    """The store file is malformed or an operation violates its contract."""


class StaleCacheError(StoreError):
    """The caller's encoder fingerprint does not match the store header."""


class TableNotFoundError(KeyError):
    pass


class StoreLockedError(RuntimeError):
    pass


class RepStore:
    """In-memory map of table id -> [N, dim] float32 vectors, bound to a file."""

    def __init__(self, path: str | Path, dim: int, fingerprint: bytes):
        if len(fingerprint) != FINGERPRINT_BYTES:
            raise StoreError(f"fingerprint must be {FINGERPRINT_BYTES} bytes, got {len(fingerprint)}")
        if dim < 1:
            raise StoreError(f"dim must be >= 1, got {dim}")
        self.path = Path(path)
        self.dim = int(dim)
        self.fingerprint = bytes(fingerprint)
        self._tables: dict[str, np.ndarray] = {}

    def __contains__(self, table_id: str) -> bool:
        return table_id in self._tables

    def __len__(self) -> int:
        return len(self._tables)

    @property
    def row_count(self) -> int:
        return sum(v.shape[0] for v in self._tables.values())

    def _check_fingerprint(self, fingerprint: bytes, op: str) -> None:
        if bytes(fingerprint) != self.fingerprint:
            raise StaleCacheError(
                f"store {op} refused: fingerprint {bytes(fingerprint).hex()[:16]}... does not match "
                f"store header {self.fingerprint.hex()[:16]}..."
            )

    def put(self, table_id: str, vectors: np.ndarray, fingerprint: bytes) -> None:
        self._check_fingerprint(fingerprint, "put")
        arr = np.ascontiguousarray(vectors, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise StoreError(f"vectors for {table_id!r} have shape {arr.shape}, store dim is {self.dim}")
        if arr.shape[0] < 1:
            raise StoreError(f"vectors for {table_id!r} are empty")
        self._tables[table_id] = arr

    def get(self, table_id: str, fingerprint: bytes) -> np.ndarray:
        self._check_fingerprint(fingerprint, "get")
        if table_id not in self._tables:
            raise TableNotFoundError(f"table {table_id!r} not in store {self.path}")
        return self._tables[table_id]

    # -- persistence -------------------------------------------------------

    def save(self) -> Path:
        blob = bytearray()
        blob += STORE_MAGIC
        blob += struct.pack("<H", STORE_VERSION)
        blob += struct.pack("<I", self.dim)
        blob += struct.pack("<I", len(self._tables))
        blob += self.fingerprint
        for table_id in sorted(self._tables):
            vectors = self._tables[table_id]
            encoded = table_id.encode("utf-8")
            blob += struct.pack("<H", len(encoded))
            blob += encoded
            blob += struct.pack("<I", vectors.shape[0])
            blob += vectors.astype("<f4", copy=False).tobytes()
        blob += struct.pack("<I", zlib.crc32(bytes(blob)))
        self.path.parent.mkdir(parents=True, exist_ok=True)
        lock = self.path.with_name(self.path.name + ".lock")
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StoreLockedError(f"store {self.path} is locked by another writer ({lock})")
        try:
            tmp = self.path.with_name(self.path.name + ".tmp")
            tmp.write_bytes(bytes(blob))
            tmp.replace(self.path)
        finally:
            os.close(fd)
            lock.unlink(missing_ok=True)
        return self.path

    @classmethod
    def open(cls, path: str | Path) -> "RepStore":
        path = Path(path)
        blob = path.read_bytes()
        if len(blob) < 4 + 2 + 4 + 4 + FINGERPRINT_BYTES + 4:
            raise StoreError(f"{path}: file too short to be a representation store")
        if blob[:4] != STORE_MAGIC:
            raise StoreError(f"{path}: not a representation store (bad magic)")
        stored_crc = struct.unpack("<I", blob[-4:])[0]
        if zlib.crc32(blob[:-4]) != stored_crc:
            raise StoreError(f"{path}: CRC mismatch, store file is corrupt")
        pos = 4
        (version,) = struct.unpack_from("<H", blob, pos); pos += 2
        if version != STORE_VERSION:
            raise StoreError(f"{path}: unsupported store version {version}")
        (dim,) = struct.unpack_from("<I", blob, pos); pos += 4
        (count,) = struct.unpack_from("<I", blob, pos); pos += 4
        fingerprint = blob[pos:pos + FINGERPRINT_BYTES]; pos += FINGERPRINT_BYTES
        store = cls(path, dim, fingerprint)
        for _ in range(count):
            (id_len,) = struct.unpack_from("<H", blob, pos); pos += 2
            table_id = blob[pos:pos + id_len].decode("utf-8"); pos += id_len
            (rows,) = struct.unpack_from("<I", blob, pos); pos += 4
            nbytes = rows * dim * 4
            vectors = np.frombuffer(blob, dtype="<f4", count=rows * dim, offset=pos).reshape(rows, dim)
            pos += nbytes
            store._tables[table_id] = vectors.astype(np.float32)
        if pos != len(blob) - 4:
            raise StoreError(f"{path}: table payloads do not fill the file")
        return store


def store_put(store: RepStore, table_id: str, row_vectors: np.ndarray, fingerprint: bytes) -> None:
    """Insert or replace a table's vectors and persist the store durably."""
    store.put(table_id, row_vectors, fingerprint)
    store.save()


def store_get(store: RepStore, table_id: str, fingerprint: bytes) -> np.ndarray:
    """Vectors in row order; refuses a fingerprint other than the header's."""
    return store.get(table_id, fingerprint)
