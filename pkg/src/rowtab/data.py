"""Tables, statements, tokenization, row serialization, and dataset IO.

A table is a schema plus a grid of textual cells. Each cell serializes to
``[COL] <attribute tokens> [VAL] <value tokens>``; a row is the [CLS]-prefixed
concatenation of its cell serializations, annotated per token with the cell
index, the intra-cell index (reset to 0 at every [COL]), and a stable hash
bucket of the attribute name. Those annotations drive the cell-aware position
embeddings downstream.

Also provides a deterministic synthetic fact-verification dataset: statements
of the form "the A of the row where B is K is V", labelled by construction
and independently checkable with a brute-force table scan.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PAD", "UNK", "CLS", "COL", "VAL", "RESERVED_TOKENS", "NON_CELL",
    "Table", "Statement", "Vocabulary", "TokenizedRow",
    "DatasetError", "tokenize", "build_vocab", "attribute_bucket",
    "serialize_cell", "serialize_row", "serialize_query",
    "serialize_table_with_query", "row_text",
    "SyntheticConfig", "generate_synthetic", "evaluate_statement_by_scan",
    "save_dataset", "load_tables", "load_statements", "load_dataset",
]

PAD, UNK, CLS, COL, VAL = "[PAD]", "[UNK]", "[CLS]", "[COL]", "[VAL]"
RESERVED_TOKENS = {PAD: 0, UNK: 1, CLS: 2, COL: 3, VAL: 4}

# cell_index / intra_cell_index / attribute_id of tokens that belong to no cell
NON_CELL = -1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class DatasetError(ValueError):
    """Malformed dataset content or an unsatisfiable generator config."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace; punctuation marks become their own tokens."""
    return _TOKEN_RE.findall(text.lower())


def attribute_bucket(attribute: str, buckets: int = 1024) -> int:
    """Stable 64-bit hash of the attribute name reduced mod ``buckets``."""
    digest = hashlib.sha256(attribute.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % buckets


@dataclass
class Table:
    table_id: str
    schema: list[str]
    rows: list[list[str]]

    def __post_init__(self):
        if len(self.schema) < 1:
            raise DatasetError(f"table {self.table_id!r}: schema must have at least one attribute")
        if len(self.rows) < 1:
            raise DatasetError(f"table {self.table_id!r}: must have at least one row")
        width = len(self.schema)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise DatasetError(
                    f"table {self.table_id!r}: row {i} has {len(row)} cells, schema has {width}"
                )

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_cols(self) -> int:
        return len(self.schema)


@dataclass
class Statement:
    statement_id: str
    table_id: str
    text: str
    label: bool


class Vocabulary:
    """token -> id map with fixed reserved ids ([PAD]=0 ... [VAL]=4).

    Construction is deterministic: non-reserved tokens are ordered by
    (frequency desc, token asc), so rebuilding from the same corpus yields an
    identical vocabulary.
    """

    def __init__(self, ordered_tokens: list[str]):
        self.token_to_id: dict[str, int] = dict(RESERVED_TOKENS)
        for tok in ordered_tokens:
            if tok in self.token_to_id:
                raise DatasetError(f"duplicate or reserved token in vocabulary: {tok!r}")
            self.token_to_id[tok] = len(self.token_to_id)
        self.id_to_token: list[str] = [None] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            self.id_to_token[i] = tok

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: list[str]) -> list[int]:
        unk = RESERVED_TOKENS[UNK]
        return [self.token_to_id.get(t, unk) for t in tokens]

    def non_reserved(self) -> list[str]:
        return self.id_to_token[len(RESERVED_TOKENS):]

    def to_list(self) -> list[str]:
        """Non-reserved tokens in id order (the serializable part)."""
        return self.non_reserved()

    @classmethod
    def from_list(cls, tokens: list[str]) -> "Vocabulary":
        return cls(list(tokens))


def build_vocab(tables: list[Table], statements: list[Statement], min_count: int = 1) -> Vocabulary:
    """Vocabulary over all attribute, cell, and statement tokens with corpus frequency >= min_count."""
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts: Counter[str] = Counter()
    for table in tables:
        for attr in table.schema:
            counts.update(tokenize(attr))
        for row in table.rows:
            for cell in row:
                counts.update(tokenize(cell))
    for stmt in statements:
        counts.update(tokenize(stmt.text))
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count and tok not in RESERVED_TOKENS),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(kept)


@dataclass
class TokenizedRow:
    """Token ids plus the per-token annotations behind cell-aware position embeddings.

    ``cell_index`` is the column j for cell tokens and NON_CELL for [CLS] or
    query tokens; ``intra_cell_index`` is 0 exactly at [COL] tokens and counts
    up within a cell; ``attribute_id`` is the hash bucket of the cell's
    attribute name (NON_CELL outside cells); ``absolute_index`` is the plain
    position.
    """

    token_ids: list[int]
    cell_index: list[int]
    intra_cell_index: list[int]
    attribute_id: list[int]
    absolute_index: list[int]
    truncated: bool = False

    def __post_init__(self):
        n = len(self.token_ids)
        for name in ("cell_index", "intra_cell_index", "attribute_id", "absolute_index"):
            if len(getattr(self, name)) != n:
                raise DatasetError(f"annotation {name} length != token count")

    def __len__(self) -> int:
        return len(self.token_ids)


class _RowBuilder:
    def __init__(self, vocab: Vocabulary, max_len: int):
        self.vocab = vocab
        self.max_len = max_len
        self.ids: list[int] = []
        self.cell: list[int] = []
        self.intra: list[int] = []
        self.attr: list[int] = []
        self.overflowed = False

    def push(self, token: str, cell: int, intra: int, attr: int) -> None:
        if len(self.ids) >= self.max_len:
            self.overflowed = True
            return
        self.ids.append(self.vocab.token_to_id.get(token, RESERVED_TOKENS[UNK]))
        self.cell.append(cell)
        self.intra.append(intra)
        self.attr.append(attr)

    def push_cell(self, attribute: str, value: str, cell: int, buckets: int) -> None:
        bucket = attribute_bucket(attribute, buckets)
        intra = 0
        for token in serialize_cell(attribute, value):
            self.push(token, cell, intra, bucket)
            intra += 1

    def finish(self) -> TokenizedRow:
        return TokenizedRow(
            token_ids=self.ids,
            cell_index=self.cell,
            intra_cell_index=self.intra,
            attribute_id=self.attr,
            absolute_index=list(range(len(self.ids))),
            truncated=self.overflowed,
        )


def serialize_cell(attribute: str, value: str) -> list[str]:
    """[COL] <attribute tokens> [VAL] <value tokens>."""
    return [COL, *tokenize(attribute), VAL, *tokenize(value)]


def serialize_row(
    schema: list[str],
    row: list[str],
    vocab: Vocabulary,
    max_len: int = 128,
    attribute_buckets: int = 1024,
) -> TokenizedRow:
    """[CLS] then every cell's serialization, annotated and truncated at max_len."""
    if len(row) != len(schema):
        raise DatasetError(f"row has {len(row)} cells but schema has {len(schema)} attributes")
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    b = _RowBuilder(vocab, max_len)
    b.push(CLS, NON_CELL, NON_CELL, NON_CELL)
    for j, (attribute, value) in enumerate(zip(schema, row)):
        b.push_cell(attribute, value, j, attribute_buckets)
    return b.finish()


def serialize_query(text: str, vocab: Vocabulary, max_len: int = 128) -> TokenizedRow:
    """[CLS] + query tokens; no cell structure, intra index counts from 1."""
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    b = _RowBuilder(vocab, max_len)
    b.push(CLS, NON_CELL, NON_CELL, NON_CELL)
    for k, token in enumerate(tokenize(text), start=1):
        b.push(token, NON_CELL, k, NON_CELL)
    return b.finish()


def serialize_table_with_query(
    table: Table,
    statement: Statement,
    vocab: Vocabulary,
    max_len: int = 512,
    attribute_buckets: int = 1024,
) -> TokenizedRow:
    """Whole-table sequence for a query-aware encoder: [CLS] + query + all rows.

    Cell annotations carry each token's column index; the whole sequence is
    truncated at max_len, which is exactly the length ceiling a single
    monolithic encoder imposes on large tables.
    """
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    b = _RowBuilder(vocab, max_len)
    b.push(CLS, NON_CELL, NON_CELL, NON_CELL)
    for k, token in enumerate(tokenize(statement.text), start=1):
        b.push(token, NON_CELL, k, NON_CELL)
    for row in table.rows:
        for j, (attribute, value) in enumerate(zip(table.schema, row)):
            b.push_cell(attribute, value, j, attribute_buckets)
    return b.finish()


def row_text(table: Table, row_index: int) -> str:
    """Plain-text view of a row (attribute and value words, no markers)."""
    parts = []
    for attribute, value in zip(table.schema, table.rows[row_index]):
        parts.append(attribute)
        parts.append(value)
    return " ".join(parts)


# -- synthetic fact-verification dataset --------------------------------------

_DEFAULT_ATTRIBUTES = [
    "area", "brand", "city", "club", "coach", "color", "country", "county",
    "date", "degree", "district", "engine", "event", "format", "genre",
    "grade", "height", "host", "label", "league", "maker", "model", "name",
    "owner", "party", "period", "platform", "position", "rank", "region",
    "result", "role", "score", "season", "series", "speed", "sport", "stage",
    "status", "team", "title", "track", "venue", "weight", "winner", "year",
]

_STATEMENT_RE = re.compile(r"^the (\S+) of the row where (\S+) is (\S+) is (\S+)$")


@dataclass
class SyntheticConfig:
    num_tables: int = 200
    rows_range: tuple[int, int] = (8, 32)
    cols_range: tuple[int, int] = (3, 5)
    statements_per_table: int = 10
    seed: int = 17
    attribute_pool: list[str] = field(default_factory=lambda: list(_DEFAULT_ATTRIBUTES))
    values_per_attribute: int = 40

    def validate(self) -> None:
        if self.num_tables < 1:
            raise DatasetError("num_tables must be >= 1")
        for name, (lo, hi) in (("rows_range", self.rows_range), ("cols_range", self.cols_range)):
            if lo < 1 or hi < lo:
                raise DatasetError(f"{name} {lo}..{hi} is empty or invalid")
        if self.cols_range[1] > len(self.attribute_pool):
            raise DatasetError(
                f"cols_range max {self.cols_range[1]} exceeds attribute pool size {len(self.attribute_pool)}"
            )
        if self.cols_range[1] < 2:
            raise DatasetError("need at least 2 columns to phrase key/target statements")
        if self.rows_range[1] > self.values_per_attribute:
            raise DatasetError(
                f"rows_range max {self.rows_range[1]} exceeds values_per_attribute "
                f"{self.values_per_attribute} (cells within a column are sampled without replacement)"
            )

    def to_dict(self) -> dict:
        return {
            "num_tables": self.num_tables,
            "rows_range": list(self.rows_range),
            "cols_range": list(self.cols_range),
            "statements_per_table": self.statements_per_table,
            "seed": self.seed,
            "attribute_pool": list(self.attribute_pool),
            "values_per_attribute": self.values_per_attribute,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if "rows_range" in d:
            d["rows_range"] = tuple(d["rows_range"])
        if "cols_range" in d:
            d["cols_range"] = tuple(d["cols_range"])
        return cls(**d)


def _value_pool(attribute: str, size: int) -> list[str]:
    # One token per value, disjoint across attributes.
    return [f"{attribute}{i}" for i in range(size)]


def generate_synthetic(config: SyntheticConfig) -> tuple[list[Table], list[Statement]]:
    """Random tables plus template statements with constructed truth labels.

    Column values are drawn without replacement, so a key value picks out a
    unique row. Labels alternate true/false per table (balance within 1) and
    every statement agrees with :func:`evaluate_statement_by_scan`. Fully
    deterministic for a given seed.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    tables: list[Table] = []
    statements: list[Statement] = []
    for t in range(config.num_tables):
        n_cols = int(rng.integers(config.cols_range[0], config.cols_range[1] + 1))
        n_rows = int(rng.integers(config.rows_range[0], config.rows_range[1] + 1))
        attr_idx = rng.choice(len(config.attribute_pool), size=n_cols, replace=False)
        schema = [config.attribute_pool[int(i)] for i in attr_idx]
        columns = []
        for attribute in schema:
            pool = _value_pool(attribute, config.values_per_attribute)
            picks = rng.choice(len(pool), size=n_rows, replace=False)
            columns.append([pool[int(i)] for i in picks])
        rows = [[columns[j][i] for j in range(n_cols)] for i in range(n_rows)]
        table = Table(table_id=f"t{t:04d}", schema=schema, rows=rows)
        tables.append(table)

        for k in range(config.statements_per_table):
            label = k % 2 == 0
            i = int(rng.integers(n_rows))
            j_key, j_target = (int(x) for x in rng.choice(n_cols, size=2, replace=False))
            key_value = rows[i][j_key]
            if label:
                target_value = rows[i][j_target]
            else:
                taken = {rows[r][j_target] for r in range(n_rows) if rows[r][j_key] == key_value}
                pool = [v for v in _value_pool(schema[j_target], config.values_per_attribute) if v not in taken]
                target_value = pool[int(rng.integers(len(pool)))]
            text = (
                f"the {schema[j_target]} of the row where {schema[j_key]} "
                f"is {key_value} is {target_value}"
            )
            statements.append(
                Statement(
                    statement_id=f"{table.table_id}-s{k:03d}",
                    table_id=table.table_id,
                    text=text,
                    label=label,
                )
            )
    return tables, statements


def evaluate_statement_by_scan(table: Table, text: str) -> bool:
    """Brute-force truth of a template statement by scanning every row.

    True iff some row has the key value in the key column and the asserted
    value in the target column. Independent of the generator's construction.
    """
    m = _STATEMENT_RE.match(text)
    if m is None:
        raise DatasetError(f"statement does not match the template grammar: {text!r}")
    target_attr, key_attr, key_value, target_value = m.groups()
    if target_attr not in table.schema or key_attr not in table.schema:
        return False
    j_target = table.schema.index(target_attr)
    j_key = table.schema.index(key_attr)
    for row in table.rows:
        if row[j_key] == key_value and row[j_target] == target_value:
            return True
    return False


# -- dataset directory IO ------------------------------------------------------
#
# Layout: <dir>/tables/<table_id>.csv (first record is the schema),
#         <dir>/statements.jsonl, <dir>/manifest.json


def save_dataset(
    tables: list[Table],
    statements: list[Statement],
    out_dir: str | Path,
    manifest_extra: dict | None = None,
) -> Path:
    out = Path(out_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    for table in tables:
        with open(out / "tables" / f"{table.table_id}.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(table.schema)
            writer.writerows(table.rows)
    with open(out / "statements.jsonl", "w", encoding="utf-8") as f:
        for s in statements:
            f.write(json.dumps(
                {"statement_id": s.statement_id, "table_id": s.table_id, "text": s.text, "label": s.label},
                sort_keys=True,
            ))
            f.write("\n")
    manifest = {
        "counts": {"tables": len(tables), "statements": len(statements)},
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return out


def load_tables(path: str | Path) -> list[Table]:
    """Tables from <path>/tables/*.csv or a flat directory of CSV files."""
    root = Path(path)
    table_dir = root / "tables" if (root / "tables").is_dir() else root
    files = sorted(table_dir.glob("*.csv"))
    if not files:
        raise DatasetError(f"no table CSV files under {table_dir}")
    tables = []
    for file in files:
        with open(file, newline="", encoding="utf-8") as f:
            records = list(csv.reader(f))
        if not records:
            raise DatasetError(f"{file}: empty table file")
        schema = records[0]
        rows = records[1:]
        for i, row in enumerate(rows):
            if len(row) != len(schema):
                raise DatasetError(
                    f"{file}: row {i + 2} has {len(row)} cells, schema has {len(schema)}"
                )
        tables.append(Table(table_id=file.stem, schema=schema, rows=rows))
    return tables


def load_statements(path: str | Path, known_table_ids: set[str] | None = None) -> list[Statement]:
    """Statements from a JSON-lines file; validates table ids when given."""
    file = Path(path)
    if file.is_dir():
        file = file / "statements.jsonl"
    statements = []
    with open(file, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{file}: malformed JSON on line {lineno}: {e}") from e
            try:
                statement = Statement(
                    statement_id=record["statement_id"],
                    table_id=record["table_id"],
                    text=record["text"],
                    label=bool(record["label"]),
                )
            except KeyError as e:
                raise DatasetError(f"{file}: line {lineno} missing field {e}") from e
            if known_table_ids is not None and statement.table_id not in known_table_ids:
                raise DatasetError(
                    f"{file}: line {lineno} references unknown table_id {statement.table_id!r}"
                )
            statements.append(statement)
    return statements


def load_dataset(path: str | Path) -> tuple[list[Table], list[Statement], dict]:
    root = Path(path)
    tables = load_tables(root)
    statements = load_statements(root / "statements.jsonl", {t.table_id for t in tables})
    manifest = {}
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as f:
            manifest = json.load(f)
    return tables, statements, manifest
