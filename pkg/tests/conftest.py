import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rowtab.data import SyntheticConfig, build_vocab, generate_synthetic
from rowtab.encoder import EncoderConfig, PositionSwitches, RowEncoder


@pytest.fixture(scope="session")
def small_dataset():
    cfg = SyntheticConfig(num_tables=12, rows_range=(3, 8), cols_range=(2, 4),
                          statements_per_table=6, seed=101, values_per_attribute=12)
    tables, statements = generate_synthetic(cfg)
    return tables, statements


@pytest.fixture(scope="session")
def small_vocab(small_dataset):
    tables, statements = small_dataset
    return build_vocab(tables, statements)


def tiny_encoder_config(vocab_size: int, **overrides) -> EncoderConfig:
    base = dict(vocab_size=vocab_size, dim=16, layers=1, heads=2, ffn_dim=32,
                max_len=64, dropout=0.0)
    positions = overrides.pop("positions", None)
    base.update(overrides)
    if positions is not None:
        base["positions"] = positions if isinstance(positions, PositionSwitches) else PositionSwitches(**positions)
    return EncoderConfig(**base)


@pytest.fixture
def tiny_encoder(small_vocab):
    cfg = tiny_encoder_config(len(small_vocab))
    return RowEncoder.init(cfg, seed=0)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(2024)
