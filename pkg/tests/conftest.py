"""
Shared pytest setup: repo root on sys.path, the --runslow switch and a few
small seeded models.
"""
import os
import sys

import pytest

# Ensure repo root is in path so tests can import modules
ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
sys.path.insert(0, ROOT)

from model_zoo import ModelConfig, build_model  # noqa: E402
from nn_core import Rng  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run the long learning runs')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: multi-minute training runs (enable with --runslow)')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return Rng(1234)


def tiny_seq_config(arch='ringformer', **overrides):
    values = dict(arch=arch, mode='encoder_decoder', hidden=8, ff=16, levels=2, heads=2, rank_policy='explicit:2',
                  vocab_size=8, max_seq_len=16, dropout=0.0, dtype='float64')
    values.update(overrides)
    return ModelConfig(**values)


def tiny_vit_config(arch='ringformer', **overrides):
    values = dict(arch=arch, mode='encoder_only', hidden=8, ff=16, levels=2, heads=2, rank_policy='explicit:2',
                  image_size=8, patch_size=4, channels=1, num_classes=3, dropout=0.0, dtype='float64')
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def tiny_seq_model():
    return build_model(tiny_seq_config(), Rng(7))


@pytest.fixture
def tiny_vit_model():
    return build_model(tiny_vit_config(), Rng(7))
