import numpy as np
import pytest

from lgn.data import SyntheticConfig, generate, load_dataset, prepare_samples
from lgn.model import LGNModel, ModelConfig
from lgn.text import Vocabulary

TINY_MODEL = dict(N=8, d_v=6, d_w=4, d_h=6, d_s=5, n_early=2, n_conv=2, n_late=2)


@pytest.fixture
def tiny_dataset(tmp_path):
    cfg = SyntheticConfig(n_videos=12, N=8, d_v=6, duration_s=16.0, concepts=3, span_min=1, span_max=4, seed=3)
    return generate(cfg, tmp_path / "data")


def build(ds, split="train", **overrides):
    """Model plus prepared samples for a split of a generated dataset."""
    pairs = list(load_dataset(ds.manifest, split))
    vocab = Vocabulary.build(rec.tokens for _, rec in load_dataset(ds.manifest, "train"))
    model = LGNModel(ModelConfig(**{**TINY_MODEL, **overrides}), vocab)
    return model, prepare_samples(pairs, model)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
