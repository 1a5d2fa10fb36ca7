import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vetpv.matrix import from_arrays


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def separable_matrix():
    """Two noisy gaussian blobs, 240 rows, 4 features; roughly 70/30."""
    gen = np.random.default_rng(99)
    n0, n1 = 72, 168
    X0 = gen.normal(loc=-1.0, scale=1.0, size=(n0, 4))
    X1 = gen.normal(loc=1.0, scale=1.0, size=(n1, 4))
    X = np.vstack([X0, X1])
    y = np.concatenate([np.zeros(n0, dtype=np.int8), np.ones(n1, dtype=np.int8)])
    order = gen.permutation(len(y))
    return from_arrays(X[order], y[order])


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 400-report corpus plus config, shared by slower integration tests."""
    from vetpv.synth import write_corpus

    root = tmp_path_factory.mktemp("small-corpus")
    write_corpus(root, n_reports=400, seed=4242, quarters=2)
    (root / "pipeline.ini").write_text(
        "[paths]\n"
        "input_dir = quarters\n"
        "output_dir = out\n"
        "[run]\n"
        "seed = 4242\n"
        "[model]\n"
        "kind = gbdt\n"
        "n_rounds = 25\n"
        "learning_rate = 0.15\n"
        "max_depth = 3\n"
        "[ssl]\n"
        "enabled = true\n"
        "keep_fraction = 0.3\n"
        "[explain]\n"
        "max_rows = 40\n",
        encoding="utf-8",
    )
    return root
