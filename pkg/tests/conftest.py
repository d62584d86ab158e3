import sys
from pathlib import Path

import numpy as np
import pytest

TESTS = Path(__file__).parent
sys.path.insert(0, str(TESTS))

MUTAG_DIR = TESTS / "data" / "MUTAG"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mutag():
    from hgcn.graphs import build_features, parse_tudataset
    return build_features(parse_tudataset(MUTAG_DIR, "MUTAG"), "node-label-onehot")
