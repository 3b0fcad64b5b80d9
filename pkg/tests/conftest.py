import json
import os
import sys

import numpy as np
import pytest

HERE = os.path.dirname(os.path.abspath(__file__))
DATA = os.path.join(HERE, "data")
sys.path.insert(0, HERE)  # for the oracles module


def data_path(name):
    return os.path.join(DATA, name)


@pytest.fixture(scope="session")
def reference_energies():
    with open(data_path("reference_energies.json")) as fh:
        return json.load(fh)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
