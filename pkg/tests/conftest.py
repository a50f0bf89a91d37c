import numpy as np
import pytest

from corrmorph.synthdata import GenParams, build_dataset


@pytest.fixture(scope="session")
def tiny_params() -> GenParams:
    return GenParams(seed=11, subdivisions=2, sample_points=128)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_params):
    """4 small cases, 2 folds; shared across the suite (read-only)."""
    root = tmp_path_factory.mktemp("tiny_dataset")
    build_dataset(root, n_cases=4, folds=2, params=tiny_params)
    return root


@pytest.fixture()
def rng():
    return np.random.default_rng(42)
