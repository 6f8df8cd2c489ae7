import numpy as np
import pytest

from kwta_ensemble.fetch import write_wdbc_from_sklearn


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    """A data directory holding only the WDBC table."""
    root = tmp_path_factory.mktemp("data")
    (root / "wdbc").mkdir()
    write_wdbc_from_sklearn(root / "wdbc" / "wdbc.data")
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
