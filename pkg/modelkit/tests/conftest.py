import numpy as np
import pytest

from modelkit.bundle import train_and_export
from modelkit.corpus import SyntheticCorpus


@pytest.fixture(scope="session")
def bundle_dir(tmp_path_factory):
    """One real train-quantize-export run shared by the whole session.

    Kept small (300-sample slices) so reading QDS files back stays cheap;
    the fixture still exercises the full refusal/self-check path.
    """
    out = tmp_path_factory.mktemp("bundle")
    train_and_export(3, 1234, out, n_val=300, n_test=300)
    return out


@pytest.fixture(scope="session")
def small_corpus():
    return SyntheticCorpus(seed=99)


@pytest.fixture()
def rng():
    return np.random.default_rng(7)
