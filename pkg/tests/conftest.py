import numpy as np
import pytest

from npmix.rngdist import RngStream


@pytest.fixture
def rng():
    return RngStream(20240611).generator


def se_bound(samples, k=5.0):
    """``k`` standard errors of the sample mean."""
    samples = np.asarray(samples)
    return k * samples.std(ddof=1) / np.sqrt(samples.shape[0])
