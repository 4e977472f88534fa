import os

# determinism tests assume single-threaded BLAS
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from graphtext import numerics as nx  # noqa: E402


@pytest.fixture
def f64():
    with nx.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
