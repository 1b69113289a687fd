import numpy as np
import pytest

from mross import LossSpec

LOSSES = [LossSpec.logistic(), LossSpec.squared_hinge(), LossSpec.dwd(0.5), LossSpec.dwd(2.0)]

# filled by test_acceptance, printed once at the end of the run
ACCEPTANCE = {}


def small_data(seed, n=300, d=4, scale=1.0):
    """Logistic data with an intercept column; never separable at these sizes."""
    rng = np.random.default_rng(seed)
    X = np.hstack([np.ones((n, 1)), rng.standard_normal((n, d - 1))])
    beta = scale * rng.uniform(-1, 1, d)
    y = np.where(rng.random(n) < 1 / (1 + np.exp(-X @ beta)), 1.0, -1.0)
    return X, y


@pytest.fixture(params=LOSSES, ids=str)
def loss(request):
    return request.param


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
