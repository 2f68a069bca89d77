import numpy as np
import pytest

from densityfilter import models
from densityfilter.models import InitialDistribution, LinearSde, ObservationModel, FilteringProblem


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def ou1():
    return models.ou_model(1)


@pytest.fixture
def bistable():
    return models.bistable_model()


def const_problem(d=1, mu=0.0, sigma=0.0, prior_var=1.0):
    """Constant-drift, constant-diffusion stub: every derivative field vanishes."""

    class ConstSde(LinearSde):
        def __init__(self):
            super().__init__(np.zeros((d, d)), sigma * np.eye(d), name="const")
            self.drift_matrix = None
            self.shift = np.full(d, float(mu))

        def drift(self, x):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(self.shift, x.shape).copy()

        def drift_jacobian(self, x):
            x = np.asarray(x, dtype=float)
            return np.zeros(x.shape + (d,))

        def div_drift(self, x):
            return np.zeros(np.shape(x)[:-1])

    obs = ObservationModel.linear(np.eye(d), np.eye(d))
    init = InitialDistribution.gaussian(np.zeros(d), prior_var * np.eye(d))
    return FilteringProblem(ConstSde(), obs, init, init, "const", {})


@pytest.fixture
def const_stub():
    return const_problem()
