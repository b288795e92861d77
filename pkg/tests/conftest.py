import numpy as np
import pytest
from hypothesis import settings

from vinesim.model import ModelSpec, build_model, configuration_from_joints

settings.register_profile("vinesim", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("vinesim")


def make_model(n=5, total_mass=0.5, length=0.5, stiffness=0.0, damping=0.0, **kw):
    return build_model(ModelSpec(n, total_mass, length, stiffness=stiffness, damping=damping, **kw))


def random_configuration(model, rng, angle=0.6, max_gap=0.05):
    """A feasible configuration: random pin angles and non-negative gaps."""
    angles = rng.uniform(-angle, angle, model.pin_count)
    gaps = rng.uniform(0.0, max_gap, model.prismatic_count)
    return configuration_from_joints(model, angles, gaps)


def central_difference(fun, x, h=1e-6):
    """Jacobian of ``fun`` at ``x`` by central differences, shape (rows, len(x))."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def relative_error(analytic, numeric) -> float:
    scale = max(np.max(np.abs(numeric), initial=0.0), 1.0)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
