import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from icnn import net

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def ficnn(Wy, b, Wz=None, activation="relu"):
    """FICNN from explicit per-layer lists (``Wz[0]`` is ignored)."""
    Wy = [np.atleast_2d(np.asarray(w, float)) for w in Wy]
    b = [np.atleast_1d(np.asarray(v, float)) for v in b]
    widths = tuple(len(v) for v in b[:-1])
    spec = net.NetworkSpec("ficnn", Wy[0].shape[1], widths, activation=activation)
    T = {}
    for i in range(len(b)):
        T[f"Wy_{i}"], T[f"b_{i}"] = Wy[i], b[i]
        if i > 0:
            T[f"Wz_{i}"] = np.atleast_2d(np.asarray(Wz[i], float))
    return net.Params(spec, T)


def piecewise_quadratic_q(center=0.7, knots=np.linspace(0.0, 1.0, 41), state_dim=1):
    """PICNN with ``f(s, a)`` the piecewise-linear interpolant of ``(a - center)^2`` on ``knots``."""
    vals = (knots - center) ** 2
    slopes = np.diff(vals) / np.diff(knots)
    inner = knots[1:-1]
    spec = net.NetworkSpec("picnn", 1, (len(inner),), state_dim, (2,), "relu")
    T = {name: np.zeros(shape) for name, shape in spec.shapes().items()}
    T["Wy_0"] = np.ones((len(inner), 1))
    T["by_0"] = np.ones(1)
    T["b_0"] = -inner
    T["Wz_1"] = np.diff(slopes)[None, :]
    T["bz_1"] = np.ones(len(inner))
    T["Wy_1"] = np.array([[slopes[0]]])
    T["by_1"] = np.ones(1)
    T["b_1"] = np.array([vals[0] - slopes[0] * knots[0]])
    return net.Params(spec, T)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, filled by test_acceptance and shown after the run.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
