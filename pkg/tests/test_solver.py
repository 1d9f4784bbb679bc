import csv

import numpy as np
import pytest
from scipy.optimize import minimize

from icnn import checks, net
from icnn.solver import (INTERIOR, SolverError, box_entropy, bundle_entropy, dual_value, entropy, entropy_grad,
                         net_oracle, proj_newton_logistic, projected_gradient, simplex_project,
                         solve_entropy_linear)


def quadratic(center):
    return lambda Y: (((Y - center) ** 2).sum(-1), 2 * (Y - center))


def test_entropy_center():
    assert entropy(np.full(4, 0.5)) == pytest.approx(4 * np.log(2), abs=1e-15)
    assert np.all(entropy_grad(np.full(4, 0.5)) == 0)


def test_entropy_vanishes_at_boundary():
    for y in (np.full(3, 1e-12), np.full(3, 1 - 1e-12)):
        assert abs(entropy(y)) <= 1e-9 * 3


def test_entropy_hand_value():
    # -(0.25 log 0.25 + 0.75 log 0.75)
    assert entropy(np.array([0.25])) == pytest.approx(0.5623351446188083, abs=1e-12)


def test_entropy_domain_errors():
    for bad in ([0.0, 0.5], [1.0], [1.2], [-0.1]):
        with pytest.raises(ValueError):
            entropy(np.array(bad))
        with pytest.raises(ValueError):
            entropy_grad(np.array(bad))


def test_entropy_grad_finite_differences(rng):
    y, h = rng.uniform(0.05, 0.95, 5), 1e-6
    fd = [(entropy(y + h * e) - entropy(y - h * e)) / (2 * h) for e in np.eye(5)]
    np.testing.assert_allclose(entropy_grad(y), fd, rtol=1e-7)


def test_box_entropy_closed_box():
    assert box_entropy(np.array([[0.0, 1.0]]))[0] == 0.0


def test_closed_form_examples():
    assert np.all(solve_entropy_linear(np.zeros(3)) == 0.5)
    assert solve_entropy_linear(np.array([np.log(3.0)]))[0] == pytest.approx(0.25, abs=1e-15)


@pytest.mark.parametrize("c", [-3.0, -0.4, 0.0, 1.7, 6.0])
def test_closed_form_grid_oracle(c):
    g = np.arange(1, 100_000) * 1e-5
    obj = c * g - box_entropy(g[:, None])
    assert abs(solve_entropy_linear(np.array([c]))[0] - g[obj.argmin()]) <= 1e-4


def test_projected_gradient_zero_gradient():
    y0 = np.array([0.2, 0.9])
    out = projected_gradient(lambda Y: (np.zeros(1), np.zeros_like(Y)), y0, 50, 0.1, 0.5)
    assert out.tolist() == y0.tolist()


def test_projected_gradient_quadratic():
    y = projected_gradient(quadratic(0.3), np.array([0.9]), 200, 0.1, 0.0)
    assert abs(y[0] - 0.3) <= 1e-3


def test_projected_gradient_linear_hits_boundary():
    y = projected_gradient(lambda Y: (Y.sum(-1), np.ones_like(Y)), np.array([0.7]), 20, 0.1, 0.3)
    assert y[0] == 0.0


def test_simplex_projection_examples():
    np.testing.assert_allclose(simplex_project(np.array([0.6, 0.6])), [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(simplex_project(np.array([1.2, -0.3])), [1.0, 0.0], atol=1e-15)


def test_dual_single_row():
    assert proj_newton_logistic(np.array([[1.0, -2.0]]), np.array([0.3])).tolist() == [1.0]


def test_dual_identical_rows():
    G, h = np.array([[0.5, -1.0], [0.5, -1.0]]), np.array([0.2, 0.2])
    lam = proj_newton_logistic(G, h)
    assert abs(dual_value(G, h, lam) - dual_value(G, h, np.array([0.5, 0.5]))) <= 1e-10


def test_dual_rejects_non_finite():
    with pytest.raises(ValueError):
        proj_newton_logistic(np.array([[np.nan, 1.0], [0.0, 1.0]]), np.zeros(2))
    with pytest.raises(ValueError):
        proj_newton_logistic(np.zeros((2, 2)), np.zeros(3))


@pytest.mark.parametrize("seed", range(5))
def test_dual_simplex_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    G, h = rng.normal(size=(3, 2)) * 2, rng.normal(size=3)
    lam = proj_newton_logistic(G, h)
    assert lam.min() >= 0 and abs(lam.sum() - 1) <= 1e-12
    N = 1414  # about 10^6 simplex points
    a = np.arange(N + 1) / N
    A, B = np.meshgrid(a, a, indexing="ij")
    sel = A + B <= 1
    L = np.stack([A[sel], B[sel], np.clip(1 - A[sel] - B[sel], 0, 1)], 1)
    grid = dual_value(np.broadcast_to(G, (len(L), 3, 2)), np.broadcast_to(h, (len(L), 3)), L).max()
    assert dual_value(G, h, lam) >= grid - 1e-6


def test_dual_matches_primal_subproblem(rng):
    # the dual value equals min_y max_i (g_i.y + h_i) - H(y), checked on a grid for n = 1
    G, h = rng.normal(size=(3, 1)) * 3, rng.normal(size=3)
    lam = proj_newton_logistic(G, h)
    g = np.arange(1, 1_000_000) * 1e-6
    primal = (g[:, None] * G[:, 0] + h).max(1) - box_entropy(g[:, None])
    assert dual_value(G, h, lam) == pytest.approx(primal.min(), abs=1e-7)


def test_bundle_zero_energy():
    rep = bundle_entropy(lambda Y: (np.zeros(len(Y)), np.zeros_like(Y)), np.full(3, 0.3), K=1)
    np.testing.assert_allclose(rep.y, 0.5, atol=1e-15)


def test_bundle_linear_energy_exact_after_one_cut():
    c = np.array([0.3, -1.2, 4.0])
    rep = bundle_entropy(lambda Y: (Y @ c, np.broadcast_to(c, Y.shape)), np.full(3, 0.5), K=1)
    np.testing.assert_allclose(rep.y, solve_entropy_linear(c), rtol=0, atol=1e-15)


def test_bundle_quadratic_grid_oracle():
    rep = bundle_entropy(quadratic(0.8), np.full(2, 0.5), K=10)
    y_grid = checks.grid_argmin_2d(lambda P: ((P - 0.8) ** 2).sum(1) - box_entropy(P), refine=())
    assert np.abs(rep.y - y_grid).max() <= 1e-3
    # both coordinates solve 2(y - 0.8) + log(y / (1 - y)) = 0; the root is 0.59892...
    np.testing.assert_allclose(rep.y, 0.5989, atol=1e-3)


def test_bundle_rejects_bad_input():
    with pytest.raises(ValueError):
        bundle_entropy(quadratic(0.5), np.array([0.0, 0.5]), K=2)
    with pytest.raises(ValueError):
        bundle_entropy(quadratic(0.5), np.full(2, 0.5), K=0)


def test_bundle_non_finite_oracle_reports_iteration():
    calls = []

    def oracle(Y):
        calls.append(1)
        f = np.full(len(Y), np.nan if len(calls) == 3 else 0.0)
        return f, np.ones_like(Y) * len(calls)

    with pytest.raises(SolverError) as exc:
        bundle_entropy(oracle, np.full(2, 0.5), K=5)
    assert exc.value.iteration == 3


def random_energy(seed, n=3, act="relu"):
    rng = np.random.default_rng(seed)
    spec = net.NetworkSpec("picnn", n, (8, 8), 2, (6, 6), act)
    return checks._params_like(spec, rng, scale=0.7), rng.normal(size=2)


@pytest.mark.parametrize("seed", range(6))
def test_bundle_bounds_and_interior(seed):
    params, x = random_energy(seed, act=("relu", "softplus")[seed % 2])
    oracle = net_oracle(params, x)
    rep = bundle_entropy(oracle, np.full(3, 0.5), K=8, check_cuts=True, rng=np.random.default_rng(seed))
    obj = np.array([h[0] for h in rep.history]).ravel()
    lb = np.array([h[1] for h in rep.history]).ravel()
    assert np.all(np.diff(lb) >= -1e-10)  # pruning removes only cuts with zero weight
    assert np.all(obj >= lb - 1e-8)  # every iterate is above the running lower bound ...
    assert rep.gap >= -1e-8  # ... including the returned one
    assert np.all((rep.y > 0) & (rep.y < 1))
    lam = rep.state.lam[0]
    assert lam.min() >= 0 and abs(lam.sum() - 1) <= 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_cuts_underestimate(seed):
    params, x = random_energy(seed + 10)
    rep = bundle_entropy(net_oracle(params, x), np.full(3, 0.5), K=6)
    G, h, _, _ = rep.state.active()
    Y = np.random.default_rng(seed).uniform(size=(100, 3))
    f = net.forward(params, x, Y)[0]
    assert np.all(Y @ G.T + h <= f[:, None] + 1e-9)


@pytest.mark.parametrize("n,seed", [(1, 0), (2, 1), (3, 2), (4, 3), (4, 4)])
def test_bundle_matches_long_projected_gradient(n, seed):
    params, x = random_energy(seed, n=n, act="softplus")
    oracle = net_oracle(params, x)
    y_bundle = bundle_entropy(oracle, np.full(n, 0.5), K=10).y

    def smoothed(Y):
        f, g = oracle(Y)
        Yc = np.clip(Y, INTERIOR, 1 - INTERIOR)
        return f, g + np.log(Yc / (1 - Yc))

    y_pg = projected_gradient(smoothed, np.full(n, 0.5), 500, 0.05, 0.0, lo=1e-9, hi=1 - 1e-9)
    assert np.abs(y_bundle - y_pg).max() <= 1e-2


def test_bundle_batch_matches_single():
    params, x = random_energy(3)
    X = np.stack([x, -x, 2 * x])
    batch = bundle_entropy(net_oracle(params, X), np.full((3, 3), 0.5), K=5)
    for b in range(3):
        single = bundle_entropy(net_oracle(params, X[b]), np.full(3, 0.5), K=5)
        np.testing.assert_allclose(batch.y[b], single.y, atol=1e-12)


def test_trace_file(tmp_path):
    path = tmp_path / "trace.csv"
    bundle_entropy(quadratic(0.8), np.full(2, 0.5), K=4, trace=path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iter", "objective", "lower_bound", "gap", "active_cuts"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]


def test_proj_newton_leaves_vertex_with_rank_deficient_hessian():
    # five cuts in two dimensions: the dual Hessian has rank 2 and the Newton direction
    # projects straight back onto the starting vertex
    rng = np.random.default_rng(652)
    G, h = rng.normal(size=(5, 2)) * 3, rng.normal(size=5)
    lam = proj_newton_logistic(G, h)
    oracle = minimize(lambda z: -dual_value(G, h, simplex_project(np.abs(z))), np.full(5, 0.2),
                      method="Nelder-Mead", options=dict(xatol=1e-10, fatol=1e-12, maxiter=20000))
    assert dual_value(G, h, lam) >= -oracle.fun - 1e-9
    assert dual_value(G, h, lam) > -2.6
