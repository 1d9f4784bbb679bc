"""Convex inference over the unit box.

Oracles are callables mapping a ``(B, n)`` array of points to ``(values (B,),
gradients (B, n))``; :func:`net_oracle` builds one from network parameters.
Everything here runs a whole batch of independent problems at once.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import entr, expit

from . import net

# sigmoid outputs are kept this far from the box faces so the barrier stays finite
INTERIOR = 1e-12


class SolverError(RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


# -- entropy barrier -------------------------------------------------------


def _check_open_box(y):
    y = np.asarray(y, dtype=float)
    if not np.all((y > 0) & (y < 1)):
        raise ValueError("entropy is only defined strictly inside the unit box")
    return y


def entropy(y):
    """Binary entropy ``-sum(y log y + (1-y) log(1-y))`` over the last axis."""
    y = _check_open_box(y)
    return -(y * np.log(y) + (1 - y) * np.log1p(-y)).sum(-1)


def entropy_grad(y):
    y = _check_open_box(y)
    return np.log1p(-y) - np.log(y)


def box_entropy(y):
    """Entropy on the closed box, with ``0 log 0 = 0``."""
    y = np.clip(np.asarray(y, dtype=float), 0.0, 1.0)
    return (entr(y) + entr(1 - y)).sum(-1)


def solve_entropy_linear(c, eps=1.0):
    """``argmin_y c.y - eps H(y)``, which is the sigmoid ``1 / (1 + exp(c / eps))``."""
    return expit(-np.asarray(c, dtype=float) / eps)


# -- oracles ---------------------------------------------------------------


def net_oracle(params, x=None, sign=1.0):
    """Value and input-gradient of ``sign * f(x, .)``, batched over rows."""

    def oracle(Y):
        value, tape = net.forward(params, x, np.atleast_2d(Y))
        g = net.grad_input(params, tape)
        return sign * np.atleast_1d(value), sign * g

    return oracle


# -- projected gradient ----------------------------------------------------


def projected_gradient(oracle, y0, steps, alpha, momentum=0.0, lo=0.0, hi=1.0):
    """Heavy-ball projected gradient descent on the box ``[lo, hi]``."""
    y = np.array(y0, dtype=float)
    v = np.zeros_like(y)
    for _ in range(steps):
        _, g = oracle(y)
        v = momentum * v - alpha * np.reshape(g, y.shape)
        y = np.clip(y + v, lo, hi)
    return y


# -- simplex projection and the dual solver --------------------------------


def simplex_project(v):
    """Euclidean projection of ``v`` onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    return _simplex_project(v[None], np.ones((1, v.size), bool))[0]


def _simplex_project(V, mask):
    """Row-wise projection restricted to the entries in ``mask``; others become 0."""
    B, K = V.shape
    W = np.where(mask, V, -np.inf)
    U = -np.sort(-W, axis=1)
    count = mask.sum(1, keepdims=True)
    valid = np.arange(K)[None, :] < count
    css = np.cumsum(np.where(valid, U, 0.0), axis=1)
    ks = np.arange(1, K + 1)[None, :]
    with np.errstate(invalid="ignore"):
        cond = valid & (U - (css - 1) / ks > 0)
    rho = cond.sum(1) - 1
    theta = (css[np.arange(B), rho] - 1) / (rho + 1)
    return np.where(mask, np.maximum(V - theta[:, None], 0.0), 0.0)


def dual_value(G, h, lam, eps=1.0):
    """Dual objective ``(G1 + h).lam - eps sum log(1 + exp(G^T lam / eps))``, batched."""
    c = np.einsum("...kn,...k->...n", G, lam)
    return (lam * (G.sum(-1) + h)).sum(-1) - eps * np.logaddexp(0.0, c / eps).sum(-1)


def _dual_parts(G, h, lam, eps):
    c = np.einsum("bkn,bk->bn", G, lam) / eps
    sig = expit(c)
    phi = -(lam * (G.sum(-1) + h)).sum(-1) + eps * np.logaddexp(0.0, c).sum(-1)
    grad = -(G.sum(-1) + h) + np.einsum("bkn,bn->bk", G, sig)
    hess = np.einsum("bkn,bn,bjn->bkj", G, sig * (1 - sig), G) / eps
    return phi, grad, hess


def _phi(G, h, lam, eps):
    c = np.einsum("bkn,bk->bn", G, lam) / eps
    return -(lam * (G.sum(-1) + h)).sum(-1) + eps * np.logaddexp(0.0, c).sum(-1)


def _proj_newton_batch(G, h, mask, eps=1.0, max_iter=30, tol=1e-10, reg=1e-8, lam0=None):
    """Maximize the bundle dual over the simplex for every row of a batch.

    Projected Newton with an eps-active set: coordinates sitting near zero
    whose gradient pushes them out are sent to zero, the rest take a Newton
    step inside ``1^T d = 0``, and an Armijo search runs along the
    projection arc. Where Newton cannot take a full step a projected-gradient
    step is tried as well and the lower of the two is kept, which covers
    rank-deficient Hessians.
    """
    B, K, _ = G.shape
    if lam0 is None:
        lam = mask / mask.sum(1, keepdims=True)
    else:
        lam = _simplex_project(lam0, mask)
    live = np.ones(B, bool)
    eye = np.eye(K)
    for _ in range(max_iter):
        phi, g, H = _dual_parts(G, h, lam, eps)
        g = np.where(mask, g, 0.0)
        res = np.abs(lam - _simplex_project(lam - g, mask)).max(1)
        live &= res > tol
        if not live.any():
            break
        mu = (lam * g).sum(1, keepdims=True)
        delta = np.minimum(1e-2, res)[:, None]
        fixed = mask & (lam <= delta) & (g > mu)
        free = mask & ~fixed
        # keep at least one free coordinate per row
        none = ~free.any(1)
        if none.any():
            top = np.argmax(np.where(mask, lam, -1.0), axis=1)
            free[none, top[none]] = True
            fixed[none, top[none]] = False
        dA = np.where(fixed, -lam, 0.0)

        M = np.zeros((B, K + 1, K + 1))
        ff = free[:, :, None] & free[:, None, :]
        M[:, :K, :K] = np.where(ff, H + reg * eye, 0.0) + np.where(free, 0.0, 1.0)[:, :, None] * eye
        M[:, :K, K] = free
        M[:, K, :K] = free
        rhs = np.zeros((B, K + 1))
        rhs[:, :K] = np.where(free, -g - np.einsum("bkj,bj->bk", H, dA), dA)
        rhs[:, K] = -dA.sum(1)
        d = np.linalg.solve(M, rhs[..., None])[..., 0][:, :K]
        d = np.where(mask, d, 0.0)

        # Newton search; a trial counts only if it actually moves downhill, since with
        # rank-deficient H the direction can be huge and project straight back onto lam
        best_lam, best_phi = lam.copy(), phi.copy()
        pending = live.copy()
        step = np.ones(B)
        for _ in range(40):
            if not pending.any():
                break
            trial = _simplex_project(lam + step[:, None] * d, mask)
            slope = (g * (trial - lam)).sum(1)
            tphi = _phi(G, h, trial, eps)
            ok = (slope < 0) & (tphi <= phi + 1e-4 * slope + 1e-15 * np.abs(phi))
            acc = pending & ok
            best_lam[acc], best_phi[acc] = trial[acc], tphi[acc]
            pending &= ~ok
            step = np.where(pending, 0.5 * step, step)
        # projected-gradient step with a curvature-scaled length where Newton needed a short
        # step or failed; the better of the two is kept
        pending = live & (step < 1)
        beta = 1.0 / (np.trace(H, axis1=1, axis2=2) + reg)
        for _ in range(40):
            if not pending.any():
                break
            trial = _simplex_project(lam - beta[:, None] * g, mask)
            slope = (g * (trial - lam)).sum(1)
            tphi = _phi(G, h, trial, eps)
            ok = (slope < 0) & (tphi <= phi + 1e-4 * slope + 1e-15 * np.abs(phi))
            acc = pending & ok & (tphi < best_phi)
            best_lam[acc], best_phi[acc] = trial[acc], tphi[acc]
            pending &= ~ok
            beta = np.where(pending, 0.5 * beta, beta)
        live &= (best_lam != lam).any(1)  # no downhill move left: stalled at round-off level
        lam = np.where(live[:, None], best_lam, lam)
    return lam


def proj_newton_logistic(G, h, eps=1.0, max_iter=30):
    """Simplex-constrained maximizer of the bundle dual for a single problem."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if G.shape[0] != h.shape[0] or G.shape[0] < 1:
        raise ValueError("G and h need the same, positive number of rows")
    if not (np.all(np.isfinite(G)) and np.all(np.isfinite(h))):
        raise ValueError("non-finite entries in G or h")
    if G.shape[0] == 1:
        return np.ones(1)
    mask = np.ones((1, G.shape[0]), bool)
    return _proj_newton_batch(G[None], h[None], mask, eps=eps, max_iter=max_iter)[0]


# -- bundle entropy --------------------------------------------------------


@dataclass
class BundleState:
    """Cuts of every problem in a batch, padded to ``K`` slots.

    ``mask[b, i]`` marks the cuts still in the bundle after pruning; rows of
    ``G`` are input gradients at ``points`` and ``h`` the matching offsets.
    """

    G: np.ndarray
    h: np.ndarray
    lam: np.ndarray
    points: np.ndarray
    mask: np.ndarray
    iteration: int

    def active(self, b: int = 0):
        """``(G, h, lam, points)`` of the surviving cuts of problem ``b``."""
        m = self.mask[b]
        return self.G[b, m], self.h[b, m], self.lam[b, m], self.points[b, m]

    @property
    def counts(self) -> np.ndarray:
        return self.mask.sum(1)


@dataclass
class SolveReport:
    y: np.ndarray
    objective: np.ndarray | float
    lower_bound: np.ndarray | float
    gap: np.ndarray | float
    iterations: int
    state: BundleState
    history: list  # per-iteration (objective at y^k, lower bound, active cuts), batched arrays


def bundle_entropy(oracle, y1, K=5, eps=1.0, trace=None, max_newton=30,
                   final_eval=True, check_cuts=False, rng=None) -> SolveReport:
    """Minimize ``f - eps*H`` over the open unit box with ``K`` bundle iterations.

    ``y1`` is ``(n,)`` for one problem or ``(B, n)`` for a batch. The
    returned iterate is ``y^{K+1}``; with ``final_eval`` the oracle is called
    once more there so the report carries its objective and the gap to the
    last dual value. ``check_cuts`` spot-checks every stored cut as an
    underestimator at 100 random points per problem.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    y1 = np.asarray(y1, dtype=float)
    single = y1.ndim == 1
    Y = np.atleast_2d(y1).copy()
    _check_open_box(Y)
    B, n = Y.shape
    G = np.zeros((B, K, n))
    h = np.zeros((B, K))
    pts = np.zeros((B, K, n))
    lam = np.zeros((B, K))
    mask = np.zeros((B, K), bool)
    history = []

    for k in range(K):
        f, g = _call(oracle, Y, k + 1)
        obj = f - eps * box_entropy(Y)
        G[:, k] = g
        h[:, k] = f - (g * Y).sum(1)
        pts[:, k] = Y
        mask[:, k] = True
        if k == 0:
            lam[:, 0] = 1.0
        else:
            lam = _proj_newton_batch(G[:, :k + 1], h[:, :k + 1], mask[:, :k + 1], eps=eps, max_iter=max_newton)
            lam = np.concatenate([lam, np.zeros((B, K - k - 1))], axis=1)
        lb = dual_value(G, h, lam, eps)
        Y = np.clip(expit(-np.einsum("bkn,bk->bn", G, lam) / eps), INTERIOR, 1 - INTERIOR)
        mask &= lam > 0
        history.append((obj, lb, mask.sum(1)))

    state = BundleState(G, h, lam, pts, mask, K)
    if check_cuts:
        _check_underestimators(oracle, state, rng)
    if final_eval:
        f, _ = _call(oracle, Y, K + 1)
        objective = f - eps * box_entropy(Y)
    else:
        objective = np.full(B, np.nan)
    lower = history[-1][1]
    gap = objective - lower
    if trace is not None:
        _write_trace(trace, history)
    if single:
        return SolveReport(Y[0], float(objective[0]), float(lower[0]), float(gap[0]), K, state, history)
    return SolveReport(Y, objective, lower, gap, K, state, history)


def _call(oracle, Y, iteration):
    f, g = oracle(Y)
    f = np.atleast_1d(np.asarray(f, dtype=float))
    g = np.asarray(g, dtype=float).reshape(Y.shape)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise SolverError("oracle returned non-finite values", iteration)
    return f, g


def _check_underestimators(oracle, state, rng, samples=100, tol=1e-9):
    rng = np.random.default_rng(0) if rng is None else rng
    B, _, n = state.G.shape
    for b in range(B):
        G, h, _, _ = state.active(b)
        Ys = rng.uniform(0, 1, (samples, n))
        f, _ = oracle(Ys)
        cuts = Ys @ G.T + h
        if np.any(cuts > f[:, None] + tol):
            raise SolverError(f"stored cut overestimates the energy in problem {b}")


def _write_trace(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "objective", "lower_bound", "gap", "active_cuts"])
        B = len(history[0][0])
        for b in range(B):
            for k, (obj, lb, cnt) in enumerate(history, start=1):
                w.writerow([k, repr(float(obj[b])), repr(float(lb[b])), repr(float(obj[b] - lb[b])), int(cnt[b])])
