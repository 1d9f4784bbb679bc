"""Training: differentiating through bundle-entropy inference, max-margin, ADAM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import net
from .solver import INTERIOR, box_entropy, bundle_entropy, net_oracle, projected_gradient


class KktError(RuntimeError):
    pass


# -- losses ----------------------------------------------------------------


@dataclass(frozen=True)
class LossSpec:
    """Per-example loss averaged over output coordinates."""

    kind: str = "mse"  # "mse" or "bce"

    def __post_init__(self):
        if self.kind not in ("mse", "bce"):
            raise ValueError(f"unknown loss {self.kind!r}")

    def value(self, y_hat, y):
        y_hat, y = np.asarray(y_hat, float), np.asarray(y, float)
        if self.kind == "mse":
            return ((y_hat - y) ** 2).mean(-1)
        q = np.clip(y_hat, INTERIOR, 1 - INTERIOR)
        return -(y * np.log(q) + (1 - y) * np.log1p(-q)).mean(-1)

    def grad(self, y_hat, y):
        y_hat, y = np.asarray(y_hat, float), np.asarray(y, float)
        n = y_hat.shape[-1]
        if self.kind == "mse":
            return 2.0 * (y_hat - y) / n
        q = np.clip(y_hat, INTERIOR, 1 - INTERIOR)
        return (q - y) / (q * (1 - q)) / n


# -- KKT system ------------------------------------------------------------


@dataclass
class KktFactors:
    c_y: np.ndarray
    c_lambda: np.ndarray
    c_t: float
    D: np.ndarray


def _kkt_batch(Y, G, mask, gl, eps=1.0):
    """Solve the bordered KKT system for every row by eliminating ``c_y``.

    ``S = G D^-1 G^T`` is bordered by ones and solved for ``(c_lambda, c_t)``;
    inactive cut slots get identity rows so they come out zero.
    """
    if not np.all((Y > 0) & (Y < 1)):
        raise ValueError("KKT system needs a strictly interior solution")
    B, K, _ = G.shape
    Dinv = 1.0 / (eps * (1.0 / Y + 1.0 / (1.0 - Y)))
    m = mask.astype(float)
    S = np.einsum("bkn,bn,bjn->bkj", G, Dinv, G) * (m[:, :, None] * m[:, None, :])
    S += (1.0 - m)[:, :, None] * np.eye(K)
    if K > 0:
        small = np.linalg.eigvalsh(S).min(1) < 1e-12
        if small.any():
            S[small] += 1e-10 * m[small][:, :, None] * np.eye(K)
    M = np.zeros((B, K + 1, K + 1))
    M[:, :K, :K] = S
    M[:, :K, K] = m
    M[:, K, :K] = m
    rhs = np.zeros((B, K + 1))
    rhs[:, :K] = -np.einsum("bkn,bn->bk", G, Dinv * gl) * m
    try:
        sol = np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise KktError("reduced KKT system is singular") from exc
    c_lam, c_t = sol[:, :K], sol[:, K]
    c_y = -Dinv * (gl + np.einsum("bkn,bk->bn", G, c_lam))
    return c_y, c_lam, c_t, 1.0 / Dinv


def kkt_solve(y_hat, G, grad_loss, eps=1.0) -> KktFactors:
    y_hat = np.asarray(y_hat, float)
    G = np.atleast_2d(np.asarray(G, float))
    mask = np.ones((1, G.shape[0]), bool)
    c_y, c_lam, c_t, D = _kkt_batch(y_hat[None], G[None], mask, np.asarray(grad_loss, float)[None], eps)
    return KktFactors(c_y[0], c_lam[0], float(c_t[0]), D[0])


def kkt_matrix(y_hat, G, eps=1.0) -> np.ndarray:
    """The full ``(n + k + 1)``-square system matrix, for residual checks."""
    n, k = len(y_hat), G.shape[0]
    A = np.zeros((n + k + 1, n + k + 1))
    A[:n, :n] = np.diag(eps * (1 / y_hat + 1 / (1 - y_hat)))
    A[:n, n:n + k] = G.T
    A[n:n + k, :n] = G
    A[n:n + k, n + k] = -1
    A[n + k, n:n + k] = -1
    return A


def kkt_residual(factors: KktFactors, y_hat, G, grad_loss, eps=1.0) -> float:
    """Relative residual of the full block system at the computed factors."""
    A = kkt_matrix(np.asarray(y_hat, float), np.atleast_2d(G), eps)
    sol = np.concatenate([factors.c_y, factors.c_lambda, [factors.c_t]])
    rhs = np.concatenate([-np.asarray(grad_loss, float), np.zeros(len(factors.c_lambda) + 1)])
    scale = max(np.linalg.norm(rhs), np.linalg.norm(A, 2) * np.linalg.norm(sol), 1e-300)
    return float(np.linalg.norm(A @ sol - rhs) / scale)


# -- argmin differentiation ------------------------------------------------


def _batch_xy(params, x, y):
    y = np.asarray(y, float)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    X = None
    if params.spec.kind == net.PICNN:
        X = np.atleast_2d(np.asarray(x, float))
    return X, Y, single


def argmin_diff_grad(params, x, y_star, K=5, loss=LossSpec(), eps=1.0, check=False):
    """Gradient of the mean loss between bundle-entropy predictions and targets.

    Runs exactly ``K`` bundle iterations, solves the KKT system over the
    surviving cuts, then makes one batched ``grad_params`` and one batched
    ``grad_params_dirderiv`` call over all surviving cut points, so the work
    per example is linear in its number of active cuts.

    The formula ignores how the cut points move with the parameters, which is
    exact for piecewise-linear (relu) energies away from kinks.

    Returns ``(grads, y_hat, losses)``.
    """
    X, Ystar, single = _batch_xy(params, x, y_star)
    B, n = Ystar.shape
    report = bundle_entropy(net_oracle(params, X), np.full((B, n), 0.5), K=K, eps=eps, final_eval=False)
    Yhat = report.y
    losses = loss.value(Yhat, Ystar)
    gl = loss.grad(Yhat, Ystar) / B
    st = report.state
    c_y, c_lam, c_t, _ = _kkt_batch(Yhat, st.G, st.mask, gl, eps)
    if check:
        _check_kkt(Yhat, st, gl, c_y, c_lam, c_t, eps)

    bi, ki = np.nonzero(st.mask)
    Xr = X[bi] if X is not None else None
    Yr = st.points[bi, ki]
    w = c_lam[bi, ki]
    V = st.lam[bi, ki][:, None] * c_y[bi] + w[:, None] * (Yhat[bi] - Yr)
    _, tape = net.forward(params, Xr, Yr)
    grads = net.add_grads(net.grad_params(params, tape, w), net.grad_params_dirderiv(params, tape, V))
    if single:
        return grads, Yhat[0], float(losses[0])
    return grads, Yhat, losses


def _check_kkt(Yhat, st, gl, c_y, c_lam, c_t, eps):
    for b in range(Yhat.shape[0]):
        m = st.mask[b]
        fac = KktFactors(c_y[b], c_lam[b, m], float(c_t[b]), None)
        res = kkt_residual(fac, Yhat[b], st.G[b, m], gl[b], eps)
        if res > 1e-8 or abs(c_lam[b, m].sum()) > 1e-9:
            raise KktError(f"KKT check failed for example {b}: residual {res:.3g}, 1^T c_lambda {c_lam[b, m].sum():.3g}")


def unrolled_pg_grad(params, x, y_star, steps=30, alpha=0.1, momentum=0.3, loss=LossSpec(), y0=0.5):
    """Gradient of the loss through ``steps`` of heavy-ball projected gradient.

    Backpropagates through the whole unrolled chain; the box clip passes
    gradient only where the pre-clip iterate was strictly inside.
    """
    X, Ystar, single = _batch_xy(params, x, y_star)
    B, n = Ystar.shape
    Yt = np.full((B, n), float(y0))
    vel = np.zeros_like(Yt)
    tapes, inside = [], []
    for _ in range(steps):
        _, tape = net.forward(params, X, Yt)
        g = net.grad_input(params, tape)
        tapes.append(tape)
        vel = momentum * vel - alpha * g
        pre = Yt + vel
        inside.append((pre > 0) & (pre < 1))
        Yt = np.clip(pre, 0.0, 1.0)
    losses = loss.value(Yt, Ystar)
    ybar = loss.grad(Yt, Ystar) / B
    vbar = np.zeros_like(ybar)
    grads = net.zeros_like(params)
    relu = params.spec.activation == "relu"
    for t in range(steps - 1, -1, -1):
        pbar = ybar * inside[t]
        vbar = vbar + pbar
        gbar = -alpha * vbar
        if relu:
            gt = net.grad_params_dirderiv(params, tapes[t], gbar)
            ybar = pbar
        else:
            gt, hv = net.grad_dirderiv_and_hvp(params, tapes[t], gbar)
            ybar = pbar + hv
        grads = net.add_grads(grads, gt)
        vbar = momentum * vbar
    if single:
        return grads, Yt[0], float(losses[0])
    return grads, Yt, losses


def predict(params, x, n, K=5, eps=1.0, solver="bundle", pg_steps=30, pg_alpha=0.1, pg_momentum=0.3):
    """Inference for a batch: bundle entropy, or projected gradient from ``0.5``."""
    X = None if x is None else np.atleast_2d(np.asarray(x, float))
    B = 1 if X is None else X.shape[0]
    y0 = np.full((B, n), 0.5)
    oracle = net_oracle(params, X)
    if solver == "bundle":
        return bundle_entropy(oracle, y0, K=K, eps=eps, final_eval=False).y
    if solver == "gradient":
        return projected_gradient(oracle, y0, pg_steps, pg_alpha, pg_momentum)
    raise ValueError(f"unknown solver {solver!r}")


# -- max-margin ------------------------------------------------------------


def margin(y_true, y):
    """``Delta(y_true, y) = y_true . (1 - y)``, linear in ``y``."""
    return (np.asarray(y_true, float) * (1.0 - np.asarray(y, float))).sum(-1)


def loss_augmented_inference(params, x, y_true, K=5, eps=1.0):
    """Approximate ``argmin_y f(x, y) - eps H(y) - Delta(y_true, y)``."""
    X, Yt, single = _batch_xy(params, x, y_true)
    base = net_oracle(params, X)

    def oracle(Y):
        f, g = base(Y)
        return f - margin(Yt, Y), g + Yt

    report = bundle_entropy(oracle, np.full(Yt.shape, 0.5), K=K, eps=eps, final_eval=False)
    return report.y[0] if single else report.y


def max_margin_update(params, x, y_true, y_aug, lam_reg, alpha, active=None):
    """``theta <- P+[theta - alpha (lam theta + grad f(x, y_true) - grad f(x, y_aug))]``.

    Batched rows are averaged; rows with ``active`` false contribute no
    energy terms.
    """
    X, Yt, _ = _batch_xy(params, x, y_true)
    Ya = np.atleast_2d(np.asarray(y_aug, float))
    B = Yt.shape[0]
    w = np.ones(B) if active is None else np.asarray(active, float)
    _, t_true = net.forward(params, X, Yt)
    _, t_aug = net.forward(params, X, Ya)
    g = net.add_grads(net.grad_params(params, t_true, w / B), net.grad_params(params, t_aug, w / B), scale=-1.0)
    new = {k: v - alpha * (lam_reg * v + g[k]) for k, v in params.tensors.items()}
    return net.project_params(params.replace(new))


def max_margin_step(params, x, y_true, lam_reg=1e-4, alpha=1e-2, K=5, eps=1.0):
    """One subgradient step of structured max-margin training.

    Only rows whose margin constraint is violated contribute; when none is,
    the parameters come back unchanged.
    """
    X, Yt, _ = _batch_xy(params, x, y_true)
    Ya = loss_augmented_inference(params, X, Yt, K=K, eps=eps)
    Ya = np.atleast_2d(Ya)
    f_true = np.atleast_1d(net.energy(params, X, Yt)) - eps * box_entropy(Yt)
    f_aug = np.atleast_1d(net.energy(params, X, Ya)) - eps * box_entropy(Ya) - margin(Yt, Ya)
    violated = f_true > f_aug
    if alpha == 0 or not violated.any():
        return params
    return max_margin_update(params, X, Yt, Ya, lam_reg, alpha, active=violated)


def structured_hinge(params, x, y_true, lam_reg, y_aug, eps=1.0):
    """``lam/2 |theta|^2 + sum_i max(0, f~(x_i, y_i) - f~(x_i, y_aug_i) + Delta)``.

    ``y_aug`` should minimize the loss-augmented energy; callers choose how
    accurately.
    """
    X, Yt, _ = _batch_xy(params, x, y_true)
    Ya = np.atleast_2d(np.asarray(y_aug, float))
    f_true = np.atleast_1d(net.energy(params, X, Yt)) - eps * box_entropy(Yt)
    f_aug = np.atleast_1d(net.energy(params, X, Ya)) - eps * box_entropy(Ya) - margin(Yt, Ya)
    reg = 0.5 * lam_reg * sum(float((v ** 2).sum()) for v in params.tensors.values())
    return reg + float(np.maximum(f_true - f_aug, 0.0).sum())


# -- ADAM ------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(state: AdamState, params, grads, trainable=None):
    """Bias-corrected ADAM step on the tensors in ``grads``, then projection."""
    t = state.t + 1
    m, v = dict(state.m), dict(state.v)
    out = dict(params.tensors)
    for name, g in grads.items():
        if trainable is not None and name not in trainable:
            continue
        mk = state.beta1 * m.get(name, 0.0) + (1 - state.beta1) * g
        vk = state.beta2 * v.get(name, 0.0) + (1 - state.beta2) * g * g
        m[name], v[name] = mk, vk
        mhat = mk / (1 - state.beta1 ** t)
        vhat = vk / (1 - state.beta2 ** t)
        out[name] = params.tensors[name] - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m, v)
    return new_state, net.project_params(params.replace(out))


# -- training loop ---------------------------------------------------------


@dataclass
class FitConfig:
    epochs: int = 10
    batch: int = 32
    K: int = 5
    lr: float = 1e-3
    eps: float = 1.0
    seed: int = 0
    solver: str = "bundle"  # "bundle": argmin differentiation; "gradient": unrolled projected gradient
    pg_steps: int = 30
    pg_alpha: float = 0.1
    pg_momentum: float = 0.3
    trainer: str = "argmin-diff"  # or "max-margin"
    lam_reg: float = 0.0


def fit(params, X, Y, cfg: FitConfig, loss=LossSpec(), eval_fn=None, trainable=None):
    """Minibatch training; returns ``(params, log)``.

    ``log`` rows are ``(epoch, split, loss, metric)``. The training row of an
    epoch averages the per-example losses seen before each update. ``eval_fn``
    is called as ``eval_fn(params, epoch)`` before training (epoch 0) and
    after every epoch, and returns extra rows.
    """
    X = None if X is None else np.asarray(X, float)
    Y = np.asarray(Y, float)
    if len(Y) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(lr=cfg.lr)
    log = list(eval_fn(params, 0)) if eval_fn else []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(Y))
        seen = []
        for start in range(0, len(Y), cfg.batch):
            idx = order[start:start + cfg.batch]
            xb = None if X is None else X[idx]
            if cfg.trainer == "max-margin":
                before = params
                params = max_margin_step(params, xb, Y[idx], cfg.lam_reg, cfg.lr, K=cfg.K, eps=cfg.eps)
                if trainable is not None:
                    params = before.replace({k: (params[k] if k in trainable else before[k]) for k in before.tensors})
                yh = predict(params, xb, Y.shape[1], K=cfg.K, eps=cfg.eps)
                seen.append(loss.value(yh, Y[idx]))
                continue
            if cfg.solver == "bundle":
                grads, _, losses = argmin_diff_grad(params, xb, Y[idx], K=cfg.K, loss=loss, eps=cfg.eps)
            else:
                grads, _, losses = unrolled_pg_grad(params, xb, Y[idx], cfg.pg_steps, cfg.pg_alpha,
                                                    cfg.pg_momentum, loss)
            seen.append(np.atleast_1d(losses))
            adam, params = adam_update(adam, params, grads, trainable)
        log.append((epoch, "train", float(np.concatenate(seen).mean()), float("nan")))
        if eval_fn:
            log.extend(eval_fn(params, epoch))
    return params, log
