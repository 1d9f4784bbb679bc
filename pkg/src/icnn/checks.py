"""Seeded property checks against independent oracles.

Each check returns a :class:`CheckResult`. The oracles are deliberately
crude (finite differences, dense grids, a generic LP solver) so they share
no code path with the routines under test.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from . import net
from .learn import LossSpec, argmin_diff_grad, kkt_residual, kkt_solve
from .solver import (bundle_entropy, box_entropy, dual_value, net_oracle, proj_newton_logistic,
                     solve_entropy_linear)


@dataclass
class CheckResult:
    name: str
    group: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _params_like(spec, rng, scale=1.0, wz_low=0.0):
    """Random parameters with every tensor (biases included) uniform, ``Wz`` nonnegative."""
    T = {}
    for name, shape in spec.shapes().items():
        if net.is_constrained(name):
            T[name] = rng.uniform(wz_low * scale, scale, shape)
        else:
            T[name] = rng.uniform(-scale, scale, shape)
    return net.Params(spec, T)


def _flat(spec, grads):
    return np.concatenate([grads[k].ravel() for k in spec.shapes()])


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


# -- convexity -------------------------------------------------------------


def jensen_gap(params, n_triples, rng, x_dim=None):
    """Largest ``f(t y1 + (1-t) y2) - t f(y1) - (1-t) f(y2)`` over random triples.

    For a PICNN each triple shares one random ``x``.
    """
    p = params.spec.input_dim_y
    Y1 = rng.normal(size=(n_triples, p))
    Y2 = rng.normal(size=(n_triples, p))
    t = rng.uniform(size=(n_triples, 1))
    X = None
    if params.spec.kind == net.PICNN:
        X = rng.normal(size=(n_triples, params.spec.input_dim_x))
    f = lambda Y: np.atleast_1d(net.forward(params, X, Y)[0])
    lhs = f(t * Y1 + (1 - t) * Y2)
    rhs = t[:, 0] * f(Y1) + (1 - t[:, 0]) * f(Y2)
    return float(np.max(lhs - rhs))


def convexity_architectures():
    specs = [net.NetworkSpec("ficnn", n, (16, 16, 8), activation=act)
             for n in (1, 2, 8) for act in ("relu", "softplus")]
    specs += [net.NetworkSpec("picnn", 3, (16, 16, 8), 4, (16, 16, 8), act) for act in ("relu", "softplus")]
    return specs


def corrupt_params(params, rng):
    """Inject a large negative entry into the last ``Wz`` (breaks convexity)."""
    name = f"Wz_{params.spec.depth - 1}"
    W = params[name].copy()
    W[0, rng.integers(W.shape[1])] = -5.0
    return params.replace({**params.tensors, name: W})


def check_convexity(seed=0, n_triples=1000, slack=1e-9, corrupt=False, params_list=None):
    rng = np.random.default_rng(seed)
    if params_list is None:
        params_list = [_params_like(spec, rng) for spec in convexity_architectures()]
    worst, lines = -np.inf, []
    for params in params_list:
        if corrupt:
            params = corrupt_params(params, rng)
        gap = jensen_gap(params, n_triples, rng)
        worst = max(worst, gap)
        s = params.spec
        lines.append(f"{s.kind}/{s.activation}/n={s.input_dim_y}:{gap:.2e}")
    return worst <= slack, f"max Jensen gap {worst:.3e} (slack {slack:g}); " + " ".join(lines)


# -- gradients -------------------------------------------------------------


def _kink_margin(tape):
    vals = [np.abs(v).min() for v in tape.p[:-1]] + [np.abs(v).min() for v in tape.a]
    vals += [np.abs(v).min() for v in tape.q[1:] if v is not None]
    return min(vals) if vals else np.inf


def gradient_instances(seed=0, n_nets=20, margin=1e-3):
    """Random nets of all four kind/activation pairs with a kink-free point each."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n_nets:
        i = len(out)
        kind = ("ficnn", "picnn")[i % 2]
        act = ("relu", "softplus")[(i // 2) % 2]
        if kind == "ficnn":
            spec = net.NetworkSpec(kind, 3, (6, 5), activation=act)
        else:
            spec = net.NetworkSpec(kind, 3, (6, 5), 2, (5, 4), act)
        params = _params_like(spec, rng)
        for _ in range(100):
            x = rng.normal(size=2) if kind == "picnn" else None
            y = rng.uniform(size=3)
            _, tape = net.forward(params, x, y)
            if act == "softplus" or _kink_margin(tape) > margin:
                out.append((params, x, y, rng.normal(size=3)))
                break
    return out


def gradient_errors(params, x, y, v, h=1e-5):
    """Relative errors of ``(grad_input, grad_params, grad_params_dirderiv)`` vs central differences."""
    spec = params.spec
    _, tape = net.forward(params, x, y)
    gy = net.grad_input(params, tape)
    gp = _flat(spec, net.grad_params(params, tape))
    gd = _flat(spec, net.grad_params_dirderiv(params, tape, v))
    E = np.eye(len(y))
    fd_y = np.array([(net.energy(params, x, y + h * e) - net.energy(params, x, y - h * e)) / (2 * h) for e in E])
    theta = params.flat()
    fd_p, fd_d = [], []
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = h
        Pp, Pm = params.unflatten(theta + e), params.unflatten(theta - e)
        fp, tp = net.forward(Pp, x, y)
        fm, tm = net.forward(Pm, x, y)
        fd_p.append((fp - fm) / (2 * h))
        fd_d.append((net.grad_input(Pp, tp) - net.grad_input(Pm, tm)) @ v / (2 * h))
    return _rel(gy, fd_y), _rel(gp, np.array(fd_p)), _rel(gd, np.array(fd_d))


def check_gradients(seed=0, n_nets=20, tol=1e-4):
    errs = np.array([gradient_errors(*inst) for inst in gradient_instances(seed, n_nets)])
    worst = errs.max(0)
    detail = (f"{n_nets} nets; worst rel err grad_input {worst[0]:.2e}, grad_params {worst[1]:.2e}, "
              f"grad_params_dirderiv {worst[2]:.2e} (tol {tol:g})")
    return bool(np.all(worst <= tol)), detail


# -- solver ----------------------------------------------------------------


def check_closed_form(seed=0, n_inputs=20, tol=1e-6):
    """Bundle entropy on a linear-in-y PICNN matches the sigmoid after one cut."""
    rng = np.random.default_rng(seed)
    ff = net.FeedForward.random((4, 8, 8, 5), seed, scale=1.0)
    params = net.embed_feedforward(ff, 5)
    X = rng.normal(size=(n_inputs, 4))
    rep = bundle_entropy(net_oracle(params, X), np.full((n_inputs, 5), 0.5), K=1)
    err = float(np.abs(rep.y - solve_entropy_linear(ff(X))).max())
    return err <= tol, f"max |y - sigmoid(-c)| = {err:.2e} over {n_inputs} inputs (tol {tol:g})"


def grid_argmin_2d(objective, step=1e-3, refine=(1e-5, 1e-7)):
    """Argmin over the open unit square: full grid at ``step``, then zoomed grids.

    Zooming is exact for strictly convex objectives; the full grid already
    pins the minimizer to a cell.
    """
    g = np.arange(1, round(1 / step)) * step
    A, B = np.meshgrid(g, g, indexing="ij")
    P = np.stack([A.ravel(), B.ravel()], 1)
    vals = np.concatenate([objective(P[i:i + 250_000]) for i in range(0, len(P), 250_000)])
    best = P[vals.argmin()]
    width = step
    for s in refine:
        g0 = np.arange(-width, width + s / 2, s)
        A, B = np.meshgrid(best[0] + g0, best[1] + g0, indexing="ij")
        P = np.stack([A.ravel(), B.ravel()], 1)
        P = P[np.all((P > 0) & (P < 1), 1)]
        best = P[objective(P).argmin()]
        width = 2 * s
    return best


def solver_instances(seed=0, n=20):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        act = ("relu", "softplus")[i % 2]
        spec = net.NetworkSpec("picnn", 2, (16, 16), 3, (16, 16), act)
        out.append((_params_like(spec, rng, scale=0.5), rng.normal(size=3)))
    return out


def check_solver_oracle(seed=0, n_instances=20, K=10, tol=1e-3):
    errs = []
    for params, x in solver_instances(seed, n_instances):
        y = bundle_entropy(net_oracle(params, x), np.full(2, 0.5), K=K).y
        obj = lambda P: np.atleast_1d(net.forward(params, x, P)[0]) - box_entropy(P)
        errs.append(float(np.abs(y - grid_argmin_2d(obj)).max()))
    worst = max(errs)
    return worst <= tol, f"worst inf-norm argmin error {worst:.2e} over {n_instances} energies, K={K} (tol {tol:g})"


def simplex_grid_max(fun, k=3, step=1e-3, refine=(1e-5, 1e-7)):
    """Maximum of ``fun`` over the 3-simplex by a full grid and zoomed grids."""
    assert k == 3
    N = round(1 / step)
    a = np.arange(N + 1) * step
    A, B = np.meshgrid(a, a, indexing="ij")
    sel = A + B <= 1 + 1e-12
    L = np.stack([A[sel], B[sel], np.clip(1 - A[sel] - B[sel], 0, 1)], 1)
    vals = fun(L)
    best, val, width = L[vals.argmax()], vals.max(), step
    for s in refine:
        g0 = np.arange(-width, width + s / 2, s)
        A, B = np.meshgrid(best[0] + g0, best[1] + g0, indexing="ij")
        A, B = np.clip(A.ravel(), 0, 1), np.clip(B.ravel(), 0, 1)
        keep = A + B <= 1
        L = np.stack([A[keep], B[keep], 1 - A[keep] - B[keep]], 1)
        v = fun(L)
        if v.max() > val:
            best, val = L[v.argmax()], v.max()
        width = 2 * s
    return float(val)


def check_dual(seed=0, n_instances=20, tol=1e-6):
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_instances):
        G, h = rng.normal(size=(3, 4)) * 2, rng.normal(size=3)
        lam = proj_newton_logistic(G, h)
        ok = lam.min() >= 0 and abs(lam.sum() - 1) < 1e-12
        val = dual_value(G, h, lam)
        grid = simplex_grid_max(lambda L: dual_value(np.broadcast_to(G, (len(L), 3, 4)),
                                                     np.broadcast_to(h, (len(L), 3)), L))
        errs.append(abs(val - grid) if ok else np.inf)
    worst = max(errs)
    return worst <= tol, f"worst |dual - grid optimum| {worst:.2e} over {n_instances} instances (tol {tol:g})"


# -- argmin differentiation ------------------------------------------------


def argmin_candidates(seed=0):
    """Random relu PICNN problems with well-separated cuts, as ``(params, x, y_star)``."""
    spec = net.NetworkSpec("picnn", 3, (6, 5), 4, (5, 4), "relu")
    s = seed
    while True:
        rng = np.random.default_rng(s)
        params = _params_like(spec, rng, wz_low=0.05)
        yield s, params, rng.normal(size=4), rng.uniform(size=3)
        s += 1


def check_argmin(seed=0, n_instances=10, K=3, h=1e-6, tol=1e-3, max_tries=2000):
    """Argmin gradients vs central differences at active-set-stable instances.

    An instance counts when it keeps at least two well-separated cuts
    (``lambda >= 1e-3``, full-rank ``G``) and no parameter perturbation of
    size ``h`` changes which cuts survive. KKT residuals are checked on every
    instance that reaches the KKT solve.
    """
    loss = LossSpec()
    run = lambda P, x: bundle_entropy(net_oracle(P, x), np.full(3, 0.5), K=K, final_eval=False)
    errs, kkt_res, kkt_sum, tried = [], 0.0, 0.0, 0
    for s, params, x, ys in argmin_candidates(seed):
        tried += 1
        if len(errs) >= n_instances or tried > max_tries:
            break
        rep = run(params, x)
        G, _, lam, _ = rep.state.active()
        if len(lam) < 2 or lam.min() < 1e-3 or np.linalg.matrix_rank(G) < len(lam):
            continue
        grads, y_hat, _ = argmin_diff_grad(params, x, ys, K=K, loss=loss)
        gl = loss.grad(y_hat, ys)
        fac = kkt_solve(y_hat, G, gl)
        kkt_res = max(kkt_res, kkt_residual(fac, y_hat, G, gl))
        kkt_sum = max(kkt_sum, abs(fac.c_lambda.sum()))
        theta, fd, stable = params.flat(), [], True
        for j in range(len(theta)):
            e = np.zeros_like(theta)
            e[j] = h
            rp, rm = run(params.unflatten(theta + e), x), run(params.unflatten(theta - e), x)
            if not (np.array_equal(rp.state.mask, rep.state.mask) and np.array_equal(rm.state.mask, rep.state.mask)):
                stable = False
                break
            fd.append((loss.value(rp.y, ys) - loss.value(rm.y, ys)) / (2 * h))
        if stable:
            errs.append(_rel(_flat(params.spec, grads), np.array(fd)))
    worst = max(errs) if errs else np.inf
    ok = len(errs) >= n_instances and worst <= tol and kkt_res <= 1e-8 and kkt_sum <= 1e-9
    return ok, (f"{len(errs)} stable instances; worst rel err {worst:.2e} (tol {tol:g}); "
                f"max KKT residual {kkt_res:.1e}, max |1'c_lambda| {kkt_sum:.1e}")


# -- feedforward embedding -------------------------------------------------


def check_embedding(seed=0, n_inputs=100, tol=1e-12):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for act in ("relu", "softplus"):
        ff = net.FeedForward.random((4, 10, 8, 5), seed, scale=1.0, activation=act)
        params = net.embed_feedforward(ff, 5, layer_widths=(7, 6))
        X, Y = rng.normal(size=(n_inputs, 4)), rng.normal(size=(n_inputs, 5))
        f = net.forward(params, X, Y)[0]
        ref = (ff(X) * Y).sum(1)
        worst = max(worst, float(np.max(np.abs(f - ref) / np.maximum(1.0, np.abs(ref)))))
    return worst <= tol, f"max |f - ff(x).y| {worst:.1e} on {n_inputs} inputs per activation (tol {tol:g})"


# -- LP export -------------------------------------------------------------


def parse_lp_text(text):
    """Read the exported LP text into ``linprog`` form ``(c, A_ub, b_ub, bounds, names)``."""
    lines = [ln.strip() for ln in text.splitlines()]
    sec, names, rows, bnds, objvar = None, {}, [], {}, None

    def var(name):
        return names.setdefault(name, len(names))

    for ln in lines:
        if not ln or ln.startswith("\\"):
            continue
        if ln in ("OBJECTIVE", "CONSTRAINTS", "BOUNDS", "END"):
            sec = ln
            continue
        if sec == "OBJECTIVE":
            objvar = var(ln.split(":")[1].strip())
        elif sec == "CONSTRAINTS":
            body = ln.split(":", 1)[1]
            expr, rhs = body.split(">=")
            tok = expr.split()
            coefs = {var(tok[0]): 1.0}
            for i in range(1, len(tok), 3):
                sign = 1.0 if tok[i] == "+" else -1.0
                j = var(tok[i + 2])
                coefs[j] = coefs.get(j, 0.0) + sign * float(tok[i + 1])
            rows.append((coefs, float(rhs)))
        elif sec == "BOUNDS":
            m = re.match(r"(\S+) <= (\S+) <= (\S+)$", ln)
            if m:
                bnds[var(m.group(2))] = (float(m.group(1)), float(m.group(3)))
            elif ln.endswith(" free"):
                bnds[var(ln.split()[0])] = (None, None)
            else:
                name, _, lo = ln.split()
                bnds[var(name)] = (float(lo), None)
    nv = len(names)
    c = np.zeros(nv)
    c[objvar] = 1.0
    A = np.zeros((len(rows), nv))
    b = np.zeros(len(rows))
    for r, (coefs, rhs) in enumerate(rows):
        for j, v in coefs.items():
            A[r, j] = -v  # linprog wants A x <= b
        b[r] = -rhs
    return c, A, b, [bnds.get(j, (None, None)) for j in range(nv)], names


_HIGHS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


def _solve_lp(c, A, b, bounds):
    res = linprog(c, A_ub=A, b_ub=b, bounds=bounds, method="highs", options=_HIGHS)
    if res.status != 0:
        raise RuntimeError(f"LP oracle failed: {res.message}")
    return res


def lp_instances(seed=0, n=20):
    rng = np.random.default_rng(seed)
    return [_params_like(net.NetworkSpec("ficnn", 1 + i % 2, (8, 8), activation="relu"), rng) for i in range(n)]


def check_lp(seed=0, n_instances=20, points=50, tol=1e-9):
    """Forward points are feasible; the LP never beats the network, at its optimum or on a grid."""
    rng = np.random.default_rng(seed + 1)
    infeasible, worst_beat = 0, -np.inf
    for params in lp_instances(seed, n_instances):
        lp = net.export_lp(params)
        n = params.spec.input_dim_y
        for y in rng.uniform(size=(points, n)):
            _, tape = net.forward(params, None, y)
            infeasible += not lp.is_feasible(y, tape.z[1:])

        c, A, b, bounds, names = parse_lp_text(lp.to_text())
        yidx = [names[f"y_{j}"] for j in range(n)]
        res = _solve_lp(c, A, b, bounds)
        y_lp = np.clip(res.x[yidx], 0, 1)
        worst_beat = max(worst_beat, net.energy(params, None, y_lp) - res.fun)
        g = np.linspace(0, 1, 6)
        grid = np.stack(np.meshgrid(*([g] * n), indexing="ij"), -1).reshape(-1, n)
        for y in grid:
            fixed = list(bounds)
            for j, col in enumerate(yidx):
                fixed[col] = (y[j], y[j])
            val = _solve_lp(c, A, b, fixed).fun
            worst_beat = max(worst_beat, net.energy(params, None, y) - val)
        grid_min = min(net.energy(params, None, y) for y in grid)
        worst_beat = max(worst_beat, res.fun - grid_min)  # optimum also at or below the grid
    ok = infeasible == 0 and worst_beat <= tol
    return ok, (f"{infeasible} infeasible forward points of {points * n_instances}; "
                f"largest LP advantage over network {worst_beat:.1e} (tol {tol:g})")


# -- registry --------------------------------------------------------------

CHECKS = [
    ("convexity", "convexity", check_convexity),
    ("gradients", "gradient", check_gradients),
    ("closed-form", "solver", check_closed_form),
    ("solver-oracle", "solver", check_solver_oracle),
    ("dual-optimality", "solver", check_dual),
    ("argmin-gradient", "gradient", check_argmin),
    ("embedding", "net", check_embedding),
    ("lp-export", "net", check_lp),
]


def run_checks(filter=None, corrupt=False, seed=0, report=None):
    """Run checks whose name or group contains ``filter``; ``corrupt`` breaks convexity on purpose."""
    out = []
    for name, group, fn in CHECKS:
        if filter and filter not in name and filter not in group:
            continue
        t = time.perf_counter()
        kwargs = {"seed": seed}
        if fn is check_convexity:
            kwargs["corrupt"] = corrupt
        try:
            ok, detail = fn(**kwargs)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"error: {type(exc).__name__}: {exc}"
        res = CheckResult(name, group, bool(ok), detail, time.perf_counter() - t)
        out.append(res)
        if report is not None:
            report(res)
    return out


def format_result(res: CheckResult) -> str:
    return f"{'PASS' if res.passed else 'FAIL'}  {res.name:<16} {res.seconds:6.1f}s  {res.detail}"
