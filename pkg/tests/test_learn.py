import numpy as np
import pytest

from icnn import checks, learn, net
from icnn.learn import AdamState, FitConfig, LossSpec, adam_update, argmin_diff_grad, kkt_solve
from icnn.solver import bundle_entropy, net_oracle


@pytest.mark.parametrize("kind", ["mse", "bce"])
def test_loss_gradient_finite_differences(kind, rng):
    loss = LossSpec(kind)
    y_hat, y = rng.uniform(0.1, 0.9, 6), (rng.uniform(size=6) > 0.5).astype(float)
    h = 1e-6
    fd = [(loss.value(y_hat + h * e, y) - loss.value(y_hat - h * e, y)) / (2 * h) for e in np.eye(6)]
    np.testing.assert_allclose(loss.grad(y_hat, y), fd, atol=1e-6)


def test_loss_rejects_unknown_kind():
    with pytest.raises(ValueError):
        LossSpec("hinge")


def test_kkt_zero_rhs(rng):
    f = kkt_solve(rng.uniform(0.2, 0.8, 3), rng.normal(size=(2, 3)), np.zeros(3))
    assert np.all(f.c_y == 0) and np.all(f.c_lambda == 0) and f.c_t == 0


def test_kkt_dense_residual(rng):
    for _ in range(20):
        y, G, gl = rng.uniform(0.05, 0.95, 3), rng.normal(size=(2, 3)), rng.normal(size=3)
        f = kkt_solve(y, G, gl)
        A = learn.kkt_matrix(y, G)
        ref = np.linalg.solve(A, np.concatenate([-gl, np.zeros(3)]))
        sol = np.concatenate([f.c_y, f.c_lambda, [f.c_t]])
        assert np.linalg.norm(sol - ref) <= 1e-8 * np.linalg.norm(ref)
        assert learn.kkt_residual(f, y, G, gl) <= 1e-8
        assert abs(f.c_lambda.sum()) <= 1e-9


def test_kkt_boundary_is_error():
    with pytest.raises(ValueError):
        kkt_solve(np.array([0.0, 0.5]), np.ones((1, 2)), np.ones(2))


def test_kkt_duplicate_cuts_are_regularized(rng):
    # identical rows make S singular; the 1e-10 shift keeps the solve finite
    g = rng.normal(size=3)
    f = kkt_solve(np.full(3, 0.4), np.stack([g, g]), rng.normal(size=3))
    assert np.all(np.isfinite(f.c_y)) and np.all(np.isfinite(f.c_lambda))


def small_picnn(seed, act="relu"):
    spec = net.NetworkSpec("picnn", 3, (6, 5), 4, (5, 4), act)
    return net.init_params(spec, seed, 1.0)


def test_argmin_grad_zero_at_target(rng):
    p, x = small_picnn(0), rng.normal(size=4)
    y_hat = bundle_entropy(net_oracle(p, x), np.full(3, 0.5), K=5, final_eval=False).y
    g, y2, loss = argmin_diff_grad(p, x, y_hat, K=5)
    assert np.array_equal(y_hat, y2) and loss == 0.0
    assert all(np.all(v == 0) for v in g.values())


def test_argmin_grad_trivial_picnn_chain_rule(rng):
    # with one cut at y = 0.5 the solution is sigmoid(-c) with c = grad_y f(x, 0.5); differentiate that directly
    ff = net.FeedForward.random((4, 6, 3), seed=2, scale=1.0, activation="softplus")
    p = net.embed_feedforward(ff, 3)
    x, ys = rng.normal(size=4), rng.uniform(size=3)
    loss = LossSpec("mse")
    g, y_hat, _ = argmin_diff_grad(p, x, ys, K=1, loss=loss)
    dl_dc = loss.grad(y_hat, ys) * -y_hat * (1 - y_hat)
    theta, h = p.flat(), 1e-6
    c = lambda prm: net.grad_input(prm, net.forward(prm, x, np.full(3, 0.5))[1])
    ref = []
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = h
        ref.append(dl_dc @ (c(p.unflatten(theta + e)) - c(p.unflatten(theta - e))) / (2 * h))
    flat = np.concatenate([g[k].ravel() for k in p.spec.shapes()])
    assert np.linalg.norm(flat - ref) <= 1e-6 * np.linalg.norm(ref)


def test_argmin_grad_finite_differences_at_stable_points():
    ok, detail = checks.check_argmin(seed=0, n_instances=3)
    assert ok, detail


def test_argmin_grad_batch_is_mean_of_examples(rng):
    p = small_picnn(3)
    X, Ys = rng.normal(size=(4, 4)), rng.uniform(size=(4, 3))
    g, _, losses = argmin_diff_grad(p, X, Ys, K=4)
    ref = net.zeros_like(p)
    for i in range(4):
        gi, _, li = argmin_diff_grad(p, X[i], Ys[i], K=4)
        ref = net.add_grads(ref, gi, 0.25)
        assert li == pytest.approx(losses[i], abs=1e-14)
    for k in g:
        np.testing.assert_allclose(g[k], ref[k], atol=1e-12)


def test_argmin_grad_call_counts(monkeypatch, rng):
    # one batched call each to grad_params and grad_params_dirderiv, with one row per active cut
    seen = {"grad_params": [], "grad_params_dirderiv": []}
    for name in seen:
        orig = getattr(net, name)

        def wrapped(params, tape, *a, _orig=orig, _name=name):
            seen[_name].append(tape.y.shape[0])
            return _orig(params, tape, *a)

        monkeypatch.setattr(net, name, wrapped)
    p = small_picnn(5)
    X, Ys = rng.normal(size=(6, 4)), rng.uniform(size=(6, 3))
    rep = bundle_entropy(net_oracle(p, X), np.full((6, 3), 0.5), K=4, final_eval=False)
    argmin_diff_grad(p, X, Ys, K=4, check=True)
    active = int(rep.state.mask.sum())
    assert seen == {"grad_params": [active], "grad_params_dirderiv": [active]}


def test_unrolled_gradient_finite_differences(rng):
    p = small_picnn(7, act="softplus")
    x, ys = rng.normal(size=4), rng.uniform(size=3)
    kw = dict(steps=15, alpha=0.1, momentum=0.3)
    g, _, _ = learn.unrolled_pg_grad(p, x, ys, **kw)
    loss = LossSpec()
    run = lambda prm: loss.value(learn.predict(prm, x, 3, solver="gradient", pg_steps=15, pg_alpha=0.1,
                                               pg_momentum=0.3)[0], ys)
    theta, h, fd = p.flat(), 1e-6, []
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = h
        fd.append((run(p.unflatten(theta + e)) - run(p.unflatten(theta - e))) / (2 * h))
    flat = np.concatenate([g[k].ravel() for k in p.spec.shapes()])
    assert np.linalg.norm(flat - fd) <= 1e-5 * np.linalg.norm(fd)


def test_predict_rejects_unknown_solver():
    with pytest.raises(ValueError):
        learn.predict(small_picnn(0), np.zeros(4), 3, solver="newton")


# -- max-margin --------------------------------------------------------------


def test_margin_is_linear():
    assert learn.margin(np.array([1.0, 0.0, 1.0]), np.array([0.25, 0.9, 1.0])) == 0.75


def test_max_margin_zero_step(rng):
    p = small_picnn(1)
    x, y = rng.normal(size=(3, 4)), (rng.uniform(size=(3, 3)) > 0.5).astype(float)
    q = learn.max_margin_step(p, x, y, lam_reg=0.1, alpha=0.0)
    assert all(np.array_equal(p[k], q[k]) for k in p.tensors)


def test_max_margin_update_cancels_when_augmented_equals_truth(rng):
    p = small_picnn(1)
    x, y = rng.normal(size=4), rng.uniform(size=3)
    lam, alpha = 0.3, 0.1
    q = learn.max_margin_update(p, x, y, y, lam, alpha)
    ref = net.project_params(p.replace({k: (1 - alpha * lam) * v for k, v in p.tensors.items()}))
    for k in p.tensors:
        np.testing.assert_allclose(q[k], ref[k], atol=1e-15)


def test_max_margin_step_decreases_hinge():
    # one label, f(x, y) = w*y*x + b*y with the feedforward embedding
    ff = net.FeedForward([np.array([[0.5]]), np.array([[0.8]])], [np.zeros(1), np.array([0.1])], "relu")
    p = net.embed_feedforward(ff, 1)
    x, y = np.array([[1.0]]), np.array([[1.0]])
    lam = 1e-3
    y_aug = learn.loss_augmented_inference(p, x, y)
    before = learn.structured_hinge(p, x, y, lam, y_aug)
    assert before > 0
    q = learn.max_margin_step(p, x, y, lam_reg=lam, alpha=0.05)
    after = learn.structured_hinge(q, x, y, lam, learn.loss_augmented_inference(q, x, y))
    assert after < before


# -- ADAM ----------------------------------------------------------------------


def test_adam_zero_gradient(rng):
    p = small_picnn(2)
    _, q = adam_update(AdamState(), p, net.zeros_like(p))
    assert all(np.array_equal(p[k], q[k]) for k in p.tensors)


def test_adam_projects(rng):
    p = small_picnn(2)
    grads = {k: rng.normal(size=v.shape) * 100 for k, v in p.tensors.items()}
    _, q = adam_update(AdamState(lr=1.0), p, grads)
    assert net.is_feasible(q)


def test_adam_constant_gradient_step_size():
    spec = net.NetworkSpec("ficnn", 2, ())
    p = net.Params(spec, {"Wy_0": np.zeros((1, 2)), "b_0": np.zeros(1)})
    g = {"Wy_0": np.array([[3.0, -0.2]]), "b_0": np.array([1e-4])}
    state = AdamState(lr=1e-3)
    for _ in range(5000):
        prev = p
        state, p = adam_update(state, p, g)
    step = p["Wy_0"] - prev["Wy_0"]
    np.testing.assert_allclose(step, -1e-3 * np.sign(g["Wy_0"]), rtol=1e-3)
    assert abs(p["b_0"][0] - prev["b_0"][0] + 1e-3) <= 1e-6


def test_adam_trainable_subset(rng):
    p = small_picnn(2)
    grads = {k: np.ones_like(v) for k, v in p.tensors.items()}
    state, q = adam_update(AdamState(), p, grads, trainable={"b_0"})
    assert not np.array_equal(p["b_0"], q["b_0"])
    assert all(np.array_equal(p[k], q[k]) for k in p.tensors if k != "b_0")
    assert set(state.m) == {"b_0"}


# -- fit -------------------------------------------------------------------------


def test_fit_zero_epochs(rng):
    p = small_picnn(4)
    q, log = learn.fit(p, rng.normal(size=(5, 4)), rng.uniform(size=(5, 3)), FitConfig(epochs=0))
    assert q is p and log == []


def test_fit_single_example_loss_drops():
    spec = net.NetworkSpec("picnn", 3, (8, 8), 4, (8, 8), "relu")
    p = net.init_params(spec, 0, 0.1)
    X, Y = np.array([[0.5, -1.0, 0.2, 1.0]]), np.array([[0.9, 0.1, 0.7]])
    _, log = learn.fit(p, X, Y, FitConfig(epochs=200, batch=1, lr=1e-2, seed=0))
    first, last = log[0][2], log[-1][2]
    assert last <= 0.1 * first


def test_fit_deterministic(rng):
    p = small_picnn(4)
    X, Y = rng.normal(size=(20, 4)), rng.uniform(size=(20, 3))
    cfg = FitConfig(epochs=3, batch=6, seed=9)
    a, b = learn.fit(p, X, Y, cfg), learn.fit(p, X, Y, cfg)
    assert repr(a[1]) == repr(b[1])
    assert all(a[0][k].tobytes() == b[0][k].tobytes() for k in p.tensors)


def test_fit_keeps_params_feasible(rng):
    p = small_picnn(4)
    X, Y = rng.normal(size=(20, 4)), rng.uniform(size=(20, 3))
    q, _ = learn.fit(p, X, Y, FitConfig(epochs=3, batch=5, lr=0.05))
    assert net.is_feasible(q)
    ok, detail = checks.check_convexity(n_triples=300, params_list=[q])
    assert ok, detail


@pytest.mark.parametrize("trainer,solver", [("argmin-diff", "gradient"), ("max-margin", "bundle")])
def test_fit_other_trainers_run(trainer, solver, rng):
    p = small_picnn(4)
    X, Y = rng.normal(size=(10, 4)), (rng.uniform(size=(10, 3)) > 0.5).astype(float)
    q, log = learn.fit(p, X, Y, FitConfig(epochs=2, batch=5, trainer=trainer, solver=solver, pg_steps=5))
    assert [r[0] for r in log] == [1, 2] and net.is_feasible(q)


def test_fit_eval_rows_and_empty_data(rng):
    p = small_picnn(4)
    ev = lambda prm, epoch: [(epoch, "test", 0.0, 1.0)]
    _, log = learn.fit(p, rng.normal(size=(4, 4)), rng.uniform(size=(4, 3)), FitConfig(epochs=2), eval_fn=ev)
    assert [(r[0], r[1]) for r in log] == [(0, "test"), (1, "train"), (1, "test"), (2, "train"), (2, "test")]
    with pytest.raises(ValueError):
        learn.fit(p, np.zeros((0, 4)), np.zeros((0, 3)), FitConfig())
