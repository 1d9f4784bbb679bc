"""Fully and partially input convex networks with hand-written derivatives.

All evaluation is batched: inputs of shape ``(B, d)`` give ``B`` energies.
Single vectors are accepted everywhere and give scalar results back.

Parameter tensors live in a flat ``dict`` keyed by name:

* ``Wy_i``, ``b_i``  (i = 0..k-1): y-passthrough and bias of z-layer i
* ``Wz_i``           (i = 1..k-1): z-to-z weights, constrained nonnegative
* PICNN only: ``Wt_i``, ``bt_i`` (x-path, i = 0..k-2), ``Wu_i`` (i = 0..k-1),
  ``Wzu_i``, ``bz_i`` (z gate, i = 1..k-1), ``Wyu_i``, ``by_i`` (y gate).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

FICNN = "ficnn"
PICNN = "picnn"
ACTIVATIONS = ("relu", "softplus")


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    input_dim_y: int
    layer_widths: tuple[int, ...] = ()
    input_dim_x: int = 0
    u_widths: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "u_widths", tuple(int(w) for w in self.u_widths))
        if self.kind not in (FICNN, PICNN):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_dim_y < 1:
            raise ValueError("input_dim_y must be positive")
        if any(w < 1 for w in self.layer_widths + self.u_widths):
            raise ValueError("layer widths must be positive")
        if self.kind == FICNN:
            if self.input_dim_x != 0 or self.u_widths:
                raise ValueError("a FICNN has no x-path")
        else:
            if self.input_dim_x < 1:
                raise ValueError("a PICNN needs input_dim_x >= 1")
            if len(self.u_widths) != len(self.layer_widths):
                raise ValueError("u_widths and layer_widths must have equal length")

    @property
    def depth(self) -> int:
        return len(self.layer_widths) + 1

    @property
    def z_widths(self) -> tuple[int, ...]:
        """Widths m_1..m_k of the z-path, output layer included."""
        return self.layer_widths + (1,)

    @property
    def x_widths(self) -> tuple[int, ...]:
        """Widths n_0..n_{k-1} of the x-path, with n_0 the input dimension."""
        return (self.input_dim_x,) + self.u_widths

    def shapes(self) -> dict[str, tuple[int, ...]]:
        k, p, m = self.depth, self.input_dim_y, self.z_widths
        out: dict[str, tuple[int, ...]] = {}
        if self.kind == PICNN:
            n = self.x_widths
            for i in range(k - 1):
                out[f"Wt_{i}"] = (n[i + 1], n[i])
                out[f"bt_{i}"] = (n[i + 1],)
        for i in range(k):
            if i > 0:
                out[f"Wz_{i}"] = (m[i], m[i - 1])
            out[f"Wy_{i}"] = (m[i], p)
            out[f"b_{i}"] = (m[i],)
            if self.kind == PICNN:
                out[f"Wu_{i}"] = (m[i], n[i])
                out[f"Wyu_{i}"] = (p, n[i])
                out[f"by_{i}"] = (p,)
                if i > 0:
                    out[f"Wzu_{i}"] = (m[i - 1], n[i])
                    out[f"bz_{i}"] = (m[i - 1],)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        d["u_widths"] = list(self.u_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(**d)


def is_constrained(name: str) -> bool:
    return name.startswith("Wz_")


def is_bias(name: str) -> bool:
    return name.split("_")[0] in ("b", "bt", "by", "bz")


@dataclass
class Params:
    """Network weights. ``FicnnParams`` and ``PicnnParams`` are this class."""

    spec: NetworkSpec
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> Params:
        return Params(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def replace(self, tensors: dict[str, np.ndarray]) -> Params:
        return Params(self.spec, tensors)

    def num_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in self.spec.shapes()])

    def unflatten(self, vec: np.ndarray) -> Params:
        out, pos = {}, 0
        for name, shape in self.spec.shapes().items():
            size = int(np.prod(shape))
            out[name] = np.asarray(vec[pos:pos + size], dtype=float).reshape(shape).copy()
            pos += size
        return Params(self.spec, out)


FicnnParams = Params
PicnnParams = Params
Gradients = dict  # name -> array, shaped like the parameter it differentiates


def init_params(spec: NetworkSpec, seed: int, scale: float = 0.1) -> Params:
    """Uniform ``[-scale, scale]`` weights, zero biases, ``Wz`` clamped to ``[0, scale]``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in spec.shapes().items():
        if is_bias(name):
            tensors[name] = np.zeros(shape)
            continue
        w = rng.uniform(-scale, scale, size=shape)
        if is_constrained(name):
            w = np.maximum(w, 0.0)
        tensors[name] = w
    return Params(spec, tensors)


def project_params(params: Params) -> Params:
    out = dict(params.tensors)
    for name, w in params.tensors.items():
        if is_constrained(name):
            out[name] = np.maximum(w, 0.0)
    return params.replace(out)


def is_feasible(params: Params) -> bool:
    return all(np.all(w >= 0) for name, w in params.tensors.items() if is_constrained(name))


# -- activations -----------------------------------------------------------


def _act(kind, x):
    if kind == "relu":
        return np.maximum(x, 0.0)
    return np.logaddexp(0.0, x)


def _dact(kind, x):
    if kind == "relu":
        return (x > 0).astype(float)  # subgradient 0 at the kink
    return expit(x)


def _ddact(kind, x):
    if kind == "relu":
        return np.zeros_like(x)
    s = expit(x)
    return s * (1.0 - s)


# -- forward ---------------------------------------------------------------


@dataclass
class GradTape:
    """Everything a forward pass computed, batched along axis 0."""

    x: np.ndarray | None
    y: np.ndarray
    u: list  # x-path activations u_0..u_{k-1}
    a: list  # x-path pre-activations
    q: list  # z-gate pre-activations (index i >= 1)
    s: list  # clamped z-gate values
    r: list  # y-gate values
    p: list  # z-path pre-activations p_0..p_{k-1}
    z: list  # z_0 (None) .. z_k
    single: bool

    @property
    def value(self) -> np.ndarray:
        return self.z[-1][:, 0]


def _as_batch(params, x, y):
    spec = params.spec
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    if Y.ndim != 2 or Y.shape[1] != spec.input_dim_y:
        raise ValueError(f"y has shape {y.shape}, expected (..., {spec.input_dim_y})")
    X = None
    if spec.kind == PICNN:
        if x is None:
            raise ValueError("a PICNN needs x")
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != spec.input_dim_x:
            raise ValueError(f"x has shape {x.shape}, expected (..., {spec.input_dim_x})")
        X = np.broadcast_to(np.atleast_2d(x), (Y.shape[0], spec.input_dim_x))
        if x.ndim == 2 and x.shape[0] != Y.shape[0]:
            raise ValueError("x and y batch sizes differ")
        single = single and x.ndim == 1
    return X, Y, single


def forward(params: Params, x, y) -> tuple:
    """Evaluate ``f(x, y)``; returns ``(value, tape)``."""
    spec, T = params.spec, params.tensors
    X, Y, single = _as_batch(params, x, y)
    k, act = spec.depth, spec.activation
    picnn = spec.kind == PICNN

    u, a = [X], []
    if picnn:
        for i in range(k - 1):
            a.append(u[i] @ T[f"Wt_{i}"].T + T[f"bt_{i}"])
            u.append(_act(act, a[i]))

    q, s, r, p, z = [None], [None], [], [], [None]
    for i in range(k):
        pre = T[f"b_{i}"]
        if i > 0:
            if picnn:
                q.append(u[i] @ T[f"Wzu_{i}"].T + T[f"bz_{i}"])
                s.append(np.maximum(q[i], 0.0))
                zs = z[i] * s[i]
            else:
                zs = z[i]
            pre = pre + zs @ T[f"Wz_{i}"].T
        if picnn:
            r.append(u[i] @ T[f"Wyu_{i}"].T + T[f"by_{i}"])
            pre = pre + (Y * r[i]) @ T[f"Wy_{i}"].T + u[i] @ T[f"Wu_{i}"].T
        else:
            pre = pre + Y @ T[f"Wy_{i}"].T
        p.append(pre)
        z.append(pre if i == k - 1 else _act(act, pre))

    tape = GradTape(X, Y, u, a, q, s, r, p, z, single)
    value = tape.value
    return (float(value[0]) if single else value), tape


def energy(params: Params, x, y):
    return forward(params, x, y)[0]


# -- reverse passes --------------------------------------------------------


def _tangent(params: Params, tape: GradTape, V: np.ndarray) -> list:
    """Forward-mode derivative of the z-path pre-activations along ``y + eps*V``."""
    spec, T = params.spec, params.tensors
    picnn = spec.kind == PICNN
    pdot, zdot = [], [None]
    for i in range(spec.depth):
        vr = V * tape.r[i] if picnn else V
        pd = vr @ T[f"Wy_{i}"].T
        if i > 0:
            zs = zdot[i] * tape.s[i] if picnn else zdot[i]
            pd = pd + zs @ T[f"Wz_{i}"].T
        pdot.append(pd)
        last = i == spec.depth - 1
        zdot.append(pd if last else _dact(spec.activation, tape.p[i]) * pd)
    return pdot, zdot


def _reverse(params: Params, tape: GradTape, wf=None, V=None, want_params=True):
    """Gradient of ``sum_b wf_b f_b + sum_b grad_y f_b . V_b`` in params and y.

    The second term is handled by reverse-mode over a forward-mode tangent,
    so the parameter gradient of a directional derivative comes out exactly
    on each linear piece.
    """
    spec, T = params.spec, params.tensors
    picnn, act, k = spec.kind == PICNN, spec.activation, spec.depth
    B = tape.y.shape[0]
    Y = tape.y
    grads: dict[str, np.ndarray] = {}

    zbar = np.zeros((B, 1)) if wf is None else np.asarray(wf, dtype=float).reshape(B, 1)
    zdbar = None
    if V is not None:
        V = np.atleast_2d(np.asarray(V, dtype=float))
        pdot, zdot = _tangent(params, tape, V)
        zdbar = np.ones((B, 1))
    ybar = np.zeros_like(Y)
    ubar = [np.zeros_like(u) for u in tape.u] if picnn else None

    for i in range(k - 1, -1, -1):
        if i == k - 1:
            pbar = zbar
            pdbar = zdbar
        else:
            d1 = _dact(act, tape.p[i])
            pbar = zbar * d1
            pdbar = None
            if zdbar is not None:
                pbar = pbar + zdbar * _ddact(act, tape.p[i]) * pdot[i]
                pdbar = zdbar * d1

        ysbar = pbar @ T[f"Wy_{i}"]
        r = tape.r[i] if picnn else 1.0
        ybar += ysbar * r
        if want_params:
            grads[f"b_{i}"] = pbar.sum(0)
            gWy = pbar.T @ (Y * r)
            if pdbar is not None:
                gWy = gWy + pdbar.T @ (V * r)
            grads[f"Wy_{i}"] = gWy
        if picnn:
            rbar = ysbar * Y
            if pdbar is not None:
                rbar = rbar + (pdbar @ T[f"Wy_{i}"]) * V
            ubar[i] += rbar @ T[f"Wyu_{i}"] + pbar @ T[f"Wu_{i}"]
            if want_params:
                grads[f"Wyu_{i}"] = rbar.T @ tape.u[i]
                grads[f"by_{i}"] = rbar.sum(0)
                grads[f"Wu_{i}"] = pbar.T @ tape.u[i]

        if i == 0:
            break
        z = tape.z[i]
        s = tape.s[i] if picnn else 1.0
        zsbar = pbar @ T[f"Wz_{i}"]
        zdsbar = pdbar @ T[f"Wz_{i}"] if pdbar is not None else None
        if want_params:
            gWz = pbar.T @ (z * s)
            if pdbar is not None:
                gWz = gWz + pdbar.T @ (zdot[i] * s)
            grads[f"Wz_{i}"] = gWz
        if picnn:
            sbar = zsbar * z
            if zdsbar is not None:
                sbar = sbar + zdsbar * zdot[i]
            qbar = sbar * (tape.q[i] > 0)
            ubar[i] += qbar @ T[f"Wzu_{i}"]
            if want_params:
                grads[f"Wzu_{i}"] = qbar.T @ tape.u[i]
                grads[f"bz_{i}"] = qbar.sum(0)
        zbar = zsbar * s
        zdbar = zdsbar * s if zdsbar is not None else None

    if picnn and want_params:
        for i in range(k - 1, 0, -1):
            abar = ubar[i] * _dact(act, tape.a[i - 1])
            grads[f"Wt_{i - 1}"] = abar.T @ tape.u[i - 1]
            grads[f"bt_{i - 1}"] = abar.sum(0)
            ubar[i - 1] += abar @ T[f"Wt_{i - 1}"]
    return grads, ybar


def grad_input(params: Params, tape: GradTape) -> np.ndarray:
    """``grad_y f`` for every row of the tape."""
    B = tape.y.shape[0]
    _, gy = _reverse(params, tape, wf=np.ones(B), want_params=False)
    return gy[0] if tape.single else gy


def grad_params(params: Params, tape: GradTape, weights=None) -> Gradients:
    """Gradient of ``sum_b weights_b * f(x_b, y_b)`` (weights default to ones)."""
    B = tape.y.shape[0]
    wf = np.ones(B) if weights is None else np.broadcast_to(np.asarray(weights, float), (B,))
    grads, _ = _reverse(params, tape, wf=wf)
    return grads


def grad_params_dirderiv(params: Params, tape: GradTape, v) -> Gradients:
    """Gradient in the parameters of ``sum_b grad_y f(x_b, y_b) . v_b``."""
    V = np.asarray(v, dtype=float)
    if V.shape[-1] != params.spec.input_dim_y:
        raise ValueError(f"v has shape {V.shape}, expected (..., {params.spec.input_dim_y})")
    V = np.broadcast_to(np.atleast_2d(V), tape.y.shape)
    grads, _ = _reverse(params, tape, V=V)
    return grads


def grad_dirderiv_and_hvp(params: Params, tape: GradTape, v) -> tuple:
    """Both halves of one reverse pass: ``grad_params_dirderiv`` and ``hvp_input``."""
    V = np.broadcast_to(np.atleast_2d(np.asarray(v, dtype=float)), tape.y.shape)
    return _reverse(params, tape, V=V)


def hvp_input(params: Params, tape: GradTape, v) -> np.ndarray:
    """``grad_y (grad_y f . v)``, i.e. the input Hessian times ``v`` (zero a.e. for relu)."""
    V = np.broadcast_to(np.atleast_2d(np.asarray(v, dtype=float)), tape.y.shape)
    _, gy = _reverse(params, tape, V=V, want_params=False)
    return gy[0] if tape.single else gy


def zeros_like(params: Params) -> Gradients:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def add_grads(a: Gradients, b: Gradients, scale: float = 1.0) -> Gradients:
    out = dict(a)
    for k, v in b.items():
        out[k] = out[k] + scale * v if k in out else scale * v
    return out


# -- feedforward embedding -------------------------------------------------


@dataclass
class FeedForward:
    """Plain network ``x -> R^p``: hidden layers with ``activation``, linear output."""

    weights: list
    biases: list
    activation: str = "relu"

    def __call__(self, x):
        h = np.asarray(x, dtype=float)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if i < len(self.weights) - 1:
                h = _act(self.activation, h)
        return h

    @classmethod
    def random(cls, widths, seed, scale=0.5, activation="relu"):
        """``widths = (input, hidden..., output)``."""
        rng = np.random.default_rng(seed)
        Ws = [rng.uniform(-scale, scale, (widths[i + 1], widths[i])) for i in range(len(widths) - 1)]
        bs = [rng.uniform(-scale, scale, widths[i + 1]) for i in range(len(widths) - 1)]
        return cls(Ws, bs, activation)


def embed_feedforward(ff: FeedForward, p: int, layer_widths=None) -> Params:
    """PICNN whose energy is exactly ``ff(x) . y``.

    The x-path copies the hidden layers of ``ff``; the last y-gate is the
    output layer of ``ff`` and everything else on the z-path is zero.
    """
    k = len(ff.weights)
    dx = ff.weights[0].shape[1]
    if ff.weights[-1].shape[0] != p:
        raise ValueError("feedforward output dimension differs from p")
    layer_widths = tuple(layer_widths) if layer_widths is not None else (1,) * (k - 1)
    spec = NetworkSpec(
        PICNN, input_dim_y=p, layer_widths=layer_widths, input_dim_x=dx,
        u_widths=tuple(W.shape[0] for W in ff.weights[:-1]), activation=ff.activation,
    )
    T = {name: np.zeros(shape) for name, shape in spec.shapes().items()}
    for i in range(k - 1):
        T[f"Wt_{i}"] = np.array(ff.weights[i], dtype=float)
        T[f"bt_{i}"] = np.array(ff.biases[i], dtype=float)
    T[f"Wyu_{k - 1}"] = np.array(ff.weights[-1], dtype=float)
    T[f"by_{k - 1}"] = np.array(ff.biases[-1], dtype=float)
    T[f"Wy_{k - 1}"] = np.ones((1, p))
    return Params(spec, T)


def feedforward_tensors(spec: NetworkSpec) -> list[str]:
    """Tensors that stay trainable when a PICNN is used as its feedforward embedding."""
    k = spec.depth
    names = [f"Wt_{i}" for i in range(k - 1)] + [f"bt_{i}" for i in range(k - 1)]
    return names + [f"Wyu_{k - 1}", f"by_{k - 1}"]


# -- checkpoints -----------------------------------------------------------


def params_to_json(params: Params) -> dict:
    return {
        "format_version": 1,
        "spec": params.spec.to_dict(),
        "tensors": {
            name: {"shape": list(w.shape), "data": w.ravel().tolist()}
            for name, w in params.tensors.items()
        },
    }


def params_from_json(doc: dict) -> Params:
    if doc.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    spec = NetworkSpec.from_dict(doc["spec"])
    tensors = {}
    for name, shape in spec.shapes().items():
        entry = doc["tensors"][name]
        if tuple(entry["shape"]) != shape:
            raise ValueError(f"tensor {name} has shape {entry['shape']}, expected {list(shape)}")
        tensors[name] = np.asarray(entry["data"], dtype=float).reshape(shape)
    return Params(spec, tensors)


def save_params(params: Params, path) -> None:
    Path(path).write_text(json.dumps(params_to_json(params)))


def load_params(path) -> Params:
    return params_from_json(json.loads(Path(path).read_text()))


# -- exact-inference LP ----------------------------------------------------


@dataclass
class LinearProgram:
    """``min z_k`` over ``(y, z_1..z_k)`` with one inequality block per layer.

    Layer ``i`` reads ``z_{i+1} >= Wz_i z_i + Wy_i y + b_i``; hidden ``z`` are
    nonnegative, ``y`` lies in ``[lo, hi]`` and ``z_k`` is free.
    """

    layers: list  # (Wz or None, Wy, b) per layer
    y_lo: np.ndarray
    y_hi: np.ndarray

    @property
    def depth(self) -> int:
        return len(self.layers)

    def lhs(self, y, zs) -> list:
        """Right-hand sides ``Wz z + Wy y + b``, computed exactly as the forward pass does."""
        Y = np.atleast_2d(y)
        out = []
        for i, (Wz, Wy, b) in enumerate(self.layers):
            pre = b
            if Wz is not None:
                pre = pre + np.atleast_2d(zs[i - 1]) @ Wz.T
            out.append(pre + Y @ Wy.T)
        return out

    def is_feasible(self, y, zs, tol: float = 0.0) -> bool:
        y = np.asarray(y, dtype=float)
        if np.any(y < self.y_lo - tol) or np.any(y > self.y_hi + tol):
            return False
        for i, rhs in enumerate(self.lhs(y, zs)):
            z = np.atleast_2d(zs[i])
            if np.any(z < rhs - tol):
                return False
            if i < self.depth - 1 and np.any(z < -tol):
                return False
        return True

    @staticmethod
    def objective(zs) -> float:
        return float(np.ravel(zs[-1])[0])

    def to_text(self) -> str:
        k = self.depth
        fmt = lambda c: format(float(c), ".17g")

        def term(coef, var):
            c = float(coef)
            return f" - {fmt(-c)} {var}" if c < 0 or (c == 0 and np.signbit(c)) else f" + {fmt(c)} {var}"

        lines = [f"\\ exact inference LP for a {k}-layer relu ICNN", "OBJECTIVE", f" minimize: z{k}_0", "CONSTRAINTS"]
        for i, (Wz, Wy, b) in enumerate(self.layers):
            for j in range(len(b)):
                row = f" c{i}_{j}: z{i + 1}_{j}"
                if Wz is not None:
                    row += "".join(term(-Wz[j, l], f"z{i}_{l}") for l in range(Wz.shape[1]))
                row += "".join(term(-Wy[j, l], f"y_{l}") for l in range(Wy.shape[1]))
                lines.append(f"{row} >= {fmt(b[j])}")
        lines.append("BOUNDS")
        for j in range(len(self.y_lo)):
            lines.append(f" {fmt(self.y_lo[j])} <= y_{j} <= {fmt(self.y_hi[j])}")
        for i, (_, _, b) in enumerate(self.layers):
            for j in range(len(b)):
                lines.append(f" z{i + 1}_{j} free" if i == k - 1 else f" z{i + 1}_{j} >= 0")
        lines.append("END")
        return "\n".join(lines) + "\n"


def export_lp(params: Params, y_lo=0.0, y_hi=1.0) -> LinearProgram:
    """LP whose optimum equals ``min_y f(y)`` over the box, for relu FICNNs."""
    spec = params.spec
    if spec.kind != FICNN:
        raise ValueError("LP export is implemented for FICNNs")
    if spec.activation != "relu":
        raise ValueError(f"LP form needs relu activations, got {spec.activation}")
    T, p = params.tensors, spec.input_dim_y
    layers = [(T[f"Wz_{i}"] if i > 0 else None, T[f"Wy_{i}"], T[f"b_{i}"]) for i in range(spec.depth)]
    lo = np.broadcast_to(np.asarray(y_lo, dtype=float), (p,)).copy()
    hi = np.broadcast_to(np.asarray(y_hi, dtype=float), (p,)).copy()
    return LinearProgram(layers, lo, hi)
