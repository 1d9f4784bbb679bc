"""Command-line front end: ``icnn {check,multilabel,complete,rl,export-lp}``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import checks, data, learn, net, rl

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3
COMMANDS = ("check", "multilabel", "complete", "rl", "export-lp")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    experiment: str = ""
    seed: int | None = None
    out: str = "runs/out"
    # network
    layer_widths: list = field(default_factory=lambda: [32, 32])
    u_widths: list = field(default_factory=lambda: [64, 64])
    activation: str = "relu"
    init_scale: float = 0.1
    # inference / training
    solver: str = "bundle"
    K: int = 5
    eps: float = 1.0
    pg_steps: int = 30
    pg_alpha: float = 0.1
    pg_momentum: float = 0.3
    trainer: str = "argmin-diff"
    loss: str = "mse"
    epochs: int = 20
    batch: int = 64
    lr: float = 1e-3
    lam_reg: float = 0.0
    # data
    data: str = "synthetic"
    label_count: int = 10
    n_examples: int = 2000
    n_features: int = 50
    n_labels: int = 10
    train_fraction: float = 0.7
    image_size: int = 16
    n_images: int = 400
    n_samples: int = 8
    # rl
    env: str = "pointmass"
    episodes: int = 40
    gamma: float = 0.98
    tau: float = 0.01
    noise: float = 0.1
    entropy_eps: float = 1.0
    reward_scale: float = 0.1
    updates_per_step: int = 1
    capacity: int = 100_000
    # export-lp / check
    checkpoint: str = ""
    y_lo: float = 0.0
    y_hi: float = 1.0
    filter: str = ""
    corrupt: bool = False


# Per-command defaults layered over the dataclass defaults.
COMMAND_DEFAULTS = {
    "check": {"seed": 0},
    "multilabel": {"loss": "mse", "epochs": 20, "batch": 64},
    "complete": {"layer_widths": [128, 128], "u_widths": [128, 128], "epochs": 20, "batch": 32,
                 "train_fraction": 0.75},
    "rl": {"trainer": "q-learning"},  # plus the per-environment preset from rl.PRESETS
    "export-lp": {"seed": 0},
}

CHOICES = {
    "solver": ("bundle", "gradient"),
    "trainer": ("argmin-diff", "max-margin", "q-learning"),
    "activation": net.ACTIVATIONS,
    "loss": ("mse", "bce"),
    "env": tuple(rl.ENVS),
}


def _check_type(name, value, default):
    ok = {
        bool: lambda v: isinstance(v, bool),
        int: lambda v: isinstance(v, int) and not isinstance(v, bool),
        float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        str: lambda v: isinstance(v, str),
        list: lambda v: isinstance(v, list) and all(isinstance(w, int) and not isinstance(w, bool) for w in v),
    }
    kind = type(default) if default is not None else int
    if not ok[kind](value):
        raise ConfigError(f"config key {name!r} must be of type {kind.__name__}, got {value!r}")
    return float(value) if kind is float else value


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        doc = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: config must be flat, found tables {nested}")
    return doc


def resolve_config(command: str, file_values: dict, overrides: dict) -> RunConfig:
    """Dataclass defaults, then command defaults, then the file, then flags; fully validated."""
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    values = {"experiment": command, **COMMAND_DEFAULTS.get(command, {})}
    if command == "rl":
        env = overrides.get("env") or file_values.get("env") or defaults.env
        if env in rl.PRESETS:
            values.update({k: list(v) if isinstance(v, tuple) else v for k, v in rl.PRESETS[env].items()})
    for source in (file_values, overrides):
        for key, value in source.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                values[key] = value
    for key, value in values.items():
        values[key] = _check_type(key, value, getattr(defaults, key) if key != "seed" else 0)
    cfg = RunConfig(**values)
    validate(command, cfg)
    return cfg


def validate(command: str, cfg: RunConfig) -> None:
    if cfg.seed is None:
        raise ConfigError("a seed is required (--seed or 'seed' in the config)")
    for key, allowed in CHOICES.items():
        if getattr(cfg, key) not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {getattr(cfg, key)!r}")
    positive = ["K", "epochs", "batch", "pg_steps", "n_examples", "n_features", "n_labels", "image_size",
                "n_images", "capacity", "updates_per_step"]
    for key in positive:
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be positive")
    if cfg.episodes < 0 or cfg.n_samples < 0 or cfg.label_count < 0:
        raise ConfigError("episodes, n_samples and label_count must be non-negative")
    if not cfg.layer_widths or any(w < 1 for w in cfg.layer_widths + cfg.u_widths):
        raise ConfigError("layer widths must be positive")
    if len(cfg.u_widths) != len(cfg.layer_widths):
        raise ConfigError("u_widths and layer_widths need the same length")
    if not 0 < cfg.train_fraction < 1:
        raise ConfigError("train_fraction must lie in (0, 1)")
    for key in ("eps", "lr", "entropy_eps", "init_scale", "reward_scale"):
        if getattr(cfg, key) <= 0:
            raise ConfigError(f"{key} must be positive")
    if cfg.lam_reg < 0 or cfg.noise < 0:
        raise ConfigError("lam_reg and noise must be non-negative")
    if command == "rl":
        if cfg.trainer != "q-learning":
            raise ConfigError("rl trains with q-learning")
        if not 0 < cfg.gamma < 1 or not 0 < cfg.tau < 1:
            raise ConfigError("gamma and tau must lie in (0, 1)")
    if command in ("multilabel", "complete"):
        if cfg.trainer == "q-learning":
            raise ConfigError(f"trainer q-learning does not apply to {command}")
        if cfg.data != "synthetic" and not Path(cfg.data).exists():
            raise ConfigError(f"data path {cfg.data} does not exist")
    if command == "complete" and cfg.trainer != "argmin-diff":
        raise ConfigError("image completion trains with argmin-diff")
    if command == "export-lp":
        if not cfg.checkpoint:
            raise ConfigError("export-lp needs --checkpoint")
        if not Path(cfg.checkpoint).is_file():
            raise ConfigError(f"checkpoint {cfg.checkpoint} does not exist")
        if not cfg.y_lo < cfg.y_hi:
            raise ConfigError("y_lo must be below y_hi")


def write_resolved(cfg: RunConfig, path: Path) -> None:
    lines = []
    for key, value in sorted(asdict(cfg).items()):
        lines.append(f"{key} = {json.dumps(value)}")
    path.write_text("\n".join(lines) + "\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


# -- experiments -----------------------------------------------------------


def _fit_config(cfg: RunConfig, K=None) -> learn.FitConfig:
    return learn.FitConfig(epochs=cfg.epochs, batch=cfg.batch, K=cfg.K if K is None else K, lr=cfg.lr,
                           eps=cfg.eps, seed=cfg.seed, solver=cfg.solver, pg_steps=cfg.pg_steps,
                           pg_alpha=cfg.pg_alpha, pg_momentum=cfg.pg_momentum, trainer=cfg.trainer,
                           lam_reg=cfg.lam_reg)


def multilabel_data(cfg: RunConfig):
    if cfg.data == "synthetic":
        ds = data.synth_multilabel(cfg.n_examples, cfg.n_features, cfg.n_labels, cfg.seed)
    else:
        ds = data.arff_load(cfg.data, cfg.label_count)
    return data.split(ds, cfg.train_fraction, cfg.seed)


def run_multilabel(cfg: RunConfig, out: Path | None = None):
    """Train the feedforward baseline and the PICNN; returns ``(rows, params)``.

    Rows are ``(epoch, model, split, loss, macro_f1)``.
    """
    train, test = multilabel_data(cfg)
    p, dx = train.Y.shape[1], train.X.shape[1]
    loss = learn.LossSpec(cfg.loss)
    widths = tuple(cfg.layer_widths)

    def evaluator(model, solver, K):
        def ev(params, epoch):
            rows = []
            for split, ds in (("train", train), ("test", test)):
                yh = learn.predict(params, ds.X, p, K=K, eps=cfg.eps, solver=solver, pg_steps=cfg.pg_steps,
                                   pg_alpha=cfg.pg_alpha, pg_momentum=cfg.pg_momentum)
                rows.append((epoch, model, split, float(loss.value(yh, ds.Y).mean()),
                             data.macro_f1(data.threshold(yh), ds.Y)))
            return rows
        return ev

    # feedforward baseline: the linear-in-y PICNN, whose inference is a sigmoid after one cut
    ff = net.FeedForward.random((dx, *cfg.u_widths, p), cfg.seed, scale=cfg.init_scale)
    base = net.embed_feedforward(ff, p, widths)
    base_cfg = _fit_config(cfg, K=1)
    base_cfg.solver, base_cfg.trainer = "bundle", "argmin-diff"
    base, base_log = learn.fit(base, train.X, train.Y, base_cfg, loss, evaluator("feedforward", "bundle", 1),
                               trainable=set(net.feedforward_tensors(base.spec)))

    spec = net.NetworkSpec("picnn", p, widths, dx, tuple(cfg.u_widths), cfg.activation)
    params = net.init_params(spec, cfg.seed, cfg.init_scale)
    params, log = learn.fit(params, train.X, train.Y, _fit_config(cfg), loss,
                            evaluator("picnn", cfg.solver, cfg.K))
    rows = [r for r in base_log + log if len(r) == 5]  # fit's own 4-field training rows are dropped
    if out is not None:
        net.save_params(params, out / "checkpoint.json")
        net.save_params(base, out / "checkpoint_feedforward.json")
    return rows, params


def image_data(cfg: RunConfig):
    if cfg.data == "synthetic":
        imgs = data.synth_faces(cfg.n_images, cfg.image_size, cfg.seed)
        ds = data.image_pairs([im / 255.0 for im in imgs], cfg.image_size)
    else:
        ds = data.load_image_pairs(cfg.data, cfg.image_size)
        if len(ds) > cfg.n_images:
            ds = ds.subset(np.arange(cfg.n_images))
    return data.split(ds, cfg.train_fraction, cfg.seed)


def run_complete(cfg: RunConfig, out: Path | None = None):
    """Left-to-right-half completion; rows are ``(epoch, solver, K, split, mse)``."""
    train, test = image_data(cfg)
    n, dx = train.Y.shape[1], train.X.shape[1]
    spec = net.NetworkSpec("picnn", n, tuple(cfg.layer_widths), dx, tuple(cfg.u_widths), cfg.activation)
    params = net.init_params(spec, cfg.seed, cfg.init_scale)
    fc = _fit_config(cfg)
    infer = lambda prm, X: learn.predict(prm, X, n, K=cfg.K, eps=cfg.eps, solver=cfg.solver,
                                          pg_steps=cfg.pg_steps, pg_alpha=cfg.pg_alpha, pg_momentum=cfg.pg_momentum)

    def ev(prm, epoch):
        return [(epoch, split, float(((infer(prm, ds.X) - ds.Y) ** 2).mean()))
                for split, ds in (("train", train), ("test", test))]

    params, log = learn.fit(params, train.X, train.Y, fc, learn.LossSpec("mse"), ev)
    rows = [(e, cfg.solver, cfg.K, split, v) for e, split, v, *rest in log if not rest]
    if out is not None:
        net.save_params(params, out / "checkpoint.json")
        img_dir = out / "images"
        img_dir.mkdir(exist_ok=True)
        k = min(cfg.n_samples, len(test))
        if k:
            sub = test.subset(np.arange(k))
            recon = sub.images(infer(params, sub.X))
            for i in range(k):
                data.write_pgm(img_dir / f"test_{i:03d}_truth.pgm", sub.images()[i])
                data.write_pgm(img_dir / f"test_{i:03d}_completed.pgm", recon[i])
    return rows, params


def agent_config(cfg: RunConfig, episodes=None) -> rl.QAgentConfig:
    return rl.QAgentConfig(episodes=cfg.episodes if episodes is None else episodes, gamma=cfg.gamma, tau=cfg.tau,
                           noise=cfg.noise, solver=cfg.solver, K=cfg.K, entropy_eps=cfg.entropy_eps,
                           pg_steps=cfg.pg_steps, pg_alpha=cfg.pg_alpha, pg_momentum=cfg.pg_momentum,
                           batch=cfg.batch, capacity=cfg.capacity, lr=cfg.lr, updates_per_step=cfg.updates_per_step,
                           reward_scale=cfg.reward_scale, layer_widths=tuple(cfg.layer_widths),
                           u_widths=tuple(cfg.u_widths), activation=cfg.activation, init_scale=cfg.init_scale,
                           seed=cfg.seed)


def run_rl(cfg: RunConfig, out: Path | None = None):
    env = rl.ENVS[cfg.env]()
    params, log = rl.run_q_learning(env, agent_config(cfg))
    if out is not None:
        net.save_params(params, out / "checkpoint.json")
    return log, params


# -- commands --------------------------------------------------------------


def cmd_check(cfg: RunConfig, out: Path | None) -> int:
    results = checks.run_checks(cfg.filter or None, cfg.corrupt, cfg.seed,
                                report=lambda r: print(checks.format_result(r), flush=True))
    if not results:
        print(f"no checks match filter {cfg.filter!r}", file=sys.stderr)
        return EXIT_CONFIG
    if out is not None:
        write_csv(out / "metrics.csv", ["check", "group", "passed", "detail"],
                  [(r.name, r.group, int(r.passed), r.detail) for r in results])
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK


def cmd_multilabel(cfg, out):
    rows, _ = run_multilabel(cfg, out)
    write_csv(out / "metrics.csv", ["epoch", "model", "split", "loss", "macro_f1"], rows)
    final = [r for r in rows if r[1] == "picnn" and r[2] == "test"][-1]
    print(f"picnn test macro-F1 after {final[0]} epochs: {final[4]:.4f}")
    return EXIT_OK


def cmd_complete(cfg, out):
    rows, _ = run_complete(cfg, out)
    write_csv(out / "metrics.csv", ["epoch", "solver", "K", "split", "mse"], rows)
    test = [r for r in rows if r[3] == "test"]
    print(f"test MSE {test[0][4]:.5f} at epoch 0 -> {test[-1][4]:.5f} at epoch {test[-1][0]} "
          f"({cfg.solver}, K={cfg.K})")
    return EXIT_OK


def cmd_rl(cfg, out):
    log, _ = run_rl(cfg, out)
    write_csv(out / "metrics.csv", ["episode", "steps", "return", "mean_td_loss"], log)
    if log:
        tail = [r[2] for r in log[-10:]]
        print(f"{cfg.env}: mean return over last {len(tail)} episodes {np.mean(tail):.4f}")
    return EXIT_OK


def cmd_export_lp(cfg, out):
    params = net.load_params(cfg.checkpoint)
    lp = net.export_lp(params, cfg.y_lo, cfg.y_hi)
    text = lp.to_text()
    (out / "model.lp").write_text(text)
    n_cons = sum(len(b) for _, _, b in lp.layers)
    n_vars = params.spec.input_dim_y + n_cons
    write_csv(out / "metrics.csv", ["layers", "variables", "constraints"], [(lp.depth, n_vars, n_cons)])
    print(f"wrote {out / 'model.lp'} ({n_vars} variables, {n_cons} constraints)")
    return EXIT_OK


HANDLERS = {"check": cmd_check, "multilabel": cmd_multilabel, "complete": cmd_complete, "rl": cmd_rl,
            "export-lp": cmd_export_lp}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icnn", description="Input convex neural network experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat TOML file of RunConfig keys")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--solver", choices=CHOICES["solver"])
        sp.add_argument("--k", type=int, dest="K")
        if name == "check":
            sp.add_argument("--filter", help="run checks whose name or group contains this text")
            sp.add_argument("--corrupt", action="store_true", default=None,
                            help="inject a negative Wz entry (test mode; convexity must fail)")
        if name in ("multilabel", "complete"):
            sp.add_argument("--data", help="ARFF file / image directory or CSV, or 'synthetic'")
            sp.add_argument("--epochs", type=int)
        if name == "multilabel":
            sp.add_argument("--label-count", type=int, dest="label_count")
            sp.add_argument("--trainer", choices=("argmin-diff", "max-margin"))
        if name == "rl":
            sp.add_argument("--env", choices=CHOICES["env"])
            sp.add_argument("--episodes", type=int)
        if name == "export-lp":
            sp.add_argument("--checkpoint")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_values = load_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_values, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = None
    if args.command not in ("check",) or args.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, out / "config.resolved")
    try:
        return HANDLERS[args.command](cfg, out)
    except (data.DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as exc:
        if args.command == "export-lp":
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
