"""Datasets: ARFF multi-label files, image halves, synthetic generators, metrics."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, source=None):
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")
        self.line = line


@dataclass
class MultiLabelDataset:
    X: np.ndarray
    Y: np.ndarray
    feature_names: list = field(default_factory=list)
    label_names: list = field(default_factory=list)
    split: str | None = None

    def __len__(self):
        return len(self.X)

    def subset(self, idx, split=None):
        return replace(self, X=self.X[idx], Y=self.Y[idx], split=split)


@dataclass
class ImagePairDataset:
    """Left halves ``X`` and right halves ``Y`` of ``height x width`` images, row-major."""

    X: np.ndarray
    Y: np.ndarray
    height: int
    width: int

    def __len__(self):
        return len(self.X)

    def subset(self, idx, split=None):
        return replace(self, X=self.X[idx], Y=self.Y[idx])

    def images(self, Y=None):
        """Reassemble full images, optionally with replacement right halves."""
        Y = self.Y if Y is None else np.asarray(Y)
        h, half = self.height, self.width // 2
        left = self.X.reshape(-1, h, half)
        right = np.asarray(Y).reshape(-1, h, half)
        return np.concatenate([left, right], axis=2)


# -- ARFF ------------------------------------------------------------------

_ATTR = re.compile(r"@attribute\s+('(?:[^'\\]|\\.)*'|\"[^\"]*\"|\S+)\s+(.+)$", re.IGNORECASE)


def _binary(token, lineno, source):
    try:
        v = float(token)
    except ValueError:
        raise ParseError(f"non-numeric value {token!r}", lineno, source) from None
    if v not in (0.0, 1.0):
        raise ParseError(f"non-binary value {token!r}", lineno, source)
    return v


def arff_parse(text: str, label_count: int, source=None) -> MultiLabelDataset:
    """Parse dense or sparse ARFF; the last ``label_count`` attributes are labels."""
    names: list[str] = []
    rows: list[np.ndarray] = []
    in_data = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("%"):
            continue
        low = line.lower()
        if not in_data:
            if low.startswith("@relation"):
                continue
            if low.startswith("@attribute"):
                m = _ATTR.match(line)
                if not m:
                    raise ParseError("malformed @attribute", lineno, source)
                name, kind = m.group(1).strip("'\""), m.group(2).strip()
                if kind.startswith("{"):
                    if not kind.endswith("}"):
                        raise ParseError("unterminated nominal type", lineno, source)
                    values = {v.strip().strip("'\"") for v in kind[1:-1].split(",")}
                    if not values <= {"0", "1"}:
                        raise ParseError(f"non-binary nominal attribute {name!r}", lineno, source)
                elif kind.lower() not in ("numeric", "real", "integer"):
                    raise ParseError(f"unsupported attribute type {kind!r}", lineno, source)
                names.append(name)
                continue
            if low.startswith("@data"):
                in_data = True
                if label_count < 0 or label_count > len(names):
                    raise ParseError(f"label_count {label_count} exceeds {len(names)} attributes", lineno, source)
                continue
            raise ParseError(f"unexpected header line {line[:40]!r}", lineno, source)

        row = np.zeros(len(names))
        if line.startswith("{"):
            if not line.endswith("}"):
                raise ParseError("unterminated sparse row", lineno, source)
            body = line[1:-1].strip()
            for item in filter(None, (s.strip() for s in body.split(","))):
                parts = item.split()
                if len(parts) != 2:
                    raise ParseError(f"malformed sparse entry {item!r}", lineno, source)
                try:
                    idx = int(parts[0])
                except ValueError:
                    raise ParseError(f"bad sparse index {parts[0]!r}", lineno, source) from None
                if not 0 <= idx < len(names):
                    raise ParseError(f"sparse index {idx} out of range", lineno, source)
                row[idx] = _binary(parts[1], lineno, source)
        else:
            values = [v.strip() for v in line.split(",")]
            if len(values) != len(names):
                raise ParseError(f"expected {len(names)} values, got {len(values)}", lineno, source)
            row[:] = [_binary(v, lineno, source) for v in values]
        rows.append(row)

    if not in_data:
        raise ParseError("missing @data section", None, source)
    data = np.array(rows).reshape(len(rows), len(names))
    nf = len(names) - label_count
    return MultiLabelDataset(data[:, :nf], data[:, nf:], names[:nf], names[nf:])


def arff_load(path, label_count: int) -> MultiLabelDataset:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    return arff_parse(text, label_count, source=str(path))


def arff_dump(ds: MultiLabelDataset, relation="dataset") -> str:
    """Dense ARFF text with features first and labels last."""
    nf, nl = ds.X.shape[1], ds.Y.shape[1]
    fnames = ds.feature_names or [f"f{i}" for i in range(nf)]
    lnames = ds.label_names or [f"l{i}" for i in range(nl)]
    out = [f"@relation {relation}", ""]
    out += [f"@attribute {n} {{0,1}}" for n in list(fnames) + list(lnames)]
    out += ["", "@data"]
    for x, y in zip(ds.X, ds.Y):
        out.append(",".join(str(int(v)) for v in np.concatenate([x, y])))
    return "\n".join(out) + "\n"


# -- metrics ---------------------------------------------------------------


def threshold(y_hat, tau=0.5):
    tau = min(max(float(tau), 0.0), 1.0)
    return (np.asarray(y_hat) >= tau).astype(int)


def macro_f1(pred, truth) -> float:
    """Unweighted mean of per-label F1 = 2TP / (2TP + FP + FN), 0 when undefined."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    pred, truth = pred.reshape(len(pred), -1) > 0.5, truth.reshape(len(truth), -1) > 0.5
    tp = (pred & truth).sum(0)
    fp = (pred & ~truth).sum(0)
    fn = (~pred & truth).sum(0)
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(len(tp)), where=denom > 0)
    return float(f1.mean()) if len(f1) else 0.0


# -- images ----------------------------------------------------------------


def _pgm_tokens(data: bytes, count: int, path):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Binary (P5) PGM with maxval <= 255, as a ``uint8`` array."""
    data = Path(path).read_bytes()
    tokens, pos = _pgm_tokens(data, 4, path)
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0][:4]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if w < 1 or h < 1 or not 0 < maxval <= 255:
        raise DataError(f"{path}: unsupported PGM geometry or maxval")
    pix = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8)
    if pix.size != w * h:
        raise DataError(f"{path}: truncated PGM pixel data")
    img = pix.reshape(h, w)
    if maxval != 255:
        img = np.round(img.astype(float) * 255 / maxval).astype(np.uint8)
    return img


def write_pgm(path, img) -> None:
    """Write values in ``[0, 1]`` (float) or ``uint8`` as a binary PGM."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def downsample(img, size: int) -> np.ndarray:
    """Box-filter a square-multiple image down to ``size x size``."""
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    if h % size or w % size:
        raise DataError(f"cannot box-filter {h}x{w} to {size}x{size}")
    fh, fw = h // size, w // size
    return img.reshape(size, fh, size, fw).mean(axis=(1, 3))


def _read_csv_images(path):
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty image CSV")
    try:
        h, w = (int(v) for v in lines[0].split(","))
    except ValueError:
        raise DataError(f"{path}:1: header must be 'h,w'") from None
    imgs = []
    for lineno, ln in enumerate(lines[1:], start=2):
        vals = ln.split(",")
        if len(vals) != h * w:
            raise DataError(f"{path}:{lineno}: expected {h * w} values, got {len(vals)}")
        try:
            imgs.append(np.array([float(v) for v in vals]).reshape(h, w))
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric pixel") from None
    return [img / 255.0 for img in imgs]


def load_images(path) -> list:
    """Images in ``[0, 1]`` from a directory of PGMs (sorted by name) or an image CSV."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.pgm"))
        if not files:
            raise DataError(f"{path}: no .pgm files")
        return [read_pgm(f).astype(float) / 255.0 for f in files]
    if path.is_file():
        return _read_csv_images(path)
    raise DataError(f"{path}: no such file or directory")


def load_image_pairs(path, target_size: int | None = 16) -> ImagePairDataset:
    return image_pairs(load_images(path), target_size)


def image_pairs(images, target_size: int | None = 16) -> ImagePairDataset:
    if not images:
        raise DataError("no images")
    shape = np.shape(images[0])
    if any(np.shape(im) != shape for im in images):
        raise DataError("images have inconsistent sizes")
    if target_size is not None and shape != (target_size, target_size):
        images = [downsample(im, target_size) for im in images]
    imgs = np.clip(np.stack(images).astype(float), 0.0, 1.0)
    n, h, w = imgs.shape
    if w % 2:
        raise DataError("image width must be even")
    half = w // 2
    X = imgs[:, :, :half].reshape(n, -1)
    Y = imgs[:, :, half:].reshape(n, -1)
    return ImagePairDataset(X, Y, h, w)


# -- synthetic data --------------------------------------------------------


def synth_2d(kind: str, n: int, seed: int, noise: float = 0.05):
    """Two-class 2-D point sets: ``circles`` (disc vs annulus) or ``xor``.

    Returns ``(X, labels)``. Circle points sit on radius 0.5 (class 1) or 1.0
    (class 0) before Gaussian noise.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    if kind == "circles":
        labels = (np.arange(n) % 2 == 0).astype(int)
        angle = rng.uniform(0, 2 * np.pi, n)
        radius = np.where(labels == 1, 0.5, 1.0)
        X = np.stack([radius * np.cos(angle), radius * np.sin(angle)], 1)
        X = X + noise * rng.normal(size=X.shape)
    elif kind == "xor":
        X = rng.uniform(-1, 1, (n, 2))
        labels = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    return X, labels


def synth_multilabel(n: int, features: int, labels: int, seed: int, density=0.5, support=None) -> MultiLabelDataset:
    """Binary features; each label thresholds a random linear function of them.

    ``support`` limits every label to that many randomly chosen features.
    Thresholds sit at the median score so labels are roughly balanced.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    X = (rng.uniform(size=(n, features)) < density).astype(float)
    W = rng.normal(size=(features, labels))
    if support is not None:
        keep = np.zeros_like(W, bool)
        for j in range(labels):
            keep[rng.choice(features, support, replace=False), j] = True
        W = np.where(keep, W, 0.0)
    scores = X @ W
    cut = np.median(scores, axis=0)
    Y = (scores > cut).astype(float)
    return MultiLabelDataset(X, Y, [f"f{i}" for i in range(features)], [f"l{j}" for j in range(labels)])


def synth_faces(n: int, size: int = 16, seed: int = 0, noise: float = 0.03) -> np.ndarray:
    """Left-right symmetric blob "faces" as ``uint8`` images of shape ``(n, size, size)``.

    Each image is a bright ellipse with two dark eyes and a mouth on a
    graded background, all mirror-symmetric, plus independent pixel noise.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    c = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(c, c, indexing="ij")
    dx = np.abs(xx - 0.5)
    out = np.empty((n, size, size), dtype=np.uint8)
    for i in range(n):
        bg = rng.uniform(0.05, 0.35) + rng.uniform(-0.2, 0.2) * (yy - 0.5)
        ax, ay = rng.uniform(0.25, 0.45), rng.uniform(0.3, 0.48)
        cy = rng.uniform(0.45, 0.55)
        face = ((dx / ax) ** 2 + ((yy - cy) / ay) ** 2) <= 1.0
        img = np.where(face, rng.uniform(0.55, 0.9), bg)
        ex, ey, er = rng.uniform(0.1, 0.22), cy - rng.uniform(0.08, 0.2), rng.uniform(0.04, 0.08)
        eyes = ((dx - ex) ** 2 + (yy - ey) ** 2) <= er ** 2
        img = np.where(eyes, rng.uniform(0.0, 0.2), img)
        my, mw = cy + rng.uniform(0.12, 0.25), rng.uniform(0.05, 0.18)
        mouth = (np.abs(yy - my) <= 0.03) & (dx <= mw)
        img = np.where(mouth, rng.uniform(0.1, 0.3), img)
        img = np.clip(img + noise * rng.normal(size=img.shape), 0, 1)
        out[i] = np.round(img * 255).astype(np.uint8)
    return out


# -- splits ----------------------------------------------------------------


def split(dataset, fraction: float, seed: int):
    """Seeded shuffle, then the first ``round(fraction * N)`` rows train."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    n = len(dataset)
    n_train = int(round(fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} rows at {fraction} leaves one side empty")
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(order[:n_train], "train"), dataset.subset(order[n_train:], "test")
