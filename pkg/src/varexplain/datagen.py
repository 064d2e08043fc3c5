"""Data production.

Covers four sources:
  * a synthetic tabular generator with a linear mean model and an
    absolute-value polynomial model for the heteroscedastic noise std,
  * semi-synthetic augmentation of existing tabular data (planted noise
    features driving extra target noise),
  * CSV ingestion with one-hot encoding and seeded 70/10/20 splits,
  * a composite-digit image task: two digits on a 64x64 canvas, one
    encoding the label mean and one (drawn gray) the label std, with
    ground-truth pixel masks for each.

Every generator is a pure function of (config, seed).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from math import comb

import numpy as np
import pandas as pd
from scipy import ndimage

from .rng import make_rng

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}


# ---------------------------------------------------------------------------
# tabular container


@dataclass
class TabularDataset:
    X: np.ndarray                      # (n, d), standardized
    y: np.ndarray                      # (n,), standardized
    split: np.ndarray                  # (n,) ints in {TRAIN, VAL, TEST}
    feature_names: list
    gt_noise_features: list | None = None
    x_mean: np.ndarray | None = None   # train-split stats used to standardize
    x_std: np.ndarray | None = None
    y_mean: float = 0.0
    y_std: float = 1.0
    noise_std: np.ndarray | None = None  # per-row ground-truth noise std (y units)

    def __post_init__(self):
        if len(self.X) != len(self.y) or len(self.X) != len(self.split):
            raise ValueError("X, y, split length mismatch")
        if self.gt_noise_features is not None:
            d = self.X.shape[1]
            if any(not (0 <= j < d) for j in self.gt_noise_features):
                raise ValueError("gt noise feature index out of range")

    def rows(self, which: int):
        idx = np.flatnonzero(self.split == which)
        return self.X[idx], self.y[idx]

    @property
    def train(self):
        return self.rows(TRAIN)

    @property
    def val(self):
        return self.rows(VAL)

    @property
    def test(self):
        return self.rows(TEST)

    def counts(self):
        return tuple(int(np.sum(self.split == s)) for s in (TRAIN, VAL, TEST))


def _standardize(X, y, split):
    """Standardize features and target by train-split statistics."""
    tr = split == TRAIN
    x_mean = X[tr].mean(axis=0)
    x_std = X[tr].std(axis=0)
    x_std = np.where(x_std == 0, 1.0, x_std)
    y_mean = float(y[tr].mean())
    y_std = float(y[tr].std()) or 1.0
    return (X - x_mean) / x_std, (y - y_mean) / y_std, x_mean, x_std, y_mean, y_std


def assign_splits(n: int, counts: tuple) -> np.ndarray:
    if sum(counts) != n:
        raise ValueError(f"split counts {counts} do not sum to {n}")
    split = np.empty(n, dtype=np.int64)
    split[:counts[0]] = TRAIN
    split[counts[0]:counts[0] + counts[1]] = VAL
    split[counts[0] + counts[1]:] = TEST
    return split


def split_counts_from_fracs(n: int, fracs=(0.7, 0.1, 0.2)) -> tuple:
    n_train = int(round(n * fracs[0]))
    n_val = int(round(n * fracs[1]))
    return (n_train, n_val, n - n_train - n_val)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticConfig:
    n: int = 41_500
    p: int = 70                # features driving the mean
    p_prime: int = 5           # features driving the noise std
    alpha: float = 2.0         # heteroscedastic strength
    sigma_eps2: float = 0.02   # homoscedastic noise variance
    sigma_delta2: float = 0.05 # noise-model error variance
    seed: int = 0
    split: tuple = (32_000, 8_000, 1_500)

    def __post_init__(self):
        if self.alpha < 0 or self.sigma_eps2 < 0 or self.sigma_delta2 < 0:
            raise ValueError("variances and alpha must be nonnegative")
        if sum(self.split) != self.n:
            raise ValueError("split sizes must sum to n")


def polynomial_feature_map(u: np.ndarray) -> np.ndarray:
    """Degree-2 feature map: constant, linear terms, then quadratic
    monomials u_i*u_j for i <= j in lexicographic index order.

    Accepts a vector (p',) or a matrix (n, p'); output has C(p'+2, 2)
    columns either way.
    """
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    if single:
        u = u[None]
    n, p = u.shape
    cols = [np.ones((n, 1)), u]
    for i in range(p):
        cols.append(u[:, i:i + 1] * u[:, i:])
    out = np.concatenate(cols, axis=1)
    assert out.shape[1] == comb(p + 2, 2)
    return out[0] if single else out


def generate_synthetic(cfg: SyntheticConfig) -> TabularDataset:
    """Sample X = [U | V]; mean = V beta, noise std per row from the
    absolute-value polynomial model on U. The noise features come first,
    so gt_noise_features = {0..p'-1}."""
    rng = make_rng(cfg.seed, "synthetic")
    U = rng.standard_normal((cfg.n, cfg.p_prime))
    V = rng.standard_normal((cfg.n, cfg.p))
    beta = rng.uniform(-1.0, 1.0, size=cfg.p)
    q = comb(cfg.p_prime + 2, 2)
    # magnitudes in [0.5, 1], random signs: avoids negligible coefficients
    gamma = rng.uniform(0.5, 1.0, size=q) * rng.choice([-1.0, 1.0], size=q)
    delta = rng.normal(0.0, np.sqrt(cfg.sigma_delta2), size=cfg.n)
    sigma = np.abs(polynomial_feature_map(U) @ gamma + delta)
    mu = V @ beta
    total_var = cfg.alpha * sigma**2 + cfg.sigma_eps2
    y = mu + rng.standard_normal(cfg.n) * np.sqrt(total_var)

    X = np.concatenate([U, V], axis=1)
    split = assign_splits(cfg.n, cfg.split)
    Xs, ys, xm, xs, ym, ysd = _standardize(X, y, split)
    names = [f"u{i}" for i in range(cfg.p_prime)] + [f"v{i}" for i in range(cfg.p)]
    return TabularDataset(
        X=Xs, y=ys, split=split, feature_names=names,
        gt_noise_features=list(range(cfg.p_prime)),
        x_mean=xm, x_std=xs, y_mean=ym, y_std=ysd,
        noise_std=np.sqrt(total_var) / ysd,
    )


# ---------------------------------------------------------------------------
# semi-synthetic augmentation


def augment_semisynthetic(ds: TabularDataset, mode: str, k_noise: int = 5,
                          seed: int = 0, sigma_delta2: float = 0.05) -> TabularDataset:
    """Append k standard-normal noise columns and add Gaussian target
    noise whose std is driven by them.

    mode "1-S": row noise std = sum_j |u_j| (simple model, original rows).
    mode "50-C": train rows replicated 50x first, then the degree-2
    polynomial noise model with fresh coefficients.
    """
    if mode not in ("1-S", "50-C"):
        raise ValueError(f"unknown augmentation mode {mode!r}")
    rng = make_rng(seed, "semisynthetic", mode)

    if mode == "50-C":
        tr = np.flatnonzero(ds.split == TRAIN)
        other = np.flatnonzero(ds.split != TRAIN)
        order = np.concatenate([np.repeat(tr, 50), other])
    else:
        order = np.arange(len(ds.y))
    X = ds.X[order]
    y = ds.y[order]
    split = ds.split[order]

    n, d = X.shape
    U = rng.standard_normal((n, k_noise))
    if mode == "1-S":
        noise_std = np.abs(U).sum(axis=1)
    else:
        q = comb(k_noise + 2, 2)
        gamma = rng.uniform(0.5, 1.0, size=q) * rng.choice([-1.0, 1.0], size=q)
        delta = rng.normal(0.0, np.sqrt(sigma_delta2), size=n)
        noise_std = np.abs(polynomial_feature_map(U) @ gamma + delta)
    y_new = y + rng.standard_normal(n) * noise_std

    return TabularDataset(
        X=np.concatenate([X, U], axis=1),
        y=y_new,
        split=split,
        feature_names=list(ds.feature_names) + [f"noise{i}" for i in range(k_noise)],
        gt_noise_features=list(range(d, d + k_noise)),
        x_mean=ds.x_mean, x_std=ds.x_std, y_mean=ds.y_mean, y_std=ds.y_std,
        noise_std=noise_std,
    )


# ---------------------------------------------------------------------------
# CSV ingestion


class CsvSchemaError(ValueError):
    pass


def load_csv_dataset(path, target: str, categoricals=(), delimiter: str = ",",
                     seed: int = 0, fracs=(0.7, 0.1, 0.2)) -> TabularDataset:
    """Load a regression CSV: one-hot encode declared categoricals,
    split 70/10/20 with a seeded shuffle, standardize continuous
    features and the target by train statistics."""
    df = pd.read_csv(path, delimiter=delimiter)
    for col in [target, *categoricals]:
        if col not in df.columns:
            raise CsvSchemaError(f"column {col!r} not in {list(df.columns)}")
    continuous = [c for c in df.columns if c != target and c not in categoricals]
    for col in [target, *continuous]:
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = vals.index[vals.isna()]
        if len(bad):
            raise CsvSchemaError(f"unparseable/missing cell at row {bad[0]}, column {col!r}")
        df[col] = vals

    onehot_names, onehot_cols = [], []
    for col in categoricals:
        dummies = pd.get_dummies(df[col], prefix=col)
        onehot_names += list(dummies.columns)
        onehot_cols.append(dummies.to_numpy(dtype=np.float64))

    X_cont = df[continuous].to_numpy(dtype=np.float64)
    X = np.concatenate([X_cont] + onehot_cols, axis=1) if onehot_cols else X_cont
    y = df[target].to_numpy(dtype=np.float64)

    n = len(df)
    order = make_rng(seed, "csv-split").permutation(n)
    X, y = X[order], y[order]
    split = assign_splits(n, split_counts_from_fracs(n, fracs))

    # standardize continuous columns and target only; one-hot stays 0/1
    tr = split == TRAIN
    n_cont = len(continuous)
    x_mean = np.zeros(X.shape[1])
    x_std = np.ones(X.shape[1])
    x_mean[:n_cont] = X[tr, :n_cont].mean(axis=0)
    sd = X[tr, :n_cont].std(axis=0)
    x_std[:n_cont] = np.where(sd == 0, 1.0, sd)
    y_mean = float(y[tr].mean())
    y_std = float(y[tr].std()) or 1.0
    return TabularDataset(
        X=(X - x_mean) / x_std, y=(y - y_mean) / y_std, split=split,
        feature_names=continuous + onehot_names,
        x_mean=x_mean, x_std=x_std, y_mean=y_mean, y_std=y_std,
    )


def save_tabular(ds: TabularDataset, csv_path, meta_path):
    """Persist a dataset as CSV plus a JSON sidecar with splits, ground
    truth noise indices and standardization stats."""
    df = pd.DataFrame(ds.X, columns=[str(c) for c in ds.feature_names])
    df["__target__"] = ds.y
    df.to_csv(csv_path, index=False)
    meta = {
        "split": ds.split.tolist(),
        "feature_names": [str(c) for c in ds.feature_names],
        "gt_noise_features": ds.gt_noise_features,
        "x_mean": None if ds.x_mean is None else ds.x_mean.tolist(),
        "x_std": None if ds.x_std is None else ds.x_std.tolist(),
        "y_mean": ds.y_mean,
        "y_std": ds.y_std,
    }
    with open(meta_path, "w") as f:
        json.dump(meta, f, sort_keys=True)


def load_tabular(csv_path, meta_path) -> TabularDataset:
    df = pd.read_csv(csv_path)
    with open(meta_path) as f:
        meta = json.load(f)
    y = df.pop("__target__").to_numpy(dtype=np.float64)
    return TabularDataset(
        X=df.to_numpy(dtype=np.float64), y=y,
        split=np.asarray(meta["split"], dtype=np.int64),
        feature_names=meta["feature_names"],
        gt_noise_features=meta["gt_noise_features"],
        x_mean=None if meta["x_mean"] is None else np.asarray(meta["x_mean"]),
        x_std=None if meta["x_std"] is None else np.asarray(meta["x_std"]),
        y_mean=meta["y_mean"], y_std=meta["y_std"],
    )


# ---------------------------------------------------------------------------
# digit images (IDX files + synthetic fallback glyphs)


class IdxFormatError(IOError):
    pass


def load_mnist_idx(images_path, labels_path):
    """Read big-endian IDX image/label files; images scaled to [0,1]."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != 0x00000803:
            raise IdxFormatError(f"bad image magic {magic:#010x} in {images_path}")
        data = _read_exact(f, count * rows * cols, images_path)
    images = np.frombuffer(data, dtype=np.uint8).reshape(count, rows, cols) / 255.0
    with open(labels_path, "rb") as f:
        magic, lcount = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != 0x00000801:
            raise IdxFormatError(f"bad label magic {magic:#010x} in {labels_path}")
        labels = np.frombuffer(_read_exact(f, lcount, labels_path), dtype=np.uint8)
    if count != lcount:
        raise IdxFormatError(f"image count {count} != label count {lcount}")
    return images, labels.astype(np.int64)


def _read_exact(f, n, path):
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"truncated IDX file {path}")
    return buf


# 5x7 glyph bitmaps for 0-9, used when no IDX files are available
_GLYPHS = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}


def synthetic_digit_set(per_class: int = 100, seed: int = 0):
    """Deterministic stand-in digit images: scaled 5x7 glyphs with random
    placement and intensity jitter, shaped like 28x28 [0,1] digits."""
    rng = make_rng(seed, "glyphs")
    images = np.zeros((10 * per_class, 28, 28))
    labels = np.repeat(np.arange(10), per_class)
    for k, label in enumerate(labels):
        bitmap = np.array([[int(c) for c in row] for row in _GLYPHS[int(label)]],
                          dtype=np.float64)
        glyph = np.kron(bitmap, np.ones((3, 3)))          # 21 x 15
        glyph *= rng.uniform(0.7, 1.0, size=glyph.shape)  # stroke intensity jitter
        r = rng.integers(0, 28 - glyph.shape[0] + 1)
        c = rng.integers(0, 28 - glyph.shape[1] + 1)
        images[k, r:r + glyph.shape[0], c:c + glyph.shape[1]] = glyph
    return images, labels


# ---------------------------------------------------------------------------
# composite 64x64 images with mean/std digits


@dataclass
class MnistUData:
    images: np.ndarray      # (n, 64, 64) uint8
    labels: np.ndarray      # (n,) float64
    mu_digit: np.ndarray    # (n,) uint8
    sigma_digit: np.ndarray # (n,) uint8
    mean_mask: np.ndarray   # (n, 64, 64) bool
    var_mask: np.ndarray    # (n, 64, 64) bool
    split: np.ndarray       # (n,) ints

    def rows(self, which: int):
        idx = np.flatnonzero(self.split == which)
        return idx

    def inputs(self, idx):
        """Float inputs (n, 1, 64, 64) in [0, 1] for the given rows."""
        return self.images[idx].astype(np.float64)[:, None] / 255.0


_CORNERS = [(0, 0), (0, 36), (36, 0), (36, 36)]
CANVAS = 64


def compose_mnistu(digits, count: int, seed: int = 0,
                   fracs=(0.7, 0.1, 0.2)) -> MnistUData:
    """Place a full-intensity digit (the label mean) and a half-intensity
    digit (the label std) into two distinct corners of a 64x64 canvas and
    sample the label from N(mean_digit, std_digit^2)."""
    images_28, labels_28 = digits
    if len(images_28) == 0:
        raise ValueError("empty digit set")
    rng = make_rng(seed, "compose")
    imgs = np.zeros((count, CANVAS, CANVAS))
    mean_mask = np.zeros((count, CANVAS, CANVAS), dtype=bool)
    var_mask = np.zeros((count, CANVAS, CANVAS), dtype=bool)
    mu_d = np.empty(count, dtype=np.uint8)
    sg_d = np.empty(count, dtype=np.uint8)
    labels = np.empty(count)
    for i in range(count):
        a, b = rng.integers(0, len(images_28), size=2)
        ca, cb = rng.choice(len(_CORNERS), size=2, replace=False)
        for idx, corner, gain, mask in ((a, ca, 1.0, mean_mask), (b, cb, 0.5, var_mask)):
            r, c = _CORNERS[corner]
            patch = images_28[idx] * gain
            imgs[i, r:r + 28, c:c + 28] = patch
            mask[i, r:r + 28, c:c + 28] = images_28[idx] > 0
        mu_d[i] = labels_28[a]
        sg_d[i] = labels_28[b]
        labels[i] = mu_d[i] + rng.standard_normal() * sg_d[i]
    split = assign_splits(count, split_counts_from_fracs(count, fracs))
    return MnistUData(
        images=np.round(imgs * 255.0).astype(np.uint8), labels=labels,
        mu_digit=mu_d, sigma_digit=sg_d,
        mean_mask=mean_mask, var_mask=var_mask, split=split,
    )


def dilate_mask(mask: np.ndarray, radius: int = 2) -> np.ndarray:
    """Chebyshev dilation: a pixel is set iff any set pixel lies within a
    (2r+1)x(2r+1) window; clipped at the borders."""
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    size = 2 * radius + 1
    return ndimage.maximum_filter(mask.astype(np.uint8), size=size, mode="constant") > 0


MNU_MAGIC = b"MNU1"
MNU_VERSION = 1


def save_mnistu(data: MnistUData, path):
    n, h, w = data.images.shape
    with open(path, "wb") as f:
        f.write(MNU_MAGIC)
        f.write(struct.pack("<IIII", MNU_VERSION, n, w, h))
        for i in range(n):
            f.write(data.images[i].tobytes())
            f.write(np.packbits(data.mean_mask[i]).tobytes())
            f.write(np.packbits(data.var_mask[i]).tobytes())
            f.write(struct.pack("<d", data.labels[i]))
            f.write(struct.pack("BB", data.mu_digit[i], data.sigma_digit[i]))


def load_mnistu(path, fracs=(0.7, 0.1, 0.2)) -> MnistUData:
    with open(path, "rb") as f:
        if f.read(4) != MNU_MAGIC:
            raise IOError(f"bad container magic in {path}")
        version, n, w, h = struct.unpack("<IIII", f.read(16))
        if version != MNU_VERSION:
            raise IOError(f"unsupported container version {version}")
        mask_bytes = (h * w + 7) // 8
        images = np.empty((n, h, w), dtype=np.uint8)
        mean_mask = np.empty((n, h, w), dtype=bool)
        var_mask = np.empty((n, h, w), dtype=bool)
        labels = np.empty(n)
        mu_d = np.empty(n, dtype=np.uint8)
        sg_d = np.empty(n, dtype=np.uint8)
        for i in range(n):
            images[i] = np.frombuffer(f.read(h * w), dtype=np.uint8).reshape(h, w)
            mean_mask[i] = np.unpackbits(
                np.frombuffer(f.read(mask_bytes), dtype=np.uint8))[:h * w].reshape(h, w)
            var_mask[i] = np.unpackbits(
                np.frombuffer(f.read(mask_bytes), dtype=np.uint8))[:h * w].reshape(h, w)
            labels[i] = struct.unpack("<d", f.read(8))[0]
            mu_d[i], sg_d[i] = struct.unpack("BB", f.read(2))
    split = assign_splits(n, split_counts_from_fracs(n, fracs))
    return MnistUData(images=images, labels=labels, mu_digit=mu_d, sigma_digit=sg_d,
                      mean_mask=mean_mask, var_mask=var_mask, split=split)
