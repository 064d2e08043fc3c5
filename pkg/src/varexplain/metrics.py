"""Evaluation metrics for uncertainty explanations.

Accuracy against known noise drivers (rank and mass, local and global,
plus pixel-mask variants for images), robustness as local Lipschitz
estimates over continuous or discrete neighborhoods, and faithfulness as
the drop in residual/variance rank correlation after perturbing the
top-k attributed features. Attribution magnitude is |.| throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .rng import make_rng


@dataclass
class MetricReport:
    name: str
    values: list
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))


def spearman(a, b):
    """Spearman rank correlation with tie-averaged ranks.

    Returns (rho, degenerate); degenerate is True when either rank
    vector has zero variance, in which case rho is reported as 0.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError("spearman needs two equal-length vectors of size >= 2")
    ra, rb = rankdata(a), rankdata(b)
    sa, sb = ra.std(), rb.std()
    if sa == 0 or sb == 0:
        return 0.0, True
    rho = float(np.mean((ra - ra.mean()) * (rb - rb.mean())) / (sa * sb))
    return rho, False


def _top_indices(attrib, k: int):
    # stable sort on -|a| keeps ties in ascending feature order
    return np.argsort(-np.abs(attrib), kind="stable")[:k]


def rra(attrib, gt) -> float:
    """Fraction of ground-truth features among the |gt| highest-|attribution|."""
    attrib = np.asarray(attrib, dtype=np.float64).ravel()
    gt = set(int(g) for g in gt)
    if not gt:
        raise ValueError("ground truth set must be nonempty")
    top = set(_top_indices(attrib, len(gt)).tolist())
    return len(top & gt) / len(gt)


def rma(attrib, gt) -> float:
    """Share of total |attribution| mass on the ground-truth features."""
    attrib = np.abs(np.asarray(attrib, dtype=np.float64).ravel())
    gt = list(set(int(g) for g in gt))
    if not gt:
        raise ValueError("ground truth set must be nonempty")
    total = attrib.sum()
    if total == 0:
        warnings.warn("all-zero attribution row: RMA reported as 0")
        return 0.0
    return float(attrib[gt].sum() / total)


def global_accuracy(values: np.ndarray, gt) -> dict:
    """RRA/RMA of the globally aggregated (mean absolute) attributions."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise ValueError("empty attribution matrix")
    g = np.mean(np.abs(values), axis=0).ravel()
    return {"gra": rra(g, gt), "gma": rma(g, gt)}


def image_accuracy(attrib, var_mask, mean_mask, dilation: int = 2) -> dict:
    """Pixel rank/mass accuracy against the (dilated) variance and mean masks."""
    from .datagen import dilate_mask

    attrib = np.asarray(attrib, dtype=np.float64)
    if attrib.shape != var_mask.shape or attrib.shape != mean_mask.shape:
        raise ValueError("attribution and masks must share shape")
    flat = attrib.ravel()
    out = {}
    for name, mask in (("var", var_mask), ("mean", mean_mask)):
        gt = np.flatnonzero(dilate_mask(mask, dilation).ravel())
        out[f"rra_{name}"] = rra(flat, gt)
        out[f"rma_{name}"] = rma(flat, gt)
    return out


def lipschitz_continuous(explain_fn, x, train_ranges, n_pert: int = 100,
                         frac: float = 0.02, seed: int = 0) -> float:
    """Max explanation-change / input-change ratio over uniform box
    perturbations of +-frac * per-feature train range."""
    x = np.asarray(x, dtype=np.float64)
    train_ranges = np.asarray(train_ranges, dtype=np.float64)
    rng = make_rng(seed, "lipschitz")
    e_x = np.asarray(explain_fn(x), dtype=np.float64).ravel()
    best = 0.0
    for _ in range(n_pert):
        xp = x + rng.uniform(-1.0, 1.0, size=x.shape) * frac * train_ranges
        dist = float(np.linalg.norm(xp - x))
        if dist == 0.0:
            continue
        e_p = np.asarray(explain_fn(xp), dtype=np.float64).ravel()
        best = max(best, float(np.linalg.norm(e_x - e_p)) / dist)
    return best


def lipschitz_discrete(explanations, X_pool, i: int, epsilon: float = 0.2,
                       min_neighbors: int = 5):
    """Max ratio over pool neighbors within epsilon of row i; returns
    None (skip) when the neighborhood has <= min_neighbors members."""
    X_pool = np.asarray(X_pool, dtype=np.float64)
    explanations = np.asarray(explanations, dtype=np.float64)
    dists = np.linalg.norm(X_pool - X_pool[i], axis=1)
    neighbors = np.flatnonzero((dists <= epsilon) & (dists > 0))
    if len(neighbors) <= min_neighbors:
        return None
    e_i = explanations[i].ravel()
    ratios = [np.linalg.norm(e_i - explanations[j].ravel()) / dists[j] for j in neighbors]
    return float(max(ratios))


def faithfulness(model, values: np.ndarray, X, y, k: int = 3, seed: int = 0) -> dict:
    """Change in Spearman(residual^2, predicted variance) after adding
    N(0,1) noise to the k globally most-attributed feature columns.

    Residuals stay those of the original inputs; only the variance is
    re-predicted on the perturbed matrix. Negative change = faithful.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    top = _top_indices(np.mean(np.abs(values), axis=0), k)
    mu, s2 = model.predict(X)
    resid2 = (y - mu) ** 2
    rho, deg0 = spearman(resid2, s2)
    Xp = X.copy()
    Xp[:, top] += make_rng(seed, "faithfulness").standard_normal((len(X), len(top)))
    _, s2p = model.predict(Xp)
    rho_p, deg1 = spearman(resid2, s2p)
    return {
        "rho": rho,
        "rho_perturbed": rho_p,
        "delta_rho": rho_p - rho,
        "perturbed_features": top.tolist(),
        "degenerate": bool(deg0 or deg1),
    }
