"""Attribution engines and their adapters to heteroscedastic models.

Three engines:
  * kernel_shap — Shapley values via a kernel-weighted least-squares
    surrogate over feature coalitions; exact when all coalitions fit in
    the budget. Masked features take values from background rows and
    predictions are averaged over the background.
  * integrated_gradients — trapezoid-rule path integral of gradients
    from a baseline to the input; reports the completeness gap.
  * lrp_epsilon — epsilon-rule relevance propagation through
    dense/conv/pool/ReLU paths, starting at a chosen output neuron.

The adapters wrap an engine around the model's variance output (the raw
pre-link score for LRP) or mean output. infoshap_explain is the baseline
that fits an auxiliary network to log squared residuals of a mean model
and explains that network with kernel_shap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .nncore import AdamState, LayerSpec, Network, adam_step
from .rng import derive_seed, make_rng

ENGINES = ("kernelshap", "ig", "lrp")


@dataclass
class ExplainerConfig:
    engine: str = "kernelshap"
    background_size: int = 100
    budget: int | None = None      # coalition budget; None = default rule
    ig_steps: int = 64
    lrp_epsilon: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.budget is not None and self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.ig_steps < 2:
            raise ValueError("ig_steps must be >= 2")
        if self.lrp_epsilon <= 0:
            raise ValueError("lrp_epsilon must be > 0")


@dataclass
class AttributionMatrix:
    values: np.ndarray                  # (n, d) or (n, H, W)
    engine: str
    target: str                         # "variance" or "mean"
    base_values: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attribution matrix contains non-finite entries")


def default_budget(d: int) -> int:
    return min(2**d - 2, 2048 + 2 * d)


# ---------------------------------------------------------------------------
# KernelSHAP


class CoalitionEvalError(RuntimeError):
    pass


def _kernel_weight(d: int, s: int) -> float:
    return (d - 1) / (comb(d, s) * s * (d - s))


def sample_coalitions(d: int, budget: int, rng: np.random.Generator):
    """Coalition matrix Z (m, d) bool and per-coalition WLS weights.

    Singleton and all-but-one coalitions are enumerated first; remaining
    budget fills complete size levels from the outside in, and a level
    that does not fully fit is sampled without replacement, its kernel
    mass spread over the sampled members.
    """
    if budget >= 2**d - 2:
        Z = np.zeros((2**d - 2, d), dtype=bool)
        w = np.empty(2**d - 2)
        row = 0
        for code in range(1, 2**d - 1):
            bits = [(code >> j) & 1 for j in range(d)]
            Z[row] = bits
            w[row] = _kernel_weight(d, sum(bits))
            row += 1
        return Z, w

    rows, weights = [], []
    remaining = budget
    sizes = []
    lo, hi = 1, d - 1
    while lo <= hi:
        sizes.append(lo)
        if hi != lo:
            sizes.append(hi)
        lo, hi = lo + 1, hi - 1
    for s in sizes:
        if remaining <= 0:
            break
        level = comb(d, s)
        if level <= remaining:
            for combo in _level_combos(d, s):
                rows.append(combo)
                weights.append(_kernel_weight(d, s))
            remaining -= level
        else:
            seen = set()
            target_n = remaining
            while len(seen) < target_n:
                combo = tuple(sorted(rng.choice(d, size=s, replace=False).tolist()))
                seen.add(combo)
            per = _kernel_weight(d, s) * level / target_n
            for combo in sorted(seen):
                row = np.zeros(d, dtype=bool)
                row[list(combo)] = True
                rows.append(row)
                weights.append(per)
            remaining = 0
    return np.array(rows, dtype=bool), np.array(weights)


def _level_combos(d: int, s: int):
    from itertools import combinations
    for combo in combinations(range(d), s):
        row = np.zeros(d, dtype=bool)
        row[list(combo)] = True
        yield row


def coalition_values(f, x, background, Z, chunk: int = 512):
    """v(S) = mean over background rows of f with features outside S
    replaced by the background row's values."""
    x = np.asarray(x, dtype=np.float64)
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    nbg, d = background.shape
    v = np.empty(len(Z))
    for start in range(0, len(Z), chunk):
        Zc = Z[start:start + chunk]
        masked = np.broadcast_to(background, (len(Zc), nbg, d)).copy()
        masked[:, :, :] = np.where(Zc[:, None, :], x[None, None, :], masked)
        preds = f(masked.reshape(-1, d))
        if not np.all(np.isfinite(preds)):
            bad = int(np.flatnonzero(~np.isfinite(preds))[0] // nbg)
            raise CoalitionEvalError(
                f"model returned non-finite value for coalition {np.flatnonzero(Zc[bad]).tolist()}")
        v[start:start + chunk] = preds.reshape(len(Zc), nbg).mean(axis=1)
    return v


def solve_shap_wls(Z, w, v, fx, base):
    """Weighted least squares with the efficiency constraint eliminated:
    the last feature's value is fixed by sum(phi) = f(x) - base."""
    Zf = Z.astype(np.float64)
    ty = v - base - Zf[:, -1] * (fx - base)
    A = Zf[:, :-1] - Zf[:, -1:]
    sw = np.sqrt(w)
    phi_rest, *_ = np.linalg.lstsq(A * sw[:, None], ty * sw, rcond=None)
    phi = np.empty(Z.shape[1])
    phi[:-1] = phi_rest
    phi[-1] = (fx - base) - phi_rest.sum()
    return phi


def kernel_shap(f, x, background, budget: int | None = None, seed: int = 0,
                coalitions=None):
    """Shapley attributions of the scalar function f at x.

    f must accept a (m, d) batch and return (m,) values. Returns
    (phi (d,), base_value). Pass `coalitions` = (Z, w) to reuse a
    coalition sample across calls (identical inputs then get identical
    attributions by construction).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if len(background) == 0:
        raise ValueError("background must be nonempty")
    d = x.size
    fx = float(f(x[None])[0])
    base = float(np.mean(f(background)))
    if d == 1:
        return np.array([fx - base]), base
    if coalitions is None:
        budget = default_budget(d) if budget is None else budget
        coalitions = sample_coalitions(d, budget, make_rng(seed, "coalitions"))
    Z, w = coalitions
    v = coalition_values(f, x, background, Z)
    return solve_shap_wls(Z, w, v, fx, base), base


# ---------------------------------------------------------------------------
# Integrated Gradients


def integrated_gradients(value_and_grad, x, baseline, steps: int = 64):
    """Trapezoid-rule path integral from baseline to x.

    value_and_grad takes a batch of inputs and returns (values, grads).
    Returns (phi shaped like x, completeness_gap).
    """
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if baseline.shape != x.shape:
        raise ValueError("baseline shape must match input shape")
    alphas = np.linspace(0.0, 1.0, steps)
    path = baseline[None] + alphas.reshape((-1,) + (1,) * x.ndim) * (x - baseline)[None]
    vals, grads = value_and_grad(path)
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient along the integration path")
    tw = np.full(steps, 1.0 / (steps - 1))
    tw[0] = tw[-1] = 0.5 / (steps - 1)
    avg_grad = np.tensordot(tw, grads, axes=(0, 0))
    phi = (x - baseline) * avg_grad
    gap = float(phi.sum() - (vals[-1] - vals[0]))
    return phi, gap


# ---------------------------------------------------------------------------
# epsilon-LRP


class UnsupportedLayerError(ValueError):
    pass


def _sign0(z):
    return np.where(z >= 0, 1.0, -1.0)


def lrp_epsilon(net: Network, x, target_index: int, epsilon: float = 1e-6):
    """Relevance of each input entry for one output neuron's raw score.

    Epsilon rule at dense/conv layers, winner-take-all through max-pool,
    identity through ReLU/flatten/eval-dropout. Returns relevance shaped
    like a single input.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(net.input_shape)
    a = x[None] if single else x
    acts = [a]
    caches = []
    for layer in net.layers:
        a, cache = layer.forward(a, train=False)
        acts.append(a)
        caches.append(cache)
    out = acts[-1]
    R = np.zeros_like(out)
    R[:, target_index] = out[:, target_index]

    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        kind = layer.spec.kind
        a_in, z = acts[i], acts[i + 1]
        if kind in ("dense", "conv2d"):
            zs = z + epsilon * _sign0(z)
            s = R / zs
            # gradient of the linear map re-distributes s to the inputs
            c, _ = layer.backward(s, caches[i])
            R = a_in * c
        elif kind == "maxpool2d":
            R, _ = layer.backward(R, caches[i])
        elif kind in ("relu", "dropout"):
            pass
        elif kind == "flatten":
            R = R.reshape(a_in.shape)
        else:
            raise UnsupportedLayerError(f"layer kind {kind!r} not supported on an LRP path")
    return R[0] if single else R


# ---------------------------------------------------------------------------
# adapters


def _target_fn(model, target: str):
    def f(Xb):
        mu, s2 = model.predict(Xb)
        return s2 if target == "variance" else mu
    return f


def _target_value_and_grad(model, target: str):
    if target == "variance":
        return model.variance_and_grad
    return model.mean_and_grad


def zero_baseline(model) -> np.ndarray:
    """All-zeros baseline: the training mean in standardized feature
    space for tabular inputs, an all-black canvas for images."""
    net, _ = model.relevance_path("variance")
    return np.zeros(net.input_shape)


def explain(model, X, cfg: ExplainerConfig, background=None,
            target: str = "variance") -> AttributionMatrix:
    """Run the configured engine on every row of X against the model's
    variance (default) or mean output."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if cfg.engine == "kernelshap":
        if background is None or len(background) == 0:
            raise ValueError("kernelshap needs a background sample")
        d = X.shape[1]
        f = _target_fn(model, target)
        coalitions = None
        if d > 1:
            budget = default_budget(d) if cfg.budget is None else cfg.budget
            coalitions = sample_coalitions(d, budget, make_rng(cfg.seed, "coalitions"))
        values = np.empty((n, d))
        bases = np.empty(n)
        for i in range(n):
            values[i], bases[i] = kernel_shap(f, X[i], background, coalitions=coalitions)
        return AttributionMatrix(values, "kernelshap", target, base_values=bases)

    if cfg.engine == "ig":
        vg = _target_value_and_grad(model, target)
        baseline = zero_baseline(model)
        values = np.empty((n,) + baseline.shape)
        gaps = np.empty(n)
        for i in range(n):
            values[i], gaps[i] = integrated_gradients(vg, X[i], baseline, cfg.ig_steps)
        return AttributionMatrix(_squeeze_channel(values), "ig", target,
                                 extra={"completeness_gaps": gaps})

    # lrp: explain the raw (pre-link) score of the target neuron
    net, idx = model.relevance_path(target)
    values = None
    for i in range(n):
        r = lrp_epsilon(net, X[i], idx, cfg.lrp_epsilon)
        if values is None:
            values = np.empty((n,) + r.shape)
        values[i] = r
    return AttributionMatrix(_squeeze_channel(values), "lrp", target)


def _squeeze_channel(values):
    # (n, 1, H, W) image attributions -> (n, H, W)
    if values.ndim == 4 and values.shape[1] == 1:
        return values[:, 0]
    return values


def sample_background(X_train, size: int, seed: int) -> np.ndarray:
    rng = make_rng(seed, "background")
    idx = rng.choice(len(X_train), size=min(size, len(X_train)), replace=False)
    return np.asarray(X_train)[idx]


# ---------------------------------------------------------------------------
# auxiliary-model baseline (Shapley values of a log-squared-residual model)


def _fit_mse_net(X, t, seed: int, hidden=(64, 32), max_epochs: int = 200,
                 patience: int = 10, lr: float = 1e-3, batch_size: int = 64):
    specs = []
    for h in hidden:
        specs += [LayerSpec("dense", units=h), LayerSpec("relu")]
    specs.append(LayerSpec("dense", units=1))
    net = Network(specs, (X.shape[1],), derive_seed(seed, "aux-init"))
    n_val = max(1, len(X) // 10)
    perm = make_rng(seed, "aux-split").permutation(len(X))
    va, tr = perm[:n_val], perm[n_val:]
    Xtr, ttr, Xva, tva = X[tr], t[tr], X[va], t[va]
    opt = AdamState(net.params())
    best = np.inf
    best_state = net.get_state()
    since = 0
    for epoch in range(max_epochs):
        order = make_rng(seed, "aux-shuffle", epoch).permutation(len(Xtr))
        for start in range(0, len(Xtr), batch_size):
            idx = order[start:start + batch_size]
            out, tape = net.forward(Xtr[idx], mode="train")
            resid = out[:, 0] - ttr[idx]
            grads, _ = net.backward(tape, (2.0 * resid / len(idx))[:, None])
            adam_step(net.params(), grads, opt, lr=lr)
        net.bump_version()
        val = float(np.mean((net.predict(Xva)[:, 0] - tva) ** 2))
        if val < best:
            best, best_state, since = val, net.get_state(), 0
        else:
            since += 1
        if since >= patience:
            break
    net.set_state(best_state)
    return net


def infoshap_explain(mean_fn, train, X, cfg: ExplainerConfig,
                     background=None, eps_log: float = 1e-8) -> AttributionMatrix:
    """Fit an auxiliary regressor to log((y - mean_fn(x))^2 + eps) on the
    train split and return its kernel_shap attributions at X.

    mean_fn takes a (m, d) batch and returns (m,) mean predictions.
    """
    X_train, y_train = train
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64).ravel()
    resid2 = (y_train - mean_fn(X_train)) ** 2
    t = np.log(resid2 + eps_log)
    degenerate = bool(np.all(resid2 < 1e-12))
    if degenerate:
        warnings.warn("all residuals ~0: auxiliary model target is degenerate")
    aux = _fit_mse_net(X_train, t, cfg.seed)
    aux_fn = lambda Xb: aux.predict(np.asarray(Xb, dtype=np.float64))[:, 0]

    if background is None:
        background = sample_background(X_train, cfg.background_size, cfg.seed)
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[1]
    coalitions = None
    if d > 1:
        budget = default_budget(d) if cfg.budget is None else cfg.budget
        coalitions = sample_coalitions(d, budget, make_rng(cfg.seed, "coalitions"))
    values = np.empty((len(X), d))
    bases = np.empty(len(X))
    for i in range(len(X)):
        values[i], bases[i] = kernel_shap(aux_fn, X[i], background, coalitions=coalitions)
    return AttributionMatrix(values, "infoshap", "variance", base_values=bases,
                             extra={"degenerate_residuals": degenerate})


# ---------------------------------------------------------------------------
# aggregation and subset selection


def global_importance(A: AttributionMatrix) -> np.ndarray:
    """Mean absolute attribution per feature (or per pixel)."""
    if len(A.values) == 0:
        raise ValueError("empty attribution matrix")
    return np.mean(np.abs(A.values), axis=0)


def select_uncertainty_subset(model, X, mode: str, m: int = 200, seed: int = 0):
    """Indices of the m highest/lowest-variance rows (stable ascending
    index tie-break) or a uniform random subset."""
    X = np.asarray(X, dtype=np.float64)
    if m > len(X):
        raise ValueError(f"m={m} exceeds {len(X)} rows")
    if mode == "random":
        return np.sort(make_rng(seed, "subset").choice(len(X), size=m, replace=False))
    _, s2 = model.predict(X)
    if mode == "highest":
        return np.argsort(-s2, kind="stable")[:m]
    if mode == "lowest":
        return np.argsort(s2, kind="stable")[:m]
    raise ValueError(f"unknown subset mode {mode!r}")
