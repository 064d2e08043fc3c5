"""Heteroscedastic Gaussian regression.

Models output a mean and a positive variance per input. The variance is
produced through a softplus link with a small floor, which keeps the
Gaussian negative log-likelihood (GNLL) finite and its gradients stable.
Training runs in two stages: plain MSE on the mean first, then GNLL on
mean and variance jointly, with per-epoch validation, patience-based
early stopping and best-checkpoint selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import spearman
from .nncore import AdamState, LayerSpec, Network, adam_step, sigmoid
from .rng import make_rng

VAR_FLOOR = 1e-6


class DivergenceError(RuntimeError):
    """Training loss became non-finite; carries the last finite checkpoint."""

    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


def variance_link(raw):
    """Monotone map raw score -> (0, inf)."""
    return np.logaddexp(0.0, raw) + VAR_FLOOR


def variance_link_deriv(raw):
    return sigmoid(np.asarray(raw, dtype=np.float64))


def variance_link_inverse(s2):
    """Raw score whose linked variance equals s2 (s2 > floor)."""
    if float(s2) <= VAR_FLOOR:
        raise ValueError(f"variance {s2} is at or below the floor {VAR_FLOOR}")
    y = float(s2) - VAR_FLOOR
    # inverse softplus, stable for large y
    return y + np.log1p(-np.exp(-y)) if y > 1e-8 else np.log(np.expm1(y))


# ---------------------------------------------------------------------------
# losses


def mse_loss(preds, targets):
    preds = np.asarray(preds, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if preds.size == 0:
        raise ValueError("empty batch")
    if preds.shape != targets.shape:
        raise ValueError("preds/targets length mismatch")
    return float(np.mean((targets - preds) ** 2))


def gnll_loss(means, variances, targets):
    """Mean over the batch of log(sigma^2) + residual^2 / sigma^2."""
    means = np.asarray(means, dtype=np.float64).ravel()
    variances = np.asarray(variances, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if means.size == 0:
        raise ValueError("empty batch")
    if np.any(variances <= 0):
        raise ValueError("nonpositive variance in GNLL")
    r2 = (targets - means) ** 2
    return float(np.mean(np.log(variances) + r2 / variances))


# ---------------------------------------------------------------------------
# models


class HetModel:
    """Common interface: predict (mean, variance), expose gradients and
    the network path(s) needed by relevance propagation."""

    kind = "base"

    def predict(self, X):
        raise NotImplementedError

    def params(self, stage: int) -> list[np.ndarray]:
        raise NotImplementedError

    def param_names(self, stage: int) -> list[str]:
        raise NotImplementedError

    def loss_and_grads(self, Xb, yb, stage: int):
        raise NotImplementedError

    def eval_loss(self, X, y, stage: int) -> float:
        # batched: image inputs hold ~MBs of conv workspace per sample
        batch = 4096 if np.ndim(X) == 2 else 128
        mu, s2 = _predict_batched(self, X, batch)
        return mse_loss(mu, y) if stage == 1 else gnll_loss(mu, s2, y)

    def get_state(self) -> list[np.ndarray]:
        raise NotImplementedError

    def set_state(self, state):
        raise NotImplementedError

    def variance_and_grad(self, X):
        """Return (sigma2, d sigma2 / dX) for a batch."""
        raise NotImplementedError

    def mean_and_grad(self, X):
        raise NotImplementedError

    def relevance_path(self, target: str):
        """(network, output index) whose raw score realizes `target`."""
        raise NotImplementedError


class SharedHetModel(HetModel):
    """Single trunk with a 2-output head: raw mean score and raw variance score."""

    kind = "shared"

    def __init__(self, net: Network):
        if net.output_shape != (2,):
            raise ValueError(f"shared model needs a 2-output network, got {net.output_shape}")
        self.net = net

    def predict(self, X):
        out = self.net.predict(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        return out[:, 0], variance_link(out[:, 1])

    def params(self, stage: int):
        return self.net.params()

    def param_names(self, stage: int):
        return self.net.param_names()

    def get_state(self):
        return self.net.get_state()

    def set_state(self, state):
        self.net.set_state(state)

    def loss_and_grads(self, Xb, yb, stage: int):
        out, tape = self.net.forward(Xb, mode="train")
        mu, raw = out[:, 0], out[:, 1]
        n = len(yb)
        upstream = np.zeros_like(out)
        if stage == 1:
            loss = mse_loss(mu, yb)
            upstream[:, 0] = 2.0 * (mu - yb) / n
        else:
            s2 = variance_link(raw)
            loss = gnll_loss(mu, s2, yb)
            r = yb - mu
            upstream[:, 0] = -2.0 * r / s2 / n
            upstream[:, 1] = (1.0 / s2 - r * r / s2**2) * variance_link_deriv(raw) / n
        grads, _ = self.net.backward(tape, upstream)
        return loss, grads

    def _output_grad(self, X, column, chain=None):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out, tape = self.net.forward(X, mode="eval")
        upstream = np.zeros_like(out)
        upstream[:, column] = 1.0 if chain is None else chain(out[:, column])
        _, dx = self.net.backward(tape, upstream)
        return out, dx

    def variance_and_grad(self, X):
        out, dx = self._output_grad(X, 1, chain=variance_link_deriv)
        return variance_link(out[:, 1]), dx

    def mean_and_grad(self, X):
        out, dx = self._output_grad(X, 0)
        return out[:, 0], dx

    def relevance_path(self, target: str):
        return self.net, {"variance": 1, "mean": 0}[target]

    def reset_variance_column(self, seed: int, init_variance: float):
        """Re-initialize the variance column of the head: small random
        weights plus a bias chosen so the initial prediction is roughly
        init_variance. Run before GNLL fine-tuning to avoid blow-up."""
        final = self.net.layers[-1]
        if not hasattr(final, "W"):
            raise ValueError("final layer has no weights")
        rng = make_rng(seed, "var-column")
        final.W[:, 1] = rng.normal(0.0, 0.01, size=final.W.shape[0])
        final.b[1] = variance_link_inverse(init_variance)
        self.net.bump_version()


class TwoBranchHetModel(HetModel):
    """Two parallel encoders over the same input: one for the mean, one
    for the raw variance score (the image-task architecture)."""

    kind = "two_branch"

    def __init__(self, mean_net: Network, var_net: Network):
        for name, net in (("mean", mean_net), ("variance", var_net)):
            if net.output_shape != (1,):
                raise ValueError(f"{name} branch must have 1 output, got {net.output_shape}")
        if mean_net.input_shape != var_net.input_shape:
            raise ValueError("branch input shapes differ")
        self.mean_net = mean_net
        self.var_net = var_net

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == len(self.mean_net.input_shape):
            X = X[None]
        mu = self.mean_net.predict(X)[:, 0]
        raw = self.var_net.predict(X)[:, 0]
        return mu, variance_link(raw)

    def params(self, stage: int):
        if stage == 1:
            return self.mean_net.params()
        return self.mean_net.params() + self.var_net.params()

    def param_names(self, stage: int):
        names = [f"mean/{n}" for n in self.mean_net.param_names()]
        if stage == 1:
            return names
        return names + [f"var/{n}" for n in self.var_net.param_names()]

    def get_state(self):
        return self.mean_net.get_state() + self.var_net.get_state()

    def set_state(self, state):
        k = len(self.mean_net.params())
        self.mean_net.set_state(state[:k])
        self.var_net.set_state(state[k:])

    def loss_and_grads(self, Xb, yb, stage: int):
        n = len(yb)
        mu_out, mu_tape = self.mean_net.forward(Xb, mode="train")
        mu = mu_out[:, 0]
        if stage == 1:
            loss = mse_loss(mu, yb)
            up = (2.0 * (mu - yb) / n)[:, None]
            grads, _ = self.mean_net.backward(mu_tape, up)
            return loss, grads
        raw_out, raw_tape = self.var_net.forward(Xb, mode="train")
        raw = raw_out[:, 0]
        s2 = variance_link(raw)
        loss = gnll_loss(mu, s2, yb)
        r = yb - mu
        mu_up = (-2.0 * r / s2 / n)[:, None]
        raw_up = ((1.0 / s2 - r * r / s2**2) * variance_link_deriv(raw) / n)[:, None]
        mu_grads, _ = self.mean_net.backward(mu_tape, mu_up)
        raw_grads, _ = self.var_net.backward(raw_tape, raw_up)
        return loss, mu_grads + raw_grads

    def variance_and_grad(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == len(self.var_net.input_shape):
            X = X[None]
        out, tape = self.var_net.forward(X, mode="eval")
        up = variance_link_deriv(out[:, 0])[:, None]
        _, dx = self.var_net.backward(tape, up)
        return variance_link(out[:, 0]), dx

    def mean_and_grad(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == len(self.mean_net.input_shape):
            X = X[None]
        out, tape = self.mean_net.forward(X, mode="eval")
        _, dx = self.mean_net.backward(tape, np.ones_like(out))
        return out[:, 0], dx

    def relevance_path(self, target: str):
        return {"variance": self.var_net, "mean": self.mean_net}[target], 0

    def reset_variance_column(self, seed: int, init_variance: float):
        final = self.var_net.layers[-1]
        rng = make_rng(seed, "var-column")
        final.W[:, 0] = rng.normal(0.0, 0.01, size=final.W.shape[0])
        final.b[0] = variance_link_inverse(init_variance)
        self.var_net.bump_version()


def extend_pretrained_head(mean_net: Network, seed: int, init_variance: float = 1.0) -> SharedHetModel:
    """Widen a 1-output regression network into a (mean, variance) model.

    The trunk and the mean column are copied bit-for-bit; only a fresh
    variance column (small random weights) and its bias are added, so
    mean predictions are unchanged until fine-tuning.
    """
    final_spec = mean_net.specs[-1]
    if final_spec.kind != "dense" or final_spec.units != 1:
        raise ValueError("pretrained model must end in a dense layer with 1 output")
    specs = [LayerSpec.from_dict(s.to_dict()) for s in mean_net.specs]
    specs[-1].units = 2
    net = Network(specs, mean_net.input_shape, seed)
    old_state = mean_net.get_state()
    new_state = net.get_state()
    rng = make_rng(seed, "head-extension")
    # all but the final W/b are identical arrays
    for i in range(len(new_state) - 2):
        new_state[i] = old_state[i]
    W_old, b_old = old_state[-2], old_state[-1]
    W_new = np.empty((W_old.shape[0], 2))
    W_new[:, 0] = W_old[:, 0]
    W_new[:, 1] = rng.normal(0.0, 0.01, size=W_old.shape[0])
    new_state[-2] = W_new
    new_state[-1] = np.array([b_old[0], variance_link_inverse(init_variance)])
    net.set_state(new_state)
    return SharedHetModel(net)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    stage1_epochs: int | None = None     # fixed budget; None = patience-driven
    stage1_patience: int = 10
    stage1_max_epochs: int = 200
    stage2_patience: int = 10
    stage2_max_epochs: int = 200
    batch_size: int = 64
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-4
    # stage-2 regularization; the GNLL target (squared residuals) is very
    # noisy, so the variance pathway memorizes without these.
    stage2_weight_decay: float = 0.0      # L2 on all weight matrices
    stage2_l1_input: float = 0.0          # L1 on the first weight matrix
    # tail weight averaging: if set, stage 2 runs the full epoch budget and
    # the final weights are the running average from this epoch onward
    # (no early stopping).
    stage2_swa_start: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.stage1_patience < 1 or self.stage2_patience < 1:
            raise ValueError("patience must be >= 1")
        if self.stage2_weight_decay < 0 or self.stage2_l1_input < 0:
            raise ValueError("penalties must be >= 0")
        if self.stage2_swa_start is not None and self.stage2_swa_start < 0:
            raise ValueError("swa start must be >= 0")


@dataclass
class TrainHistory:
    stage1_val: list = field(default_factory=list)
    stage2_val: list = field(default_factory=list)
    stage1_best_epoch: int = -1
    stage2_best_epoch: int = -1
    stage1_checkpoint_val: float = np.inf
    stage2_checkpoint_val: float = np.inf


def _run_stage(model, Xtr, ytr, Xva, yva, cfg: TrainConfig, stage: int,
               max_epochs: int, patience: int | None, lr: float, history_list):
    params = model.params(stage)
    names = model.param_names(stage)
    opt = AdamState(params)
    weight_decay = cfg.stage2_weight_decay if stage == 2 else 0.0
    l1_input = cfg.stage2_l1_input if stage == 2 else 0.0
    swa_start = cfg.stage2_swa_start if stage == 2 else None
    weight_ids = [i for i, nm in enumerate(names) if nm.endswith("W")]
    input_w = weight_ids[0] if weight_ids else None
    best_val = model.eval_loss(Xva, yva, stage)
    best_state = model.get_state()
    best_epoch = -1
    history_list.append(best_val)
    since_best = 0
    swa_avg, swa_count = None, 0
    n = len(ytr)
    for epoch in range(max_epochs):
        order = make_rng(cfg.seed, "shuffle", stage, epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = model.loss_and_grads(Xtr[idx], ytr[idx], stage)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"stage {stage} loss non-finite at epoch {epoch}", checkpoint=best_state)
            if weight_decay > 0:
                for i in weight_ids:
                    grads[i] = grads[i] + weight_decay * params[i]
            if l1_input > 0 and input_w is not None:
                grads[input_w] = grads[input_w] + l1_input * np.sign(params[input_w])
            adam_step(params, grads, opt, lr=lr, names=names)
        _bump_all(model)
        val = model.eval_loss(Xva, yva, stage)
        if not np.isfinite(val):
            raise DivergenceError(
                f"stage {stage} validation loss non-finite at epoch {epoch}",
                checkpoint=best_state)
        history_list.append(val)
        if val < best_val:
            best_val, best_state, best_epoch = val, model.get_state(), epoch
            since_best = 0
        else:
            since_best += 1
        if swa_start is not None:
            if epoch >= swa_start:
                state = model.get_state()
                if swa_avg is None:
                    swa_avg = [p.copy() for p in state]
                    swa_count = 1
                else:
                    swa_count += 1
                    for acc, p in zip(swa_avg, state):
                        acc += (p - acc) / swa_count
        elif patience is not None and since_best >= patience:
            break
    if swa_avg is not None:
        model.set_state(swa_avg)
        final_val = model.eval_loss(Xva, yva, stage)
        history_list.append(final_val)
        return final_val, max_epochs - 1
    model.set_state(best_state)
    return best_val, best_epoch


def _bump_all(model):
    # in-place Adam updates invalidate any outstanding tapes
    if isinstance(model, SharedHetModel):
        model.net.bump_version()
    else:
        model.mean_net.bump_version()
        model.var_net.bump_version()


def train_two_stage(model: HetModel, train, val, cfg: TrainConfig) -> TrainHistory:
    """MSE pre-training on the mean, then GNLL fine-tuning on both heads.

    `train` and `val` are (X, y) pairs. Returns the history; the model is
    left at the best-validation-GNLL checkpoint of stage 2 (or the best
    stage-1 checkpoint if stage 2 runs zero epochs).
    """
    Xtr, ytr = train
    Xva, yva = val
    ytr = np.asarray(ytr, dtype=np.float64).ravel()
    yva = np.asarray(yva, dtype=np.float64).ravel()
    hist = TrainHistory()

    if cfg.stage1_epochs is not None:
        s1_max, s1_patience = cfg.stage1_epochs, None
    else:
        s1_max, s1_patience = cfg.stage1_max_epochs, cfg.stage1_patience
    if s1_max > 0:
        hist.stage1_checkpoint_val, hist.stage1_best_epoch = _run_stage(
            model, Xtr, ytr, Xva, yva, cfg, 1, s1_max, s1_patience,
            cfg.lr_stage1, hist.stage1_val)

    # seed the variance head at the stage-1 residual scale
    mu_tr, _ = _predict_batched(model, Xtr)
    resid_var = float(np.mean((ytr - mu_tr) ** 2))
    model.reset_variance_column(cfg.seed, max(resid_var, 10 * VAR_FLOOR))

    if cfg.stage2_max_epochs > 0:
        hist.stage2_checkpoint_val, hist.stage2_best_epoch = _run_stage(
            model, Xtr, ytr, Xva, yva, cfg, 2, cfg.stage2_max_epochs,
            cfg.stage2_patience, cfg.lr_stage2, hist.stage2_val)
    return hist


def _predict_batched(model, X, batch=None):
    if batch is None:
        batch = 4096 if np.ndim(X) == 2 else 128
    mus, s2s = [], []
    for start in range(0, len(X), batch):
        mu, s2 = model.predict(X[start:start + batch])
        mus.append(mu)
        s2s.append(s2)
    return np.concatenate(mus), np.concatenate(s2s)


def predict_batched(model, X, batch=None):
    """Eval-mode (mean, variance) over X in memory-bounded batches."""
    return _predict_batched(model, X, batch)


def save_model(model: HetModel, prefix, meta: dict | None = None):
    """Checkpoint a model: network container file(s) plus a JSON sidecar
    with the model kind and caller-supplied training metadata."""
    import json

    from .nncore.io import save_network

    prefix = str(prefix)
    if isinstance(model, SharedHetModel):
        files = {"net": prefix + ".nn"}
        save_network(model.net, files["net"])
    else:
        files = {"mean_net": prefix + ".mean.nn", "var_net": prefix + ".var.nn"}
        save_network(model.mean_net, files["mean_net"])
        save_network(model.var_net, files["var_net"])
    sidecar = {"kind": model.kind, "files": files, "meta": meta or {}}
    with open(prefix + ".json", "w") as f:
        json.dump(sidecar, f, sort_keys=True, indent=1)


def load_model(prefix) -> HetModel:
    import json

    from .nncore.io import load_network

    with open(str(prefix) + ".json") as f:
        sidecar = json.load(f)
    if sidecar["kind"] == "shared":
        return SharedHetModel(load_network(sidecar["files"]["net"]))
    return TwoBranchHetModel(load_network(sidecar["files"]["mean_net"]),
                             load_network(sidecar["files"]["var_net"]))


def calibration_report(model: HetModel, X, y) -> dict:
    """Spearman correlation of squared residuals vs predicted variance,
    plus the raw losses on the split."""
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(y) == 0:
        raise ValueError("empty split")
    mu, s2 = _predict_batched(model, X)
    resid2 = (y - mu) ** 2
    rho, degenerate = spearman(resid2, s2)
    return {
        "spearman_resid_var": rho,
        "degenerate": degenerate,
        "mse": mse_loss(mu, y),
        "gnll": gnll_loss(mu, s2, y),
    }
