"""Benchmark orchestration.

Config-driven pipelines for the three experiment stages:
  * stage1: global uncertainty-driver detection on synthetic data —
    GRA/GMA and top-15 importance tables over high/low/random
    uncertainty subsets, per explainer.
  * stage2: per-fold local accuracy (mean RRA/RMA over explained test
    instances), faithfulness, and Lipschitz robustness; folds share the
    dataset and re-run training/explanation with derived seeds.
  * mnistu: the composite-image task with the two-encoder CNN and
    pixel-mask accuracy.

All randomness derives from the master seed, so a rerun with the same
config produces byte-identical report files.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen, explain as xp, hetreg, metrics
from .datagen import TEST, TRAIN, VAL, TabularDataset
from .nncore import LayerSpec, Network
from .rng import derive_seed, make_rng

TABULAR_EXPLAINERS = ("kernelshap", "ig", "lrp", "infoshap", "random")
IMAGE_EXPLAINERS = ("lrp", "ig")


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "name": "run",
    "scale": "desk",                    # desk | paper
    "dataset": {
        "kind": "synthetic",            # synthetic | csv
        "augment": None,                # None | "1-S" | "50-C"
        "csv_path": None,
        "csv_target": None,
        "csv_categoricals": [],
        "k_noise": 5,
    },
    "model": {
        "hidden": [64, 64, 64, 32],
        "dropout_rate": 0.2,
        "dropout_layers": 2,
    },
    "train": {
        "stage1_epochs": None,
        "stage1_patience": 10,
        "stage1_max_epochs": 100,
        "stage2_patience": 10,
        "stage2_max_epochs": 300,
        "batch_size": 64,
        "lr_stage1": 1e-3,
        "lr_stage2": 1e-3,
        "stage2_weight_decay": 1e-2,
        "stage2_l1_input": 3e-3,
        "stage2_swa_start": 80,
    },
    "explainers": ["kernelshap", "ig", "lrp", "infoshap"],
    "explain": {
        "background_size": 100,
        "budget": None,
        "ig_steps": 64,
        "lrp_epsilon": 1e-6,
    },
    "folds": 3,
    "subset_modes": ["highest", "lowest", "random"],
    "subset_size": 200,
    "explain_sample": 200,              # test rows explained per fold (stage 2)
    "faithfulness_k": 3,
    "robustness": {
        "enabled": True,
        "instances": 200,
        "n_pert": 100,
        "frac": 0.02,
        "budget": 150,                  # reduced SHAP budget for perturbation loops
        "background_size": 10,
    },
    "mnistu": {
        "count": 20000,
        "digits_per_class": 200,
        "stage1_epochs": 6,
        "stage2_max_epochs": 6,
        "stage2_patience": 2,
        "batch_size": 256,
        "explain_sample": 200,
        "idx_images": None,             # optional real IDX files
        "idx_labels": None,
    },
    "seed": 8,
    "out": "runs",
}


def _merge(defaults, overrides, path=""):
    out = dict(defaults)
    for key, val in overrides.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and isinstance(val, dict):
            out[key] = _merge(defaults[key], val, path + key + ".")
        else:
            out[key] = val
    return out


def load_config(obj) -> dict:
    """Validate a config dict (or JSON file path) against the schema;
    unknown keys are rejected."""
    if isinstance(obj, (str, Path)):
        with open(obj) as f:
            obj = json.load(f)
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(_DEFAULTS, obj)
    if cfg["scale"] not in ("desk", "paper"):
        raise ConfigError(f"scale must be desk or paper, got {cfg['scale']!r}")
    if cfg["folds"] < 1:
        raise ConfigError("folds must be >= 1")
    for e in cfg["explainers"]:
        if e not in TABULAR_EXPLAINERS:
            raise ConfigError(f"unknown explainer {e!r}")
    if not cfg["explainers"]:
        raise ConfigError("explainer list must be nonempty")
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)   # (metric, dataset, explainer, fold, seed, value)
    notes: list = field(default_factory=list)

    def add_row(self, metric, dataset, explainer, fold, seed, value):
        self.rows.append((metric, dataset, explainer, int(fold), int(seed), float(value)))


# ---------------------------------------------------------------------------
# model builders


def build_tabular_model(d: int, seed: int, hidden=(64, 64, 64, 32),
                        dropout_rate: float = 0.2, dropout_layers: int = 2) -> hetreg.SharedHetModel:
    specs = []
    for i, h in enumerate(hidden):
        specs.append(LayerSpec("dense", units=h))
        specs.append(LayerSpec("relu"))
        if i < dropout_layers and dropout_rate > 0:
            specs.append(LayerSpec("dropout", rate=dropout_rate))
    specs.append(LayerSpec("dense", units=2))
    return hetreg.SharedHetModel(Network(specs, (d,), seed))


def _encoder_specs(dropout_rate: float = 0.2):
    return [
        LayerSpec("conv2d", filters=16, kernel=3, stride=1, padding=1),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", pool=2),
        LayerSpec("conv2d", filters=32, kernel=3, stride=1, padding=1),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", pool=2),
        LayerSpec("flatten"),
        LayerSpec("dense", units=128),
        LayerSpec("relu"),
        LayerSpec("dropout", rate=dropout_rate),
        LayerSpec("dense", units=64),
        LayerSpec("relu"),
        LayerSpec("dropout", rate=dropout_rate),
        LayerSpec("dense", units=32),
        LayerSpec("relu"),
        LayerSpec("dense", units=1),
    ]


def build_image_model(seed: int, dropout_rate: float = 0.2) -> hetreg.TwoBranchHetModel:
    mean_net = Network(_encoder_specs(dropout_rate), (1, 64, 64), derive_seed(seed, "mean-enc"))
    var_net = Network(_encoder_specs(dropout_rate), (1, 64, 64), derive_seed(seed, "var-enc"))
    return hetreg.TwoBranchHetModel(mean_net, var_net)


# ---------------------------------------------------------------------------
# dataset and explainer plumbing


def synthetic_config(cfg: dict, seed: int) -> datagen.SyntheticConfig:
    if cfg["scale"] == "paper":
        return datagen.SyntheticConfig(seed=seed)
    return datagen.SyntheticConfig(n=12_000, split=(9_600, 1_200, 1_200), seed=seed)


def build_dataset(cfg: dict, seed: int, require_gt: bool = True) -> TabularDataset:
    """Materialize the configured dataset. require_gt=False allows a bare
    CSV dataset without ground-truth noise features (used when the caller
    augments it separately)."""
    dcfg = cfg["dataset"]
    if dcfg["kind"] == "synthetic":
        ds = datagen.generate_synthetic(synthetic_config(cfg, seed))
        base_has_gt = True
    elif dcfg["kind"] == "csv":
        if not dcfg["csv_path"] or not dcfg["csv_target"]:
            raise ConfigError("csv datasets need csv_path and csv_target")
        ds = datagen.load_csv_dataset(dcfg["csv_path"], dcfg["csv_target"],
                                      dcfg["csv_categoricals"], seed=seed)
        base_has_gt = False
    else:
        raise ConfigError(f"unknown dataset kind {dcfg['kind']!r}")
    if dcfg["augment"]:
        ds = datagen.augment_semisynthetic(ds, dcfg["augment"], k_noise=dcfg["k_noise"],
                                           seed=derive_seed(seed, "augment"))
    elif require_gt and not base_has_gt:
        raise ConfigError("csv datasets need an augmentation mode for accuracy metrics")
    return ds


def train_model(cfg: dict, ds: TabularDataset, seed: int) -> hetreg.SharedHetModel:
    mcfg, tcfg = cfg["model"], cfg["train"]
    model = build_tabular_model(ds.X.shape[1], derive_seed(seed, "model"),
                                hidden=tuple(mcfg["hidden"]),
                                dropout_rate=mcfg["dropout_rate"],
                                dropout_layers=mcfg["dropout_layers"])
    train_cfg = hetreg.TrainConfig(seed=derive_seed(seed, "train"), **tcfg)
    hetreg.train_two_stage(model, ds.train, ds.val, train_cfg)
    return model


def explainer_values(name: str, model, X, ds: TabularDataset, cfg: dict, seed: int,
                     budget=None, background_size=None) -> np.ndarray:
    """Attribution matrix values for one explainer over rows X."""
    ecfg = cfg["explain"]
    ex = xp.ExplainerConfig(
        engine=name if name in xp.ENGINES else "kernelshap",
        background_size=background_size or ecfg["background_size"],
        budget=budget if budget is not None else ecfg["budget"],
        ig_steps=ecfg["ig_steps"],
        lrp_epsilon=ecfg["lrp_epsilon"],
        seed=derive_seed(seed, "explain", name),
    )
    if name == "random":
        rng = make_rng(seed, "random-explainer")
        return rng.standard_normal((len(X), ds.X.shape[1]))
    X_train, y_train = ds.train
    background = xp.sample_background(X_train, ex.background_size, ex.seed)
    if name == "infoshap":
        mean_fn = lambda Xb: model.predict(Xb)[0]
        return xp.infoshap_explain(mean_fn, (X_train, y_train), X, ex,
                                   background=background).values
    return xp.explain(model, X, ex, background=background).values


# ---------------------------------------------------------------------------
# stages


def run_stage1_global(cfg: dict, manifest: RunManifest | None = None) -> RunManifest:
    """Global driver detection: GRA/GMA per explainer on high/low/random
    uncertainty subsets, plus top-15 importance tables."""
    cfg = load_config(cfg)
    man = manifest or RunManifest(cfg, config_hash(cfg))
    seed = derive_seed(cfg["seed"], "stage1")
    t0 = time.monotonic()
    ds = build_dataset(cfg, cfg["seed"])
    if ds.gt_noise_features is None:
        raise ConfigError("stage 1 needs a dataset with ground-truth noise features")
    model = train_model(cfg, ds, seed)
    cal = hetreg.calibration_report(model, *ds.test)
    man.add_row("calibration_spearman", cfg["name"], "-", 0, seed, cal["spearman_resid_var"])

    X_test, _ = ds.test
    importances = {}
    for mode in cfg["subset_modes"]:
        m = min(cfg["subset_size"], len(X_test))
        idx = xp.select_uncertainty_subset(model, X_test, mode, m=m,
                                           seed=derive_seed(seed, "subset", mode))
        for name in cfg["explainers"]:
            values = explainer_values(name, model, X_test[idx], ds, cfg, seed)
            acc = metrics.global_accuracy(values, ds.gt_noise_features)
            man.add_row(f"gra_{mode}", cfg["name"], name, 0, seed, acc["gra"])
            man.add_row(f"gma_{mode}", cfg["name"], name, 0, seed, acc["gma"])
            g = np.mean(np.abs(values), axis=0)
            top15 = np.argsort(-g, kind="stable")[:15]
            importances[f"{name}/{mode}"] = [
                {"feature": str(ds.feature_names[j]), "index": int(j), "importance": float(g[j]),
                 "is_gt": bool(j in set(ds.gt_noise_features))}
                for j in top15
            ]
    man.artifacts["top15_importances"] = importances
    man.timings["stage1_s"] = round(time.monotonic() - t0, 3)
    return man


def run_stage2_local(cfg: dict, manifest: RunManifest | None = None) -> RunManifest:
    """Per-fold local accuracy, faithfulness, and robustness."""
    cfg = load_config(cfg)
    man = manifest or RunManifest(cfg, config_hash(cfg))
    t0 = time.monotonic()
    categorical_ds = bool(cfg["dataset"]["csv_categoricals"])
    ds = build_dataset(cfg, cfg["seed"])
    for fold in range(cfg["folds"]):
        fold_seed = derive_seed(cfg["seed"], "fold", fold)
        model = train_model(cfg, ds, fold_seed)
        X_test, y_test = ds.test
        n_explain = min(cfg["explain_sample"], len(X_test))
        sub = make_rng(fold_seed, "explain-sample").choice(len(X_test), size=n_explain,
                                                           replace=False)
        sub.sort()
        for name in cfg["explainers"]:
            values = explainer_values(name, model, X_test[sub], ds, cfg, fold_seed)
            if ds.gt_noise_features is not None:
                rras = [metrics.rra(v, ds.gt_noise_features) for v in values]
                rmas = [metrics.rma(v, ds.gt_noise_features) for v in values]
                man.add_row("rra", cfg["name"], name, fold, fold_seed, float(np.mean(rras)))
                man.add_row("rma", cfg["name"], name, fold, fold_seed, float(np.mean(rmas)))
            if categorical_ds:
                man.notes.append(
                    f"faithfulness skipped for {cfg['name']} fold {fold}: "
                    "continuous perturbations are undefined for categorical features")
            else:
                faith = metrics.faithfulness(model, values, X_test, y_test,
                                             k=cfg["faithfulness_k"],
                                             seed=derive_seed(fold_seed, "faith", name))
                man.add_row("faithfulness_delta_rho", cfg["name"], name, fold, fold_seed,
                            faith["delta_rho"])
        if cfg["robustness"]["enabled"]:
            _stage2_robustness(cfg, man, ds, model, fold, fold_seed, categorical_ds)
    man.timings["stage2_s"] = round(time.monotonic() - t0, 3)
    return man


def _stage2_robustness(cfg, man, ds, model, fold, fold_seed, categorical_ds):
    rcfg = cfg["robustness"]
    X_test, _ = ds.test
    X_train, _ = ds.train
    n_inst = min(rcfg["instances"], len(X_test))
    pick = make_rng(fold_seed, "robust-sample").choice(len(X_test), size=n_inst, replace=False)
    pick.sort()
    train_ranges = X_train.max(axis=0) - X_train.min(axis=0)
    for name in cfg["explainers"]:
        fn = _single_row_explainer(name, model, ds, cfg, fold_seed,
                                   budget=rcfg["budget"],
                                   background_size=rcfg["background_size"])
        if categorical_ds:
            expl = np.array([fn(X_test[i]) for i in pick])
            ells = []
            for local_i in range(len(pick)):
                ell = metrics.lipschitz_discrete(expl, X_test[pick], local_i)
                if ell is not None:
                    ells.append(ell)
        else:
            ells = [metrics.lipschitz_continuous(
                        fn, X_test[i], train_ranges,
                        n_pert=rcfg["n_pert"], frac=rcfg["frac"],
                        seed=derive_seed(fold_seed, "pert", name, int(i)))
                    for i in pick]
        if ells:
            man.add_row("lipschitz_median", cfg["name"], name, fold, fold_seed,
                        float(np.median(ells)))
            man.add_row("lipschitz_max", cfg["name"], name, fold, fold_seed,
                        float(np.max(ells)))


def _single_row_explainer(name, model, ds, cfg, seed, budget=None, background_size=None):
    """Deterministic per-instance explanation function for robustness loops."""
    ecfg = cfg["explain"]
    X_train, y_train = ds.train
    ex = xp.ExplainerConfig(
        engine=name if name in xp.ENGINES else "kernelshap",
        background_size=background_size or ecfg["background_size"],
        budget=budget, ig_steps=ecfg["ig_steps"], lrp_epsilon=ecfg["lrp_epsilon"],
        seed=derive_seed(seed, "robust-explain", name))
    if name == "random":
        # deterministic in the input so the estimate is finite: hash-free constant map
        return lambda x: np.zeros(ds.X.shape[1])
    background = xp.sample_background(X_train, ex.background_size, ex.seed)
    if name == "infoshap":
        mean_fn = lambda Xb: model.predict(Xb)[0]
        resid2 = (y_train - mean_fn(X_train)) ** 2
        aux = xp._fit_mse_net(X_train, np.log(resid2 + 1e-8), ex.seed)
        aux_fn = lambda Xb: aux.predict(np.asarray(Xb, dtype=np.float64))[:, 0]
        d = ds.X.shape[1]
        coalitions = xp.sample_coalitions(d, ex.budget or xp.default_budget(d),
                                          make_rng(ex.seed, "coalitions"))
        return lambda x: xp.kernel_shap(aux_fn, x, background, coalitions=coalitions)[0]
    if name == "kernelshap":
        d = ds.X.shape[1]
        f = xp._target_fn(model, "variance")
        coalitions = xp.sample_coalitions(d, ex.budget or xp.default_budget(d),
                                          make_rng(ex.seed, "coalitions"))
        return lambda x: xp.kernel_shap(f, x, background, coalitions=coalitions)[0]
    if name == "ig":
        baseline = xp.zero_baseline(model)
        return lambda x: xp.integrated_gradients(model.variance_and_grad, x, baseline,
                                                 ex.ig_steps)[0]
    net, idx = model.relevance_path("variance")
    return lambda x: xp.lrp_epsilon(net, x, idx, ex.lrp_epsilon)


def run_mnistu(cfg: dict, manifest: RunManifest | None = None,
               digits=None) -> RunManifest:
    """Composite-image benchmark: train the two-encoder CNN, explain the
    variance with LRP and IG on a test subset, and aggregate pixel-mask
    accuracy; also checks that the mean-head LRP lands on the mean digit."""
    cfg = load_config(cfg)
    man = manifest or RunManifest(cfg, config_hash(cfg))
    mcfg = cfg["mnistu"]
    seed = derive_seed(cfg["seed"], "mnistu")
    t0 = time.monotonic()
    if digits is None:
        if mcfg["idx_images"] and mcfg["idx_labels"]:
            digits = datagen.load_mnist_idx(mcfg["idx_images"], mcfg["idx_labels"])
        else:
            digits = datagen.synthetic_digit_set(mcfg["digits_per_class"],
                                                 seed=derive_seed(seed, "digits"))
    count = mcfg["count"] if cfg["scale"] == "desk" else 500_000
    data = datagen.compose_mnistu(digits, count, seed=derive_seed(seed, "compose"))

    model = build_image_model(derive_seed(seed, "model"),
                              dropout_rate=cfg["model"]["dropout_rate"])
    tr, va = data.rows(TRAIN), data.rows(VAL)
    train_cfg = hetreg.TrainConfig(
        stage1_epochs=mcfg["stage1_epochs"] if cfg["scale"] == "desk" else 16,
        stage2_max_epochs=mcfg["stage2_max_epochs"],
        stage2_patience=mcfg["stage2_patience"],
        batch_size=mcfg["batch_size"],
        seed=derive_seed(seed, "train"))
    untrained = mcfg["stage1_epochs"] == 0 and mcfg["stage2_max_epochs"] == 0
    hetreg.train_two_stage(model, (data.inputs(tr), data.labels[tr]),
                           (data.inputs(va), data.labels[va]), train_cfg)

    te = data.rows(TEST)
    n_explain = min(mcfg["explain_sample"], len(te))
    pick = te[make_rng(seed, "explain-sample").choice(len(te), size=n_explain, replace=False)]
    pick.sort()
    X = data.inputs(pick)
    ecfg = cfg["explain"]
    for name in IMAGE_EXPLAINERS:
        ex = xp.ExplainerConfig(engine=name, ig_steps=ecfg["ig_steps"],
                                lrp_epsilon=ecfg["lrp_epsilon"],
                                seed=derive_seed(seed, "explain", name))
        A = xp.explain(model, X, ex, target="variance")
        _image_accuracy_rows(man, cfg, data, pick, A.values, f"{name}", "variance", seed)
    # mean-head control with LRP
    ex = xp.ExplainerConfig(engine="lrp", lrp_epsilon=ecfg["lrp_epsilon"])
    A = xp.explain(model, X, ex, target="mean")
    _image_accuracy_rows(man, cfg, data, pick, A.values, "lrp", "mean", seed)

    if untrained:
        man.notes.append("model trained for zero epochs: metrics reflect an untrained network")
    man.timings["mnistu_s"] = round(time.monotonic() - t0, 3)
    return man


def _image_accuracy_rows(man, cfg, data, pick, values, explainer, target, seed):
    accs = [metrics.image_accuracy(values[k], data.var_mask[i], data.mean_mask[i])
            for k, i in enumerate(pick)]
    for key in ("rma_var", "rra_var", "rma_mean", "rra_mean"):
        vals = [a[key] for a in accs]
        man.add_row(f"{key}_{target}", cfg["name"], explainer, 0, seed, float(np.mean(vals)))
        man.add_row(f"{key}_{target}_std", cfg["name"], explainer, 0, seed, float(np.std(vals)))


# ---------------------------------------------------------------------------
# reports


def emit_reports(man: RunManifest, out_dir) -> dict:
    """Write the metric CSV, JSON summary, and figure-data files;
    idempotent and byte-deterministic for a given manifest. Wall-clock
    timings go to a separate timings.json, which is the one output that
    legitimately differs between reruns."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    lines = ["metric,dataset,explainer,fold,seed,value"]
    for row in sorted(man.rows):
        metric, dataset, explainer, fold, seed, value = row
        lines.append(f"{metric},{dataset},{explainer},{fold},{seed},{value!r}")
    csv_path.write_text("\n".join(lines) + "\n")

    aggregates = {}
    for metric, dataset, explainer, fold, seed, value in man.rows:
        key = f"{metric}|{dataset}|{explainer}"
        aggregates.setdefault(key, []).append(value)
    summary = {
        "config_hash": man.config_hash,
        "name": man.config["name"],
        "aggregates": {k: {"mean": float(np.mean(v)), "std": float(np.std(v)),
                           "n": len(v)}
                       for k, v in sorted(aggregates.items())},
        "notes": sorted(set(man.notes)) + [
            "counterfactual-optimization baselines are deliberately omitted"],
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    if man.timings:
        (out / "timings.json").write_text(
            json.dumps(man.timings, sort_keys=True, indent=1) + "\n")
    if man.artifacts:
        (out / "figure_data.json").write_text(
            json.dumps(man.artifacts, sort_keys=True, indent=1) + "\n")
    return {"csv": str(csv_path), "summary": str(out / "summary.json")}
