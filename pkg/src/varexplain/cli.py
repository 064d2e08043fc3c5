"""Command-line entry points.

Subcommands: generate-data, train, explain, evaluate, benchmark, report.
All take --config (JSON, validated against the documented schema) plus
optional --seed / --scale / --out overrides. Exit codes: 0 success,
2 config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, datagen, explain as xp, hetreg, metrics
from .bench import ConfigError, RunManifest, config_hash, load_config
from .hetreg import DivergenceError
from .nncore import NonFiniteGradientError
from .rng import derive_seed, make_rng

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "scale", None):
        cfg["scale"] = args.scale
    if args.out:
        cfg["out"] = args.out
    return cfg


def cmd_generate_data(args) -> int:
    cfg = load_config(args.config) if args.config else load_config({})
    cfg = _apply_overrides(cfg, args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["seed"]
    if args.what == "synthetic":
        ds = datagen.generate_synthetic(bench.synthetic_config(cfg, seed))
        datagen.save_tabular(ds, out / "dataset.csv", out / "dataset.meta.json")
    elif args.what == "semisynthetic":
        base = bench.build_dataset({**cfg, "dataset": {**cfg["dataset"], "augment": None}},
                                   seed, require_gt=False)
        mode = cfg["dataset"]["augment"] or "1-S"
        ds = datagen.augment_semisynthetic(base, mode, k_noise=cfg["dataset"]["k_noise"],
                                           seed=derive_seed(seed, "augment"))
        datagen.save_tabular(ds, out / "dataset.csv", out / "dataset.meta.json")
    else:  # mnistu
        mcfg = cfg["mnistu"]
        if mcfg["idx_images"] and mcfg["idx_labels"]:
            digits = datagen.load_mnist_idx(mcfg["idx_images"], mcfg["idx_labels"])
        else:
            digits = datagen.synthetic_digit_set(mcfg["digits_per_class"],
                                                 seed=derive_seed(seed, "digits"))
        count = mcfg["count"] if cfg["scale"] == "desk" else 500_000
        data = datagen.compose_mnistu(digits, count, seed=derive_seed(seed, "compose"))
        datagen.save_mnistu(data, out / "mnistu.bin")
    print(f"wrote dataset to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    seed = derive_seed(cfg["seed"], "fold", 0)
    ds = bench.build_dataset(cfg, seed)
    datagen.save_tabular(ds, out / "dataset.csv", out / "dataset.meta.json")
    model = bench.train_model(cfg, ds, seed)
    cal = hetreg.calibration_report(model, *ds.test)
    hetreg.save_model(model, out / "model",
                      meta={"config_hash": config_hash(cfg), "seed": seed,
                            "calibration": cal})
    print(f"trained model -> {out}/model.*  test GNLL {cal['gnll']:.4f} "
          f"spearman {cal['spearman_resid_var']:.3f}")
    return EXIT_OK


def cmd_explain(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg["out"])
    ds = datagen.load_tabular(out / "dataset.csv", out / "dataset.meta.json")
    model = hetreg.load_model(out / "model")
    seed = derive_seed(cfg["seed"], "fold", 0)
    X_test, _ = ds.test
    n = min(cfg["explain_sample"], len(X_test))
    sub = make_rng(seed, "explain-sample").choice(len(X_test), size=n, replace=False)
    sub.sort()
    np.savetxt(out / "explained_rows.csv", sub, fmt="%d", header="test_row", comments="")
    for name in cfg["explainers"]:
        values = bench.explainer_values(name, model, X_test[sub], ds, cfg, seed)
        np.savetxt(out / f"attr_{name}.csv", values, delimiter=",")
        meta = {"engine": name, "config_hash": config_hash(cfg), "seed": seed,
                "target": "variance", "rows": int(n)}
        (out / f"attr_{name}.meta.json").write_text(json.dumps(meta, sort_keys=True))
    print(f"explained {n} test rows with {cfg['explainers']} -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg["out"])
    ds = datagen.load_tabular(out / "dataset.csv", out / "dataset.meta.json")
    model = hetreg.load_model(out / "model")
    seed = derive_seed(cfg["seed"], "fold", 0)
    X_test, y_test = ds.test
    man = RunManifest(cfg, config_hash(cfg))
    for name in cfg["explainers"]:
        path = out / f"attr_{name}.csv"
        if not path.exists():
            continue
        values = np.loadtxt(path, delimiter=",", ndmin=2)
        if ds.gt_noise_features is not None:
            man.add_row("rra", cfg["name"], name, 0, seed,
                        float(np.mean([metrics.rra(v, ds.gt_noise_features) for v in values])))
            man.add_row("rma", cfg["name"], name, 0, seed,
                        float(np.mean([metrics.rma(v, ds.gt_noise_features) for v in values])))
        faith = metrics.faithfulness(model, values, X_test, y_test,
                                     k=cfg["faithfulness_k"],
                                     seed=derive_seed(seed, "faith", name))
        man.add_row("faithfulness_delta_rho", cfg["name"], name, 0, seed, faith["delta_rho"])
    paths = bench.emit_reports(man, out)
    print(f"evaluation reports: {paths}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.stage == "stage1":
        man = bench.run_stage1_global(cfg)
    elif args.stage == "stage2":
        man = bench.run_stage2_local(cfg)
    else:
        man = bench.run_mnistu(cfg)
    paths = bench.emit_reports(man, Path(cfg["out"]) / args.stage)
    print(f"benchmark {args.stage} reports: {paths}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg["out"])
    summary = out / "summary.json"
    if not summary.exists():
        raise ConfigError(f"no summary.json under {out}; run a benchmark or evaluate first")
    print(summary.read_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varexplain",
                                     description="uncertainty-explanation benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scale=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        if scale:
            p.add_argument("--scale", choices=["desk", "paper"], default=None)

    p = sub.add_parser("generate-data", help="write a dataset to disk")
    p.add_argument("what", choices=["synthetic", "semisynthetic", "mnistu"])
    common(p)
    p.set_defaults(fn=cmd_generate_data)

    for name, fn in (("train", cmd_train), ("explain", cmd_explain),
                     ("evaluate", cmd_evaluate), ("report", cmd_report)):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(fn=fn)
        if name != "report":
            p._required_config = True

    p = sub.add_parser("benchmark", help="run a full benchmark stage")
    p.add_argument("stage", choices=["stage1", "stage2", "mnistu"])
    common(p)
    p.set_defaults(fn=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.fn in (cmd_train, cmd_explain, cmd_evaluate, cmd_benchmark) and not args.config:
            raise ConfigError(f"{args.command} requires --config")
        return args.fn(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteGradientError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
