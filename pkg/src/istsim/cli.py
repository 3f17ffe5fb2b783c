"""Experiment runner: train / costmodel / gdci-verify / mask-stats / gen-data.

Configuration comes from an optional JSON config file plus flags; flags win.
Every output embeds the fully resolved configuration and seeds.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cluster, costmodel, data, gdci, masks, nn, report
from .masks import ConfigError

TRAIN_DEFAULTS = {
    "strategy": "ist",
    "n": 2,
    "J": 10,
    "batch": 64,
    "eta": 0.2,
    "epochs": 3,
    "seed": 0,
    "dims": "64,32,32,10",
    "mask": "balanced",
    "workers": "sequential",
    "data": None,
    "blob_classes": 10,
    "blob_per_class": 200,
    "blob_spread": 1.0,
    "blob_seed": 7,
    "out": "out",
}

COSTMODEL_DEFAULTS = {
    "dims": "1000,4000,4000,4000,200",
    "batch": 512,
    "J": 10,
    "n_list": "1,2,3,4,5,6,7,8,10,12,14,16",
    "out": "out",
}

GDCI_DEFAULTS = {
    "xi": 0.9998,
    "T": 5000,
    "runs": 32,
    "seed": 0,
    "p": 20,
    "components": 100,
    "out": "out",
}

MASK_STATS_DEFAULTS = {
    "dims": "8,16,16,4",
    "n": 4,
    "samples": 100000,
    "seed": 0,
    "out": "out",
}

GEN_DATA_DEFAULTS = {
    "classes": 10,
    "dim": 64,
    "per_class": 1200,
    "spread": 1.0,
    "seed": 7,
    "out": "out",
}


def _parse_dims(text: str) -> nn.ModelDims:
    try:
        widths = tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise ConfigError(f"bad dims {text!r}; expected comma-separated integers")
    return nn.ModelDims(widths)


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad integer list {text!r}")


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults <- config file <- explicit flags; reject unknown keys."""
    merged = dict(defaults)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            loaded = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {cfg_path}: {exc}")
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(cfg: dict, dims: nn.ModelDims) -> data.Dataset:
    if cfg["data"]:
        ds = data.load_csv(cfg["data"], seed=int(cfg["seed"]))
    else:
        ds = data.gen_blobs(
            int(cfg["blob_classes"]),
            dims.widths[0],
            int(cfg["blob_per_class"]),
            float(cfg["blob_spread"]),
            int(cfg["blob_seed"]),
        )
    if ds.n_features != dims.widths[0]:
        raise ConfigError(
            f"dataset has {ds.n_features} features but dims start with {dims.widths[0]}"
        )
    if ds.n_classes > dims.widths[-1]:
        raise ConfigError(
            f"dataset has {ds.n_classes} classes but dims end with {dims.widths[-1]}"
        )
    return ds


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    dims = _parse_dims(cfg["dims"])
    dataset = _load_dataset(cfg, dims)
    sync = cluster.SyncConfig(
        strategy=cfg["strategy"],
        n_sites=int(cfg["n"]),
        local_iters=int(cfg["J"]),
        batch=int(cfg["batch"]),
        eta=float(cfg["eta"]),
        epochs=int(cfg["epochs"]),
        seed=int(cfg["seed"]),
        mask_strategy=cfg["mask"],
        workers=cfg["workers"],
    )
    model = nn.init_model(dims, nn.ActivationKind.RELU, seed=int(cfg["seed"]))
    result = cluster.run(model, dataset, sync)
    out = _out_dir(cfg)
    rows = [
        {
            "epoch": m.epoch,
            "strategy": sync.strategy,
            "n": sync.n_sites,
            "J": sync.local_iters,
            "train_loss": m.train_loss,
            "test_acc": m.test_acc,
            "floats_to_workers": m.ledger["floats_to_workers"],
            "floats_to_coordinator": m.ledger["floats_to_coordinator"],
            "flops": m.ledger["flops_forward_backward"],
        }
        for m in result.epochs
    ]
    report.write_csv(
        out / "metrics.csv",
        cfg,
        [
            "epoch",
            "strategy",
            "n",
            "J",
            "train_loss",
            "test_acc",
            "floats_to_workers",
            "floats_to_coordinator",
            "flops",
        ],
        rows,
    )
    payload = json.loads(result.to_json())
    payload["resolved_cli_config"] = cfg
    report.write_json(out / "report.json", payload)
    report.render_training_curves(rows, out / "curves.png")
    print(f"wrote {out / 'metrics.csv'}, {out / 'report.json'}, {out / 'curves.png'}")
    return 0


def cmd_costmodel(args: argparse.Namespace) -> int:
    cfg = _resolve(args, COSTMODEL_DEFAULTS)
    dims = _parse_dims(cfg["dims"])
    n_list = _parse_int_list(str(cfg["n_list"]))
    rows = costmodel.emit_cost_sweep(dims, int(cfg["batch"]), int(cfg["J"]), n_list)
    out = _out_dir(cfg)
    report.write_csv(
        out / "cost_sweep.csv",
        cfg,
        ["n", "dp_traffic", "ist_traffic", "dp_flops", "ist_flops"],
        rows,
    )
    report.render_cost_sweep(rows, out / "cost_sweep.png")
    print(f"wrote {out / 'cost_sweep.csv'}, {out / 'cost_sweep.png'}")
    return 0


def cmd_gdci_verify(args: argparse.Namespace) -> int:
    cfg = _resolve(args, GDCI_DEFAULTS)
    result = gdci.verify(
        xi=float(cfg["xi"]),
        T=int(cfg["T"]),
        runs=int(cfg["runs"]),
        seed=int(cfg["seed"]),
        p=int(cfg["p"]),
        n_components=int(cfg["components"]),
    )
    result["resolved_cli_config"] = cfg
    out = _out_dir(cfg)
    report.write_json(out / "gdci_report.json", result)
    report.render_gdci(result, out / "gdci.png")
    theorem = result.get("theorem", {})
    if theorem.get("admissible"):
        status = "bound holds" if theorem["passed"] else "BOUND VIOLATED"
        print(
            f"theorem: {status} (observed {theorem['observed_min_grad_sq']:.6g} "
            f"<= rhs {theorem['bound_rhs']:.6g})"
        )
    else:
        print(f"theorem: inadmissible ({theorem.get('diagnostic', 'n/a')})")
    for name, prop in result["properties"].items():
        print(f"property {name}: {'pass' if prop['passed'] else 'FAIL'}")
    print(f"wrote {out / 'gdci_report.json'}, {out / 'gdci.png'}")
    return 0


def cmd_mask_stats(args: argparse.Namespace) -> int:
    cfg = _resolve(args, MASK_STATS_DEFAULTS)
    dims = _parse_dims(cfg["dims"])
    moments = masks.moment_report(
        dims, int(cfg["n"]), int(cfg["samples"]), int(cfg["seed"])
    )
    out = _out_dir(cfg)
    payload = json.loads(moments.to_json())
    payload["resolved_cli_config"] = cfg
    report.write_json(out / "mask_moments.json", payload)
    report.render_mask_marginals(moments, out / "mask_moments.png")
    print(f"wrote {out / 'mask_moments.json'}, {out / 'mask_moments.png'}")
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _resolve(args, GEN_DATA_DEFAULTS)
    dataset = data.gen_blobs(
        int(cfg["classes"]),
        int(cfg["dim"]),
        int(cfg["per_class"]),
        float(cfg["spread"]),
        int(cfg["seed"]),
    )
    out = _out_dir(cfg)
    data.save_csv(dataset, out / "dataset.csv")
    report.write_json(out / "dataset_meta.json", {"resolved_cli_config": cfg,
                                                  "samples": int(dataset.labels.size),
                                                  "classes": dataset.n_classes})
    print(f"wrote {out / 'dataset.csv'} ({dataset.labels.size} samples)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="istsim",
        description="Independent subnet training on a simulated cluster",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training strategy and emit metrics")
    p_train.add_argument("--strategy", choices=cluster.STRATEGIES)
    p_train.add_argument("--n", type=int)
    p_train.add_argument("--J", type=int, dest="J")
    p_train.add_argument("--batch", type=int)
    p_train.add_argument("--eta", type=float)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--dims", type=str)
    p_train.add_argument("--mask", choices=("iid", "balanced"))
    p_train.add_argument("--workers", choices=("sequential", "threads"))
    p_train.add_argument("--data", type=str, help="CSV dataset (default: blobs)")
    p_train.add_argument("--blob-classes", type=int, dest="blob_classes")
    p_train.add_argument("--blob-per-class", type=int, dest="blob_per_class")
    p_train.add_argument("--blob-spread", type=float, dest="blob_spread")
    p_train.add_argument("--blob-seed", type=int, dest="blob_seed")
    p_train.add_argument("--out", type=str)
    p_train.add_argument("--config", type=str)
    p_train.set_defaults(func=cmd_train)

    p_cost = sub.add_parser("costmodel", help="closed-form traffic/FLOP sweep")
    p_cost.add_argument("--dims", type=str)
    p_cost.add_argument("--batch", type=int)
    p_cost.add_argument("--J", type=int, dest="J")
    p_cost.add_argument("--n-list", type=str, dest="n_list")
    p_cost.add_argument("--out", type=str)
    p_cost.add_argument("--config", type=str)
    p_cost.set_defaults(func=cmd_costmodel)

    p_gdci = sub.add_parser(
        "gdci-verify", help="compressed-iterates operator and bound checks"
    )
    p_gdci.add_argument("--xi", type=float)
    p_gdci.add_argument("--T", type=int, dest="T")
    p_gdci.add_argument("--runs", type=int)
    p_gdci.add_argument("--seed", type=int)
    p_gdci.add_argument("--p", type=int)
    p_gdci.add_argument("--components", type=int)
    p_gdci.add_argument("--out", type=str)
    p_gdci.add_argument("--config", type=str)
    p_gdci.set_defaults(func=cmd_gdci_verify)

    p_mask = sub.add_parser("mask-stats", help="empirical mask moment report")
    p_mask.add_argument("--dims", type=str)
    p_mask.add_argument("--n", type=int)
    p_mask.add_argument("--samples", type=int)
    p_mask.add_argument("--seed", type=int)
    p_mask.add_argument("--out", type=str)
    p_mask.add_argument("--config", type=str)
    p_mask.set_defaults(func=cmd_mask_stats)

    p_gen = sub.add_parser("gen-data", help="write a synthetic blob dataset CSV")
    p_gen.add_argument("--classes", type=int)
    p_gen.add_argument("--dim", type=int)
    p_gen.add_argument("--per-class", type=int, dest="per_class")
    p_gen.add_argument("--spread", type=float)
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--out", type=str)
    p_gen.add_argument("--config", type=str)
    p_gen.set_defaults(func=cmd_gen_data)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigError,
        data.ParseError,
        cluster.DivergenceError,
        gdci.AdmissibilityError,
        nn.DimensionError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
