"""Delimited output and figure rendering for the CLI report paths.

Every CSV starts with a versioned comment line embedding the resolved run
configuration, so any output file identifies the run that produced it.
Figures are rendered headlessly next to the delimited files; PNG output from
the Agg backend carries no timestamps, keeping repeated runs byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

CSV_SCHEMA_VERSION = "istsim-csv-v1"


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value) if not value.is_integer() else str(int(value))
    return str(value)


def write_csv(path: str | Path, config: dict, fieldnames: list[str], rows: list[dict]) -> None:
    path = Path(path)
    lines = [f"# {CSV_SCHEMA_VERSION} {json.dumps(config, sort_keys=True)}"]
    lines.append(",".join(fieldnames))
    for row in rows:
        lines.append(",".join(_fmt(row[k]) for k in fieldnames))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def render_training_curves(rows: list[dict], path: str | Path) -> None:
    """Loss and accuracy per epoch, one figure next to the metrics CSV."""
    epochs = [r["epoch"] for r in rows]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5), constrained_layout=True)
    ax_loss.plot(epochs, [r["train_loss"] for r in rows], marker="o", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.grid(True, alpha=0.3)
    ax_loss.legend()
    ax_acc.plot(epochs, [r["test_acc"] for r in rows], marker="o", color="tab:green")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("test accuracy")
    ax_acc.set_ylim(0.0, 1.0)
    ax_acc.grid(True, alpha=0.3)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_cost_sweep(rows: list[dict], path: str | Path) -> None:
    """Traffic and FLOPs per step vs cluster size, log-scaled."""
    ns = [r["n"] for r in rows]
    fig, (ax_t, ax_f) = plt.subplots(1, 2, figsize=(9, 3.5), constrained_layout=True)
    ax_t.plot(ns, [r["dp_traffic"] for r in rows], marker="o", label="data parallel")
    ax_t.plot(ns, [r["ist_traffic"] for r in rows], marker="s", label="subnet training")
    ax_t.set_xlabel("cluster size n")
    ax_t.set_ylabel("floats per gradient step")
    ax_t.set_yscale("log")
    ax_t.grid(True, alpha=0.3)
    ax_t.legend()
    ax_f.plot(ns, [r["dp_flops"] for r in rows], marker="o", label="data parallel")
    ax_f.plot(ns, [r["ist_flops"] for r in rows], marker="s", label="subnet training")
    ax_f.set_xlabel("cluster size n")
    ax_f.set_ylabel("FLOPs per gradient step")
    ax_f.set_yscale("log")
    ax_f.grid(True, alpha=0.3)
    ax_f.legend()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_gdci(report: dict, path: str | Path) -> None:
    """Squared gradient norm trace with the bound line when admissible."""
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    trace = report.get("mean_grad_sq") or report.get("trace_grad_sq")
    if trace:
        ax.plot(range(len(trace)), trace, lw=0.8, label="||grad f(x_t)||^2")
        ax.set_yscale("log")
    theorem = report.get("theorem", {})
    if theorem.get("admissible"):
        ax.axhline(theorem["bound_rhs"], color="tab:red", ls="--", label="bound RHS")
    ax.set_xlabel("iteration t")
    ax.set_ylabel("squared gradient norm")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_mask_marginals(moments, path: str | Path) -> None:
    """Empirical site marginals per hidden layer against the 1/n target."""
    layers = sorted(moments.marginals)
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    width = 0.8 / max(1, len(layers))
    for k, layer in enumerate(layers):
        vals = moments.marginals[layer]
        xs = [s + k * width for s in range(moments.n_sites)]
        ax.bar(xs, vals, width=width, label=f"hidden layer {layer}")
    ax.axhline(1.0 / moments.n_sites, color="k", ls="--", lw=1, label="1/n")
    ax.set_xlabel("site")
    ax.set_ylabel("empirical marginal")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.savefig(path, dpi=150)
    plt.close(fig)
