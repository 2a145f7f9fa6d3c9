"""Training report rendering: structured JSON, delimited losses, loss figure.

All outputs are byte-deterministic for a given report: JSON is dumped with
sorted keys, the CSV is plain repr floats, and the PNG strips the software
metadata tag.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .toy_pipeline import TrainReport

REPORT_FORMAT_VERSION = "1"


def write_report(report: TrainReport, out_dir: str | Path, figures: bool = True) -> dict[str, Path]:
    """Write report.json, losses.csv and (optionally) loss_curve.png into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    report_path = out / "report.json"
    doc = {"format_version": REPORT_FORMAT_VERSION, **report.to_dict()}
    report_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["report"] = report_path

    csv_path = out / "losses.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_nll"])
        for epoch, nll in enumerate(report.epoch_mean_nll):
            writer.writerow([epoch, repr(nll)])
    paths["losses"] = csv_path

    if figures:
        paths["figure"] = _render_loss_curve(report, out / "loss_curve.png")
    return paths


def _render_loss_curve(report: TrainReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = range(len(report.epoch_mean_nll))
    ax.plot(epochs, report.epoch_mean_nll, marker="o", markersize=3, label="train NLL (eval mode)")
    ax.axhline(report.initial_nll, color="gray", linestyle=":", linewidth=1, label="initial")
    ax.axhline(0.5 * report.initial_nll, color="tab:red", linestyle="--", linewidth=1,
               label="half initial")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean NLL")
    ax.set_title(f"training loss (config {report.config_hash}, seed {report.seed})")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
