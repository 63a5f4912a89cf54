"""Metrics tables and figures.

Reads the JSON-lines metrics a run writes and renders one CSV table plus
PNG figures next to it.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from statistics import median

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from neuromoco.errors import FormatError, ValidationError  # noqa: E402

CSV_FIELDS = ("run", "phase", "epoch", "loss", "lr", "train_accuracy", "test_accuracy", "queue_filled")


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"metrics file not found: {path}")
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: not JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or "epoch" not in rec or "phase" not in rec:
                raise FormatError(f"{path}:{lineno}: record lacks 'phase'/'epoch'")
            records.append(rec)
    return records


def _run_name(path: Path) -> str:
    return f"{path.parent.name}/{path.stem}"


def write_table(runs: dict[str, list[dict]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for name, recs in runs.items():
            for r in recs:
                w.writerow({"run": name, **r})


def _plot_series(runs: dict[str, list[dict]], key: str, ylabel: str, path: Path) -> bool:
    fig, ax = plt.subplots(figsize=(5.0, 3.2), dpi=120)
    drawn = False
    for name, recs in runs.items():
        pts = [(r["epoch"], r[key]) for r in recs if r.get(key) is not None]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", ms=3, lw=1.2, label=name)
            drawn = True
    if drawn:
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7, frameon=False)
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)
    return drawn


def plot_ablation(rows, path) -> None:
    """Per-seed accuracies and the median for each ablation arm."""
    arms = list(dict.fromkeys(r.arm for r in rows))
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=120)
    for i, arm in enumerate(arms):
        accs = [100 * r.accuracy for r in rows if r.arm == arm]
        ax.bar(i, median(accs), width=0.6, color="#7a9cc6", alpha=0.8)
        ax.scatter([i] * len(accs), accs, s=18, color="0.3", zorder=3)
    ax.set_xticks(range(len(arms)), arms)
    ax.set_ylabel("test accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_report(metric_files, out_dir) -> list[Path]:
    """Write ``metrics.csv`` and loss / accuracy figures; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = {_run_name(Path(p)): read_metrics(p) for p in metric_files}
    written = [out / "metrics.csv"]
    write_table(runs, written[0])
    for key, label, fname in (("loss", "loss", "loss.png"),
                              ("test_accuracy", "test accuracy", "test_accuracy.png"),
                              ("lr", "learning rate", "lr.png")):
        if _plot_series(runs, key, label, out / fname):
            written.append(out / fname)
    return written
