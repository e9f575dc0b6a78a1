"""Metrics CSV persistence and static plots."""

import csv
from pathlib import Path

import numpy as np

from neq.train import MetricsRecord

METRICS_HEADER = [
    "epoch", "bprop_flops_mean", "bprop_flops_std", "updated_neurons",
    "updated_fraction", "train_loss", "test_accuracy", "lr",
]


def _num(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_metrics(log, path):
    """Write the deterministic metrics CSV (no wall-clock column)."""
    if not log:
        raise ValueError("metrics log is empty")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in log:
            w.writerow([_num(getattr(r, k)) for k in METRICS_HEADER])


def write_timing(log, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "wall_seconds"])
        for r in log:
            w.writerow([r.epoch, f"{r.wall_seconds:.6f}"])


def read_metrics(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            out.append(MetricsRecord(
                epoch=int(row["epoch"]),
                bprop_flops_mean=float(row["bprop_flops_mean"]),
                bprop_flops_std=float(row["bprop_flops_std"]),
                updated_neurons=int(row["updated_neurons"]),
                updated_fraction=float(row["updated_fraction"]),
                train_loss=float(row["train_loss"]),
                test_accuracy=float(row["test_accuracy"]),
                lr=float(row["lr"]),
            ))
    return out


def milestone_epochs(log):
    """Epochs after which the learning rate changed."""
    return [a.epoch for a, b in zip(log, log[1:]) if b.lr != a.lr]


def _window_mean(log, first, last):
    vals = [r.updated_fraction for r in log if first <= r.epoch <= last]
    if not vals:
        raise ValueError(f"no epochs in [{first}, {last}]")
    return float(np.mean(vals))


def trend_windows(log):
    """Mean updated fraction over epochs 2..10% of the run and over the final 10%."""
    n = len(log)
    tenth = max(1, int(round(0.1 * n)))
    early = _window_mean(log, 2, max(2, tenth))
    late = _window_mean(log, n - tenth + 1, n)
    return early, late


def fraction_changes_after(log, milestone, window=3):
    """Whether the updated fraction moves within ``window`` epochs after ``milestone``.

    Compares epochs ``milestone + 1 .. milestone + window`` against the fraction
    at ``milestone`` itself (the last epoch at the old learning rate).
    """
    by_epoch = {r.epoch: r.updated_fraction for r in log}
    if milestone not in by_epoch:
        raise ValueError(f"milestone {milestone} is outside the log")
    ref = by_epoch[milestone]
    return any(by_epoch[e] != ref for e in range(milestone + 1, milestone + window + 1)
               if e in by_epoch)


def emit_plots(log, path, milestones=None, title=None):
    """Three-panel vector figure: backward FLOPs, updated fraction, accuracy vs epoch."""
    if not log:
        raise ValueError("metrics log is empty")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    epochs = [r.epoch for r in log]
    if milestones is None:
        milestones = milestone_epochs(log)
    matplotlib.rcParams["svg.hashsalt"] = "neq"
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    panels = [
        ([r.bprop_flops_mean for r in log], "Backward FLOPs / iteration", "tab:orange"),
        ([r.updated_fraction for r in log], "Updated neurons (fraction)", "tab:green"),
        ([100 * r.test_accuracy for r in log], "Test accuracy (%)", "tab:red"),
    ]
    for ax, (values, label, color) in zip(axes, panels):
        ax.plot(epochs, values, color=color, lw=1.5)
        for m in milestones:
            ax.axvline(m + 0.5, color="0.6", ls="--", lw=0.8)
        ax.set_xlabel("epoch")
        ax.set_title(label, fontsize=10)
        ax.grid(alpha=0.3)
    axes[1].set_ylim(-0.02, 1.02)
    if title:
        fig.suptitle(title, fontsize=11)
    fig.tight_layout()
    fmt = path.suffix.lstrip(".") or "svg"
    fig.savefig(path, format=fmt, metadata={"Date": None} if fmt == "svg" else None)
    plt.close(fig)
    return path
