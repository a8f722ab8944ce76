"""Figure rendering for reports; always uses the non-interactive Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def training_curves(runs: dict[str, list[dict]], path) -> None:
    """Loss and validation mAP50 per epoch, one line per named run."""
    fig, (ax_l, ax_m) = plt.subplots(1, 2, figsize=(9, 3.5))
    for label, history in runs.items():
        epochs = [r["epoch"] for r in history]
        ax_l.plot(epochs, [r["train_loss"] for r in history], label=label)
        ax_m.plot(epochs, [r["map50"] if r["map50"] is not None else float("nan") for r in history], label=label)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("training loss")
    ax_m.set_xlabel("epoch")
    ax_m.set_ylabel("validation mAP50")
    ax_m.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def firing_rates(rates: dict[str, float], path, title: str = "layer firing rates") -> None:
    fig, ax = plt.subplots(figsize=(max(6, 0.25 * len(rates)), 3.5))
    ax.bar(range(len(rates)), list(rates.values()))
    ax.set_xticks(range(len(rates)))
    ax.set_xticklabels(list(rates), rotation=90, fontsize=6)
    ax.set_ylabel("mean firing rate")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def sweep_plot(axis: str, values, metrics: dict[str, list[float]], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = [str(v) for v in values]
    for name, ys in metrics.items():
        ax.plot(range(len(values)), ys, marker="o", label=name)
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels)
    ax.set_xlabel(axis)
    ax.set_ylabel("metric")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
