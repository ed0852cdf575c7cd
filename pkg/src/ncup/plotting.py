"""Report figures written straight to PNG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .train import EpochLog  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_training_curve(log: list[EpochLog], path) -> None:
    """Training loss and validation EPE per epoch, bilinear as a reference line."""
    fig, (ax_loss, ax_epe) = plt.subplots(1, 2, figsize=(9, 3.5))
    epochs = [e.epoch for e in log]
    ax_loss.plot(epochs, [e.train_loss for e in log], marker="o", color="tab:blue")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_epe.plot(epochs, [e.val_epe_ncup for e in log], marker="o", label="ncup")
    ax_epe.plot(epochs, [e.val_epe_bilinear for e in log], linestyle="--", color="gray", label="bilinear")
    ax_epe.set_xlabel("epoch")
    ax_epe.set_ylabel("validation EPE")
    ax_epe.legend(frameon=False)
    for ax in (ax_loss, ax_epe):
        ax.spines[["top", "right"]].set_visible(False)
    _save(fig, path)


def plot_epe_bars(names: list[str], ncup: list[float], bilinear: list[float], path, title: str = "") -> None:
    """Grouped bars of NCUP against bilinear EPE, one group per row."""
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(names) + 2), 3.5))
    xs = range(len(names))
    ax.bar([x - 0.2 for x in xs], ncup, width=0.4, label="ncup")
    ax.bar([x + 0.2 for x in xs], bilinear, width=0.4, color="lightgray", label="bilinear")
    ax.set_xticks(list(xs), names, rotation=30, ha="right")
    ax.set_ylabel("EPE")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    ax.spines[["top", "right"]].set_visible(False)
    _save(fig, path)
