"""Figures written next to the CSV/JSON reports (PNG, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curve(curve: list[dict], path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ep = [r["epoch"] for r in curve]
        ax.semilogy(ep, [r["train_loss"] for r in curve], label="train")
        val = [(r["epoch"], r["val_mse"]) for r in curve if r["val_mse"] == r["val_mse"]]
        if val:
            ax.semilogy(*zip(*val), "o-", ms=3, label="val rollout MSE")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        return _save(fig, path)


def plot_context_sweep(reports, path) -> Path:
    """Full-rollout MSE with bootstrap interval against context size, one line per report."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for rep in reports:
            xs = [r.n_context for r in rep.results]
            ys = [r.mse for r in rep.results]
            lo = [r.mse - r.ci[0] for r in rep.results]
            hi = [r.ci[1] - r.mse for r in rep.results]
            ax.errorbar(xs, ys, yerr=[lo, hi], marker="o", ms=3, capsize=2, label=f"{rep.model} ({rep.split})")
        ax.set_yscale("log")
        ax.set_xlabel("context size")
        ax.set_ylabel("full-rollout MSE")
        ax.legend()
        return _save(fig, path)


def plot_per_timestep(reports, n_context: int, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for rep in reports:
            try:
                r = rep.by_context(n_context)
            except KeyError:
                continue
            ax.semilogy(range(1, len(r.per_timestep) + 1), r.per_timestep, label=rep.model)
        ax.set_xlabel("steps after anchor")
        ax.set_ylabel("MSE")
        ax.set_title(f"context size {n_context}")
        ax.legend()
        return _save(fig, path)


def plot_bench(rows: list[dict], path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for name in sorted({r["model"] for r in rows}):
            sel = [r for r in rows if r["model"] == name]
            ax.loglog([r["horizon"] for r in sel], [r["median_seconds"] for r in sel], "o-", ms=3, label=name)
        ax.set_xlabel("horizon (frames)")
        ax.set_ylabel("median rollout time [s]")
        ax.legend()
        return _save(fig, path)


def plot_rollout(truth, pred, anchor: int, path, frames=None) -> Path:
    """Node positions of a few frames, ground truth against prediction (2-D scenes)."""
    T = truth.shape[0]
    frames = frames or sorted({anchor, (anchor + T - 1) // 2, T - 1})
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(frames), figsize=(3 * len(frames), 3), sharex=True, sharey=True)
        for ax, f in zip(list(axes) if len(frames) > 1 else [axes], frames):
            ax.scatter(truth[f, :, 0], truth[f, :, 1], s=6, c="k", label="truth")
            ax.scatter(pred[f, :, 0], pred[f, :, 1], s=6, marker="x", c="C3", label="prediction")
            ax.set_title(f"frame {f}")
            ax.set_aspect("equal")
            ax.grid(False)
        ax.legend(loc="lower right", fontsize=7)
        return _save(fig, path)
