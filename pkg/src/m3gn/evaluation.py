"""Rollout metrics, bootstrap intervals, runtime benchmarks and latent export.

Errors are squared position errors in normalised world units, taken over
free mesh nodes and all frames strictly after the anchor.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .meshgraph import Scene
from .model import ContextSet

CONTEXT_SIZES = (2, 5, 10, 15)


def _window(preds, truths, anchor: int, mask=None):
    p, t = np.asarray(preds, dtype=np.float64), np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"prediction shape {p.shape} != truth shape {t.shape}")
    p, t = p[..., anchor + 1 :, :, :], t[..., anchor + 1 :, :, :]
    if mask is not None:
        p, t = p[..., mask, :], t[..., mask, :]
    return p, t


def per_timestep_mse(preds, truths, anchor: int, mask=None) -> np.ndarray:
    """MSE per frame after ``anchor``; inputs are [T x N x d] or [B x T x N x d]."""
    p, t = _window(preds, truths, anchor, mask)
    err = ((p - t) ** 2).mean(axis=(-1, -2))
    return err if err.ndim == 1 else err.mean(axis=0)


def full_rollout_mse(preds, truths, anchor: int, mask=None) -> float:
    p, t = _window(preds, truths, anchor, mask)
    return float(np.mean((p - t) ** 2))


def bootstrap_ci(values, n_resamples: int = 1000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ContractError("bootstrap needs at least two values")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, v.size, size=(n_resamples, v.size))
    means = v[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    # the quantiles of a degenerate sample can disagree in the last ulp
    m = v.mean()
    return float(min(lo, m)), float(max(hi, m))


@dataclass
class ContextResult:
    n_context: int
    mse: float
    ci: tuple[float, float]
    per_traj: list[float]
    per_timestep: list[float]
    calls_per_rollout: float
    seconds_per_rollout: float
    diverged: int


@dataclass
class EvalReport:
    model: str
    split: str
    results: list[ContextResult] = field(default_factory=list)

    def by_context(self, n: int) -> ContextResult:
        for r in self.results:
            if r.n_context == n:
                return r
        raise KeyError(n)

    def to_dict(self) -> dict:
        return {"model": self.model, "split": self.split, "results": [asdict(r) for r in self.results]}


def rollout_scene(model, scene: Scene, n_context: int):
    ctx = ContextSet(scene, n_context)
    model.calls.clear()
    t0 = time.perf_counter()
    pred = model.rollout(ctx)
    dt = time.perf_counter() - t0
    full = scene.positions.copy()
    full[ctx.anchor :] = pred
    return full, sum(model.calls.values()), dt


def evaluate(model, scenes: list[Scene], context_sizes=CONTEXT_SIZES, split: str = "test", seed: int = 0, n_resamples: int = 1000) -> EvalReport:
    report = EvalReport(getattr(model, "kind", "model"), split)
    for n in context_sizes:
        usable = [s for s in scenes if n < s.n_steps]
        errs, steps, calls, secs, diverged = [], [], [], [], 0
        for sc in usable:
            full, c, dt = rollout_scene(model, sc, n)
            calls.append(c)
            secs.append(dt)
            if not np.all(np.isfinite(full)):
                diverged += 1
                continue
            mask = sc.moving_mask()
            errs.append(full_rollout_mse(full, sc.positions, n - 1, mask))
            steps.append(per_timestep_mse(full, sc.positions, n - 1, mask))
        if len(errs) >= 2:
            ci = bootstrap_ci(errs, n_resamples, seed=seed)
        else:
            ci = (float("nan"), float("nan"))
        report.results.append(
            ContextResult(
                n,
                float(np.mean(errs)) if errs else float("nan"),
                ci,
                [float(e) for e in errs],
                [float(x) for x in np.mean(steps, axis=0)] if steps else [],
                float(np.mean(calls)) if calls else 0.0,
                float(np.mean(secs)) if secs else 0.0,
                diverged,
            )
        )
    return report


def write_report(report: EvalReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / f"eval_{report.model}_{report.split}.json", "csv": out / f"eval_{report.model}_{report.split}.csv"}
    paths["json"].write_text(json.dumps(report.to_dict(), indent=1))
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "split", "context", "mse", "ci_lo", "ci_hi", "calls", "seconds", "diverged"])
        for r in report.results:
            w.writerow([report.model, report.split, r.n_context, r.mse, r.ci[0], r.ci[1], r.calls_per_rollout, r.seconds_per_rollout, r.diverged])
    steps = out / f"per_timestep_{report.model}_{report.split}.csv"
    with open(steps, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["context", "step", "mse"])
        for r in report.results:
            for i, v in enumerate(r.per_timestep, start=1):
                w.writerow([r.n_context, i, v])
    paths["steps"] = steps
    return paths


# ---------------------------------------------------------------- runtime


def bench(models: dict, scene: Scene, n_context: int, horizons, repeats: int = 10) -> list[dict]:
    """Median wall-clock of ``repeats`` rollouts per model and horizon.

    The horizon is the total trajectory length including the context, so a
    step model makes ``horizon - n_context`` calls.
    """
    rows = []
    for h in horizons:
        if not n_context < h <= scene.n_steps:
            raise ContractError(f"need n_context={n_context} < horizon={h} <= {scene.n_steps} frames")
        cut = Scene(scene.positions[:h], scene.kinds, scene.edges, scene.force_flags, scene.material)
        for name, model in models.items():
            times, calls = [], 0
            for _ in range(repeats):
                _, calls, dt = rollout_scene(model, cut, n_context)
                times.append(dt)
            rows.append({"model": name, "horizon": int(h), "n_context": int(n_context), "calls": int(calls), "median_seconds": float(np.median(times))})
    return rows


def write_bench(rows: list[dict], out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "bench.json", "csv": out / "bench.csv"}
    paths["json"].write_text(json.dumps(rows, indent=1))
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["model", "horizon", "n_context", "calls", "median_seconds"])
        w.writeheader()
        w.writerows(rows)
    return paths


# ---------------------------------------------------------------- latents


def dump_latents(model, scenes: list[Scene], n_context: int, path, ids=None) -> Path:
    """One CSV row per (trajectory, node): id, material, node index, z_v."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = list(range(len(scenes))) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "material", "node"] + [f"z{i}" for i in range(model.cfg.latent_task)])
        for tid, sc in zip(ids, scenes):
            z = model.latent(ContextSet(sc, n_context))
            for v, row in enumerate(z):
                w.writerow([tid, sc.material, v] + [f"{x:.6g}" for x in row])
    return path
