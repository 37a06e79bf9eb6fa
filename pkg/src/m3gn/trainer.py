"""Training loop shared by the meta-learned simulator and the step baseline.

Every batch is one trajectory.  For the meta model a context size is drawn
uniformly from [T_min, T_max] per batch; the baseline trains on noisy
one-step transitions of the same trajectory.  Parameters are updated with
Adam.  Validation runs full rollouts at context size T_min and the best
checkpoint is kept in memory (and on disk when an output directory is given).
"""

from __future__ import annotations

import csv
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, NumericError
from .meshgraph import Scene
from .model import ContextSet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 5e-4
    epochs: int = 10
    t_min: int = 2
    t_max: int = 15
    seed: int = 0
    eval_every: int = 1
    max_val: int | None = None  # cap on validation trajectories per evaluation
    clip_norm: float | None = 10.0
    wall_clock: float | None = None  # seconds; stops after the current epoch
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def check(self, n_steps: int) -> None:
        if not 2 <= self.t_min <= self.t_max < n_steps:
            raise ConfigError(f"need 2 <= t_min={self.t_min} <= t_max={self.t_max} < T={n_steps}")
        if self.lr <= 0 or self.epochs < 0:
            raise ConfigError("lr must be positive and epochs non-negative")


def compute_loss(pred, truth, mask=None) -> float:
    """Mean of squared differences over time, (masked) nodes and dims."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if mask is not None:
        pred, truth = pred[:, mask], truth[:, mask]
    return float(np.mean((pred - truth) ** 2))


class Adam:
    def __init__(self, params: nx.ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, clip_norm: float | None = None) -> float:
        grads = self.params.grads
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
        scale = 1.0 if clip_norm is None or norm <= clip_norm else clip_norm / norm
        self.t += 1
        c1, c2 = 1.0 - self.b1**self.t, 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = grads[name] * scale
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            p.data -= (self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)).astype(p.data.dtype)
        return norm

    def state(self) -> dict:
        return {"m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}, "t": self.t}

    def load_state(self, s: dict) -> None:
        self.m = {k: v.copy() for k, v in s["m"].items()}
        self.v = {k: v.copy() for k, v in s["v"].items()}
        self.t = s["t"]


@dataclass
class TrainResult:
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    context_sizes: Counter = field(default_factory=Counter)
    lr_halved: bool = False
    seconds: float = 0.0


def batch_loss(model, scene: Scene, n_context: int, rng: np.random.Generator) -> nx.Tensor:
    if model.kind == "m3gn":
        return model.loss(ContextSet(scene, n_context))
    return model.loss(scene, rng)


def validation_mse(model, scenes: list[Scene], n_context: int) -> float:
    """Mean full-rollout MSE over free mesh nodes, frames after the anchor."""
    errs = []
    for sc in scenes:
        ctx = ContextSet(sc, n_context)
        pred = model.rollout(ctx)
        truth = sc.positions[ctx.anchor :]
        err = compute_loss(pred[1:], truth[1:], sc.moving_mask())
        errs.append(err if np.isfinite(err) else np.inf)
    return float(np.mean(errs)) if errs else float("nan")


def train(model, train_scenes: list[Scene], val_scenes: list[Scene], cfg: TrainConfig, out_dir=None) -> TrainResult:
    if not train_scenes:
        raise ContractError("empty training split")
    cfg.check(min(s.n_steps for s in train_scenes))
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    res = TrainResult()
    best_state = model.params.state()
    last_good = (model.params.state(), opt.state())
    val = val_scenes[: cfg.max_val] if cfg.max_val else val_scenes
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_scenes))
        losses = []
        for idx in order:
            n_context = int(rng.integers(cfg.t_min, cfg.t_max + 1))
            res.context_sizes[n_context] += 1
            model.params.zero_grad()
            with nx.Tape() as tape:
                loss = batch_loss(model, train_scenes[idx], n_context, rng)
            value = loss.item()
            if not np.isfinite(value):
                if res.lr_halved:
                    raise NumericError(f"non-finite loss at epoch {epoch} after halving the learning rate")
                log.warning("non-finite loss at epoch %d; restoring last checkpoint and halving lr", epoch)
                tape.clear()
                model.params.load_state(last_good[0])
                opt.load_state(last_good[1])
                opt.lr *= 0.5
                res.lr_halved = True
                continue
            nx.backward(tape, loss, model.params)
            opt.step(cfg.clip_norm)
            losses.append(value)
        last_good = (model.params.state(), opt.state())
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"), "val_mse": float("nan")}
        if val and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            row["val_mse"] = validation_mse(model, val, cfg.t_min)
            if row["val_mse"] < res.best_val:
                res.best_val, res.best_epoch = row["val_mse"], epoch
                best_state = model.params.state()
        res.curve.append(row)
        log.info("epoch %d train %.4g val %.4g", epoch, row["train_loss"], row["val_mse"])
        if cfg.wall_clock is not None and time.perf_counter() - t0 > cfg.wall_clock:
            break
    if val and res.best_epoch >= 0:
        model.params.load_state(best_state)
    res.seconds = time.perf_counter() - t0
    if out_dir is not None:
        out = Path(out_dir)
        model.save(out)
        write_curve(out / "loss_curve.csv", res.curve)
    return res


def write_curve(path, curve: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_mse"])
        w.writeheader()
        for row in curve:
            w.writerow(row)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
