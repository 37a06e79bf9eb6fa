"""Autoregressive next-step baseline.

One MPN call per frame predicts the next per-node displacement (velocity at
unit frame time).  Training perturbs the input positions with a Gaussian
random walk over the history window and corrects the target so the model
learns to pull noisy states back onto the data; rollouts integrate the
predictions, substitute the ground-truth collider and rebuild edges each step.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import mpn
from . import numerics as nx
from .errors import ConfigError
from .meshgraph import COLLIDER_RADIUS, N_KINDS, NodeKind, Scene
from .model import ContextSet, frame_edges, frame_features


@dataclass(frozen=True)
class MGNConfig:
    dim: int = 2
    latent: int = 64
    steps: int = 5
    decoder_hidden: int = 64
    history: int = 2
    noise_sigma: float = 0.001
    material_feature: bool = False  # oracle log-stiffness on every node
    force_flag: bool = False
    collider_velocity: bool = True
    radius: float = COLLIDER_RADIUS
    vel_scale: float = 1.0
    edge_scale: float = 1.0
    transitions_per_batch: int = 16
    ordered: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if self.history < 0:
            raise ConfigError("history must be non-negative")

    @property
    def mpn(self) -> mpn.MPNConfig:
        return mpn.MPNConfig(self.steps, self.latent, self.decoder_hidden, "mean", self.ordered)

    @property
    def node_width(self) -> int:
        return N_KINDS + self.history * self.dim + int(self.force_flag) + (self.dim if self.collider_velocity else 0) + int(self.material_feature)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MGNConfig":
        return cls(**d)


def random_walk_noise(rng: np.random.Generator, n: int, d: int, history: int, sigma: float) -> np.ndarray:
    """[history+1 x n x d] position noise for frames t-history..t (cumulative Gaussian steps)."""
    steps = rng.normal(0.0, sigma, size=(history + 1, n, d)) if sigma > 0 else np.zeros((history + 1, n, d))
    return np.cumsum(steps, axis=0)


class MGN:
    kind = "mgn"

    def __init__(self, cfg: MGNConfig, seed: int = 0, store: nx.ParamStore | None = None):
        self.cfg = cfg
        self.calls: Counter = Counter()
        if store is None:
            store = nx.ParamStore(np.dtype(cfg.dtype))
            rng = np.random.default_rng(seed)
            mpn.init_mpn(store, "step", cfg.node_width, cfg.dim + 1, cfg.dim, cfg.mpn, rng)
        self.params = store

    def features(self, scene: Scene, pos: np.ndarray, t: int, next_collider: np.ndarray | None = None):
        """Node features, senders, receivers, edge features of frame ``t``."""
        cfg = self.cfg
        extra = []
        if cfg.collider_velocity:
            vel = np.zeros_like(pos[t])
            coll = scene.kinds == NodeKind.COLLIDER
            nxt = pos[t + 1] if next_collider is None else next_collider
            vel[coll] = nxt[coll] - pos[t][coll]
            extra.append(cfg.vel_scale * vel)
        if cfg.material_feature:
            extra.append(np.full((scene.n_nodes, 1), np.log(scene.material)))
        x = frame_features(scene, pos, t, cfg.history, cfg.vel_scale, cfg.force_flag, extra)
        s, r, e = frame_edges(scene, pos[t], cfg.radius, cfg.edge_scale)
        return x, s, r, e

    @mpn.respects_order
    def step(self, graphs) -> nx.Tensor:
        """One batched model call over a list of frame graphs: scaled displacement per node."""
        dt = self.params.dtype
        n = [g[0].shape[0] for g in graphs]
        offsets = np.cumsum([0] + n[:-1])
        x = np.concatenate([g[0] for g in graphs]).astype(dt)
        s = np.concatenate([g[1] + o for g, o in zip(graphs, offsets)])
        r = np.concatenate([g[2] + o for g, o in zip(graphs, offsets)])
        e = np.concatenate([g[3] for g in graphs]).astype(dt)
        h = mpn.run_tensors(self.params, "step", nx.Tensor(x), nx.Tensor(e), s, r, self.cfg.mpn)
        return mpn.decode(self.params, "step", h)

    # ------------------------------------------------------------ training

    def noisy_transition(self, scene: Scene, t: int, rng: np.random.Generator | None):
        """Inputs of frame t with random-walk noise and the corrected target displacement."""
        cfg = self.cfg
        pos = scene.positions
        lo = max(t - cfg.history, 0)
        window = pos[lo : t + 2].copy()
        mask = scene.moving_mask()
        if rng is not None and cfg.noise_sigma > 0:
            noise = random_walk_noise(rng, scene.n_nodes, scene.dim, t - lo, cfg.noise_sigma)
            window[: t - lo + 1, mask] += noise[:, mask]
        g = self.features(scene, window, t - lo)
        target = window[t - lo + 1] - window[t - lo]
        return g, target

    def loss(self, scene: Scene, rng: np.random.Generator | None = None, frames=None) -> nx.Tensor:
        """Mean squared error of scaled displacements over free mesh nodes."""
        cfg = self.cfg
        if frames is None:
            frames = np.arange(scene.n_steps - 1)
            if rng is not None and frames.size > cfg.transitions_per_batch:
                frames = np.sort(rng.choice(frames, cfg.transitions_per_batch, replace=False))
        graphs, targets = [], []
        for t in frames:
            g, tgt = self.noisy_transition(scene, int(t), rng)
            graphs.append(g)
            targets.append(tgt)
        pred = self.step(graphs)
        mask = np.tile(scene.moving_mask(), len(frames))
        rows = np.flatnonzero(mask)
        target = cfg.vel_scale * np.concatenate(targets)[rows]
        diff = nx.gather_rows(pred, rows) - target.astype(self.params.dtype)
        return nx.total(nx.square(diff)) * (1.0 / diff.data.size)

    # ------------------------------------------------------------ rollout

    def rollout(self, ctx: ContextSet) -> np.ndarray:
        """Positions [H x N x d] for frames anchor..T-1; NaN-filled after a divergence."""
        scene, cfg = ctx.scene, self.cfg
        pos = ctx.positions.copy()
        mask = scene.moving_mask()
        coll = scene.kinds == NodeKind.COLLIDER
        fixed = ~(mask | coll)
        self.diverged = False
        for t in range(ctx.anchor, ctx.n_steps - 1):
            g = self.features(scene, pos, t, next_collider=ctx.positions[t + 1])
            out = self.step([g]).data.astype(np.float64) / cfg.vel_scale
            self.calls["simulator"] += 1
            nxt = pos[t].copy()
            nxt[mask] += out[mask]
            nxt[coll] = ctx.positions[t + 1, coll]
            nxt[fixed] = pos[t, fixed]
            if not np.all(np.isfinite(nxt)):
                self.diverged = True
                pos[t + 1 :, ~coll] = np.nan
                break
            pos[t + 1] = nxt
        return pos[ctx.anchor :]

    # ------------------------------------------------------------ persistence

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "model.json").write_text(json.dumps({"kind": self.kind, "config": self.cfg.to_dict()}, indent=1))
        self.params.save(out / "params.bin")
        return out

    @classmethod
    def load(cls, path) -> "MGN":
        path = Path(path)
        meta = json.loads((path / "model.json").read_text())
        cfg = MGNConfig.from_dict(meta["config"])
        return cls(cfg, store=nx.ParamStore.load(path / "params.bin", dtype=np.dtype(cfg.dtype)))
