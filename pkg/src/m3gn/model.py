"""Meta-learned graph simulator that emits whole trajectories in one call.

A context MPN encodes every observed transition (frame graph plus the
displacement to the next frame) into per-node latents, which are max-pooled
over time into a task descriptor z_v.  A simulator MPN reads the anchor
frame together with z_v and predicts per-node ProDMP weights (relative goal);
a small MLP on the mean of z_v predicts one global time constant tau.  The
trajectory after the anchor is then a table lookup:

    y(t) = anchor + Phi(t / tau)^T w + tau * v_anchor * Y2(t / tau)

where Phi are the tau=1 position basis functions and Y2(s) = s exp(-alpha s / 2)
is the homogeneous solution carrying the anchor velocity.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import mpn
from . import numerics as nx
from . import prodmp
from .errors import ConfigError, ContractError
from .meshgraph import COLLIDER_RADIUS, N_KINDS, NodeKind, Scene, encode_edge_features, scene_edges, velocity_history


@dataclass
class ContextSet:
    """Observed prefix of a scene plus the known collider future.

    Mesh positions after the anchor are masked with NaN so nothing
    downstream can peek at them.
    """

    scene: Scene
    n_context: int
    positions: np.ndarray = field(init=False)

    def __post_init__(self):
        T = self.scene.n_steps
        if not 2 <= self.n_context < T:
            raise ContractError(f"context size {self.n_context} must satisfy 2 <= T^c < T={T}")
        pos = self.scene.positions.astype(np.float64, copy=True)
        body = self.scene.kinds != NodeKind.COLLIDER
        pos[self.n_context :, body] = np.nan
        self.positions = pos

    @property
    def anchor(self) -> int:
        # 0-based frame index of the last context frame
        return self.n_context - 1

    @property
    def n_steps(self) -> int:
        return self.scene.n_steps

    @property
    def horizon(self) -> int:
        return self.n_steps - self.n_context


# ---------------------------------------------------------------- shared feature helpers


def frame_features(scene: Scene, positions: np.ndarray, t: int, history: int, vel_scale: float, force_flag: bool, extra=()) -> np.ndarray:
    blocks = [np.eye(N_KINDS)[scene.kinds], vel_scale * velocity_history(positions, t, history)]
    if force_flag:
        blocks.append(scene.force_flags.reshape(-1, 1).astype(np.float64))
    blocks.extend(extra)
    return np.concatenate(blocks, axis=1)


def frame_edges(scene: Scene, pos: np.ndarray, radius: float, edge_scale: float):
    senders, receivers = scene_edges(scene, pos, radius)
    return senders, receivers, edge_scale * encode_edge_features(pos, senders, receivers)


def collider_target(scene: Scene, positions: np.ndarray, t: int) -> np.ndarray:
    off = positions[-1] - positions[t]
    off[scene.kinds != NodeKind.COLLIDER] = 0.0
    return off


# ---------------------------------------------------------------- model


@dataclass(frozen=True)
class M3GNConfig:
    dim: int = 2
    latent: int = 64
    latent_task: int = 32
    steps: int = 5
    decoder_hidden: int = 64
    tau_hidden: int = 32
    history: int = 1
    n_weights: int = 30
    alpha: float = 25.0
    alpha_x: float = 3.0
    tau_range: tuple = (0.3, 3.0)
    frame_dt: float = 1.0 / 39.0  # canonical time per frame (full block trajectory = 1)
    table_spacing: float = 0.005
    table_quad_resolution: int = 4000
    collider_target: bool = True
    force_flag: bool = False
    radius: float = COLLIDER_RADIUS
    vel_scale: float = 1.0  # multiplies per-frame displacements in the inputs
    edge_scale: float = 1.0
    head_init_scale: float = 0.01
    ordered: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.history < 1:
            raise ConfigError("the simulator needs the anchor velocity (history >= 1)")
        if self.dim not in (2, 3):
            raise ConfigError(f"dim must be 2 or 3, got {self.dim}")

    @property
    def mpn(self) -> mpn.MPNConfig:
        return mpn.MPNConfig(self.steps, self.latent, self.decoder_hidden, "mean", self.ordered)

    @property
    def prodmp(self) -> prodmp.ProDMPConfig:
        return prodmp.ProDMPConfig(self.alpha, self.n_weights, self.alpha_x, tuple(self.tau_range), self.table_quad_resolution)

    @property
    def base_width(self) -> int:
        return N_KINDS + self.history * self.dim + int(self.force_flag) + (self.dim if self.collider_target else 0)

    @property
    def weight_width(self) -> int:
        return self.dim * (self.n_weights + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tau_range"] = list(self.tau_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "M3GNConfig":
        d = dict(d)
        d["tau_range"] = tuple(d["tau_range"])
        return cls(**d)


class LookupTable:
    """tau=1 position basis [Phi | Y2] and slopes on a uniform grid in s = t / tau."""

    def __init__(self, cfg: M3GNConfig, s_max: float):
        n = int(np.ceil(s_max / cfg.table_spacing)) + 1
        s = np.arange(n) * cfg.table_spacing
        tab = prodmp.assemble_basis_tables(cfg.prodmp, s, 1.0)
        decay = np.exp(-0.5 * cfg.alpha * s)
        y2, y2_dot = s * decay, (1.0 - 0.5 * cfg.alpha * s) * decay
        self.values = np.concatenate([tab.Phi, y2[:, None]], axis=1)
        self.slopes = np.concatenate([tab.Phi_dot, y2_dot[:, None]], axis=1)
        self.s_max = s[-1]
        self.spacing = cfg.table_spacing
        # one unit of head output moves a column by at most ~1 over [0, 1]
        unit = s <= 1.0
        peak = np.abs(tab.Phi[unit]).max(axis=0)
        self.weight_scale = 1.0 / np.maximum(peak, 1e-12)

    def lookup(self, s: nx.Tensor, dtype) -> nx.Tensor:
        return nx.hermite_lookup(self.values.astype(dtype), self.slopes.astype(dtype), self.spacing, s)


@dataclass
class Forward:
    rel: nx.Tensor  # [H x N*d] positions relative to the anchor, frames anchor..T-1
    tau: nx.Tensor  # [1 x 1]
    z: nx.Tensor  # [N x d_z]
    anchor_pos: np.ndarray
    mask: np.ndarray  # [N] nodes whose motion is predicted


class M3GN:
    kind = "m3gn"

    def __init__(self, cfg: M3GNConfig, seed: int = 0, store: nx.ParamStore | None = None):
        self.cfg = cfg
        self.calls: Counter = Counter()
        self._tables: dict[int, LookupTable] = {}
        if store is None:
            store = nx.ParamStore(np.dtype(cfg.dtype))
            rng = np.random.default_rng(seed)
            m = cfg.mpn
            ctx_in = cfg.base_width + cfg.dim
            mpn.init_mpn(store, "ctx", ctx_in, cfg.dim + 1, cfg.latent_task, m, rng)
            mpn.init_mpn(store, "sim", cfg.base_width + cfg.latent_task, cfg.dim + 1, cfg.weight_width, m, rng, out_scale=cfg.head_init_scale)
            nx.init_mlp(store, "tau", [cfg.latent_task, cfg.tau_hidden, 1], rng)
            lo, hi = cfg.tau_range
            # start near tau = 1
            store["tau.l1.b"].data[:] = np.log((1.0 - lo) / (hi - 1.0))
        self.params = store

    # ------------------------------------------------------------ tables

    def table(self, n_frames: int) -> LookupTable:
        """Lookup table covering ``n_frames`` post-anchor frames at the smallest tau."""
        size = 1 << max(5, int(np.ceil(np.log2(max(n_frames, 1)))))
        if size not in self._tables:
            self._tables[size] = LookupTable(self.cfg, size * self.cfg.frame_dt / self.cfg.tau_range[0])
        return self._tables[size]

    # ------------------------------------------------------------ context

    def _features(self, scene: Scene, pos: np.ndarray, t: int, extra=()) -> np.ndarray:
        cfg = self.cfg
        blocks = list(extra)
        if cfg.collider_target:
            blocks.insert(0, collider_target(scene, pos, t))
        return frame_features(scene, pos, t, cfg.history, cfg.vel_scale, cfg.force_flag, blocks)

    def context_pairs(self, ctx: ContextSet) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
        """(node features incl. y_t, senders, receivers, edge features) for t = 0..T^c-2."""
        if ctx.n_context < 2:
            raise ContractError("context needs at least two frames")
        cfg, pos, scene = self.cfg, ctx.positions, ctx.scene
        pairs = []
        for t in range(ctx.n_context - 1):
            y_t = pos[t + 1] - pos[t]
            x = self._features(scene, pos, t, extra=(cfg.vel_scale * y_t,))
            s, r, e = frame_edges(scene, pos[t], cfg.radius, cfg.edge_scale)
            pairs.append((x, s, r, e))
        return pairs

    def encode_context(self, ctx: ContextSet) -> nx.Tensor:
        """z_v: element-wise max over context time of the per-pair latents."""
        return self.encode_pairs(self.context_pairs(ctx), ctx.scene.n_nodes)

    @mpn.respects_order
    def encode_pairs(self, pairs, n: int) -> nx.Tensor:
        """One batched context-MPN call over all pairs, then max over pairs."""
        dt = self.params.dtype
        offsets = np.arange(len(pairs)) * n
        x = np.concatenate([p[0] for p in pairs]).astype(dt)
        s = np.concatenate([p[1] + o for p, o in zip(pairs, offsets)])
        r = np.concatenate([p[2] + o for p, o in zip(pairs, offsets)])
        e = np.concatenate([p[3] for p in pairs]).astype(dt)
        h = mpn.run_tensors(self.params, "ctx", nx.Tensor(x), nx.Tensor(e), s, r, self.cfg.mpn)
        z_t = mpn.decode(self.params, "ctx", h)
        self.calls["context"] += len(pairs)
        z = nx.max_axis0(nx.reshape(z_t, (len(pairs), n * self.cfg.latent_task)))
        return nx.reshape(z, (n, self.cfg.latent_task))

    # ------------------------------------------------------------ prediction

    @mpn.respects_order
    def forward(self, ctx: ContextSet) -> Forward:
        cfg, scene, dt = self.cfg, ctx.scene, self.params.dtype
        n, d = scene.n_nodes, scene.dim
        a = ctx.anchor
        pos = ctx.positions
        z = self.encode_context(ctx)

        x = self._features(scene, pos, a)
        s, r, e = frame_edges(scene, pos[a], cfg.radius, cfg.edge_scale)
        node_x = nx.concat([nx.Tensor(x.astype(dt)), z], axis=1)
        h = mpn.run_tensors(self.params, "sim", node_x, nx.Tensor(e.astype(dt)), s, r, cfg.mpn)
        out = mpn.decode(self.params, "sim", h)  # [N x d(N_w+1)]
        self.calls["simulator"] += 1

        pooled = nx.segment_reduce(z, np.zeros(n, dtype=np.int64), 1, "mean", ordered=cfg.ordered)
        lo, hi = cfg.tau_range
        tau = nx.sigmoid(nx.mlp_forward(self.params, "tau", pooled)) * (hi - lo) + lo

        H = ctx.n_steps - a
        table = self.table(H - 1)
        times = np.arange(H, dtype=np.float64) * cfg.frame_dt
        s_grid = nx.Tensor(times.astype(dt)) * nx.reshape(nx.reciprocal(tau), (1,))
        basis = table.lookup(s_grid, dt)  # [H x (N_w + 2)]
        K = cfg.n_weights + 1
        w = nx.reshape(out, (n * d, K)) * table.weight_scale.astype(dt)
        phi_w, y2 = _split_cols(basis, K)
        v = (pos[a] - pos[a - 1]) / cfg.frame_dt
        mask = scene.moving_mask()
        vm = (v * mask[:, None]).reshape(1, n * d).astype(dt)
        wm = w * np.repeat(mask, d).astype(dt)[:, None]
        rel = nx.matmul(phi_w, nx.transpose(wm)) + (y2 * nx.reshape(tau, (1, 1))) * vm
        return Forward(rel, tau, z, pos[a].copy(), mask)

    def rollout(self, ctx: ContextSet) -> np.ndarray:
        """Positions [H x N x d] for frames anchor..T-1; collider from ground truth."""
        f = self.forward(ctx)
        H = ctx.n_steps - ctx.anchor
        n, d = ctx.scene.n_nodes, ctx.scene.dim
        out = f.anchor_pos[None] + f.rel.data.astype(np.float64).reshape(H, n, d)
        coll = ctx.scene.kinds == NodeKind.COLLIDER
        out[:, coll] = ctx.positions[ctx.anchor :, coll]
        return out

    def loss(self, ctx: ContextSet) -> nx.Tensor:
        """Mean squared position error over frames after the anchor, free mesh nodes."""
        f = self.forward(ctx)
        a, n, d = ctx.anchor, ctx.scene.n_nodes, ctx.scene.dim
        truth = ctx.scene.positions[a:] - ctx.scene.positions[a][None]
        target = (truth * f.mask[None, :, None]).reshape(truth.shape[0], n * d)[1:]
        pred = nx.gather_rows(f.rel, np.arange(1, truth.shape[0]))
        count = target.shape[0] * int(f.mask.sum()) * d
        diff = pred - target.astype(self.params.dtype)
        return nx.total(nx.square(diff)) * (1.0 / count)

    def latent(self, ctx: ContextSet) -> np.ndarray:
        return self.encode_context(ctx).data.astype(np.float64)

    # ------------------------------------------------------------ persistence

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "model.json").write_text(json.dumps({"kind": self.kind, "config": self.cfg.to_dict()}, indent=1))
        self.params.save(out / "params.bin")
        return out

    @classmethod
    def load(cls, path) -> "M3GN":
        path = Path(path)
        meta = json.loads((path / "model.json").read_text())
        cfg = M3GNConfig.from_dict(meta["config"])
        return cls(cfg, store=nx.ParamStore.load(path / "params.bin", dtype=np.dtype(cfg.dtype)))


def _split_cols(t: nx.Tensor, k: int) -> tuple[nx.Tensor, nx.Tensor]:
    """Columns [:k] and [k:] of a 2-D tensor."""
    left = nx.transpose(nx.gather_rows(nx.transpose(t), np.arange(k)))
    right = nx.transpose(nx.gather_rows(nx.transpose(t), np.arange(k, t.shape[1])))
    return left, right


def input_scales(scenes: list[Scene]) -> dict:
    """Feature scales fitted on training scenes: 1/std of per-frame displacement, 1/mean edge length."""
    disp = np.concatenate([np.diff(s.positions, axis=0)[:, s.moving_mask()].ravel() for s in scenes])
    lengths = np.concatenate(
        [np.linalg.norm(s.positions[0][s.edges[:, 1]] - s.positions[0][s.edges[:, 0]], axis=1) for s in scenes]
    )
    std = float(disp.std())
    return {"vel_scale": 1.0 / std if std > 0 else 1.0, "edge_scale": 1.0 / float(lengths.mean())}
