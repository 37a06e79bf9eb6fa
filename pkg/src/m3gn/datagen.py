"""Spring-mass ground truth with a hidden per-trajectory stiffness.

Two scenes:

* ``block``: an n x n lattice with fixed bottom row, pressed by a rigid disc
  that moves at constant velocity.  Contact is a radial penalty force on
  penetrating masses (stiff spring plus normal damping), so penetration
  stays within a small slack that grows with the block stiffness.
* ``sheet``: an n x n lattice with a fixed boundary ring, pulled in-plane by
  two constant point forces.

Both use structural plus shear springs with stiffness ``kappa * k_base``,
linear velocity damping and semi-implicit Euler substeps.  Many scenes with
the same lattice are integrated together as one batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, NumericError
from .meshgraph import NodeKind, Normalizer, Trajectory, save_dataset

log = logging.getLogger(__name__)

BLOCK_KAPPA = (0.5, 2.0, 8.0)
BLOCK_OOD_KAPPA = (0.2, 20.0)
SHEET_KAPPA = (0.5, 1.0, 2.0, 4.0, 8.0)
SHEET_OOD_KAPPA = (0.2, 20.0)


@dataclass
class SceneSpec:
    task: str = "block"
    n: int = 7
    spacing: float = 1.0
    kappa: float = 1.0
    k_base: float = 0.5
    damping: float = 1.0
    n_frames: int = 40
    substeps: int = 50
    contact_stiffness: float = 4000.0
    contact_damping: float = 60.0
    contact_friction: float = 60.0  # viscous grip on tangential slip
    # block
    collider_radius: float = 2.0
    collider_start: tuple[float, float] = (3.0, 8.0)
    collider_velocity: tuple[float, float] = (0.0, -0.06)
    collider_nodes: int = 16
    # sheet
    force_nodes: tuple[int, ...] = ()
    forces: tuple[tuple[float, float], ...] = ()
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kappa <= 0:
            raise ContractError(f"kappa must be positive, got {self.kappa}")
        if self.task not in ("block", "sheet"):
            raise ContractError(f"unknown task {self.task!r}")


def grid_lattice(n: int, spacing: float):
    """Positions [n*n x 2] (row-major, row 0 at the bottom), triangles, springs."""
    ii, jj = np.meshgrid(np.arange(n), np.arange(n))
    pos = np.stack([ii.ravel() * spacing, jj.ravel() * spacing], axis=1).astype(np.float64)
    idx = lambda i, j: j * n + i  # noqa: E731
    cells, springs = [], []
    for j in range(n):
        for i in range(n):
            if i + 1 < n:
                springs.append((idx(i, j), idx(i + 1, j)))
            if j + 1 < n:
                springs.append((idx(i, j), idx(i, j + 1)))
            if i + 1 < n and j + 1 < n:
                a, b, c, d = idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1)
                springs += [(a, d), (b, c)]
                cells += [(a, b, d), (a, d, c)]
    return pos, np.asarray(cells, dtype=np.int64), np.asarray(springs, dtype=np.int64)


def _fixed_mask(task: str, n: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(n), np.arange(n))
    ii, jj = ii.ravel(), jj.ravel()
    if task == "block":
        return jj == 0
    return (ii == 0) | (jj == 0) | (ii == n - 1) | (jj == n - 1)


def _circle(centers: np.ndarray, radius: np.ndarray, n: int) -> np.ndarray:
    ang = 2 * np.pi * np.arange(n) / n
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return centers[:, None, :] + radius[:, None, None] * ring[None]


def _integrate(specs: list[SceneSpec], substeps: int, vmax: float):
    s0 = specs[0]
    n, B = s0.n, len(specs)
    rest_pos, cells, springs = grid_lattice(n, s0.spacing)
    V = rest_pos.shape[0]
    fixed = _fixed_mask(s0.task, n)
    free = (~fixed)[None, :, None]
    rest_len = np.linalg.norm(rest_pos[springs[:, 1]] - rest_pos[springs[:, 0]], axis=1)
    k = np.array([s.kappa * s.k_base for s in specs])[:, None]
    damping = s0.damping
    dt = 1.0 / substeps

    ext = np.zeros((B, V, 2))
    for b, s in enumerate(specs):
        for node, f in zip(s.force_nodes, s.forces):
            ext[b, node] += f
    has_collider = s0.task == "block"
    c0 = np.array([s.collider_start for s in specs], dtype=np.float64)
    cv = np.array([s.collider_velocity for s in specs], dtype=np.float64)
    cr = np.array([s.collider_radius for s in specs], dtype=np.float64)

    x = np.broadcast_to(rest_pos, (B, V, 2)).copy()
    v = np.zeros_like(x)
    frames = [x.copy()]
    for f in range(1, s0.n_frames):
        for sub in range(substeps):
            t = (f - 1) + (sub + 1) * dt
            d = x[:, springs[:, 1]] - x[:, springs[:, 0]]
            length = np.linalg.norm(d, axis=2)
            fs = (k * (length - rest_len) / np.maximum(length, 1e-12))[..., None] * d
            force = ext.copy()
            np.add.at(force, (slice(None), springs[:, 0]), fs)
            np.add.at(force, (slice(None), springs[:, 1]), -fs)
            v = (v + dt * (force - damping * v)) * free
            x = x + dt * v
            if has_collider:
                center = c0 + cv * t
                rel = x - center[:, None, :]
                dist = np.linalg.norm(rel, axis=2)
                depth = np.where(free[..., 0], cr[:, None] - dist, 0.0)
                inside = depth > 0
                if inside.any():
                    normal = rel / np.maximum(dist, 1e-12)[..., None]
                    vrel = v - cv[:, None, :]
                    vn = (vrel * normal).sum(axis=2)
                    push = np.where(inside, s0.contact_stiffness * depth - s0.contact_damping * vn, 0.0)
                    slip = np.where(inside[..., None], vrel - vn[..., None] * normal, 0.0)
                    grip = min(s0.contact_friction * dt, 1.0)
                    v = v + dt * np.maximum(push, 0.0)[..., None] * normal - grip * slip
        if not np.all(np.isfinite(x)) or np.abs(v).max() > vmax:
            raise _Unstable(f, float(np.nanmax(np.abs(v))))
        frames.append(x.copy())
    mesh = np.stack(frames, axis=1)  # [B, T, V, 2]
    if has_collider:
        times = np.arange(s0.n_frames, dtype=np.float64)
        centers = c0[:, None, :] + cv[:, None, :] * times[None, :, None]
        coll = np.stack([_circle(centers[:, t], cr, s0.collider_nodes) for t in range(s0.n_frames)], axis=1)
    else:
        coll = np.zeros((B, s0.n_frames, 0, 2))
    return mesh, coll, cells, fixed


class _Unstable(Exception):
    def __init__(self, frame, speed):
        self.frame, self.speed = frame, speed


def simulate_batch(specs: list[SceneSpec]) -> list[Trajectory]:
    """Integrate scenes sharing task, lattice, frame count and substeps."""
    s0 = specs[0]
    shared = lambda s: (s.task, s.n, s.n_frames, s.substeps, s.spacing, s.damping, s.contact_stiffness, s.contact_damping, s.contact_friction, s.collider_nodes)  # noqa: E731
    for s in specs:
        if shared(s) != shared(s0):
            raise ContractError("batched scenes must share lattice, timing and contact parameters")
    vmax = 20.0 * s0.spacing
    try:
        mesh, coll, cells, fixed = _integrate(specs, s0.substeps, vmax)
    except _Unstable as err:
        log.warning("unstable at frame %d (|v|=%.3g); retrying with %d substeps", err.frame, err.speed, 2 * s0.substeps)
        try:
            mesh, coll, cells, fixed = _integrate(specs, 2 * s0.substeps, vmax)
        except _Unstable as err2:
            raise NumericError(
                f"{s0.task} simulation unstable at frame {err2.frame}: |v|={err2.speed:.3g}, "
                f"kappa in {[s.kappa for s in specs]}, substeps={2 * s0.substeps}"
            ) from None
    kinds = np.where(fixed, NodeKind.FIXED, NodeKind.MESH).astype(np.int64)
    out = []
    for b, s in enumerate(specs):
        meta = {"seed": s.seed, **s.extra}
        if s.task == "block":
            meta.update(collider_radius=s.collider_radius, collider_start=list(s.collider_start), collider_velocity=list(s.collider_velocity))
        else:
            meta.update(forces=[list(f) for f in s.forces])
        out.append(Trajectory(mesh[b], coll[b], cells, kinds, s.kappa, np.asarray(s.force_nodes, dtype=np.int64), meta))
    return out


def simulate_block(spec: SceneSpec) -> Trajectory:
    return simulate_batch([spec])[0]


def simulate_sheet(spec: SceneSpec) -> Trajectory:
    return simulate_batch([spec])[0]


# ---------------------------------------------------------------- random scenes


def random_block_spec(rng: np.random.Generator, kappa: float, **overrides) -> SceneSpec:
    n = overrides.get("n", 7)
    spacing = overrides.get("spacing", 1.0)
    top = (n - 1) * spacing
    r = rng.uniform(1.5, 2.5) * spacing
    gap = rng.uniform(0.05, 0.4) * spacing
    start = (rng.uniform(0.2, 0.8) * top, top + r + gap)
    vel = (rng.uniform(-0.015, 0.015) * spacing, -rng.uniform(0.03, 0.045) * spacing)
    base = dict(task="block", kappa=kappa, collider_radius=r, collider_start=start, collider_velocity=vel)
    base.update(overrides)
    return SceneSpec(**base)


def random_sheet_spec(rng: np.random.Generator, kappa: float, **overrides) -> SceneSpec:
    n = overrides.get("n", 9)
    ii, jj = np.meshgrid(np.arange(1, n - 1), np.arange(1, n - 1))
    interior = (jj * n + ii).ravel()
    nodes = tuple(int(i) for i in rng.choice(interior, size=2, replace=False))
    forces = []
    for _ in range(2):
        ang = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(0.2, 0.5)
        forces.append((mag * np.cos(ang), mag * np.sin(ang)))
    base = dict(task="sheet", n=n, n_frames=50, kappa=kappa, force_nodes=nodes, forces=tuple(forces))
    base.update(overrides)
    return SceneSpec(**base)


def trajectory_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def generate(task: str, count: int, seed: int, kappa_set, offset: int = 0, batch: int = 64, **overrides) -> list[Trajectory]:
    """``count`` trajectories with kappa drawn uniformly from ``kappa_set``."""
    make = random_block_spec if task == "block" else random_sheet_spec
    specs = []
    for i in range(count):
        ts = trajectory_seed(seed, offset + i)
        rng = np.random.default_rng(ts)
        kappa = float(rng.choice(np.asarray(kappa_set, dtype=np.float64)))
        specs.append(replace(make(rng, kappa, **overrides), seed=ts))
    out = []
    for start in range(0, count, batch):
        out.extend(simulate_batch(specs[start : start + batch]))
    return out


def split_counts(n: int, ratios) -> list[int]:
    ratios = np.asarray(ratios, dtype=np.float64)
    ratios = ratios / ratios.sum()
    raw = ratios * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return [int(c) for c in counts]


def write_dataset(
    out_dir,
    trajectories: list[Trajectory],
    split_ratios=(5, 1, 1),
    ood_trajectories: list[Trajectory] | None = None,
    task: str | None = None,
    seed: int | None = None,
    extra: dict | None = None,
):
    """Write the container; the normaliser is fitted on the train split only."""
    counts = split_counts(len(trajectories), split_ratios)
    names = ["train", "val", "test"]
    splits, start = {}, 0
    for name, c in zip(names, counts):
        splits[name] = list(range(start, start + c))
        start += c
    all_trajs = list(trajectories)
    if ood_trajectories:
        train_kappa = {trajectories[i].material for i in splits["train"]}
        ood_kappa = {t.material for t in ood_trajectories}
        if train_kappa & ood_kappa:
            raise ContractError(f"OOD kappa values {sorted(train_kappa & ood_kappa)} also appear in train")
        splits["test_ood"] = list(range(len(all_trajs), len(all_trajs) + len(ood_trajectories)))
        all_trajs += ood_trajectories
    train = [all_trajs[i] for i in splits["train"]] or all_trajs
    norm = Normalizer.from_arrays([t.mesh for t in train] + [t.collider for t in train])
    task = task or ("block" if all_trajs[0].n_collider else "sheet")
    info = {"seed": seed}
    info.update(extra or {})
    return save_dataset(out_dir, task, all_trajs, splits, norm, info)
