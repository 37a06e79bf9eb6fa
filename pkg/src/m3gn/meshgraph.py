"""Graph encodings of simulation frames and the on-disk dataset container.

Graph nodes are the mesh vertices followed by the collider vertices.  Edges
come from the mesh triangles, the collider outline, and mesh/collider pairs
closer than a radius.  All geometric features are relative, so encodings are
unchanged by translating the whole scene.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

COLLIDER_RADIUS = 0.3


class NodeKind(IntEnum):
    MESH = 0
    COLLIDER = 1
    FIXED = 2


N_KINDS = len(NodeKind)


# ---------------------------------------------------------------- topology


@dataclass
class MeshTopology:
    n_nodes: int
    cells: np.ndarray  # [C x k] vertex indices
    edges: np.ndarray = field(init=False)  # [E x 2] undirected, i < j, sorted

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64)
        if cells.size and (cells.min() < 0 or cells.max() >= self.n_nodes):
            raise ContractError("cell index out of range")
        self.cells = cells
        self.edges = cell_edges(cells)


def cell_edges(cells: np.ndarray) -> np.ndarray:
    """Unique undirected edges of a cell list, as sorted (lo, hi) pairs."""
    cells = np.asarray(cells, dtype=np.int64)
    if cells.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    k = cells.shape[1]
    pairs = np.concatenate([cells[:, [i, (i + 1) % k]] for i in range(k if k > 2 else 1)])
    pairs = np.sort(pairs, axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return np.unique(pairs, axis=0)


def ring_edges(n: int, offset: int = 0) -> np.ndarray:
    """Closed polygon edges over ``n`` consecutive nodes."""
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    idx = np.arange(n)
    pairs = np.stack([idx, (idx + 1) % n], axis=1) + offset
    return np.unique(np.sort(pairs, axis=1), axis=0)


# ---------------------------------------------------------------- normalisation


@dataclass(frozen=True)
class Normalizer:
    """Per-axis affine map of a bounding box onto [-1, 1]^d."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    @classmethod
    def from_arrays(cls, arrays) -> "Normalizer":
        pts = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1, np.shape(a)[-1]) for a in arrays if np.size(a)])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        if np.any(hi - lo <= 0):
            raise ConfigError(f"degenerate bounding box axis: lo={lo}, hi={hi}")
        return cls(tuple(map(float, lo)), tuple(map(float, hi)))

    @property
    def scale(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / 2.0

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.hi) + np.asarray(self.lo)) / 2.0

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.center) / self.scale

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.scale + self.center

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(tuple(d["lo"]), tuple(d["hi"]))


# ---------------------------------------------------------------- edges and features


def build_edges(
    topology_edges: np.ndarray,
    mesh_pos: np.ndarray,
    collider_pos: np.ndarray,
    radius: float = COLLIDER_RADIUS,
    collider_edges: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Directed (senders, receivers) over mesh + collider nodes.

    Topology edges (mesh triangles and the collider outline) plus every
    mesh/collider pair strictly closer than ``radius``; both directions of
    each undirected edge are emitted.
    """
    if radius <= 0:
        raise ContractError("radius must be positive")
    n_mesh = mesh_pos.shape[0]
    und = [np.asarray(topology_edges, dtype=np.int64).reshape(-1, 2)]
    if collider_edges is not None:
        und.append(np.asarray(collider_edges, dtype=np.int64).reshape(-1, 2))
    if collider_pos.shape[0]:
        diff = mesh_pos[:, None, :] - collider_pos[None, :, :]
        close = np.sqrt((diff**2).sum(-1)) < radius
        m, c = np.nonzero(close)
        und.append(np.stack([m, c + n_mesh], axis=1))
    pairs = np.concatenate(und)
    senders = np.concatenate([pairs[:, 0], pairs[:, 1]])
    receivers = np.concatenate([pairs[:, 1], pairs[:, 0]])
    return senders, receivers


def encode_edge_features(pos: np.ndarray, senders: np.ndarray, receivers: np.ndarray) -> np.ndarray:
    """[displacement receiver - sender, Euclidean norm] per directed edge."""
    rel = pos[receivers] - pos[senders]
    return np.concatenate([rel, np.linalg.norm(rel, axis=1, keepdims=True)], axis=1)


def velocity_history(positions: np.ndarray, t: int, history: int) -> np.ndarray:
    """[N x history*d] of pos[t-h] - pos[t-h-1], h = 0..history-1.

    Frames before the first are the first frame repeated (zero velocity).
    """
    n, d = positions.shape[1:]
    if history == 0:
        return np.zeros((n, 0), dtype=positions.dtype)
    cols = []
    for h in range(history):
        a, b = max(t - h, 0), max(t - h - 1, 0)
        cols.append(positions[a] - positions[b])
    return np.concatenate(cols, axis=1)


def node_feature_width(d: int, history: int, floor: bool = False, force: bool = False, collider_target: bool = False, material: bool = False) -> int:
    return N_KINDS + history * d + int(floor) + int(force) + (d if collider_target else 0) + int(material)


def encode_node_features(
    kinds: np.ndarray,
    positions: np.ndarray,
    t: int,
    history: int,
    floor_height: float | None = None,
    force_flags: np.ndarray | None = None,
    collider_target: np.ndarray | None = None,
    material: float | None = None,
    vertical_axis: int = -1,
) -> np.ndarray:
    """Node features of frame ``t`` from a positions array [T x N x d].

    Layout: one-hot kind | velocity history | height above floor |
    force flag | collider target offset | material scalar (each optional
    block only when its argument is given).
    """
    n = positions.shape[1]
    if kinds.shape != (n,):
        raise ConfigError(f"kind vector shape {kinds.shape} does not match {n} nodes")
    blocks = [np.eye(N_KINDS, dtype=positions.dtype)[kinds], velocity_history(positions, t, history)]
    if floor_height is not None:
        blocks.append(positions[t][:, vertical_axis : vertical_axis + 1 or None] - floor_height)
    if force_flags is not None:
        blocks.append(np.asarray(force_flags, dtype=positions.dtype).reshape(n, 1))
    if collider_target is not None:
        blocks.append(np.asarray(collider_target, dtype=positions.dtype).reshape(n, -1))
    if material is not None:
        blocks.append(np.full((n, 1), material, dtype=positions.dtype))
    return np.concatenate(blocks, axis=1)


def collider_target_offsets(kinds: np.ndarray, positions: np.ndarray, t: int, t_final: int) -> np.ndarray:
    """pos(final) - pos(t) on collider nodes, zero elsewhere."""
    off = positions[t_final] - positions[t]
    off[kinds != NodeKind.COLLIDER] = 0.0
    return off


@dataclass
class GraphSample:
    node_features: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    edge_features: np.ndarray
    n_graphs: int = 1

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.senders.shape[0]


def batch_graphs(samples: list[GraphSample]) -> GraphSample:
    """Disjoint union of graphs; node blocks are stacked in order."""
    offsets = np.cumsum([0] + [s.n_nodes for s in samples[:-1]])
    return GraphSample(
        np.concatenate([s.node_features for s in samples]),
        np.concatenate([s.senders + o for s, o in zip(samples, offsets)]),
        np.concatenate([s.receivers + o for s, o in zip(samples, offsets)]),
        np.concatenate([s.edge_features for s in samples]),
        n_graphs=sum(s.n_graphs for s in samples),
    )


def permute_sample(sample: GraphSample, perm: np.ndarray) -> GraphSample:
    """Relabel node i as perm[i]; the edge list keeps its order."""
    perm = np.asarray(perm)
    feats = np.empty_like(sample.node_features)
    feats[perm] = sample.node_features
    return GraphSample(feats, perm[sample.senders], perm[sample.receivers], sample.edge_features.copy(), sample.n_graphs)


# ---------------------------------------------------------------- trajectories and datasets


@dataclass
class Trajectory:
    """One simulated trajectory in world coordinates."""

    mesh: np.ndarray  # [T x V x d]
    collider: np.ndarray  # [T x U x d]
    cells: np.ndarray  # [C x 3]
    mesh_kinds: np.ndarray  # [V] MESH or FIXED
    material: float
    force_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.mesh.shape[0]

    @property
    def n_mesh(self) -> int:
        return self.mesh.shape[1]

    @property
    def n_collider(self) -> int:
        return self.collider.shape[1]

    @property
    def dim(self) -> int:
        return self.mesh.shape[2]

    def kinds(self) -> np.ndarray:
        return np.concatenate([self.mesh_kinds, np.full(self.n_collider, NodeKind.COLLIDER)]).astype(np.int64)

    def positions(self) -> np.ndarray:
        return np.concatenate([self.mesh, self.collider], axis=1)

    def force_flags(self) -> np.ndarray:
        flags = np.zeros(self.n_mesh + self.n_collider)
        flags[self.force_nodes] = 1.0
        return flags

    def topology_edges(self) -> np.ndarray:
        return cell_edges(self.cells)

    def collider_edges(self) -> np.ndarray:
        return ring_edges(self.n_collider, offset=self.n_mesh)

    def normalized(self, norm: Normalizer) -> "Trajectory":
        return Trajectory(
            norm.normalize(self.mesh),
            norm.normalize(self.collider) if self.n_collider else self.collider.astype(np.float64),
            self.cells,
            self.mesh_kinds,
            self.material,
            self.force_nodes,
            dict(self.meta),
        )


@dataclass
class Dataset:
    task: str
    trajectories: list[Trajectory]
    splits: dict[str, list[int]]
    normalizer: Normalizer
    manifest: dict

    def split(self, name: str, normalized: bool = True) -> list[Trajectory]:
        trajs = [self.trajectories[i] for i in self.splits.get(name, [])]
        return [t.normalized(self.normalizer) for t in trajs] if normalized else trajs

    @property
    def has_collider(self) -> bool:
        return self.trajectories[0].n_collider > 0

    @property
    def has_force(self) -> bool:
        return self.task == "sheet"


def _write_array(path: Path, arr: np.ndarray, dtype: str) -> None:
    try:
        path.write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def save_dataset(out_dir: str | Path, task: str, trajectories: list[Trajectory], splits: dict[str, list[int]], normalizer: Normalizer, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    first = trajectories[0]
    entries = []
    for i, tr in enumerate(trajectories):
        sub = out / f"traj_{i:05d}"
        sub.mkdir(exist_ok=True)
        _write_array(sub / "positions.bin", tr.mesh, "<f4")
        _write_array(sub / "collider.bin", tr.collider, "<f4")
        _write_array(sub / "topology.bin", tr.cells, "<i4")
        entries.append(
            {
                "dir": sub.name,
                "material": float(tr.material),
                "n_cells": int(tr.cells.shape[0]),
                "n_collider": int(tr.n_collider),
                "mesh_kinds": [int(k) for k in tr.mesh_kinds],
                "force_nodes": [int(k) for k in tr.force_nodes],
                "meta": tr.meta,
            }
        )
    manifest = {
        "format": 1,
        "task": task,
        "n_trajectories": len(trajectories),
        "T": int(first.n_steps),
        "V": int(first.n_mesh),
        "d": int(first.dim),
        "node_kinds": [k.name for k in NodeKind],
        "normalization": normalizer.to_dict(),
        "splits": {k: [int(i) for i in v] for k, v in splits.items()},
        "trajectories": entries,
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except OSError as exc:
        raise OSError(f"cannot read dataset manifest in {root}: {exc}") from exc
    T, V, d = manifest["T"], manifest["V"], manifest["d"]
    trajs = []
    for e in manifest["trajectories"]:
        sub = root / e["dir"]
        U = e["n_collider"]
        mesh = np.fromfile(sub / "positions.bin", dtype="<f4").reshape(T, V, d)
        coll = np.fromfile(sub / "collider.bin", dtype="<f4").reshape(T, U, d)
        cells = np.fromfile(sub / "topology.bin", dtype="<i4").reshape(e["n_cells"], -1).astype(np.int64)
        trajs.append(
            Trajectory(
                mesh,
                coll,
                cells,
                np.asarray(e["mesh_kinds"], dtype=np.int64),
                e["material"],
                np.asarray(e["force_nodes"], dtype=np.int64),
                e.get("meta", {}),
            )
        )
    return Dataset(manifest["task"], trajs, manifest["splits"], Normalizer.from_dict(manifest["normalization"]), manifest)


# ---------------------------------------------------------------- order-free scenes


@dataclass
class Scene:
    """A trajectory flattened to node arrays, without any node-order assumption.

    Used by the learned models: kinds decide which pairs may get radius
    edges, so relabelling nodes with any permutation is legal.
    """

    positions: np.ndarray  # [T x N x d]
    kinds: np.ndarray  # [N]
    edges: np.ndarray  # [E x 2] undirected topology (mesh cells + collider outline)
    force_flags: np.ndarray  # [N]
    material: float = 0.0

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "Scene":
        edges = [traj.topology_edges()]
        if traj.n_collider:
            edges.append(traj.collider_edges())
        return cls(traj.positions().astype(np.float64), traj.kinds(), np.concatenate(edges), traj.force_flags(), float(traj.material))

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[1]

    @property
    def n_steps(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    @property
    def has_collider(self) -> bool:
        return bool(np.any(self.kinds == NodeKind.COLLIDER))

    def moving_mask(self) -> np.ndarray:
        """Nodes whose positions are predicted (free mesh nodes)."""
        return self.kinds == NodeKind.MESH

    def permuted(self, perm) -> "Scene":
        """Node i becomes node perm[i]."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return Scene(self.positions[:, inv], self.kinds[inv], perm[self.edges], self.force_flags[inv], self.material)

    def shifted(self, offset) -> "Scene":
        return Scene(self.positions + np.asarray(offset, dtype=np.float64), self.kinds, self.edges, self.force_flags, self.material)


def scene_edges(scene: Scene, pos: np.ndarray, radius: float = COLLIDER_RADIUS) -> tuple[np.ndarray, np.ndarray]:
    """Directed edges of one frame: topology plus collider radius pairs."""
    if radius <= 0:
        raise ContractError("radius must be positive")
    und = [scene.edges]
    coll = np.flatnonzero(scene.kinds == NodeKind.COLLIDER)
    if coll.size:
        body = np.flatnonzero(scene.kinds != NodeKind.COLLIDER)
        diff = pos[body][:, None, :] - pos[coll][None, :, :]
        m, c = np.nonzero(np.sqrt((diff**2).sum(-1)) < radius)
        und.append(np.stack([body[m], coll[c]], axis=1))
    pairs = np.concatenate(und)
    return np.concatenate([pairs[:, 0], pairs[:, 1]]), np.concatenate([pairs[:, 1], pairs[:, 0]])
