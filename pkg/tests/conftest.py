import numpy as np
import pytest

from m3gn import datagen
from m3gn.meshgraph import NodeKind, Normalizer, Scene


def small_block(seed=0, kappa=2.0, n=4, n_frames=12, **kw):
    """A normalised n x n block scene with a 8-node collider pressing in early."""
    rng = np.random.default_rng(seed)
    kw.setdefault("collider_velocity", (0.01 * (seed % 3 - 1), -0.1))
    kw.setdefault("collider_start", (rng.uniform(0.3, 0.7) * (n - 1), n - 1 + 1.2 + 0.05))
    spec = datagen.random_block_spec(rng, kappa, n=n, n_frames=n_frames, collider_nodes=8, collider_radius=1.2, **kw)
    tr = datagen.simulate_block(spec)
    norm = Normalizer.from_arrays([tr.mesh, tr.collider])
    return Scene.from_trajectory(tr.normalized(norm))


def toy_scene(n_frames=6, seed=0):
    """5 nodes: a free triangle, one fixed node and one collider node."""
    rng = np.random.default_rng(seed)
    base = np.array([[0.0, 0.0], [0.5, 0.0], [0.25, 0.4], [0.75, 0.4], [0.25, 0.65]])
    steps = rng.normal(0.0, 0.01, size=(n_frames, 5, 2))
    pos = base[None] + np.cumsum(steps, axis=0)
    kinds = np.array([NodeKind.MESH, NodeKind.MESH, NodeKind.MESH, NodeKind.FIXED, NodeKind.COLLIDER])
    pos[:, 3] = base[3]
    edges = np.array([[0, 1], [1, 2], [0, 2], [1, 3], [2, 3]])
    return Scene(pos, kinds, edges, np.zeros(5), 1.0)


@pytest.fixture(scope="session")
def block_scene():
    return small_block()


@pytest.fixture(scope="session")
def block_scenes():
    return [small_block(seed=s, kappa=k) for s, k in zip(range(4), (0.5, 2.0, 8.0, 2.0))]
