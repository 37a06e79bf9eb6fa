import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3gn import meshgraph as mg
from m3gn.errors import ConfigError, ContractError
from m3gn.meshgraph import NodeKind

from conftest import small_block


def _edge_set(s, r):
    return set(zip(s.tolist(), r.tolist()))


# ---------------------------------------------------------------- topology


def test_cell_edges_two_triangles():
    e = mg.cell_edges(np.array([[0, 1, 2], [1, 3, 2]]))
    assert e.tolist() == [[0, 1], [0, 2], [1, 2], [1, 3], [2, 3]]


def test_cell_edges_empty_and_ring():
    assert mg.cell_edges(np.zeros((0, 3), dtype=int)).shape == (0, 2)
    assert mg.ring_edges(4, offset=10).tolist() == [[10, 11], [10, 13], [11, 12], [12, 13]]
    assert mg.ring_edges(1).shape == (0, 2)


def test_topology_index_check():
    with pytest.raises(ContractError):
        mg.MeshTopology(3, np.array([[0, 1, 3]]))


# ---------------------------------------------------------------- normaliser


def test_normalizer_maps_box_to_unit_square():
    pts = np.array([[1.0, -2.0], [3.0, 6.0], [2.0, 0.0]])
    norm = mg.Normalizer.from_arrays([pts])
    out = norm.normalize(pts)
    assert np.allclose(out.min(axis=0), -1) and np.allclose(out.max(axis=0), 1)
    assert np.allclose(norm.denormalize(out), pts)
    assert mg.Normalizer.from_dict(json.loads(json.dumps(norm.to_dict()))) == norm


def test_normalizer_degenerate_axis():
    with pytest.raises(ConfigError):
        mg.Normalizer.from_arrays([np.array([[0.0, 1.0], [1.0, 1.0]])])


# ---------------------------------------------------------------- edges


def _brute_force_edges(topo, mesh, coll, radius):
    out = set()
    for a, b in topo:
        out |= {(a, b), (b, a)}
    n = len(mesh)
    for i in range(n):
        for j in range(len(coll)):
            if np.sqrt(((mesh[i] - coll[j]) ** 2).sum()) < radius:
                out |= {(i, n + j), (n + j, i)}
    return out


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n_mesh=st.integers(1, 12), n_coll=st.integers(0, 6), radius=st.floats(0.05, 1.0))
def test_radius_edges_match_brute_force(seed, n_mesh, n_coll, radius):
    rng = np.random.default_rng(seed)
    mesh, coll = rng.uniform(0, 1, (n_mesh, 2)), rng.uniform(0, 1, (n_coll, 2))
    topo = rng.integers(0, n_mesh, size=(3, 2))
    s, r = mg.build_edges(topo, mesh, coll, radius)
    assert _edge_set(s, r) == _brute_force_edges(topo.tolist(), mesh, coll, radius)
    assert len(s) % 2 == 0


def test_build_edges_bad_radius():
    with pytest.raises(ContractError):
        mg.build_edges(np.zeros((0, 2), int), np.zeros((2, 2)), np.zeros((0, 2)), 0.0)


def test_scene_edges_agree_with_build_edges(block_scene):
    sc = block_scene
    n_mesh = int(np.sum(sc.kinds != NodeKind.COLLIDER))
    pos = sc.positions[5]
    s1, r1 = mg.scene_edges(sc, pos, 0.3)
    s2, r2 = mg.build_edges(sc.edges, pos[:n_mesh], pos[n_mesh:], 0.3)
    assert _edge_set(s1, r1) == _edge_set(s2, r2)


def test_edge_features_hand_example():
    pos = np.array([[0.0, 0.0], [3.0, 4.0]])
    f = mg.encode_edge_features(pos, np.array([0, 1]), np.array([1, 0]))
    assert f.tolist() == [[3.0, 4.0, 5.0], [-3.0, -4.0, 5.0]]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), shift=st.tuples(st.floats(-5, 5), st.floats(-5, 5)))
def test_features_translation_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=(4, 6, 2))
    kinds = rng.integers(0, 3, size=6)
    s, r = rng.integers(0, 6, size=8), rng.integers(0, 6, size=8)
    moved = pos + np.asarray(shift)
    assert np.allclose(mg.encode_edge_features(pos[2], s, r), mg.encode_edge_features(moved[2], s, r), atol=1e-12)
    assert np.allclose(mg.encode_node_features(kinds, pos, 3, 2), mg.encode_node_features(kinds, moved, 3, 2), atol=1e-12)


# ---------------------------------------------------------------- node features


def test_velocity_history_hand_example():
    pos = np.array([[[0.0, 0.0]], [[1.0, 0.0]], [[3.0, 1.0]]])
    assert mg.velocity_history(pos, 2, 2).tolist() == [[2.0, 1.0, 1.0, 0.0]]
    assert mg.velocity_history(pos, 0, 2).tolist() == [[0.0, 0.0, 0.0, 0.0]]
    assert mg.velocity_history(pos, 1, 0).shape == (1, 0)


def test_node_feature_layout():
    pos = np.zeros((3, 4, 2))
    kinds = np.array([0, 1, 2, 0])
    x = mg.encode_node_features(kinds, pos, 1, 1, floor_height=0.0, force_flags=np.ones(4), collider_target=np.ones((4, 2)), material=2.5)
    assert x.shape[1] == mg.node_feature_width(2, 1, floor=True, force=True, collider_target=True, material=True) == 10
    assert x[:, :3].tolist() == np.eye(3)[kinds].tolist()
    assert np.all(x[:, -1] == 2.5)
    with pytest.raises(ConfigError):
        mg.encode_node_features(np.zeros(3, int), pos, 1, 1)


def test_collider_target_offsets_zero_elsewhere():
    pos = np.arange(24.0).reshape(3, 4, 2)
    off = mg.collider_target_offsets(np.array([0, 1, 2, 1]), pos, 0, 2)
    assert np.all(off[[0, 2]] == 0) and np.all(off[[1, 3]] == 16.0)


# ---------------------------------------------------------------- samples


def _sample(n, e, seed):
    rng = np.random.default_rng(seed)
    return mg.GraphSample(rng.normal(size=(n, 3)), rng.integers(0, n, e), rng.integers(0, n, e), rng.normal(size=(e, 2)))


def test_batch_graphs_offsets():
    a, b = _sample(3, 4, 0), _sample(5, 2, 1)
    g = mg.batch_graphs([a, b])
    assert (g.n_nodes, g.n_edges, g.n_graphs) == (8, 6, 2)
    assert np.array_equal(g.senders[4:], b.senders + 3)


def test_permute_sample_relabels():
    s = _sample(4, 5, 2)
    perm = np.array([2, 0, 3, 1])
    p = mg.permute_sample(s, perm)
    assert np.array_equal(p.node_features[perm], s.node_features)
    assert np.array_equal(p.senders, perm[s.senders])


def test_scene_permuted_is_consistent(block_scene):
    sc = block_scene
    perm = np.random.default_rng(0).permutation(sc.n_nodes)
    p = sc.permuted(perm)
    assert np.array_equal(p.positions[:, perm], sc.positions)
    assert np.array_equal(p.kinds[perm], sc.kinds)
    s, r = mg.scene_edges(sc, sc.positions[3])
    ps, pr = mg.scene_edges(p, p.positions[3])
    assert _edge_set(perm[s], perm[r]) == _edge_set(ps, pr)


# ---------------------------------------------------------------- dataset files


def test_dataset_roundtrip(tmp_path):
    from m3gn import datagen

    trajs = datagen.generate("block", 3, seed=1, kappa_set=(1.0,), n=4, n_frames=6)
    norm = mg.Normalizer.from_arrays([t.mesh for t in trajs])
    mg.save_dataset(tmp_path, "block", trajs, {"train": [0, 1], "test": [2]}, norm)
    ds = mg.load_dataset(tmp_path)
    assert ds.task == "block" and ds.has_collider and not ds.has_force
    assert ds.manifest["T"] == 6 and ds.manifest["V"] == 16 and ds.manifest["d"] == 2
    for a, b in zip(trajs, ds.trajectories):
        assert np.array_equal(a.mesh.astype(np.float32), b.mesh)
        assert np.array_equal(a.cells, b.cells) and np.array_equal(a.mesh_kinds, b.mesh_kinds)
        assert a.material == b.material
    raw = np.fromfile(tmp_path / "traj_00000" / "positions.bin", dtype="<f4")
    assert raw.size == 6 * 16 * 2
    assert len(ds.split("train")) == 2
    assert np.abs(ds.split("test")[0].mesh).max() <= 1.5


def test_missing_manifest(tmp_path):
    with pytest.raises(OSError):
        mg.load_dataset(tmp_path)


def test_scene_from_trajectory_counts():
    sc = small_block(n=4)
    assert sc.n_nodes == 16 + 8
    assert int(sc.has_collider) == 1
    assert sc.moving_mask().sum() == 12  # bottom row fixed
    assert np.allclose(sc.shifted([1.0, 0.0]).positions - sc.positions, [1.0, 0.0])
