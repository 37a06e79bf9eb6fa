import numpy as np
import pytest

from m3gn import numerics as nx
from m3gn import prodmp
from m3gn.errors import ConfigError, ContractError
from m3gn.meshgraph import NodeKind
from m3gn.model import M3GN, ContextSet, LookupTable, M3GNConfig, input_scales
from m3gn.trainer import compute_loss

from conftest import small_block, toy_scene


def _model(ordered=False, dtype="float64", seed=0, **kw):
    base = dict(latent=8, latent_task=4, steps=2, decoder_hidden=8, tau_hidden=4, n_weights=6, frame_dt=0.1, head_init_scale=1.0)
    base.update(kw)
    return M3GN(M3GNConfig(ordered=ordered, dtype=dtype, **base), seed=seed)


# ---------------------------------------------------------------- context set


def test_context_set_masks_future_body_positions(block_scene):
    ctx = ContextSet(block_scene, 4)
    body = block_scene.kinds != NodeKind.COLLIDER
    assert ctx.anchor == 3 and ctx.horizon == block_scene.n_steps - 4
    assert np.all(np.isnan(ctx.positions[4:, body]))
    assert np.array_equal(ctx.positions[:4], block_scene.positions[:4])
    assert np.array_equal(ctx.positions[:, ~body], block_scene.positions[:, ~body])


@pytest.mark.parametrize("n", [0, 1, 12])
def test_context_size_bounds(block_scene, n):
    with pytest.raises(ContractError):
        ContextSet(block_scene, n)


def test_config_checks():
    with pytest.raises(ConfigError):
        M3GNConfig(history=0)
    with pytest.raises(ConfigError):
        M3GNConfig(dim=4)
    cfg = M3GNConfig(latent=8)
    assert M3GNConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- context encoder


def test_context_pairs_carry_next_displacement(block_scene):
    m = _model(vel_scale=3.0)
    ctx = ContextSet(block_scene, 5)
    pairs = m.context_pairs(ctx)
    assert len(pairs) == 4
    for t, (x, s, r, e) in enumerate(pairs):
        assert x.shape == (block_scene.n_nodes, m.cfg.base_width + 2)
        assert np.allclose(x[:, -2:], 3.0 * (block_scene.positions[t + 1] - block_scene.positions[t]))
        assert e.shape == (len(s), 3)


def test_context_order_invariance_exact(block_scene):
    m = _model(ordered=True)
    ctx = ContextSet(block_scene, 6)
    pairs = m.context_pairs(ctx)
    z = m.encode_pairs(pairs, block_scene.n_nodes).data
    for seed in range(3):
        order = np.random.default_rng(seed).permutation(len(pairs))
        assert np.array_equal(m.encode_pairs([pairs[i] for i in order], block_scene.n_nodes).data, z)
    # the max is idempotent: repeating a transition changes nothing
    assert np.array_equal(m.encode_pairs(pairs + pairs[:2], block_scene.n_nodes).data, z)


def test_latent_is_max_of_single_pair_latents(block_scene):
    m = _model()
    pairs = m.context_pairs(ContextSet(block_scene, 5))
    single = np.stack([m.encode_pairs([p], block_scene.n_nodes).data for p in pairs])
    assert np.abs(m.encode_pairs(pairs, block_scene.n_nodes).data - single.max(axis=0)).max() < 1e-12


# ---------------------------------------------------------------- lookup table


def test_lookup_matches_direct_tables():
    cfg = M3GNConfig(n_weights=6)
    tab = LookupTable(cfg, 2.0)
    s = np.arange(400) * 0.0043
    direct = prodmp.assemble_basis_tables(cfg.prodmp, s, 1.0)
    got = tab.lookup(nx.Tensor(s), np.float64).data
    scale = np.abs(direct.Phi).max()
    assert np.abs(got[:, :-1] - direct.Phi).max() < 1e-5 * scale
    assert np.abs(got[:, -1] - direct.y2).max() < 1e-8
    assert tab.values[0].tolist() == [0.0] * 8 and tab.slopes[0, -1] == 1.0


def test_weight_scale_normalises_unit_interval():
    tab = LookupTable(M3GNConfig(n_weights=6), 2.0)
    unit = np.arange(len(tab.values)) * tab.spacing <= 1.0
    peaks = np.abs(tab.values[unit, :-1] * tab.weight_scale).max(axis=0)
    assert np.allclose(peaks, 1.0)


def test_table_sizes_are_powers_of_two():
    m = _model()
    assert m.table(10) is m.table(32)
    assert m.table(33) is not m.table(32)
    assert m.table(33).s_max >= 64 * 0.1 / 0.3


# ---------------------------------------------------------------- rollout


def test_rollout_starts_at_anchor_and_respects_kinds(block_scene):
    m = _model()
    ctx = ContextSet(block_scene, 4)
    out = m.rollout(ctx)
    assert out.shape == (block_scene.n_steps - 3, block_scene.n_nodes, 2)
    assert np.array_equal(out[0], block_scene.positions[3])
    fixed = block_scene.kinds == NodeKind.FIXED
    coll = block_scene.kinds == NodeKind.COLLIDER
    assert np.array_equal(out[:, fixed], np.broadcast_to(block_scene.positions[3, fixed], out[:, fixed].shape))
    assert np.array_equal(out[:, coll], block_scene.positions[3:, coll])
    assert np.all(np.isfinite(out))


def test_zero_weights_continue_anchor_velocity_smoothly():
    # with a zero head only the homogeneous term remains: rel = tau v Y2(t/tau), initial slope v
    sc = toy_scene(n_frames=30)
    m = _model(frame_dt=0.01)
    for name, p in m.params.items():
        if name.startswith("sim.dec.l1"):
            p.data[...] = 0.0
    f = m.forward(ContextSet(sc, 3))
    rel = f.rel.data.reshape(-1, 5, 2)
    v = (sc.positions[2] - sc.positions[1]) / 0.01
    tau = float(f.tau.data.ravel()[0])
    t = np.arange(rel.shape[0]) * 0.01
    y2 = (t / tau) * np.exp(-12.5 * t / tau)
    assert np.abs(rel[:, :3] - tau * y2[:, None, None] * v[None, :3]).max() < 1e-9
    assert np.all(rel[:, 3:] == 0)


def test_call_counter(block_scene):
    m = _model()
    for n in (2, 5, 9):
        m.calls.clear()
        m.rollout(ContextSet(block_scene, n))
        assert m.calls == {"context": n - 1, "simulator": 1}


def test_tau_inside_range_and_near_one_at_init(block_scene):
    m = _model(dtype="float32")
    tau = float(m.forward(ContextSet(block_scene, 4)).tau.data.ravel()[0])
    assert 0.3 < tau < 3.0
    assert abs(tau - 1.0) < 0.2


def test_translation_equivariance(block_scene):
    m = _model()
    ctx = ContextSet(block_scene, 5)
    shifted = ContextSet(block_scene.shifted([0.37, 0.0]), 5)
    diff = m.rollout(shifted) - 0.37 * np.array([1.0, 0.0]) - m.rollout(ctx)
    assert np.abs(diff).max() < 1e-9


def test_permutation_equivariance_exact(block_scene):
    m = _model(ordered=True)
    perm = np.random.default_rng(3).permutation(block_scene.n_nodes)
    a = m.rollout(ContextSet(block_scene, 5))
    b = m.rollout(ContextSet(block_scene.permuted(perm), 5))
    assert np.array_equal(b[:, perm], a)


def test_loss_equals_rollout_mse(block_scene):
    m = _model()
    ctx = ContextSet(block_scene, 4)
    loss = m.loss(ctx).item()
    out = m.rollout(ctx)
    ref = compute_loss(out[1:], block_scene.positions[4:], block_scene.moving_mask())
    assert loss == pytest.approx(ref, rel=1e-10)


def test_gradients_on_toy_graph_every_group():
    sc = toy_scene()
    m = _model(frame_dt=0.1, radius=0.3)
    ctx = ContextSet(sc, 3)
    with nx.Tape() as tape:
        loss = m.loss(ctx)
    nx.backward(tape, loss, m.params)
    fd = nx.finite_difference_grads(lambda: m.loss(ctx).item(), m.params, 1e-6)
    groups = {}
    for name in m.params.names():
        g = name.split(".")[0]
        groups.setdefault(g, []).append(nx.relative_error(m.params.grads[name], fd[name], floor=1e-8))
    assert set(groups) == {"ctx", "sim", "tau"}
    for g, errs in groups.items():
        assert max(errs) < 1e-4, g


def test_save_load_roundtrip(tmp_path, block_scene):
    m = _model(dtype="float32")
    m.save(tmp_path)
    m2 = M3GN.load(tmp_path)
    assert m2.cfg == m.cfg
    ctx = ContextSet(block_scene, 4)
    assert np.array_equal(m.rollout(ctx), m2.rollout(ctx))


def test_input_scales(block_scenes):
    sc = input_scales(block_scenes)
    disp = np.concatenate([np.diff(s.positions, axis=0)[:, s.moving_mask()].ravel() for s in block_scenes])
    assert sc["vel_scale"] == pytest.approx(1.0 / disp.std())
    assert sc["edge_scale"] > 0


def test_latent_shape(block_scene):
    m = _model()
    assert m.latent(ContextSet(block_scene, 3)).shape == (block_scene.n_nodes, 4)


def test_small_block_helper_is_deterministic():
    assert np.array_equal(small_block(seed=5).positions, small_block(seed=5).positions)
