import csv

import numpy as np
import pytest

from m3gn import numerics as nx
from m3gn.errors import ConfigError, ContractError, NumericError
from m3gn.mgn import MGN, MGNConfig
from m3gn.model import M3GN, ContextSet, M3GNConfig, input_scales
from m3gn.trainer import Adam, TrainConfig, compute_loss, train, validation_mse


def _m3gn(scenes, seed=0, dtype="float32"):
    cfg = M3GNConfig(latent=8, latent_task=4, steps=1, decoder_hidden=8, tau_hidden=4, n_weights=6, frame_dt=1 / 11, dtype=dtype, **input_scales(scenes))
    return M3GN(cfg, seed=seed)


# ---------------------------------------------------------------- loss


def test_compute_loss_examples():
    x = np.random.default_rng(0).normal(size=(2, 3, 2))
    assert compute_loss(x, x) == 0.0
    assert compute_loss(x + 1.0, x) == pytest.approx(1.0)
    y = np.arange(12.0).reshape(2, 3, 2) / 10
    z = np.zeros((2, 3, 2))
    assert compute_loss(y, z) == pytest.approx(sum(v * v for v in y.ravel()) / 12, abs=1e-15)


def test_compute_loss_mask_and_shape():
    pred, truth = np.zeros((2, 3, 2)), np.zeros((2, 3, 2))
    truth[:, 0] = 2.0
    assert compute_loss(pred, truth, np.array([False, True, True])) == 0.0
    assert compute_loss(pred, truth, np.array([True, False, False])) == 4.0
    with pytest.raises(ContractError):
        compute_loss(pred, np.zeros((2, 3, 3)))


@pytest.mark.parametrize("kw", [dict(t_min=1), dict(t_min=5, t_max=4), dict(t_max=12), dict(lr=0.0)])
def test_config_checks(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw).check(12)


# ---------------------------------------------------------------- optimiser


def test_adam_first_step_is_signed_lr():
    store = nx.ParamStore(np.float64)
    p = store.add("p", np.array([1.0, -2.0, 3.0]))
    store.grads["p"] = np.array([0.5, -4.0, 1e-3])
    Adam(store, 0.1).step()
    assert np.allclose(p.data, [0.9, -1.9, 2.9], atol=1e-6)


def test_adam_clips_global_norm():
    store = nx.ParamStore(np.float64)
    store.add("a", np.zeros(2))
    store.add("b", np.zeros(1))
    store.grads["a"], store.grads["b"] = np.array([3.0, 0.0]), np.array([4.0])
    opt = Adam(store, 0.1)
    assert opt.step(clip_norm=1.0) == pytest.approx(5.0)
    # first moment holds the clipped gradient
    assert np.allclose(opt.m["a"], 0.1 * np.array([0.6, 0.0]))


# ---------------------------------------------------------------- training loop


def test_memorisation_single_trajectory(block_scene):
    model = _m3gn([block_scene])
    cfg = TrainConfig(lr=3e-3, epochs=200, t_min=3, t_max=3, seed=0)
    res = train(model, [block_scene], [], cfg)
    first, last = res.curve[0]["train_loss"], res.curve[-1]["train_loss"]
    assert last < first / 10


def test_training_is_deterministic(block_scenes):
    cfg = TrainConfig(epochs=2, t_min=2, t_max=6, seed=3)
    a = train(_m3gn(block_scenes), block_scenes[:3], block_scenes[3:], cfg)
    b = train(_m3gn(block_scenes), block_scenes[:3], block_scenes[3:], cfg)
    assert a.curve == b.curve


def test_fixed_context_size_counter(block_scenes):
    res = train(_m3gn(block_scenes), block_scenes, [], TrainConfig(epochs=3, t_min=4, t_max=4))
    assert res.context_sizes == {4: 12}


def test_context_sizes_cover_range(block_scenes):
    res = train(_m3gn(block_scenes), block_scenes, [], TrainConfig(epochs=15, t_min=2, t_max=4))
    assert set(res.context_sizes) == {2, 3, 4}


def test_every_parameter_receives_gradient(block_scene):
    model = _m3gn([block_scene], dtype="float64")
    model.params.zero_grad()
    with nx.Tape() as tape:
        loss = model.loss(ContextSet(block_scene, 4))
    nx.backward(tape, loss, model.params)
    dead = [n for n, g in model.params.grads.items() if not np.any(g != 0)]
    assert dead == []


def test_mgn_every_parameter_receives_gradient(block_scene):
    model = MGN(MGNConfig(latent=8, steps=2, decoder_hidden=8, dtype="float64"))
    model.params.zero_grad()
    with nx.Tape() as tape:
        loss = model.loss(block_scene, np.random.default_rng(0))
    nx.backward(tape, loss, model.params)
    assert all(np.any(g != 0) for g in model.params.grads.values())


def test_best_checkpoint_restored_and_saved(tmp_path, block_scenes):
    model = _m3gn(block_scenes)
    res = train(model, block_scenes[:3], block_scenes[3:], TrainConfig(epochs=3, t_min=2, t_max=5), out_dir=tmp_path)
    assert res.best_epoch >= 0
    assert validation_mse(model, block_scenes[3:], 2) == pytest.approx(res.best_val, rel=1e-12)
    loaded = M3GN.load(tmp_path)
    ctx = ContextSet(block_scenes[3], 3)
    assert np.array_equal(loaded.rollout(ctx), model.rollout(ctx))
    with open(tmp_path / "loss_curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2]


def test_mgn_trains(block_scenes):
    model = MGN(MGNConfig(latent=8, steps=1, decoder_hidden=8, **input_scales(block_scenes)))
    res = train(model, block_scenes[:3], block_scenes[3:], TrainConfig(epochs=2, t_min=2, t_max=2))
    assert np.isfinite(res.best_val) and len(res.curve) == 2


class _FlakyModel(M3GN):
    """Returns a non-finite loss on selected calls."""

    bad_calls: set = set()

    def loss(self, ctx):
        self.n_calls = getattr(self, "n_calls", 0) + 1
        out = super().loss(ctx)
        if self.n_calls in self.bad_calls:
            return out * float("nan")
        return out


def _flaky(scenes, bad):
    m = _FlakyModel(_m3gn(scenes).cfg)
    m.bad_calls = bad
    return m


def test_nan_halves_lr_once(block_scenes):
    m = _flaky(block_scenes, {6})
    res = train(m, block_scenes, [], TrainConfig(epochs=3, lr=1e-3, t_max=5))
    assert res.lr_halved
    assert len(res.curve) == 3


def test_second_nan_aborts(block_scenes):
    m = _flaky(block_scenes, {2, 7})
    with pytest.raises(NumericError):
        train(m, block_scenes, [], TrainConfig(epochs=3, t_max=5))


def test_wall_clock_budget_stops_early(block_scenes):
    res = train(_m3gn(block_scenes), block_scenes, [], TrainConfig(epochs=50, t_max=5, wall_clock=0.0))
    assert len(res.curve) == 1


def test_empty_training_split():
    with pytest.raises(ContractError):
        train(None, [], [], TrainConfig())
