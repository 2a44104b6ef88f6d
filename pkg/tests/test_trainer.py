"""Trainer: config plumbing, Adam, phase isolation, and bit-exact resume."""

import numpy as np
import pytest
from dataclasses import replace

import asvae.autodiff as ad
import asvae.networks as net
from asvae import trainer
from asvae.autodiff import Tensor
from asvae.checkpoint import load_checkpoint
from asvae.errors import ConfigError, NumericsError, ShapeError
from asvae.rng import RngStream

TINY = dict(
    dataset="mixture2d",
    n_samples=64,
    batch_size=16,
    latent_dim=1,
    hidden=(8,),
    max_epochs=3,
    patience=10,
    seed=5,
)


def tiny_config(**overrides):
    kw = dict(TINY)
    kw.update(overrides)
    return trainer.TrainConfig(**kw)


# ---------------------------------------------------------------------------
# Config text round trip and validation
# ---------------------------------------------------------------------------


def test_config_text_round_trip_preserves_every_field():
    cfg = tiny_config(mode="asvae-g", learning_rate=3.25e-5, hidden=(8, 3), disc_dropout=0.25)
    text = trainer.config_to_text(cfg)
    values = dict(line.split("=", 1) for line in text.splitlines())
    back = trainer.config_from_dict(values)
    assert back == cfg
    assert isinstance(back.hidden, tuple)


def test_config_from_dict_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError, match="unknown config key"):
        trainer.config_from_dict({"momentum": "0.9"})
    with pytest.raises(ConfigError, match="bad value"):
        trainer.config_from_dict({"batch_size": "many"})
    with pytest.raises(ConfigError, match="bad value"):
        trainer.config_from_dict({"hidden": "8,wide"})


def test_config_from_dict_overrides_a_base_config():
    base = tiny_config(mode="vae")
    out = trainer.config_from_dict({"max_epochs": "7"}, base=base)
    assert out.max_epochs == 7
    assert out.mode == "vae"
    assert base.max_epochs == TINY["max_epochs"]


@pytest.mark.parametrize(
    "bad",
    [
        {"mode": "wgan"},
        {"disc_objective": "trick"},
        {"batch_size": 1},
        {"latent_dim": 0},
        {"learning_rate": -1e-4},
        {"beta1": 1.0},
        {"beta2": -0.1},
        {"adam_eps": 0.0},
        {"disc_steps": 0},
        {"max_epochs": 0},
        {"patience": 0},
        {"val_fraction": 0.0},
        {"val_fraction": 1.0},
        {"n_samples": 3},
        {"hidden": ()},
        {"hidden": (8, 0)},
        {"likelihood": "poisson"},
        {"activation": "relu6"},
        {"mixture_k": 0},
        {"mixture_separation": 0.0},
    ],
)
def test_config_validation_rejects(bad):
    with pytest.raises(ConfigError):
        tiny_config(**bad)


def test_zero_learning_rate_is_a_legal_noop_config():
    assert tiny_config(learning_rate=0.0).learning_rate == 0.0


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def reference_adam_run(init, grads_seq, lr, b1, b2, eps):
    """Textbook Adam, written independently of the trainer."""
    theta = {k: v.copy() for k, v in init.items()}
    m = {k: np.zeros_like(v) for k, v in init.items()}
    v = {k: np.zeros_like(val) for k, val in init.items()}
    for t, grads in enumerate(grads_seq, start=1):
        for k in theta:
            g = grads.get(k, np.zeros_like(theta[k]))
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            mhat = m[k] / (1 - b1**t)
            vhat = v[k] / (1 - b2**t)
            theta[k] = theta[k] - lr * mhat / (np.sqrt(vhat) + eps)
    return theta


def test_adam_matches_textbook_reference_bit_for_bit():
    stream = RngStream(17)
    init = {"w": stream.normal((3, 2)), "b": stream.normal((2,))}
    grads_seq = [{"w": stream.normal((3, 2)), "b": stream.normal((2,))} for _ in range(30)]
    params = {k: Tensor(v, requires_grad=True) for k, v in init.items()}
    state = trainer.init_adam(params)
    for grads in grads_seq:
        params = trainer.adam_step(params, grads, state, 1e-3, 0.9, 0.999, 1e-8)
    expected = reference_adam_run(init, grads_seq, 1e-3, 0.9, 0.999, 1e-8)
    for k in init:
        np.testing.assert_array_equal(params[k].data, expected[k])
    assert state.t == 30


def test_adam_missing_gradient_decays_moments_only():
    params = {"w": Tensor(np.ones(2), requires_grad=True)}
    state = trainer.init_adam(params)
    params = trainer.adam_step(params, {"w": np.array([1.0, -1.0])}, state, 0.1)
    moved = params["w"].data.copy()
    params = trainer.adam_step(params, {}, state, 0.1)
    expected = reference_adam_run(
        {"w": np.ones(2)}, [{"w": np.array([1.0, -1.0])}, {}], 0.1, 0.9, 0.999, 1e-8
    )
    np.testing.assert_array_equal(params["w"].data, expected["w"])
    assert np.any(params["w"].data != moved)


def test_adam_first_step_size_is_bounded_by_lr():
    params = {"w": Tensor(np.zeros(3), requires_grad=True)}
    state = trainer.init_adam(params)
    g = np.array([1e-3, 1.0, 1e3])
    out = trainer.adam_step(params, {"w": g}, state, 0.01)
    np.testing.assert_allclose(np.abs(out["w"].data), 0.01 * np.abs(g) / (np.abs(g) + 1e-8))


def test_adam_returns_fresh_trainable_leaves():
    before = Tensor(np.ones(2), requires_grad=True)
    params = {"w": before}
    out = trainer.adam_step(params, {"w": np.ones(2)}, trainer.init_adam(params), 0.1)
    assert out["w"] is not before
    assert out["w"].requires_grad
    np.testing.assert_array_equal(before.data, np.ones(2))


# ---------------------------------------------------------------------------
# Groups, early stopping, splits
# ---------------------------------------------------------------------------


def test_parameter_groups_are_disjoint_and_exhaustive():
    bundle = net.build_bundle(2, 1, RngStream(0), hidden=(4,))
    seen: set[int] = set()
    total = 0
    for group in ("gen", "d1", "d2"):
        for name, p in trainer.collect_group(bundle, group).items():
            assert id(p) not in seen
            seen.add(id(p))
            total += 1
    n_all = sum(len(m.params) for m in bundle.networks().values())
    assert total == n_all


def test_assign_group_swaps_only_named_parameters():
    bundle = net.build_bundle(2, 1, RngStream(0), hidden=(4,))
    old_dec = {k: p.data.copy() for k, p in bundle.decoder.params.items()}
    group = trainer.collect_group(bundle, "d1")
    trainer.assign_group(bundle, {k: Tensor(p.data + 1.0, requires_grad=True) for k, p in group.items()})
    for k, arr in old_dec.items():
        np.testing.assert_array_equal(bundle.decoder.params[k].data, arr)
    for k, p in trainer.collect_group(bundle, "d1").items():
        np.testing.assert_array_equal(p.data, group[k].data + 1.0)


def test_early_stopping_follows_strict_improvement():
    best = float("inf")
    count = 0
    stops = []
    for val in [5.0, 4.0, 4.0, 4.0, 4.0]:
        best, count, improved = trainer.early_stop_update(val, best, count)
        stops.append(trainer.should_stop(count, 3))
    assert best == 4.0
    assert stops == [False, False, False, False, True]


def test_split_indices_partition_and_determinism():
    tr, va = trainer.split_indices(50, 0.2, seed=3)
    tr2, va2 = trainer.split_indices(50, 0.2, seed=3)
    np.testing.assert_array_equal(tr, tr2)
    np.testing.assert_array_equal(va, va2)
    assert len(va) == 10
    assert sorted(np.concatenate([tr, va])) == list(range(50))
    assert set(tr).isdisjoint(va)
    with pytest.raises(ConfigError):
        trainer.split_indices(2, 0.9, seed=3)


def test_dataset_routing_rejects_unknown_names():
    with pytest.raises(ConfigError, match="dataset"):
        trainer.build_dataset(tiny_config(dataset="imagenet"))


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------


def param_bytes(mlp):
    return {k: p.data.tobytes() for k, p in mlp.params.items()}


def changed(mlp, before):
    return any(p.data.tobytes() != before[k] for k, p in mlp.params.items())


def phase_state(mode, **overrides):
    cfg = tiny_config(mode=mode, **overrides)
    state = trainer.init_train_state(cfg, 2)
    x = RngStream(77).normal((cfg.batch_size, 2))
    x_b = RngStream(78).normal((cfg.batch_size, 2))
    return state, x, x_b


@pytest.mark.parametrize(
    "mode,d1_moves,d2_moves",
    [("asvae", True, True), ("asvae-r", True, False), ("asvae-g", False, True), ("ali", True, False)],
)
def test_disc_phase_updates_exactly_the_active_discriminators(mode, d1_moves, d2_moves):
    state, x, x_b = phase_state(mode)
    before = {name: param_bytes(m) for name, m in state.bundle.networks().items()}
    with ad.unchecked():
        trainer.disc_phase(state, x, x_b, None)
    nets = state.bundle.networks()
    assert not changed(nets["enc"], before["enc"])
    assert not changed(nets["dec"], before["dec"])
    assert changed(nets["d1"], before["d1"]) == d1_moves
    assert changed(nets["d2"], before["d2"]) == d2_moves


@pytest.mark.parametrize("mode", ["vae", "asvae", "asvae-r", "asvae-g", "ali"])
def test_gen_phase_updates_generator_and_freezes_discriminators(mode):
    state, x, _ = phase_state(mode)
    before = {name: param_bytes(m) for name, m in state.bundle.networks().items()}
    with ad.unchecked():
        report = trainer.gen_phase(state, x, None)
    nets = state.bundle.networks()
    assert changed(nets["enc"], before["enc"])
    assert changed(nets["dec"], before["dec"])
    assert not changed(nets["d1"], before["d1"])
    assert not changed(nets["d2"], before["d2"])
    assert np.isfinite(report.total)


def test_minmax_disc_objective_updates_active_discs():
    state, x, x_b = phase_state("asvae", disc_objective="minmax")
    before = {name: param_bytes(m) for name, m in state.bundle.networks().items()}
    with ad.unchecked():
        trainer.disc_phase(state, x, x_b, None)
    nets = state.bundle.networks()
    assert changed(nets["d1"], before["d1"])
    assert changed(nets["d2"], before["d2"])
    assert not changed(nets["enc"], before["enc"])


def test_train_epoch_needs_two_batches_for_the_product_game():
    cfg = tiny_config(mode="asvae", batch_size=32)
    state = trainer.init_train_state(cfg, 2)
    x = RngStream(1).normal((40, 2))
    with pytest.raises(ConfigError, match="2 batches"):
        trainer.train_epoch(state, x)
    with pytest.raises(ConfigError, match="batch_size"):
        trainer.train_epoch(state, x[:10])


def test_train_epoch_reports_mode_components():
    cfg = tiny_config(mode="vae")
    state = trainer.init_train_state(cfg, 2)
    x = RngStream(2).normal((40, 2))
    metrics = trainer.train_epoch(state, x)
    assert set(metrics) == {"total", "recon_x", "kl"}
    assert state.opt_d1.t == 0 and state.opt_d2.t == 0
    assert state.opt_gen.t == 2  # two full batches of 16 from 40 rows


def test_validation_metric_is_stateless_and_repeatable():
    cfg = tiny_config(mode="asvae")
    state = trainer.init_train_state(cfg, 2)
    val_x = RngStream(3).normal((10, 2))
    noise_before = state.noise.state()
    a = trainer.validation_metric(state.bundle, "asvae", val_x, seed=5, epoch=2)
    b = trainer.validation_metric(state.bundle, "asvae", val_x, seed=5, epoch=2)
    c = trainer.validation_metric(state.bundle, "asvae", val_x, seed=5, epoch=3)
    assert a == b
    assert a != c
    assert state.noise.state() == noise_before


# ---------------------------------------------------------------------------
# Checkpoint conversion and full runs
# ---------------------------------------------------------------------------


def test_state_checkpoint_round_trip_in_memory():
    state, x, x_b = phase_state("asvae")
    with ad.unchecked():
        trainer.disc_phase(state, x, x_b, None)
        trainer.gen_phase(state, x, None)
    state.epoch = 4
    state.best_val = -1.25
    state.epochs_since_improve = 2
    back = trainer.state_from_checkpoint(trainer.state_to_checkpoint(state), 2)
    assert back.config == state.config
    assert back.epoch == 4
    assert back.best_val == -1.25
    assert back.epochs_since_improve == 2
    assert back.noise.state() == state.noise.state()
    assert back.shuffle.state() == state.shuffle.state()
    assert (back.opt_gen.t, back.opt_d1.t, back.opt_d2.t) == (
        state.opt_gen.t, state.opt_d1.t, state.opt_d2.t,
    )
    for name, m in state.bundle.networks().items():
        other = back.bundle.networks()[name]
        for k, p in m.params.items():
            np.testing.assert_array_equal(other.params[k].data, p.data)
    for a, b in ((state.opt_gen, back.opt_gen), (state.opt_d1, back.opt_d1)):
        for k in a.m:
            np.testing.assert_array_equal(a.m[k], b.m[k])
            np.testing.assert_array_equal(a.v[k], b.v[k])


def test_run_writes_expected_artifacts(tmp_path, monkeypatch):
    monkeypatch.setenv("ASVAE_FIXED_CLOCK", "0")
    cfg = tiny_config(mode="vae")
    result = trainer.run_training(cfg, run_dir=tmp_path / "run")
    assert (tmp_path / "run" / "config.resolved.txt").read_text() == trainer.config_to_text(cfg)
    assert (tmp_path / "run" / "last.ckpt").exists()
    assert (tmp_path / "run" / "best.ckpt").exists()
    lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(trainer.METRIC_COLUMNS)
    assert len(lines) == 1 + len(result.metrics)
    row = lines[1].split(",")
    assert len(row) == len(trainer.METRIC_COLUMNS)
    assert row[0] == "1"
    assert row[3] == "" and row[4] == "" and row[5] == ""  # no adversarial terms in vae


def test_same_config_and_seed_reproduce_metrics_bytes(tmp_path, monkeypatch):
    monkeypatch.setenv("ASVAE_FIXED_CLOCK", "0")
    cfg = tiny_config(mode="asvae", max_epochs=2)
    trainer.run_training(cfg, run_dir=tmp_path / "a")
    trainer.run_training(cfg, run_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()


def test_resumed_run_bit_matches_the_straight_run(tmp_path, monkeypatch):
    monkeypatch.setenv("ASVAE_FIXED_CLOCK", "0")
    straight = tiny_config(mode="asvae", max_epochs=4)
    trainer.run_training(straight, run_dir=tmp_path / "straight")

    first_leg = replace(straight, max_epochs=2)
    trainer.run_training(first_leg, run_dir=tmp_path / "resumed")
    ckpt = load_checkpoint(tmp_path / "resumed" / "last.ckpt")
    resumed_state = trainer.state_from_checkpoint(ckpt, 2)
    trainer.run_training(straight, run_dir=tmp_path / "resumed", resume_state=resumed_state)

    for name in ("last.ckpt", "metrics.csv"):
        assert (tmp_path / "resumed" / name).read_bytes() == (
            tmp_path / "straight" / name
        ).read_bytes(), name


def test_non_finite_loss_aborts_with_diagnostic_checkpoint(tmp_path):
    cfg = tiny_config(mode="vae", max_epochs=1)
    state = trainer.init_train_state(cfg, 2)
    w0 = state.bundle.encoder.params["w0"]
    with ad.unchecked():
        state.bundle.encoder.params["w0"] = Tensor(
            np.full(w0.shape, np.inf), requires_grad=True
        )
    features = RngStream(4).normal((64, 2))
    with pytest.raises(NumericsError, match="non-finite"):
        trainer.train_on_arrays(cfg, features, run_dir=tmp_path, resume_state=state)
    assert (tmp_path / "abort.ckpt").exists()


def test_train_on_arrays_rejects_non_matrix_features():
    with pytest.raises(ShapeError):
        trainer.train_on_arrays(tiny_config(), np.zeros((4, 2, 2)))
