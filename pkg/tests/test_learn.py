import numpy as np
import pytest

from conftest import chain_network
from controller import Partition, ReactiveBox, analytic_lipschitz, build_bundle, phi_raw, stable_lipschitz_cap
from errors import TrainingError
from grid import PowerScenario, sensitivity
from icnn import is_convex_structure
from learn import (
    DatasetConfig,
    LabeledDataset,
    TrainConfig,
    certifiable_train_config,
    evaluate,
    generate_dataset,
    load_dataset,
    loss_gradients,
    prediction_mse,
    save_dataset,
    split_indices,
    train,
)
from opf import solve_opf


@pytest.fixture
def net():
    return chain_network(4, controllable=(2, 4))


@pytest.fixture
def box():
    return ReactiveBox(np.full(2, -0.3), np.full(2, 0.3))


def _day(net, n_points, seed, day=0):
    rng = np.random.default_rng(seed)
    return [
        PowerScenario(rng.uniform(-0.3, 0.1, net.n), rng.uniform(-0.05, 0.0, len(net.uncontrollable)),
                      label=f"day{day} p{k}")
        for k in range(n_points)
    ]


def _quiet(**kwargs):
    params = {'workers': 1, 'show_progress': False}
    params.update(kwargs)
    return DatasetConfig(**params)


def _realisable_dataset(n=200, weight=2.0, seed=0):
    """q* = -weight (v - 1) on two buses: an FC quadratic ICNN fits it exactly"""
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.92, 1.08, size=(n, 2))
    q = -weight * (v - 1.0)
    day = np.repeat([0, 1], n // 2)
    train_idx, val_idx = split_indices(day, 1)
    return LabeledDataset(v, q, (2, 4), day, train_idx, val_idx)


class TestDataset:
    def test_augmentation_multiplies_samples(self, net, box):
        data = generate_dataset(net, [_day(net, 5, 0)], box, cfg=_quiet(augmentation_factor=3))
        assert len(data) == 20
        assert data.skipped == 0

    def test_no_augmentation_reproduces_oracle(self, net, box):
        day = _day(net, 4, 1)
        data = generate_dataset(net, [day], box, cfg=_quiet(augmentation_factor=0, augmentation_noise=0.0))
        assert len(data) == 4
        mat = sensitivity(net)
        for k, scen in enumerate(day):
            np.testing.assert_allclose(data.q_star[k], solve_opf(mat, scen, box).q_star, atol=1e-12)

    def test_labels_in_box_and_deterministic(self, net, box):
        days = [_day(net, 3, 2, 0), _day(net, 3, 3, 1)]
        a = generate_dataset(net, days, box, cfg=_quiet(seed=4))
        b = generate_dataset(net, days, box, cfg=_quiet(seed=4))
        assert box.contains(a.q_star)
        np.testing.assert_array_equal(a.q_star, b.q_star)
        assert a.provenance == b.provenance

    def test_last_day_is_held_out(self, net, box):
        days = [_day(net, 3, 2, 0), _day(net, 3, 3, 1)]
        data = generate_dataset(net, days, box, cfg=_quiet(augmentation_factor=1))
        assert set(data.day[data.val_idx]) == {1}
        assert set(data.day[data.train_idx]) == {0}

    def test_split_indices(self):
        train_idx, val_idx = split_indices(np.array([0, 0, 1, 1, 2]), 1)
        assert val_idx.tolist() == [4]
        train_idx, val_idx = split_indices(np.array([0, 0]), 1)
        assert train_idx.tolist() == [0, 1] and val_idx.size == 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DatasetConfig(augmentation_noise=0.9)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)

    def test_save_and_load(self, net, box, tmp_path):
        data = generate_dataset(net, [_day(net, 3, 5, 0), _day(net, 3, 6, 1)], box, cfg=_quiet())
        path = str(tmp_path / 'labels.csv')
        save_dataset(data, path)
        loaded = load_dataset(path)
        assert loaded.controllable == (2, 4)
        assert loaded.provenance == data.provenance
        np.testing.assert_array_equal(loaded.v_c, data.v_c)
        np.testing.assert_allclose(loaded.q_star, data.q_star, rtol=1e-14, atol=1e-15)
        np.testing.assert_array_equal(loaded.val_idx, data.val_idx)


class TestLoss:
    def test_per_bus_sums_to_total(self):
        rng = np.random.default_rng(0)
        pred, target = rng.normal(size=(2, 10, 3))
        total, per_bus = prediction_mse(pred, target)
        assert total == pytest.approx(per_bus.sum())

    def test_gradient_matches_finite_difference(self, box):
        data = _realisable_dataset(20)
        bundle = build_bundle(Partition(((2, 4),)), box, (2, 4), hidden=(4,), seed=1)
        v, q = data.v_c, data.q_star
        _, grads = loss_gradients(bundle, v, q)
        h = 1e-6
        for layer, name, idx in [(0, 'W_x', (1, 0)), (1, 'W_z', (0, 2)), (0, 'b', (3,))]:
            plus, minus = bundle.models[0].copy(), bundle.models[0].copy()
            getattr(plus.layers[layer], name)[idx] += h
            getattr(minus.layers[layer], name)[idx] -= h
            lp = loss_gradients(bundle.with_models([plus]), v, q)[0]
            lm = loss_gradients(bundle.with_models([minus]), v, q)[0]
            assert getattr(grads[0].layers[layer], name)[idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-4, abs=1e-8)


class TestTraining:
    def test_loss_decreases_and_convexity_kept(self, box):
        data = _realisable_dataset()
        bundle = build_bundle(Partition(((2, 4),)), box, (2, 4), hidden=(8, 8), seed=2)
        before = loss_gradients(bundle, *data.subset('train'))[0]
        trained, history = train(bundle, data, TrainConfig(learning_rate=1e-2, epochs=40, batch_size=32,
                                                           show_progress=False))
        assert list(history.columns) == ['epoch', 'train_loss', 'val_loss']
        assert len(history) == 40
        assert history['train_loss'].iloc[-1] < before
        assert all(is_convex_structure(m) for m in trained.models)
        assert evaluate(trained, data, 'val')[0] < evaluate(bundle, data, 'val')[0]

    def test_callback_every_epoch(self, box):
        data = _realisable_dataset(40)
        bundle = build_bundle(Partition(((2,), (4,))), box, (2, 4), hidden=(4,), seed=3)
        seen = []
        train(bundle, data, TrainConfig(epochs=3, show_progress=False), callback=lambda e, b: seen.append(e))
        assert seen == [1, 2, 3]

    def test_divergence_raises(self, box):
        data = _realisable_dataset(40)
        bundle = build_bundle(Partition(((2, 4),)), box, (2, 4), hidden=(4,), seed=4)
        with pytest.raises(TrainingError) as exc:
            train(bundle, data, TrainConfig(learning_rate=1e8, epochs=200, show_progress=False))
        assert exc.value.learning_rate == 1e8

    def test_mismatched_controllable(self, box):
        data = _realisable_dataset(20)
        bundle = build_bundle(Partition(((1, 3),)), box, (1, 3), hidden=(4,))
        with pytest.raises(ValueError):
            train(bundle, data, TrainConfig(epochs=1, show_progress=False))

    def test_nc_bundle_stays_decoupled(self, box):
        data = _realisable_dataset(60)
        bundle = build_bundle(Partition(((2,), (4,))), box, (2, 4), hidden=(4,), seed=5)
        trained, _ = train(bundle, data, TrainConfig(epochs=5, learning_rate=1e-2, show_progress=False))
        a = phi_raw(trained, np.array([1.0, 1.0]))
        b = phi_raw(trained, np.array([1.0, 1.05]))
        assert a[0] == b[0]

    def test_single_sample_is_memorised(self, box):
        v = np.array([[1.03, 0.96]])
        q = np.array([[-0.06, 0.08]])
        data = LabeledDataset(v, q, (2, 4), np.array([0]), np.array([0]), np.array([], dtype=int))
        bundle = build_bundle(Partition(((2, 4),)), box, (2, 4), hidden=(4,), seed=6)
        trained, history = train(bundle, data, TrainConfig(epochs=300, batch_size=1, show_progress=False))
        assert history['train_loss'].iloc[-1] < 1e-4

    def test_standardisation_sets_scales(self, box):
        data = _realisable_dataset(100)
        bundle = build_bundle(Partition(((2,), (4,))), box, (2, 4), hidden=(4,), seed=7)
        v, q = data.subset('train')
        scaled, _ = train(bundle, data, TrainConfig(epochs=0, show_progress=False))
        for k, model in enumerate(scaled.models):
            in_scale = np.sqrt(np.mean((v[:, k] - 1.0) ** 2))
            assert model.in_scale == pytest.approx(in_scale)
            assert model.out_scale == pytest.approx(in_scale * np.sqrt(np.mean(q[:, k] ** 2)))
        raw, _ = train(bundle, data, TrainConfig(epochs=0, standardize=False, show_progress=False))
        assert [(m.in_scale, m.out_scale) for m in raw.models] == [(1.0, 1.0), (1.0, 1.0)]

    def test_trained_controller_tracks_voltage(self, box):
        data = _realisable_dataset(200)
        bundle = build_bundle(Partition(((2, 4),)), box, (2, 4), hidden=(8, 8), seed=2)
        trained, _ = train(bundle, data, TrainConfig(epochs=100, batch_size=32, show_progress=False))
        _, q_val = data.subset('val')
        constant_mse = float(np.sum(np.var(q_val, axis=0)))
        assert evaluate(trained, data, 'val')[0] < 0.1 * constant_mse
        low = phi_raw(trained, np.array([0.95, 0.95]))
        high = phi_raw(trained, np.array([1.05, 1.05]))
        assert np.all(low - high > 0.1)

    def test_joint_model_beats_decoupled_on_coupled_labels(self, box):
        rng = np.random.default_rng(8)
        v = rng.uniform(0.92, 1.08, size=(400, 2))
        # both buses answer the sum of the deviations; bus-local models cannot see the other half
        q = -np.repeat(np.sum(v - 1.0, axis=1, keepdims=True), 2, axis=1)
        day = np.repeat([0, 1], 200)
        train_idx, val_idx = split_indices(day, 1)
        data = LabeledDataset(v, q, (2, 4), day, train_idx, val_idx)
        cfg = TrainConfig(epochs=150, batch_size=32, show_progress=False)
        fc, _ = train(build_bundle(Partition(((2, 4),)), box, (2, 4), hidden=(8, 8), seed=9), data, cfg)
        nc, _ = train(build_bundle(Partition(((2,), (4,))), box, (2, 4), hidden=(8, 8), seed=9), data, cfg)
        assert evaluate(fc, data, 'val')[0] < evaluate(nc, data, 'val')[0]

    def test_lipschitz_cap_holds_through_training(self, box):
        data = _realisable_dataset(100, weight=20.0)
        bundle = build_bundle(Partition(((2, 4),)), box, (2, 4), hidden=(8,), seed=10)
        trained, _ = train(bundle, data, TrainConfig(epochs=20, lipschitz_cap=5.0, show_progress=False))
        assert analytic_lipschitz(trained) <= 5.0 * (1 + 1e-9)
        assert all(is_convex_structure(m) for m in trained.models)

    def test_certifiable_config(self):
        cfg = certifiable_train_config({'epochs': 3}, 0.1, 1.0)
        assert cfg.epochs == 3
        assert cfg.lipschitz_cap == pytest.approx(0.99 * stable_lipschitz_cap(0.1, 1.0))
        assert certifiable_train_config({'lipschitz_cap': None}, 0.1, 1.0).lipschitz_cap is None
