import json

import numpy as np
import pytest

from errors import CheckpointError, DimensionError
from icnn import (
    cap_lipschitz,
    icnn_forward,
    icnn_input_gradient,
    icnn_param_gradient,
    init_model,
    is_convex_structure,
    lipschitz_bound,
    load_model,
    model_to_dict,
    negative_weights,
    project_params_nonneg,
    quadratic_model,
    save_model,
    zero_model,
)


@pytest.fixture
def model():
    m = init_model(3, hidden=(5, 4), beta=2.0, seed=1, quad=0.3)
    # push W_x of the output layer away from zero so every term is exercised
    m.layers[-1].W_x += 0.2
    return m


@pytest.fixture
def points():
    return np.random.default_rng(7).uniform(0.9, 1.1, size=(6, 3))


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestForward:
    def test_single_and_batch_agree(self, model, points):
        batch = icnn_forward(model, points)
        for x, g in zip(points, batch):
            assert icnn_forward(model, x) == pytest.approx(g, rel=1e-14)

    def test_wrong_input_dim(self, model):
        with pytest.raises(DimensionError):
            icnn_forward(model, np.ones(4))

    def test_midpoint_convexity(self, model):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.8, 1.2, size=(200, 3))
        y = rng.uniform(0.8, 1.2, size=(200, 3))
        mid = icnn_forward(model, 0.5 * (x + y))
        avg = 0.5 * (icnn_forward(model, x) + icnn_forward(model, y))
        assert np.all(mid <= avg + 1e-12)

    def test_quadratic_model(self):
        m = quadratic_model(2, weight=3.0, linear=np.array([0.5, -1.0]))
        x = np.array([1.1, 0.95])
        np.testing.assert_allclose(icnn_input_gradient(m, x), 3.0 * (x - 1.0) - np.array([0.5, -1.0]), atol=1e-14)

    def test_zero_model_is_flat(self):
        m = zero_model(4, hidden=(3,))
        np.testing.assert_array_equal(icnn_input_gradient(m, np.full(4, 1.07)), np.zeros(4))

    def test_single_unit_is_softplus(self):
        m = zero_model(1, hidden=(1,), beta=1.0)
        m.layers[0].W_x[0, 0] = 1.0
        m.layers[1].W_z[0, 0] = 1.0
        x = np.linspace(-3.0, 5.0, 81)[:, None]
        np.testing.assert_allclose(icnn_forward(m, x), np.log1p(np.exp(x[:, 0] - 1.0)), rtol=0, atol=1e-12)
        np.testing.assert_allclose(icnn_input_gradient(m, x)[:, 0], 1.0 / (1.0 + np.exp(1.0 - x[:, 0])),
                                   rtol=0, atol=1e-12)

    def test_scales_wrap_the_network(self, model, points):
        scaled = model.rescaled(0.05, 0.2)
        np.testing.assert_allclose(icnn_forward(scaled, points),
                                   0.2 * icnn_forward(model, 1.0 + (points - 1.0) / 0.05), rtol=1e-12, atol=1e-14)
        assert scaled.gradient_gain == pytest.approx(4.0)
        assert model.in_scale == 1.0

    def test_rescale_rejects_non_positive(self, model):
        with pytest.raises(ValueError):
            model.rescaled(0.0, 1.0)


class TestInputGradient:
    def test_matches_finite_differences(self, model, points):
        h = 1e-5
        grads = icnn_input_gradient(model, points)
        for x, grad in zip(points, grads):
            fd = np.zeros(3)
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                fd[i] = (icnn_forward(model, x + e) - icnn_forward(model, x - e)) / (2 * h)
            assert _rel_err(grad, fd) <= 1e-5

    def test_scaled_model_matches_finite_differences(self, model, points):
        scaled = model.rescaled(0.05, 0.2)
        h = 1e-6
        grads = icnn_input_gradient(scaled, points)
        for x, grad in zip(points, grads):
            fd = np.array([(icnn_forward(scaled, x + h * e) - icnn_forward(scaled, x - h * e)) / (2 * h)
                           for e in np.eye(3)])
            assert _rel_err(grad, fd) <= 1e-5

    def test_gradient_is_monotone(self, model):
        rng = np.random.default_rng(3)
        x = rng.uniform(0.9, 1.1, size=(500, 3))
        y = rng.uniform(0.9, 1.1, size=(500, 3))
        inner = np.sum((icnn_input_gradient(model, x) - icnn_input_gradient(model, y)) * (x - y), axis=1)
        assert inner.min() >= -1e-12


class TestParamGradient:
    def _objective(self, m, x, ybar, cbar):
        return float(np.sum(ybar * icnn_input_gradient(m, x)) + cbar @ icnn_forward(m, x))

    @pytest.mark.parametrize('with_value', [False, True])
    def test_matches_finite_differences(self, model, points, with_value):
        rng = np.random.default_rng(11)
        ybar = rng.normal(size=points.shape)
        cbar = rng.normal(size=points.shape[0]) if with_value else np.zeros(points.shape[0])
        grads = icnn_param_gradient(model, points, ybar, cbar if with_value else None)

        h = 1e-6
        checks = [(0, 'W_x', (1, 2)), (0, 'b', (3,)), (1, 'W_z', (2, 4)), (1, 'W_x', (0, 1)),
                  (1, 'b', (1,)), (2, 'W_z', (0, 3)), (2, 'W_x', (0, 0)), (2, 'b', (0,))]
        for layer, name, idx in checks:
            plus, minus = model.copy(), model.copy()
            getattr(plus.layers[layer], name)[idx] += h
            getattr(minus.layers[layer], name)[idx] -= h
            fd = (self._objective(plus, points, ybar, cbar) - self._objective(minus, points, ybar, cbar)) / (2 * h)
            analytic = getattr(grads.layers[layer], name)[idx]
            assert analytic == pytest.approx(fd, rel=1e-4, abs=1e-7), (layer, name, idx)

        plus, minus = model.copy(), model.copy()
        plus.quad += h
        minus.quad -= h
        fd = (self._objective(plus, points, ybar, cbar) - self._objective(minus, points, ybar, cbar)) / (2 * h)
        assert grads.quad == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_frozen_skip_weights_get_no_gradient(self, points):
        m = init_model(3, hidden=(4, 4), seed=2, skip_connections=False)
        grads = icnn_param_gradient(m, points, np.ones_like(points))
        for g in grads.layers[1:]:
            assert np.all(g.W_x == 0.0)


class TestConvexityAndBounds:
    def test_init_is_convex(self):
        assert is_convex_structure(init_model(5, seed=4))

    def test_projection_clamps(self, model):
        model.layers[1].W_z[0, 0] = -0.5
        model.quad = -1.0
        assert not is_convex_structure(model)
        fixed = project_params_nonneg(model)
        assert is_convex_structure(fixed)
        assert fixed.layers[1].W_z[0, 0] == 0.0
        assert model.layers[1].W_z[0, 0] == -0.5

    def test_quadratic_bound_is_exact(self):
        assert lipschitz_bound(quadratic_model(3, weight=2.5)) == pytest.approx(2.5)

    def test_bound_dominates_samples(self, model):
        rng = np.random.default_rng(5)
        x = rng.uniform(0.9, 1.1, size=(2000, 3))
        y = rng.uniform(0.9, 1.1, size=(2000, 3))
        num = np.linalg.norm(icnn_input_gradient(model, x) - icnn_input_gradient(model, y), axis=1)
        den = np.linalg.norm(x - y, axis=1)
        assert np.max(num / den) <= lipschitz_bound(model)

    def test_scaled_bound_dominates_samples(self, model):
        scaled = model.rescaled(0.05, 0.2)
        rng = np.random.default_rng(6)
        x = rng.uniform(0.9, 1.1, size=(5000, 3))
        y = x + rng.normal(scale=1e-3, size=x.shape)
        num = np.linalg.norm(icnn_input_gradient(scaled, x) - icnn_input_gradient(scaled, y), axis=1)
        den = np.linalg.norm(x - y, axis=1)
        assert np.max(num / den) <= lipschitz_bound(scaled)
        assert lipschitz_bound(scaled) == pytest.approx(lipschitz_bound(model) * 0.2 / 0.05 ** 2)

    def test_cap_hits_limit(self, model):
        scaled = model.rescaled(0.05, 0.2)
        quad_part = scaled.quad * 0.2 / 0.05 ** 2
        limit = quad_part + 0.5 * (lipschitz_bound(scaled) - quad_part)
        capped = cap_lipschitz(scaled, limit)
        assert lipschitz_bound(capped) == pytest.approx(limit)
        assert is_convex_structure(capped)
        assert capped.quad == scaled.quad
        np.testing.assert_array_equal(capped.layers[-1].W_x, scaled.layers[-1].W_x)

    def test_cap_shrinks_quad_when_it_dominates(self):
        capped = cap_lipschitz(quadratic_model(2, weight=8.0), 2.0)
        assert capped.quad == pytest.approx(2.0)
        assert cap_lipschitz(capped, 5.0) is capped
        with pytest.raises(ValueError):
            cap_lipschitz(capped, -1.0)

    def test_negative_weights_named(self, model):
        assert negative_weights(model) == []
        model.layers[1].W_z[2, 3] = -0.1
        model.quad = -1.0
        assert negative_weights(model) == ['W_z[1][2, 3]', 'quad']


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, model, tmp_path, points):
        path = str(tmp_path / 'icnn.json')
        save_model(model, path)
        loaded = load_model(path)
        for a, b in zip(model.layers, loaded.layers):
            np.testing.assert_array_equal(a.W_z, b.W_z)
            np.testing.assert_array_equal(a.W_x, b.W_x)
            np.testing.assert_array_equal(a.b, b.b)
        assert loaded.quad == model.quad and loaded.beta == model.beta
        np.testing.assert_array_equal(icnn_input_gradient(model, points), icnn_input_gradient(loaded, points))

    def test_scales_survive_round_trip(self, model, tmp_path, points):
        scaled = model.rescaled(0.03, 0.007)
        loaded = load_model(save_model(scaled, str(tmp_path / 'scaled.json')))
        assert (loaded.in_scale, loaded.out_scale) == (0.03, 0.007)
        np.testing.assert_array_equal(icnn_input_gradient(scaled, points), icnn_input_gradient(loaded, points))

    def test_non_positive_scale_rejected(self, model, tmp_path):
        payload = model_to_dict(model)
        payload['out_scale'] = 0.0
        path = tmp_path / 'flat.json'
        path.write_text(json.dumps(payload))
        with pytest.raises(CheckpointError):
            load_model(str(path))

    def test_wrong_version(self, model, tmp_path):
        payload = model_to_dict(model)
        payload['format_version'] = 99
        path = tmp_path / 'old.json'
        path.write_text(json.dumps(payload))
        with pytest.raises(CheckpointError):
            load_model(str(path))

    def test_negative_weights_rejected(self, model, tmp_path):
        payload = model_to_dict(model)
        payload['layers'][1]['W_z']['data'][0] = -1.0
        path = tmp_path / 'neg.json'
        path.write_text(json.dumps(payload))
        with pytest.raises(CheckpointError):
            load_model(str(path))

    def test_unreadable(self, tmp_path):
        path = tmp_path / 'junk.json'
        path.write_text('{not json')
        with pytest.raises(CheckpointError):
            load_model(str(path))
