"""Forward pass, parameter layout and reverse-mode gradients of the MLP core."""

import numpy as np
import pytest

from nn_utils import (
    MlpSpec,
    central_difference,
    dead_unit_fraction,
    finite_diff_grad,
    flatten,
    forward,
    grad_loglik,
    init_params,
    loglik,
    predict_proba,
    preactivations,
    relative_grad_error,
    target_matrix,
    unflatten,
)

KINK_MARGIN = 5e-2


def _random_problem(rng, count_targets=False):
    """Random (spec, params, inputs, targets) with every ReLU away from its kink."""
    while True:
        depth = int(rng.integers(0, 4))
        spec = MlpSpec(int(rng.integers(1, 5)), tuple(int(w) for w in rng.integers(1, 7, size=depth)), int(rng.integers(2, 5)))
        params = rng.normal(0.0, 1.0, spec.num_params)
        inputs = rng.normal(0.0, 1.0, (8, spec.input_dim))
        if all(np.min(np.abs(z)) > KINK_MARGIN for z in preactivations(spec, params, inputs)):
            break
    if count_targets:
        targets = rng.integers(0, 4, size=(8, spec.num_classes))
        targets[:, 0] += 1
    else:
        targets = rng.integers(0, spec.num_classes, size=8)
    return spec, params, inputs, targets


class TestMlpSpec:
    def test_toy_parameter_count(self):
        spec = MlpSpec(2, (20,), 2)
        assert spec.num_params == 2 * 20 + 20 + 20 * 2 + 2 == 102
        assert init_params(spec, 1.0, seed=7).shape == (102,)

    def test_mnist_parameter_count(self):
        assert MlpSpec(784, (20, 20, 20), 10).num_params == 785 * 20 + 2 * 21 * 20 + 21 * 10

    def test_invalid_widths(self):
        with pytest.raises(ValueError):
            MlpSpec(2, (0,), 2)
        with pytest.raises(ValueError):
            MlpSpec(2, (4,), 1)


class TestParameterLayout:
    def test_init_is_deterministic(self, toy_spec):
        np.testing.assert_array_equal(init_params(toy_spec, 1.0, 7), init_params(toy_spec, 1.0, 7))

    def test_init_rejects_zero_std(self, toy_spec):
        with pytest.raises(ValueError):
            init_params(toy_spec, 0.0, 7)

    def test_flatten_inverts_unflatten(self, rng):
        for _ in range(100):
            spec = MlpSpec(int(rng.integers(1, 6)), tuple(rng.integers(1, 6, size=rng.integers(0, 4))), int(rng.integers(2, 6)))
            params = rng.normal(size=spec.num_params)
            np.testing.assert_array_equal(flatten(spec, unflatten(spec, params)), params)

    def test_weights_precede_biases(self):
        spec = MlpSpec(2, (), 3)
        (w, b), = unflatten(spec, np.arange(9.0))
        np.testing.assert_array_equal(w, [[0, 1, 2], [3, 4, 5]])
        np.testing.assert_array_equal(b, [6, 7, 8])

    def test_wrong_length_rejected(self, toy_spec):
        with pytest.raises(ValueError):
            unflatten(toy_spec, np.zeros(101))

    def test_zero_vector_gives_zero_weights(self, toy_spec):
        for w, b in unflatten(toy_spec, np.zeros(toy_spec.num_params)):
            assert not w.any() and not b.any()


class TestForward:
    def test_zero_weights_are_uniform(self, toy_spec, rng):
        inputs = rng.normal(size=(5, 2))
        np.testing.assert_array_equal(forward(toy_spec, np.zeros(102), inputs), np.zeros((5, 2)))
        np.testing.assert_allclose(predict_proba(toy_spec, np.zeros(102), inputs), 0.5)

    def test_linear_layer_is_proportional_to_input(self):
        spec = MlpSpec(1, (), 2)
        params = flatten(spec, [(np.array([[1.0, -1.0]]), np.zeros(2))])
        x = np.array([[0.5], [2.0], [-3.0]])
        np.testing.assert_array_equal(forward(spec, params, x), np.column_stack([x[:, 0], -x[:, 0]]))

    def test_softmax_rows_sum_to_one(self, rng):
        spec = MlpSpec(4, (7, 5), 6)
        probs = predict_proba(spec, rng.normal(size=spec.num_params), rng.normal(size=(50, 4)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_output_shift_invariance(self, toy_spec, rng):
        """Adding a constant to every output bias leaves the class probabilities unchanged."""
        params = rng.normal(size=toy_spec.num_params)
        shifted = params.copy()
        shifted[-toy_spec.num_classes:] += 3.7
        inputs = rng.normal(size=(10, 2))
        np.testing.assert_allclose(predict_proba(toy_spec, shifted, inputs), predict_proba(toy_spec, params, inputs), atol=1e-12)

    def test_input_shape_checked(self, toy_spec):
        with pytest.raises(ValueError):
            forward(toy_spec, np.zeros(102), np.zeros((3, 5)))


class TestTargets:
    def test_labels_become_one_hot(self):
        np.testing.assert_array_equal(target_matrix(np.array([1, 0]), 3, 2), [[0, 1, 0], [1, 0, 0]])

    def test_float_labels_rejected(self):
        with pytest.raises(ValueError):
            target_matrix(np.array([0.0, 1.0]), 2, 2)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError):
            target_matrix(np.array([0, 2]), 2, 2)

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            target_matrix(np.array([[1, -1]]), 2, 1)


class TestGradLoglik:
    def test_uniform_output_hand_derivation(self):
        spec = MlpSpec(3, (), 2)
        value, grad = grad_loglik(spec, np.zeros(spec.num_params), np.array([[0.3, -1.0, 2.0]]), np.array([0]))
        assert value == pytest.approx(np.log(0.5), abs=1e-15)
        np.testing.assert_allclose(grad[-2:], [0.5, -0.5], atol=1e-15)

    def test_empty_counts_row_contributes_nothing(self, rng):
        spec = MlpSpec(2, (4,), 2)
        params = rng.normal(size=spec.num_params)
        inputs = rng.normal(size=(2, 2))
        both = grad_loglik(spec, params, inputs, np.array([[0, 0], [1, 2]]))
        alone = grad_loglik(spec, params, inputs[1:], np.array([[1, 2]]))
        assert both[0] == pytest.approx(alone[0], abs=1e-12)
        np.testing.assert_allclose(both[1], alone[1], atol=1e-12)

    def test_value_matches_loglik(self, rng):
        spec, params, inputs, targets = _random_problem(rng)
        assert grad_loglik(spec, params, inputs, targets)[0] == pytest.approx(loglik(spec, params, inputs, targets), abs=1e-12)

    @pytest.mark.parametrize("count_targets", [False, True])
    def test_matches_finite_differences(self, rng, count_targets):
        for _ in range(25):
            spec, params, inputs, targets = _random_problem(rng, count_targets)
            _, grad = grad_loglik(spec, params, inputs, targets)
            assert relative_grad_error(grad, finite_diff_grad(spec, params, inputs, targets)) <= 1e-5

    def test_twenty_unit_mlp(self, rng):
        spec = MlpSpec(2, (20,), 2)
        checked = 0
        while checked < 5:
            params = rng.normal(size=spec.num_params)
            inputs = rng.normal(size=(8, 2))
            if min(np.min(np.abs(z)) for z in preactivations(spec, params, inputs)) < KINK_MARGIN:
                continue
            checked += 1
            labels = rng.integers(0, 2, size=8)
            _, grad = grad_loglik(spec, params, inputs, labels)
            assert relative_grad_error(grad, finite_diff_grad(spec, params, inputs, labels)) <= 1e-5

    def test_matches_torch_autograd(self, rng):
        torch = pytest.importorskip("torch")
        spec, params, inputs, targets = _random_problem(rng, count_targets=True)
        theta = torch.tensor(params, dtype=torch.float64, requires_grad=True)
        h = torch.tensor(inputs, dtype=torch.float64)
        offset = 0
        for i, (n_in, n_out) in enumerate(spec.layer_shapes):
            w = theta[offset:offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            b = theta[offset:offset + n_out]
            offset += n_out
            h = h @ w + b
            if i < len(spec.layer_shapes) - 1:
                h = torch.relu(h)
        value = (torch.tensor(targets, dtype=torch.float64) * torch.log_softmax(h, dim=1)).sum()
        value.backward()

        ours, grad = grad_loglik(spec, params, inputs, targets)
        assert ours == pytest.approx(value.item(), abs=1e-10)
        np.testing.assert_allclose(grad, theta.grad.numpy(), atol=1e-10)


class TestFiniteDifferences:
    def test_quadratic_is_exact(self):
        x = np.array([0.5, -2.0, 3.0])
        np.testing.assert_allclose(central_difference(lambda v: float(v @ v), x, 1e-4), 2 * x, atol=1e-8)

    def test_nonpositive_step_rejected(self):
        with pytest.raises(ValueError):
            central_difference(lambda v: 0.0, np.zeros(2), 0.0)


class TestDeadUnits:
    def test_all_dead_layer(self, rng):
        spec = MlpSpec(2, (5,), 2)
        (w, b), (w2, b2) = unflatten(spec, np.zeros(spec.num_params))
        params = flatten(spec, [(w, np.full(5, -100.0)), (w2, b2)])
        assert dead_unit_fraction(spec, params, rng.normal(size=(20, 2))) == [1.0]
