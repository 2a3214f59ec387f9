import json

import numpy as np
import pytest

from nn_core import (AdamState, CheckpointError, MissingCacheError, NetworkShapeError, TrainingState, adam_step,
                     backward, dual_backward, dual_forward, forward, forward_with_cache, hessian_vector_product,
                     init_mlp, input_gradient, input_jacobian_vector, load_checkpoint, load_training_state,
                     save_checkpoint, save_training_state)
from refu_datatypes import Activation

EPS = 1e-6


def relative_error(numeric, analytic):
    numeric, analytic = np.asarray(numeric), np.asarray(analytic)
    return float(np.max(np.abs(numeric - analytic)) / max(1e-12, np.max(np.abs(numeric)) + np.max(np.abs(analytic))))


def smooth_net(rng, skip=None, widths=(4, 7, 7, 1)):
    return init_mlp(list(widths), rng, Activation.SOFTPLUS, beta=2.0, skip_layer=skip)


def weight_gradient_fd(net, loss, entries_per_array=4, rng=None):
    """Central differences of `loss()` for a few entries of every parameter array."""
    rng = rng or np.random.default_rng(0)
    estimates = []
    for array in net.parameters():
        flat = array.reshape(-1)
        picks = rng.choice(flat.size, size=min(entries_per_array, flat.size), replace=False)
        values = []
        for index in picks:
            original = flat[index]
            flat[index] = original + EPS
            plus = loss()
            flat[index] = original - EPS
            minus = loss()
            flat[index] = original
            values.append((plus - minus) / (2 * EPS))
        estimates.append((picks, np.array(values)))
    return estimates


def test_forward_shapes_and_width_check():
    net = smooth_net(np.random.default_rng(0))
    assert forward(net, np.zeros(4)).shape == (1, 1)
    assert forward(net, np.zeros((5, 4))).shape == (5, 1)
    with pytest.raises(NetworkShapeError):
        forward(net, np.zeros((2, 3)))


def test_init_rejects_bad_widths():
    with pytest.raises(NetworkShapeError):
        init_mlp([3], np.random.default_rng(0))
    with pytest.raises(NetworkShapeError):
        init_mlp([3, 4, 1], np.random.default_rng(0), skip_layer=2)


@pytest.mark.parametrize("skip", [None, 2])
@pytest.mark.parametrize("activation", [Activation.SOFTPLUS, Activation.RELU])
def test_backward_weight_gradients_match_finite_differences(skip, activation):
    rng = np.random.default_rng(1)
    net = init_mlp([4, 6, 6, 2], rng, activation, beta=2.0, skip_layer=skip)
    x = rng.normal(size=(5, 4))
    weights = rng.normal(size=(5, 2))
    out, cache = forward_with_cache(net, x)
    grads, _ = backward(net, cache, weights)
    for (picks, numeric), analytic in zip(weight_gradient_fd(net, lambda: float(np.sum(forward(net, x) * weights))),
                                          grads):
        assert relative_error(numeric, analytic.reshape(-1)[picks]) < 1e-5


@pytest.mark.parametrize("skip", [None, 2])
def test_input_gradient_matches_finite_differences(skip):
    rng = np.random.default_rng(2)
    net = smooth_net(rng, skip)
    x = rng.normal(size=(6, 4))
    values, grads = input_gradient(net, x)
    numeric = np.stack([(forward(net, x + EPS * e)[:, 0] - forward(net, x - EPS * e)[:, 0]) / (2 * EPS)
                        for e in np.eye(4)], axis=1)
    np.testing.assert_allclose(values, forward(net, x)[:, 0])
    assert relative_error(numeric, grads) < 1e-5


def test_jacobian_vector_matches_reverse_mode():
    rng = np.random.default_rng(3)
    net = smooth_net(rng, 1)
    x = rng.normal(size=(5, 4))
    v = rng.normal(size=(5, 4))
    _, grads = input_gradient(net, x)
    np.testing.assert_allclose(input_jacobian_vector(net, x, v)[:, 0], np.einsum("ij,ij->i", grads, v), atol=1e-12)


def test_hessian_vector_product_matches_finite_differences():
    rng = np.random.default_rng(4)
    net = smooth_net(rng, 2)
    x = rng.normal(size=(4, 4))
    v = rng.normal(size=(4, 4))
    hv = hessian_vector_product(net, x, v)
    numeric = (input_gradient(net, x + EPS * v)[1] - input_gradient(net, x - EPS * v)[1]) / (2 * EPS)
    assert relative_error(numeric, hv) < 1e-4


def test_dual_backward_gives_weight_gradients_of_gradient_term():
    rng = np.random.default_rng(5)
    net = smooth_net(rng, 2)
    x = rng.normal(size=(6, 4))
    target = rng.normal(size=(6, 4))

    def loss():
        _, grads = input_gradient(net, x)
        return float(np.sum(grads * target))

    weight_grads = None
    for axis in range(4):
        tangent = np.zeros_like(x)
        tangent[:, axis] = 1.0
        _, _, cache = dual_forward(net, x, tangent)
        grads, _, _ = dual_backward(net, cache, None, target[:, axis:axis + 1])
        weight_grads = grads if weight_grads is None else [a + b for a, b in zip(weight_grads, grads)]
    for (picks, numeric), analytic in zip(weight_gradient_fd(net, loss), weight_grads):
        assert relative_error(numeric, analytic.reshape(-1)[picks]) < 1e-4


def test_stale_cache_is_rejected():
    rng = np.random.default_rng(6)
    net = smooth_net(rng)
    _, cache = forward_with_cache(net, rng.normal(size=(2, 4)))
    net.set_parameters([p + 0.1 for p in net.parameters()])
    with pytest.raises(MissingCacheError):
        backward(net, cache, np.ones((2, 1)))
    with pytest.raises(MissingCacheError):
        backward(net, None, np.ones((2, 1)))


def test_set_parameters_checks_shapes():
    net = smooth_net(np.random.default_rng(7))
    with pytest.raises(NetworkShapeError):
        net.set_parameters(net.parameters()[:-1])
    params = net.parameters()
    params[0] = np.zeros((1, 1))
    with pytest.raises(NetworkShapeError):
        net.set_parameters(params)


def test_adam_first_step_moves_by_learning_rate():
    params = [np.array([1.0, -2.0]), np.array([[0.5]])]
    grads = [np.array([3.0, -0.5]), np.array([[2.0]])]
    state = AdamState.for_parameters(params, learning_rate=0.1)
    updated = adam_step(state, params, grads)
    np.testing.assert_allclose(updated[0], [0.9, -1.9], atol=1e-6)
    np.testing.assert_allclose(updated[1], [[0.4]], atol=1e-6)
    assert state.step == 1


def test_adam_rejects_mismatched_shapes():
    params = [np.zeros(3)]
    state = AdamState.for_parameters(params, 0.1)
    with pytest.raises(NetworkShapeError):
        adam_step(state, params, [np.zeros(4)])


def test_checkpoint_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(8)
    net = init_mlp([5, 9, 9, 9, 1], rng, skip_layer=2)
    path = tmp_path / "net.json"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    assert loaded.skip_layer == 2
    for a, b in zip(net.parameters(), loaded.parameters()):
        np.testing.assert_array_equal(a, b)
    x = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(forward(net, x), forward(loaded, x))


def test_checkpoint_rejects_unknown_format(tmp_path):
    path = tmp_path / "net.json"
    path.write_text(json.dumps({"format": "something-else", "version": 1}))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_training_state_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    net = smooth_net(rng)
    adam = AdamState.for_parameters(net.parameters(), 0.01)
    adam_step(adam, net.parameters(), [np.ones_like(p) for p in net.parameters()])
    order_rng = np.random.default_rng(3)
    order_rng.random(5)
    state = TrainingState({"sdf": net}, {"sdf": adam}, 4, order_rng.bit_generator.state, [{"epoch": 4}])
    path = tmp_path / "state.json"
    save_training_state(state, path)
    loaded = load_training_state(path)
    assert loaded.epoch == 4
    assert loaded.curve == [{"epoch": 4}]
    assert loaded.optimizers["sdf"].step == 1
    for a, b in zip(adam.second, loaded.optimizers["sdf"].second):
        np.testing.assert_array_equal(a, b)
    resumed = np.random.default_rng()
    resumed.bit_generator.state = loaded.rng_state
    np.testing.assert_array_equal(resumed.random(3), order_rng.random(3))
