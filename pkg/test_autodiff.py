import numpy as np
import pytest
from scipy.signal import correlate2d

from autodiff import Tensor, avg_pool2, conv2d, global_avg_pool, linear, log_softmax, no_grad, relu
from errors import AutogradError, ShapeError
from pydantic_models import ArchitectureSpec
from tiny_cnn import TinyCnn, backward, cross_entropy, forward

GRADIENT_SEEDS = range(10)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1e-4, abs(a) + abs(b))


def test_elementwise_gradients_accumulate():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    y = (x * x + x).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_broadcast_gradient_is_summed_back():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ((x + b) * 2.0).sum().backward()
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])
    np.testing.assert_allclose(x.grad, np.full((2, 3), 2.0))


def test_backward_without_graph_raises():
    with pytest.raises(AutogradError):
        Tensor(np.ones(3)).sum().backward()


def test_backward_on_non_scalar_needs_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(AutogradError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones((1, 3)), requires_grad=True)
    with no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad
    assert (x * 3.0).sum().requires_grad


def test_conv2d_matches_scipy_correlation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    for o in range(3):
        expected = sum(correlate2d(x[0, c], w[o, c], mode="same") for c in range(2)) + b[o]
        np.testing.assert_allclose(out[0, o], expected, atol=1e-12)


def test_conv2d_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))


def test_avg_pool_rejects_odd_sizes():
    with pytest.raises(ShapeError):
        avg_pool2(Tensor(np.ones((1, 1, 5, 5))))


def test_log_softmax_is_stable_for_large_logits():
    out = log_softmax(Tensor(np.array([[1000.0, 1000.0], [0.0, -1000.0]]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(np.exp(out).sum(axis=1), [1.0, 1.0])
    np.testing.assert_allclose(out[0], [np.log(0.5), np.log(0.5)])


def _layer_stack_loss(x, w, b, wd, bd, labels):
    h = relu(conv2d(x, w, b))
    h = global_avg_pool(avg_pool2(h))
    return cross_entropy(linear(h, wd, bd), labels)


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_layer_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = {
        "x": rng.normal(size=(2, 2, 4, 4)),
        "w": rng.normal(size=(3, 2, 3, 3)),
        "b": rng.normal(size=3),
        "wd": rng.normal(size=(3, 4)),
        "bd": rng.normal(size=4),
    }
    labels = np.array([1, 3])
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    _layer_stack_loss(**tensors, labels=labels).backward()

    h = 1e-6
    for name, value in params.items():
        flat = value.reshape(-1)
        for index in rng.choice(flat.size, size=min(5, flat.size), replace=False):
            plus, minus = flat.copy(), flat.copy()
            plus[index] += h
            minus[index] -= h
            args_plus = {k: Tensor(v) for k, v in params.items()}
            args_minus = {k: Tensor(v) for k, v in params.items()}
            args_plus[name] = Tensor(plus.reshape(value.shape))
            args_minus[name] = Tensor(minus.reshape(value.shape))
            numeric = (
                _layer_stack_loss(**args_plus, labels=labels).item()
                - _layer_stack_loss(**args_minus, labels=labels).item()
            ) / (2 * h)
            analytic = tensors[name].grad.reshape(-1)[index]
            assert relative_error(analytic, numeric) < 1e-4, (name, index)


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_model_parameter_gradients_match_finite_differences(seed):
    spec = ArchitectureSpec(widths=(2, 2, 2), num_classes=3)
    model = TinyCnn.initialize(spec, seed=seed)
    rng = np.random.default_rng(seed)
    images = rng.random((1, 3, 32, 32))
    labels = np.array([seed % 3])

    gradients = backward(cross_entropy(forward(model, images), labels), model)

    h = 1e-6
    for name, param in model.parameters.items():
        flat = param.data.reshape(-1)
        for index in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            original = flat[index]
            flat[index] = original + h
            with no_grad():
                up = cross_entropy(forward(model, images), labels).item()
            flat[index] = original - h
            with no_grad():
                down = cross_entropy(forward(model, images), labels).item()
            flat[index] = original
            numeric = (up - down) / (2 * h)
            assert relative_error(gradients[name].reshape(-1)[index], numeric) < 1e-4, (name, index)


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_input_gradient_matches_finite_differences(tiny_spec, seed):
    tiny_model = TinyCnn.initialize(tiny_spec, seed=seed)
    rng = np.random.default_rng(seed)
    images = rng.random((1, 3, 32, 32))
    labels = np.array([1])
    x = Tensor(images, requires_grad=True)
    cross_entropy(forward(tiny_model, x), labels).backward()

    h = 1e-6
    for index in rng.choice(images.size, size=5, replace=False):
        plus, minus = images.copy().reshape(-1), images.copy().reshape(-1)
        plus[index] += h
        minus[index] -= h
        with no_grad():
            up = cross_entropy(forward(tiny_model, plus.reshape(images.shape)), labels).item()
            down = cross_entropy(forward(tiny_model, minus.reshape(images.shape)), labels).item()
        assert relative_error(x.grad.reshape(-1)[index], (up - down) / (2 * h)) < 1e-4
