import math

import pytest
import torch

from sfpn import autograd_ops as ops
from sfpn.errors import ConfigError, NonFiniteError, ShapeError
from sfpn.spiking import dspike_derivative

from conftest import central_difference, relative_error

D = torch.float64


def _fd_check(fn, *inputs, tol=1e-4, h=1e-4):
    """Compare autodiff with central differences for every input of a scalar function."""
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    weights = torch.randn(fn(*inputs).shape, generator=torch.Generator().manual_seed(9), dtype=D)
    loss = lambda *xs: (fn(*xs) * weights).sum()  # noqa: E731
    grads = torch.autograd.grad(loss(*inputs), inputs)
    for i, g in enumerate(grads):
        def f(x, i=i):
            with torch.no_grad():
                args = [a.detach() for a in inputs]
                args[i] = x
                return loss(*args)
        num = central_difference(f, inputs[i].detach().clone(), h)
        assert relative_error(g, num) < tol, f"input {i}"


def test_conv2d_gradients():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 3, 5, 5, generator=g, dtype=D)
    for k, stride in ((3, 1), (3, 2), (1, 1)):
        w = torch.randn(4, 3, k, k, generator=g, dtype=D)
        _fd_check(lambda a, b: ops.conv2d(a, b, stride, k // 2), x, w)


def test_conv2d_shape_checks():
    with pytest.raises(ShapeError, match="channel"):
        ops.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(3, 5, 3, 3), 1, 1)
    with pytest.raises(ShapeError, match="kernels"):
        ops.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(3, 2, 5, 5))
    assert ops.conv_output_size(256, 3, 2, 1) == 128


def test_batch_norm_train_gradients():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(4, 3, 2, 2, generator=g, dtype=D)
    gamma = torch.rand(3, generator=g, dtype=D) + 0.5
    beta = torch.randn(3, generator=g, dtype=D)

    def f(a, w, b):
        return ops.batch_norm(a, ops.BNState(w, b), training=True)

    _fd_check(f, x, gamma, beta)


def test_batch_norm_eval_requires_stats():
    state = ops.BNState.create(3)
    with pytest.raises(ConfigError):
        ops.batch_norm(torch.zeros(2, 3, 1, 1), state, training=False)
    ops.batch_norm(torch.randn(2, 3, 1, 1), state, training=True)
    assert state.running_mean is not None and state.num_batches_tracked == 1


def test_batch_norm_normalises():
    x = torch.randn(8, 2, 3, 3, dtype=D) * 5 + 3
    y = ops.batch_norm(x, ops.BNState.create(2, D), training=True)
    assert torch.allclose(y.mean(dim=(0, 2, 3)), torch.zeros(2, dtype=D), atol=1e-10)


def test_fold_bn_matches_conv_then_bn():
    g = torch.Generator().manual_seed(2)
    x = torch.randn(3, 4, 6, 6, generator=g, dtype=D)
    w = torch.randn(5, 4, 3, 3, generator=g, dtype=D)
    state = ops.BNState(torch.rand(5, generator=g, dtype=D) + 0.5, torch.randn(5, generator=g, dtype=D),
                        torch.randn(5, generator=g, dtype=D), torch.rand(5, generator=g, dtype=D) + 0.1)
    ref = ops.batch_norm(ops.conv2d(x, w, 1, 1), state, training=False)
    fw, fb = ops.fold_bn_into_conv(w, state)
    assert torch.allclose(ops.conv2d(x, fw, 1, 1, bias=fb), ref, atol=1e-10)


def test_upsample_and_concat():
    x = torch.arange(4, dtype=D).reshape(1, 1, 2, 2)
    up = ops.upsample_nearest_x2(x)
    assert up.shape == (1, 1, 4, 4)
    assert up[0, 0].tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]
    g = torch.Generator().manual_seed(3)
    _fd_check(ops.upsample_nearest_x2, torch.randn(2, 2, 3, 3, generator=g, dtype=D))
    a, b = torch.randn(1, 2, 3, 3, dtype=D), torch.randn(1, 5, 3, 3, dtype=D)
    assert ops.concat_channels(a, b).shape == (1, 7, 3, 3)
    _fd_check(ops.concat_channels, a, b)
    with pytest.raises(ShapeError):
        ops.concat_channels(a, torch.zeros(1, 2, 4, 4, dtype=D))


def test_spike_forward_is_exact_heaviside():
    v = torch.tensor([-1.0, -1e-9, 0.0, 1e-9, 2.0])
    y = ops.heaviside_with_surrogate(v, ops.SurrogateSpec(3.0))
    assert y.tolist() == [0.0, 0.0, 1.0, 1.0, 1.0]


@pytest.mark.parametrize("b", [1.0, 3.0, 10.0])
def test_spike_backward_is_surrogate(b):
    spec = ops.SurrogateSpec(b)
    v = torch.linspace(-1.2, 1.2, 97, dtype=D, requires_grad=True)
    ops.heaviside_with_surrogate(v, spec).sum().backward()
    for vi, gi in zip(v.detach().tolist(), v.grad.tolist()):
        z = vi + 0.5
        expected = dspike_derivative(z, spec) if 0 <= z <= 1 else 0.0
        assert math.isclose(gi, expected, rel_tol=1e-12, abs_tol=1e-12)


def test_soft_mode_matches_finite_differences():
    spec = ops.SurrogateSpec(3.0)
    v = torch.linspace(-0.45, 0.45, 41, dtype=D)
    _fd_check(lambda x: ops.heaviside_with_surrogate(x, spec, soft=True), v)


def test_surrogate_spec_validation():
    with pytest.raises(ConfigError):
        ops.SurrogateSpec(0.0)
    spec = ops.SurrogateSpec(3.0)
    assert math.isclose(spec.a_coef, 1 / (2 * math.tanh(1.5)), rel_tol=1e-15)


def test_debug_checks_catch_non_finite():
    x = torch.full((1, 1, 3, 3), float("inf"))
    w = torch.ones(1, 1, 3, 3)
    ops.conv2d(x, w, 1, 1)  # silent outside debug mode
    with ops.debug_checks():
        with pytest.raises(NonFiniteError, match="conv2d"):
            ops.conv2d(x, w, 1, 1)
