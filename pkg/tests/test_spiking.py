import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sfpn.errors import ConfigError
from sfpn.spiking import (
    ALIFNeuron, AlifParams, LIFNeuron, LifParams, NeuronConfig, NeuronState, SurrogateSpec,
    alif_step, alif_threshold_bounds, dspike, dspike_derivative, lif_step, make_neuron,
)

D = torch.float64


def _state(u=0.0, y=0.0, a=None):
    t = lambda v: torch.tensor([v], dtype=D)  # noqa: E731
    return NeuronState(t(u), t(y), None if a is None else t(a))


def test_lif_hand_example():
    y, s = lif_step(_state(0.25, 0.0), torch.tensor([0.26], dtype=D), LifParams(0.2, 0.3))
    assert math.isclose(float(s.u), 0.31, abs_tol=1e-15) and float(y) == 1.0


def test_lif_hard_reset():
    y, s = lif_step(_state(123.0, 1.0), torch.tensor([0.0], dtype=D), LifParams(0.2, 0.3))
    assert float(s.u) == 0.0 and float(y) == 0.0


def test_binary_neuron_equivalence():
    g = torch.Generator().manual_seed(0)
    state = NeuronState.zeros_like(torch.zeros(100, dtype=D))
    for _ in range(20):
        current = torch.randn(100, generator=g, dtype=D)
        y, state = lif_step(state, current, LifParams(0.0, 0.3))
        assert torch.equal(y, (current >= 0.3).to(D))


def test_perfect_integration_without_leak_loss():
    g = torch.Generator().manual_seed(1)
    currents = torch.rand(30, 10, generator=g, dtype=D) * 0.01
    state = NeuronState.zeros_like(currents[0])
    for c in currents:
        _, state = lif_step(state, c, LifParams(1.0, 1e9))
    assert torch.allclose(state.u, currents.sum(0), atol=1e-12)


def test_alif_hand_example():
    p = AlifParams(LifParams(0.2, 0.3), beta=0.07, tau_a=0.3)
    _, s = alif_step(_state(0.0, 1.0, 0.0), torch.tensor([0.0], dtype=D), p)
    assert float(s.a) == 1.0
    assert math.isclose(0.3 + 0.07 * float(s.a), 0.37)


def test_alif_silent_threshold_decays_to_base():
    p = AlifParams(LifParams(0.2, 0.3), beta=0.07, tau_a=0.3)
    s = _state(0.0, 0.0, 5.0)
    for _ in range(100):
        _, s = alif_step(s, torch.tensor([-1.0], dtype=D), p)
    assert float(s.a) < 1e-40


def test_alif_unrolled_sum_oracle():
    g = torch.Generator().manual_seed(2)
    tau_a = 0.35
    p = AlifParams(LifParams(0.2, 0.3), beta=0.07, tau_a=tau_a)
    state = NeuronState.zeros_like(torch.zeros(64, dtype=D), adaptive=True)
    spikes = []
    for t in range(50):
        y, state = alif_step(state, torch.rand(64, generator=g, dtype=D) * 0.8, p)
        oracle = sum(tau_a ** (t - 1 - k) * spikes[k] for k in range(t)) if t else torch.zeros(64, dtype=D)
        assert torch.allclose(state.a, oracle, atol=1e-10, rtol=0)
        spikes.append(y)


def test_alif_constant_firing_limit():
    p = AlifParams(LifParams(0.2, 0.3), beta=0.07, tau_a=0.3)
    s = _state(0.0, 0.0, 0.0)
    for _ in range(200):
        _, s = alif_step(s, torch.tensor([10.0], dtype=D), p)
    assert abs(0.3 + 0.07 * float(s.a) - 0.4) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.floats(0.2, 0.4), st.floats(0.0, 0.2), st.integers(0, 2**31))
def test_alif_threshold_stays_in_bounds(tau_a, beta, seed):
    p = AlifParams(LifParams(0.2, 0.3), beta=beta, tau_a=tau_a)
    lo, hi = alif_threshold_bounds(p)
    g = torch.Generator().manual_seed(seed)
    s = NeuronState.zeros_like(torch.zeros(32, dtype=D), adaptive=True)
    for _ in range(40):
        _, s = alif_step(s, torch.randn(32, generator=g, dtype=D), p)
        th = 0.3 + beta * s.a
        assert float(th.min()) >= lo - 1e-12 and float(th.max()) <= hi + 1e-12


def test_alif_never_fires_more_than_lif_in_lockstep():
    g = torch.Generator().manual_seed(3)
    lif_p = LifParams(0.2, 0.3)
    alif_p = AlifParams(lif_p, beta=0.07, tau_a=0.3)
    s_l = NeuronState.zeros_like(torch.zeros(256, dtype=D))
    s_a = NeuronState.zeros_like(torch.zeros(256, dtype=D), adaptive=True)
    alive = torch.ones(256, dtype=torch.bool)
    for _ in range(30):
        c = torch.rand(256, generator=g, dtype=D) * 0.6
        y_l, s_l = lif_step(s_l, c, lif_p)
        y_a, s_a = alif_step(s_a, c, alif_p)
        assert torch.all(y_a[alive] <= y_l[alive])
        alive &= y_a == y_l  # histories diverge after the first disagreement


def test_threshold_bounds_examples():
    assert alif_threshold_bounds(AlifParams(LifParams(0.2, 0.3), 0.07, 0.3)) == pytest.approx((0.3, 0.4))
    assert alif_threshold_bounds(AlifParams(LifParams(0.2, 0.3), 0.0, 0.3)) == (0.3, 0.3)
    hi_a = alif_threshold_bounds(AlifParams(LifParams(0.2, 0.3), 0.07, 0.2))[1]
    hi_b = alif_threshold_bounds(AlifParams(LifParams(0.2, 0.3), 0.07, 0.39, (0.2, 0.4)))[1]
    assert hi_a == pytest.approx(0.3875) and hi_b == pytest.approx(0.3 + 0.07 / 0.61)
    assert hi_a < hi_b


def test_threshold_bounds_divergence():
    p = AlifParams(LifParams(0.2, 0.3), 0.07, 0.3)
    p.tau_a = 1.0
    with pytest.raises(ConfigError):
        alif_threshold_bounds(p)


def test_dspike_values():
    spec = SurrogateSpec(3.0)
    assert abs(dspike(0.0, spec)) < 1e-12 and abs(dspike(1.0, spec) - 1) < 1e-12
    assert dspike(0.5, spec) == pytest.approx(0.5, abs=1e-15)
    assert dspike(0.75, spec) == pytest.approx(math.tanh(0.75) / (2 * math.tanh(1.5)) + 0.5, abs=1e-15)
    assert dspike(0.75, spec) == pytest.approx(0.8509, abs=1e-4)


def test_dspike_derivative_values():
    spec = SurrogateSpec(3.0)
    assert dspike_derivative(0.5, spec) == pytest.approx(3 / (2 * math.tanh(1.5)), abs=1e-12)
    assert dspike_derivative(0.5, spec) == pytest.approx(1.65719, abs=1e-5)
    assert dspike_derivative(0.0, spec) == pytest.approx(dspike_derivative(1.0, spec), abs=1e-15)
    grid = np.linspace(0, 1, 101)
    assert all(dspike_derivative(u, spec) <= dspike_derivative(0.5, spec) + 1e-15 for u in grid)


def test_param_validation():
    with pytest.raises(ConfigError):
        LifParams(1.5, 0.3)
    with pytest.raises(ConfigError):
        LifParams(0.2, 0.0)
    with pytest.raises(ConfigError):
        AlifParams(LifParams(), beta=-0.1)
    with pytest.raises(ConfigError):
        NeuronConfig(tau_a_init=0.5).validate()
    with pytest.raises(ConfigError):
        make_neuron("izhikevich", NeuronConfig())


def test_multistep_layers_match_single_steps():
    g = torch.Generator().manual_seed(4)
    current = torch.randn(5, 3, 8, generator=g, dtype=D)
    lif = LIFNeuron(0.2, 0.3)
    out = lif(current)
    s = NeuronState.zeros_like(current[0])
    for t in range(5):
        y, s = lif_step(s, current[t], LifParams(0.2, 0.3))
        assert torch.equal(out[t], y)
    alif = ALIFNeuron()
    out = alif(current.float())
    assert set(out.unique().tolist()) <= {0.0, 1.0}
    assert isinstance(make_neuron("binary", NeuronConfig()), LIFNeuron)
    assert make_neuron("binary", NeuronConfig()).params.tau == 0.0


def test_alif_tau_a_receives_gradient():
    alif = ALIFNeuron()
    current = torch.rand(4, 2, 50, generator=torch.Generator().manual_seed(5)) * 0.8
    alif(current).sum().backward()
    assert alif.tau_a.grad is not None and float(alif.tau_a.grad.abs()) > 0


def test_train_beta_flag():
    assert not isinstance(ALIFNeuron().beta, torch.nn.Parameter)
    assert isinstance(ALIFNeuron(train_beta=True).beta, torch.nn.Parameter)
