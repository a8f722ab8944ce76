"""Leaky integrate-and-fire neurons, the spike-triggered adaptive threshold, and Dspike."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .autograd_ops import SurrogateSpec, heaviside_with_surrogate
from .errors import ConfigError

__all__ = [
    "LifParams", "AlifParams", "NeuronState", "SurrogateSpec", "NeuronConfig",
    "lif_step", "alif_step", "alif_threshold_bounds", "dspike", "dspike_derivative",
    "LIFNeuron", "ALIFNeuron", "make_neuron",
]


@dataclass(frozen=True)
class LifParams:
    tau: float = 0.2
    u_th: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if not self.u_th > 0:
            raise ConfigError(f"u_th must be positive, got {self.u_th}")


@dataclass
class AlifParams:
    """``tau_a`` may be a float or a (trainable) scalar tensor."""

    base: LifParams
    beta: float = 0.07
    tau_a: float | torch.Tensor = 0.3
    tau_a_bounds: tuple[float, float] = (0.2, 0.4)

    def __post_init__(self):
        lo, hi = self.tau_a_bounds
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigError(f"tau_a bounds must satisfy 0 < lo <= hi < 1, got {self.tau_a_bounds}")
        if float(self.beta) < 0:
            raise ConfigError("beta must be non-negative")


@dataclass
class NeuronState:
    u: torch.Tensor
    y_prev: torch.Tensor
    a: torch.Tensor | None = None

    @classmethod
    def zeros_like(cls, x: torch.Tensor, adaptive: bool = False):
        z = torch.zeros_like(x)
        return cls(z, z, z if adaptive else None)


def _detached(state: NeuronState) -> NeuronState:
    a = state.a.detach() if state.a is not None else None
    return NeuronState(state.u.detach(), state.y_prev.detach(), a)


def _spike(v, surrogate, soft):
    if surrogate is None:
        return (v >= 0).to(v.dtype)
    return heaviside_with_surrogate(v, surrogate, soft=soft)


def lif_step(state: NeuronState, input_current, params: LifParams,
             surrogate: SurrogateSpec | None = None, soft: bool = False):
    """One update ``u = tau*u_prev*(1 - y_prev) + I``, ``y = H(u - u_th)``."""
    u = params.tau * state.u * (1 - state.y_prev) + input_current
    y = _spike(u - params.u_th, surrogate, soft)
    return y, NeuronState(u, y, state.a)


def alif_step(state: NeuronState, input_current, params: AlifParams,
              surrogate: SurrogateSpec | None = None, soft: bool = False):
    """LIF membrane update against the adaptive threshold ``u_th + beta*a``,
    where ``a = tau_a*a_prev + y_prev``."""
    a_prev = state.a if state.a is not None else torch.zeros_like(state.u)
    a = params.tau_a * a_prev + state.y_prev
    threshold = params.base.u_th + params.beta * a
    u = params.base.tau * state.u * (1 - state.y_prev) + input_current
    y = _spike(u - threshold, surrogate, soft)
    return y, NeuronState(u, y, a)


def alif_threshold_bounds(params: AlifParams) -> tuple[float, float]:
    tau_a = float(params.tau_a)
    if tau_a >= 1.0:
        raise ConfigError(f"tau_a={tau_a} >= 1: the threshold increment diverges")
    u_th = params.base.u_th
    return u_th, u_th + float(params.beta) / (1.0 - tau_a)


def dspike(u: float, spec: SurrogateSpec) -> float:
    """Closed form of the surrogate spike function.

    Intended for ``0 <= u <= 1``; callers clamp (see ``normalize_membrane``).
    """
    return spec.a_coef * math.tanh(spec.b * (u - spec.c_center)) + spec.d_offset


def dspike_derivative(u: float, spec: SurrogateSpec) -> float:
    t = math.tanh(spec.b * (u - spec.c_center))
    return spec.a_coef * spec.b * (1.0 - t * t)


# -- stateful multi-step layers -----------------------------------------------


@dataclass(frozen=True)
class NeuronConfig:
    tau: float = 0.2
    u_th: float = 0.3
    surrogate_b: float = 3.0
    beta: float = 0.07
    tau_a_init: float = 0.3
    tau_a_bounds: tuple[float, float] = (0.2, 0.4)
    train_beta: bool = False

    def validate(self):
        LifParams(self.tau, self.u_th)
        SurrogateSpec(self.surrogate_b)
        lo, hi = self.tau_a_bounds
        if not lo <= self.tau_a_init <= hi:
            raise ConfigError(f"tau_a_init={self.tau_a_init} outside its box {self.tau_a_bounds}")
        AlifParams(LifParams(self.tau, self.u_th), self.beta, self.tau_a_init, tuple(self.tau_a_bounds))
        return self


class LIFNeuron(nn.Module):
    """Runs :func:`lif_step` over the leading time axis of a ``(T, N, ...)`` current.

    A fresh zero state is used for every call, so samples never share history.
    ``tau = 0`` gives the binary (memoryless) neuron.
    """

    def __init__(self, tau=0.2, u_th=0.3, surrogate_b=3.0):
        super().__init__()
        self.params = LifParams(tau, u_th)
        self.surrogate = SurrogateSpec(surrogate_b)
        self.soft = False
        self.last_state: NeuronState | None = None

    def extra_repr(self):
        return f"tau={self.params.tau}, u_th={self.params.u_th}, b={self.surrogate.b}"

    def forward(self, current):
        state = NeuronState.zeros_like(current[0])
        out = []
        for t in range(current.shape[0]):
            y, state = lif_step(state, current[t], self.params, self.surrogate, self.soft)
            out.append(y)
        self.last_state = _detached(state)
        return torch.stack(out)


class ALIFNeuron(nn.Module):
    """Adaptive-threshold neuron with a trainable scalar ``tau_a``.

    ``tau_a_bounds`` is read by the optimizer, which projects ``tau_a`` back
    into the box after every step.
    """

    def __init__(self, tau=0.2, u_th=0.3, surrogate_b=3.0, beta=0.07,
                 tau_a_init=0.3, tau_a_bounds=(0.2, 0.4), train_beta=False):
        super().__init__()
        self.base = LifParams(tau, u_th)
        self.surrogate = SurrogateSpec(surrogate_b)
        self.tau_a = nn.Parameter(torch.tensor(float(tau_a_init)))
        self.tau_a_bounds = tuple(tau_a_bounds)
        if train_beta:
            self.beta = nn.Parameter(torch.tensor(float(beta)))
        else:
            self.register_buffer("beta", torch.tensor(float(beta)))
        self.soft = False
        self.last_state: NeuronState | None = None
        self.last_threshold: torch.Tensor | None = None

    def extra_repr(self):
        return f"tau={self.base.tau}, u_th={self.base.u_th}, b={self.surrogate.b}"

    def param_boxes(self):
        return {"tau_a": self.tau_a_bounds, "beta": (0.0, math.inf)}

    def forward(self, current):
        params = AlifParams(self.base, self.beta, self.tau_a, self.tau_a_bounds)
        state = NeuronState.zeros_like(current[0], adaptive=True)
        out = []
        for t in range(current.shape[0]):
            y, state = alif_step(state, current[t], params, self.surrogate, self.soft)
            out.append(y)
        self.last_state = _detached(state)
        self.last_threshold = (self.base.u_th + self.beta * state.a).detach()
        return torch.stack(out)


def make_neuron(kind: str, cfg: NeuronConfig) -> nn.Module:
    kind = kind.lower()
    if kind == "lif":
        return LIFNeuron(cfg.tau, cfg.u_th, cfg.surrogate_b)
    if kind == "binary":
        return LIFNeuron(0.0, cfg.u_th, cfg.surrogate_b)
    if kind == "alif":
        return ALIFNeuron(cfg.tau, cfg.u_th, cfg.surrogate_b, cfg.beta,
                          cfg.tau_a_init, cfg.tau_a_bounds, cfg.train_beta)
    raise ConfigError(f"unknown neuron kind {kind!r}; expected lif, alif or binary")
