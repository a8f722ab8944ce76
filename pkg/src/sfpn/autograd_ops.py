"""Differentiable kernel set used by the detector.

Tensors, the tape and reverse-mode accumulation are torch's; this module pins
the handful of primitives the network needs, validates their shapes, and owns
the one non-standard piece: the Heaviside spike whose backward pass is replaced
by the Dspike surrogate.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError, NonFiniteError, ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_debug = False


def set_debug(enabled: bool) -> None:
    """Turn on the non-finite check performed after every primitive."""
    global _debug
    _debug = bool(enabled)


@contextlib.contextmanager
def debug_checks():
    prev = _debug
    set_debug(True)
    try:
        yield
    finally:
        set_debug(prev)


def _check(name: str, out: torch.Tensor) -> torch.Tensor:
    if _debug and not torch.isfinite(out).all():
        raise NonFiniteError(f"{name} produced non-finite values (shape {tuple(out.shape)})")
    return out


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(input, weight, stride: int = 1, padding: int = 0, bias=None):
    if input.dim() != 4 or weight.dim() != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    kh, kw = weight.shape[-2:]
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"only 1x1 and 3x3 kernels are supported, got {kh}x{kw}")
    if input.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input has {input.shape[1]}, weight expects {weight.shape[1]}")
    return _check("conv2d", F.conv2d(input, weight, bias, stride=stride, padding=padding))


@dataclass
class BNState:
    """Per-channel affine parameters and running statistics.

    Running statistics start out as ``None`` and are only populated by a
    training-mode call (or :meth:`init_running_stats`).
    """

    weight: torch.Tensor
    bias: torch.Tensor
    running_mean: torch.Tensor | None = None
    running_var: torch.Tensor | None = None
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    num_batches_tracked: int = field(default=0)

    @classmethod
    def create(cls, channels: int, dtype=torch.float32):
        return cls(torch.ones(channels, dtype=dtype), torch.zeros(channels, dtype=dtype))

    def init_running_stats(self):
        c = self.weight.shape[0]
        self.running_mean = torch.zeros(c, dtype=self.weight.dtype)
        self.running_var = torch.ones(c, dtype=self.weight.dtype)
        return self


def batch_norm(input, state: BNState, training: bool):
    c = input.shape[1]
    if state.weight.shape[0] != c:
        raise ShapeError(f"batch_norm over {c} channels but state has {state.weight.shape[0]}")
    if training:
        if state.running_mean is None:
            state.init_running_stats()
        state.num_batches_tracked += 1
    elif state.running_mean is None:
        raise ConfigError("batch_norm in eval mode before running statistics exist")
    out = F.batch_norm(
        input, state.running_mean, state.running_var, state.weight, state.bias,
        training=training, momentum=state.momentum, eps=state.eps,
    )
    return _check("batch_norm", out)


def fold_bn_into_conv(conv_weight, bn: BNState, conv_bias=None, eps: float | None = None):
    """Return ``(weight, bias)`` of a single conv equal to conv followed by eval-mode BN."""
    if bn.running_mean is None:
        raise ConfigError("cannot fold batch norm without running statistics")
    eps = bn.eps if eps is None else eps
    scale = bn.weight / torch.sqrt(bn.running_var + eps)
    weight = conv_weight * scale.reshape(-1, 1, 1, 1)
    bias = conv_bias if conv_bias is not None else torch.zeros_like(bn.running_mean)
    bias = bn.bias + (bias - bn.running_mean) * scale
    return weight, bias


def upsample_nearest_x2(input):
    out = input.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)
    return _check("upsample_nearest_x2", out)


def concat_channels(a, b):
    if a.dim() != 4 or b.dim() != 4:
        raise ShapeError("concat_channels expects 4-d tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {tuple(a.shape)} with {tuple(b.shape)}")
    return torch.cat([a, b], dim=1)


# -- spike with surrogate gradient ---------------------------------------------


@dataclass(frozen=True)
class SurrogateSpec:
    """Dspike surrogate ``a*tanh(b*(u-c)) + d`` on ``[0, 1]``.

    With ``c = d = 1/2`` and ``a = 1/(2 tanh(b/2))`` the curve passes through
    (0, 0) and (1, 1) for every temperature ``b``.
    """

    b: float = 3.0

    def __post_init__(self):
        if not self.b > 0:
            raise ConfigError(f"Dspike temperature must be positive, got {self.b}")

    @property
    def a_coef(self) -> float:
        return 1.0 / (2.0 * float(torch.tanh(torch.tensor(self.b / 2.0, dtype=torch.float64))))

    c_center = 0.5
    d_offset = 0.5


def normalize_membrane(v):
    """Map threshold-relative membrane ``v = u - theta`` into the unit surrogate window."""
    return torch.clamp(v + 0.5, 0.0, 1.0)


def _surrogate_grad(v, spec: SurrogateSpec):
    z = v + 0.5
    inside = (z >= 0) & (z <= 1)
    t = torch.tanh(spec.b * (z - spec.c_center))
    return torch.where(inside, spec.a_coef * spec.b * (1 - t * t), torch.zeros_like(z))


class _SpikeFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, v, b):
        ctx.save_for_backward(v)
        ctx.spec = SurrogateSpec(b)
        return (v >= 0).to(v.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (v,) = ctx.saved_tensors
        return grad_out * _surrogate_grad(v, ctx.spec), None


def heaviside_with_surrogate(v, surrogate: SurrogateSpec, soft: bool = False):
    """Spike ``H(v)`` with ``H(0) = 1`` for threshold-relative membrane ``v``.

    The backward pass multiplies by the derivative of ``Dspike(clamp(v + 1/2))``,
    which vanishes outside the unit window.  ``soft=True`` emits that smooth
    function in the forward pass as well, so ordinary autodiff can be checked
    against finite differences; it is never used for training.
    """
    if soft:
        z = normalize_membrane(v)
        return surrogate.a_coef * torch.tanh(surrogate.b * (z - surrogate.c_center)) + surrogate.d_offset
    return _SpikeFn.apply(v, surrogate.b)
