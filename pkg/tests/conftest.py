import numpy as np
import pytest
import torch

from sfpn.event_io import EventStream

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)


def random_stream(rng, n, width=16, height=12, t_max=200_000):
    t = np.sort(rng.integers(0, t_max, n))
    x = rng.integers(0, width, n)
    y = rng.integers(0, height, n)
    p = rng.choice([-1, 1], n)
    return EventStream((width, height), t.astype(np.int64), x.astype(np.int32), y.astype(np.int32), p.astype(np.int8))


def central_difference(f, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Numerical gradient of scalar ``f`` at ``x`` (float64, one coordinate at a time)."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(f(x))
        flat[i] = old - h
        down = float(f(x))
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
