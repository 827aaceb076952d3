"""Conditional flow-matching baseline with an Euler sampler.

The velocity network is an ordinary generator whose conditioning vector is
summed with a projected sinusoidal embedding of ``t``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nets import GeneratorConfig, Linear, Module, ObsEncoder, build_generator
from .tensor import Tensor

TIME_EMBED_DIM = 16
TIME_SCALE = 100.0


def sinusoidal_embedding(t, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * TIME_SCALE
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def fm_interpolate(z, a, t):
    """Point on the straight path from noise ``z`` (t=0) to data ``a`` (t=1)."""
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if z.shape != a.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {a.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1 and z.ndim > 1:
        t = t.reshape((-1,) + (1,) * (z.ndim - 1))
    return (1.0 - t) * z + t * a


class FlowPolicy(Module):
    def __init__(self, cfg: GeneratorConfig, rng):
        self.encoder = ObsEncoder(cfg, rng)
        self.net = build_generator(cfg, rng)
        self.time_proj = Linear(TIME_EMBED_DIM, cfg.cond_dim, rng)
        self._cfg = cfg

    @property
    def cfg(self) -> GeneratorConfig:
        return self._cfg

    @property
    def generator(self):
        return self.net

    def conditioning(self, states, n: int) -> Tensor:
        g = self.encoder(states)
        return T.expand(g, (n, g.shape[1])) if g.shape[0] == 1 and n != 1 else g

    def velocity(self, x, t, g: Tensor) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        return self.net(x, g + self.time_proj(Tensor(sinusoidal_embedding(t))))

    def sample(self, states, n: int, rng: np.random.Generator, steps: int = 10) -> np.ndarray:
        cfg = self._cfg
        z = rng.standard_normal((n, cfg.horizon, cfg.action_dim))
        with T.no_grad():
            return euler_sample(self, self.conditioning(states, n), steps, z)


def fm_loss(policy: FlowPolicy, z, a, t, g: Tensor) -> Tensor:
    """Batch mean of ``||v(x_t, t, g) - (a - z)||^2``."""
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    x_t = fm_interpolate(z, a, t)
    diff = policy.velocity(x_t, t, g) - Tensor(a - z)
    return T.sum(diff * diff) * (1.0 / z.shape[0])


def euler_sample(policy: FlowPolicy, g: Tensor, steps: int, z) -> np.ndarray:
    if steps < 1:
        raise ValueError("need at least one Euler step")
    x = np.array(z, dtype=np.float64)
    dt = 1.0 / steps
    for i in range(steps):
        v = policy.velocity(x, i / steps, g)
        x = x + dt * v.data
    return x
