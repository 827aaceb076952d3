"""Timestep-free one-step generators and the proprioceptive observation encoder.

Two generator kinds share one interface, ``net(z, g) -> trajectory`` with
``z`` and the output both shaped ``(B, H, D_a)``:

* ``mlp``: flattened noise through FiLM-modulated hidden layers.
* ``unet1d``: three-level 1D conv U-Net (kernel 5), FiLM in every residual
  block, stride-2 downsampling and nearest-neighbour upsampling.

Neither takes a time or noise-level input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class GeneratorConfig:
    kind: str = "mlp"
    action_dim: int = 2
    horizon: int = 16
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    groups: int = 8
    state_dim: int = 2
    obs_steps: int = 2
    obs_feature_dim: int = 16
    encoder_hidden: int = 32

    def __post_init__(self):
        if self.kind not in ("mlp", "unet1d"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if min(self.action_dim, self.horizon, self.state_dim, self.obs_steps) < 1:
            raise ValueError("dimensions must be positive")
        if any(w < 1 for w in list(self.hidden) + list(self.widths)):
            raise ValueError("layer widths must be positive")
        if self.kind == "unet1d":
            if len(self.widths) != 3:
                raise ValueError("unet1d needs exactly three resolution levels")
            if self.horizon % 4:
                raise ValueError(f"unet1d horizon must be divisible by 4, got {self.horizon}")

    @property
    def cond_dim(self) -> int:
        return self.obs_steps * self.obs_feature_dim

    @property
    def flat_dim(self) -> int:
        return self.horizon * self.action_dim

    def to_dict(self) -> dict:
        return asdict(self)


def groups_for(channels: int, preferred: int = 8) -> int:
    if channels % preferred == 0:
        return preferred
    for g in range(min(preferred, max(channels // 2, 1)), 0, -1):
        if channels % g == 0:
            return g
    return 1


class Module:
    """Parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(val, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))


def _walk(val, name: str):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")


def _uniform(rng, shape, fan_in, gain=1.0) -> Tensor:
    bound = gain / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0):
        self.weight = _uniform(rng, (n_in, n_out), n_in, gain)
        self.bias = _zeros((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + T.expand(T.reshape(self.bias, (1, -1)), y.shape)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, rng, kernel: int = 5, stride: int = 1):
        self.weight = _uniform(rng, (c_out, c_in, kernel), c_in * kernel)
        self.bias = _zeros((c_out,))
        self._stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, stride=self._stride)


def film(h: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """``gamma * h + beta`` with per-channel (B, C) vectors broadcast over time."""
    if h.ndim == 3:
        b, c, t = h.shape
        gamma = T.expand(T.reshape(gamma, (b, c, 1)), h.shape)
        beta = T.expand(T.reshape(beta, (b, c, 1)), h.shape)
    return gamma * h + beta


class FiLMHead(Module):
    """Mish-activated linear map from the conditioning vector to (gamma, beta).

    Initialised near the identity modulation: gamma = 1 + small, beta = small.
    """

    def __init__(self, cond_dim: int, channels: int, rng):
        self.scale = Linear(cond_dim, channels, rng, gain=0.1)
        self.shift = Linear(cond_dim, channels, rng, gain=0.1)

    def __call__(self, g: Tensor) -> tuple[Tensor, Tensor]:
        a = T.mish(g)
        return 1.0 + self.scale(a), self.shift(a)


class ConvFiLM(Module):
    """Conv -> GroupNorm -> FiLM, the modulated half of a residual block."""

    def __init__(self, c_in: int, c_out: int, cond_dim: int, groups: int, rng):
        self.conv = Conv1d(c_in, c_out, rng)
        self.head = FiLMHead(cond_dim, c_out, rng)
        self._groups = groups

    def __call__(self, h: Tensor, g: Tensor) -> Tensor:
        gamma, beta = self.head(g)
        return film(T.group_norm(self.conv(h), self._groups), gamma, beta)


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, cond_dim: int, rng, groups: int = 8):
        groups = groups_for(c_out, groups)
        self.first = ConvFiLM(c_in, c_out, cond_dim, groups, rng)
        self.conv2 = Conv1d(c_out, c_out, rng)
        self.shortcut = Conv1d(c_in, c_out, rng, kernel=1) if c_in != c_out else None
        self._groups = groups

    def __call__(self, x: Tensor, g: Tensor) -> Tensor:
        h = T.mish(self.first(x, g))
        h = T.mish(T.group_norm(self.conv2(h), self._groups))
        return h + (self.shortcut(x) if self.shortcut is not None else x)


class ObsEncoder(Module):
    """Per-step two-layer MLP on proprioceptive state; features concatenated."""

    def __init__(self, cfg: GeneratorConfig, rng):
        self.l1 = Linear(cfg.state_dim, cfg.encoder_hidden, rng)
        self.l2 = Linear(cfg.encoder_hidden, cfg.obs_feature_dim, rng)
        self._steps = cfg.obs_steps
        self._state_dim = cfg.state_dim

    def __call__(self, states) -> Tensor:
        s = states if isinstance(states, Tensor) else Tensor(states)
        if s.ndim == 2:
            s = T.reshape(s, (1,) + s.shape)
        if s.ndim != 3 or s.shape[1] != self._steps or s.shape[2] != self._state_dim:
            raise ShapeError(
                f"expected (B, {self._steps}, {self._state_dim}) states, got {tuple(s.shape)}"
            )
        b = s.shape[0]
        h = T.reshape(s, (b * self._steps, self._state_dim))
        c = self.l2(T.mish(self.l1(h)))
        return T.reshape(c, (b, -1))


class Generator(Module):
    """Base class: counts forward evaluations into any open NFE sessions."""

    def __init__(self, cfg: GeneratorConfig):
        self._cfg = cfg
        self._sessions: list[NFESession] = []

    @property
    def cfg(self) -> GeneratorConfig:
        return self._cfg

    def __call__(self, z, g: Tensor, **kw) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        cfg = self._cfg
        if z.ndim != 3 or z.shape[1:] != (cfg.horizon, cfg.action_dim):
            raise ShapeError(f"noise must be (B, {cfg.horizon}, {cfg.action_dim}), got {z.shape}")
        if g.shape != (z.shape[0], cfg.cond_dim):
            raise ShapeError(f"conditioning must be ({z.shape[0]}, {cfg.cond_dim}), got {g.shape}")
        for s in self._sessions:
            s.count += z.shape[0]
        return self.forward(z, g, **kw)

    def forward(self, z: Tensor, g: Tensor, **kw) -> Tensor:
        raise NotImplementedError


class MLPGenerator(Generator):
    def __init__(self, cfg: GeneratorConfig, rng):
        super().__init__(cfg)
        sizes = [cfg.flat_dim] + list(cfg.hidden)
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.films = [FiLMHead(cfg.cond_dim, w, rng) for w in cfg.hidden]
        self.out = Linear(sizes[-1], cfg.flat_dim, rng)

    def forward(self, z, g, **kw):
        b = z.shape[0]
        x = T.reshape(z, (b, self.cfg.flat_dim))
        for layer, head in zip(self.layers, self.films):
            gamma, beta = head(g)
            x = T.mish(film(layer(x), gamma, beta))
        return T.reshape(self.out(x), (b, self.cfg.horizon, self.cfg.action_dim))


class UNet1DGenerator(Generator):
    def __init__(self, cfg: GeneratorConfig, rng):
        super().__init__(cfg)
        w = list(cfg.widths)
        cd, G = cfg.cond_dim, cfg.groups
        chans = [cfg.action_dim] + w
        self.down = []
        for i in range(3):
            stage = [ResBlock(chans[i], chans[i + 1], cd, rng, G), ResBlock(chans[i + 1], chans[i + 1], cd, rng, G)]
            if i < 2:
                stage.append(Conv1d(chans[i + 1], chans[i + 1], rng, stride=2))
            self.down.append(stage)
        self.mid = [ResBlock(w[2], w[2], cd, rng, G), ResBlock(w[2], w[2], cd, rng, G)]
        self.up = []
        for lo, hi in ((w[1], w[2]), (w[0], w[1])):
            self.up.append([ResBlock(2 * hi, lo, cd, rng, G), ResBlock(lo, lo, cd, rng, G), Conv1d(lo, lo, rng)])
        self.final_conv = Conv1d(w[0], w[0], rng)
        self.proj = Conv1d(w[0], cfg.action_dim, rng, kernel=1)
        self._final_groups = groups_for(w[0], G)

    def forward(self, z, g, trace: list | None = None, ablate_skip: int | None = None):
        x = T.permute(z, (0, 2, 1))
        skips = []
        for stage in self.down:
            x = stage[1](stage[0](x, g), g)
            skips.append(x)
            if trace is not None:
                trace.append(x.shape[-1])
            if len(stage) == 3:
                x = stage[2](x)
        for blk in self.mid:
            x = blk(x, g)
        if trace is not None:
            trace.append(x.shape[-1])
        for k, (b1, b2, conv) in enumerate(self.up):
            skip = skips[len(skips) - 1 - k]
            if ablate_skip == k:
                skip = T.mul(skip, 0.0)
            x = b2(b1(T.concat([x, skip], axis=1), g), g)
            x = conv(T.upsample_nearest(x, 2))
            if trace is not None:
                trace.append(x.shape[-1])
        x = T.mish(T.group_norm(self.final_conv(x), self._final_groups))
        return T.permute(self.proj(x), (0, 2, 1))


def build_generator(cfg: GeneratorConfig, rng) -> Generator:
    return MLPGenerator(cfg, rng) if cfg.kind == "mlp" else UNet1DGenerator(cfg, rng)


class NFESession:
    """Counts generator evaluations per sample while the block is open."""

    def __init__(self, *nets: Generator):
        self.nets = nets
        self.count = 0

    def __enter__(self) -> NFESession:
        for n in self.nets:
            n._sessions.append(self)
        return self

    def __exit__(self, *exc) -> None:
        for n in self.nets:
            n._sessions.remove(self)


def count_nfe(session: NFESession) -> int:
    return session.count


class DriftPolicy(Module):
    """Encoder plus one-step generator: one evaluation per sampled chunk."""

    def __init__(self, cfg: GeneratorConfig, rng):
        self.encoder = ObsEncoder(cfg, rng)
        self.net = build_generator(cfg, rng)
        self._cfg = cfg

    @property
    def cfg(self) -> GeneratorConfig:
        return self._cfg

    @property
    def generator(self) -> Generator:
        return self.net

    def conditioning(self, states, n: int) -> Tensor:
        g = self.encoder(states)
        return T.expand(g, (n, g.shape[1])) if g.shape[0] == 1 and n != 1 else g

    def generate(self, z, g: Tensor) -> Tensor:
        return self.net(z, g)

    def sample(self, states, n: int, rng: np.random.Generator) -> np.ndarray:
        cfg = self._cfg
        z = rng.standard_normal((n, cfg.horizon, cfg.action_dim))
        with T.no_grad():
            return self.generate(z, self.conditioning(states, n)).data.copy()
