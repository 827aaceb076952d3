"""Sigmoid-scheduled drift + MSE training, AdamW and binary checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .drift import DEFAULT_TEMPERATURES, aggregate_multi_temp
from .flow import FlowPolicy, fm_loss
from .nets import DriftPolicy, GeneratorConfig
from .tensor import Tensor
from .toybench import DemoSet

METHODS = ("ada3drift", "naive-drift", "fm")
NAIVE_TEMPERATURES = (0.05,)


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class ScheduleConfig:
    epochs: int = 2000
    crossover: float = 0.7
    sharpness: float = 0.05

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.crossover < 1.0:
            raise ValueError("crossover must lie in (0, 1)")
        if self.sharpness <= 0:
            raise ValueError("sharpness must be positive")


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_norm: float | None = 10.0


@dataclass
class TrainConfig:
    method: str = "ada3drift"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    temperatures: list[float] = field(default_factory=lambda: list(DEFAULT_TEMPERATURES))
    batch: int = 32
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def effective_temperatures(self) -> tuple[float, ...]:
        return NAIVE_TEMPERATURES if self.method == "naive-drift" else tuple(self.temperatures)


# ---------------------------------------------------------------------------
# schedule and losses


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def schedule_weights(epoch: float, cfg: ScheduleConfig) -> tuple[float, float]:
    """(w_drift, w_mse) at ``epoch``; crossover at ``cfg.crossover * E``."""
    E = cfg.epochs
    w_drift = _sigmoid((epoch - cfg.crossover * E) / (cfg.sharpness * E))
    return w_drift, 1.0 - w_drift


def method_weights(epoch: float, cfg: TrainConfig) -> tuple[float, float]:
    if cfg.method == "naive-drift":
        return 1.0, 0.0
    return schedule_weights(epoch, cfg.schedule)


def drift_loss(x_hat: Tensor, V) -> Tensor:
    """Batch mean of ``||x - sg(x + V)||^2``; its gradient is ``-2 V / N``."""
    V = np.asarray(V, dtype=np.float64)
    if V.shape != x_hat.shape:
        raise T.ShapeError(f"drift field {V.shape} does not match predictions {x_hat.shape}")
    target = T.stop_gradient(x_hat + Tensor(V))
    diff = x_hat - target
    return T.sum(diff * diff) * (1.0 / x_hat.shape[0])


def mse_loss(x_hat: Tensor, y) -> Tensor:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != x_hat.shape:
        raise T.ShapeError(f"targets {y.shape} do not match predictions {x_hat.shape}")
    diff = x_hat - Tensor(y)
    return T.mean(diff * diff)


def total_loss(x_hat: Tensor, y, V, epoch: float, cfg: ScheduleConfig) -> Tensor:
    w_drift, w_mse = schedule_weights(epoch, cfg)
    return w_drift * drift_loss(x_hat, V) + w_mse * mse_loss(x_hat, y)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    def __init__(self, named_params: dict[str, Tensor], cfg: OptimizerConfig):
        self.params = named_params
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return T.parameters_grad_norm(self.params.values())

    def step(self) -> float:
        c = self.cfg
        norm = self.grad_norm()
        if not math.isfinite(norm):
            raise NumericalError(f"non-finite gradient norm at optimizer step {self.t + 1}")
        clip = 1.0
        if c.clip_norm is not None and norm > c.clip_norm:
            clip = c.clip_norm / norm
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if clip != 1.0:
                g = g * clip
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * (g * g)
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)
            p.data = p.data * (1.0 - c.lr * c.weight_decay) - c.lr * update
        return norm


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    epoch: int
    seed: int
    config_hash: str
    meta: dict = field(default_factory=dict)


def build_model(cfg: TrainConfig):
    rng = np.random.default_rng([cfg.seed, 0])
    if cfg.method == "fm":
        return FlowPolicy(cfg.generator, rng)
    return DriftPolicy(cfg.generator, rng)


def snapshot(model, opt: AdamW, epoch: int, cfg: TrainConfig) -> TrainState:
    return TrainState(
        params={k: p.data.copy() for k, p in model.named_parameters()},
        m={k: a.copy() for k, a in opt.m.items()},
        v={k: a.copy() for k, a in opt.v.items()},
        step=opt.t,
        epoch=epoch,
        seed=cfg.seed,
        config_hash=cfg.hash(),
        meta={"method": cfg.method, "config": cfg.to_dict()},
    )


def restore(state: TrainState, cfg: TrainConfig):
    if state.config_hash != cfg.hash():
        raise ValueError("checkpoint was written for a different configuration")
    model = build_model(cfg)
    model.load_state_dict(state.params)
    opt = AdamW(dict(model.named_parameters()), cfg.optimizer)
    opt.m = {k: a.copy() for k, a in state.m.items()}
    opt.v = {k: a.copy() for k, a in state.v.items()}
    opt.t = state.step
    return model, opt


def check_dataset(data: DemoSet, gen: GeneratorConfig) -> None:
    if not data.contexts:
        raise ValueError("empty dataset")
    for i, c in enumerate(data.contexts):
        if c.demos.ndim != 3 or c.demos.shape[0] < 1:
            raise ValueError(f"context {i} has no demonstrations")
        if c.demos.shape[1:] != (gen.horizon, gen.action_dim):
            raise ValueError(
                f"context {i}: demos are {c.demos.shape[1:]}, generator expects "
                f"({gen.horizon}, {gen.action_dim})"
            )
        if c.states.shape != (gen.obs_steps, gen.state_dim):
            raise ValueError(
                f"context {i}: states are {c.states.shape}, generator expects "
                f"({gen.obs_steps}, {gen.state_dim})"
            )


# ---------------------------------------------------------------------------
# training loop


def _drift_step(model: DriftPolicy, ctx, cfg: TrainConfig, epoch: int, rng) -> dict:
    gen = cfg.generator
    G, D = cfg.batch, gen.flat_dim
    z = rng.standard_normal((G, gen.horizon, gen.action_dim))
    g = model.conditioning(ctx.states, G)
    x_hat = T.reshape(model.generate(z, g), (G, D))
    Y = ctx.flat_demos
    if not np.all(np.isfinite(x_hat.data)):
        raise NumericalError(f"non-finite generator output at epoch {epoch}")
    field_ = aggregate_multi_temp(x_hat.data, Y, D, cfg.effective_temperatures)
    pairs = Y[rng.integers(Y.shape[0], size=G)]
    w_drift, w_mse = method_weights(epoch, cfg)
    l_drift = drift_loss(x_hat, field_.V)
    l_mse = mse_loss(x_hat, pairs)
    loss = w_drift * l_drift + w_mse * l_mse
    return {
        "loss": loss,
        "l_mse": l_mse.item(),
        "l_drift": l_drift.item(),
        "w_drift": w_drift,
        "v_norm_mean": float(np.mean(field_.norms)),
        "lambda": {repr(k): v for k, v in field_.lambdas.items()},
    }


def _fm_step(model: FlowPolicy, ctx, cfg: TrainConfig, epoch: int, rng) -> dict:
    gen = cfg.generator
    G = cfg.batch
    demos = ctx.demos
    a = demos[rng.integers(demos.shape[0], size=G)]
    z = rng.standard_normal(a.shape)
    t = rng.uniform(0.0, 1.0, size=G)
    g = model.conditioning(ctx.states, G)
    loss = fm_loss(model, z, a, t, g)
    return {"loss": loss, "l_mse": loss.item(), "l_drift": 0.0, "w_drift": 0.0, "v_norm_mean": 0.0, "lambda": {}}


def _mean_metrics(rows: list[dict]) -> dict:
    out = {}
    for key in ("l_total", "l_mse", "l_drift", "w_drift", "v_norm_mean"):
        out[key] = float(np.mean([r[key] for r in rows]))
    lam = {}
    for k in rows[0]["lambda"]:
        lam[k] = float(np.mean([r["lambda"][k] for r in rows]))
    out["lambda"] = lam
    return out


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, epoch])


def train(
    data: DemoSet,
    cfg: TrainConfig,
    state: TrainState | None = None,
    stop_at: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    on_checkpoint: Callable[[TrainState], None] | None = None,
):
    """Train ``cfg.method`` on ``data``; returns ``(model, state, metrics)``.

    Each epoch visits every context once, in order, taking one optimizer step
    per context on ``cfg.batch`` noise draws. All randomness for epoch ``e``
    comes from ``epoch_rng(seed, e)``, so resuming from a checkpoint taken at
    the end of an epoch reproduces an uninterrupted run exactly.
    """
    check_dataset(data, cfg.generator)
    if state is None:
        model = build_model(cfg)
        opt = AdamW(dict(model.named_parameters()), cfg.optimizer)
        first = 0
    else:
        model, opt = restore(state, cfg)
        first = state.epoch
    E = cfg.schedule.epochs
    last = E if stop_at is None else min(stop_at, E)
    step_fn = _fm_step if cfg.method == "fm" else _drift_step
    metrics = []
    for epoch in range(first, last):
        t0 = time.perf_counter()
        rng = epoch_rng(cfg.seed, epoch)
        rows = []
        for ci, ctx in enumerate(data.contexts):
            opt.zero_grad()
            row = step_fn(model, ctx, cfg, epoch, rng)
            loss = row.pop("loss")
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, context {ci}")
            T.backward(loss)
            opt.step()
            row["l_total"] = value
            rows.append(row)
        rec = {"epoch": epoch, **_mean_metrics(rows)}
        rec["wall_ms"] = (time.perf_counter() - t0) * 1000.0
        metrics.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        done = epoch + 1
        if on_checkpoint is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < E:
            on_checkpoint(snapshot(model, opt, done, cfg))
    return model, snapshot(model, opt, last, cfg), metrics


def model_from_state(state: TrainState, cfg: TrainConfig | None = None):
    if cfg is None:
        cfg = config_from_meta(state.meta)
    model = build_model(cfg)
    model.load_state_dict(state.params)
    return model, cfg


def config_from_meta(meta: dict) -> TrainConfig:
    d = meta["config"]
    return TrainConfig(
        method=d["method"],
        generator=GeneratorConfig(**d["generator"]),
        schedule=ScheduleConfig(**d["schedule"]),
        optimizer=OptimizerConfig(**d["optimizer"]),
        temperatures=list(d["temperatures"]),
        batch=d["batch"],
        seed=d["seed"],
        checkpoint_every=d["checkpoint_every"],
    )


# ---------------------------------------------------------------------------
# checkpoint format
#
#   b"AD3D" | u32 version | 32-byte sha256 config hash
#   | u32 len | metadata JSON (utf-8, sorted keys)
#   | u32 count | count x (u32 len | name | u32 ndim | ndim x u32 | float64 data)
#
# All integers and floats little-endian.

MAGIC = b"AD3D"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def _tensors(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", a) for k, a in state.params.items()]
    out += [(f"m/{k}", a) for k, a in state.m.items()]
    out += [(f"v/{k}", a) for k, a in state.v.items()]
    return out


def checkpoint_bytes(state: TrainState) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(bytes.fromhex(state.config_hash))
    meta = dict(state.meta, step=state.step, epoch=state.epoch, seed=state.seed)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    tensors = _tensors(state)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(state: TrainState, path) -> None:
    atomic_write(path, checkpoint_bytes(state))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def parse_checkpoint(data: bytes) -> TrainState:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    config_hash = r.take(32).hex()
    try:
        meta = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError("corrupt checkpoint metadata") from exc
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "m": {}, "v": {}}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise CheckpointFormatError(f"unknown tensor group in {name!r}")
        groups[kind][key] = arr
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} trailing bytes after checkpoint payload")
    step, epoch, seed = meta.pop("step"), meta.pop("epoch"), meta.pop("seed")
    return TrainState(groups["param"], groups["m"], groups["v"], step, epoch, seed, config_hash, meta)


def load_checkpoint(path) -> TrainState:
    return parse_checkpoint(Path(path).read_bytes())
