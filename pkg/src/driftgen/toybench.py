"""Synthetic multimodal benchmarks, rollouts and mode-fidelity metrics.

Two tasks:

* ``bimodal``: every trajectory entry sits near ``-m`` or ``+m``; half the
  demonstrations of each context take each sign.
* ``obstacle``: reach from ``start`` to ``goal`` around a disc lying on the
  straight line between them, passing either left or right.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DEMOSET_SCHEMA_VERSION = 1


@dataclass
class BimodalTask:
    kind: str = "bimodal"
    m: float = 1.0
    sigma: float = 0.05
    n_contexts: int = 2
    demos_per_mode: int = 10
    horizon: int = 4
    action_dim: int = 1
    state_dim: int = 2
    obs_steps: int = 2

    def __post_init__(self):
        if not 2 * self.m > 6 * self.sigma:
            raise ValueError(f"modes not separated: 2m={2 * self.m} <= 6 sigma={6 * self.sigma}")
        if min(self.n_contexts, self.demos_per_mode, self.horizon, self.action_dim) < 1:
            raise ValueError("task sizes must be positive")

    @property
    def flat_dim(self) -> int:
        return self.horizon * self.action_dim

    def centers(self) -> np.ndarray:
        ones = np.ones(self.flat_dim)
        return np.stack([-self.m * ones, self.m * ones])


@dataclass
class ObstacleTask:
    kind: str = "obstacle"
    start: list[float] = field(default_factory=lambda: [0.0, 0.0])
    goal: list[float] = field(default_factory=lambda: [0.0, 2.0])
    center: list[float] = field(default_factory=lambda: [0.0, 1.0])
    radius: float = 0.3
    margin: float = 0.1
    jitter: float = 0.05
    horizon: int = 16
    action_dim: int = 2
    demos_per_mode: int = 20
    replan_every: int = 8
    obs_steps: int = 2
    goal_tol: float = 0.1
    max_chunks: int = 4
    waypoint_noise: float = 0.0

    def __post_init__(self):
        if self.action_dim != 2:
            raise ValueError("obstacle task is planar (action_dim = 2)")
        if not 1 <= self.replan_every <= self.horizon:
            raise ValueError("replan_every must lie in [1, horizon]")

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def flat_dim(self) -> int:
        return self.horizon * self.action_dim


def task_from_dict(d: dict):
    d = dict(d)
    kind = d.get("kind", "bimodal")
    cls = {"bimodal": BimodalTask, "obstacle": ObstacleTask}.get(kind)
    if cls is None:
        raise ValueError(f"unknown task kind {kind!r}")
    return cls(**d)


@dataclass
class Context:
    states: np.ndarray  # (obs_steps, state_dim)
    demos: np.ndarray  # (M, H, D_a)
    modes: np.ndarray  # (M,) integer mode labels, -1 when not applicable

    @property
    def flat_demos(self) -> np.ndarray:
        return self.demos.reshape(self.demos.shape[0], -1)


@dataclass
class DemoSet:
    task: dict
    contexts: list[Context]
    seed: int = 0

    @property
    def horizon(self) -> int:
        return self.contexts[0].demos.shape[1]

    @property
    def action_dim(self) -> int:
        return self.contexts[0].demos.shape[2]

    @property
    def state_dim(self) -> int:
        return self.contexts[0].states.shape[1]

    @property
    def obs_steps(self) -> int:
        return self.contexts[0].states.shape[0]

    def to_json(self) -> dict:
        return {
            "schema_version": DEMOSET_SCHEMA_VERSION,
            "task": self.task,
            "seed": self.seed,
            "contexts": [
                {
                    "id": i,
                    "states": c.states.tolist(),
                    "demos": c.demos.tolist(),
                    "modes": [int(m) for m in c.modes],
                }
                for i, c in enumerate(self.contexts)
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> DemoSet:
        version = d.get("schema_version")
        if version != DEMOSET_SCHEMA_VERSION:
            raise ValueError(f"unsupported demo-set schema_version {version!r}")
        contexts = [
            Context(
                states=np.asarray(c["states"], dtype=np.float64),
                demos=np.asarray(c["demos"], dtype=np.float64),
                modes=np.asarray(c["modes"], dtype=np.int64),
            )
            for c in d["contexts"]
        ]
        if not contexts:
            raise ValueError("demo set has no contexts")
        return cls(task=d["task"], contexts=contexts, seed=int(d.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> DemoSet:
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# bimodal task


def _context_states(rng, task) -> list[np.ndarray]:
    pts = rng.uniform(-1.0, 1.0, size=(task.n_contexts, task.state_dim))
    return [np.repeat(p[None, :], task.obs_steps, axis=0) for p in pts]


def _truncated_normal(rng, shape, sigma, bound=5.0) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * sigma


def gen_bimodal_demos(task: BimodalTask, seed: int) -> DemoSet:
    rng = np.random.default_rng(seed)
    centers = task.centers()
    contexts = []
    for states in _context_states(rng, task):
        modes = np.repeat(np.arange(2), task.demos_per_mode)
        noise = _truncated_normal(rng, (modes.size, task.flat_dim), task.sigma)
        demos = centers[modes] + noise
        contexts.append(Context(states, demos.reshape(-1, task.horizon, task.action_dim), modes))
    return DemoSet(asdict(task), contexts, seed)


# ---------------------------------------------------------------------------
# obstacle task


def point_segment_distance(p, a, b) -> float:
    p, a, b = (np.asarray(v, dtype=np.float64) for v in (p, a, b))
    ab = b - a
    denom = float(ab @ ab)
    s = 0.0 if denom == 0.0 else min(max(float((p - a) @ ab) / denom, 0.0), 1.0)
    return float(np.linalg.norm(p - (a + s * ab)))


def collision_check(path, center, radius: float) -> bool:
    """True iff any segment of the polyline passes within ``radius`` of ``center``."""
    pts = np.asarray(path, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 1:
        return bool(np.linalg.norm(pts[0] - np.asarray(center)) <= radius)
    return any(point_segment_distance(center, a, b) <= radius for a, b in zip(pts[:-1], pts[1:]))


def obstacle_arc(task: ObstacleTask, amplitude: float) -> np.ndarray:
    """H waypoints after the start, bowing sideways by ``amplitude``."""
    start, goal = np.asarray(task.start, float), np.asarray(task.goal, float)
    axis = goal - start
    lateral = np.array([axis[1], -axis[0]]) / np.linalg.norm(axis)
    s = np.arange(1, task.horizon + 1) / task.horizon
    return start + s[:, None] * axis + (amplitude * np.sin(np.pi * s))[:, None] * lateral


def _future_chunk(path: np.ndarray, k: int, horizon: int, goal) -> np.ndarray:
    chunk = path[k : k + horizon]
    if len(chunk) < horizon:
        pad = np.repeat(np.asarray(goal, float)[None, :], horizon - len(chunk), axis=0)
        chunk = np.concatenate([chunk, pad], axis=0)
    return chunk


def gen_obstacle_demos(task: ObstacleTask, n_per_mode: int | None = None, seed: int = 0) -> DemoSet:
    """Left/right expert arcs, grouped by the observation they are planned from.

    Context 0 is the start (both modes). Every later replanning point of
    every demonstration gets its own single-demo context.
    """
    n = task.demos_per_mode if n_per_mode is None else int(n_per_mode)
    rng = np.random.default_rng(seed)
    start = np.asarray(task.start, float)
    paths, modes = [], []
    for mode, sign in enumerate((1.0, -1.0)):
        for _ in range(n):
            amp = sign * (task.radius + task.margin + task.jitter * rng.uniform())
            path = obstacle_arc(task, amp)
            if collision_check(np.vstack([start, path]), task.center, task.radius):
                raise AssertionError("expert demonstration collides")
            if np.linalg.norm(path[-1] - np.asarray(task.goal)) > 0.05:
                raise AssertionError("expert demonstration misses the goal")
            paths.append(path)
            modes.append(mode)
    first = np.repeat(start[None, :], task.obs_steps, axis=0)
    contexts = [Context(first, np.stack(paths), np.asarray(modes))]
    for path, mode in zip(paths, modes):
        full = np.vstack([start, path])
        for k in range(task.replan_every, task.horizon, task.replan_every):
            idx = [max(k - task.obs_steps + 1 + j, 0) for j in range(task.obs_steps)]
            chunk = _future_chunk(path, k, task.horizon, task.goal)
            contexts.append(Context(full[idx], chunk[None], np.asarray([mode])))
    return DemoSet(asdict(task), contexts, seed)


def generate_demos(task, seed: int) -> DemoSet:
    if isinstance(task, BimodalTask):
        return gen_bimodal_demos(task, seed)
    return gen_obstacle_demos(task, seed=seed)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutResult:
    path: np.ndarray
    collision: bool
    success: bool
    chunks: int
    nfe: int

    @property
    def steps(self) -> int:
        return len(self.path) - 1


class ChunkPolicy:
    """Adapts a trained model to the ``policy(states, rng)`` rollout interface.

    ``steps`` is passed through to flow-matching samplers; drifting models
    ignore it (they always take one evaluation per chunk).
    """

    def __init__(self, model, steps: int | None = None):
        self.model = model
        self.steps = steps

    @property
    def generator(self):
        return self.model.generator

    def __call__(self, states, rng) -> np.ndarray:
        if self.steps is None:
            return self.model.sample(states, 1, rng)[0]
        return self.model.sample(states, 1, rng, steps=self.steps)[0]


def receding_rollout(policy, task: ObstacleTask, n_exec: int | None = None, seed=0) -> RolloutResult:
    """Plan H waypoints, execute the first ``n_exec``, re-observe, repeat.

    ``policy(states, rng)`` returns an ``(H, 2)`` chunk. When the policy
    exposes a ``generator`` its evaluations are counted as NFE.
    """
    from .nets import NFESession

    n_exec = task.replan_every if n_exec is None else int(n_exec)
    if not 1 <= n_exec <= task.horizon:
        raise ValueError("execution length must lie in [1, H]")
    rng = np.random.default_rng(seed)
    start, goal = np.asarray(task.start, float), np.asarray(task.goal, float)
    path = [start]
    chunks = 0
    reached = False
    gen = getattr(policy, "generator", None)
    session = NFESession(gen) if gen is not None else NFESession()
    with session:
        while chunks < task.max_chunks and not reached:
            hist = [path[max(len(path) - task.obs_steps + j, 0)] for j in range(task.obs_steps)]
            chunk = np.asarray(policy(np.stack(hist), rng), dtype=np.float64)
            chunks += 1
            for wp in chunk[:n_exec]:
                if task.waypoint_noise > 0:
                    wp = wp + rng.normal(0.0, task.waypoint_noise, size=2)
                path.append(wp)
                if np.linalg.norm(wp - goal) <= task.goal_tol:
                    reached = True
                    break
    path = np.stack(path)
    collision = collision_check(path, task.center, task.radius)
    return RolloutResult(path, collision, reached and not collision, chunks, session.count)


# ---------------------------------------------------------------------------
# mode metrics


@dataclass
class ModeReport:
    n: int
    capture_per_mode: list[float]
    capture: float
    collapse: float
    outside: float
    mean_distance: float

    def to_dict(self) -> dict:
        return asdict(self)


def mode_metrics(samples, centers, radius: float) -> ModeReport:
    """Capture / midpoint-collapse / outside fractions of samples around mode centres.

    A sample is captured by its nearest centre (lowest index on ties) when
    within ``radius``. An uncaptured sample has collapsed when it is closer to
    the midpoint of its two nearest centres than to any centre.
    """
    X = np.asarray(samples, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    C = np.asarray(centers, dtype=np.float64).reshape(len(centers), -1)
    if X.shape[0] < 1:
        raise ValueError("need at least one sample")
    dist = np.linalg.norm(X[:, None, :] - C[None, :, :], axis=2)
    nearest = np.argmin(dist, axis=1)
    dmin = dist[np.arange(len(X)), nearest]
    captured = dmin <= radius
    per_mode = [float(np.mean(captured & (nearest == k))) for k in range(len(C))]
    collapsed = np.zeros(len(X), dtype=bool)
    if len(C) >= 2:
        order = np.argsort(dist, axis=1, kind="stable")[:, :2]
        mid = 0.5 * (C[order[:, 0]] + C[order[:, 1]])
        dmid = np.linalg.norm(X - mid, axis=1)
        collapsed = ~captured & (dmid < dmin)
    capture = float(np.mean(captured))
    collapse = float(np.mean(collapsed))
    return ModeReport(
        n=int(len(X)),
        capture_per_mode=per_mode,
        capture=capture,
        collapse=collapse,
        outside=float(np.mean(~captured & ~collapsed)),
        mean_distance=float(np.mean(dmin)),
    )


def obstacle_mode_centers(demos: DemoSet) -> np.ndarray:
    ctx = demos.contexts[0]
    return np.stack([ctx.flat_demos[ctx.modes == k].mean(axis=0) for k in (0, 1)])


__all__ = [
    "BimodalTask",
    "ObstacleTask",
    "Context",
    "DemoSet",
    "gen_bimodal_demos",
    "gen_obstacle_demos",
    "collision_check",
    "point_segment_distance",
    "obstacle_arc",
    "obstacle_mode_centers",
    "generate_demos",
    "task_from_dict",
    "receding_rollout",
    "ChunkPolicy",
    "mode_metrics",
    "ModeReport",
    "RolloutResult",
]
