"""``driftgen`` command line: gen-data, train, eval, export-plot, grad-check.

Run directory layout::

    RUN/config.toml        effective configuration (all defaults filled in)
    RUN/manifest.json      seed, config hash, wall-clock timings, file digests
    RUN/demos.json         the demonstrations trained on
    RUN/checkpoints/       epoch_NNNNNN.ad3d (periodic) and final.ad3d
    RUN/metrics.jsonl      one JSON object per epoch, deterministic
    RUN/report.json        written by ``eval``

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .nets import GeneratorConfig, NFESession
from .toybench import (
    BimodalTask,
    ChunkPolicy,
    DemoSet,
    ObstacleTask,
    generate_demos,
    mode_metrics,
    obstacle_mode_centers,
    receding_rollout,
    task_from_dict,
)
from .training import (
    METHODS,
    CheckpointError,
    NumericalError,
    OptimizerConfig,
    ScheduleConfig,
    TrainConfig,
    atomic_write,
    load_checkpoint,
    model_from_state,
    save_checkpoint,
    train,
)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# generator dimensions always come from the task, never from the config
GENERATOR_KEYS = ("kind", "hidden", "widths", "groups", "obs_feature_dim", "encoder_hidden")
TOP_KEYS = (
    "schema_version", "method", "seed", "batch", "temperatures", "checkpoint_every",
    "task", "generator", "schedule", "optimizer", "eval",
)
REQUIRED = ("schema_version", "method", "seed", "task")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class EvalConfig:
    samples_per_context: int = 500
    rollouts: int = 200
    radius: float = 0.25
    nfe: int = 10


@dataclass
class RunConfig:
    task: dict
    train: TrainConfig
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        t = self.train
        gen = {k: getattr(t.generator, k) for k in GENERATOR_KEYS}
        opt = asdict(t.optimizer)
        opt["clip_norm"] = 0.0 if opt["clip_norm"] is None else opt["clip_norm"]
        return {
            "schema_version": SCHEMA_VERSION,
            "method": t.method,
            "seed": t.seed,
            "batch": t.batch,
            "temperatures": list(t.temperatures),
            "checkpoint_every": t.checkpoint_every,
            "task": dict(self.task),
            "generator": gen,
            "schedule": asdict(t.schedule),
            "optimizer": opt,
            "eval": asdict(self.eval),
        }

    def to_toml(self) -> str:
        import tomli_w

        return tomli_w.dumps(self.to_dict())

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# config parsing


def _check_keys(table: dict, allowed, where: str) -> None:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _table(d: dict, name: str) -> dict:
    val = d.get(name, {})
    if not isinstance(val, dict):
        raise ConfigError(f"[{name}] must be a table")
    return val


def _build(cls, table: dict, where: str, allowed=None):
    names = [f.name for f in fields(cls)] if allowed is None else list(allowed)
    _check_keys(table, names, where)
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(d: dict) -> RunConfig:
    """Validate a raw config mapping. Nothing is computed before this passes."""
    for key in REQUIRED:
        if key not in d:
            raise ConfigError(f"missing required key '{key}'")
    _check_keys(d, TOP_KEYS, "config")
    if d["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {d['schema_version']!r}")
    if d["method"] not in METHODS:
        raise ConfigError(f"method must be one of {', '.join(METHODS)}, got {d['method']!r}")
    if not isinstance(d["seed"], int) or isinstance(d["seed"], bool) or d["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {d['seed']!r}")

    task_d = _table(d, "task")
    if "kind" not in task_d:
        raise ConfigError("missing required key 'task.kind'")
    try:
        task = task_from_dict(task_d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[task]: {exc}") from exc

    gen_d = dict(_table(d, "generator"))
    _check_keys(gen_d, GENERATOR_KEYS, "[generator]")
    gen_d.update(
        action_dim=task.action_dim, horizon=task.horizon, state_dim=task.state_dim, obs_steps=task.obs_steps
    )
    generator = _build(GeneratorConfig, gen_d, "[generator]")
    schedule = _build(ScheduleConfig, _table(d, "schedule"), "[schedule]")
    opt_d = dict(_table(d, "optimizer"))
    if opt_d.get("clip_norm", 1.0) is not None and opt_d.get("clip_norm", 1.0) <= 0:
        opt_d["clip_norm"] = None
    optimizer = _build(OptimizerConfig, opt_d, "[optimizer]")
    if optimizer.lr <= 0:
        raise ConfigError("[optimizer]: lr must be positive")
    ev = _build(EvalConfig, _table(d, "eval"), "[eval]")
    if ev.samples_per_context < 1 or ev.rollouts < 0 or ev.nfe < 1 or ev.radius <= 0:
        raise ConfigError("[eval]: samples_per_context >= 1, rollouts >= 0, nfe >= 1, radius > 0 required")

    temps = d.get("temperatures", [0.02, 0.05, 0.2])
    if not isinstance(temps, list) or not temps or any(not isinstance(t, (int, float)) or t <= 0 for t in temps):
        raise ConfigError("temperatures must be a non-empty list of positive numbers")
    try:
        cfg = TrainConfig(
            method=d["method"],
            generator=generator,
            schedule=schedule,
            optimizer=optimizer,
            temperatures=[float(t) for t in temps],
            batch=d.get("batch", 32),
            seed=d["seed"],
            checkpoint_every=d.get("checkpoint_every", 0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.checkpoint_every < 0:
        raise ConfigError("checkpoint_every must be >= 0")
    return RunConfig(task=asdict(task), train=cfg, eval=ev)


def load_config(path, method=None, seed=None, epochs=None) -> RunConfig:
    import tomli

    try:
        raw = tomli.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    if method is not None:
        raw["method"] = method
    if seed is not None:
        raw["seed"] = seed
    if epochs is not None:
        raw.setdefault("schedule", {})
        if not isinstance(raw["schedule"], dict):
            raise ConfigError("[schedule] must be a table")
        raw["schedule"]["epochs"] = epochs
    return parse_config(raw)


def task_object(task: dict):
    return task_from_dict(task)


# ---------------------------------------------------------------------------
# file helpers


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, rc: RunConfig, timings: dict, files: list[str], extra=None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": rc.train.seed,
        "config_hash": rc.hash(),
        "train_config_hash": rc.train.hash(),
        "timings": timings,
        "files": {f: _digest(out / f) for f in files if (out / f).exists()},
    }
    if extra:
        manifest.update(extra)
    atomic_write(out / "manifest.json", _json_bytes(manifest))


def load_demos(path) -> DemoSet:
    try:
        return DemoSet.load(path)
    except FileNotFoundError as exc:
        raise DataError(f"demo file not found: {path}") from exc
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read demo file {path}: {exc}") from exc


def _demos_bytes(data: DemoSet) -> bytes:
    return (json.dumps(data.to_json(), separators=(",", ":")) + "\n").encode()


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    rc = load_config(args.config, seed=args.seed)
    out = Path(args.out)
    t0 = time.perf_counter()
    data = generate_demos(task_object(rc.task), rc.train.seed)
    atomic_write(out / "demos.json", _demos_bytes(data))
    atomic_write(out / "config.toml", rc.to_toml().encode())
    ms = (time.perf_counter() - t0) * 1000.0
    write_manifest(out, "gen-data", rc, {"wall_ms": ms}, ["demos.json", "config.toml"])
    n = sum(c.demos.shape[0] for c in data.contexts)
    print(f"wrote {n} demos in {len(data.contexts)} contexts to {out / 'demos.json'}")
    return EXIT_OK


def _metric_line(rec: dict) -> str:
    return json.dumps({k: v for k, v in rec.items() if k != "wall_ms"}, sort_keys=True) + "\n"


def cmd_train(args) -> int:
    rc = load_config(args.config, method=args.method, seed=args.seed, epochs=args.epochs)
    cfg = rc.train
    out = Path(args.out)
    data = load_demos(args.data) if args.data else generate_demos(task_object(rc.task), cfg.seed)
    from .training import check_dataset

    try:
        check_dataset(data, cfg.generator)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    state = None
    kept: list[str] = []
    if args.resume:
        try:
            state = load_checkpoint(args.resume)
        except (OSError, CheckpointError) as exc:
            raise DataError(f"cannot resume from {args.resume}: {exc}") from exc
        if state.config_hash != cfg.hash():
            raise ConfigError("checkpoint was written for a different configuration")
        old = out / "metrics.jsonl"
        if old.exists():
            kept = [ln + "\n" for ln in old.read_text().splitlines() if json.loads(ln)["epoch"] < state.epoch]

    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.toml", rc.to_toml().encode())
    atomic_write(out / "demos.json", _demos_bytes(data))
    ck_dir = out / "checkpoints"
    partial = out / "metrics.jsonl.partial"
    epoch_ms: list[float] = []
    t0 = time.perf_counter()
    with open(partial, "w") as fh:
        fh.writelines(kept)

        def on_epoch(rec):
            fh.write(_metric_line(rec))
            epoch_ms.append(rec["wall_ms"])
            if args.verbose and (rec["epoch"] + 1) % max(1, cfg.schedule.epochs // 20) == 0:
                print(f"epoch {rec['epoch'] + 1:6d}  loss {rec['l_total']:.5f}  w_drift {rec['w_drift']:.3f}", flush=True)

        def on_checkpoint(st):
            save_checkpoint(st, ck_dir / f"epoch_{st.epoch:06d}.ad3d")

        _, final, _ = train(data, cfg, state=state, on_epoch=on_epoch, on_checkpoint=on_checkpoint)
    save_checkpoint(final, ck_dir / "final.ad3d")
    partial.replace(out / "metrics.jsonl")
    ms = (time.perf_counter() - t0) * 1000.0
    write_manifest(
        out, "train", rc, {"wall_ms": ms, "epoch_wall_ms": epoch_ms},
        ["config.toml", "demos.json", "metrics.jsonl", "checkpoints/final.ad3d"],
        {"resumed_from_epoch": state.epoch if state is not None else None},
    )
    print(f"trained {cfg.method} for {final.epoch} epochs ({final.step} steps); checkpoint {ck_dir / 'final.ad3d'}")
    return EXIT_OK


def _run_dir_of(checkpoint: Path) -> Path:
    return checkpoint.parent.parent if checkpoint.parent.name == "checkpoints" else checkpoint.parent


def evaluate(model, cfg: TrainConfig, data: DemoSet, ev: EvalConfig, seed: int, nfe: int | None, out: Path | None = None):
    """Sample every context, score modes, and for the obstacle task run rollouts."""
    task = task_object(data.task)
    steps = None
    if cfg.method == "fm":
        steps = ev.nfe if nfe is None else nfe
    n = ev.samples_per_context
    rng = np.random.default_rng([seed, 3])
    per_ctx, samples = [], []
    if isinstance(task, BimodalTask):
        centers = task.centers()
        contexts = data.contexts
    else:
        centers = obstacle_mode_centers(data)
        contexts = data.contexts[:1]
    with NFESession(model.generator) as session:
        for ctx in contexts:
            s = model.sample(ctx.states, n, rng) if steps is None else model.sample(ctx.states, n, rng, steps=steps)
            samples.append(s)
    if not all(np.all(np.isfinite(s)) for s in samples):
        raise NumericalError("non-finite samples")
    nfe_per_chunk = session.count / (n * len(contexts))
    for s in samples:
        per_ctx.append(mode_metrics(s, centers, ev.radius).to_dict())
    pooled = mode_metrics(np.concatenate(samples), centers, ev.radius).to_dict()
    report = {
        "method": cfg.method,
        "task": task.kind,
        "seed": seed,
        "nfe_per_chunk": nfe_per_chunk,
        "samples_per_context": n,
        "radius": ev.radius,
        "modes": pooled,
        "per_context": per_ctx,
    }
    figures = []
    if isinstance(task, ObstacleTask) and ev.rollouts > 0:
        pol = ChunkPolicy(model, steps)
        results = [receding_rollout(pol, task, seed=[seed, 7, i]) for i in range(ev.rollouts)]
        report["rollouts"] = {
            "n": len(results),
            "collision_rate": float(np.mean([r.collision for r in results])),
            "success_rate": float(np.mean([r.success for r in results])),
            "mean_chunks": float(np.mean([r.chunks for r in results])),
            "total_nfe": int(sum(r.nfe for r in results)),
            "nfe_per_chunk": sum(r.nfe for r in results) / sum(r.chunks for r in results),
        }
        if out is not None:
            from . import plotting

            shown = results[: min(len(results), 60)]
            figures.append(
                plotting.rollouts([r.path for r in shown], [r.collision for r in shown], task, out / "rollouts.png",
                                  demos=data.contexts[0].demos)
            )
    elif out is not None:
        from . import plotting

        figures.append(
            plotting.sample_histograms(samples, [c.demos for c in contexts], out / "samples.png", centers)
        )
    return report, figures


def _summary_lines(report: dict) -> list[str]:
    rows = [
        ("method", report["method"]),
        ("task", report["task"]),
        ("nfe_per_chunk", report["nfe_per_chunk"]),
        ("capture", report["modes"]["capture"]),
        ("collapse", report["modes"]["collapse"]),
        ("capture_per_mode", " ".join(f"{v:.3f}" for v in report["modes"]["capture_per_mode"])),
    ]
    if "rollouts" in report:
        r = report["rollouts"]
        rows += [("collision_rate", r["collision_rate"]), ("success_rate", r["success_rate"]), ("total_nfe", r["total_nfe"])]
    return [f"{k}\t{v:.4f}" if isinstance(v, float) else f"{k}\t{v}" for k, v in rows]


def cmd_eval(args) -> int:
    ck = Path(args.checkpoint)
    try:
        state = load_checkpoint(ck)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {ck}") from exc
    except CheckpointError as exc:
        raise DataError(f"bad checkpoint {ck}: {exc}") from exc
    run = _run_dir_of(ck)
    if args.config:
        rc = load_config(args.config)
        ev = rc.eval
    elif (run / "config.toml").exists():
        rc = load_config(run / "config.toml")
        ev = rc.eval
    else:
        rc, ev = None, EvalConfig()
    model, cfg = model_from_state(state)
    if args.nfe is not None:
        if args.nfe < 1:
            raise ConfigError("--nfe must be >= 1")
        if cfg.method != "fm":
            print("note: --nfe applies only to fm; drifting policies use 1 evaluation per chunk", file=sys.stderr)
    data = load_demos(args.data if args.data else run / "demos.json")
    seed = args.seed if args.seed is not None else (rc.train.seed if rc else state.seed)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    report, figures = evaluate(model, cfg, data, ev, seed, args.nfe, out)
    report["checkpoint_epoch"] = state.epoch
    atomic_write(out / "report.json", _json_bytes(report))
    print("# report")
    print("\n".join(_summary_lines(report)))
    print("# end report")
    for f in figures:
        print(f"figure\t{f}")
    if args.out and rc is not None:
        write_manifest(out, "eval", rc, {"wall_ms": (time.perf_counter() - t0) * 1000.0}, ["report.json"])
    return EXIT_OK


def _metric_names(row: dict) -> list[str]:
    names = [k for k in ("l_total", "l_mse", "l_drift", "w_drift", "v_norm_mean") if k in row]
    names += [f"lambda[{k}]" for k in row.get("lambda", {})]
    return names


def _metric_value(row: dict, name: str) -> float:
    if name.startswith("lambda["):
        return row["lambda"][name[7:-1]]
    return row[name]


def tidy_rows(runs: dict[str, list[dict]]):
    for label, rows in runs.items():
        for row in rows:
            for name in _metric_names(row):
                yield label, row["epoch"], name, _metric_value(row, name)


def read_metrics(run: Path) -> list[dict]:
    path = run / "metrics.jsonl"
    if not path.exists():
        raise DataError(f"no metrics.jsonl in {run}")
    try:
        return [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt metrics in {run}: {exc}") from exc


def cmd_export_plot(args) -> int:
    runs: dict[str, list[dict]] = {}
    for r in args.runs:
        p = Path(r)
        label = p.resolve().name
        if label in runs:
            label = str(p)
        if label in runs:
            raise ConfigError(f"run {r} given twice")
        runs[label] = read_metrics(p)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "epoch", "metric", "value"])
    n = 0
    for label, epoch, name, value in tidy_rows(runs):
        w.writerow([label, epoch, name, repr(float(value))])
        n += 1
    out = Path(args.out)
    atomic_write(out, buf.getvalue().encode())
    from . import plotting

    fig = plotting.training_curves(runs, out.with_suffix(".png"))
    print(f"wrote {n} rows for {len(runs)} run(s) to {out}")
    print(f"figure\t{fig}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import check_pipeline, run_op_suite

    results = run_op_suite(trials=args.trials, seed=args.seed, rtol=1e-5)
    for kind in ("mlp", "unet1d"):
        results.append(check_pipeline(kind, trials=3, seed=args.seed, rtol=1e-4, max_entries=120))
    for r in results:
        print(r.line())
    bad = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed")
    return EXIT_OK if not bad else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="driftgen", description="One-step drifting policies on toy benchmarks.")
    p.add_argument("--version", action="version", version=f"driftgen {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate demonstrations")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="demos.json from gen-data (default: generate from the config)")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="sample a checkpoint and write report.json")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--config")
    e.add_argument("--out")
    e.add_argument("--seed", type=int)
    e.add_argument("--nfe", type=int, help="Euler steps per chunk (fm only)")
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("export-plot", help="tidy CSV (run, epoch, metric, value) plus a PNG")
    x.add_argument("runs", nargs="+")
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_plot)

    c = sub.add_parser("grad-check", help="finite-difference checks of every op and the full pipeline")
    c.add_argument("--trials", type=int, default=50)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_grad_check)
    return p


def _thread_limit():
    raw = os.environ.get("AD3D_THREADS")
    if raw is None or raw == "":
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"AD3D_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
