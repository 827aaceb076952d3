"""Central-difference gradient checks for the tensor ops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_err: float
    max_abs_err: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}  {self.name:<22} trials={self.trials:<4d} "
            f"max_rel={self.max_rel_err:.2e} max_abs={self.max_abs_err:.2e}"
        )


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def compare(analytic: np.ndarray, numeric: np.ndarray, rtol: float, atol: float = 1e-8):
    """Return (max_rel, max_abs, ok).

    Entries with ``|analytic| > atol`` are judged by relative error; the rest
    by absolute error. An entry whose absolute error is already below
    ``atol`` passes either way.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    abs_err = np.abs(a - n)
    big = np.abs(a) > atol
    rel = np.zeros_like(abs_err)
    rel[big] = abs_err[big] / np.abs(a[big])
    ok = np.where(big, (rel < rtol) | (abs_err < atol), abs_err < atol)
    max_rel = float(rel.max()) if rel.size else 0.0
    max_abs = float(abs_err.max()) if abs_err.size else 0.0
    return max_rel, max_abs, bool(ok.all())


def check_function(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    rng: np.random.Generator,
    h: float = 1e-5,
    rtol: float = 1e-5,
) -> tuple[float, float, bool]:
    """Check every input of ``fn`` through a random linear projection of its output."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(probe.shape)

    def scalar(*ts):
        return T.sum(T.mul(fn(*ts), Tensor(weights)))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    T.backward(scalar(*leaves))
    worst_rel, worst_abs, all_ok = 0.0, 0.0, True
    for leaf, arr in zip(leaves, arrays):

        def f():
            with T.no_grad():
                return scalar(*[Tensor(a) for a in arrays]).item()

        num = numeric_grad(f, arr, h)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        r, a, ok = compare(ana, num, rtol)
        worst_rel, worst_abs, all_ok = max(worst_rel, r), max(worst_abs, a), all_ok and ok
    return worst_rel, worst_abs, all_ok


def check_params(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    rtol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    numeric_fn: Callable[[], Tensor] | None = None,
) -> tuple[float, float, bool, int]:
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values.
    With ``max_entries`` a random subset of parameter entries is checked.
    ``numeric_fn`` replaces ``loss_fn`` on the perturbed side; a loss with a
    stop-gradient target needs it, since the target must stay frozen at the
    unperturbed value while differencing.
    """
    numeric_fn = loss_fn if numeric_fn is None else numeric_fn
    for p in params:
        p.grad = None
    T.backward(loss_fn())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.grad = None

    index = [(pi, j) for pi, p in enumerate(params) for j in range(p.size)]
    if max_entries is not None and len(index) > max_entries:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(index), size=max_entries, replace=False)
        index = [index[k] for k in np.sort(pick)]

    ana, num = [], []
    for pi, j in index:
        flat = params[pi].data.reshape(-1)
        orig = flat[j]
        with T.no_grad():
            flat[j] = orig + h
            fp = numeric_fn().item()
            flat[j] = orig - h
            fm = numeric_fn().item()
        flat[j] = orig
        ana.append(analytic[pi].reshape(-1)[j])
        num.append((fp - fm) / (2.0 * h))
    max_rel, max_abs, ok = compare(np.array(ana), np.array(num), rtol)
    return max_rel, max_abs, ok, len(index)


# ---------------------------------------------------------------------------
# per-op randomized suite


def _rand_shape(rng, ndim, lo=1, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi, size=ndim))


def _case_elementwise(kind):
    def make(rng):
        shape = _rand_shape(rng, int(rng.integers(1, 4)))
        a = rng.standard_normal(shape)
        b = rng.standard_normal(shape)
        if kind == "div":
            b = np.sign(b) * (np.abs(b) + 0.5)
        if rng.random() < 0.25:
            b = np.asarray(b.reshape(-1)[0])
        fn = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": T.div}[kind]
        return fn, [a, b]

    return make


def _case_unary(kind):
    def make(rng):
        shape = _rand_shape(rng, int(rng.integers(1, 4)))
        x = rng.standard_normal(shape) * 2.0
        if kind in ("log", "sqrt", "pow"):
            x = np.abs(x) + 0.3
        if kind == "pow":
            p = float(rng.uniform(-2.0, 3.0))
            return (lambda a: T.power(a, p)), [x]
        fn = {
            "exp": T.exp,
            "log": T.log,
            "sqrt": T.sqrt,
            "tanh": T.tanh,
            "mish": T.mish,
            "softplus": T.softplus,
            "neg": T.neg,
        }[kind]
        return fn, [x]

    return make


def _case_matmul(rng):
    m, k, n = _rand_shape(rng, 3, 1, 6)
    return T.matmul, [rng.standard_normal((m, k)), rng.standard_normal((k, n))]


def _case_conv1d(rng):
    stride = int(rng.choice([1, 2]))
    ksize = int(rng.choice([1, 5]))
    b, cin, cout = _rand_shape(rng, 3, 1, 4)
    t = int(rng.integers(1, 10))
    x = rng.standard_normal((b, cin, t))
    w = rng.standard_normal((cout, cin, ksize))
    bias = rng.standard_normal(cout)
    return (lambda x_, w_, b_: T.conv1d(x_, w_, b_, stride=stride)), [x, w, bias]


def _case_group_norm(rng):
    groups = int(rng.choice([1, 2, 4]))
    c = groups * int(rng.integers(1, 3))
    t = int(rng.integers(2, 6))
    batch = int(rng.integers(1, 3))
    x = rng.standard_normal((batch, c, t)) * rng.uniform(0.5, 3.0) + rng.uniform(-2, 2)
    return (lambda a: T.group_norm(a, groups)), [x]


def _case_softmax(rng):
    m, n = _rand_shape(rng, 2, 1, 6)
    return T.softmax_rows, [rng.standard_normal((m, n)) * 2.0]


def _case_concat(rng):
    b, t = _rand_shape(rng, 2)
    c1, c2 = _rand_shape(rng, 2)
    return (lambda a, c: T.concat([a, c], axis=1)), [
        rng.standard_normal((b, c1, t)),
        rng.standard_normal((b, c2, t)),
    ]


def _case_upsample(rng):
    shape = _rand_shape(rng, 3)
    return T.upsample_nearest, [rng.standard_normal(shape)]


def _case_reshape(rng):
    a, b = _rand_shape(rng, 2)
    return (lambda x: T.reshape(x, (b, a))), [rng.standard_normal((a, b))]


def _case_permute(rng):
    shape = _rand_shape(rng, 3)
    axes = tuple(int(v) for v in rng.permutation(3))
    return (lambda x: T.permute(x, axes)), [rng.standard_normal(shape)]


def _case_expand(rng):
    a, b, c = _rand_shape(rng, 3, 2, 5)
    return (lambda x: T.expand(x, (a, b, c))), [rng.standard_normal((a, 1, c))]


def _case_sum(rng):
    shape = _rand_shape(rng, 3)
    axis = rng.choice([None, 0, 1, 2])
    axis = None if axis is None else int(axis)
    return (lambda x: T.sum(x, axis=axis)), [rng.standard_normal(shape)]


def _case_mean(rng):
    shape = _rand_shape(rng, 3)
    axis = int(rng.integers(0, 3))
    return (lambda x: T.mean(x, axis=axis, keepdims=True)), [rng.standard_normal(shape)]


OP_CASES: dict[str, Callable] = {
    "add": _case_elementwise("add"),
    "sub": _case_elementwise("sub"),
    "mul": _case_elementwise("mul"),
    "div": _case_elementwise("div"),
    "neg": _case_unary("neg"),
    "pow": _case_unary("pow"),
    "exp": _case_unary("exp"),
    "log": _case_unary("log"),
    "sqrt": _case_unary("sqrt"),
    "tanh": _case_unary("tanh"),
    "softplus": _case_unary("softplus"),
    "mish": _case_unary("mish"),
    "matmul": _case_matmul,
    "conv1d": _case_conv1d,
    "group_norm": _case_group_norm,
    "softmax_rows": _case_softmax,
    "concat": _case_concat,
    "upsample_nearest": _case_upsample,
    "reshape": _case_reshape,
    "permute": _case_permute,
    "expand": _case_expand,
    "sum": _case_sum,
    "mean": _case_mean,
}


def run_op_suite(trials: int = 50, seed: int = 0, rtol: float = 1e-5) -> list[CheckResult]:
    results = []
    for name, make in OP_CASES.items():
        rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
        worst_rel = worst_abs = 0.0
        ok = True
        for _ in range(trials):
            fn, arrays = make(rng)
            r, a, passed = check_function(fn, arrays, rng, rtol=rtol)
            worst_rel, worst_abs, ok = max(worst_rel, r), max(worst_abs, a), ok and passed
        results.append(CheckResult(name, trials, worst_rel, worst_abs, ok))
    return results


def check_pipeline(kind: str = "mlp", trials: int = 3, seed: int = 0, rtol: float = 1e-4, max_entries: int | None = 200) -> CheckResult:
    """Encoder + generator + composite loss, checked against all (or sampled) parameters.

    The drift field is computed once at the unperturbed parameters. Backprop
    runs through the real stop-gradient loss; the numeric side differences the
    same loss with its target frozen, which is what the stop-gradient means.
    """
    from .drift import aggregate_multi_temp
    from .nets import DriftPolicy, GeneratorConfig
    from .training import ScheduleConfig, drift_loss, mse_loss, schedule_weights

    gen = GeneratorConfig(
        kind=kind, action_dim=2, horizon=8, hidden=[12, 12], widths=[4, 8, 8], groups=2,
        obs_feature_dim=4, encoder_hidden=6,
    )
    sched = ScheduleConfig(epochs=10)
    worst_rel = worst_abs = 0.0
    ok = True
    for trial in range(trials):
        rng = np.random.default_rng([seed, 2, trial])
        model = DriftPolicy(gen, rng)
        n, D = 4, gen.flat_dim
        states = rng.standard_normal((gen.obs_steps, gen.state_dim))
        z = rng.standard_normal((n, gen.horizon, gen.action_dim))
        Y = rng.standard_normal((5, D))
        pairs = Y[rng.integers(5, size=n)]
        epoch = float(rng.uniform(0, sched.epochs))
        w_drift, _ = schedule_weights(epoch, sched)

        def predict():
            return T.reshape(model.generate(z, model.conditioning(states, n)), (n, D))

        with T.no_grad():
            x0 = predict().data
        V = aggregate_multi_temp(x0, Y, D).V
        frozen = Tensor(x0 + V)

        def loss():
            x = predict()
            return w_drift * drift_loss(x, V) + (1.0 - w_drift) * mse_loss(x, pairs)

        def surrogate():
            x = predict()
            d = x - frozen
            return w_drift * (T.sum(d * d) * (1.0 / n)) + (1.0 - w_drift) * mse_loss(x, pairs)

        r, a, passed, _ = check_params(
            loss, model.parameters(), rtol=rtol, max_entries=max_entries, rng=rng, numeric_fn=surrogate
        )
        worst_rel, worst_abs, ok = max(worst_rel, r), max(worst_abs, a), ok and passed
    return CheckResult(f"pipeline[{kind}]", trials, worst_rel, worst_abs, ok)
