import math

import numpy as np
import pytest

from driftgen import tensor as T
from driftgen.drift import aggregate_multi_temp
from driftgen.gradcheck import check_pipeline
from driftgen.nets import GeneratorConfig
from driftgen.tensor import ShapeError, Tensor
from driftgen.toybench import BimodalTask, gen_bimodal_demos
from driftgen.training import (
    MAGIC,
    AdamW,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    NumericalError,
    OptimizerConfig,
    ScheduleConfig,
    TrainConfig,
    build_model,
    checkpoint_bytes,
    config_from_meta,
    drift_loss,
    load_checkpoint,
    method_weights,
    mse_loss,
    parse_checkpoint,
    save_checkpoint,
    schedule_weights,
    total_loss,
    train,
)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


# --- schedule --------------------------------------------------------------


def test_schedule_crossover_is_half():
    cfg = ScheduleConfig(epochs=2000)
    assert schedule_weights(1400, cfg) == (0.5, 0.5)


def test_schedule_endpoints():
    cfg = ScheduleConfig(epochs=2000)
    w0, _ = schedule_weights(0, cfg)
    assert abs(w0 - sigmoid(-14)) < 1e-12
    assert abs(w0 - 8.315e-7) < 1e-10
    wE, _ = schedule_weights(2000, cfg)
    assert abs(wE - sigmoid(6)) < 1e-12
    assert abs(wE - 0.99753) < 1e-5


def test_schedule_sums_to_one_and_increases():
    cfg = ScheduleConfig(epochs=137)
    prev = -1.0
    for e in range(138):
        wd, wm = schedule_weights(e, cfg)
        assert wd + wm == 1.0
        assert wd > prev
        prev = wd


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(epochs=0)
    with pytest.raises(ValueError):
        ScheduleConfig(crossover=1.0)
    with pytest.raises(ValueError):
        ScheduleConfig(sharpness=0.0)


def test_naive_variant_weights():
    cfg = TrainConfig(method="naive-drift")
    assert method_weights(0, cfg) == (1.0, 0.0)
    assert cfg.effective_temperatures == (0.05,)
    assert TrainConfig().effective_temperatures == (0.02, 0.05, 0.2)


# --- losses ----------------------------------------------------------------


def test_drift_loss_zero_field():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 2)), requires_grad=True)
    loss = drift_loss(x, np.zeros((3, 2)))
    assert loss.item() == 0.0
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, 0.0)


def test_drift_loss_closed_form():
    x = Tensor([[0.5, -1.0]], requires_grad=True)
    loss = drift_loss(x, [[3.0, 4.0]])
    assert loss.item() == 25.0
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, [[-6.0, -8.0]])


def test_drift_loss_value_and_gradient_random():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    V = aggregate_multi_temp(x.data, rng.standard_normal((7, 4))).V
    loss = drift_loss(x, V)
    assert abs(loss.item() - np.mean(np.sum(V**2, axis=1))) < 1e-12
    T.backward(loss)
    assert np.abs(x.grad - (-2.0 * V / 5)).max() <= 1e-10


def test_drift_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        drift_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


def test_mse_loss_examples():
    assert mse_loss(Tensor([[1.0]]), [[3.0]]).item() == 4.0
    y = np.random.default_rng(2).standard_normal((3, 4))
    assert mse_loss(Tensor(y.copy()), y).item() == 0.0
    x = Tensor(np.random.default_rng(3).standard_normal((3, 4)), requires_grad=True)
    T.backward(mse_loss(x, y))
    np.testing.assert_allclose(x.grad, 2 * (x.data - y) / 12, atol=1e-15)
    with pytest.raises(ShapeError):
        mse_loss(x, y[:2])


def test_total_loss_weighting():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((4, 3)))
    y, V = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    ld, lm = drift_loss(x, V).item(), mse_loss(x, y).item()
    cfg = ScheduleConfig(epochs=1000)
    assert abs(total_loss(x, y, V, 700, cfg).item() - (0.5 * ld + 0.5 * lm)) < 1e-12
    big = ScheduleConfig(epochs=100000)
    assert abs(total_loss(x, y, V, 0, big).item() - lm) / lm < 1e-5


def test_stop_gradient_loss_needs_frozen_target():
    # differencing the live loss sees only the MSE part: the drift term's value is ||V||^2 regardless of x
    x = Tensor(np.array([[0.3, -0.2]]), requires_grad=True)
    V = np.array([[1.0, 2.0]])
    T.backward(drift_loss(x, V))
    h = 1e-5
    live = (drift_loss(Tensor(x.data + [[h, 0]]), V).item() - drift_loss(Tensor(x.data - [[h, 0]]), V).item()) / (2 * h)
    assert live == 0.0 and x.grad[0, 0] == -2.0


@pytest.mark.parametrize("kind", ["mlp", "unet1d"])
def test_full_pipeline_gradient(kind):
    res = check_pipeline(kind, trials=1, seed=3, max_entries=None if kind == "mlp" else 80)
    assert res.passed and res.max_rel_err < 1e-4


# --- optimizer -------------------------------------------------------------


def test_adamw_first_step_is_sign_times_lr():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = AdamW({"p": p}, OptimizerConfig(lr=0.1, weight_decay=0.0))
    p.grad = np.array([0.5, -0.25, 0.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-6)


def test_adamw_decoupled_weight_decay():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW({"p": p}, OptimizerConfig(lr=0.1, weight_decay=0.5))
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_clips_and_rejects_nan():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = AdamW({"p": p}, OptimizerConfig(clip_norm=1.0))
    p.grad = np.array([30.0, 40.0])
    assert opt.step() == 50.0
    np.testing.assert_allclose(opt.m["p"], 0.1 * np.array([0.6, 0.8]))
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericalError):
        opt.step()


# --- training loop ---------------------------------------------------------


def tiny(method="ada3drift", epochs=6, **kw):
    task = BimodalTask(n_contexts=2, demos_per_mode=3)
    data = gen_bimodal_demos(task, 0)
    gen = GeneratorConfig(kind="mlp", action_dim=1, horizon=4, hidden=[8, 8], obs_feature_dim=4, encoder_hidden=5)
    cfg = TrainConfig(method=method, generator=gen, schedule=ScheduleConfig(epochs=epochs), batch=5, optimizer=OptimizerConfig(lr=1e-3), **kw)
    return data, cfg


def strip(metrics):
    return [{k: v for k, v in m.items() if k != "wall_ms"} for m in metrics]


@pytest.mark.parametrize("method", ["ada3drift", "naive-drift", "fm"])
def test_training_is_deterministic(method):
    data, cfg = tiny(method)
    _, s1, m1 = train(data, cfg)
    _, s2, m2 = train(data, cfg)
    assert strip(m1) == strip(m2)
    assert checkpoint_bytes(s1) == checkpoint_bytes(s2)


def test_metrics_stream_contents():
    data, cfg = tiny(epochs=10)
    _, state, metrics = train(data, cfg)
    assert [m["epoch"] for m in metrics] == list(range(10))
    assert state.epoch == 10 and state.step == 20
    assert metrics[7]["w_drift"] == 0.5
    for m in metrics:
        assert all(math.isfinite(m[k]) for k in ("l_total", "l_mse", "l_drift", "v_norm_mean"))
        assert set(m["lambda"]) == {"0.02", "0.05", "0.2"}


def test_early_phase_is_mse_dominated():
    data, cfg = tiny(epochs=40)
    _, _, metrics = train(data, cfg)
    for m in metrics[:12]:
        w = m["w_drift"]
        assert w < 3.36e-4
        assert m["l_total"] == pytest.approx(w * m["l_drift"] + (1 - w) * m["l_mse"], rel=1e-12)
        assert abs(m["l_total"] - m["l_mse"]) <= w * abs(m["l_drift"] - m["l_mse"]) * (1 + 1e-9)


def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    data, cfg = tiny()
    _, state, _ = train(data, cfg)
    path = tmp_path / "ck.ad3d"
    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    assert checkpoint_bytes(loaded) == path.read_bytes()
    for k in state.params:
        assert loaded.params[k].tobytes() == state.params[k].tobytes()
    assert (loaded.epoch, loaded.seed, loaded.step) == (state.epoch, state.seed, state.step)
    assert config_from_meta(loaded.meta).hash() == cfg.hash()


def test_checkpoint_errors_are_distinct():
    data, cfg = tiny(epochs=1)
    _, state, _ = train(data, cfg)
    blob = checkpoint_bytes(state)
    assert blob[:4] == MAGIC
    with pytest.raises(CheckpointFormatError):
        parse_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointVersionError):
        parse_checkpoint(blob[:4] + (99).to_bytes(4, "little") + blob[8:])
    for cut in (6, 40, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CheckpointTruncatedError):
            parse_checkpoint(blob[:cut])
    with pytest.raises(CheckpointFormatError):
        parse_checkpoint(blob + b"\0")


def test_resume_matches_uninterrupted(tmp_path):
    data, cfg = tiny(epochs=8)
    _, full, m_full = train(data, cfg)
    _, half, m_a = train(data, cfg, stop_at=5)
    assert half.epoch == 5
    save_checkpoint(half, tmp_path / "half.ad3d")
    resumed = load_checkpoint(tmp_path / "half.ad3d")
    _, final, m_b = train(data, cfg, state=resumed)
    assert checkpoint_bytes(final) == checkpoint_bytes(full)
    assert strip(m_a + m_b) == strip(m_full)
    assert m_b[0]["w_drift"] == schedule_weights(5, cfg.schedule)[0]


def test_periodic_checkpoints():
    data, cfg = tiny(epochs=7, checkpoint_every=3)
    seen = []
    train(data, cfg, on_checkpoint=lambda s: seen.append(s.epoch))
    assert seen == [3, 6]


def test_resume_rejects_other_config():
    data, cfg = tiny(epochs=4)
    _, state, _ = train(data, cfg, stop_at=2)
    _, other = tiny(epochs=5)
    with pytest.raises(ValueError):
        train(data, other, state=state)


def test_dataset_mismatch_rejected():
    data, cfg = tiny()
    cfg.generator = GeneratorConfig(kind="mlp", action_dim=2, horizon=4)
    with pytest.raises(ValueError):
        train(data, cfg)
