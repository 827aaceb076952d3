import inspect

import numpy as np
import pytest

from driftgen import tensor as T
from driftgen.flow import FlowPolicy
from driftgen.gradcheck import check_params, compare
from driftgen.nets import (
    DriftPolicy,
    GeneratorConfig,
    MLPGenerator,
    NFESession,
    ObsEncoder,
    UNet1DGenerator,
    build_generator,
    count_nfe,
    film,
    groups_for,
)
from driftgen.tensor import ShapeError, Tensor

KINDS = ["mlp", "unet1d"]


def small_cfg(kind, **kw):
    base = dict(kind=kind, action_dim=2, horizon=8, hidden=[12, 12], widths=[4, 8, 8], groups=2, obs_feature_dim=4, encoder_hidden=6)
    base.update(kw)
    return GeneratorConfig(**base)


def inputs(cfg, b, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((b, cfg.horizon, cfg.action_dim)), Tensor(rng.standard_normal((b, cfg.cond_dim)))


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(kind="transformer")
    with pytest.raises(ValueError):
        GeneratorConfig(kind="unet1d", horizon=10)
    with pytest.raises(ValueError):
        GeneratorConfig(kind="unet1d", widths=[8, 16])
    with pytest.raises(ValueError):
        GeneratorConfig(hidden=[0])


def test_groups_fallback():
    assert groups_for(64) == 8
    assert groups_for(4) == 2
    assert groups_for(12) == 6


@pytest.mark.parametrize("kind", KINDS)
def test_output_shape(kind):
    cfg = GeneratorConfig(kind=kind)
    net = build_generator(cfg, np.random.default_rng(0))
    z, g = inputs(cfg, 3)
    assert net(z, g).shape == (3, 16, 2)


@pytest.mark.parametrize("kind", KINDS)
def test_shape_errors(kind):
    cfg = small_cfg(kind)
    net = build_generator(cfg, np.random.default_rng(0))
    z, g = inputs(cfg, 2)
    with pytest.raises(ShapeError):
        net(z[:, :4], g)
    with pytest.raises(ShapeError):
        net(z, Tensor(np.ones((3, cfg.cond_dim))))


def test_unet_temporal_trace():
    cfg = GeneratorConfig(kind="unet1d")
    net = UNet1DGenerator(cfg, np.random.default_rng(1))
    z, g = inputs(cfg, 2)
    trace = []
    net(z, g, trace=trace)
    assert trace == [16, 8, 4, 4, 8, 16]


@pytest.mark.parametrize("stage", [0, 1])
def test_skip_ablation_changes_output(stage):
    cfg = small_cfg("unet1d")
    net = UNet1DGenerator(cfg, np.random.default_rng(2))
    z, g = inputs(cfg, 2)
    full = net(z, g).data
    cut = net(z, g, ablate_skip=stage).data
    assert np.abs(full - cut).max() > 1e-6


@pytest.mark.parametrize("kind", KINDS)
def test_no_time_input(kind):
    cls = MLPGenerator if kind == "mlp" else UNet1DGenerator
    params = set(inspect.signature(cls.forward).parameters)
    assert not params & {"t", "time", "timestep", "sigma", "noise_level"}


@pytest.mark.parametrize("kind", KINDS)
def test_different_noise_gives_different_output(kind):
    cfg = small_cfg(kind)
    net = build_generator(cfg, np.random.default_rng(3))
    z, g = inputs(cfg, 1)
    z2 = z + 0.5
    assert np.linalg.norm(net(z, g).data - net(z2, g).data) > 0


@pytest.mark.parametrize("kind", KINDS)
def test_every_parameter_gets_gradient(kind):
    cfg = small_cfg(kind)
    pol = DriftPolicy(cfg, np.random.default_rng(4))
    rng = np.random.default_rng(5)
    states = rng.standard_normal((3, cfg.obs_steps, cfg.state_dim))
    z = rng.standard_normal((3, cfg.horizon, cfg.action_dim))
    target = Tensor(rng.standard_normal((3, cfg.horizon, cfg.action_dim)))
    d = pol.generate(z, pol.conditioning(states, 3)) - target
    T.backward(T.sum(d * d))
    dead = [n for n, p in pol.named_parameters() if p.grad is None or not np.any(p.grad != 0)]
    assert dead == []


@pytest.mark.parametrize("kind", KINDS)
def test_jvp_matches_finite_differences(kind):
    cfg = small_cfg(kind)
    net = build_generator(cfg, np.random.default_rng(6))
    rng = np.random.default_rng(7)
    z, g = inputs(cfg, 2, seed=8)
    dz = rng.standard_normal(z.shape)
    u = rng.standard_normal((2, cfg.horizon, cfg.action_dim))
    # J dz projected on u equals the gradient of <u, f(z)> along dz
    zt = Tensor(z, requires_grad=True)
    T.backward(T.sum(net(zt, g) * Tensor(u)))
    analytic = float(np.sum(zt.grad * dz))
    h = 1e-5
    with T.no_grad():
        fd = np.sum((net(z + h * dz, g).data - net(z - h * dz, g).data) * u) / (2 * h)
    rel, _, ok = compare(np.array([analytic]), np.array([fd]), rtol=1e-4)
    assert ok and rel < 1e-4


@pytest.mark.parametrize("kind", KINDS)
def test_parameter_gradients_match_finite_differences(kind):
    cfg = small_cfg(kind)
    pol = DriftPolicy(cfg, np.random.default_rng(9))
    rng = np.random.default_rng(10)
    states = rng.standard_normal((cfg.obs_steps, cfg.state_dim))
    z = rng.standard_normal((2, cfg.horizon, cfg.action_dim))
    y = Tensor(rng.standard_normal((2, cfg.horizon, cfg.action_dim)))

    def loss():
        d = pol.generate(z, pol.conditioning(states, 2)) - y
        return T.sum(d * d)

    rel, _, ok, n = check_params(loss, pol.parameters(), rtol=1e-4, max_entries=150, rng=rng)
    assert ok and rel < 1e-4 and n == 150


# --- observation encoder ---------------------------------------------------


def test_encoder_zero_states_zero_final_weight():
    cfg = GeneratorConfig()
    enc = ObsEncoder(cfg, np.random.default_rng(11))
    enc.l2.weight.data[:] = 0.0
    bias = np.arange(cfg.obs_feature_dim, dtype=float) * 0.1 - 0.3
    enc.l2.bias.data[:] = bias
    g = enc(np.zeros((2, 2))).data
    np.testing.assert_array_equal(g, np.concatenate([bias, bias])[None])


def test_encoder_deterministic_and_concatenated():
    cfg = GeneratorConfig()
    enc = ObsEncoder(cfg, np.random.default_rng(12))
    s = np.random.default_rng(13).standard_normal((2, 2))
    g1, g2 = enc(s).data, enc(s).data
    assert g1.tobytes() == g2.tobytes()
    assert g1.shape == (1, 2 * cfg.obs_feature_dim)
    # each half depends only on its own step
    s2 = s.copy()
    s2[1] += 1.0
    g3 = enc(s2).data
    np.testing.assert_array_equal(g3[0, : cfg.obs_feature_dim], g1[0, : cfg.obs_feature_dim])


def test_encoder_wrong_steps():
    enc = ObsEncoder(GeneratorConfig(), np.random.default_rng(14))
    with pytest.raises(ShapeError):
        enc(np.zeros((3, 2)))


def test_encoder_gradient():
    cfg = GeneratorConfig()
    enc = ObsEncoder(cfg, np.random.default_rng(15))
    s = np.random.default_rng(16).standard_normal((2, 2))

    def loss():
        g = enc(s)
        return T.sum(g * g)

    rel, _, ok, _ = check_params(loss, enc.parameters(), rtol=1e-4)
    assert ok and rel < 1e-4


# --- FiLM ------------------------------------------------------------------


def test_film_identity_and_zero():
    rng = np.random.default_rng(17)
    h = Tensor(rng.standard_normal((2, 3, 5)))
    out = film(h, Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 3))))
    np.testing.assert_array_equal(out.data, h.data)
    beta = rng.standard_normal((2, 3))
    out = film(h, Tensor(np.zeros((2, 3))), Tensor(beta))
    np.testing.assert_array_equal(out.data, np.repeat(beta[:, :, None], 5, axis=2))


def test_film_gamma_gradient_is_activation_row():
    rng = np.random.default_rng(18)
    h = Tensor(T.group_norm(Tensor(rng.standard_normal((4, 6))), 2).data)
    h3 = T.reshape(h, (1, 4, 6))
    g0 = rng.standard_normal((1, 4))
    beta = Tensor(rng.standard_normal((1, 4)))
    for c, t in [(0, 0), (1, 3), (3, 5)]:
        pick = np.zeros((1, 4, 6))
        pick[0, c, t] = 1.0
        gamma = Tensor(g0.copy(), requires_grad=True)
        T.backward(T.sum(film(h3, gamma, beta) * Tensor(pick)))
        assert gamma.grad[0, c] == h.data[c, t]
        eps = 1e-5
        gp, gm = g0.copy(), g0.copy()
        gp[0, c] += eps
        gm[0, c] -= eps
        fd = (film(h3, Tensor(gp), beta).data - film(h3, Tensor(gm), beta).data)[0, c, t] / (2 * eps)
        assert fd == pytest.approx(h.data[c, t], rel=1e-8)


def test_film_head_starts_near_identity():
    cfg = GeneratorConfig()
    net = MLPGenerator(cfg, np.random.default_rng(19))
    g = Tensor(np.random.default_rng(20).standard_normal((4, cfg.cond_dim)))
    gamma, beta = net.films[0](g)
    assert np.abs(gamma.data - 1).max() < 0.5 and np.abs(beta.data).max() < 0.5


# --- NFE accounting --------------------------------------------------------


def test_nfe_single_generate():
    cfg = small_cfg("mlp")
    pol = DriftPolicy(cfg, np.random.default_rng(21))
    with NFESession(pol.generator) as s:
        pol.sample(np.zeros((2, 2)), 1, np.random.default_rng(0))
    assert count_nfe(s) == 1


def test_nfe_euler_counts_steps():
    cfg = small_cfg("mlp")
    pol = FlowPolicy(cfg, np.random.default_rng(22))
    with NFESession(pol.generator) as s:
        pol.sample(np.zeros((2, 2)), 1, np.random.default_rng(0), steps=10)
    assert count_nfe(s) == 10


def test_nfe_additive_over_chunks():
    cfg = small_cfg("mlp")
    pol = DriftPolicy(cfg, np.random.default_rng(23))
    rng = np.random.default_rng(0)
    with NFESession(pol.generator) as s:
        for _ in range(4):
            pol.sample(np.zeros((2, 2)), 1, rng)
    assert count_nfe(s) == 4


def test_session_closed_stops_counting():
    cfg = small_cfg("mlp")
    pol = DriftPolicy(cfg, np.random.default_rng(24))
    with NFESession(pol.generator) as s:
        pass
    pol.sample(np.zeros((2, 2)), 1, np.random.default_rng(0))
    assert count_nfe(s) == 0
