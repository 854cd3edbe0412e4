import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffpolicy.denoiser import (
    ConditionalGmmOracle,
    GaussianOracle,
    GmmOracle,
    GuidanceError,
    GuidedDenoiser,
    NetConfig,
    PreconditionedDenoiser,
    Preconditioning,
    build_denoiser,
    build_mlp_denoiser,
    build_transformer_denoiser,
    cfg_denoise,
    oracle_denoise,
    score_from_denoiser,
)
from diffpolicy.rng import stream
from diffpolicy.tensor import Tensor
from diffpolicy.tensor.layers import ConfigError


# -- preconditioning ---------------------------------------------------------

def test_preconditioning_at_sigma_data():
    p = Preconditioning(0.5)
    assert p.c_skip(0.5) == pytest.approx(0.5, abs=1e-15)
    assert p.c_in(0.5) == pytest.approx(1.4142135623730951, rel=1e-12)
    assert p.c_out(0.5) == pytest.approx(0.3535533905932738, rel=1e-12)
    assert p.c_noise(1.0) == 0.0


def test_preconditioning_boundary():
    p = Preconditioning(0.5)
    s = 1e-6 * 0.5
    assert abs(p.c_skip(s) - 1.0) < 1e-6
    assert p.c_out(s) < 1e-6 * 0.5


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-4, 100.0), st.floats(0.05, 5.0))
def test_preconditioning_identity(sigma, sd):
    # unit-variance target: c_skip^2 sd^2 + c_out^2 ... reduces to c_skip + c_out^2 / sd^2 = 1
    p = Preconditioning(sd)
    assert p.c_skip(sigma) + p.c_out(sigma) ** 2 / sd ** 2 == pytest.approx(1.0, rel=1e-12)
    assert p.loss_weight(sigma) == pytest.approx(1.0 / p.c_out(sigma) ** 2, rel=1e-12)


class ZeroNet:
    def __call__(self, a_in, state, goal, c_noise, goal_mask=None, rng=None):
        return Tensor(np.zeros_like(a_in))


def test_zero_inner_net_gives_skip_path():
    d = PreconditionedDenoiser(ZeroNet(), 0.5)
    a = np.linspace(-1, 1, 6).reshape(3, 1, 2)
    np.testing.assert_allclose(d.denoise(a, None, np.zeros((3, 1, 2)), 0.7), Preconditioning(0.5).c_skip(0.7) * a)
    with pytest.raises(ValueError):
        d.forward(a, None, None, 0.0)


def test_unconditional_needs_flag():
    d = PreconditionedDenoiser(ZeroNet(), 0.5)
    with pytest.raises(GuidanceError):
        d.denoise(np.zeros((2, 1, 1)), None, None, 0.5)


# -- oracles ------------------------------------------------------------------

def test_gaussian_oracle_example():
    o = GaussianOracle(0.0, 1.0)
    assert o.denoise(np.array([[2.0]]), sigma=1.0)[0, 0] == pytest.approx(1.0)
    np.testing.assert_array_equal(o.denoise(np.array([[2.0]]), sigma=0.0), [[2.0]])
    assert o.denoise(np.array([[2.0]]), sigma=1e6)[0, 0] == pytest.approx(0.0, abs=1e-6)
    assert oracle_denoise(o, np.array([[2.0]]), 1.0)[0, 0] == pytest.approx(1.0)


def test_gaussian_score_example():
    o = GaussianOracle(0.0, 1.0)
    a = np.array([[2.0]])
    assert score_from_denoiser(o.denoise(a, sigma=1.0), a, 1.0)[0, 0] == pytest.approx(-1.0)
    assert score_from_denoiser(a, a, 0.3)[0, 0] == 0.0
    with pytest.raises(ValueError):
        score_from_denoiser(a, a, 0.0)


def test_gmm_score_matches_numerical_gradient():
    g = GmmOracle([0.6, 0.4], np.array([[-1.0, 0.5], [1.0, -0.2]]), np.array([0.3, 0.5]))
    pts = stream(0).normal(size=(40, 2))
    h = 1e-5
    for sigma in (0.1, 0.7, 2.0):
        num = np.zeros_like(pts)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            num[:, j] = (g.log_density(pts + e, sigma) - g.log_density(pts - e, sigma)) / (2 * h)
        ana = g.score(pts, sigma)
        assert np.max(np.abs(ana - num)) / np.max(np.abs(ana)) < 1e-5
        via_d = score_from_denoiser(g.denoise(pts, sigma=sigma), pts, sigma)
        np.testing.assert_allclose(via_d, ana, atol=1e-10)


def test_gmm_weights_validated():
    with pytest.raises(ValueError):
        GmmOracle([0.5, 0.6], np.zeros((2, 1)), np.ones(2))


def test_conditional_oracle_marginal():
    mix = (GaussianOracle(-1.0, 0.2), GaussianOracle(1.0, 0.2))
    c = ConditionalGmmOracle(np.array([[0.0], [1.0]]), mix, np.array([0.5, 0.5]))
    a = np.array([[0.1], [0.1]])
    np.testing.assert_allclose(c.denoise(a, goal=np.array([[0.0], [1.0]]), sigma=0.5),
                               [mix[0].denoise(a[:1], sigma=0.5)[0], mix[1].denoise(a[:1], sigma=0.5)[0]])
    np.testing.assert_allclose(c.denoise(a, sigma=0.5), c.marginal.denoise(a, sigma=0.5))


# -- classifier-free guidance -------------------------------------------------------

class Affine:
    supports_unconditional = True

    def denoise(self, a, state, goal, sigma):
        return np.full_like(a, 2.0) if goal is not None else np.full_like(a, 1.0)


def test_cfg_example_and_limits():
    a = np.zeros((1, 1))
    assert cfg_denoise(Affine(), a, None, np.ones((1, 1)), 0.5, 1.25)[0, 0] == pytest.approx(2.25)
    assert cfg_denoise(Affine(), a, None, np.ones((1, 1)), 0.5, 1.0)[0, 0] == 2.0
    assert cfg_denoise(Affine(), a, None, np.ones((1, 1)), 0.5, 0.0)[0, 0] == 1.0


def test_cfg_is_affine_in_lambda():
    c = ConditionalGmmOracle(np.array([[0.0], [1.0]]), (GaussianOracle(-1.0, 0.3), GaussianOracle(1.0, 0.3)),
                             np.array([0.5, 0.5]))
    a = stream(1).normal(size=(10, 1))
    g = np.repeat([[1.0]], 10, axis=0)
    vals = [cfg_denoise(c, a, None, g, 0.4, lam) for lam in (0.0, 0.5, 1.0, 1.5)]
    np.testing.assert_allclose(vals[1], 0.5 * (vals[0] + vals[2]), atol=1e-14)
    np.testing.assert_allclose(vals[3], 1.5 * vals[2] - 0.5 * vals[0], atol=1e-14)


def test_guidance_requires_unconditional_branch():
    d = PreconditionedDenoiser(ZeroNet(), 0.5)
    with pytest.raises(GuidanceError):
        GuidedDenoiser(d, 0.5)
    with pytest.raises(GuidanceError):
        cfg_denoise(d, np.zeros((1, 1, 1)), None, np.zeros((1, 1, 1)), 0.5, 2.0)
    GuidedDenoiser(d, 1.0)


# -- networks -------------------------------------------------------------------------

def _inputs(cfg, B=3, seed=0):
    r = stream(seed)
    return (r.normal(size=(B, cfg.window, cfg.action_dim)), r.normal(size=(B, cfg.window, cfg.state_dim)),
            r.normal(size=(B, cfg.goal_window, cfg.goal_dim)))


@pytest.mark.parametrize("kind", ["mlp", "transformer"])
@pytest.mark.parametrize("sigma", [0.005, 1.0])
def test_untrained_output_finite_and_shaped(kind, sigma):
    cfg = NetConfig(kind=kind, window=4, goal_window=2, width=32, heads=4)
    m = build_denoiser(cfg, stream(0, "init"), supports_unconditional=True)
    a, s, g = _inputs(cfg)
    for goal in (g, None):
        out = m.denoise(a, s, goal, sigma)
        assert out.shape == a.shape and np.all(np.isfinite(out))


def test_minimal_transformer_window():
    cfg = NetConfig(kind="transformer", window=1, goal_window=1, width=16, heads=2)
    m = build_transformer_denoiser(cfg, stream(0))
    a, s, g = _inputs(cfg)
    assert m.denoise(a, s, g, 0.5).shape == (3, 1, 2)


def test_transformer_causality_and_goal_sensitivity():
    cfg = NetConfig(kind="transformer", window=4, width=32, heads=4)
    m = build_transformer_denoiser(cfg, stream(0))
    a, s, g = _inputs(cfg)
    base = m.denoise(a, s, g, 0.3)
    a2, s2 = a.copy(), s.copy()
    a2[:, 3] += 1.0
    s2[:, 3] += 1.0
    later = m.denoise(a2, s2, g, 0.3)
    # positions before the perturbed step are untouched
    np.testing.assert_allclose(later[:, :3], base[:, :3], atol=1e-12)
    assert not np.allclose(later[:, 3], base[:, 3])
    assert not np.allclose(m.denoise(a, s, g + 1.0, 0.3), base)


def test_mlp_goal_sensitivity():
    cfg = NetConfig(kind="mlp", window=2, width=32)
    m = build_mlp_denoiser(cfg, stream(0), supports_unconditional=True)
    a, s, g = _inputs(cfg)
    assert not np.allclose(m.denoise(a, s, g, 0.3), m.denoise(a, s, g + 1.0, 0.3))
    assert not np.allclose(m.denoise(a, s, g, 0.3), m.denoise(a, s, None, 0.3))


def test_network_config_validation():
    with pytest.raises(ConfigError):
        NetConfig(window=0)
    with pytest.raises(ConfigError):
        NetConfig(kind="rnn")
    with pytest.raises(ConfigError):
        build_transformer_denoiser(NetConfig(width=30, heads=4), stream(0))


def test_goal_mask_uses_null_token_per_sample():
    cfg = NetConfig(kind="transformer", window=2, width=16, heads=2)
    m = build_transformer_denoiser(cfg, stream(0), supports_unconditional=True)
    a, s, g = _inputs(cfg, B=4)
    mask = np.array([True, False, True, False])
    mixed = m.forward(a, s, g, 0.4, mask).data
    np.testing.assert_allclose(mixed[~mask], m.denoise(a, s, g, 0.4)[~mask], atol=1e-12)
    np.testing.assert_allclose(mixed[mask], m.denoise(a, s, None, 0.4)[mask], atol=1e-12)
