import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from lapdiff.denoiser import (
    DatasetOracle,
    Expert,
    ExpertRouter,
    GmmOracle,
    IdentityDenoiser,
    LinearDenoiser,
    MeanDenoiser,
    default_buckets,
    eval_loss,
    loss_samples,
    mmse_denoise_empirical,
    mmse_denoise_gmm,
    score_from_denoiser,
    train_linear,
)
from lapdiff.errors import ConfigError, DimensionError, RoutingError
from lapdiff.process import DiffusionState, band_alphas, forward_mean
from lapdiff.schedule import AttenuationProfile, TrainSigmaDist
from lapdiff.verify import exact_log_density, fd_gradient

TWO = np.array([-1.0, 1.0]).reshape(2, 1, 1, 1)


def px(*v):
    return np.array(v, dtype=np.float64).reshape(-1, 1, 1, 1)


# --- empirical oracle ---------------------------------------------------------


def test_single_point_dataset():
    star = np.random.default_rng(0).standard_normal((1, 2, 4, 4))
    o = DatasetOracle(star)
    x = np.random.default_rng(1).standard_normal((5, 2, 4, 4)) * 30
    for sigma in (1e-3, 1.0, 80.0):
        np.testing.assert_array_equal(o(x, sigma), np.broadcast_to(star[0], x.shape))


def test_two_point_symmetry_and_tanh():
    o = DatasetOracle(TWO)
    assert o(px(0.0)[0], 1.0).item() == 0.0
    assert o(px(1.0)[0], 1.0).item() == pytest.approx(0.7615941559557649, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0.05, 10))
def test_two_point_closed_form(x, sigma):
    o = DatasetOracle(TWO)
    assert o(px(x)[0], sigma).item() == pytest.approx(math.tanh(x / sigma**2), abs=1e-12)


def test_softmax_stability():
    o = DatasetOracle(px(-1e3, 0.0, 1e3))
    out = o(px(400.0, -0.1, 1e3), 1e-6)
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out.ravel(), [0.0, 0.0, 1e3])


def test_batch_size_invariance():
    rng = np.random.default_rng(2)
    o = DatasetOracle(rng.standard_normal((7, 1, 4, 4)))
    x = rng.standard_normal((33, 1, 4, 4))
    full = o(x, 0.7)
    for i in (0, 17, 32):
        np.testing.assert_array_equal(o(x[i : i + 1], 0.7)[0], full[i])


def test_oracle_with_attenuation_matches_bruteforce():
    # independent oracle: softmax over atoms with attenuated means, computed pixel-wise
    rng = np.random.default_rng(3)
    prof = AttenuationProfile((1.0,))
    pts = rng.standard_normal((5, 1, 4, 4))
    o = DatasetOracle(pts, prof)
    x = rng.standard_normal((1, 4, 4))
    sigma = 0.6
    mus = np.stack([forward_mean(p, sigma, prof) for p in pts])
    logits = np.array([-np.sum((x - m) ** 2) / (2 * sigma**2) for m in mus])
    w = np.exp(logits - logsumexp(logits))
    np.testing.assert_allclose(o(x, sigma), np.tensordot(w, pts, axes=1), atol=1e-12)


def test_coarse_level_oracle():
    rng = np.random.default_rng(4)
    prof = AttenuationProfile((1.0, 4.0))
    pts = rng.standard_normal((3, 1, 8, 8))
    o = DatasetOracle(pts, prof)
    assert o.shape(3) == (1, 2, 2) and o.atoms(3).shape == (3, 1, 2, 2)
    out = o(rng.standard_normal((4, 1, 2, 2)), 0.01, level=3)
    assert out.shape == (4, 1, 2, 2)
    with pytest.raises(DimensionError):
        o(np.zeros((1, 2, 2)), 0.1, level=4)
    with pytest.raises(ValueError):
        o(np.zeros((1, 8, 8)), 0.0)


def test_mmse_wrappers():
    o = DatasetOracle(TWO)
    s = DiffusionState(px(1.0)[0], 1.0)
    assert mmse_denoise_empirical(o, s).item() == pytest.approx(math.tanh(1.0))
    g = GmmOracle([0.5, 0.5], TWO, [0.0, 0.0])
    assert mmse_denoise_gmm(g, s).item() == pytest.approx(math.tanh(1.0))


# --- GMM --------------------------------------------------------------------------


def test_gmm_delta_component():
    g = GmmOracle([1.0], px(0.4), [0.0])
    np.testing.assert_allclose(g(px(3.0, -2.0), 0.5).ravel(), [0.4, 0.4])


def test_gmm_wiener_single_component():
    g = GmmOracle([1.0], px(0.0), [1.0])
    assert g(px(2.0)[0], 1.0).item() == pytest.approx(1.0)


def test_gmm_matches_bruteforce():
    rng = np.random.default_rng(5)
    w = np.array([0.2, 0.5, 0.3])
    m = rng.standard_normal((3, 1, 2, 2))
    v = np.array([0.1, 0.5, 2.0])
    g = GmmOracle(w, m, v)
    x, sigma = rng.standard_normal((1, 2, 2)), 0.8
    d = x.size
    tot = v + sigma**2
    logr = np.log(w) - 0.5 * d * np.log(tot) - np.array([np.sum((x - m[k]) ** 2) for k in range(3)]) / (2 * tot)
    r = np.exp(logr - logsumexp(logr))
    post = [(v[k] * x + sigma**2 * m[k]) / tot[k] for k in range(3)]
    np.testing.assert_allclose(g(x, sigma), sum(r[k] * post[k] for k in range(3)), atol=1e-13)


def test_gmm_sample_moments():
    g = GmmOracle([1.0], np.full((1, 1, 2, 2), 0.5), [0.25])
    s = g.sample(100_000, np.random.default_rng(6))
    assert abs(s.mean() - 0.5) < 0.005 and abs(s.var() - 0.25) < 0.005


def test_gmm_validation():
    with pytest.raises(ConfigError):
        GmmOracle([0.5, 0.6], TWO, [0.0, 0.0])
    with pytest.raises(ConfigError):
        GmmOracle([1.0], px(0.0), [-1.0])


# --- score ------------------------------------------------------------------------


def test_score_fixed_point_and_single_atom():
    x = np.random.default_rng(7).standard_normal((1, 4, 4))
    s = DiffusionState(x, 0.5)
    np.testing.assert_array_equal(score_from_denoiser(x, s), np.zeros_like(x))
    star = np.ones((1, 4, 4))
    np.testing.assert_allclose(score_from_denoiser(star, s), (star - x) / 0.25)


def test_score_band_reduction():
    rng = np.random.default_rng(8)
    x, d = rng.standard_normal((2, 1, 8, 8))
    s = DiffusionState(x, 1.3)
    np.testing.assert_array_equal(score_from_denoiser(d, s, np.ones(3)), score_from_denoiser(d, s))


@pytest.mark.parametrize("laplacian", [False, True])
def test_score_matches_log_density_gradient(laplacian):
    rng = np.random.default_rng(9)
    prof = AttenuationProfile((1.0,)) if laplacian else None
    pts = rng.standard_normal((6, 1, 2, 2))
    o = DatasetOracle(pts, prof)
    sigma = 0.7
    x = rng.standard_normal((1, 2, 2))
    state = DiffusionState(x, sigma)
    alphas = band_alphas(prof, 1, sigma) if laplacian else None
    score = score_from_denoiser(o(x, sigma), state, alphas)
    fd = fd_gradient(lambda z: exact_log_density(z, pts, sigma, prof), x, 1e-3 * sigma)
    np.testing.assert_allclose(score, fd, rtol=1e-6, atol=1e-8)


def test_score_rejects_zero_sigma():
    with pytest.raises(ValueError):
        score_from_denoiser(np.zeros((1, 1, 1)), DiffusionState(np.zeros((1, 1, 1)), 0.0))


# --- loss ---------------------------------------------------------------------------


def test_loss_of_perfect_and_zero_denoisers():
    rng = np.random.default_rng(10)
    star = px(0.3)
    assert eval_loss(DatasetOracle(star), star, 1.0, 1000, rng) == 0.0
    zero = lambda x, s, level=1: np.zeros_like(x)  # noqa: E731
    assert eval_loss(zero, TWO, 1.0, 1000, rng) == 1.0


def test_loss_deterministic_and_validated():
    a = eval_loss(IdentityDenoiser(), TWO, 0.5, 100, np.random.default_rng(1))
    b = eval_loss(IdentityDenoiser(), TWO, 0.5, 100, np.random.default_rng(1))
    assert a == b
    with pytest.raises(ValueError):
        eval_loss(IdentityDenoiser(), TWO, 0.5, 0, np.random.default_rng(1))


@pytest.mark.parametrize("seed", range(5))
def test_mmse_sandwich_on_random_datasets(seed):
    rng = np.random.default_rng(100 + seed)
    data = rng.standard_normal((10, 1, 1, 2))
    lin = train_linear(data, 20_000, rng, 8)
    rivals = {"mmse": DatasetOracle(data), "linear": lin, "mean": MeanDenoiser(data), "id": IdentityDenoiser()}
    for j, sigma in enumerate((0.1, 0.5, 1.0, 5.0)):
        losses = {k: loss_samples(d, data, sigma, 4000, np.random.default_rng((seed, j))) for k, d in rivals.items()}

        def upper(a, b):
            diff = losses[a] - losses[b]
            return diff.mean() - 2 * diff.std(ddof=1) / math.sqrt(len(diff))

        for other in ("linear", "mean", "id"):
            assert upper("mmse", other) <= 0
        assert upper("linear", "mean") <= 0


# --- linear denoiser ------------------------------------------------------------------


def test_one_point_dataset_linear():
    rng = np.random.default_rng(11)
    star = np.array([0.3, -0.2, 0.9, 0.1]).reshape(1, 1, 2, 2)
    m = train_linear(star, 20_000, rng, 16)
    for sigma in (0.1, 1.0, 5.0):
        # identity scores sigma^2 * dim; sigma varies inside a bucket so the fit is not exact
        assert eval_loss(m, star, sigma, 2000, rng) < 0.02 * sigma**2 * 4
        narrow = train_linear(star, 2000, rng, [0.999 * sigma, 1.001 * sigma])
        assert eval_loss(narrow, star, sigma, 2000, rng) < 1e-8 * sigma**2


def test_wiener_recovery_default_sigma_data():
    rng = np.random.default_rng(12)
    data = 0.5 * rng.standard_normal((100_000, 1, 2, 2))
    m = train_linear(data, 100_000, rng, 1)
    for sigma in (0.25, 0.5, 1.0):
        M, c = m.effective_map(sigma)
        target = 0.25 / (0.25 + sigma**2)
        np.testing.assert_allclose(np.diag(M), target, rtol=0.02)
        np.testing.assert_allclose(M - np.diag(np.diag(M)), 0.0, atol=0.02 * target)


@pytest.mark.parametrize("sigma", [0.25, 0.5, 1.0])
def test_wiener_recovery_narrow_bucket(sigma):
    # v = 1 differs from sigma_data^2, so only a narrow bucket can be exact
    rng = np.random.default_rng(13)
    data = rng.standard_normal((100_000, 1, 2, 2))
    m = train_linear(data, 100_000, rng, [0.999 * sigma, 1.001 * sigma])
    M, _ = m.effective_map(sigma)
    np.testing.assert_allclose(np.diag(M), 1 / (1 + sigma**2), rtol=0.02)


def test_default_buckets_equal_probability():
    d = TrainSigmaDist(-1.2, 1.2)
    e = default_buckets(4, d)
    assert e[0] == 0 and e[-1] == np.inf
    s = np.exp(d.p_mean + d.p_std * np.random.default_rng(0).standard_normal(200_000))
    counts = np.histogram(s, e)[0] / len(s)
    np.testing.assert_allclose(counts, 0.25, atol=0.005)


def test_bucket_lookup():
    m = LinearDenoiser([0.0, 1.0, 2.0, np.inf], np.zeros((3, 1, 1)), np.zeros((3, 1)), (1, 1, 1))
    assert [m.bucket(s) for s in (0.5, 1.0, 1.5, 2.0, 50.0)] == [0, 1, 1, 2, 2]


def test_ridge_fallback_on_degenerate_data():
    # constant pixels make the normal equations singular
    data = np.zeros((20, 1, 1, 2))
    data[:, 0, 0, 0] = np.random.default_rng(14).standard_normal(20)
    data[:, 0, 0, 1] = data[:, 0, 0, 0]
    m = train_linear(data, 2, np.random.default_rng(15), 1)
    assert m.ridge.all()
    assert np.all(np.isfinite(m.weights))


def test_linear_serialization_roundtrip(tmp_path):
    rng = np.random.default_rng(16)
    m = train_linear(rng.standard_normal((8, 1, 2, 2)), 4000, rng, 3)
    m.ridge[1] = True
    m.save(tmp_path / "lin.bin")
    back = LinearDenoiser.load(tmp_path / "lin.bin")
    np.testing.assert_array_equal(back.edges, m.edges)
    np.testing.assert_array_equal(back.weights, m.weights)
    np.testing.assert_array_equal(back.offsets, m.offsets)
    np.testing.assert_array_equal(back.ridge, m.ridge)
    assert back.shape == m.shape and back.sigma_data == m.sigma_data
    x = rng.standard_normal((3, 1, 2, 2))
    np.testing.assert_array_equal(back(x, 0.4), m(x, 0.4))
    with pytest.raises(ValueError):
        LinearDenoiser.from_bytes(b"garbage!" + bytes(64))
    m.to_csv(tmp_path / "lin.csv")
    assert (tmp_path / "lin.csv").read_text().count("\n") > 3


# --- routing ------------------------------------------------------------------------------


def _router():
    prof = AttenuationProfile((1.0, 4.0))
    return ExpertRouter.staged({1: "fine", 2: "mid", 3: "coarse"}, prof), prof


def test_staged_router_ranges():
    r, _ = _router()
    assert r.route(3, 1e4) == "coarse"
    assert r.route(1, 0.3) == "fine"
    assert r.route(1, 0.0) == "fine"
    # level 2 covers band 2 up to t = 4, i.e. sigma_2 = 2
    assert r.route(2, 2.0) == "mid"
    with pytest.raises(RoutingError):
        r.route(2, 2.0001)
    with pytest.raises(RoutingError):
        r.route(1, 1.5)


def test_boundary_goes_to_lower_interval():
    r = ExpertRouter([Expert("low", 1, 0.0, 1.0), Expert("high", 1, 1.0, 10.0)])
    assert r.route(1, 1.0) == "low"
    assert r.route(1, 1.0 + 1e-12) == "high"
    assert r.route(1, 0.0) == "low"


def test_router_validation():
    with pytest.raises(ConfigError):
        ExpertRouter([Expert("a", 1, 0.0, 2.0), Expert("b", 1, 1.0, 3.0)])
    with pytest.raises(ConfigError):
        ExpertRouter([])
    with pytest.raises(RoutingError):
        ExpertRouter([Expert("a", 1, 0.0, 1.0), Expert("b", 1, 1.0, 2.0)]).covers_span(1, 2.0, 0.5)


def test_router_dispatches_calls():
    r = ExpertRouter([Expert(lambda x, s, level=1: x * 0 + s, 1)])
    np.testing.assert_array_equal(r(np.zeros((1, 1, 1)), 0.25), [[[0.25]]])
