import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from robflat.geometry import (
    BallSpec,
    DegenerateDirectionError,
    in_ball,
    normalize,
    perturb,
    project_to_ball,
    sample_in_ball,
    scale_layers,
)
from robflat.nn import ShapeError, forward, predict

from conftest import batch, flat_params, small_net


def random_dir(params, seed):
    rng = np.random.default_rng(seed)
    d = params.zeros_like()
    for k in params.geometric_keys():
        d[k] = rng.standard_normal(params[k].shape)
    return d


def test_normalize_identity_and_scale_removal():
    _, params = small_net(batchnorm="hidden")
    for c in (1.0, 2.0):
        out = normalize(params.scale(c), params)
        for k in params.geometric_keys():
            np.testing.assert_allclose(out[k], params[k], rtol=1e-14)
        for k in params.keys():
            if k not in params.geometric_keys():
                assert np.all(out[k] == 0)


def test_normalize_hits_layer_norms_3_and_4():
    ref = flat_params([(0, "weight", [[3.0, 0.0]]), (0, "bias", [0.0, 4.0])])
    d = random_dir(ref, 5)
    out = normalize(d, ref)
    assert np.linalg.norm(out[(0, "weight")]) == pytest.approx(3.0, rel=1e-12)
    assert np.linalg.norm(out[(0, "bias")]) == pytest.approx(4.0, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(1e-3, 1e3), gran=st.sampled_from(["per_layer", "per_filter"]))
def test_normalize_properties(seed, c, gran):
    _, params = small_net(seed=seed % 5, hidden=(4, 3))
    d = random_dir(params, seed)
    n1 = normalize(d, params, gran)
    n2 = normalize(n1, params, gran)
    n3 = normalize(d.scale(c), params, gran)
    for k in params.geometric_keys():
        np.testing.assert_allclose(n2[k], n1[k], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(n3[k], n1[k], rtol=1e-12, atol=1e-15)
        if gran == "per_layer":
            assert np.linalg.norm(n1[k]) == pytest.approx(np.linalg.norm(params[k]), rel=1e-12)


def test_normalize_degenerate_direction_raises():
    ref = flat_params([(0, "weight", [[1.0, 2.0]]), (0, "bias", [1.0])])
    d = ref.zeros_like()
    d[(0, "weight")] = np.array([[1.0, 0.0]])
    with pytest.raises(DegenerateDirectionError):
        normalize(d, ref)
    out = normalize(d, ref, strict=False)
    assert np.all(out[(0, "bias")] == 0)


def test_normalize_zero_reference_layer_warns_and_zeroes(caplog):
    ref = flat_params([(0, "weight", [[1.0, 2.0]]), (0, "bias", [0.0])])
    d = random_dir(ref, 0)
    with caplog.at_level("WARNING"):
        out = normalize(d, ref)
    assert np.all(out[(0, "bias")] == 0)
    assert "zero-norm" in caplog.text


def test_per_filter_rows_match_reference_rows():
    _, params = small_net(hidden=(4,))
    out = normalize(random_dir(params, 1), params, "per_filter")
    w = params[(0, "weight")]
    np.testing.assert_allclose(np.linalg.norm(out[(0, "weight")], axis=1), np.linalg.norm(w, axis=1), rtol=1e-12)


def test_sample_xi_zero_is_zero_direction():
    _, params = small_net(batchnorm="hidden")
    nu = sample_in_ball(params, BallSpec(0.0), np.random.default_rng(0))
    assert all(np.all(v == 0) for v in nu.entries.values())


def test_sample_radial_law_ks():
    ref = flat_params([(0, "weight", [[2.0]])])
    rng = np.random.default_rng(42)
    r = np.array([abs(sample_in_ball(ref, BallSpec(0.5), rng)[(0, "weight")][0, 0]) for _ in range(10_000)])
    ks = stats.kstest(r, "uniform", args=(0.0, 1.0)).statistic
    assert ks < 0.02


def test_sample_membership_1000_seeds():
    _, params = small_net(hidden=(4, 3), batchnorm="hidden")
    ball = BallSpec(0.3)
    for seed in range(1000):
        nu = sample_in_ball(params, ball, np.random.default_rng(seed))
        assert in_ball(nu, params, ball)
        assert all(np.all(nu[k] == 0) for k in nu.keys() if k not in params.geometric_keys())


def test_project_radial_scaling_and_inside_unchanged():
    ref = flat_params([(0, "weight", [[1.0, 0.0]])])
    nu = flat_params([(0, "weight", [[6.0, 8.0]])])
    out = project_to_ball(nu, ref, BallSpec(1.0))
    np.testing.assert_allclose(out[(0, "weight")], [[0.6, 0.8]], rtol=1e-15)
    inside = flat_params([(0, "weight", [[0.3, 0.4]])])
    np.testing.assert_array_equal(project_to_ball(inside, ref, BallSpec(1.0))[(0, "weight")], [[0.3, 0.4]])


def test_project_matches_grid_search():
    ref = flat_params([(0, "weight", [[1.0, 1.0]])])
    ball = BallSpec(0.5)  # radius 0.5 * sqrt(2)
    target = np.array([1.2, -0.4])
    out = project_to_ball(flat_params([(0, "weight", [target])]), ref, ball)[(0, "weight")][0]
    radius = 0.5 * np.sqrt(2)
    g = np.linspace(-radius, radius, 2001)
    X, Y = np.meshgrid(g, g)
    feasible = X**2 + Y**2 <= radius**2
    dist = np.where(feasible, (X - target[0]) ** 2 + (Y - target[1]) ** 2, np.inf)
    i = np.unravel_index(np.argmin(dist), dist.shape)
    assert np.hypot(X[i] - out[0], Y[i] - out[1]) < 2 * (g[1] - g[0])
    assert np.sqrt(dist[i]) >= np.linalg.norm(out - target) - 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), xi=st.floats(0.0, 2.0), mag=st.floats(0.01, 100.0))
def test_project_idempotent_and_contraction(seed, xi, mag):
    _, params = small_net(seed=seed % 3)
    ball = BallSpec(xi)
    d = random_dir(params, seed).scale(mag)
    p1 = project_to_ball(d, params, ball)
    p2 = project_to_ball(p1, params, ball)
    assert in_ball(p1, params, ball)
    for k in params.geometric_keys():
        np.testing.assert_allclose(p2[k], p1[k], rtol=1e-12, atol=1e-300)
        assert np.linalg.norm(p1[k]) <= np.linalg.norm(d[k]) * (1 + 1e-12)


def test_perturb_identities():
    _, params = small_net(batchnorm="hidden")
    d = random_dir(params, 3)
    same = perturb(params, d, 0.0)
    back = perturb(perturb(params, d, 1.0), d, -1.0)
    mid = perturb(params, d, 0.5)
    full = perturb(params, d, 1.0)
    for k in params.keys():
        np.testing.assert_array_equal(same[k], params[k])
        np.testing.assert_allclose(back[k], params[k], atol=1e-12)
        np.testing.assert_allclose(mid[k], 0.5 * (params[k] + full[k]), atol=1e-12)
    for k in params.keys():
        if k not in params.geometric_keys():
            np.testing.assert_array_equal(full[k], params[k])
    with pytest.raises(ShapeError):
        perturb(params, flat_params([(0, "weight", [[1.0]])]), 1.0)


def test_scale_layers_identity_roundtrip_and_predictions():
    spec, params = small_net(batchnorm="all", hidden=(5, 4))
    x, _ = batch(0, n=20)
    one = scale_layers(spec, params, 1.0)
    back = scale_layers(spec, scale_layers(spec, params, 2.0), 0.5)
    for k in params.keys():
        np.testing.assert_array_equal(one[k], params[k])
        np.testing.assert_allclose(back[k], params[k], rtol=1e-12)
    base_pred = predict(spec, params, x)
    for c in (0.5, 2.0):
        scaled = scale_layers(spec, params, c)
        np.testing.assert_array_equal(predict(spec, scaled, x), base_pred)
        for mode in ("train", "eval"):
            np.testing.assert_allclose(forward(spec, scaled, x, mode=mode), forward(spec, params, x, mode=mode), atol=1e-12)
        for k in params.geometric_keys():
            assert np.linalg.norm(scaled[k]) == pytest.approx(c * np.linalg.norm(params[k]), rel=1e-12)


def test_scale_layers_rejects_unfollowed_layer():
    spec, params = small_net(batchnorm="hidden")
    last = max(k[0] for k in params.geometric_keys())
    with pytest.raises(ShapeError):
        scale_layers(spec, params, 2.0, layer_ids=[last])
    spec2, params2 = small_net(batchnorm="none")
    with pytest.raises(ShapeError):
        scale_layers(spec2, params2, 2.0)
    with pytest.raises(ValueError):
        scale_layers(spec, params, 0.0)


def test_ballspec_validation():
    with pytest.raises(ValueError):
        BallSpec(-0.1)
    with pytest.raises(ValueError):
        BallSpec(0.1, "per_unit")
