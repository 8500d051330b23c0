import numpy as np
import pytest

from scorebreak.oracle import (ClassConditionalOracle, GaussianMixtureSpec, PixelwiseOracle,
                               analytic_conditional_score, analytic_marginal_score,
                               condition_channels, condition_to_labels, is_sentinel,
                               normalize_mask, unconditional_like)
from scorebreak.schedule import build_schedule

SCHED = build_schedule()


def _logpdf_direct(x, mean, var):
    d = x.size
    return -0.5 * np.sum((x - mean) ** 2) / var - 0.5 * d * np.log(2 * np.pi * var)


def _central_grad(f, x, h=1e-4):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _random_spec(rng, k, shape):
    w = rng.random(k) + 0.2
    return GaussianMixtureSpec(rng.normal(size=(k,) + shape), rng.uniform(0.2, 1.5, size=k), w / w.sum())


def test_conditional_score_zero_at_mean():
    rng = np.random.default_rng(0)
    spec = _random_spec(rng, 2, (2, 2, 1))
    t = 37
    x = np.sqrt(SCHED.alpha_bar(t)) * spec.means[1]
    assert np.array_equal(analytic_conditional_score(spec, x, 1, t, SCHED), np.zeros_like(x))


def test_unit_variance_collapse():
    spec = GaussianMixtureSpec(np.array([[0.4, -0.2]]), 1.0, [1.0])
    x = np.array([0.1, 0.9])
    ab = SCHED.alpha_bar(250)
    assert np.allclose(analytic_conditional_score(spec, x, 0, 250, SCHED),
                       np.sqrt(ab) * spec.means[0] - x, atol=1e-15)


def test_unknown_class():
    spec = GaussianMixtureSpec(np.zeros((2, 3)), 0.5, [0.5, 0.5])
    with pytest.raises(ValueError):
        analytic_conditional_score(spec, np.zeros(3), 2, 1, SCHED)


@pytest.mark.parametrize("seed", range(5))
def test_conditional_score_finite_difference(seed):
    rng = np.random.default_rng(seed)
    spec = _random_spec(rng, 2, (2, 2))
    t = int(rng.integers(1, 1000))
    ab = SCHED.alpha_bar(t)
    x = rng.normal(size=(2, 2))
    var = ab * spec.sigma2[0] + 1 - ab
    fd = _central_grad(lambda v: _logpdf_direct(v, np.sqrt(ab) * spec.means[0], var), x)
    assert np.max(np.abs(fd - analytic_conditional_score(spec, x, 0, t, SCHED))) <= 1e-5


def test_single_component_marginal_is_conditional():
    rng = np.random.default_rng(3)
    spec = _random_spec(rng, 1, (3, 2))
    x = rng.normal(size=(3, 2))
    assert np.allclose(analytic_marginal_score(spec, x, 12, SCHED),
                       analytic_conditional_score(spec, x, 0, 12, SCHED), rtol=0, atol=1e-14)


def test_symmetric_midpoint_score_is_zero():
    spec = GaussianMixtureSpec(np.array([[1.0, -1.0], [-1.0, 1.0]]), 0.3, [0.5, 0.5])
    assert np.allclose(analytic_marginal_score(spec, np.zeros(2), 100, SCHED), 0.0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_marginal_score_finite_difference(seed):
    rng = np.random.default_rng(100 + seed)
    spec = _random_spec(rng, 3, (1, 1, 1))
    t = int(rng.integers(1, 1000))
    ab = SCHED.alpha_bar(t)
    var = ab * spec.sigma2 + 1 - ab

    def log_mix(v):
        dens = sum(spec.weights[k] * np.exp(_logpdf_direct(v, np.sqrt(ab) * spec.means[k], var[k]))
                   for k in range(3))
        return np.log(dens)

    x = rng.normal(size=(1, 1, 1))
    fd = _central_grad(log_mix, x)
    assert np.max(np.abs(fd - analytic_marginal_score(spec, x, t, SCHED))) <= 1e-5


@pytest.mark.parametrize("seed", range(4))
def test_marginal_score_is_conservative(seed):
    rng = np.random.default_rng(200 + seed)
    spec = _random_spec(rng, 3, (4,))
    x = rng.normal(size=4) * 0.7
    t = 5
    h = 1e-4
    jac = np.zeros((4, 4))
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        jac[:, j] = (analytic_marginal_score(spec, x + e, t, SCHED)
                     - analytic_marginal_score(spec, x - e, t, SCHED)) / (2 * h)
    assert np.max(np.abs(jac - jac.T)) <= 1e-4


def test_marginal_score_is_stable_far_away():
    spec = GaussianMixtureSpec(np.array([[0.0], [1.0]]), 1e-3, [0.5, 0.5])
    out = analytic_marginal_score(spec, np.array([500.0]), 1, SCHED)
    assert np.all(np.isfinite(out))


def test_spec_validation_and_roundtrip():
    with pytest.raises(ValueError):
        GaussianMixtureSpec(np.zeros((2, 1)), 1.0, [0.7, 0.7])
    with pytest.raises(ValueError):
        GaussianMixtureSpec(np.zeros((2, 1)), 0.0, [0.5, 0.5])
    spec = GaussianMixtureSpec(np.arange(6.0).reshape(2, 3), [0.1, 0.2], [0.25, 0.75])
    again = GaussianMixtureSpec.from_dict(spec.to_dict())
    assert np.array_equal(again.means, spec.means) and np.array_equal(again.sigma2, spec.sigma2)


def test_condition_maps():
    labels = np.array([[0, 1], [1, 0]])
    c = normalize_mask(labels, 2)
    assert c.shape == (2, 2, 1) and set(np.unique(c)) == {-0.5, 0.5}
    assert np.array_equal(condition_to_labels(c), labels)
    multi = np.array([[0, 2], [1, 2]])
    cm = normalize_mask(multi, 3)
    assert cm.shape == (2, 2, 3)
    assert np.array_equal(condition_to_labels(cm), multi)
    s = unconditional_like(cm)
    assert is_sentinel(s) and not is_sentinel(cm)
    assert condition_channels(2) == 1 and condition_channels(5) == 5
    with pytest.raises(ValueError):
        normalize_mask(np.array([[3]]), 3)
    with pytest.raises(ValueError):
        condition_to_labels(s)


def test_oracles_accept_sentinel_and_keep_shape():
    rng = np.random.default_rng(5)
    pix = PixelwiseOracle(GaussianMixtureSpec(rng.normal(size=(2, 3)), 0.05, [0.6, 0.4]), SCHED)
    x = rng.normal(size=(2, 4, 4, 3))
    c = normalize_mask(rng.integers(0, 2, size=(2, 4, 4)), 2)
    for cond in (c, unconditional_like(c)):
        out = pix.score(x, cond, 10)
        assert out.shape == x.shape and np.all(np.isfinite(out))
    cls_spec = _random_spec(rng, 2, (2, 2, 1))
    oracle = ClassConditionalOracle(cls_spec, SCHED)
    xi = rng.normal(size=(2, 2, 1))
    assert oracle.score(xi, np.full((2, 2, 1), -1.0), 3).shape == xi.shape
    assert np.allclose(oracle.score(xi, np.full((2, 2, 1), 0.5), 3),
                       analytic_conditional_score(cls_spec, xi, 1, 3, SCHED))
    with pytest.raises(ValueError):
        oracle.score(xi, normalize_mask(np.array([[0, 1], [1, 1]]), 2), 3)


def test_pixelwise_matches_per_pixel_mixture():
    rng = np.random.default_rng(9)
    spec = GaussianMixtureSpec(rng.normal(size=(3, 2)), [0.1, 0.3, 0.2], [0.2, 0.5, 0.3])
    pix = PixelwiseOracle(spec, SCHED)
    x = rng.normal(size=(3, 3, 2))
    c = unconditional_like((3, 3, 3))
    got = pix.score(x, c, 20)
    for i, j in np.ndindex(3, 3):
        assert np.allclose(got[i, j], analytic_marginal_score(spec, x[i, j], 20, SCHED), atol=1e-13)
