import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from flowgrpo.tasks import TaskSpec, clean_log_density, gauss1d_posterior, sample_pair, sample_pairs

MIX = TaskSpec(kind="mixture", components=((0.3, (-1.0, 0.0), 0.5), (0.7, (1.5, 1.0), 0.8)), data_dim=2)


def test_gauss1d_mean_monte_carlo():
    spec = TaskSpec(kind="gauss1d", mu1=2.0, sigma1=0.5, data_dim=1)
    x1 = sample_pairs(spec, 100_000, 0).x1[:, 0]
    se = 0.5 / np.sqrt(x1.size)
    assert abs(x1.mean() - 2.0) < 3 * se


def test_condition_is_additive_gaussian():
    spec = TaskSpec(kind="circle2d", sigma_c=0.3)
    pair = sample_pairs(spec, 50_000, 1)
    noise = (pair.c - pair.x1).ravel()
    assert stats.kstest(noise / 0.3, "norm").pvalue > 0.01
    np.testing.assert_allclose(np.linalg.norm(pair.x1, axis=1), 1.0, rtol=1e-12)


def test_sampling_reproducible():
    spec = TaskSpec()
    a, b = sample_pair(spec, 5), sample_pair(spec, 5)
    assert np.array_equal(a.x1, b.x1) and np.array_equal(a.c, b.c)
    assert len(a) == 1 and len(sample_pairs(spec, 4, 0)) == 4


def test_mixture_density_matches_loop():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 2))
    got = clean_log_density(MIX, x)
    for i, row in enumerate(x):
        terms = [np.log(w) + stats.norm.logpdf(row, m, s).sum() for w, m, s in MIX.components]
        assert got[i] == pytest.approx(logsumexp(terms), rel=1e-12)


def test_mixture_sample_mean_is_weighted_component_mean():
    x = sample_pairs(MIX, 40_000, 3).x1
    want = 0.3 * np.array([-1.0, 0.0]) + 0.7 * np.array([1.5, 1.0])
    se = x.std(axis=0) / np.sqrt(len(x))
    assert np.all(np.abs(x.mean(axis=0) - want) < 3 * se)


def test_gauss1d_density_is_normal():
    spec = TaskSpec(kind="gauss1d", mu1=2.0, sigma1=0.5, data_dim=1)
    x = np.linspace(-1, 4, 7)[:, None]
    np.testing.assert_allclose(clean_log_density(spec, x), stats.norm.logpdf(x[:, 0], 2.0, 0.5), rtol=1e-12)


def test_circle_density_peaks_on_circle():
    spec = TaskSpec(kind="circle2d", radius=1.5)
    theta = np.linspace(0, 2 * np.pi, 9)
    on = 1.5 * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    np.testing.assert_allclose(clean_log_density(spec, on), 0.0, atol=1e-12)
    assert np.all(clean_log_density(spec, on * 0.8) < 0)
    assert clean_log_density(spec, np.array([3.0, 0.0])) == pytest.approx(-2.25)


def test_gauss1d_posterior_matches_numerical_bayes():
    spec = TaskSpec(kind="gauss1d", mu1=2.0, sigma1=0.5, sigma_c=0.3, data_dim=1)
    c = 1.4
    grid = np.linspace(-3, 7, 200_001)
    logw = stats.norm.logpdf(grid, 2.0, 0.5) + stats.norm.logpdf(c, grid, 0.3)
    w = np.exp(logw - logw.max())
    mean = np.sum(w * grid) / w.sum()
    std = np.sqrt(np.sum(w * (grid - mean) ** 2) / w.sum())
    m, s = gauss1d_posterior(spec, np.array([c]))
    assert float(np.ravel(m)[0]) == pytest.approx(mean, abs=1e-8)
    assert s == pytest.approx(std, abs=1e-8)


def test_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec(kind="torus")
    with pytest.raises(ValueError):
        TaskSpec(kind="circle2d", data_dim=3)
    with pytest.raises(ValueError):
        TaskSpec(kind="mixture")
    with pytest.raises(ValueError):
        TaskSpec(sigma_c=-1.0)
