import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2

from dittofl.datagen import (
    CSVFormatError,
    CSVSchema,
    LinRegSpec,
    Partition,
    PointEstimationSpec,
    ThetaPolicy,
    _draw_centers,
    byzantine_flags,
    gen_linear_regression,
    gen_point_estimation,
    load_csv_population,
    orthogonal_design,
    split_counts,
)


def test_tau_zero_gives_identical_centers():
    pop = gen_point_estimation(PointEstimationSpec(K=8, n=5, sigma=1, tau=0, theta=ThetaPolicy("fixed", 2.5)), 0)
    np.testing.assert_array_equal(pop.ground_truth, np.full((8, 1), 2.5))


def test_sigma_zero_samples_equal_centers():
    pop = gen_point_estimation(PointEstimationSpec(K=4, n=6, sigma=0, tau=1.0), 3)
    for dev, w in zip(pop.devices, pop.ground_truth):
        np.testing.assert_array_equal(dev.train.features, np.broadcast_to(w, dev.train.features.shape))


def test_center_moments_monte_carlo():
    spec = PointEstimationSpec(K=50, n=10, sigma=1, tau=0.25)
    draws = np.concatenate([_draw_centers(spec, s)[2][:, 0] for s in range(10_000)])
    se = draws.std() / np.sqrt(draws.size)
    assert abs(draws.mean()) < 3 * se
    assert abs(draws.var() / 0.25**2 - 1) < 0.05


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.sampled_from([(0.72, 0.08, 0.20), (1, 0, 0), (0.5, 0.25, 0.25), (0.1, 0.3, 0.6)]))
def test_split_counts_sum_exactly(n, split):
    counts = split_counts(n, split)
    assert sum(counts) == n and min(counts) >= 0
    for c, f in zip(counts, split):
        assert abs(c - n * f) < 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.data(), st.integers(0, 2**32))
def test_exact_adversary_count(K, data, seed):
    K_a = data.draw(st.integers(0, K - 1))
    assert byzantine_flags(K, K_a, seed).sum() == K_a


def test_splits_disjoint_and_complete():
    pop = gen_point_estimation(PointEstimationSpec(K=3, n=25, sigma=1, tau=1), 1)
    for dev in pop.devices:
        parts = [dev.train.features, dev.validation.features, dev.test.features]
        assert sum(p.shape[0] for p in parts) == 25
        allx = np.concatenate(parts)[:, 0]
        assert np.unique(allx).size == 25


def test_device_data_independent_of_population_size():
    small = gen_point_estimation(PointEstimationSpec(K=3, n=10, sigma=1, tau=1), 9)
    big = gen_point_estimation(PointEstimationSpec(K=7, n=10, sigma=1, tau=1), 9)
    for k in range(3):
        np.testing.assert_array_equal(small.devices[k].train.features, big.devices[k].train.features)


@pytest.mark.parametrize("seed", range(20))
def test_orthogonal_design_gram(seed):
    X = orthogonal_design(12, 4, 3.5, np.random.default_rng(seed))
    assert np.max(np.abs(X.T @ X - 3.5 * np.eye(4))) <= 1e-10


def test_linreg_noiseless_ols_recovers_truth():
    spec = LinRegSpec(K=5, n=20, d=3, sigma=0, tau=1, beta=2.0, split=(1, 0, 0))
    pop = gen_linear_regression(spec, 4)
    for dev, w in zip(pop.devices, pop.ground_truth):
        X, y = dev.train.features, dev.train.labels
        assert np.max(np.abs(X.T @ X - 2.0 * np.eye(3))) <= 1e-10
        np.testing.assert_allclose(np.linalg.solve(X.T @ X, X.T @ y), w, atol=1e-10)


def test_linreg_residual_variance():
    sigma = 0.7
    spec = LinRegSpec(K=1, n=4, d=2, sigma=sigma, tau=1, beta=1.0, split=(1, 0, 0))
    res = []
    for s in range(10_000):
        dev = gen_linear_regression(spec, s).devices[0]
        X, y = dev.train.features, dev.train.labels
        r = y - X @ np.linalg.solve(X.T @ X, X.T @ y)
        res.append(r @ r / (4 - 2))
    assert abs(np.mean(res) / sigma**2 - 1) < 0.10


def test_linreg_rejects_short_orthogonal_design():
    with pytest.raises(ValueError):
        LinRegSpec(K=2, n=3, d=5, sigma=1, tau=1)


def test_spec_validation():
    with pytest.raises(ValueError):
        PointEstimationSpec(K=5, n=3, sigma=1, tau=1, K_a=5)
    with pytest.raises(ValueError):
        PointEstimationSpec(K=5, n=3, sigma=1, tau=1, tau_a=0.5)
    with pytest.raises(ValueError):
        PointEstimationSpec(K=5, n=3, sigma=1, tau=1, split=(0.5, 0.5, 0.5))


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_csv_by_column(tmp_path):
    p = _write(tmp_path, "g,x,y\na,1,0\nb,2,1\na,3,1\nb,4,0\na,5,1\n")
    pop = load_csv_population(p, CSVSchema("y"), Partition("by_column", column="g"), 0, split=(1, 0, 0))
    assert pop.K == 2
    assert sorted(len(d.train) for d in pop.devices) == [2, 3]
    assert pop.dim == 1


def test_csv_bias_column(tmp_path):
    p = _write(tmp_path, "x,y\n1,0\n2,1\n3,1\n4,0\n")
    pop = load_csv_population(p, CSVSchema("y", bias=True), Partition("power_law", num_devices=1, exponent=1.0), 0, (1, 0, 0))
    np.testing.assert_array_equal(pop.devices[0].train.features[:, 1], np.ones(4))


def test_csv_classes_per_device_single_class(tmp_path):
    rows = "\n".join(f"{i},{i % 2}" for i in range(40))
    p = _write(tmp_path, "x,y\n" + rows + "\n")
    pop = load_csv_population(p, CSVSchema("y"), Partition("classes_per_device", num_devices=4, classes=1), 1, (1, 0, 0))
    for dev in pop.devices:
        assert np.unique(dev.train.labels).size == 1


def test_csv_dirichlet_large_alpha_matches_global_histogram(tmp_path):
    rng = np.random.default_rng(0)
    y = rng.integers(0, 4, 40_000)
    rows = "\n".join(f"{i},{c}" for i, c in enumerate(y))
    p = _write(tmp_path, "x,y\n" + rows + "\n")
    pop = load_csv_population(p, CSVSchema("y"), Partition("dirichlet", num_devices=100, alpha=1e6), 2, (1, 0, 0))
    glob = np.bincount(y, minlength=4) / y.size
    # pooled chi-square over 100 devices x 4 classes, 300 degrees of freedom
    stat = 0.0
    for dev in pop.devices:
        counts = np.bincount(dev.train.labels.astype(int), minlength=4)
        expected = glob * counts.sum()
        stat += np.sum((counts - expected) ** 2 / expected)
    assert stat < chi2.ppf(0.999, 300)


def test_csv_errors_report_line_numbers(tmp_path):
    p = _write(tmp_path, "x,y\n1,0\n2\n")
    with pytest.raises(CSVFormatError, match="line 3"):
        load_csv_population(p, CSVSchema("y"), Partition("power_law", num_devices=1, exponent=0.0), 0)
    p = _write(tmp_path, "x,y\n1,0\nfoo,1\n", "b.csv")
    with pytest.raises(CSVFormatError, match="line 3"):
        load_csv_population(p, CSVSchema("y"), Partition("power_law", num_devices=1, exponent=0.0), 0)
    p = _write(tmp_path, "x,z\n1,0\n", "c.csv")
    with pytest.raises(CSVFormatError, match="line 1"):
        load_csv_population(p, CSVSchema("y"), Partition("power_law", num_devices=1, exponent=0.0), 0)


def test_csv_empty_device_is_an_error(tmp_path):
    p = _write(tmp_path, "x,y\n1,0\n2,0\n")
    with pytest.raises(ValueError, match="empty"):
        load_csv_population(p, CSVSchema("y"), Partition("classes_per_device", num_devices=3, classes=1), 0)
