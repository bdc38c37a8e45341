import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from robust_fdp.datagen import FactorModelSpec, gen_panel
from robust_fdp.errors import DegenerateDataError, InvalidArgumentError
from robust_fdp.huber import DesignMatrix, HuberConfig, HuberFit, fit_adaptive_huber, ols_fit
from robust_fdp.variance import (
    adaptive_huber_variance,
    adaptive_huber_variances,
    default_V,
    factor_cov,
    huber_second_moment,
    lower_quantile,
    mom_blocks,
    mom_sigma_columns,
    mom_sigma_jj,
    mom_variance,
    mom_variance_modified,
    mom_variances_modified,
)


def fake_fit(mu=0.0, b=()):
    b = np.asarray(b, dtype=float)
    return HuberFit(mu, b, 1.0, 0, True, np.zeros(1), 0.0)


def brute_force_mom(x, V):
    """Median over block pairs, each U-statistic summed pair by pair."""
    n = len(x)
    m = n // V
    blocks = [list(range(k * m, (k + 1) * m)) for k in range(V - 1)] + [list(range((V - 1) * m, n))]
    stats = []
    for a, b in combinations(range(V), 2):
        total = 0.0
        for i in blocks[a]:
            for j in blocks[b]:
                total += (x[i] - x[j]) ** 2
        stats.append(total / (2 * len(blocks[a]) * len(blocks[b])))
    stats.sort()
    k = len(stats)
    return stats[k // 2] if k % 2 else 0.5 * (stats[k // 2 - 1] + stats[k // 2])


# ---------------------------------------------------------------- factor covariance


def test_factor_cov_examples():
    assert np.array_equal(factor_cov(np.zeros((5, 3))), np.zeros((3, 3)))
    assert np.array_equal(factor_cov(np.array([[1.0, 2.0]])), np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_factor_cov_triple_loop():
    F = np.random.default_rng(0).normal(size=(17, 4))
    n, K = F.shape
    ref = np.zeros((K, K))
    for a in range(K):
        for b in range(K):
            for i in range(n):
                ref[a, b] += F[i, a] * F[i, b]
    assert np.max(np.abs(factor_cov(F) - ref / n)) < 1e-12


# ---------------------------------------------------------------- Huber second moment


def test_second_moment_examples():
    assert huber_second_moment([1.0, 1.0, 1.0], 10.0) == 1.0
    assert huber_second_moment([-2.0, 2.0], 100.0) == 4.0
    x = np.random.default_rng(1).standard_normal(100_000)
    assert abs(huber_second_moment(x) - 1.0) < 0.05


def test_second_moment_errors():
    with pytest.raises(InvalidArgumentError):
        huber_second_moment([1.0, 2.0], gamma=0.0)
    with pytest.raises(DegenerateDataError):
        huber_second_moment([0.0, 0.0, 0.0], gamma=1.0)


def test_adaptive_variance_branches():
    x = np.array([1.0, -1.0, 2.0, -2.0])
    est = adaptive_huber_variance(x, fake_fit(0.0, [0.0]), np.eye(1), gamma=1e6)
    assert not est.fallback_used and est.value == pytest.approx(2.5)
    # theta = 1 but common part = 2: the unsubtracted branch
    est = adaptive_huber_variance([1.0, -1.0, 1.0], fake_fit(1.0, [1.0]), np.eye(1), gamma=10.0)
    assert est.fallback_used and est.value == 1.0 and est.common == 2.0
    assert est.method == "adaptive_huber"


def test_adaptive_variance_plain_moment_limit():
    rng = np.random.default_rng(2)
    F = rng.standard_normal((80, 3))
    y = 0.3 + F @ np.array([0.5, -0.4, 0.2]) + rng.standard_normal(80)
    design = DesignMatrix.from_factors(F)
    fit = ols_fit(y, design)
    S = factor_cov(F)
    plain = np.mean(y**2) - fit.mu_hat**2 - fit.b_hat @ S @ fit.b_hat
    assert plain > 0
    est = adaptive_huber_variance(y, fit, S, gamma=1e12)
    assert abs(est.value - plain) < 1e-6


def test_adaptive_variance_model1_column():
    spec = FactorModelSpec(p=4, n=10_000, error_model=1, pi1=0.0, seed=3)
    panel = gen_panel(spec)
    design = DesignMatrix.from_factors(panel.F)
    S = factor_cov(panel.F)
    for j in range(4):
        fit = fit_adaptive_huber(panel.X[:, j], design, HuberConfig(p=4))
        est = adaptive_huber_variance(panel.X[:, j], fit, S, p=4)
        assert abs(est.value - 1.0) < 0.15  # Sigma_u has unit diagonal


def test_vectorised_adaptive_variances_match_scalar():
    rng = np.random.default_rng(4)
    F = rng.standard_normal((60, 2))
    X = F @ rng.normal(size=(2, 5)) + rng.standard_t(4, size=(60, 5))
    design = DesignMatrix.from_factors(F)
    S = factor_cov(F)
    fits = [fit_adaptive_huber(X[:, j], design) for j in range(5)]
    mu = np.array([f.mu_hat for f in fits])
    B = np.array([f.b_hat for f in fits])
    values, fallback = adaptive_huber_variances(X, mu, B, S, p=5)
    for j in range(5):
        est = adaptive_huber_variance(X[:, j], fits[j], S, p=5)
        assert values[j] == pytest.approx(est.value, rel=1e-12)
        assert fallback[j] == est.fallback_used


# ---------------------------------------------------------------- blocks


@pytest.mark.parametrize(
    "n,V,expected",
    [
        (7, 2, [[1, 2, 3], [4, 5, 6, 7]]),
        (6, 3, [[1, 2], [3, 4], [5, 6]]),
        (5, 4, [[1], [2], [3], [4, 5]]),
    ],
)
def test_block_examples(n, V, expected):
    part = mom_blocks(n, V)
    assert [[i + 1 for i in b] for b in part.blocks] == expected


@given(st.integers(2, 200).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n - 1))))
def test_block_partition_invariant(nv):
    n, V = nv
    part = mom_blocks(n, V)
    m = n // V
    assert part.V == V and len(part.blocks) == V
    assert [i for b in part.blocks for i in b] == list(range(n))
    assert all(len(b) == m for b in part.blocks[:-1])
    assert len(part.blocks[-1]) == m + n % V


def test_block_errors():
    with pytest.raises(InvalidArgumentError):
        mom_blocks(5, 5)
    with pytest.raises(InvalidArgumentError):
        mom_blocks(5, 0)


# ---------------------------------------------------------------- median of means


def test_mom_examples():
    assert mom_sigma_jj([0.0, 0.0, 2.0, 2.0], 2) == 2.0
    assert mom_sigma_jj([3.0] * 8, 3) == 0.0


def test_mom_matches_enumeration_on_integer_data_exactly():
    rng = np.random.default_rng(5)
    for n in range(3, 13):
        for V in (2, 3):
            if V >= n:
                continue
            for _ in range(20):
                x = rng.integers(-20, 21, size=n).astype(float)
                assert mom_sigma_jj(x, V) == brute_force_mom(list(x), V)


def test_mom_matches_enumeration_on_continuous_data_exactly():
    rng = np.random.default_rng(6)
    for n in range(3, 13):
        for V in (2, 3):
            if V < n:
                x = rng.standard_t(3, size=n) * 10.0
                assert mom_sigma_jj(x, V) == brute_force_mom(list(x), V)


def test_mom_columns_match_single():
    X = np.random.default_rng(7).standard_normal((40, 6))
    cols = mom_sigma_columns(X, 4)
    for j in range(6):
        assert cols[j] == mom_sigma_jj(X[:, j], 4)


def test_mom_full_average_is_unbiased_variance_when_one_block_per_point():
    # with V = n every block is a singleton and the U-statistics cover all pairs
    x = np.random.default_rng(8).standard_normal(9)
    from robust_fdp.variance import pair_statistics

    stats = pair_statistics(x[:, None], 8)  # 8 blocks, last holds two points
    assert stats.shape == (28, 1)
    pairs = pair_statistics(x[:, None], 2)[:, 0]
    m = 4
    direct = np.mean([(a - b) ** 2 / 2 for a in x[:m] for b in x[m:]])
    assert pairs[0] == pytest.approx(direct, rel=1e-12)
    # a 1-block-per-point average over all pairs equals the ddof=1 variance
    n = x.size
    allpairs = np.mean([(x[i] - x[j]) ** 2 / 2 for i in range(n) for j in range(i + 1, n)])
    assert allpairs == pytest.approx(np.var(x, ddof=1), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(6, 30), elements=st.floats(-100, 100)), st.floats(-50, 50), st.floats(0.1, 10))
def test_mom_shift_and_scale(x, a, c):
    V = 3
    base = mom_sigma_jj(x, V)
    assert mom_sigma_jj(x + a, V) == pytest.approx(base, rel=1e-9, abs=1e-8)
    assert mom_sigma_jj(c * x, V) == pytest.approx(c * c * base, rel=1e-9, abs=1e-8)


def test_mom_variance_branches():
    x = np.random.default_rng(9).standard_normal(30)
    est = mom_variance(x, fake_fit(0.0, [0.0]), np.eye(1), 3)
    assert est.value == mom_sigma_jj(x, 3) and not est.fallback_used
    s = mom_sigma_jj(x, 3)
    b = math.sqrt(3 * s)
    est = mom_variance(x, fake_fit(0.0, [b]), np.eye(1), 3)
    assert est.fallback_used and est.value == s
    with pytest.raises(DegenerateDataError):
        mom_variance(np.ones(10), fake_fit(), np.zeros((0, 0)), 2)


def test_mom_variance_model1_column():
    spec = FactorModelSpec(p=4, n=10_000, error_model=1, pi1=0.0, seed=10)
    panel = gen_panel(spec)
    design = DesignMatrix.from_factors(panel.F)
    S = factor_cov(panel.F)
    V = default_V(10_000, 4)
    assert V == math.ceil(0.5 * math.log(40_000))
    for j in range(4):
        fit = fit_adaptive_huber(panel.X[:, j], design, HuberConfig(p=4))
        assert abs(mom_variance(panel.X[:, j], fit, S, V).value - 1.0) < 0.15


# ---------------------------------------------------------------- modified procedure


def test_lower_quantile_convention():
    assert lower_quantile([1.0, 2.0, 3.0, 4.0], 0.75) == 3.0
    assert lower_quantile([4.0, 1.0, 3.0, 2.0, 5.0], 0.75) == 4.0  # ceil(3.75) = 4th
    assert lower_quantile([7.0], 0.75) == 7.0


def test_modified_quantile_example():
    from robust_fdp.variance import _modified_from

    est = _modified_from(np.array([1.0, 2.0, 3.0, 4.0]), 0.5, 0.75, 5)
    assert est.raw == 3.0 and est.value == 2.5 and not est.fallback_used


def test_modified_equal_values_and_no_survivors():
    x = np.tile([0.0, 1.0], 16)  # every block pair sees the same spread
    est = mom_variance_modified(x, fake_fit(0.0, [0.0]), np.eye(1), V=4)
    assert est.value == pytest.approx(mom_sigma_jj(x, 2))
    huge = fake_fit(0.0, [100.0])
    est = mom_variance_modified(x, huge, np.eye(1), V=4)
    assert est.fallback_used and est.value == mom_sigma_jj(x, 4)


def test_modified_vectorised_matches_scalar():
    rng = np.random.default_rng(11)
    F = rng.standard_normal((50, 2))
    X = F @ rng.normal(size=(2, 4)) + rng.standard_t(3, size=(50, 4))
    S = factor_cov(F)
    design = DesignMatrix.from_factors(F)
    fits = [fit_adaptive_huber(X[:, j], design) for j in range(4)]
    B = np.array([f.b_hat for f in fits])
    values, fallback = mom_variances_modified(X, B, S, V=5)
    for j in range(4):
        est = mom_variance_modified(X[:, j], fits[j], S, V=5)
        assert values[j] == pytest.approx(est.value, rel=1e-12) and fallback[j] == est.fallback_used
        assert est.value > 0
