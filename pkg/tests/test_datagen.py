import math

import numpy as np
import pytest

from robust_fdp.datagen import (
    WEIBULL_MEAN,
    Calibration,
    FactorModelSpec,
    dumps_panel,
    gen_errors,
    gen_figure1_sample,
    gen_loadings,
    gen_panel,
    gen_sigma_u,
    load_panel,
    loads_panel,
    read_key_values,
    save_panel,
)
from robust_fdp.errors import InvalidArgumentError
from robust_fdp.rng import StreamFactory


# ---------------------------------------------------------------- Sigma_u


def test_sigma_u_structure():
    S = gen_sigma_u(10, np.random.default_rng(0))
    assert np.array_equal(np.diag(S), np.ones(10))
    assert np.array_equal(S, S.T)
    # off-block entries vanish, in-block entries share one rho in [0, 0.5]
    for a in range(10):
        for b in range(10):
            if a // 4 != b // 4:
                assert S[a, b] == 0
    for start in (0, 4, 8):
        blk = S[start:start + 4, start:start + 4]
        off = blk[~np.eye(blk.shape[0], dtype=bool)]
        assert np.all(off == off[0]) and 0 <= off[0] <= 0.5
    assert np.linalg.eigvalsh(S).min() > 0


def test_sigma_u_eigenvalues_of_full_block():
    S = gen_sigma_u(4, np.random.default_rng(1))
    rho = S[0, 1]
    ev = np.sort(np.linalg.eigvalsh(S))
    assert np.allclose(ev, [1 - rho] * 3 + [1 + 3 * rho])


# ---------------------------------------------------------------- error models


def errors(model, n=200_000, p=4, seed=0):
    S = gen_sigma_u(p, np.random.default_rng(seed))
    return S, gen_errors(model, S, n, np.random.default_rng(seed + 100))


@pytest.mark.parametrize("model", range(1, 9))
def test_error_models_are_centred(model):
    _, U = errors(model)
    se = U.std(axis=0) / math.sqrt(U.shape[0])
    assert np.all(np.abs(U.mean(axis=0)) < 5 * se + 1e-3)


def test_model1_covariance_matches_sigma_u():
    S, U = errors(1)
    assert np.allclose(np.cov(U, rowvar=False), S, atol=0.015)


def test_model2_unit_variance():
    # t_{2.5} has infinite fourth moment: compare with a loose band
    _, U = errors(2, n=1_000_000, p=2)
    assert np.all(np.abs(U.var(axis=0) - 1) < 0.1)


def test_model3_variance():
    _, U = errors(3, p=2)
    e = math.e
    # the two components are drawn independently, so no cross term
    target = 0.25 + 0.25 * (e * e - e)
    assert np.all(np.abs(U.var(axis=0) / target - 1) < 0.05)


def test_weibull_mean_constant():
    draws = 0.75 * np.random.default_rng(3).weibull(0.75, size=1_000_000)
    assert abs(draws.mean() - WEIBULL_MEAN) < 0.01


def test_error_model_validation():
    with pytest.raises(InvalidArgumentError):
        gen_errors(9, np.eye(2), 5, np.random.default_rng(0))
    with pytest.raises(InvalidArgumentError):
        gen_errors(1, np.array([[1.0, 2.0], [2.0, 1.0]]), 5, np.random.default_rng(0))


# ---------------------------------------------------------------- loadings and panels


def test_uniform_loadings_ranges():
    B = gen_loadings(FactorModelSpec(p=2000), np.random.default_rng(4))
    assert B[:, 0].min() >= 0.5 and B[:, 0].max() <= 1.5
    assert B[:, 1].min() >= -2 and B[:, 1].max() <= -1
    assert B[:, 2].min() >= 0.5 and B[:, 2].max() <= 1.5


def test_gaussian_loadings_match_calibration():
    spec = FactorModelSpec(p=50_000, loading_model="calibrated_gaussian")
    B = gen_loadings(spec, np.random.default_rng(5))
    mu, SB, _ = spec.calibration.arrays()
    assert np.allclose(B.mean(axis=0), mu, atol=0.01)
    assert np.allclose(np.cov(B, rowvar=False), SB, atol=0.01)


def test_panel_without_signals():
    panel = gen_panel(FactorModelSpec(p=40, n=20, pi1=0.0))
    assert np.all(panel.mu_true == 0) and panel.truth.all()


def test_signal_strength():
    panel = gen_panel(FactorModelSpec(p=2000, n=80, pi1=0.25))
    alt = panel.mu_true[panel.mu_true != 0]
    assert alt.size == 500
    assert alt[0] == pytest.approx(0.4359, abs=1e-4)
    assert np.all(panel.mu_true[:500] == alt[0])


def test_model3_uses_larger_signal():
    spec = FactorModelSpec(p=100, n=50, error_model=3)
    assert spec.signal == pytest.approx(math.sqrt(3 * math.log(100) / 50))


def test_panel_is_deterministic_and_replication_specific():
    spec = FactorModelSpec(p=30, n=25, seed=7)
    a, b = gen_panel(spec, 3), gen_panel(spec, 3)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.F, b.F)
    assert not np.array_equal(a.X, gen_panel(spec, 4).X)
    assert a.spec["replication"] == 3


def test_factors_and_errors_are_uncorrelated():
    spec = FactorModelSpec(p=8, n=200_000, pi1=0.0, K=3)
    panel = gen_panel(spec)
    streams = StreamFactory(spec.seed)
    B = gen_loadings(spec, streams.generator("loadings", 0))
    U = panel.X - panel.F @ B.T
    corr = np.corrcoef(np.hstack([panel.F, U]), rowvar=False)[:3, 3:]
    assert np.abs(corr).max() < 0.01


def test_panel_shapes_and_spec_validation():
    panel = gen_panel(FactorModelSpec(p=9, n=6, K=2))
    assert panel.X.shape == (6, 9) and panel.F.shape == (6, 2)
    for bad in ({"p": 0}, {"n": 1}, {"error_model": 0}, {"pi1": 1.5}, {"loading_model": "x"}, {"seed": -1}):
        with pytest.raises(InvalidArgumentError):
            FactorModelSpec(**bad)
    with pytest.raises(InvalidArgumentError):
        FactorModelSpec(K=2, calibration=Calibration.default(3))


# ---------------------------------------------------------------- figure-1 sample


def test_figure1_sample_moments():
    x = gen_figure1_sample(30, 10000, np.random.default_rng(6))
    assert x.shape == (10000, 30)
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1) < 0.15


# ---------------------------------------------------------------- files


def test_panel_round_trip(tmp_path):
    panel = gen_panel(FactorModelSpec(p=7, n=5, K=2, seed=3), 1)
    path = tmp_path / "panel.txt"
    save_panel(panel, path)
    back = load_panel(path)
    assert np.array_equal(back.X, panel.X)
    assert np.array_equal(back.F, panel.F)
    assert np.array_equal(back.mu_true, panel.mu_true)
    assert back.spec["seed"] == 3 and back.spec["replication"] == 1
    assert dumps_panel(back) == dumps_panel(panel)


def test_panel_without_factors_round_trips():
    panel = gen_panel(FactorModelSpec(p=3, n=4, K=0))
    back = loads_panel(dumps_panel(panel))
    assert back.F.shape == (4, 0)


def test_malformed_panel_rejected():
    with pytest.raises(InvalidArgumentError):
        loads_panel("hello")
    with pytest.raises(InvalidArgumentError):
        loads_panel("#robust_fdp panel v1\n[X]\n1,2\n")


def test_calibration_round_trip():
    cal = Calibration.default(3)
    assert Calibration.loads(cal.dumps()) == cal
    with pytest.raises(InvalidArgumentError):
        Calibration.loads("mu_B = 0, 0\n")
    with pytest.raises(InvalidArgumentError):
        Calibration.loads("mu_B = 0\nSigma_B = -1\nSigma_f = 1\n")
    with pytest.raises(InvalidArgumentError):
        Calibration.loads("mu_B = 0, 0\nSigma_B = 1, 0; 0\nSigma_f = 1, 0; 0, 1\n")


def test_key_value_reader():
    kv = read_key_values("# comment\na = 1\nb=two words\n")
    assert kv == {"a": "1", "b": "two words"}
    with pytest.raises(InvalidArgumentError):
        read_key_values("a = 1\na = 2\n")
