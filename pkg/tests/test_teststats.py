"""TSLS, Anderson-Rubin, and CLR statistics with their reference laws."""

import numpy as np
import pytest
from scipy import stats

from ivselect import (
    IVDataset,
    StatKind,
    ar_stat,
    clr_components,
    clr_stat,
    clr_statistic_from_q,
    covariance_estimates,
    dgp_from_r,
    generate,
    prepare,
    tsls_estimate,
    tsls_stat,
)


def _strong_data(seed=0, n=150, p=3):
    return generate(dgp_from_r(0.5, 0.6, n=n, p=p, seed=seed))


def test_tsls_stat_vanishes_at_estimate():
    data = _strong_data()
    beta_hat = tsls_estimate(data)
    tv = tsls_stat(data, beta_hat, covariance_estimates(data, beta_hat))
    assert tv.statistic == pytest.approx(0.0, abs=1e-10)
    assert tv.naive_pvalue == pytest.approx(1.0, abs=1e-10)
    assert tv.kind is StatKind.TSLS


def test_tsls_pvalue_is_two_sided_normal():
    data = _strong_data(seed=1)
    tv = tsls_stat(data, 0.0, covariance_estimates(data, 0.0))
    expected = 2.0 * stats.norm.sf(abs(tv.statistic))
    assert tv.naive_pvalue == pytest.approx(expected, rel=1e-12)


def test_tsls_null_distribution_is_standard_normal():
    # null simulation: beta0 = beta*, moderate strength
    reps = 1000
    vals = np.empty(reps)
    for i in range(reps):
        data = generate(dgp_from_r(0.5, 0.6, n=500, p=3, seed=3000 + i))
        vals[i] = tsls_stat(data, 1.0, covariance_estimates(data, 1.0)).statistic
    ks = stats.kstest(vals, "norm").statistic
    assert ks < 0.08


def test_ar_hand_instance():
    # quadratic forms: r'P_Z r = 4.5, r'(I-P_Z) r = 1.5, so the
    # df-scaled ratio is (4.5/1) / (1.5/2) = 6
    z = np.array([[-1.0], [0.0], [1.0]])
    y = np.array([-2.0, 1.0, 1.0])
    d = np.array([-2.0, 1.0, 1.0])
    data = prepare(IVDataset(Y=y, D=d, Z=z))

    r = y  # beta0 = 0
    pz = z @ z.T / float(z[:, 0] @ z[:, 0])
    num = float(r @ pz @ r)
    den = float(r @ r) - num
    assert num == pytest.approx(4.5, abs=1e-12)
    assert den == pytest.approx(1.5, abs=1e-12)

    tv = ar_stat(data, 0.0)
    assert tv.statistic == pytest.approx((num / 1) / (den / 2), abs=1e-10)
    assert tv.statistic == pytest.approx(6.0, abs=1e-10)
    assert tv.naive_pvalue == pytest.approx(stats.f.sf(6.0, 1, 2), rel=1e-10)


def test_ar_zero_when_residual_orthogonal():
    rng = np.random.default_rng(30)
    z = rng.standard_normal((40, 2))
    z -= z.mean(axis=0)
    raw = rng.standard_normal(40)
    resid = raw - z @ np.linalg.solve(z.T @ z, z.T @ raw)
    beta0 = 0.7
    d = z @ np.array([0.5, -0.3]) + rng.standard_normal(40)
    y = d * beta0 + resid
    data = prepare(IVDataset(Y=y, D=d, Z=z))
    tv = ar_stat(data, beta0)
    assert tv.statistic == pytest.approx(0.0, abs=1e-8)
    assert tv.naive_pvalue == pytest.approx(1.0, abs=1e-8)


def test_ar_zero_residual_error():
    rng = np.random.default_rng(31)
    z = rng.standard_normal((30, 2))
    z -= z.mean(axis=0)
    d = z @ np.array([1.0, 0.5])
    y = 2.0 * d + z @ np.array([0.3, -0.2])  # null residual lies in col(Z)
    data = prepare(IVDataset(Y=y, D=d, Z=z))
    with pytest.raises(Exception, match="denominator"):
        ar_stat(data, 2.0)


def test_ar_null_distribution_is_exact_f():
    reps = 1000
    vals = np.empty(reps)
    for i in range(reps):
        data = generate(dgp_from_r(0.3, 0.6, n=200, p=5, seed=5000 + i))
        vals[i] = ar_stat(data, 1.0).statistic
    ks = stats.kstest(vals, "f", args=(5, 195)).statistic
    assert ks < 0.08


def test_ar_matches_grid_minimum_of_its_objective():
    # the statistic over a beta grid must agree with the quadratic-form
    # objective evaluated directly from the arrays
    data = _strong_data(seed=2, n=120, p=2)
    z, y, d = data.Z, data.Y, data.D
    pz = z @ np.linalg.solve(z.T @ z, z.T)
    grid = np.linspace(-2, 4, 121)

    def oracle(b):
        r = y - d * b
        num = r @ pz @ r
        den = r @ r - num
        return (num / data.p) / (den / (data.n - data.p))

    direct = np.array([oracle(b) for b in grid])
    packaged = np.array([ar_stat(data, b).statistic for b in grid])
    np.testing.assert_allclose(packaged, direct, rtol=1e-9)
    b_min = grid[np.argmin(direct)]
    assert ar_stat(data, b_min).statistic == pytest.approx(direct.min(), rel=1e-9)


def test_clr_component_identities():
    data = _strong_data(seed=3, n=200, p=4)
    for beta0 in (-0.5, 0.9, 2.0):
        comps = clr_components(data, beta0, covariance_estimates(data, beta0))
        assert comps.q_u == pytest.approx(float(comps.u_hat @ comps.u_hat), abs=1e-10)
        assert comps.q_r == pytest.approx(float(comps.r_hat @ comps.r_hat), abs=1e-10)
        assert comps.q_ur == pytest.approx(float(comps.u_hat @ comps.r_hat), abs=1e-10)
        q = np.array([[comps.q_u, comps.q_ur], [comps.q_ur, comps.q_r]])
        assert np.linalg.eigvalsh(q).min() > -1e-10
        np.testing.assert_allclose(comps.a0, [beta0, 1.0])
        np.testing.assert_allclose(comps.b0, [1.0, -beta0])


def test_clr_collapse_when_cross_term_vanishes():
    assert clr_statistic_from_q(5.0, 0.0, 2.0) == pytest.approx(3.0, abs=1e-12)
    assert clr_statistic_from_q(2.0, 0.0, 5.0) == pytest.approx(0.0, abs=1e-12)


def test_clr_statistic_nonnegative_and_pvalue_valid():
    rng = np.random.default_rng(32)
    for seed in range(8):
        data = generate(dgp_from_r(rng.uniform(0.05, 0.4), 0.5, n=150, p=3, seed=60 + seed))
        beta0 = rng.uniform(-1, 2)
        tv, comps = clr_stat(data, beta0, covariance_estimates(data, beta0))
        assert tv.statistic >= 0
        assert 0.0 <= tv.naive_pvalue <= 1.0
        assert tv.statistic == pytest.approx(
            clr_statistic_from_q(comps.q_u, comps.q_ur, comps.q_r), abs=1e-12
        )


def test_statistics_invariant_to_instrument_recombination():
    rng = np.random.default_rng(33)
    z = rng.standard_normal((120, 3))
    d = z @ np.array([0.4, 0.3, -0.2]) + rng.standard_normal(120)
    y = 0.9 * d + rng.standard_normal(120)
    data = prepare(IVDataset(Y=y, D=d, Z=z))

    a_general = rng.standard_normal((3, 3)) + 2.0 * np.eye(3)
    a_ortho = np.linalg.qr(rng.standard_normal((3, 3)))[0]
    beta0 = 0.4

    tsls_base = tsls_stat(data, beta0, covariance_estimates(data, beta0)).statistic
    ar_base = ar_stat(data, beta0).statistic
    clr_base = clr_stat(data, beta0, covariance_estimates(data, beta0))[0].statistic

    mixed = prepare(IVDataset(Y=y, D=d, Z=z @ a_general))
    assert abs(tsls_stat(mixed, beta0, covariance_estimates(mixed, beta0)).statistic - tsls_base) < 1e-8
    assert abs(ar_stat(mixed, beta0).statistic - ar_base) < 1e-8

    rotated = prepare(IVDataset(Y=y, D=d, Z=z @ a_ortho))
    assert abs(clr_stat(rotated, beta0, covariance_estimates(rotated, beta0))[0].statistic - clr_base) < 1e-8
