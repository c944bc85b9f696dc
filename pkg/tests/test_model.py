"""Dataset preparation, TSLS point estimation, and covariance mapping."""

import numpy as np
import pytest

from ivselect import (
    DGPConfig,
    IVDataset,
    covariance_estimates,
    generate,
    prepare,
    sufficient_statistic,
    tsls_estimate,
    tsls_standard_error,
)
from ivselect.errors import (
    DegenerateFirstStageError,
    DimensionError,
    RankDeficiencyError,
)


def _centered(rng, n, p):
    z = rng.standard_normal((n, p))
    return z - z.mean(axis=0)


def test_prepare_identity_when_centered():
    rng = np.random.default_rng(0)
    z = _centered(rng, 40, 3)
    d = z @ np.array([0.5, -0.2, 0.1]) + rng.standard_normal(40)
    d -= d.mean()
    y = 2.0 * d + rng.standard_normal(40)
    y -= y.mean()
    out = prepare(IVDataset(Y=y, D=d, Z=z))
    np.testing.assert_allclose(out.Y, y, atol=1e-12)
    np.testing.assert_allclose(out.D, d, atol=1e-12)
    np.testing.assert_allclose(out.Z, z, atol=1e-12)


def test_prepare_constant_covariate_is_plain_centering():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((30, 2)) + 5.0
    d = rng.standard_normal(30) - 2.0
    y = rng.standard_normal(30) + 1.0
    x = np.full((30, 1), 3.7)
    out = prepare(IVDataset(Y=y, D=d, Z=z, X=x))
    np.testing.assert_allclose(out.Y, y - y.mean(), atol=1e-10)
    np.testing.assert_allclose(out.D, d - d.mean(), atol=1e-10)
    np.testing.assert_allclose(out.Z, z - z.mean(axis=0), atol=1e-10)
    assert out.X is None


def test_prepare_matches_normal_equations_oracle():
    # independent oracle: residualize on [1, X] by solving the normal
    # equations directly, which equals center-then-residualize by FWL
    rng = np.random.default_rng(2)
    n, p, k = 50, 2, 3
    z = rng.standard_normal((n, p)) + 1.0
    x = rng.standard_normal((n, k)) * np.array([1.0, 3.0, 0.5]) - 2.0
    d = rng.standard_normal(n)
    y = rng.standard_normal(n)

    g = np.column_stack([np.ones(n), x])
    m = np.column_stack([y, d, z])
    coef = np.linalg.solve(g.T @ g, g.T @ m)
    resid = m - g @ coef

    out = prepare(IVDataset(Y=y, D=d, Z=z, X=x))
    np.testing.assert_allclose(out.Y, resid[:, 0], atol=1e-10)
    np.testing.assert_allclose(out.D, resid[:, 1], atol=1e-10)
    np.testing.assert_allclose(out.Z, resid[:, 2:], atol=1e-10)


def test_prepare_rank_deficiency_names_columns():
    rng = np.random.default_rng(3)
    z1 = rng.standard_normal(25)
    z = np.column_stack([z1, 2.0 * z1])
    with pytest.raises(RankDeficiencyError, match="z"):
        prepare(IVDataset(Y=rng.standard_normal(25), D=rng.standard_normal(25), Z=z))


def test_prepare_collinear_covariate_named():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((25, 1))
    x = np.column_stack([z[:, 0], rng.standard_normal(25)])
    with pytest.raises(RankDeficiencyError):
        prepare(IVDataset(Y=rng.standard_normal(25), D=rng.standard_normal(25), Z=z, X=x))


def test_row_count_mismatch_rejected():
    with pytest.raises(DimensionError, match="row counts"):
        IVDataset(Y=np.zeros(5), D=np.zeros(4), Z=np.zeros((5, 1)))


def test_tsls_exact_fit():
    rng = np.random.default_rng(5)
    z = _centered(rng, 20, 1)
    d = z[:, 0].copy()
    y = 2.0 * d
    assert tsls_estimate(prepare(IVDataset(Y=y, D=d, Z=z))) == pytest.approx(2.0, abs=1e-12)


def test_tsls_zero_numerator():
    rng = np.random.default_rng(6)
    z = _centered(rng, 20, 1)
    d = z[:, 0] + 0.1 * rng.standard_normal(20)
    y = np.full(20, 4.2)  # constant outcome centers to zero
    assert tsls_estimate(prepare(IVDataset(Y=y, D=d, Z=z))) == pytest.approx(0.0, abs=1e-12)


def test_tsls_degenerate_first_stage():
    rng = np.random.default_rng(7)
    z = _centered(rng, 30, 2)
    raw = rng.standard_normal(30)
    # project the treatment onto the orthogonal complement of col(Z)
    d = raw - z @ np.linalg.solve(z.T @ z, z.T @ raw)
    y = rng.standard_normal(30)
    data = prepare(IVDataset(Y=y, D=d, Z=z))
    with pytest.raises(DegenerateFirstStageError):
        tsls_estimate(data)


def test_covariance_at_zero_equals_omega():
    data = generate(DGPConfig(n=120, p=3, beta_star=1.0, gamma_star=0.4,
                              sigma_star=np.array([[1.0, 0.3], [0.3, 1.0]]), seed=8))
    est = covariance_estimates(data, 0.0)
    np.testing.assert_allclose(est.sigma_hat, est.omega_hat, atol=1e-14)


def test_covariance_mapping_consistency():
    data = generate(DGPConfig(n=200, p=4, beta_star=1.0, gamma_star=0.5,
                              sigma_star=np.array([[1.0, 0.8], [0.8, 1.0]]), seed=9))
    for beta0 in (-1.3, 0.0, 0.7, 2.5):
        est = covariance_estimates(data, beta0)
        b = np.array([[1.0, beta0], [0.0, 1.0]])
        np.testing.assert_allclose(b @ est.sigma_hat @ b.T, est.omega_hat, atol=1e-12)
        binv = np.array([[1.0, -beta0], [0.0, 1.0]])
        np.testing.assert_allclose(est.sigma_hat, binv @ est.omega_hat @ binv.T, atol=1e-10)


def test_covariance_estimates_spd():
    data = generate(DGPConfig(n=150, p=2, beta_star=1.0, gamma_star=0.3,
                              sigma_star=np.array([[1.0, -0.5], [-0.5, 2.0]]), seed=10))
    est = covariance_estimates(data, 0.4)
    for mat in (est.omega_hat, est.sigma_hat):
        np.testing.assert_allclose(mat, mat.T, atol=1e-12)
        assert np.linalg.eigvalsh(mat).min() > 0


def test_covariance_monte_carlo_recovers_truth():
    # Sigma_hat(beta*) should center on Sigma* across replications
    sigma = np.array([[1.0, 0.8], [0.8, 1.0]])
    reps = 500
    entries = np.empty((reps, 3))
    for i in range(reps):
        cfg = DGPConfig(n=200, p=3, beta_star=1.0, gamma_star=0.5,
                        sigma_star=sigma, seed=1000 + i)
        est = covariance_estimates(generate(cfg), 1.0)
        entries[i] = (est.sigma_hat[0, 0], est.sigma_hat[0, 1], est.sigma_hat[1, 1])
    mean = entries.mean(axis=0)
    se = entries.std(axis=0, ddof=1) / np.sqrt(reps)
    target = np.array([sigma[0, 0], sigma[0, 1], sigma[1, 1]])
    assert np.all(np.abs(mean - target) < 3.0 * se)


def test_projection_idempotent_and_complementary():
    rng = np.random.default_rng(11)
    data = prepare(IVDataset(Y=rng.standard_normal(40), D=rng.standard_normal(40),
                             Z=rng.standard_normal((40, 3))))
    eye = np.eye(data.n)
    pz = data.project_z(eye)
    mz = data.resid_z(eye)
    assert np.max(np.abs(pz @ pz - pz)) < 1e-10
    np.testing.assert_allclose(pz + mz, eye, atol=1e-12)


def test_tsls_invariant_to_instrument_recombination():
    rng = np.random.default_rng(12)
    z = rng.standard_normal((100, 4))
    d = z @ np.array([0.5, 0.2, -0.3, 0.4]) + rng.standard_normal(100)
    y = 1.5 * d + rng.standard_normal(100)
    a = rng.standard_normal((4, 4)) + 2.0 * np.eye(4)
    est1 = tsls_estimate(prepare(IVDataset(Y=y, D=d, Z=z)))
    est2 = tsls_estimate(prepare(IVDataset(Y=y, D=d, Z=z @ a)))
    assert abs(est1 - est2) < 1e-8


def test_s_norm_ties_to_projected_quadratic():
    rng = np.random.default_rng(13)
    data = prepare(IVDataset(Y=rng.standard_normal(60), D=rng.standard_normal(60),
                             Z=rng.standard_normal((60, 5))))
    s = sufficient_statistic(data)
    direct = float(data.D @ data.project_z(data.D))
    assert abs(float(s @ s) - direct) < 1e-8 * max(direct, 1.0)


def test_standard_error_matches_quadratic_forms():
    # recompute from raw arrays: sqrt of Sigma_hat_11 at beta_hat over D'P_Z D
    rng = np.random.default_rng(14)
    z = rng.standard_normal((80, 3))
    d = z @ np.array([0.6, 0.2, -0.1]) + rng.standard_normal(80)
    y = 0.8 * d + rng.standard_normal(80)
    data = prepare(IVDataset(Y=y, D=d, Z=z))

    zc, yc, dc = data.Z, data.Y, data.D
    pz = zc @ np.linalg.solve(zc.T @ zc, zc.T)
    dpd = dc @ pz @ dc
    beta_hat = (dc @ pz @ yc) / dpd
    resid = yc - beta_hat * dc
    mz = np.eye(80) - pz
    sigma11 = resid @ mz @ resid / (80 - 3)
    expected = np.sqrt(sigma11 / dpd)

    assert tsls_standard_error(data) == pytest.approx(expected, rel=1e-10)
    assert tsls_estimate(data) == pytest.approx(beta_hat, rel=1e-10)
