"""Test statistics for H0: beta = beta0 and their naive reference laws.

Three statistics: the TSLS Wald statistic (standard normal under strong
instruments), Anderson-Rubin (exact F(p, n-p)), and the conditional
likelihood ratio statistic whose null law given Q_R is evaluated by
quadrature elsewhere.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import stats

from .errors import CovarianceError, DegenerateFirstStageError
from .model import IVDataset, ModelEstimates, require_prepared


class StatKind(Enum):
    TSLS = "tsls"
    AR = "ar"
    CLR = "clr"


@dataclass(frozen=True)
class TestValue:
    statistic: float
    kind: StatKind
    beta0: float
    naive_pvalue: float

    def __post_init__(self):
        if not 0.0 <= self.naive_pvalue <= 1.0:
            raise ValueError(f"p-value {self.naive_pvalue} outside [0, 1]")


@dataclass(frozen=True)
class ClrComponents:
    """Sufficient statistics of the weak-instrument reduced-form model.

    U_hat = (Z'Z)^(-1/2) Ytilde b0 / sqrt(b0' Omega b0)
    R_hat = (Z'Z)^(-1/2) Ytilde Omega^(-1) a0 / sqrt(a0' Omega^(-1) a0)

    with Ytilde = [Z'Y, Z'D], a0 = (beta0, 1), b0 = (1, -beta0).  Under
    the null U_hat is standard normal and independent of R_hat.
    """

    u_hat: np.ndarray
    r_hat: np.ndarray
    q_hat: np.ndarray  # 2x2: [[Q_U, Q_UR], [Q_UR, Q_R]]
    a0: np.ndarray
    b0: np.ndarray

    @property
    def q_u(self) -> float:
        return float(self.q_hat[0, 0])

    @property
    def q_ur(self) -> float:
        return float(self.q_hat[0, 1])

    @property
    def q_r(self) -> float:
        return float(self.q_hat[1, 1])


def tsls_stat(data: IVDataset, beta0: float, est: ModelEstimates) -> TestValue:
    """T = D'P_Z(Y - D beta0) / (sqrt(Sigma_11) sqrt(D'P_Z D)), two-sided
    normal p-value.  Sigma_hat must be evaluated at this beta0."""
    require_prepared(data)
    denom = data.d_pz_d
    if denom <= 1e-12 * max(float(data.D @ data.D), 1e-300):
        raise DegenerateFirstStageError("D'P_Z D is numerically zero")
    s11 = float(est.sigma_hat[0, 0])
    if s11 <= 0:
        raise CovarianceError("Sigma_hat_11 must be positive")
    pzd = data.project_z(data.D)
    t = float(pzd @ (data.Y - data.D * beta0)) / np.sqrt(s11 * denom)
    pval = 2.0 * stats.norm.sf(abs(t))
    return TestValue(statistic=t, kind=StatKind.TSLS, beta0=float(beta0), naive_pvalue=min(pval, 1.0))


def ar_stat(data: IVDataset, beta0: float) -> TestValue:
    """Anderson-Rubin statistic; F(p, n-p) upper-tail p-value regardless
    of instrument strength."""
    require_prepared(data)
    n, p = data.n, data.p
    e = data.Y - data.D * beta0
    pe = data.project_z(e)
    num = float(pe @ pe) / p
    den = float(e @ e - pe @ pe) / (n - p)
    if den <= 1e-12 * max(float(e @ e), 1e-300):
        raise CovarianceError("AR denominator is zero: Y - D*beta0 lies in col(Z)")
    stat = num / den
    return TestValue(
        statistic=stat,
        kind=StatKind.AR,
        beta0=float(beta0),
        naive_pvalue=float(stats.f.sf(stat, p, n - p)),
    )


def clr_components(data: IVDataset, beta0: float, est: ModelEstimates) -> ClrComponents:
    """U_hat, R_hat, Q_hat with plug-in Omega_hat.

    The 2x2 normalizations use closed forms: with omega = Omega_hat,
    b0'omega b0 = o11 - 2 beta0 o12 + beta0^2 o22 and
    a0'omega^(-1) a0 = b0'omega b0 / det(omega).
    """
    require_prepared(data)
    o = est.omega_hat
    det = float(o[0, 0] * o[1, 1] - o[0, 1] ** 2)
    if det <= 0:
        raise CovarianceError("Omega_hat is singular")
    b_quad = float(o[0, 0] - 2 * beta0 * o[0, 1] + beta0**2 * o[1, 1])
    a_quad = b_quad / det
    if b_quad <= 0 or a_quad <= 0:
        raise CovarianceError("degenerate normalization at this beta0")

    zty = data.Z.T @ data.Y
    ztd = data.Z.T @ data.D
    col_y = data.ztz_isqrt @ zty
    col_d = data.ztz_isqrt @ ztd  # equals S

    u_hat = (col_y - beta0 * col_d) / np.sqrt(b_quad)
    # omega^(-1) a0 = (o22*beta0 - o12, o11 - o12*beta0) / det
    w1 = (o[1, 1] * beta0 - o[0, 1]) / det
    w2 = (o[0, 0] - o[0, 1] * beta0) / det
    r_hat = (col_y * w1 + col_d * w2) / np.sqrt(a_quad)

    q = np.empty((2, 2))
    q[0, 0] = u_hat @ u_hat
    q[0, 1] = q[1, 0] = u_hat @ r_hat
    q[1, 1] = r_hat @ r_hat
    return ClrComponents(
        u_hat=u_hat,
        r_hat=r_hat,
        q_hat=q,
        a0=np.array([beta0, 1.0]),
        b0=np.array([1.0, -beta0]),
    )


def clr_statistic_from_q(q_u: float, q_ur: float, q_r: float) -> float:
    """LR = 0.5 * (Q_U - Q_R + sqrt((Q_U + Q_R)^2 - 4(Q_U Q_R - Q_UR^2)))."""
    disc = (q_u + q_r) ** 2 - 4.0 * (q_u * q_r - q_ur**2)
    # PSD of Q guarantees disc >= (q_u - q_r)^2; clip rounding noise
    return max(0.5 * (q_u - q_r + np.sqrt(max(disc, 0.0))), 0.0)


def clr_stat(
    data: IVDataset, beta0: float, est: ModelEstimates
) -> tuple[TestValue, ClrComponents]:
    """CLR statistic and components; naive p-value is the tail of the
    null law given Q_R with no selection truncation."""
    comps = clr_components(data, beta0, est)
    lr = clr_statistic_from_q(comps.q_u, comps.q_ur, comps.q_r)
    from .clr import QuadratureConfig, clr_tail  # deferred: clr imports this module

    pval = clr_tail(lr, comps.q_r, data.p, trunc=None, quad=QuadratureConfig())
    tv = TestValue(
        statistic=lr, kind=StatKind.CLR, beta0=float(beta0), naive_pvalue=pval
    )
    return tv, comps
