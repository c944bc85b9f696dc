"""Tail law of the conditional likelihood ratio statistic by quadrature.

Given the instrument-strength component Q_R, the null tail of the CLR
statistic reduces to a one-dimensional integral over the cosine u2
between the standardized score and the strength direction: a chi2(p)
tail probability at a u2-dependent threshold, weighted by
K4 * (1 - u2^2)^((p-3)/2).

Conditioning on a failed strength screen {||S||^2 <= lambda^2} confines
the chi2 variable to a u2-dependent interval; the conditional tail is
then the ratio of truncated tail mass to truncated total mass, with u2
values whose interval is empty contributing zero to both.  The screen
here is the non-randomized F-test: lambda is computed with no noise
term.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special, stats

from .errors import BranchError, CovarianceError, QuadratureError, TruncationError
from .model import (
    IVDataset,
    covariance_estimates,
    require_prepared,
    tsls_estimate,
    tsls_standard_error,
)
from .pretest import f_statistic, penalty_lambda
from .report import InferenceReport, invert_pvalue_curve
from .teststats import clr_components, clr_statistic_from_q

_MAX_REFINEMENTS = 6
_MIN_EVENT_MASS = 1e-12
# below this share of the problem's scale, the quadratic term in sqrt(q_U)
# is treated as absent and the screen event no longer depends on q_U
_D0_FLOOR = 1e-14


def k4_constant(p: int) -> float:
    """Normalizer of the cosine weight: Gamma(p/2) / (sqrt(pi) Gamma((p-1)/2))."""
    if p < 2:
        raise ValueError(f"p = {p}: the cosine-weight integral needs p >= 2")
    return math.exp(special.gammaln(p / 2.0) - special.gammaln((p - 1) / 2.0)) / math.sqrt(
        math.pi
    )


@dataclass(frozen=True)
class QuadratureConfig:
    panels: int = 2048
    endpoint_substitution: bool = True  # integrate over u2 = sin(theta)
    # the truncated integrand has square-root kinks where the screen
    # interval changes regime, so demanding much below 1e-6 stalls
    tol: float = 1e-6

    def __post_init__(self):
        if self.panels < 4 or self.panels % 2:
            raise ValueError("panels must be an even integer >= 4")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True)
class ClrTruncation:
    """Coefficients of ||S||^2 = d0*q_U + d1*u2*sqrt(q_R q_U) + d2*q_R.

    The screen-failure event {||S||^2 <= lambda_sq} is, for each fixed
    u2, an interval (possibly empty) in sqrt(q_U).
    """

    d0: float
    d1: float
    d2: float
    lambda_sq: float
    q_R: float
    p: int

    def __post_init__(self):
        if self.d0 < 0 or self.d2 < 0:
            raise ValueError("d0 and d2 are squared coefficients; must be >= 0")
        if self.lambda_sq < 0 or self.q_R < 0:
            raise ValueError("lambda_sq and q_R must be >= 0")
        if self.p < 2:
            raise ValueError("truncation is defined for p >= 2")


def truncation_from_estimates(
    omega_hat: np.ndarray, beta0: float, lambda_sq: float, q_r: float, p: int
) -> ClrTruncation:
    """Build the screen-event coefficients from the 2x2 reduced-form
    covariance at the tested null."""
    o = np.asarray(omega_hat, dtype=float)
    det = float(o[0, 0] * o[1, 1] - o[0, 1] ** 2)
    b_quad = float(o[0, 0] - 2.0 * beta0 * o[0, 1] + beta0**2 * o[1, 1])
    if det <= 0 or b_quad <= 0:
        raise CovarianceError("reduced-form covariance is singular at this beta0")
    alpha_coef = (o[0, 1] - beta0 * o[1, 1]) / math.sqrt(b_quad)
    d2 = det / b_quad
    return ClrTruncation(
        d0=alpha_coef**2,
        d1=2.0 * alpha_coef * math.sqrt(d2),
        d2=d2,
        lambda_sq=float(lambda_sq),
        q_R=float(q_r),
        p=int(p),
    )


def _chi2_interval_mass(lo, hi, p):
    """P(lo <= chi2(p) <= hi), switching to survival-function differences
    when the interval sits in the right tail to avoid cancellation."""
    lo = np.maximum(np.asarray(lo, dtype=float), 0.0)
    hi = np.maximum(np.asarray(hi, dtype=float), lo)
    right = lo >= p
    mass = np.where(
        right,
        stats.chi2.sf(lo, p) - stats.chi2.sf(hi, p),
        stats.chi2.cdf(hi, p) - stats.chi2.cdf(lo, p),
    )
    return np.clip(mass, 0.0, 1.0)


def _truncation_intervals(trunc: ClrTruncation, u2: np.ndarray):
    """Per-u2 interval [lo, hi] of the event in q_U, and a nonempty mask."""
    c = trunc.d2 * trunc.q_R - trunc.lambda_sq
    scale = trunc.d2 * trunc.q_R + trunc.lambda_sq + 1.0
    if trunc.d0 <= _D0_FLOOR * scale:
        if c <= 0:
            return (
                np.zeros_like(u2),
                np.full_like(u2, np.inf),
                np.ones(u2.shape, dtype=bool),
            )
        return np.zeros_like(u2), np.zeros_like(u2), np.zeros(u2.shape, dtype=bool)

    b = trunc.d1 * u2 * math.sqrt(trunc.q_R)
    disc = b * b - 4.0 * trunc.d0 * c
    ok = disc >= 0.0
    root = np.sqrt(np.maximum(disc, 0.0))
    x_lo = (-b - root) / (2.0 * trunc.d0)
    x_hi = (-b + root) / (2.0 * trunc.d0)
    ok &= x_hi > 0.0
    lo_q = np.maximum(x_lo, 0.0) ** 2
    hi_q = np.maximum(x_hi, 0.0) ** 2
    return lo_q, hi_q, ok


def _cosine_nodes(p: int, panels: int, substitute: bool):
    """u2 nodes, weight values, and uniform spacing for Simpson's rule.

    With the sin(theta) substitution the integrand is smooth for every
    p >= 2; without it the weight is singular at the endpoints for p = 2
    (kept only for cross-checks at p >= 3)."""
    if substitute:
        theta = np.linspace(-np.pi / 2.0, np.pi / 2.0, panels + 1)
        u2 = np.sin(theta)
        w = np.cos(theta) ** (p - 2)
        return u2, w, np.pi / panels
    u2 = np.linspace(-1.0, 1.0, panels + 1)
    with np.errstate(divide="ignore"):
        w = (1.0 - u2**2) ** ((p - 3) / 2.0)
    w[~np.isfinite(w)] = 0.0
    return u2, w, 2.0 / panels


def _tail_integrals(t, q_r, p, trunc, panels, substitute):
    """Simpson values of the (numerator, denominator) integrals plus a
    Richardson error estimate against the half-resolution grid."""
    u2, w, h = _cosine_nodes(p, panels, substitute)
    thresh = (q_r + t) / (1.0 + q_r * u2**2 / t)
    if trunc is None:
        num = stats.chi2.sf(thresh, p) * w
        den = w
    else:
        lo, hi, ok = _truncation_intervals(trunc, u2)
        den = np.where(ok, _chi2_interval_mass(lo, hi, p), 0.0) * w
        num = np.where(ok, _chi2_interval_mass(np.maximum(lo, thresh), hi, p), 0.0) * w
    i_num = integrate.simpson(num, dx=h)
    i_den = integrate.simpson(den, dx=h)
    err = (
        max(
            abs(i_num - integrate.simpson(num[::2], dx=2.0 * h)),
            abs(i_den - integrate.simpson(den[::2], dx=2.0 * h)),
        )
        / 15.0
    )
    return float(i_num), float(i_den), float(err)


def clr_tail(
    t: float,
    q_r: float,
    p: int,
    trunc: ClrTruncation = None,
    quad: QuadratureConfig = None,
) -> float:
    """P(statistic >= t | Q_R = q_r [, screen failed]) under the null.

    Computed as a ratio of two cosine integrals so the weight
    normalization cancels; with trunc absent the denominator is the
    plain weight mass and the result is the naive tail probability.
    """
    quad = quad if quad is not None else QuadratureConfig()
    k4 = k4_constant(p)
    if q_r < 0:
        raise ValueError(f"q_r = {q_r} must be >= 0")
    if trunc is not None:
        if abs(trunc.q_R - q_r) > 1e-8 * (1.0 + abs(q_r)) or trunc.p != p:
            raise TruncationError(
                "truncation was built for different (q_R, p) than requested"
            )
    if t <= 0.0:
        return 1.0

    panels = quad.panels
    if panels % 4:
        panels += 4 - panels % 4
    err = math.inf
    for _ in range(_MAX_REFINEMENTS + 1):
        i_num, i_den, err = _tail_integrals(
            t, q_r, p, trunc, panels, quad.endpoint_substitution
        )
        if err <= quad.tol:
            break
        panels *= 2
    else:
        raise QuadratureError(
            f"tail integral not converged: error {err:.3g} > tol {quad.tol:.3g} "
            f"at {panels // 2} panels"
        )
    if trunc is not None and k4 * i_den < _MIN_EVENT_MASS:
        raise TruncationError(
            f"conditioning event has mass {k4 * i_den:.3g} < {_MIN_EVENT_MASS}: "
            "the data could not have failed the strength screen with these inputs"
        )
    return float(np.clip(i_num / i_den, 0.0, 1.0))


def clr_conditional_inference(
    data: IVDataset,
    beta0: float,
    c0: float = 10.0,
    alpha: float = 0.05,
    quad: QuadratureConfig = None,
    n_points: int = 201,
) -> InferenceReport:
    """Weak-instrument branch: conditional and naive CLR p-values at
    beta0 plus grid-inverted confidence intervals.

    Applies only when the non-randomized screen failed (F < c0); the
    conditional law conditions on exactly that event.
    """
    require_prepared(data)
    if data.p < 2:
        raise BranchError("the weak-instrument tail law requires p >= 2 instruments")
    f_stat = f_statistic(data)
    if f_stat >= c0:
        raise BranchError(
            f"strength screen passed (F = {f_stat:.4g} >= C0 = {c0:.4g}); "
            "this branch conditions on failing it"
        )
    quad = quad if quad is not None else QuadratureConfig()
    lam2 = penalty_lambda(data, c0) ** 2
    est = covariance_estimates(data, beta0)
    parts: dict = {}

    def parts_at(b0: float):
        if b0 not in parts:
            comps = clr_components(data, b0, est)
            lr = clr_statistic_from_q(comps.q_u, comps.q_ur, comps.q_r)
            parts[b0] = (lr, comps.q_r)
        return parts[b0]

    def cond_at(b0: float) -> float:
        lr, q_r = parts_at(b0)
        trunc = truncation_from_estimates(est.omega_hat, b0, lam2, q_r, data.p)
        return clr_tail(lr, q_r, data.p, trunc=trunc, quad=quad)

    def naive_at(b0: float) -> float:
        lr, q_r = parts_at(b0)
        return clr_tail(lr, q_r, data.p, trunc=None, quad=quad)

    cond_p, naive_p = cond_at(float(beta0)), naive_at(float(beta0))
    center = tsls_estimate(data)
    halfwidth = 8.0 * tsls_standard_error(data)
    underflow_count = 0

    def cond_curve(xs):
        # far from the estimate the plug-in failure event can underflow;
        # such nulls are unanswerable, so the scan skips and stops there
        nonlocal underflow_count
        out = np.empty(np.size(xs))
        for k, x in enumerate(np.asarray(xs, dtype=float)):
            try:
                out[k] = cond_at(float(x))
            except TruncationError:
                underflow_count += 1
                out[k] = np.nan
        return out

    cond_ci, _, _, cond_info = invert_pvalue_curve(
        cond_curve,
        center,
        halfwidth,
        alpha,
        n_points=n_points,
    )
    naive_ci, _, _, naive_info = invert_pvalue_curve(
        lambda xs: np.array([naive_at(float(x)) for x in xs]),
        center,
        halfwidth,
        alpha,
        n_points=n_points,
    )
    return InferenceReport(
        beta0=float(beta0),
        conditional_pvalue=cond_p,
        naive_pvalue=naive_p,
        conditional_ci=cond_ci,
        naive_ci=naive_ci,
        diagnostics={
            "branch": "clr",
            "f_stat": f_stat,
            "c0": float(c0),
            "lambda_sq": lam2,
            "alpha": float(alpha),
            "truncation_renormalized": True,
            "quadrature": {"panels": quad.panels, "tol": quad.tol},
            "conditional_grid": cond_info,
            "naive_grid": naive_info,
            "mass_underflow_points": underflow_count,
        },
    )
