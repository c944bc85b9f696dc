"""First-stage F-test and its randomized convex reformulation.

The screening rule F >= C0 is algebraically the event ||S|| >= lambda
with lambda^2 = C0 * (p/(n-p)) * RSS, which is the no-randomization case
of the penalized program

    min_v  0.5 ||v - S||^2 + lambda ||v||_2 - omega'v,   omega ~ N(0, c^2 I).

The program has a closed-form solution (the l2 prox applied to S + omega);
its polar decomposition v_hat = d * u is what conditional inference
conditions on.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFirstStageError, DimensionError
from .model import IVDataset, require_prepared


@dataclass(frozen=True)
class RandomizationLaw:
    """Gaussian randomization omega ~ N(0, scale^2 I_p).

    Draws come from a counter-based generator (Philox) keyed by seed, so
    a recorded (seed, scale) pair reproduces omega bit-exactly.
    """

    scale: float
    seed: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"randomization scale must be positive, got {self.scale}")

    def draw(self, p: int) -> np.ndarray:
        rng = np.random.Generator(np.random.Philox(self.seed))
        return rng.normal(0.0, self.scale, size=p)

    def log_density(self, x: np.ndarray) -> float:
        """Unnormalized log density of omega at x."""
        x = np.asarray(x, dtype=float)
        return float(-0.5 * (x @ x) / self.scale**2)


@dataclass(frozen=True)
class PretestOutcome:
    """Everything the conditional analyses need to replay the pre-test."""

    f_stat: float
    threshold_c0: float
    lam: float
    omega: np.ndarray
    v_hat: np.ndarray
    d: float
    u: np.ndarray
    passed: bool
    scale: float
    seed: int


def f_statistic(data: IVDataset) -> float:
    """First-stage F: [sum (Z_i'gamma_hat)^2 / p] / [RSS / (n-p)]."""
    require_prepared(data)
    rss = data.first_stage_rss
    if rss <= 1e-12 * max(float(data.D @ data.D), 1e-300):
        raise DegenerateFirstStageError(
            "first-stage residual sum of squares is zero (perfect fit)"
        )
    return (data.d_pz_d / data.p) / (rss / (data.n - data.p))


def penalty_lambda(data: IVDataset, c0: float) -> float:
    """Penalty level lambda = sqrt(C0 * (p/(n-p)) * RSS).

    By construction I(F >= C0) = I(||S|| >= lambda).
    """
    if c0 < 0:
        raise ValueError(f"threshold C0 must be nonnegative, got {c0}")
    require_prepared(data)
    return float(np.sqrt(c0 * (data.p / (data.n - data.p)) * data.first_stage_rss))


def default_scale(data: IVDataset) -> float:
    """Default randomization standard deviation 0.5*sqrt(n/(n-1))*std(S).

    std is over the p components of S.  With a single instrument that
    spread is identically zero, so fall back to the typical size of one
    component's noise, sqrt(Omega_hat_22) (the first-stage error
    variance), which the componentwise spread estimates when p is large.
    """
    require_prepared(data)
    n = data.n
    s = data.s_stat
    base = float(np.std(s))
    if base <= 0:
        resid = data.resid_z(data.D)
        base = float(np.sqrt(resid @ resid / (n - data.p)))
    if base <= 0:
        raise DegenerateFirstStageError("cannot set a randomization scale: S and the first-stage residuals are both degenerate")
    return 0.5 * np.sqrt(n / (n - 1)) * base


def solve_randomized(
    s: np.ndarray, lam: float, law: RandomizationLaw, c0: float = 10.0, f_stat: float = float("nan")
) -> PretestOutcome:
    """Solve min_v 0.5||v - S||^2 + lambda ||v||_2 - omega'v for a fresh omega.

    The minimizer is the l2-norm prox at w = S + omega:
    v_hat = (1 - lambda/||w||) w when ||w|| > lambda, else 0.
    Ties ||w|| = lambda resolve to not-passed.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 1:
        raise DimensionError("S must be a vector")
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    p = s.shape[0]
    omega = law.draw(p)
    w = s + omega
    norm_w = float(np.linalg.norm(w))
    if norm_w > lam:
        d = norm_w - lam
        u = w / norm_w
        v_hat = d * u
        passed = True
    else:
        d = 0.0
        u = np.zeros(p)
        v_hat = np.zeros(p)
        passed = False
    return PretestOutcome(
        f_stat=float(f_stat),
        threshold_c0=float(c0),
        lam=float(lam),
        omega=omega,
        v_hat=v_hat,
        d=d,
        u=u,
        passed=passed,
        scale=law.scale,
        seed=law.seed,
    )


def run_pretest(
    data: IVDataset,
    c0: float = 10.0,
    law: RandomizationLaw | None = None,
    seed: int = 0,
    scale: float | None = None,
) -> PretestOutcome:
    """Convenience wrapper: F statistic, penalty, and randomized program
    for a prepared dataset."""
    if law is None:
        law = RandomizationLaw(
            scale=default_scale(data) if scale is None else scale, seed=seed
        )
    lam = penalty_lambda(data, c0)
    return solve_randomized(data.s_stat, lam, law, c0=c0, f_stat=f_statistic(data))
