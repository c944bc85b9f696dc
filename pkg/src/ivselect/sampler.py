"""Conditional null law of the TSLS statistic given a passed screen,
its Gibbs sampler, and confidence intervals by test inversion.

The law lives on (t, d): t the standardized statistic, d > 0 the slack
of the randomized screen's solution in the active direction u.  Its
unnormalized log density is

    -t^2 / (2 W_T) + log g(-W_ST t / W_T + (d + lam) u - O)
                   + (p - 1) log(d + lam),

so the argument of g is linear in (t, d).  With Gaussian randomization
both full conditionals are exact: Gaussian in t; in d a truncated normal
tilted by (d + lam)^(p-1), drawn by inverse CDF when p = 1 and by slice
steps (the tilted density is log-concave) when p > 1.  A general
randomization log-density falls back to Metropolis-within-Gibbs with
Robbins-Monro step adaptation during burn-in.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .errors import BranchError, CovarianceError, DegenerateFirstStageError, SamplerError
from .model import (
    IVDataset,
    ModelEstimates,
    covariance_estimates,
    require_prepared,
    tsls_estimate,
    tsls_standard_error,
)
from .pretest import PretestOutcome, RandomizationLaw
from .report import InferenceReport, Interval, invert_pvalue_curve
from .teststats import tsls_stat

_SLICE_MAX_EXPAND = 512
_SLICE_MAX_SHRINK = 256


@dataclass(frozen=True)
class SamplerConfig:
    n_samples: int = 10000
    burn_in: int = 2000
    step_t: float = 1.0
    step_d: float = 1.0
    adapt_target: float = 0.44
    seed: int = 0
    chains: int = 4

    def __post_init__(self):
        if self.n_samples < 1 or self.burn_in < 0:
            raise ValueError("need n_samples >= 1 and burn_in >= 0")
        if self.step_t <= 0 or self.step_d <= 0:
            raise ValueError("initial step sizes must be positive")
        if not 0.2 <= self.adapt_target <= 0.6:
            raise ValueError("adapt_target outside [0.2, 0.6]")
        if self.chains < 1:
            raise ValueError("need at least one chain")


@dataclass(frozen=True)
class ConditionalLaw:
    """Unnormalized conditional density of (t, d) given screen passage,
    the active direction u, and the statistic's complement O."""

    w_t: float
    w_st: np.ndarray
    o: np.ndarray
    u: np.ndarray
    lam: float
    g_log_density: Callable[[np.ndarray], float]
    jacobian_exponent: int
    gaussian_scale: Optional[float]
    t_obs: float
    d_obs: float

    def __post_init__(self):
        for name in ("w_st", "o", "u"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.w_st.shape != self.u.shape or self.o.shape != self.u.shape:
            raise ValueError("w_st, o, u must share one shape (p,)")
        if self.w_t <= 0:
            raise ValueError("w_t must be positive")
        if self.lam < 0 or self.jacobian_exponent < 0:
            raise ValueError("lam and jacobian_exponent must be >= 0")
        if abs(float(self.u @ self.u) - 1.0) > 1e-8:
            raise ValueError("u must be a unit vector")
        if self.d_obs <= 0:
            raise ValueError("observed slack d_obs must be positive")
        if not np.isfinite(self.log_density(self.t_obs, self.d_obs)):
            raise SamplerError("law has non-finite density at the observed state")

    @property
    def slope(self) -> np.ndarray:
        """Coefficient of t inside g's argument."""
        return -self.w_st / self.w_t

    @property
    def offset(self) -> np.ndarray:
        """State-free part of g's argument."""
        return self.lam * self.u - self.o

    def g_argument(self, t: float, d: float) -> np.ndarray:
        return self.slope * t + self.u * d + self.offset

    def log_density(self, t: float, d: float) -> float:
        if d <= 0:
            return -math.inf
        val = -0.5 * t * t / self.w_t + float(self.g_log_density(self.g_argument(t, d)))
        if self.jacobian_exponent:
            val += self.jacobian_exponent * math.log(d + self.lam)
        return val


@dataclass(frozen=True)
class ExactLaw:
    """Finite-sample law over (S, d) with the active direction u held
    fixed: N(S; mean, var_s I) * g((d+lam)u - S) * (d+lam)^(p-1) on d>0.

    Used by the harness to validate the asymptotic (t, d) law; mean and
    var_s come from supplied (not estimated) first-stage parameters.
    """

    mean: np.ndarray
    var_s: float
    u: np.ndarray
    lam: float
    g_log_density: Callable[[np.ndarray], float]
    jacobian_exponent: int
    gaussian_scale: Optional[float]

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))
        if self.var_s <= 0:
            raise CovarianceError("var_s must be positive")
        if self.lam < 0 or self.jacobian_exponent < 0:
            raise ValueError("lam and jacobian_exponent must be >= 0")

    def log_density(self, s: np.ndarray, d: float) -> float:
        if d <= 0:
            return -math.inf
        s = np.asarray(s, dtype=float)
        diff = s - self.mean
        val = -0.5 * float(diff @ diff) / self.var_s
        val += float(self.g_log_density((d + self.lam) * self.u - s))
        if self.jacobian_exponent:
            val += self.jacobian_exponent * math.log(d + self.lam)
        return val


def build_law_tsls(
    data: IVDataset, beta0: float, pretest: PretestOutcome, est: ModelEstimates
) -> ConditionalLaw:
    """Conditional (t, d) law for testing beta = beta0 after the screen
    passed.  est must carry Sigma_hat evaluated at this beta0."""
    require_prepared(data)
    if not pretest.passed:
        raise BranchError("screen did not pass; this law conditions on passing")
    s = data.s_stat
    s_norm2 = float(s @ s)
    if s_norm2 <= 0:
        raise DegenerateFirstStageError("S = 0: nothing to condition on")
    s11 = float(est.sigma_hat[0, 0])
    s12 = float(est.sigma_hat[0, 1])
    w_st = s12 * s / math.sqrt(s11 * s_norm2)
    t_obs = tsls_stat(data, beta0, est).statistic
    g = RandomizationLaw(scale=pretest.scale, seed=pretest.seed)
    return ConditionalLaw(
        w_t=1.0,
        w_st=w_st,
        o=s - w_st * t_obs,
        u=pretest.u,
        lam=pretest.lam,
        g_log_density=g.log_density,
        jacobian_exponent=data.p - 1,
        gaussian_scale=pretest.scale,
        t_obs=t_obs,
        d_obs=pretest.d,
    )


def exact_law(
    data: IVDataset, beta0: float, pretest: PretestOutcome, nuisance: ModelEstimates
) -> ExactLaw:
    """Finite-sample (S, d) law with supplied first-stage nuisance
    parameters (gamma in nuisance.gamma_hat, error covariance in
    nuisance.sigma_hat).  The strength stage does not involve beta0; the
    parameter is kept so call sites mirror build_law_tsls."""
    require_prepared(data)
    del beta0
    gamma = np.asarray(nuisance.gamma_hat, dtype=float)
    if gamma.shape != (data.p,):
        raise ValueError(f"nuisance gamma has shape {gamma.shape}, want ({data.p},)")
    g = RandomizationLaw(scale=pretest.scale, seed=pretest.seed)
    return ExactLaw(
        mean=data.ztz_sqrt @ gamma,
        var_s=float(nuisance.sigma_hat[1, 1]),
        u=pretest.u,
        lam=pretest.lam,
        g_log_density=g.log_density,
        jacobian_exponent=data.p - 1,
        gaussian_scale=pretest.scale,
    )


def _generator(seed: int, *tags: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([int(seed) & (2**63 - 1), *map(int, tags)]))
    )


def _truncated_normal(rng, mean, sd, size):
    """Exact N(mean, sd^2) draw conditioned on being positive."""
    a = (0.0 - mean) / sd
    uu = np.clip(rng.random(size), 1e-16, 1.0 - 1e-16)
    return stats.truncnorm.ppf(uu, a, np.inf, loc=mean, scale=sd)


def _logf_d(x, mvec, c, lam, jac):
    """Log density of d | t up to constants, vectorized over rows."""
    with np.errstate(divide="ignore", invalid="ignore"):
        val = -0.5 * ((x - mvec) / c) ** 2
        if jac:
            val = val + jac * np.log(np.maximum(x + lam, 1e-300))
    return np.where(x > 0.0, val, -np.inf)


def _slice_step_d(rng, d, mvec, c, lam, jac):
    """One slice-sampling update of every row's d coordinate."""
    m = d.shape[0]
    y = _logf_d(d, mvec, c, lam, jac) - rng.exponential(size=m)
    w = np.where(c > 0, c, 1.0)
    left = np.maximum(d - w * rng.random(m), 0.0)
    right = left + w
    for _ in range(_SLICE_MAX_EXPAND):
        grow = (left > 0.0) & (_logf_d(left, mvec, c, lam, jac) > y)
        if not grow.any():
            break
        left = np.where(grow, np.maximum(left - w, 0.0), left)
    else:
        raise SamplerError("slice bracket failed to expand left")
    for _ in range(_SLICE_MAX_EXPAND):
        grow = _logf_d(right, mvec, c, lam, jac) > y
        if not grow.any():
            break
        right = np.where(grow, right + w, right)
    else:
        raise SamplerError("slice bracket failed to expand right")

    out = d.copy()
    todo = np.ones(m, dtype=bool)
    for _ in range(_SLICE_MAX_SHRINK):
        if not todo.any():
            break
        x = left + rng.random(m) * (right - left)
        good = _logf_d(x, mvec, c, lam, jac) > y
        accept = todo & good
        out[accept] = x[accept]
        todo &= ~good
        lower = todo & (x < d)
        upper = todo & ~lower
        left = np.where(lower, x, left)
        right = np.where(upper, x, right)
    else:
        if todo.any():
            raise SamplerError("slice shrinkage failed to terminate")
    return out


def _gibbs_gaussian(rng, a, u, e, lam, c, jac, t0, d0, n_samples, burn_in,
                    t_ref=None, collect=False):
    """Batched exact Gibbs for m rows sharing dimension p and exponent jac.

    a, u, e: (m, p); lam, c, t0, d0, t_ref: (m,).  Returns tail counts
    against t_ref and, when collect, the full (m, n_samples) draw arrays.
    """
    m, _ = a.shape
    anorm2 = np.einsum("ij,ij->i", a, a)
    prec = c**2 + anorm2
    sd_t = c / np.sqrt(prec)
    t = np.asarray(t0, dtype=float).copy()
    d = np.asarray(d0, dtype=float).copy()
    if np.any(d <= 0):
        raise SamplerError("initial d must be positive")
    ge = np.zeros(m)
    le = np.zeros(m)
    t_draws = np.empty((m, n_samples)) if collect else None
    d_draws = np.empty((m, n_samples)) if collect else None
    for k in range(burn_in + n_samples):
        z = u * d[:, None] + e
        mean_t = -np.einsum("ij,ij->i", a, z) / prec
        t = mean_t + sd_t * rng.standard_normal(m)
        mvec = -np.einsum("ij,ij->i", u, a * t[:, None] + e)
        if jac == 0:
            d = _truncated_normal(rng, mvec, c, m)
        else:
            d = _slice_step_d(rng, d, mvec, c, lam, jac)
        i = k - burn_in
        if i >= 0:
            if t_ref is not None:
                ge += t >= t_ref
                le += t <= t_ref
            if collect:
                t_draws[:, i] = t
                d_draws[:, i] = d
    return {"ge": ge, "le": le, "t": t_draws, "d": d_draws}


def _metropolis_chain(law, config, t0, d0, rng, collect=True, t_ref=None):
    """Coordinate Metropolis for a general randomization density; step
    sizes adapt on the log scale during burn-in, then freeze."""
    t, d = float(t0), float(d0)
    lp = law.log_density(t, d)
    if not np.isfinite(lp):
        raise SamplerError("log-density not finite at initialization")
    log_st, log_sd = math.log(config.step_t), math.log(config.step_d)
    target = config.adapt_target
    accepted_burn = 0
    acc_t = acc_d = 0
    draws = np.empty(config.n_samples) if collect else None
    d_draws = np.empty(config.n_samples) if collect else None
    ge = le = 0
    for k in range(config.burn_in + config.n_samples):
        in_burn = k < config.burn_in
        gain = (k + 1) ** -0.6

        cand = t + math.exp(log_st) * rng.standard_normal()
        cand_lp = law.log_density(cand, d)
        ok = math.log(rng.random()) < cand_lp - lp
        if ok:
            t, lp = cand, cand_lp
        if in_burn:
            accepted_burn += ok
            log_st += gain * (float(ok) - target)
        else:
            acc_t += ok

        cand = d + math.exp(log_sd) * rng.standard_normal()
        if cand <= 0:
            ok = False
        else:
            cand_lp = law.log_density(t, cand)
            ok = math.log(rng.random()) < cand_lp - lp
        if ok:
            d, lp = cand, cand_lp
        if in_burn:
            accepted_burn += ok
            log_sd += gain * (float(ok) - target)
        else:
            acc_d += ok

        if k == config.burn_in - 1 and accepted_burn == 0:
            raise SamplerError("zero acceptance over burn-in: step sizes mis-scaled")
        if k >= config.burn_in:
            i = k - config.burn_in
            if collect:
                draws[i] = t
                d_draws[i] = d
            if t_ref is not None:
                ge += t >= t_ref
                le += t <= t_ref
    n = config.n_samples
    return {
        "t": draws,
        "d": d_draws,
        "ge": ge,
        "le": le,
        "acceptance_t": acc_t / n,
        "acceptance_d": acc_d / n,
        "step_t": math.exp(log_st),
        "step_d": math.exp(log_sd),
    }


def gibbs_sample(
    law: ConditionalLaw,
    config: SamplerConfig = None,
    init_t: float = None,
    init_d: float = None,
) -> np.ndarray:
    """One chain of post-burn-in t draws from the conditional law.

    Defaults initialize at the observed state (t_obs, d_obs)."""
    config = config if config is not None else SamplerConfig()
    t0 = law.t_obs if init_t is None else float(init_t)
    d0 = law.d_obs if init_d is None else float(init_d)
    if d0 <= 0:
        raise SamplerError("init_d must be positive")
    if not np.isfinite(law.log_density(t0, d0)):
        raise SamplerError("log-density not finite at initialization")
    rng = _generator(config.seed, 1)
    if law.gaussian_scale is not None:
        out = _gibbs_gaussian(
            rng,
            law.slope[None, :],
            law.u[None, :],
            law.offset[None, :],
            np.array([law.lam]),
            np.array([law.gaussian_scale]),
            law.jacobian_exponent,
            np.array([t0]),
            np.array([d0]),
            config.n_samples,
            config.burn_in,
            collect=True,
        )
        return out["t"][0]
    out = _metropolis_chain(law, config, t0, d0, rng, collect=True)
    return out["t"]


def sample_paths(law: ConditionalLaw, config: SamplerConfig = None):
    """Post-burn-in (t, d) paths for every configured chain.

    Returns two arrays of shape (chains, n_samples); chains start at the
    observed state and differ only through their random streams."""
    config = config if config is not None else SamplerConfig()
    m = config.chains
    if law.d_obs <= 0:
        raise SamplerError("observed d must be positive")
    if law.gaussian_scale is not None:
        rng = _generator(config.seed, 4)
        out = _gibbs_gaussian(
            rng,
            np.repeat(law.slope[None, :], m, axis=0),
            np.repeat(law.u[None, :], m, axis=0),
            np.repeat(law.offset[None, :], m, axis=0),
            np.full(m, law.lam),
            np.full(m, law.gaussian_scale),
            law.jacobian_exponent,
            np.full(m, law.t_obs),
            np.full(m, law.d_obs),
            config.n_samples,
            config.burn_in,
            collect=True,
        )
        return out["t"], out["d"]
    t_rows = np.empty((m, config.n_samples))
    d_rows = np.empty((m, config.n_samples))
    for c in range(m):
        rng = _generator(config.seed, 4, c)
        out = _metropolis_chain(law, config, law.t_obs, law.d_obs, rng, collect=True)
        t_rows[c] = out["t"]
        d_rows[c] = out["d"]
    return t_rows, d_rows


def draws_csv(t_paths: np.ndarray, d_paths: np.ndarray) -> str:
    """Chain draws as comma-separated text, columns chain, iter, t, d."""
    t_paths = np.atleast_2d(np.asarray(t_paths, dtype=float))
    d_paths = np.atleast_2d(np.asarray(d_paths, dtype=float))
    if t_paths.shape != d_paths.shape:
        raise ValueError("t and d paths must share a shape")
    lines = ["chain,iter,t,d"]
    for c in range(t_paths.shape[0]):
        for i in range(t_paths.shape[1]):
            lines.append(
                "%d,%d,%s,%s"
                % (c, i, repr(float(t_paths[c, i])), repr(float(d_paths[c, i])))
            )
    return "\n".join(lines) + "\n"


def dump_draws(path, law: ConditionalLaw, config: SamplerConfig = None) -> None:
    """Sample the configured chains and write one file row per retained draw."""
    t_paths, d_paths = sample_paths(law, config)
    with open(path, "w") as fh:
        fh.write(draws_csv(t_paths, d_paths))


def conditional_pvalue(draws: np.ndarray, t_obs: float, sided: str = "upper") -> float:
    """Monte Carlo tail probability of t_obs among the draws."""
    draws = np.asarray(draws, dtype=float)
    if draws.size < 1:
        raise ValueError("need at least one draw")
    upper = float(np.mean(draws >= t_obs))
    lower = float(np.mean(draws <= t_obs))
    key = sided.replace("-", "_").lower()
    if key == "upper":
        return upper
    if key == "lower":
        return lower
    if key == "two_sided":
        return min(1.0, 2.0 * min(upper, lower))
    raise ValueError(f"sided must be upper, lower, or two_sided; got {sided!r}")


def _law_rows(laws):
    """Stack per-law arrays for the batched Gaussian engine."""
    a = np.stack([law.slope for law in laws])
    u = np.stack([law.u for law in laws])
    e = np.stack([law.offset for law in laws])
    lam = np.array([law.lam for law in laws])
    c = np.array([law.gaussian_scale for law in laws])
    t0 = np.array([law.t_obs for law in laws])
    d0 = np.array([law.d_obs for law in laws])
    return a, u, e, lam, c, t0, d0


def _pooled_pvalues(laws, config, tags=()):
    """Upper and two-sided conditional p-values for independent Gaussian
    laws, pooling config.chains chains per law at its own t_obs."""
    if any(law.gaussian_scale is None for law in laws):
        raise SamplerError("batched path requires Gaussian randomization")
    jac = laws[0].jacobian_exponent
    if any(law.jacobian_exponent != jac for law in laws):
        raise ValueError("all laws in one batch must share the jacobian exponent")
    a, u, e, lam, c, t0, d0 = _law_rows(laws)
    ch = config.chains
    rep = lambda arr: np.repeat(arr, ch, axis=0)
    rng = _generator(config.seed, 2, *tags)
    out = _gibbs_gaussian(
        rng, rep(a), rep(u), rep(e), rep(lam), rep(c), jac, rep(t0), rep(d0),
        config.n_samples, config.burn_in, t_ref=rep(t0),
    )
    n_tot = config.n_samples * ch
    ge = out["ge"].reshape(len(laws), ch).sum(axis=1) / n_tot
    le = out["le"].reshape(len(laws), ch).sum(axis=1) / n_tot
    two = np.minimum(1.0, 2.0 * np.minimum(ge, le))
    return ge, two


def effective_sample_size(x: np.ndarray) -> float:
    """ESS from the initial monotone positive sequence of autocorrelation
    pair sums, capped at the chain length."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or float(np.var(x)) == 0.0:
        return float(n)
    xc = x - x.mean()
    nfft = 1 << int(math.ceil(math.log2(2 * n)))
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conjugate(f))[:n] / n
    if acov[0] <= 0:
        return float(n)
    rho = acov / acov[0]
    tau = 0.0
    prev = math.inf
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        pair = min(pair, prev)
        prev = pair
        tau += 2.0 * pair
    tau -= 1.0
    if tau <= 0:
        return float(n)
    return float(min(n, n / tau))


def geweke_zscore(x: np.ndarray, first: float = 0.1, last: float = 0.5) -> float:
    """Z-score of the mean difference between the first and last chain
    segments, with autocorrelation-adjusted variances."""
    x = np.asarray(x, dtype=float)
    n = x.size
    a = x[: max(int(first * n), 2)]
    b = x[-max(int(last * n), 2):]
    va = float(np.var(a, ddof=1)) / effective_sample_size(a)
    vb = float(np.var(b, ddof=1)) / effective_sample_size(b)
    if va + vb == 0:
        return 0.0
    return float((a.mean() - b.mean()) / math.sqrt(va + vb))


def wald_interval(data: IVDataset, alpha: float = 0.05) -> Interval:
    """Naive TSLS confidence interval beta_hat +- z * SE."""
    beta_hat = tsls_estimate(data)
    se = tsls_standard_error(data)
    z = stats.norm.ppf(1.0 - alpha / 2.0)
    return Interval(beta_hat - z * se, beta_hat + z * se)


def invert_ci(
    data: IVDataset,
    pretest: PretestOutcome,
    alpha: float = 0.05,
    grid: np.ndarray = None,
    config: SamplerConfig = None,
    null_value: float = 0.0,
) -> InferenceReport:
    """Confidence interval as the hull of nulls whose two-sided
    conditional p-value stays >= alpha, plus p-values at null_value.

    The screen's omega and u are held fixed across the grid; the
    statistic's complement O and covariance W_ST are rebuilt per tested
    null.  The grid argument sets the initial span and resolution
    (default 201 points over beta_hat +- 8 SE); expansion proceeds until
    both endpoints are excluded or reported unbounded.
    """
    require_prepared(data)
    if not pretest.passed:
        raise BranchError("screen did not pass; invert the weak-instrument branch instead")
    if pretest.scale is None or pretest.scale <= 0:
        raise SamplerError("inversion needs the Gaussian randomization recorded by the screen")
    config = config if config is not None else SamplerConfig()
    beta_hat = tsls_estimate(data)
    se = tsls_standard_error(data)
    if grid is None:
        center, halfwidth, n_points = beta_hat, 8.0 * se, 201
    else:
        grid = np.asarray(grid, dtype=float)
        if grid.size < 3 or not (grid.min() <= beta_hat <= grid.max()):
            raise ValueError("grid needs >= 3 points and must cover beta_hat")
        center = 0.5 * (grid.min() + grid.max())
        halfwidth = 0.5 * (grid.max() - grid.min())
        n_points = grid.size

    calls = [0]

    def pfn(xs):
        laws = [
            build_law_tsls(data, b0, pretest, covariance_estimates(data, b0))
            for b0 in xs
        ]
        calls[0] += 1
        _, two = _pooled_pvalues(laws, config, tags=(calls[0],))
        return two

    interval, _, _, grid_info = invert_pvalue_curve(
        pfn, center, halfwidth, alpha, n_points=n_points
    )

    est0 = covariance_estimates(data, null_value)
    naive = tsls_stat(data, null_value, est0)
    law0 = build_law_tsls(data, null_value, pretest, est0)
    a, u, e, lam, c, t0, d0 = _law_rows([law0] * config.chains)
    out = _gibbs_gaussian(
        _generator(config.seed, 3), a, u, e, lam, c, law0.jacobian_exponent,
        t0, d0, config.n_samples, config.burn_in, t_ref=t0, collect=True,
    )
    pooled = out["t"].ravel()
    cond_p = conditional_pvalue(pooled, law0.t_obs, "two_sided")
    return InferenceReport(
        beta0=float(null_value),
        conditional_pvalue=cond_p,
        naive_pvalue=naive.naive_pvalue,
        conditional_ci=interval,
        naive_ci=wald_interval(data, alpha),
        diagnostics={
            "branch": "tsls",
            "alpha": float(alpha),
            "beta_tsls": beta_hat,
            "standard_error": se,
            "chains": config.chains,
            "n_samples": config.n_samples,
            "burn_in": config.burn_in,
            "method": "exact_gaussian" if law0.gaussian_scale is not None else "metropolis",
            "ess": sum(effective_sample_size(row) for row in out["t"]),
            "geweke_z": [geweke_zscore(row) for row in out["t"]],
            "grid": grid_info,
        },
    )
