"""Analytic mean-square bounds and their Monte Carlo verification.

Implements the incremental-stability bound constants for continuous and
discrete time, the steady-state objective identities that justify the
condition-number program, the L2-gain inequality under deterministic
disturbances, and helpers that compare each bound against ensemble
statistics. Eigen-extreme constants are always computed from logged
metrics rather than assumed.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import programs


class BoundUndefinedError(ValueError):
    """The requested bound does not exist for these constants."""


@dataclass
class ContractionConstants:
    """Constants of the continuous-time incremental stability bound.

    The effective rate gamma1 degrades from the deterministic rate
    gamma_c by the noise-metric interaction; eps is the free splitting
    constant of that trade-off.
    """

    m_lower: float
    m_upper: float
    m_x: float
    m_xx: float
    g1: float
    g2: float
    gamma_c: float
    eps: float

    def __post_init__(self):
        if not 0 < self.m_lower <= self.m_upper:
            raise ValueError("need 0 < m_lower <= m_upper")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        for name in ("m_x", "m_xx", "g1", "g2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def g_squared(self):
        return self.g1**2 + self.g2**2

    @property
    def gamma1(self):
        return self.gamma_c - (self.g_squared / (2.0 * self.m_lower)) * (
            self.eps * self.m_x + self.m_xx / 2.0)

    @property
    def C_c(self):
        return (self.m_upper / self.m_lower
                + self.m_x / (self.eps * self.m_lower)) * self.g_squared


@dataclass
class DiscreteConstants:
    """Constants of the discrete-time incremental stability bound."""

    m_lower: float
    m_upper: float
    gamma_d: float
    gamma2: float
    g1d: float
    g2d: float

    def __post_init__(self):
        if not 0 < self.m_lower <= self.m_upper:
            raise ValueError("need 0 < m_lower <= m_upper")
        if not 0 < self.gamma_d < 1:
            raise ValueError("gamma_d must lie in (0, 1)")
        if not 0 < self.gamma2 < 1:
            raise ValueError("gamma2 must lie in (0, 1)")
        limit = 1.0 - (self.m_upper / self.m_lower) * (1.0 - self.gamma_d)
        if self.gamma2 > limit + 1e-12:
            raise ValueError(
                f"gamma2={self.gamma2} exceeds 1 - (m_upper/m_lower)(1-gamma_d)={limit}")

    @property
    def C_d(self):
        return (self.m_upper / self.m_lower) * (self.g1d**2 + self.g2d**2)

    @property
    def tilde_gamma_d(self):
        return 1.0 - self.gamma2


def continuous_mse_bound(c, V0_expect, t):
    """C_c/(2 gamma1) + E[V(0)] exp(-2 gamma1 t) / m_lower.

    Raises BoundUndefinedError when gamma1 <= 0, i.e. the noise constants
    destroy contraction.
    """
    g1 = c.gamma1
    if g1 <= 0:
        raise BoundUndefinedError(f"gamma1={g1} is not positive")
    t = np.asarray(t, dtype=float)
    return c.C_c / (2.0 * g1) + V0_expect * np.exp(-2.0 * g1 * t) / c.m_lower


def discrete_mse_bound(c, V0, k):
    """((1 - tg^k)/(1 - tg)) C_d + tg^k V0 / m_lower with tg = 1 - gamma2."""
    tg = c.tilde_gamma_d
    if not 0 < tg < 1:
        raise ValueError(f"tilde_gamma_d={tg} outside (0, 1)")
    k = np.asarray(k, dtype=float)
    return (1.0 - tg**k) / (1.0 - tg) * c.C_d + tg**k * V0 / c.m_lower


def discrete_to_continuous(dt, gamma2, C_d):
    """Map discrete constants to the continuous rate/offset pair.

    Returns (gamma2/dt, C_d/dt): a sampled controller behaves like a
    continuous one with contraction rate 2*gamma1 = gamma2/dt, and the
    offset C_d/dt is dt-free when the discrete diffusion scales as
    sqrt(dt) times the continuous one.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    return gamma2 / dt, C_d / dt


def tracking_mse_bound(alpha, m_lower, m_upper, m_x, eps, g_u, V0, t):
    """Tracking-error bound C/(2 alpha) + E[V(0)] exp(-2 alpha t)/m_lower.

    C is the steady-state noise offset from noise_offset_constants.
    """
    if alpha <= 0:
        raise BoundUndefinedError(f"alpha={alpha} is not positive")
    if m_lower <= 0 or m_upper < m_lower:
        raise ValueError("need 0 < m_lower <= m_upper")
    C = (m_upper / m_lower) * g_u**2 + m_x * g_u**2 / (eps * m_lower)
    t = np.asarray(t, dtype=float)
    return C / (2.0 * alpha) + V0 * np.exp(-2.0 * alpha * t) / m_lower


def noise_offset_constants(m_lower, m_upper, m_x, m_xx, g_u, eps):
    """The constants C and 2 alpha_g entering the tracking bound.

    C = (m_upper/m_lower) g_u^2 + m_x g_u^2/(eps m_lower) and
    2 alpha_g = g_u^2 (m_x eps + m_xx/2); c1 = m_x/eps is the objective
    weight they induce.
    """
    if m_lower <= 0 or m_upper < m_lower or eps <= 0:
        raise ValueError("need 0 < m_lower <= m_upper and eps > 0")
    C = (m_upper / m_lower) * g_u**2 + m_x * g_u**2 / (eps * m_lower)
    two_alpha_g = g_u**2 * (m_x * eps + m_xx / 2.0)
    return {"C": C, "two_alpha_g": two_alpha_g, "c1": m_x / eps}


def steady_state_objective(W, c):
    """Both sides of the greedy steady-state objective inequality.

    Returns (rhs, lhs) with rhs = kappa(W) + c kappa(W)^2 lambda_min(W)
    and lhs = lambda_max(M)/lambda_min(M) + c/lambda_min(M) for M = W^-1;
    lhs <= rhs holds for every positive definite W.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    ev = np.linalg.eigvalsh(0.5 * (W + W.T))
    if ev[0] <= 0:
        raise ValueError("W must be positive definite")
    kappa = ev[-1] / ev[0]
    rhs = kappa + c * kappa**2 * ev[0]
    # M = W^-1 swaps and inverts the extreme eigenvalues
    lam_min_M, lam_max_M = 1.0 / ev[-1], 1.0 / ev[0]
    lhs = lam_max_M / lam_min_M + c / lam_min_M
    return float(rhs), float(lhs)


def lagrangian_steady_state_objective(H, M, ell_x, eps_ell):
    """Both sides of the composite-metric objective inequality.

    Returns (rhs, lhs) with c2 = lambda_max(H) + ell_x/eps_ell,
    rhs = kappa(W) + c2 kappa(W)^2 lambda_min(W) for W = M^-1 and
    lhs = (lambda_max(H+M) + ell_x/eps_ell)/lambda_min(H+M).
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    M = np.atleast_2d(np.asarray(M, dtype=float))
    c2 = float(np.linalg.eigvalsh(0.5 * (H + H.T))[-1]) + ell_x / eps_ell
    W = np.linalg.inv(M)
    ev = np.linalg.eigvalsh(0.5 * (W + W.T))
    kappa = ev[-1] / ev[0]
    rhs = kappa + c2 * kappa**2 * ev[0]
    hm = np.linalg.eigvalsh(0.5 * (H + H.T) + 0.5 * (M + M.T))
    lhs = (hm[-1] + ell_x / eps_ell) / hm[0]
    return float(rhs), float(lhs)


def optimal_epsilon(m_lower, m_upper, m_x, m_xx, g_squared, gamma_c,
                    bracket=(1e-6, 1e6)):
    """Splitting constant minimizing the steady-state bound C_c/(2 gamma1).

    The stationarity condition d(C_c/(2 gamma1))/d eps = 0 reduces to
    a*eps^2 + 2*b*eps - d0 = 0 with a = g^2 m_upper/m_lower,
    b = g^2 m_x/m_lower and d0 = 2 gamma_c - g^2 m_xx/(2 m_lower), whose
    positive root is the unique interior minimizer. Returns
    (eps_star, degenerate): when m_x = 0 or g = 0 the bound does not
    depend on eps through the trade-off and the bracket infimum is
    returned with degenerate=True. Raises BoundUndefinedError when no
    eps in the bracket keeps gamma1 positive.
    """
    lo, hi = bracket
    if not 0 < lo < hi:
        raise ValueError("bracket must satisfy 0 < lo < hi")

    def gamma1(eps):
        return gamma_c - (g_squared / (2.0 * m_lower)) * (eps * m_x + m_xx / 2.0)

    if gamma1(lo) <= 0:
        raise BoundUndefinedError("no eps in the bracket keeps gamma1 positive")
    if m_x == 0.0 or g_squared == 0.0:
        return lo, True

    a = g_squared * m_upper / m_lower
    b = g_squared * m_x / m_lower
    d0 = 2.0 * gamma_c - g_squared * m_xx / (2.0 * m_lower)
    eps_star = (-b + np.sqrt(b * b + a * d0)) / a
    if np.isfinite(eps_star) and lo <= eps_star <= hi and gamma1(eps_star) > 0:
        return float(eps_star), False

    # fall back to a bounded line search on the gamma1 > 0 portion
    hi_feas = min(hi, d0 / b * (1.0 - 1e-9)) if b > 0 else hi
    if hi_feas <= lo:
        return lo, False

    def F(eps):
        c = ContractionConstants(m_lower, m_upper, m_x, m_xx,
                                 np.sqrt(g_squared), 0.0, gamma_c, eps)
        g1 = c.gamma1
        return np.inf if g1 <= 0 else c.C_c / (2.0 * g1)

    res = optimize.minimize_scalar(F, bounds=(lo, hi_feas), method="bounded",
                                   options={"xatol": 1e-10})
    return float(res.x), False


def run_metric_extremes(records):
    """(m_lower, m_upper) over every logged metric of the records."""
    lam_lo, lam_hi = np.inf, -np.inf
    for rec in records:
        for _, sol in rec.metric_log:
            M, _ = programs.reconstruct_metric(sol)
            ev = np.linalg.eigvalsh(M)
            lam_lo = min(lam_lo, ev[0])
            lam_hi = max(lam_hi, ev[-1])
    if not np.isfinite(lam_lo):
        raise ValueError("records carry no metric log")
    return float(lam_lo), float(lam_hi)


def l2_gain_check(records, alpha, eps1, g_u, m_x=0.0, eps=1.0):
    """Ensemble check of the L2-gain bound under injected disturbances.

    Verifies E[||e||^2_L2(0,tau)] <= (E[||e(0)||^2_M(0)]
    + (m_upper/eps1) E[||d||^2_L2(0,tau)] + m_lower C tau)/(2 alpha1)
    with alpha1 = alpha m_lower - eps1 m_upper/2, using left-endpoint
    quadrature of the recorded signals; metric extremes come from the
    logs. Raises ValueError when alpha1 <= 0 for this eps1.
    """
    records = list(records)
    m_lower, m_upper = run_metric_extremes(records)
    alpha1 = alpha * m_lower - eps1 * m_upper / 2.0
    if alpha1 <= 0:
        raise ValueError(f"alpha1={alpha1} not positive; decrease eps1")
    C = noise_offset_constants(m_lower, m_upper, m_x, 0.0, g_u, eps)["C"]

    e_energy, d_energy, v0 = [], [], []
    tau = None
    for rec in records:
        t = rec.times
        dt_steps = np.diff(t)
        tau = float(t[-1] - t[0])
        err = rec.squared_errors()
        e_energy.append(float(np.sum(err[:-1] * dt_steps)))
        if rec.disturbances is None:
            d_energy.append(0.0)
        else:
            d2 = np.sum(np.asarray(rec.disturbances, dtype=float)**2, axis=1)
            d_energy.append(float(np.sum(d2[:-1] * dt_steps)))
        e0 = rec.states[0] - rec.desired_states[0]
        M0, _ = programs.reconstruct_metric(rec.metric_log[0][1])
        v0.append(float(e0 @ (M0 @ e0)))

    lhs = float(np.mean(e_energy))
    lhs_stderr = float(np.std(e_energy, ddof=1) / np.sqrt(len(e_energy))) \
        if len(e_energy) > 1 else 0.0
    rhs = (float(np.mean(v0)) + (m_upper / eps1) * float(np.mean(d_energy))
           + m_lower * C * tau) / (2.0 * alpha1)
    return {
        "lhs_mean_e_energy": lhs,
        "lhs_stderr": lhs_stderr,
        "rhs_bound": rhs,
        "alpha1": alpha1,
        "m_lower": m_lower,
        "m_upper": m_upper,
        "C": C,
        "tau": tau,
        "passed": lhs - 1.96 * lhs_stderr <= rhs,
    }


def lagrangian_mse_bound(params, hm_min, hm_max, V0, t):
    """Composite-state bound (V0 e^{-2 abar t} + C_ell/(2 abar))/hm_min.

    hm_min and hm_max are the run extremes of lambda(H + sigma M);
    abar = alpha_ell + k_lower/hm_max and C_ell = g_B^2 hm_max
    + ell_x g_B^2 / eps_ell.
    """
    if hm_min <= 0 or hm_max < hm_min:
        raise ValueError("need 0 < hm_min <= hm_max")
    abar = params.alpha_ell + params.k_lower / hm_max
    if abar <= 0:
        raise BoundUndefinedError(f"abar={abar} is not positive")
    C_ell = params.g_B**2 * hm_max + params.ell_x * params.g_B**2 / params.eps_ell
    t = np.asarray(t, dtype=float)
    return (V0 * np.exp(-2.0 * abar * t) + C_ell / (2.0 * abar)) / hm_min


def bound_violation_fraction(times, mse, stderr, bound):
    """Fraction of grid points where the estimator exceeds the bound.

    A point counts as a violation when mse - 1.96*stderr > bound there,
    i.e. the bound lies outside the 95% confidence interval on the low
    side. The bound is on the true expectation, so sampling excursions
    within the interval are not violations; up to 5% of points may
    violate before the check fails.
    """
    times = np.asarray(times, dtype=float)
    mse = np.asarray(mse, dtype=float)
    stderr = np.asarray(stderr, dtype=float)
    bound_vals = bound(times) if callable(bound) else np.asarray(bound, dtype=float)
    bound_vals = np.broadcast_to(bound_vals, mse.shape)
    violated = (mse - 1.96 * stderr) > bound_vals
    frac = float(np.mean(violated))
    return {
        "violation_fraction": frac,
        "num_points": int(mse.size),
        "num_violations": int(violated.sum()),
        "passed": frac <= 0.05,
    }


def write_bound_report(path, constants, times, bound_vals, mse, stderr):
    """Bound-report JSON: constants, curves, violation fraction."""
    times = np.asarray(times, dtype=float)
    bound_vals = np.broadcast_to(np.asarray(bound_vals, dtype=float), times.shape)
    check = bound_violation_fraction(times, mse, stderr, bound_vals)
    report = {
        "constants": {k: float(v) for k, v in constants.items()},
        "times": times.tolist(),
        "bound_curve": bound_vals.tolist(),
        "empirical_curve": np.asarray(mse, dtype=float).tolist(),
        "stderr_curve": np.asarray(stderr, dtype=float).tolist(),
        **check,
    }
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1)
    return report


def estimate_diffusion_bound(sde, box, n=1000, seed=0, t_range=(0.0, 1.0)):
    """Sampled upper estimate of sup ||G_u(x,t)||_F over a state box."""
    lo, hi = (np.asarray(v, dtype=float) for v in box)
    rng = np.random.default_rng(seed)
    xs = rng.uniform(lo, hi, size=(n, lo.size))
    ts = rng.uniform(t_range[0], t_range[1], size=n)
    return float(max(np.linalg.norm(np.asarray(sde.diffusion(x, t), dtype=float))
                     for x, t in zip(xs, ts)))
