"""Independent reference oracles used by the test suite.

Everything in this module is written against plain numpy/scipy only, with no
imports from the package under test. Grid searches work on the non-convex
side of the problem (decision variables W and gamma directly), so agreement
with the package's convex solves is a genuine cross-check and not a
tautology.
"""

import numpy as np

# ---------------------------------------------------------------------------
# Grid oracles for the metric programs (non-convex side)
# ---------------------------------------------------------------------------


def scalar_general_tau(a, b, r, phi, alpha, alpha_g, c1, w_floor=1e-6,
                       w_max=10.0, gamma_max=10.0, n=1500):
    """Brute-force grid minimum of kappa(W) + c1*kappa(W)^2*lambda_min(W)
    for a scalar system subject to the Riccati and rate conditions.

    For scalar W = w the condition number is 1, so the objective is
    1 + c1*w. Feasibility of (w, gamma) is checked in W-coordinates:

        2*a*w + gamma - b^2/r <= 0
        gamma + b^2/r - 2*phi*w - 2*alpha_g*w^2 - 2*alpha*w >= 0

    which are the two matrix conditions multiplied by W on both sides.
    ``w_floor`` mirrors an optional cap nu <= nu_max as w >= 1/nu_max.

    Returns (tau_star, w_star, gamma_star).
    """
    w = np.linspace(w_floor, w_max, n)
    g = np.linspace(1e-6, gamma_max, n)
    ww, gg = np.meshgrid(w, g, indexing="ij")
    feas = (2.0 * a * ww + gg - b**2 / r <= 0.0) & (
        gg + b**2 / r - 2.0 * phi * ww - 2.0 * alpha_g * ww**2
        - 2.0 * alpha * ww >= 0.0)
    if not feas.any():
        return np.inf, np.nan, np.nan
    obj = np.where(feas, 1.0 + c1 * ww, np.inf)
    k = np.unravel_index(np.argmin(obj), obj.shape)
    return obj[k], ww[k], gg[k]


def lagrangian_1dof_tau(h, k_gain, b_act, r, alpha_l, alpha_gam, c2,
                        w_floor=1e-6, w_max=10.0, gamma_max=10.0, n=1500):
    """Grid oracle for the one degree of freedom Lagrangian program.

    Constant inertia h, zero Coriolis term, feedback gain k_gain, actuation
    b_act. The closed-loop state matrix is A = -k_gain/h and the metric
    input matrix is B = b_act/h. Feasibility in W-coordinates:

        2*A*w + gamma - B^2/r <= 0
        2*w*b_act*B/r + gamma + B^2/r - 2*alpha_gam*w^2
            - 2*alpha_l*(h*w^2 + w) >= 0

    Objective is 1 + c2*w (condition number is 1 in one dimension).
    """
    A = -k_gain / h
    B = b_act / h
    w = np.linspace(w_floor, w_max, n)
    g = np.linspace(1e-6, gamma_max, n)
    ww, gg = np.meshgrid(w, g, indexing="ij")
    feas = (2.0 * A * ww + gg - B**2 / r <= 0.0) & (
        2.0 * ww * b_act * B / r + gg + B**2 / r
        - 2.0 * alpha_gam * ww**2
        - 2.0 * alpha_l * (h * ww**2 + ww) >= 0.0)
    if not feas.any():
        return np.inf, np.nan, np.nan
    obj = np.where(feas, 1.0 + c2 * ww, np.inf)
    k = np.unravel_index(np.argmin(obj), obj.shape)
    return obj[k], ww[k], gg[k]


def _two_state_objective_scan(A, B, r, alpha, alpha_g, c1, lam2_rng,
                              kap_rng, th_rng, n):
    """One vectorized scan over the (lam2, kappa, theta) box.

    W is parameterized by its eigendecomposition
    W = Q(theta) diag(lam1, lam2) Q(theta)^T with lam1 = kappa*lam2 >= lam2.
    Both matrix conditions are affine in gamma with identity coefficient,

        A W + W A^T - B B^T/r + gamma*I <= 0
        B B^T/r - 2*alpha_g*W^2 - 2*alpha*W + gamma*I >= 0

    so given W the feasible gamma set is the exact interval
    [-lambda_min(F), -lambda_max(E)] intersected with gamma > 0; no gamma
    grid is needed. 2x2 eigenvalues are evaluated in closed form.
    Returns the best (objective, lam2, kappa, theta, gamma_mid) found.
    """
    a11, a12, a21, a22 = A[0, 0], A[0, 1], A[1, 0], A[1, 1]
    BBt = np.outer(B, B) / r
    lam2 = np.linspace(*lam2_rng, n)
    kap = np.linspace(*kap_rng, n)
    th = np.linspace(*th_rng, n)
    best = (np.inf, np.nan, np.nan, np.nan, np.nan)
    for l2 in lam2:
        K, T = np.meshgrid(kap, th, indexing="ij")
        L1 = K * l2
        c, s = np.cos(T), np.sin(T)
        w11 = L1 * c**2 + l2 * s**2
        w22 = L1 * s**2 + l2 * c**2
        w12 = (L1 - l2) * c * s
        e11 = 2.0 * (a11 * w11 + a12 * w12) - BBt[0, 0]
        e12 = a11 * w12 + a12 * w22 + a21 * w11 + a22 * w12 - BBt[0, 1]
        e22 = 2.0 * (a21 * w12 + a22 * w22) - BBt[1, 1]
        f11 = BBt[0, 0] - 2.0 * alpha_g * (w11**2 + w12**2) - 2.0 * alpha * w11
        f12 = BBt[0, 1] - 2.0 * alpha_g * w12 * (w11 + w22) - 2.0 * alpha * w12
        f22 = BBt[1, 1] - 2.0 * alpha_g * (w12**2 + w22**2) - 2.0 * alpha * w22
        disc_e = np.sqrt(((e11 - e22) / 2.0) ** 2 + e12**2)
        disc_f = np.sqrt(((f11 - f22) / 2.0) ** 2 + f12**2)
        g_hi = -((e11 + e22) / 2.0 + disc_e)   # gamma <= -lambda_max(E)
        g_lo = -((f11 + f22) / 2.0 - disc_f)   # gamma >= -lambda_min(F)
        g_lo = np.maximum(g_lo, 0.0)
        feas = (g_hi > 0.0) & (g_lo <= g_hi)
        if not feas.any():
            continue
        cand = np.where(feas, K + c1 * K**2 * l2, np.inf)
        k = np.unravel_index(np.argmin(cand), cand.shape)
        if cand[k] < best[0]:
            gm = 0.5 * (max(g_lo[k], 1e-12) + g_hi[k])
            best = (cand[k], l2, K[k], T[k], gm)
    return best


def general_2state_tau(A, B, r, alpha, alpha_g, c1, lam_floor=1e-6,
                       lam2_max=2.5, kappa_max=8.0,
                       n=300, stages=5):
    """Staged grid search for the 2-state general program, phi = 0.

    Scans W over its eigendecomposition with gamma eliminated exactly
    (see _two_state_objective_scan), refining the grid around the
    incumbent between stages. ``lam_floor`` mirrors the optional cap
    nu <= nu_max as lambda_min(W) >= 1/nu_max. ``kappa_max`` is an
    instance-specific search box; callers should check the returned
    kappa sits well inside it.

    Returns (tau_star, info_dict).
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).reshape(2)
    rngs = [(lam_floor, lam2_max), (1.0, kappa_max),
            (-np.pi / 2, np.pi / 2)]
    hard_lo = [lam_floor, 1.0, -np.pi / 2]
    hard_hi = [np.inf, np.inf, np.pi / 2]
    best = None
    for stage in range(stages):
        res = _two_state_objective_scan(A, B, r, alpha, alpha_g, c1,
                                        rngs[0], rngs[1], rngs[2], n)
        if not np.isfinite(res[0]):
            return np.inf, {}
        best = res
        ctr = res[1:4]
        new = []
        for i, (lo, hi) in enumerate(rngs):
            half = 3.0 * (hi - lo) / (n - 1)
            new.append((max(hard_lo[i], ctr[i] - half),
                        min(hard_hi[i], ctr[i] + half)))
        rngs = new
    info = {"lam2": best[1], "kappa": best[2], "theta": best[3],
            "gamma": best[4]}
    return best[0], info


# ---------------------------------------------------------------------------
# Closed forms and small helpers
# ---------------------------------------------------------------------------


def ou_stationary_variance(a, g):
    """Stationary variance g^2/(2a) of dx = -a x dt + g dW."""
    return g**2 / (2.0 * a)


def clf_box_oracle(a_coef, b_coef, lo, hi, n=200001):
    """Dense 1-D grid minimizer of u^2 + max(0, a + b*u)^2 over [lo, hi].

    Returns (u_star, delta_star, objective).
    """
    u = np.linspace(lo, hi, n)
    slack = np.maximum(0.0, a_coef + b_coef * u)
    obj = u**2 + slack**2
    k = int(np.argmin(obj))
    return u[k], slack[k], obj[k]


def epsilon_grid_argmin(m_lo, m_hi, m_x, m_xx, gsq, gamma_c,
                        lo=1e-4, hi=50.0, n=400001):
    """Grid minimizer of F(eps) = C_c/(2*gamma_1) over eps with gamma_1 > 0.

    gsq is g1^2 + g2^2. Returns (eps_star, F_star); (nan, inf) if gamma_1
    is never positive on the bracket.
    """
    eps = np.linspace(lo, hi, n)
    gamma1 = gamma_c - (gsq / (2.0 * m_lo)) * (eps * m_x + m_xx / 2.0)
    Cc = (m_hi / m_lo + m_x / (eps * m_lo)) * gsq
    F = np.where(gamma1 > 0.0, Cc / (2.0 * gamma1), np.inf)
    k = int(np.argmin(F))
    if not np.isfinite(F[k]):
        return np.nan, np.inf
    return eps[k], F[k]


def sample_feasible_1dof_metrics(rng, count, h, k_gain, b_act, r,
                                 alpha_l, alpha_gam,
                                 w_box=(0.05, 1.0), gamma_box=(1e-3, 2.0)):
    """Rejection-sample (M, gamma) pairs feasible for the 1-DOF Lagrangian
    matrix conditions, in W-coordinates (see lagrangian_1dof_tau).

    Returns arrays (M, gamma) of length count.
    """
    A = -k_gain / h
    B = b_act / h
    out_m, out_g = [], []
    while len(out_m) < count:
        w = rng.uniform(*w_box, size=4 * count)
        g = rng.uniform(*gamma_box, size=4 * count)
        ok = (2.0 * A * w + g - B**2 / r <= 0.0) & (
            2.0 * w * b_act * B / r + g + B**2 / r
            - 2.0 * alpha_gam * w**2
            - 2.0 * alpha_l * (h * w**2 + w) >= 0.0)
        out_m.extend((1.0 / w[ok]).tolist())
        out_g.extend(g[ok].tolist())
    return np.array(out_m[:count]), np.array(out_g[:count])


# ---------------------------------------------------------------------------
# Symbolic generator for the scalar trajectory-pair process
# ---------------------------------------------------------------------------


def pair_generator_fn(f_coeffs, metric_coeffs, g1, g2):
    """Analytic L V for the independent-noise pair process.

    The pair (xi1, xi2) follows d xi_i = f(xi_i) dt + g_i dW_i with
    independent Wiener processes, f given by polynomial coefficients
    (ascending powers), and the metric M(x) a polynomial likewise. V is
    the straight-line squared length int_0^1 dx_mu^T M(x(mu)) dx_mu dmu,
    integrated exactly in mu by sympy.

    Returns a callable LV(xi1, xi2) plus a callable V(xi1, xi2).
    """
    import sympy as sp

    x1, x2, mu = sp.symbols("x1 x2 mu", real=True)

    def poly(cs, z):
        return sum(c * z**i for i, c in enumerate(cs))

    xm = x1 + mu * (x2 - x1)
    integrand = (x2 - x1) ** 2 * poly(metric_coeffs, xm)
    V = sp.integrate(integrand, (mu, 0, 1))
    V = sp.expand(V)
    f1 = poly(f_coeffs, x1)
    f2 = poly(f_coeffs, x2)
    LV = (sp.diff(V, x1) * f1 + sp.diff(V, x2) * f2
          + sp.Rational(1, 2) * (g1**2 * sp.diff(V, x1, 2)
                                 + g2**2 * sp.diff(V, x2, 2)))
    LV_fn = sp.lambdify((x1, x2), sp.expand(LV), "numpy")
    V_fn = sp.lambdify((x1, x2), V, "numpy")
    return LV_fn, V_fn
