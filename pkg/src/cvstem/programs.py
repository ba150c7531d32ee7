"""Assembly and verification of the metric-synthesis convex programs.

Both program families share the same decision variables: a symmetric
W_tilde = nu * W with I <= W_tilde <= chi*I, scalars nu, gamma_tilde,
chi, tau, objective min tau. The nonlinear steady-state objective
kappa(W) + c*kappa(W)^2*lambda_min(W) and the Riccati-type matrix
inequalities in M = nu * W_tilde^{-1} are recovered exactly from the
convex solution; ``verify_nonconvex_feasibility`` checks that recovery
numerically.

Sign convention: the metric-derivative term enters the general program
as -dW_tilde/dt and the Lagrangian program as +dW_tilde/dt, which is how
the source constraints are stated even though differentiating
W_tilde = nu M^{-1} would give the general sign in both. The
``wdot_sign_convention`` switch ("as_printed", the default, or
"congruence") selects between reproducing the stated forms and forcing
the general sign everywhere; see the README.

The derivative term comes in two forms: a fixed estimate passed as
``W_dot_tilde``, or the implicit backward difference
(W_tilde - W_prev) / dt against the previous solution, requested with
``W_prev``/``dt``. The implicit form keeps the term affine in the
current decision variable, so consecutive solves are tied together
instead of reacting to a stale constant; the first solve of a run omits
the term entirely.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .sdp import SdpProblem, SolverError, default_backend


def _as_matrix(R, x=None, t=None):
    if callable(R):
        R = R(x, t)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    return R


def _check_pd(M, name):
    M = np.atleast_2d(M)
    if np.linalg.norm(M - M.T) > 1e-10 * max(1.0, np.linalg.norm(M)):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M)[0] <= 0:
        raise ValueError(f"{name} must be positive definite")
    return M


def _wdot_term(W_dot_tilde, W_prev, dt, n):
    """Normalize the metric-derivative inputs of an assembler.

    Returns (Wd, Wp, dt): a constant estimate Wd (zero matrix when no
    term was requested) with Wp None, or Wd None with the previous
    solution Wp and the step dt of the implicit backward difference.
    """
    if W_prev is not None:
        if W_dot_tilde is not None:
            raise ValueError("pass either W_dot_tilde or W_prev, not both")
        if dt is None or dt <= 0:
            raise ValueError("dt must be positive with W_prev")
        return None, np.atleast_2d(np.asarray(W_prev, dtype=float)), float(dt)
    Wd = (np.zeros((n, n)) if W_dot_tilde is None
          else np.atleast_2d(np.asarray(W_dot_tilde, dtype=float)))
    return Wd, None, None


@dataclass
class CvstemParams:
    """Constants of the general metric program.

    alpha is the contraction rate; alpha_g collects the metric-derivative
    and diffusion bounds, 2*alpha_g = g_u^2*(m_x*eps + m_xx/2); c1 = m_x/eps
    weights the condition-number objective. ``R`` may be a constant matrix
    or a map (x, t) -> matrix. ``nu_max`` optionally caps nu (equivalently
    floors lambda_min(W)), which also bounds the feedback gain.
    """

    alpha: float
    alpha_g: float
    c1: float
    R: object
    eps: float = None
    m_x: float = None
    m_xx: float = None
    g_u: float = None
    nu_max: float = None
    wdot_sign_convention: str = "as_printed"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.alpha_g < 0 or self.c1 < 0:
            raise ValueError("alpha_g and c1 must be nonnegative")
        if self.wdot_sign_convention not in ("as_printed", "congruence"):
            raise ValueError(f"unknown wdot_sign_convention {self.wdot_sign_convention!r}")

    @classmethod
    def from_bounds(cls, alpha, eps, m_x, m_xx, g_u, R, **kw):
        """Derive alpha_g and c1 from the metric and diffusion bounds."""
        if eps <= 0:
            raise ValueError("eps must be positive")
        alpha_g = 0.5 * g_u**2 * (m_x * eps + m_xx / 2.0)
        c1 = m_x / eps
        return cls(alpha=alpha, alpha_g=alpha_g, c1=c1, R=R, eps=eps,
                   m_x=m_x, m_xx=m_xx, g_u=g_u, **kw)


@dataclass
class LagrangianParams:
    """Constants of the Lagrangian metric program (sigma fixed to 1).

    2*alpha_gamma = g_B^2*(ell_x*eps_ell + ell_xx/2) and
    c2 = lambda_max(H) + ell_x/eps_ell; ``k_lower`` is the uniform floor
    of the feedback gain matrix K(t).
    """

    alpha_ell: float
    alpha_gamma: float
    c2: float
    R: object
    eps_ell: float = None
    ell_x: float = None
    ell_xx: float = None
    g_B: float = None
    k_lower: float = None
    sigma: float = 1.0
    nu_max: float = None
    wdot_sign_convention: str = "as_printed"

    def __post_init__(self):
        if self.alpha_ell <= 0:
            raise ValueError("alpha_ell must be positive")
        if self.alpha_gamma < 0 or self.c2 < 0:
            raise ValueError("alpha_gamma and c2 must be nonnegative")
        if self.sigma != 1.0:
            raise ValueError("sigma is fixed to 1")
        if self.wdot_sign_convention not in ("as_printed", "congruence"):
            raise ValueError(f"unknown wdot_sign_convention {self.wdot_sign_convention!r}")

    @classmethod
    def from_bounds(cls, alpha_ell, eps_ell, ell_x, ell_xx, g_B, h_max, R, **kw):
        if eps_ell <= 0:
            raise ValueError("eps_ell must be positive")
        alpha_gamma = 0.5 * g_B**2 * (ell_x * eps_ell + ell_xx / 2.0)
        c2 = h_max + ell_x / eps_ell
        return cls(alpha_ell=alpha_ell, alpha_gamma=alpha_gamma, c2=c2, R=R,
                   eps_ell=eps_ell, ell_x=ell_x, ell_xx=ell_xx, g_B=g_B, **kw)


@dataclass
class MetricSolution:
    """One solve of a metric program."""

    W_tilde: np.ndarray
    nu: float
    chi: float
    tau: float
    gamma_tilde: float
    solver_status: str
    solve_time: float
    sdc_blocks: dict = None
    extras: dict = field(default_factory=dict)


def _common_variables(prob, n):
    prob.add_symmetric_var("W", n)
    prob.add_scalar_var("nu")
    prob.add_scalar_var("chi")
    prob.add_scalar_var("gamma")
    prob.add_nonneg(0.0, {"nu": 1.0}, "positivity")
    prob.add_nonneg(0.0, {"gamma": 1.0}, "positivity")


def _metric_bound_blocks(prob, n, nu_max=None):
    blk = prob.new_block(n, "metric_bounds")  # W_tilde - I >= 0
    blk.add_const(-np.eye(n))
    blk.add_matrix("W")
    blk = prob.new_block(n, "metric_bounds")  # chi*I - W_tilde >= 0
    blk.add_scalar("chi", np.eye(n))
    blk.add_matrix("W", L=-np.eye(n))
    if nu_max is not None:
        if nu_max <= 0:
            raise ValueError("nu_max must be positive")
        blk = prob.new_block(n, "nu_cap")  # W_tilde - (nu/nu_max) I >= 0
        blk.add_matrix("W")
        blk.add_scalar("nu", -np.eye(n) / nu_max)


def _epigraph(prob, n, c):
    """tau >= chi + c*chi^2/nu as a 2x2 PSD block (c > 0), else tau = chi."""
    if c > 0:
        sc = np.sqrt(c)
        blk = prob.new_block(2, "epigraph")
        blk.add_scalar("tau", np.array([[1.0, 0.0], [0.0, 0.0]]))
        blk.add_scalar("chi", np.array([[-1.0, sc], [sc, 0.0]]))
        blk.add_scalar("nu", np.array([[0.0, 0.0], [0.0, 1.0]]))
    else:
        # objective collapses to chi; tau rides along as an upper bound
        prob.add_nonneg(0.0, {"tau": 1.0, "chi": -1.0}, "epigraph_degenerate")
    prob.set_objective({"tau": 1.0})


def assemble_general_program(A, B, phi, W_dot_tilde, params, point=None,
                             W_prev=None, dt=None):
    """Convex program for the optimal metric of the general system.

    ``A`` and ``B`` are the factorization and input matrices evaluated at
    the current point; ``phi`` the deviation Jacobian there; ``W_dot_tilde``
    the (fixed) metric-derivative estimate, or ``W_prev``/``dt`` for the
    implicit backward difference (see the module docstring). ``point`` =
    (x, x_d, u_d, t) is used to evaluate a state-dependent R and is
    otherwise metadata. Constraint groups carry semantic tags:
    metric_bounds, riccati, alpha_lmi, epigraph (plus nu_cap when
    params.nu_max is set).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    phi = np.zeros((n, n)) if phi is None else np.atleast_2d(np.asarray(phi, dtype=float))
    Wd, Wp, dt = _wdot_term(W_dot_tilde, W_prev, dt, n)
    x, t = (point[0], point[3]) if point is not None else (None, None)
    R = _check_pd(_as_matrix(params.R, x, t), "R")
    BRB = B @ np.linalg.solve(R, B.T)
    BRB = 0.5 * (BRB + BRB.T)

    prob = SdpProblem()
    prob.add_scalar_var("tau")
    _common_variables(prob, n)
    _metric_bound_blocks(prob, n, params.nu_max)

    # -(+/-W_tilde_dot) - (A W_tilde + W_tilde A^T) - gamma_tilde I + nu B R^-1 B^T >= 0
    blk = prob.new_block(n, "riccati")
    if Wp is not None:
        # the general form carries -W_dot, so the implicit difference
        # contributes +W_tilde/dt (variable) - W_prev/dt (constant)
        blk.add_matrix("W", L=np.eye(n) / (2.0 * dt), symmetrize=True)
        blk.add_const(-Wp / dt)
    else:
        blk.add_const(Wd)  # general form carries -W_dot under both conventions
    blk.add_matrix("W", L=-A, symmetrize=True)
    blk.add_scalar("gamma", -np.eye(n))
    blk.add_scalar("nu", BRB)

    if params.alpha_g > 0:
        blk = prob.new_block(2 * n, "alpha_lmi")
        P1 = np.vstack([np.eye(n), np.zeros((n, n))])
        P2 = np.vstack([np.zeros((n, n)), np.eye(n)])
        blk.add_scalar("gamma", P1 @ P1.T)
        blk.add_scalar("nu", P1 @ BRB @ P1.T + P2 @ P2.T / (2.0 * params.alpha_g))
        blk.add_matrix("W", L=-P1 @ phi, R=P1.T, symmetrize=True)
        blk.add_matrix("W", L=-params.alpha * P1, R=P1.T, symmetrize=True)
        blk.add_matrix("W", L=P1, R=P2.T, symmetrize=True)
    else:
        blk = prob.new_block(n, "alpha_lmi")
        blk.add_scalar("gamma", np.eye(n))
        blk.add_scalar("nu", BRB)
        blk.add_matrix("W", L=-phi, symmetrize=True)
        blk.add_matrix("W", L=-params.alpha * np.eye(n), symmetrize=True)

    _epigraph(prob, n, params.c1)
    return prob


def assemble_lagrangian_program(A, B, B_act, H, W_dot_tilde, params, point=None,
                                W_prev=None, dt=None):
    """Convex program for the composite-variable metric of a Lagrangian system.

    ``A = -H^{-1}(C + K)``, ``B = H^{-1} B_act`` and ``H`` are evaluated at
    the current point. The derivative term enters with a plus sign under
    the default convention (see module docstring); ``W_prev``/``dt``
    request the implicit backward difference instead of a fixed
    ``W_dot_tilde``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    B_act = np.asarray(B_act, dtype=float).reshape(n, -1)
    H = _check_pd(np.asarray(H, dtype=float), "H")
    Wd, Wp, dt = _wdot_term(W_dot_tilde, W_prev, dt, n)
    x, t = (point[0], point[-1]) if point is not None else (None, None)
    R = _check_pd(_as_matrix(params.R, x, t), "R")
    BRB = B @ np.linalg.solve(R, B.T)
    BRB = 0.5 * (BRB + BRB.T)
    BaRB = B_act @ np.linalg.solve(R, B.T)  # B_act R^-1 B^T, not symmetric

    D = params.alpha_ell * H + params.alpha_gamma * np.eye(n)
    if np.linalg.eigvalsh(0.5 * (D + D.T))[0] <= 0:
        raise ValueError("alpha_ell*H + alpha_gamma*I must be positive definite")
    Dinv = np.linalg.inv(D)
    Dinv = 0.5 * (Dinv + Dinv.T)

    wdot_sign = 1.0 if params.wdot_sign_convention == "as_printed" else -1.0

    prob = SdpProblem()
    prob.add_scalar_var("tau")
    _common_variables(prob, n)
    _metric_bound_blocks(prob, n, params.nu_max)

    # -(sign*W_dot) - (A W_tilde + W_tilde A^T) + nu B R^-1 B^T - gamma_tilde I >= 0
    blk = prob.new_block(n, "riccati")
    if Wp is not None:
        blk.add_matrix("W", L=-wdot_sign * np.eye(n) / (2.0 * dt), symmetrize=True)
        blk.add_const(wdot_sign * Wp / dt)
    else:
        blk.add_const(-wdot_sign * Wd)
    blk.add_matrix("W", L=-A, symmetrize=True)
    blk.add_scalar("gamma", -np.eye(n))
    blk.add_scalar("nu", BRB)

    # [[H_ell, W],[W, (nu/2) (alpha_ell H + alpha_gamma I)^-1]] >= 0
    # with H_ell = 2 sym(W B_act R^-1 B^T) + gamma I + nu B R^-1 B^T - 2 alpha_ell W
    blk = prob.new_block(2 * n, "alpha_lmi")
    P1 = np.vstack([np.eye(n), np.zeros((n, n))])
    P2 = np.vstack([np.zeros((n, n)), np.eye(n)])
    blk.add_matrix("W", L=P1, R=BaRB.T @ P1.T, symmetrize=True)
    blk.add_scalar("gamma", P1 @ P1.T)
    blk.add_scalar("nu", P1 @ BRB @ P1.T + 0.5 * P2 @ Dinv @ P2.T)
    blk.add_matrix("W", L=-params.alpha_ell * P1, R=P1.T, symmetrize=True)
    blk.add_matrix("W", L=P1, R=P2.T, symmetrize=True)

    _epigraph(prob, n, params.c2)
    return prob


def add_input_norm_constraint(prob, e, u_d_norm, u_max, B, R):
    """Feedback-gain input bound nu*||R^-1 B^T||*||e|| <= (u_max - ||u_d||)*lambda_min(W).

    lambda_min(W_tilde) is encoded exactly through an auxiliary scalar ell
    with W_tilde >= ell*I. Requires u_max >= ||u_d||.
    """
    if u_max < u_d_norm:
        raise ValueError(f"u_max={u_max} is below the reference input norm {u_d_norm}")
    e = np.asarray(e, dtype=float)
    R = _as_matrix(R)
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    gain_norm = float(np.linalg.norm(np.linalg.solve(R, B.T), 2))
    n = prob.variables["W"].n
    prob.add_scalar_var("ell")
    blk = prob.new_block(n, "input_norm")  # W_tilde - ell*I >= 0
    blk.add_matrix("W")
    blk.add_scalar("ell", -np.eye(n))
    prob.add_nonneg(0.0, {"ell": float(u_max - u_d_norm),
                          "nu": -gain_norm * float(np.linalg.norm(e))}, "input_norm")
    return prob


def assemble_relaxed_sdc_program(A_list, B, phi_list, phi_B, W_dot_tilde,
                                 params, cc=None, point=None,
                                 W_prev=None, dt=None):
    """Relaxed program treating the factorization weights as decisions.

    Variables W_i (one per factorization candidate) and rho_i replace
    rho_i*W_tilde and nu*rho_i; W_tilde and nu are recovered as their sums
    and never appear separately. ``phi_list`` holds the per-candidate
    deviation Jacobians of delta_A_i x_d, ``phi_B`` the input-matrix one.
    ``cc`` optionally adds user linear controllability rows, each given as
    (coefficients over rho, offset) meaning coeff @ rho + offset <= 0.
    ``W_prev``/``dt`` request the implicit backward difference of the
    summed metric instead of a fixed ``W_dot_tilde``.
    """
    s1 = len(A_list)
    if s1 < 1:
        raise ValueError("need at least one factorization candidate")
    A_list = [np.atleast_2d(np.asarray(Ai, dtype=float)) for Ai in A_list]
    n = A_list[0].shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    phi_list = ([np.zeros((n, n))] * s1 if phi_list is None
                else [np.atleast_2d(np.asarray(p, dtype=float)) for p in phi_list])
    phi_B = np.zeros((n, n)) if phi_B is None else np.atleast_2d(np.asarray(phi_B, dtype=float))
    Wd, Wp, dt = _wdot_term(W_dot_tilde, W_prev, dt, n)
    x, t = (point[0], point[3]) if point is not None else (None, None)
    R = _check_pd(_as_matrix(params.R, x, t), "R")
    BRB = B @ np.linalg.solve(R, B.T)
    BRB = 0.5 * (BRB + BRB.T)

    wnames = [f"W_r{i}" for i in range(s1)]
    rnames = [f"rho_{i}" for i in range(s1)]
    ones = {nm: 1.0 for nm in rnames}

    prob = SdpProblem()
    prob.add_scalar_var("tau")
    for nm in wnames:
        prob.add_symmetric_var(nm, n)
    for nm in rnames:
        prob.add_scalar_var(nm)
        prob.add_nonneg(0.0, {nm: 1.0}, "positivity")
    prob.add_scalar_var("chi")
    prob.add_scalar_var("gamma")
    prob.add_nonneg(0.0, {"gamma": 1.0}, "positivity")
    for nm in rnames:  # rho_i <= nu, i.e. sum_j rho_j - rho_i >= 0
        coeffs = dict(ones)
        coeffs[nm] = coeffs[nm] - 1.0
        prob.add_nonneg(0.0, coeffs, "sdc_coupling")

    # metric bounds on W_tilde = sum_i W_i
    blk = prob.new_block(n, "metric_bounds")
    blk.add_const(-np.eye(n))
    for nm in wnames:
        blk.add_matrix(nm)
    blk = prob.new_block(n, "metric_bounds")
    blk.add_scalar("chi", np.eye(n))
    for nm in wnames:
        blk.add_matrix(nm, L=-np.eye(n))
    if params.nu_max is not None:
        blk = prob.new_block(n, "nu_cap")
        for nm in wnames:
            blk.add_matrix(nm)
        for nm in rnames:
            blk.add_scalar(nm, -np.eye(n) / params.nu_max)

    # riccati with per-candidate A_i acting on W_i
    blk = prob.new_block(n, "riccati")
    if Wp is not None:
        for nm in wnames:  # W_tilde/dt = sum_i W_i/dt
            blk.add_matrix(nm, L=np.eye(n) / (2.0 * dt), symmetrize=True)
        blk.add_const(-Wp / dt)
    else:
        blk.add_const(Wd)
    for Ai, nm in zip(A_list, wnames):
        blk.add_matrix(nm, L=-Ai, symmetrize=True)
    blk.add_scalar("gamma", -np.eye(n))
    for nm in rnames:
        blk.add_scalar(nm, BRB)

    # alpha LMI with Phi = sum_i sym(2 phi_i W_i) + sym(2 phi_B W_tilde)
    P1 = np.vstack([np.eye(n), np.zeros((n, n))])
    P2 = np.vstack([np.zeros((n, n)), np.eye(n)])
    if params.alpha_g > 0:
        blk = prob.new_block(2 * n, "alpha_lmi")
        blk.add_scalar("gamma", P1 @ P1.T)
        for nm in rnames:
            blk.add_scalar(nm, P1 @ BRB @ P1.T + P2 @ P2.T / (2.0 * params.alpha_g))
        for phi_i, nm in zip(phi_list, wnames):
            blk.add_matrix(nm, L=-P1 @ phi_i, R=P1.T, symmetrize=True)
        for nm in wnames:
            blk.add_matrix(nm, L=-P1 @ phi_B, R=P1.T, symmetrize=True)
            blk.add_matrix(nm, L=-params.alpha * P1, R=P1.T, symmetrize=True)
            blk.add_matrix(nm, L=P1, R=P2.T, symmetrize=True)
    else:
        blk = prob.new_block(n, "alpha_lmi")
        blk.add_scalar("gamma", np.eye(n))
        for nm in rnames:
            blk.add_scalar(nm, BRB)
        for phi_i, nm in zip(phi_list, wnames):
            blk.add_matrix(nm, L=-phi_i, symmetrize=True)
        for nm in wnames:
            blk.add_matrix(nm, L=-phi_B, symmetrize=True)
            blk.add_matrix(nm, L=-params.alpha * np.eye(n), symmetrize=True)

    # coupling sym [[nu I, W_tilde],[rho_i I, W_i]] >= 0 per candidate,
    # and W_i >= 0 explicitly
    for nm, rnm in zip(wnames, rnames):
        blk = prob.new_block(2 * n, "sdc_coupling")
        for r2 in rnames:
            blk.add_scalar(r2, 2.0 * P1 @ P1.T)
        blk.add_scalar(rnm, P1 @ P2.T + P2 @ P1.T)
        for w2 in wnames:
            blk.add_matrix(w2, L=P1, R=P2.T, symmetrize=True)
        blk.add_matrix(nm, L=2.0 * P2, R=P2.T)
        prob.new_block(n, "sdc_coupling").add_matrix(nm)

    if cc:
        for coeff, offset in cc:
            coeff = np.asarray(coeff, dtype=float)
            if coeff.shape != (s1,):
                raise ValueError("controllability coefficients must match the candidate count")
            prob.add_nonneg(-float(offset), {nm: -float(c) for nm, c in zip(rnames, coeff)},
                            "controllability")

    # epigraph over nu = sum rho_i
    if params.c1 > 0:
        sc = np.sqrt(params.c1)
        blk = prob.new_block(2, "epigraph")
        blk.add_scalar("tau", np.array([[1.0, 0.0], [0.0, 0.0]]))
        blk.add_scalar("chi", np.array([[-1.0, sc], [sc, 0.0]]))
        for nm in rnames:
            blk.add_scalar(nm, np.array([[0.0, 0.0], [0.0, 1.0]]))
    else:
        prob.add_nonneg(0.0, {"tau": 1.0, "chi": -1.0}, "epigraph_degenerate")
    prob.set_objective({"tau": 1.0})
    return prob


def solve(problem, backend=None, tol=1e-7):
    """Run a backend on an assembled program and bundle a MetricSolution.

    The returned blocks are re-evaluated at the solution; any PSD block
    with minimum eigenvalue below -tol demotes the status to "inaccurate".
    Backend failures raise SolverError; infeasibility is a status, not an
    exception.
    """
    backend = backend or default_backend()
    t0 = time.perf_counter()
    res = backend.solve(problem)
    wall = time.perf_counter() - t0
    status = res["status"]
    if status == "infeasible":
        return MetricSolution(W_tilde=None, nu=None, chi=None, tau=None,
                              gamma_tilde=None, solver_status="infeasible",
                              solve_time=wall,
                              extras={"raw_status": res.get("raw_status")})
    x = res["x"]
    worst = 0.0
    for k in range(len(problem.blocks)):
        S = problem.evaluate_block(k, x)
        worst = min(worst, float(np.linalg.eigvalsh(S)[0]))
    rows = problem.evaluate_nonneg(x)
    if len(rows):
        worst = min(worst, float(rows.min()))
    if status == "optimal" and worst < -tol:
        status = "inaccurate"

    names = problem.variables
    if "W" in names:
        W = problem.extract("W", x)
        nu = problem.extract("nu", x)
        sdc_blocks = None
    else:
        wnames = sorted(n for n in names if n.startswith("W_r"))
        rnames = sorted(n for n in names if n.startswith("rho_"))
        Ws = [problem.extract(nm, x) for nm in wnames]
        rhos = [problem.extract(nm, x) for nm in rnames]
        W = sum(Ws)
        nu = float(sum(rhos))
        sdc_blocks = {"W_rho": Ws, "rho_tilde": np.array(rhos),
                      "rho": np.array(rhos) / nu if nu > 0 else np.array(rhos)}
    tau = problem.extract("tau", x) if "tau" in names else problem.extract("chi", x)
    sol = MetricSolution(
        W_tilde=0.5 * (W + W.T),
        nu=float(nu),
        chi=float(problem.extract("chi", x)),
        tau=float(tau),
        gamma_tilde=float(problem.extract("gamma", x)),
        solver_status=status,
        solve_time=wall,
        sdc_blocks=sdc_blocks,
        extras={"raw_status": res.get("raw_status"),
                "backend": res.get("backend"),
                "min_block_eig": worst,
                "objective": res.get("objective")},
    )
    if "ell" in names:
        sol.extras["ell"] = problem.extract("ell", x)
    return sol


def reconstruct_metric(solution):
    """Recover (M, gamma) = (nu * W_tilde^{-1}, gamma_tilde / nu)."""
    if solution.solver_status not in ("optimal", "inaccurate"):
        raise SolverError(f"cannot reconstruct from status {solution.solver_status!r}")
    W = solution.W_tilde
    cond = np.linalg.cond(W)
    if not np.isfinite(cond) or cond > 1e14:
        raise SolverError("W_tilde is numerically singular")
    M = solution.nu * np.linalg.inv(W)
    return 0.5 * (M + M.T), solution.gamma_tilde / solution.nu


def verify_nonconvex_feasibility(M, gamma, A, B, R, params, phi=None,
                                 M_dot=None, H=None, B_act=None, tau=None,
                                 tol=1e-6):
    """Residuals of the original matrix inequalities at a reconstructed metric.

    General case (``H`` is None): checks the Riccati inequality
    M_dot + 2 sym(M A) + gamma M^2 - M B R^-1 B^T M <= 0 and the
    contraction-rate inequality gamma M^2 + M B R^-1 B^T M - phi^T M
    - M phi - 2 alpha_g I >= 2 alpha M. Lagrangian case: same Riccati in
    the composite dynamics plus 2 sym(B_act R^-1 B^T M)
    + gamma M^2 + M B R^-1 B^T M - 2 alpha_gamma I >= 2 alpha_ell (H + M).
    Also cross-checks tau against kappa(W) + c*kappa^2*lambda_min(W).
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = M.shape[0]
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(n, -1)
    R = _as_matrix(R)
    phi = np.zeros((n, n)) if phi is None else np.atleast_2d(np.asarray(phi, dtype=float))
    Md = np.zeros((n, n)) if M_dot is None else np.atleast_2d(np.asarray(M_dot, dtype=float))
    MBRB = M @ B @ np.linalg.solve(R, B.T) @ M
    MBRB = 0.5 * (MBRB + MBRB.T)
    M2 = M @ M

    riccati = Md + M @ A + A.T @ M + gamma * M2 - MBRB
    riccati = 0.5 * (riccati + riccati.T)
    lam_r = float(np.linalg.eigvalsh(riccati)[-1])

    if H is None:
        lhs = (gamma * M2 + MBRB - phi.T @ M - M @ phi
               - 2.0 * params.alpha_g * np.eye(n) - 2.0 * params.alpha * M)
        c = params.c1
    else:
        H = np.atleast_2d(np.asarray(H, dtype=float))
        B_act = np.asarray(B_act, dtype=float).reshape(n, -1)
        cross = B_act @ np.linalg.solve(R, B.T) @ M
        lhs = (cross + cross.T + gamma * M2 + MBRB
               - 2.0 * params.alpha_gamma * np.eye(n)
               - 2.0 * params.alpha_ell * (H + M))
        c = params.c2
    lhs = 0.5 * (lhs + lhs.T)
    lam_a = float(np.linalg.eigvalsh(lhs)[0])

    report = {
        "riccati_max_eig": lam_r,
        "riccati_ok": lam_r <= tol,
        "rate_min_eig": lam_a,
        "rate_ok": lam_a >= -tol,
        "tol": tol,
    }
    W = np.linalg.inv(M)
    ev = np.linalg.eigvalsh(0.5 * (W + W.T))
    kappa = ev[-1] / ev[0]
    obj = kappa + c * kappa**2 * ev[0]
    report["objective_recomputed"] = float(obj)
    if tau is not None:
        rel = abs(obj - tau) / max(1.0, abs(tau))
        report["objective_rel_err"] = float(rel)
        report["objective_ok"] = rel <= max(tol, 1e-6)
    report["passed"] = report["riccati_ok"] and report["rate_ok"] and \
        report.get("objective_ok", True)
    return report
