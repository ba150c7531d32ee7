"""Feedback laws built from metric solutions, and the re-solve machinery.

The optimizing controllers wrap one metric program each: the general one
applies u = u_d - R^-1 B^T M (x - x_d) with M = nu W_tilde^{-1}; the
Lagrangian one splits u into a nominal feedback-linearizing part u_n and
the stochastic part u_s = -R^-1 B^T M s. Both are meant to be invoked at
the integration rate; the metric program is only consulted every
``sample_every`` invocations (the sampling period of the optimization),
and between samples the cached metric is held while the feedback law is
re-evaluated at the current state. At a sample the policy re-solves
every time or only on demand (cached-solution residual violation,
objective growth, a periodic refresh, or an input-bound breach), with a
fall-back to the last accepted solution when a solve comes back
infeasible mid-run.

The metric-derivative term of the programs is neglected by default (the
sampled metric is piecewise constant, which the source formulation
allows); ``use_wdot_term`` adds the implicit backward difference
(W_tilde - W_prev) / dt against the previous solution instead. At small
sampling periods that term dominates the synthesis inequality and the
per-solve objective can trade the metric structure away for a ratcheting
sequence, so the default stays off.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import programs, sdc as sdcmod
from .sdp import SolverError


class InfeasibleReferenceError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class ResolvePolicy:
    """When to re-run the metric program.

    "every_step" re-solves at each controller sample. "relaxed" keeps the
    cached metric while it stays feasible at the current state (residuals
    within residual_tol) and the objective has not grown past
    last_objective + objective_slack; ``resolve_every`` forces a periodic
    refresh regardless (None disables).
    """

    kind: str = "every_step"
    residual_tol: float = 1e-6
    objective_slack: float = 0.0
    resolve_every: int = None

    def __post_init__(self):
        if self.kind not in ("every_step", "relaxed"):
            raise ValueError(f"unknown resolve policy {self.kind!r}")


@dataclass
class ControllerState:
    last_solution: object = None
    last_W_tilde: np.ndarray = None
    last_M: np.ndarray = None
    last_solve_time: float = None
    prev_W_tilde: np.ndarray = None
    prev_M: np.ndarray = None
    prev_solve_time: float = None
    last_objective: float = None
    resolve_policy: ResolvePolicy = field(default_factory=ResolvePolicy)
    sample_period: float = None
    samples_since_solve: int = 0


@dataclass
class LagrangianGains:
    """Composite-variable gains: s = qdot - qdot_r, qdot_r = qdot_d - Lambda (q - q_d)."""

    Lambda: np.ndarray
    K_t: callable  # t -> n x n gain, must dominate k_lower * I

    def __post_init__(self):
        self.Lambda = np.atleast_2d(np.asarray(self.Lambda, dtype=float))
        if np.linalg.eigvalsh(0.5 * (self.Lambda + self.Lambda.T))[0] <= 0:
            raise ValueError("Lambda must be positive definite")


def desired_input(sde, x_d, x_d_dot, t, tol=1e-8):
    """Least-squares u_d with B(x_d,t) u_d = x_d_dot - f(x_d,t).

    Minimum-norm when B has a nontrivial kernel. Raises
    InfeasibleReferenceError when the residual shows the reference cannot
    be followed exactly.
    """
    x_d = np.asarray(x_d, dtype=float)
    rhs = np.asarray(x_d_dot, dtype=float) - np.asarray(sde.drift(x_d, t), dtype=float)
    B = np.asarray(sde.input_matrix(x_d, t), dtype=float)
    u_d, *_ = np.linalg.lstsq(B, rhs, rcond=None)
    resid = float(np.linalg.norm(B @ u_d - rhs))
    if resid > tol * max(1.0, float(np.linalg.norm(rhs))):
        raise InfeasibleReferenceError(
            f"reference not in the input image at t={t}: residual {resid:.3e}")
    return u_d


def general_control(solution, R, B, x, x_d, u_d):
    """u = u_d - R^-1 B^T M (x - x_d) with M reconstructed from the solve."""
    M, _ = programs.reconstruct_metric(solution)
    e = np.asarray(x, dtype=float) - np.asarray(x_d, dtype=float)
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    R = np.atleast_2d(np.asarray(R, dtype=float))
    return np.asarray(u_d, dtype=float) - np.linalg.solve(R, B.T @ (M @ e))


def lagrangian_control(system, gains, solution, q, q_dot, q_d, q_d_dot,
                       q_d_ddot, t, tol=1e-8):
    """Composite control u = u_n + u_s for H qddot + C qdot + G = B_act u.

    u_n = B_act^+ (H qddot_r + C qdot_r + G - K s) feedback-linearizes
    around the reference velocity qdot_r; u_s = -R^-1 B^T M s adds the
    metric-optimal stochastic term. Requires B_act B_act^+ = I at the
    point. Returns (u, u_n, u_s).
    """
    q = np.asarray(q, dtype=float)
    q_dot = np.asarray(q_dot, dtype=float)
    H = np.atleast_2d(np.asarray(system.inertia(q), dtype=float))
    C = np.atleast_2d(np.asarray(system.coriolis(q, q_dot), dtype=float))
    G = np.asarray(system.gravity(q), dtype=float)
    Ba = np.atleast_2d(np.asarray(system.actuation(q, q_dot), dtype=float))
    Ba_pinv = np.linalg.pinv(Ba)
    n = H.shape[0]
    if np.linalg.norm(Ba @ Ba_pinv - np.eye(n)) > tol:
        raise ConfigurationError("actuation matrix is not right-invertible at this point")

    K = np.atleast_2d(np.asarray(gains.K_t(t), dtype=float))
    q_dot_r = np.asarray(q_d_dot, dtype=float) - gains.Lambda @ (q - np.asarray(q_d, dtype=float))
    q_ddot_r = np.asarray(q_d_ddot, dtype=float) - gains.Lambda @ (q_dot - np.asarray(q_d_dot, dtype=float))
    s = q_dot - q_dot_r
    u_n = Ba_pinv @ (H @ q_ddot_r + C @ q_dot_r + G - K @ s)

    if solution is None:
        u_s = np.zeros(u_n.shape)
    else:
        M, _ = programs.reconstruct_metric(solution)
        B = np.linalg.solve(H, Ba)
        R = np.atleast_2d(np.asarray(
            solution.extras.get("R_eval", np.eye(B.shape[1])), dtype=float))
        u_s = -np.linalg.solve(R, B.T @ (M @ s))
    return u_n + u_s, u_n, u_s


def min_norm_clf_control(M, M_dot, A, B, B_act, H, s, params, input_set=None):
    """Minimum-norm stochastic input subject to the contraction-rate row.

    Minimizes u^T u + delta^2 subject to a + b^T u <= delta where
    a = s^T (2 alpha_ell (H + M) + M_dot + M A + A^T M + 2 alpha_gamma I) s
    and b = 2 (B_act + M B)^T s. With an unconstrained input set the
    proposition's delta = 0 applies and the solution is closed-form:
    u = 0 when a <= 0, else -(a/||b||^2) b (when b vanishes there, no
    delta = 0 point exists and (0, a) is returned). ``input_set`` =
    (lo, hi) restricts u to a box; the joint optimum over (u, delta) is
    then found numerically. Returns (u_star, delta).
    """
    s = np.asarray(s, dtype=float)
    n = s.shape[0]
    M = np.atleast_2d(np.asarray(M, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    Md = np.zeros((n, n)) if M_dot is None else np.atleast_2d(np.asarray(M_dot, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    Ba = np.asarray(B_act, dtype=float)
    if Ba.ndim == 1:
        Ba = Ba[:, None]
    Q = (2.0 * params.alpha_ell * (H + M) + Md + M @ A + A.T @ M
         + 2.0 * params.alpha_gamma * np.eye(n))
    a = float(s @ (Q @ s))
    b = 2.0 * (Ba + M @ B).T @ s
    m = b.shape[0]

    if input_set is None:
        if a <= 0.0:
            return np.zeros(m), 0.0
        bn2 = float(b @ b)
        if bn2 <= 0.0:
            return np.zeros(m), a
        return -(a / bn2) * b, 0.0

    lo, hi = (np.asarray(v, dtype=float) for v in input_set)
    if np.any(lo > hi):
        raise ValueError("empty input box")

    def cost(u):
        viol = max(0.0, a + float(b @ u))
        return float(u @ u) + viol * viol

    def grad(u):
        viol = max(0.0, a + float(b @ u))
        return 2.0 * u + 2.0 * viol * b

    u0 = np.clip(-(a / max(float(b @ b), 1e-12)) * b if a > 0 else np.zeros(m), lo, hi)
    res = optimize.minimize(cost, u0, jac=grad, method="L-BFGS-B",
                            bounds=list(zip(lo, hi)),
                            options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 500})
    u = np.clip(res.x, lo, hi)
    return u, max(0.0, a + float(b @ u))


def backward_difference_W(current, previous, dt):
    """Symmetrized (current - previous) / dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    D = (np.asarray(current, dtype=float) - np.asarray(previous, dtype=float)) / dt
    return 0.5 * (D + D.T)


def relaxed_resolve_decision(state, residual_report, current_objective):
    """True when the cached metric must be replaced.

    Triggers on a constraint residual beyond the policy tolerance or on
    objective growth past the recorded value plus slack.
    """
    pol = state.resolve_policy
    violation = max(residual_report.get("riccati_max_eig", 0.0),
                    -residual_report.get("rate_min_eig", 0.0), 0.0)
    if violation > pol.residual_tol:
        return True
    if state.last_objective is not None and current_objective is not None:
        if current_objective > state.last_objective + pol.objective_slack:
            return True
    return False


def control_effort(inputs, dt):
    """Left-endpoint quadrature of ||u(t)|| over the run."""
    u = np.asarray(inputs, dtype=float)
    norms = np.linalg.norm(u[:-1], axis=1)
    return float(norms.sum() * dt)


class _OptimizingController:
    """Shared solve/cache/log plumbing of the two metric controllers."""

    def __init__(self, params, policy=None, backend=None, u_max=None,
                 input_margin=1e-6, sample_every=1, sample_period=None,
                 use_wdot_term=False):
        self.params = params
        self.backend = backend
        self.u_max = u_max
        # the sufficient input bound is enforced with a hair of margin so
        # solver-tolerance slop cannot push ||u|| past u_max itself
        self.input_margin = input_margin
        self.sample_every = max(1, int(sample_every))
        self.use_wdot_term = use_wdot_term
        self.state = ControllerState(resolve_policy=policy or ResolvePolicy(),
                                     sample_period=sample_period)
        self.metric_log = []
        self.step_log = []
        self.event_log = []
        # which relaxation rung produced the cached solution (None = fully
        # constrained program, including the input-norm row when present)
        self.last_relaxation = None
        self._calls = 0

    def _tick(self):
        """True on the invocations where the program may run (every
        sample_every calls, starting with the first)."""
        tick = self._calls % self.sample_every == 0
        self._calls += 1
        return tick

    def _prev_metric(self, t):
        """(W_prev, dt) for the implicit metric-derivative term.

        (None, None) when the term is disabled (the default: the sampled
        metric is treated as piecewise constant, which the source
        formulation allows), before the first accepted solve, and when
        time has not advanced since the cached solve.
        """
        st = self.state
        if not self.use_wdot_term or st.last_W_tilde is None:
            return None, None
        dt = t - st.last_solve_time
        if dt <= 0:
            return None, None
        return st.last_W_tilde, float(dt)

    def _accept(self, solution, t):
        st = self.state
        st.prev_W_tilde = st.last_W_tilde
        st.prev_M = st.last_M
        st.prev_solve_time = st.last_solve_time
        st.last_solution = solution
        st.last_W_tilde = solution.W_tilde
        st.last_M, _ = programs.reconstruct_metric(solution)
        st.last_solve_time = t
        st.last_objective = solution.tau
        st.samples_since_solve = 0
        self.metric_log.append((t, solution))

    def _try_solve(self, prob, t):
        try:
            solution = programs.solve(prob, backend=self.backend)
        except SolverError as exc:
            self.event_log.append({"t": t, "event": "solver_error", "detail": str(exc)})
            return None
        if solution.solver_status in ("optimal", "inaccurate"):
            return solution
        self.event_log.append({"t": t, "event": "infeasible_solve"})
        return None

    def _solve_or_fallback(self, attempts, t):
        """Try program variants in order; fall back to the cached metric.

        ``attempts`` is a list of (problem, event) pairs ordered from the
        fully constrained program to progressively relaxed ones (the
        sufficient input-norm certificate can be infeasible at large
        tracking error, and a stale metric-derivative estimate can poison
        feasibility after a rough transient). The event tags why a
        relaxation was reached.
        """
        for prob, event in attempts:
            if event is not None:
                self.event_log.append({"t": t, "event": event})
            solution = self._try_solve(prob, t)
            if solution is not None:
                self._accept(solution, t)
                self.last_relaxation = event
                return solution.solver_status
        if self.state.last_solution is None:
            raise SolverError(f"metric program failed at t={t} with no cached fallback")
        self.last_relaxation = "fallback"
        return "fallback"

    def _log_step(self, t, resolved, status, report):
        sol = self.state.last_solution
        self.step_log.append({
            "t": float(t),
            "resolve": bool(resolved),
            "status": status,
            "tau": None if sol is None else float(sol.tau),
            "residual_max": None if report is None else float(
                max(report["riccati_max_eig"], -report["rate_min_eig"], 0.0)),
        })

    def write_step_log(self, path):
        with open(path, "w") as fh:
            for entry in self.step_log:
                fh.write(json.dumps(entry) + "\n")


class GeneralCvstemController(_OptimizingController):
    """Metric-optimal tracking control for an input-affine stochastic system.

    ``x_d_fn`` / ``x_d_dot_fn`` give the reference and its derivative;
    ``phi_fn(x, x_d, u_d, t)`` may supply an analytic deviation Jacobian,
    otherwise central differences on the factorization deviation are used.
    Callable as controller(x, t) inside simulate_closed_loop.
    """

    def __init__(self, sde, sdc, params, x_d_fn, x_d_dot_fn, policy=None,
                 backend=None, u_max=None, phi_fn=None, input_margin=1e-6,
                 sample_every=1, sample_period=None, use_wdot_term=False):
        super().__init__(params, policy=policy, backend=backend, u_max=u_max,
                         input_margin=input_margin, sample_every=sample_every,
                         sample_period=sample_period,
                         use_wdot_term=use_wdot_term)
        self.sde = sde
        self.sdc = sdc
        self.x_d_fn = x_d_fn
        self.x_d_dot_fn = x_d_dot_fn
        self.phi_fn = phi_fn
        self._deviation = sdcmod.deviation_from_sdc(sdc, sde, x_d_fn)

    def _phi(self, x, x_d, u_d, t):
        if self.phi_fn is not None:
            return self.phi_fn(x, x_d, u_d, t)
        return sdcmod.finite_difference_phi(self._deviation, x_d, u_d, x - x_d, t)

    def _resolve_at(self, x, x_d, u_d, t, A, B, phi):
        W_prev, w_dt = self._prev_metric(t)
        point = (x, x_d, u_d, t)

        def build(W_prev=None, w_dt=None):
            return programs.assemble_general_program(
                A, B, phi, None, self.params, point=point,
                W_prev=W_prev, dt=w_dt)

        attempts = [(build(W_prev, w_dt), None)]
        if self.u_max is not None:
            e = x - x_d
            R = programs._as_matrix(self.params.R, x, t)
            u_max_eff = self.u_max * (1.0 - self.input_margin)
            programs.add_input_norm_constraint(
                attempts[0][0], e, float(np.linalg.norm(u_d)), u_max_eff, B, R)
            attempts.append((build(W_prev, w_dt), "input_constraint_dropped"))
        if W_prev is not None:
            attempts.append((build(), "wdot_dropped"))
        return self._solve_or_fallback(attempts, t)

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        x_d = np.asarray(self.x_d_fn(t), dtype=float)
        u_d = desired_input(self.sde, x_d, self.x_d_dot_fn(t), t)
        A = sdcmod.combine(self.sdc, x, t)
        B = np.asarray(self.sde.input_matrix(x, t), dtype=float)
        phi = self._phi(x, x_d, u_d, t)
        R = programs._as_matrix(self.params.R, x, t)

        st = self.state
        pol = st.resolve_policy
        tick = self._tick() or st.last_solution is None
        report = None
        resolved = False
        status = "held"
        if st.last_solution is None or (tick and pol.kind == "every_step"):
            status = self._resolve_at(x, x_d, u_d, t, A, B, phi)
            resolved = True
        elif tick:
            status = "cached"
            M, gamma = programs.reconstruct_metric(st.last_solution)
            report = programs.verify_nonconvex_feasibility(
                M, gamma, A, B, R, self.params, phi=phi, tol=pol.residual_tol)
            periodic = (pol.resolve_every is not None
                        and st.samples_since_solve >= pol.resolve_every)
            if periodic or relaxed_resolve_decision(st, report, st.last_objective):
                status = self._resolve_at(x, x_d, u_d, t, A, B, phi)
                resolved = True

        u = general_control(st.last_solution, R, B, x, x_d, u_d)
        if (self.u_max is not None and not resolved
                and (tick or self.last_relaxation is None)
                and np.linalg.norm(u) > self.u_max):
            # the cached gain breaches the input bound at the current error,
            # i.e. the input-norm constraint of the cached program is now
            # violated: that is a re-solve trigger at any step, not just at
            # sample ticks. Skipped when the cached solution already comes
            # from a relaxation without the certificate row (breaches are
            # then expected and saturation handles them until the next tick).
            status = self._resolve_at(x, x_d, u_d, t, A, B, phi)
            resolved = True
            u = general_control(st.last_solution, R, B, x, x_d, u_d)
        if self.u_max is not None:
            norm = float(np.linalg.norm(u))
            if norm > self.u_max * (1.0 - self.input_margin):
                # last resort when the certificate row was dropped or the
                # metric is held between samples
                u = u * (self.u_max * (1.0 - self.input_margin) / norm)
                self.event_log.append({"t": float(t), "event": "input_saturated",
                                       "norm": norm})
        if tick:
            st.samples_since_solve += 1
        self._log_step(t, resolved, status, report)
        return u


class LagrangianCvstemController(_OptimizingController):
    """Composite-variable metric controller for a Lagrangian system.

    State is x = [q; qdot]. ``reference(t)`` must return (q_d, qdot_d,
    qddot_d). When ``clamp_u_max`` is set the commanded input is scaled
    back to the norm ball (hard saturation, logged per event); the
    input-norm program constraint of the general controller does not
    cover the nominal component u_n, so saturation is the honest bound
    here. ``use_clf_min_norm`` swaps u_s for the minimum-norm version.
    """

    def __init__(self, system, gains, params, reference, policy=None,
                 backend=None, clamp_u_max=None, use_clf_min_norm=False,
                 input_set=None, sample_every=1, sample_period=None,
                 use_wdot_term=False):
        super().__init__(params, policy=policy, backend=backend, u_max=None,
                         sample_every=sample_every,
                         sample_period=sample_period,
                         use_wdot_term=use_wdot_term)
        self.system = system
        self.gains = gains
        self.params = params
        self.reference = reference
        self.clamp_u_max = clamp_u_max
        self.use_clf_min_norm = use_clf_min_norm
        self.input_set = input_set

    def _point_matrices(self, q, q_dot, t):
        H = np.atleast_2d(np.asarray(self.system.inertia(q), dtype=float))
        C = np.atleast_2d(np.asarray(self.system.coriolis(q, q_dot), dtype=float))
        Ba = np.atleast_2d(np.asarray(self.system.actuation(q, q_dot), dtype=float))
        K = np.atleast_2d(np.asarray(self.gains.K_t(t), dtype=float))
        A = -np.linalg.solve(H, C + K)
        B = np.linalg.solve(H, Ba)
        return H, C, Ba, K, A, B

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        n = x.shape[0] // 2
        q, q_dot = x[:n], x[n:]
        q_d, q_d_dot, q_d_ddot = self.reference(t)
        H, C, Ba, K, A, B = self._point_matrices(q, q_dot, t)
        R = programs._as_matrix(self.params.R, x, t)

        st = self.state
        pol = st.resolve_policy
        tick = self._tick() or st.last_solution is None
        report = None
        resolved = False
        status = "held"

        def resolve():
            W_prev, w_dt = self._prev_metric(t)
            attempts = [(programs.assemble_lagrangian_program(
                A, B, Ba, H, None, self.params, point=(x, t),
                W_prev=W_prev, dt=w_dt), None)]
            if W_prev is not None:
                attempts.append((programs.assemble_lagrangian_program(
                    A, B, Ba, H, None, self.params, point=(x, t)),
                    "wdot_dropped"))
            return self._solve_or_fallback(attempts, t)

        if st.last_solution is None or (tick and pol.kind == "every_step"):
            status = resolve()
            resolved = True
        elif tick:
            status = "cached"
            # a held metric is constant between solves, so the residual
            # check runs with a zero metric derivative
            M, gamma = programs.reconstruct_metric(st.last_solution)
            report = programs.verify_nonconvex_feasibility(
                M, gamma, A, B, R, self.params, H=H, B_act=Ba,
                tol=pol.residual_tol)
            periodic = (pol.resolve_every is not None
                        and st.samples_since_solve >= pol.resolve_every)
            if periodic or relaxed_resolve_decision(st, report, st.last_objective):
                status = resolve()
                resolved = True

        sol = st.last_solution
        sol.extras["R_eval"] = R
        u, u_n, u_s = lagrangian_control(self.system, self.gains, sol, q, q_dot,
                                         q_d, q_d_dot, q_d_ddot, t)
        if self.use_clf_min_norm:
            M, _ = programs.reconstruct_metric(sol)
            q_dot_r = q_d_dot - self.gains.Lambda @ (q - q_d)
            s = q_dot - q_dot_r
            u_s, _ = min_norm_clf_control(M, self._m_dot_true(), A, B, Ba, H,
                                          s, self.params,
                                          input_set=self.input_set)
            u = u_n + u_s
        if self.clamp_u_max is not None:
            norm = float(np.linalg.norm(u))
            cap = self.clamp_u_max * (1.0 - 1e-12)  # keep float slop inside the ball
            if norm > cap:
                u = u * (cap / norm)
                self.event_log.append({"t": float(t), "event": "input_saturated",
                                       "norm": norm})
        if tick:
            st.samples_since_solve += 1
        self._log_step(t, resolved, status, report)
        return u

    def _m_dot_true(self):
        """Backward-difference derivative of the reconstructed metric."""
        st = self.state
        if st.prev_M is None or st.last_M is None:
            return None
        dt = st.last_solve_time - st.prev_solve_time
        if dt <= 0:
            return None
        return backward_difference_W(st.last_M, st.prev_M, dt)
