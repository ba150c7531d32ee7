"""The two experiment plants, baseline controllers, and config loading.

Attitude: rigid-body rotation in modified Rodrigues parameters with an
exact factorization of the second-order dynamics and shadow-set
switching at the unit norm. Formation: p point agents in a circularly
rotating frame with Clohessy-Wiltshire-style relative dynamics, ring
synchronization coupling inside the composite variable, and a stacked
all-ones force disturbance. Plant constants the source experiments defer
to their references (inertia, agent mass, orbit rate) are documented
fixed values here; only controller-to-controller ratios on the same
plant are claimed by the acceptance suite.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import tomli

from . import controller as ctrlmod
from . import programs
from .sdc import SdcForm
from .sim import SdeDefinition, simulate_closed_loop


class ConfigError(ValueError):
    pass


@dataclass
class LagrangianSystem:
    """H(q) qddot + C(q, qdot) qdot + G(q) = B_act u + diffusion noise."""

    inertia: callable
    coriolis: callable
    gravity: callable
    actuation: callable
    diffusion: callable
    dof: int
    dim_input: int
    dim_noise: int

    def to_sde(self):
        """First-order form on x = [q; qdot]."""
        n = self.dof

        def drift(x, t):
            q, q_dot = x[:n], x[n:]
            H = self.inertia(q)
            rhs = -(self.coriolis(q, q_dot) @ q_dot) - self.gravity(q)
            return np.concatenate([q_dot, np.linalg.solve(H, rhs)])

        def input_matrix(x, t):
            q, q_dot = x[:n], x[n:]
            top = np.zeros((n, self.dim_input))
            return np.vstack([top, np.linalg.solve(self.inertia(q),
                                                   self.actuation(q, q_dot))])

        def diffusion(x, t):
            q = x[:n]
            G = np.asarray(self.diffusion(x, t), dtype=float)
            if G.ndim == 1:
                G = G[:, None]
            return np.vstack([np.zeros((n, G.shape[1])),
                              np.linalg.solve(self.inertia(q), G)])

        return SdeDefinition(drift=drift, input_matrix=input_matrix,
                             diffusion=diffusion, dim_state=2 * n,
                             dim_input=self.dim_input, dim_noise=self.dim_noise)


def skew_symmetry_defect(system, q, q_dot, z, h=1e-6):
    """|z^T (H_dot - 2C) z| with H_dot a finite difference along q_dot."""
    q = np.asarray(q, dtype=float)
    q_dot = np.asarray(q_dot, dtype=float)
    H_dot = (np.asarray(system.inertia(q + h * q_dot), dtype=float)
             - np.asarray(system.inertia(q - h * q_dot), dtype=float)) / (2.0 * h)
    C = np.asarray(system.coriolis(q, q_dot), dtype=float)
    return float(abs(z @ ((H_dot - 2.0 * C) @ z)))


def skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


@dataclass
class Reference:
    """Bundle of reference maps; position(t) etc. return stacked vectors."""

    position: callable
    velocity: callable
    acceleration: callable

    def __call__(self, t):
        return self.position(t), self.velocity(t), self.acceleration(t)

    def state(self, t):
        return np.concatenate([self.position(t), self.velocity(t)])

    def state_dot(self, t):
        return np.concatenate([self.velocity(t), self.acceleration(t)])


# ---------------------------------------------------------------------------
# attitude benchmark

ATTITUDE_J = np.diag([150.0, 100.0, 120.0])
ATTITUDE_X0 = np.array([0.9, -0.9, 0.7, 0.6, 0.7, -0.5])
ATTITUDE_DIFFUSION = 0.2 * np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])[:, None]


def _mrp_B(q):
    qq = float(q @ q)
    return (1.0 - qq) * np.eye(3) + 2.0 * skew(q) + 2.0 * np.outer(q, q)


def _mrp_Z(q):
    return _mrp_B(q) / 4.0


def _mrp_Z_inv(q):
    qq = float(q @ q)
    return 4.0 * _mrp_B(q).T / (1.0 + qq) ** 2


def _mrp_Z_dot(q, q_dot):
    return (-2.0 * float(q @ q_dot) * np.eye(3) + 2.0 * skew(q_dot)
            + 2.0 * (np.outer(q_dot, q) + np.outer(q, q_dot))) / 4.0


def _attitude_A22(q, q_dot):
    Zi = _mrp_Z_inv(q)
    Z = _mrp_Z(q)
    omega = Zi @ q_dot
    J = ATTITUDE_J
    return _mrp_Z_dot(q, q_dot) @ Zi - Z @ np.linalg.solve(J, skew(omega) @ J) @ Zi


def attitude_system():
    """(SdeDefinition, SdcForm, Reference) for the rigid-body benchmark.

    State x = [q; qdot] in modified Rodrigues parameters. The single
    factorization A(x) = [[0, I], [0, A22(x)]] is exact (zero residual)
    because the drift depends on the state only through qdot.
    """

    def drift(x, t):
        q, q_dot = x[:3], x[3:]
        return np.concatenate([q_dot, _attitude_A22(q, q_dot) @ q_dot])

    def input_matrix(x, t):
        q = x[:3]
        return np.vstack([np.zeros((3, 3)),
                          _mrp_Z(q) @ np.linalg.inv(ATTITUDE_J)])

    def diffusion(x, t):
        return ATTITUDE_DIFFUSION

    sde = SdeDefinition(drift=drift, input_matrix=input_matrix,
                        diffusion=diffusion, dim_state=6, dim_input=3,
                        dim_noise=1)

    def A_factor(x, t):
        q, q_dot = x[:3], x[3:]
        A = np.zeros((6, 6))
        A[:3, 3:] = np.eye(3)
        A[3:, 3:] = _attitude_A22(q, q_dot)
        return A

    sdc = SdcForm(factors=[A_factor])

    w1, w2 = 2.0 * np.pi * 0.1, 2.0 * np.pi * 0.2

    def q_d(t):
        return np.array([0.3 * np.sin(w1 * t),
                         0.2 * np.sin(w2 * t + np.pi / 6.0), 0.0])

    def q_d_dot(t):
        return np.array([0.3 * w1 * np.cos(w1 * t),
                         0.2 * w2 * np.cos(w2 * t + np.pi / 6.0), 0.0])

    def q_d_ddot(t):
        return np.array([-0.3 * w1**2 * np.sin(w1 * t),
                         -0.2 * w2**2 * np.sin(w2 * t + np.pi / 6.0), 0.0])

    return sde, sdc, Reference(q_d, q_d_dot, q_d_ddot)


def mrp_shadow_step(x, t):
    """Switch to the shadow parameter set when ||q|| exceeds 1."""
    q, q_dot = x[:3], x[3:]
    qq = float(q @ q)
    if qq <= 1.0:
        return x
    q_new = -q / qq
    q_dot_new = -q_dot / qq + 2.0 * q * float(q @ q_dot) / qq**2
    return np.concatenate([q_new, q_dot_new])


# ---------------------------------------------------------------------------
# formation benchmark

def ring_laplacian(p):
    L = 2.0 * np.eye(p)
    for j in range(p):
        L[j, (j + 1) % p] -= 1.0
        L[j, (j - 1) % p] -= 1.0
    return L


def formation_system(num_agents=5, mass=1.0, orbit_period=200.0,
                     K1=5.0, K2=2.0, Lambda=1.0, radius=0.5):
    """(LagrangianSystem, Reference, LagrangianGains) for the formation.

    Each agent is a unit-mass point in the rotating frame: H = I,
    C = 2 w * skew-block (Coriolis), gravity/centrifugal terms of the
    relative-orbit linearization, full actuation. The composite variable
    carries the synchronization: qdot_r uses Lambda + K2 * (L_ring x I3)
    on the position error, and K1 is the tracking gain of the composite
    feedback. References place the agents on a circle of ``radius`` with
    evenly spaced phases; one orbit spans ``orbit_period``.
    """
    if num_agents < 2:
        raise ValueError("need at least 2 agents")
    p = num_agents
    n = 3 * p
    w = 2.0 * np.pi / orbit_period
    m = mass

    C_agent = 2.0 * m * w * np.array([[0.0, -1.0, 0.0],
                                      [1.0, 0.0, 0.0],
                                      [0.0, 0.0, 0.0]])
    C_full = np.kron(np.eye(p), C_agent)

    def inertia(q):
        return m * np.eye(n)

    def coriolis(q, q_dot):
        return C_full

    def gravity(q):
        g = np.zeros(n)
        for j in range(p):
            x, _, z = q[3 * j:3 * j + 3]
            g[3 * j] = -3.0 * m * w**2 * x
            g[3 * j + 2] = m * w**2 * z
        return g

    def actuation(q, q_dot):
        return np.eye(n)

    def diffusion(x, t):
        return np.ones((n, 1))

    system = LagrangianSystem(inertia=inertia, coriolis=coriolis,
                              gravity=gravity, actuation=actuation,
                              diffusion=diffusion, dof=n, dim_input=n,
                              dim_noise=1)

    phases = 2.0 * np.pi * np.arange(p) / p

    def q_d(t):
        out = np.zeros(n)
        out[0::3] = radius * np.sin(w * t + phases)
        out[1::3] = radius * np.cos(w * t + phases)
        return out

    def q_d_dot(t):
        out = np.zeros(n)
        out[0::3] = radius * w * np.cos(w * t + phases)
        out[1::3] = -radius * w * np.sin(w * t + phases)
        return out

    def q_d_ddot(t):
        out = np.zeros(n)
        out[0::3] = -radius * w**2 * np.sin(w * t + phases)
        out[1::3] = -radius * w**2 * np.cos(w * t + phases)
        return out

    Lambda_eff = Lambda * np.eye(n) + K2 * np.kron(ring_laplacian(p), np.eye(3))
    gains = ctrlmod.LagrangianGains(Lambda=Lambda_eff,
                                    K_t=lambda t: K1 * np.eye(n))
    return system, Reference(q_d, q_d_dot, q_d_ddot), gains


# ---------------------------------------------------------------------------
# baseline controllers

def pid_control(K_P, K_I, K_D, e, e_int, e_dot):
    """-(K_P e + K_I int_e + K_D e_dot)."""
    return -(np.atleast_2d(K_P) @ e + np.atleast_2d(K_I) @ e_int
             + np.atleast_2d(K_D) @ e_dot)


class PidController:
    """PID on the configuration error of an [q; qdot] state.

    The integral state advances by the controller sampling period and is
    clamped componentwise at +-10 u_max/||K_I|| when both are set.
    """

    def __init__(self, K_P, K_I, K_D, reference, dt, dof, u_max=None):
        self.K_P = np.atleast_2d(np.asarray(K_P, dtype=float))
        self.K_I = np.atleast_2d(np.asarray(K_I, dtype=float))
        self.K_D = np.atleast_2d(np.asarray(K_D, dtype=float))
        self.reference = reference
        self.dt = float(dt)
        self.dof = dof
        self.e_int = np.zeros(dof)
        ki_norm = float(np.linalg.norm(self.K_I, 2))
        self.int_clamp = 10.0 * u_max / ki_norm if (u_max and ki_norm > 0) else None

    def __call__(self, x, t):
        q_d, q_d_dot, _ = self.reference(t)
        e = x[:self.dof] - q_d
        e_dot = x[self.dof:] - q_d_dot
        self.e_int = self.e_int + e * self.dt
        if self.int_clamp is not None:
            self.e_int = np.clip(self.e_int, -self.int_clamp, self.int_clamp)
        return pid_control(self.K_P, self.K_I, self.K_D, e, self.e_int, e_dot)


class NominalLagrangianController:
    """Feedback-linearizing baseline: u_n alone, no stochastic term."""

    def __init__(self, system, gains, reference):
        self.system = system
        self.gains = gains
        self.reference = reference

    def __call__(self, x, t):
        n = self.system.dof
        q_d, q_d_dot, q_d_ddot = self.reference(t)
        u, _, _ = ctrlmod.lagrangian_control(
            self.system, self.gains, None, x[:n], x[n:], q_d, q_d_dot,
            q_d_ddot, t)
        return u


# ---------------------------------------------------------------------------
# benchmark configuration and single runs

_TOP_KEYS = {
    "benchmark", "controllers", "controller", "n_runs", "horizon", "dt_sim",
    "dt_ctrl", "u_max", "alpha", "R", "nu_max", "resolve", "resolve_every",
    "gains", "out", "seed_base", "m_x", "m_xx", "eps", "noise_scale",
}
_PID_KEYS = {"K_P", "K_I", "K_D"}
_FORMATION_KEYS = {
    "n_agents", "mass", "orbit_period", "K1", "K2", "Lambda", "radius",
    "alpha_ell", "alpha_gamma", "eps_ell", "ell_x", "ell_xx", "k_lower",
}
_BENCHMARKS = ("attitude", "formation")
_CONTROLLERS = ("cvstem", "pid", "nominal")


@dataclass
class BenchmarkConfig:
    """One (benchmark, controller, dt_ctrl) cell of an experiment.

    dt_sim is the integration step; every controller is invoked once per
    step. dt_ctrl is the sampling period of the optimizing controllers:
    the metric program runs at most every dt_ctrl seconds and its output
    is held in between, while the feedback law itself is evaluated at the
    integration rate. Classical controllers have no program to sample and
    ignore dt_ctrl.
    """

    which: str
    controller: str
    horizon: float
    dt_sim: float
    dt_ctrl: float
    u_max: float = None
    alpha: float = 0.35
    R: float = 1.0
    nu_max: float = None
    resolve: str = "every_step"
    resolve_every: int = None
    m_x: float = 0.0
    m_xx: float = 0.0
    eps: float = 1.0
    noise_scale: float = 1.0
    pid_gains: dict = field(default_factory=dict)
    formation: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.which not in _BENCHMARKS:
            raise ConfigError(f"unknown benchmark {self.which!r}")
        if self.controller not in _CONTROLLERS:
            raise ConfigError(f"unknown controller {self.controller!r}")
        ratio = self.dt_ctrl / self.dt_sim
        if self.dt_ctrl < self.dt_sim or abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError(
                f"dt_ctrl={self.dt_ctrl} must be an integer multiple of dt_sim={self.dt_sim}")

    @property
    def control_every(self):
        return int(round(self.dt_ctrl / self.dt_sim))


def _check_keys(table, allowed, where):
    for key in table:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")


def load_config(path):
    """Parse and key-validate a TOML or JSON experiment config.

    Every key must be known; unknown keys raise ConfigError naming the
    offending key (no silent defaults).
    """
    text = open(path, "rb").read()
    if str(path).endswith(".json"):
        cfg = json.loads(text.decode())
    else:
        cfg = tomli.loads(text.decode())
    _check_keys(cfg, _TOP_KEYS, "config")
    gains = cfg.get("gains", {})
    _check_keys(gains, {"pid", "formation"}, "gains")
    _check_keys(gains.get("pid", {}), _PID_KEYS, "gains.pid")
    _check_keys(gains.get("formation", {}), _FORMATION_KEYS, "gains.formation")
    if "benchmark" in cfg and cfg["benchmark"] not in _BENCHMARKS:
        raise ConfigError(f"unknown benchmark {cfg['benchmark']!r}")
    for ctrl in cfg.get("controllers", []):
        if ctrl not in _CONTROLLERS:
            raise ConfigError(f"unknown controller {ctrl!r}")
    if "controller" in cfg and cfg["controller"] not in _CONTROLLERS:
        raise ConfigError(f"unknown controller {cfg['controller']!r}")
    return cfg


def benchmark_config(cfg, controller, dt_ctrl):
    """BenchmarkConfig for one (controller, dt_ctrl) cell of an experiment."""
    return BenchmarkConfig(
        which=cfg["benchmark"],
        controller=controller,
        horizon=float(cfg["horizon"]),
        dt_sim=float(cfg["dt_sim"]),
        dt_ctrl=float(dt_ctrl),
        u_max=float(cfg["u_max"]) if "u_max" in cfg else None,
        alpha=float(cfg.get("alpha", 0.35)),
        R=float(cfg.get("R", 1.0)),
        nu_max=float(cfg["nu_max"]) if "nu_max" in cfg else None,
        resolve=cfg.get("resolve", "every_step"),
        resolve_every=cfg.get("resolve_every"),
        m_x=float(cfg.get("m_x", 0.0)),
        m_xx=float(cfg.get("m_xx", 0.0)),
        eps=float(cfg.get("eps", 1.0)),
        noise_scale=float(cfg.get("noise_scale", 1.0)),
        pid_gains=dict(cfg.get("gains", {}).get("pid", {})),
        formation=dict(cfg.get("gains", {}).get("formation", {})),
    )


def _scale_noise(sde, scale):
    if scale == 1.0:
        return sde
    inner = sde.diffusion
    return SdeDefinition(drift=sde.drift, input_matrix=sde.input_matrix,
                         diffusion=lambda x, t: scale * np.asarray(inner(x, t)),
                         dim_state=sde.dim_state, dim_input=sde.dim_input,
                         dim_noise=sde.dim_noise)


def _attitude_controller(config, sde, sdc, ref):
    if config.controller == "pid":
        g = config.pid_gains
        return PidController(
            g.get("K_P", 1300.0) * np.eye(3), g.get("K_I", 300.0) * np.eye(3),
            g.get("K_D", 1300.0) * np.eye(3), ref, config.dt_sim, dof=3,
            u_max=config.u_max)
    if config.controller == "nominal":
        raise ConfigError(
            "controller 'nominal' requires a Lagrangian benchmark; "
            "the attitude comparison uses 'cvstem' and 'pid'")
    nu_max = config.nu_max if config.nu_max is not None else 3e6
    params = programs.CvstemParams.from_bounds(
        alpha=config.alpha, eps=config.eps, m_x=config.m_x, m_xx=config.m_xx,
        g_u=config.noise_scale * float(np.linalg.norm(ATTITUDE_DIFFUSION)),
        R=config.R * np.eye(3), nu_max=nu_max)
    policy = ctrlmod.ResolvePolicy(kind=config.resolve,
                                   resolve_every=config.resolve_every)
    return ctrlmod.GeneralCvstemController(
        sde, sdc, params, ref.state, ref.state_dot, policy=policy,
        u_max=config.u_max, sample_every=config.control_every,
        sample_period=config.dt_ctrl)


def _formation_controller(config, system, ref, gains):
    f = config.formation
    n = system.dof
    if config.controller == "pid":
        g = config.pid_gains
        return PidController(
            g.get("K_P", 7.0) * np.eye(n), g.get("K_I", 0.0) * np.eye(n),
            g.get("K_D", 11.0) * np.eye(n), ref, config.dt_sim, dof=n,
            u_max=None)
    if config.controller == "nominal":
        return NominalLagrangianController(system, gains, ref)
    mass = f.get("mass", 1.0)
    nu_max = config.nu_max if config.nu_max is not None else 25.0
    params = programs.LagrangianParams.from_bounds(
        alpha_ell=f.get("alpha_ell", 0.1), eps_ell=f.get("eps_ell", 1.0),
        ell_x=f.get("ell_x", 0.0), ell_xx=f.get("ell_xx", 0.0),
        g_B=config.noise_scale * np.sqrt(n) / mass,
        k_lower=f.get("k_lower", 0.99 * f.get("K1", 5.0)),
        h_max=mass, R=config.R * np.eye(n), nu_max=nu_max)
    policy = ctrlmod.ResolvePolicy(kind=config.resolve,
                                   resolve_every=config.resolve_every)
    return ctrlmod.LagrangianCvstemController(
        system, gains, params, ref, policy=policy, clamp_u_max=config.u_max,
        sample_every=config.control_every, sample_period=config.dt_ctrl)


def run_single(config, seed):
    """One closed-loop benchmark run; fully determined by (config, seed)."""
    root = np.random.SeedSequence(seed)
    init_seq, noise_seq = root.spawn(2)
    if config.which == "attitude":
        sde, sdc, ref = attitude_system()
        sde = _scale_noise(sde, config.noise_scale)
        controller = _attitude_controller(config, sde, sdc, ref)
        record = simulate_closed_loop(
            sde, controller, ref.state, config.horizon, config.dt_sim,
            seed=noise_seq, x0=ATTITUDE_X0, post_step=mrp_shadow_step)
    else:
        f = config.formation
        system, ref, gains = formation_system(
            num_agents=int(f.get("n_agents", 5)), mass=f.get("mass", 1.0),
            orbit_period=f.get("orbit_period", config.horizon),
            K1=f.get("K1", 5.0), K2=f.get("K2", 2.0),
            Lambda=f.get("Lambda", 1.0), radius=f.get("radius", 0.5))
        n = system.dof
        rng = np.random.default_rng(init_seq)
        x0 = np.zeros(2 * n)
        x0[:n] = rng.uniform(-0.2, 0.2, size=n)
        controller = _formation_controller(config, system, ref, gains)
        record = simulate_closed_loop(
            _scale_noise(system.to_sde(), config.noise_scale), controller,
            ref.state, config.horizon, config.dt_sim, seed=noise_seq, x0=x0)
    record.seed = seed
    return record
