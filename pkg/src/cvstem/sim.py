"""Wiener sampling, Euler-Maruyama integration, and ensemble statistics.

Closed-loop runs integrate dx = (f(x,t) + B(x,t)u) dt + G(x,t) dW with a
fixed step, zero-order hold on the input between controller samples, and
explicitly seeded noise so every trajectory is reproducible from
(config, seed).
"""

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class WienerPath:
    """Pre-sampled Wiener increments, one row per step."""

    dim: int
    dt: float
    increments: np.ndarray  # (steps, dim), each row ~ N(0, dt I)
    seed: object = None


@dataclass
class SdeDefinition:
    """Input-affine Ito SDE dx = f(x,t)dt + B(x,t)u dt + G(x,t)dW.

    ``drift`` must vanish at the origin for the factorization-based
    controllers to apply; ``validate_origin`` can spot-check this.
    """

    drift: callable
    input_matrix: callable
    diffusion: callable
    dim_state: int
    dim_input: int
    dim_noise: int

    def validate_origin(self, times=(0.0,), tol=1e-12):
        x0 = np.zeros(self.dim_state)
        for t in times:
            if np.linalg.norm(self.drift(x0, t)) > tol:
                return False
        return True


@dataclass
class TrajectoryRecord:
    """One closed-loop run: aligned time, state, reference and input logs.

    ``inputs`` repeats the final held input so all sequences share a
    length; ``metric_log`` holds (time, MetricSolution) pairs for runs
    driven by an optimizing controller, and is empty otherwise.
    """

    times: np.ndarray
    states: np.ndarray
    desired_states: np.ndarray
    inputs: np.ndarray
    metric_log: list = field(default_factory=list)
    seed: object = None
    disturbances: np.ndarray = None

    def __post_init__(self):
        n = len(self.times)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        for name in ("states", "desired_states", "inputs"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length != times length")

    def squared_errors(self):
        e = self.states - self.desired_states
        return np.einsum("ij,ij->i", e, e)


def sample_wiener(dim, steps, dt, seed=None):
    """Draw ``steps`` independent increments of a d-dimensional Wiener process.

    Each increment is sqrt(dt) times a standard normal vector. The same
    seed always yields the identical path.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    increments = np.sqrt(dt) * rng.standard_normal((steps, dim))
    return WienerPath(dim=dim, dt=dt, increments=increments, seed=seed)


def euler_maruyama_step(sde, x, u, t, dt, dW):
    """One explicit step x + (f + B u) dt + G dW."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    dW = np.asarray(dW, dtype=float)
    if x.shape != (sde.dim_state,):
        raise ValueError(f"state has shape {x.shape}, expected ({sde.dim_state},)")
    if u.shape != (sde.dim_input,):
        raise ValueError(f"input has shape {u.shape}, expected ({sde.dim_input},)")
    if dW.shape != (sde.dim_noise,):
        raise ValueError(f"dW has shape {dW.shape}, expected ({sde.dim_noise},)")
    f = np.asarray(sde.drift(x, t), dtype=float)
    B = np.asarray(sde.input_matrix(x, t), dtype=float)
    G = np.asarray(sde.diffusion(x, t), dtype=float)
    return x + (f + B @ u) * dt + G @ dW


def simulate_closed_loop(sde, controller, desired, horizon, dt, seed=None,
                         x0=None, control_every=1, post_step=None,
                         disturbance=None):
    """Integrate a controlled SDE over [0, horizon] with fixed step dt.

    ``controller(x, t) -> u`` is sampled every ``control_every`` steps and
    held constant in between (zero-order hold). ``desired(t)`` supplies the
    reference used for error logging. ``post_step`` may remap the state
    after each step (e.g. chart switching); ``disturbance(t)`` adds a
    deterministic n-vector to the drift. A controller exception aborts the
    run with step context attached.
    """
    steps = int(round(horizon / dt))
    if abs(steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError(f"dt={dt} does not divide horizon={horizon}")
    if steps < 1:
        raise ValueError("horizon must cover at least one step")
    if control_every < 1:
        raise ValueError("control_every must be >= 1")

    path = sample_wiener(sde.dim_noise, steps, dt, seed=seed)
    x = np.zeros(sde.dim_state) if x0 is None else np.asarray(x0, dtype=float).copy()

    times = np.empty(steps + 1)
    states = np.empty((steps + 1, sde.dim_state))
    desireds = np.empty((steps + 1, sde.dim_state))
    inputs = np.empty((steps + 1, sde.dim_input))
    dists = np.zeros((steps + 1, sde.dim_state)) if disturbance is not None else None

    u = np.zeros(sde.dim_input)
    for k in range(steps):
        t = k * dt
        times[k] = t
        states[k] = x
        desireds[k] = desired(t)
        if k % control_every == 0:
            try:
                u = np.asarray(controller(x, t), dtype=float)
            except Exception as exc:
                raise RuntimeError(
                    f"controller failed at step {k} (t={t:.6g}): {exc}") from exc
        inputs[k] = u
        x_next = euler_maruyama_step(sde, x, u, t, dt, path.increments[k])
        if disturbance is not None:
            d = np.asarray(disturbance(t), dtype=float)
            dists[k] = d
            x_next = x_next + d * dt
        if post_step is not None:
            x_next = post_step(x_next, t + dt)
        x = x_next
    times[steps] = steps * dt
    states[steps] = x
    desireds[steps] = desired(times[steps])
    inputs[steps] = u
    if dists is not None:
        dists[steps] = disturbance(times[steps])

    metric_log = list(getattr(controller, "metric_log", []))
    return TrajectoryRecord(times=times, states=states, desired_states=desireds,
                            inputs=inputs, metric_log=metric_log, seed=seed,
                            disturbances=dists)


def monte_carlo_mse(records):
    """Per-step mean of ||x - x_d||^2 over an ensemble, with standard error.

    Returns (times, mean, stderr). All records must share the time grid.
    """
    if len(records) < 2:
        raise ValueError("need at least 2 records")
    t0 = records[0].times
    for r in records[1:]:
        if len(r.times) != len(t0) or not np.allclose(r.times, t0):
            raise ValueError("records have mismatched time grids")
    sq = np.stack([r.squared_errors() for r in records])
    mean = sq.mean(axis=0)
    stderr = sq.std(axis=0, ddof=1) / np.sqrt(len(records))
    return t0.copy(), mean, stderr


def write_trajectory_csv(record, path):
    """One row per step: t, state, reference, input, squared error."""
    n = record.states.shape[1]
    m = record.inputs.shape[1]
    header = (["t"] + [f"x{i}" for i in range(n)]
              + [f"xd{i}" for i in range(n)]
              + [f"u{i}" for i in range(m)] + ["err_sq"])
    err = record.squared_errors()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(record.times)):
            row = ([f"{record.times[k]:.12g}"]
                   + [f"{v:.12g}" for v in record.states[k]]
                   + [f"{v:.12g}" for v in record.desired_states[k]]
                   + [f"{v:.12g}" for v in record.inputs[k]]
                   + [f"{err[k]:.12g}"])
            w.writerow(row)


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def write_run_manifest(path, config, seed, solver_stats=None):
    """JSON manifest tying a run's outputs to its exact configuration.

    Records the config hash, the seed, solver statistics, and the summary
    conventions (trailing 150-point moving average for smoothed curves,
    last-150-steps steady-state window).
    """
    manifest = {
        "config_hash": config_hash(config),
        "config": config,
        "seed": seed,
        "solver_stats": solver_stats or {},
        "conventions": {
            "smoothing_window": 150,
            "smoothing_alignment": "trailing",
            "steady_state_window": 150,
        },
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return manifest
