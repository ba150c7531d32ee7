"""State-dependent coefficient factorizations f(x,t) = A(x,t) x.

A factorization is a convex combination of candidate matrices A_i. The
module validates candidates against the owning SDE by sampling, builds the
deviation maps around a reference trajectory, and differentiates them
numerically where no analytic Jacobian is supplied.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class SdcForm:
    """Convex combination sum_i rho_i A_i(x,t) of factorization candidates."""

    factors: list
    weights: np.ndarray = None

    def __post_init__(self):
        if not self.factors:
            raise ValueError("need at least one factor")
        if self.weights is None:
            self.weights = np.full(len(self.factors), 1.0 / len(self.factors))
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.factors):
            raise ValueError("weights length != number of factors")
        if np.any(self.weights < -1e-12):
            raise ValueError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")


@dataclass
class SdcDeviation:
    """Deviation maps of a factorization around a reference point.

    delta_A(y, t) = A(y + x_d(t), t) - A(x_d(t), t) and similarly for the
    input matrix; both vanish at y = 0 by construction. ``phi`` optionally
    holds an analytic Jacobian of y -> delta_A(y,t) x_d + delta_B(y,t) u_d.
    """

    delta_A: callable
    delta_B: callable
    phi: callable = None


def combine(sdc, x, t):
    """Evaluate sum_i rho_i A_i(x, t)."""
    x = np.asarray(x, dtype=float)
    out = None
    for rho, factor in zip(sdc.weights, sdc.factors):
        Ai = np.asarray(factor(x, t), dtype=float)
        out = rho * Ai if out is None else out + rho * Ai
    if out.shape[0] != out.shape[1] or out.shape[0] != x.shape[0]:
        raise ValueError(f"factor shape {out.shape} does not match state dim {x.shape[0]}")
    return out


def deviation_from_sdc(sdc, sde, x_d_fn, u_d_fn=None):
    """Build the deviation maps of a factorization around a reference.

    ``x_d_fn(t)`` gives the reference state; ``u_d_fn(t)`` the reference
    input (defaults to zero, which also zeroes the input-matrix term).
    """
    def delta_A(y, t):
        xd = np.asarray(x_d_fn(t), dtype=float)
        return combine(sdc, np.asarray(y, dtype=float) + xd, t) - combine(sdc, xd, t)

    def delta_B(y, t):
        xd = np.asarray(x_d_fn(t), dtype=float)
        y = np.asarray(y, dtype=float)
        return (np.asarray(sde.input_matrix(y + xd, t), dtype=float)
                - np.asarray(sde.input_matrix(xd, t), dtype=float))

    return SdcDeviation(delta_A=delta_A, delta_B=delta_B)


def validate_sdc(sdc, sde, sample_points, tol_sdc=1e-9):
    """Check ||A(rho,x,t) x - f(x,t)|| at each sample point.

    The tolerance is relative: a point passes when the residual is within
    tol_sdc * max(1, ||f(x,t)||). Returns a report dict; failures are
    reported, not raised.
    """
    if not sample_points:
        raise ValueError("sample_points must be non-empty")
    residuals = []
    worst = 0.0
    ok = True
    for x, t in sample_points:
        x = np.asarray(x, dtype=float)
        f = np.asarray(sde.drift(x, t), dtype=float)
        r = float(np.linalg.norm(combine(sdc, x, t) @ x - f))
        scale = max(1.0, float(np.linalg.norm(f)))
        residuals.append({"x": x.tolist(), "t": float(t), "residual": r})
        worst = max(worst, r)
        if r > tol_sdc * scale:
            ok = False
    return {"passed": ok, "max_residual": worst, "tol": tol_sdc,
            "points": residuals}


def finite_difference_phi(deviation, x_d, u_d, y, t, h=None):
    """Central-difference Jacobian of y -> delta_A(y,t) x_d + delta_B(y,t) u_d.

    Step defaults to 1e-6 * (1 + ||y||). Ignores the input-matrix term
    when u_d is None.
    """
    y = np.asarray(y, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    n = y.shape[0]
    if h is None:
        h = 1e-6 * (1.0 + float(np.linalg.norm(y)))
    if h <= 0:
        raise ValueError("h must be positive")

    def g(yy):
        val = np.asarray(deviation.delta_A(yy, t), dtype=float) @ x_d
        if u_d is not None and deviation.delta_B is not None:
            val = val + np.asarray(deviation.delta_B(yy, t), dtype=float) @ np.asarray(u_d, dtype=float)
        return val

    jac = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        jac[:, j] = (g(y + e) - g(y - e)) / (2.0 * h)
    return jac


def controllability_check(A, B):
    """Rank and smallest singular value of the Kalman matrix [B, AB, ...]."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    K = np.hstack(blocks)
    svals = np.linalg.svd(K, compute_uv=False)
    tol = max(K.shape) * np.finfo(float).eps * (svals[0] if svals.size else 0.0)
    rank = int(np.sum(svals > tol))
    return {"rank": rank, "sigma_min": float(svals[n - 1]),
            "full_rank": rank == n}
