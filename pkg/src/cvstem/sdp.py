"""Solver-agnostic semidefinite programs: affine PSD blocks, linear cost.

The assembler modules build an SdpProblem out of symmetric-matrix and
scalar variables, affine matrix blocks required to be PSD, and affine
scalar rows required to be nonnegative. Backends translate that carrier
into a concrete conic solve: Clarabel (default), SCS, or a small dense
log-barrier method that keeps the test suite independent of compiled
solver wheels.

Symmetric matrix variables are packed in upper-triangle column-major
order; backend-specific scaled vectorizations (sqrt(2) off-diagonals,
upper vs. lower triangle) are handled at translation time.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse


class SolverError(RuntimeError):
    pass


def _tri_count(n):
    return n * (n + 1) // 2


@dataclass
class Variable:
    name: str
    kind: str  # "scalar" | "symmetric"
    n: int
    offset: int

    @property
    def size(self):
        return 1 if self.kind == "scalar" else _tri_count(self.n)


def svec_indices(p, lower=False):
    """(rows, cols) of the packed triangle in column-major order."""
    rows, cols = [], []
    for j in range(p):
        rng = range(j, p) if lower else range(j + 1)
        for i in rng:
            rows.append(i)
            cols.append(j)
    return np.array(rows), np.array(cols)


def svec(M, lower=False, offdiag_scale=np.sqrt(2.0)):
    """Pack a symmetric matrix into its scaled triangle vector."""
    r, c = svec_indices(M.shape[0], lower=lower)
    v = M[r, c].astype(float).copy()
    v[r != c] *= offdiag_scale
    return v


def smat(v, p, lower=False, offdiag_scale=np.sqrt(2.0)):
    """Inverse of svec."""
    r, c = svec_indices(p, lower=lower)
    M = np.zeros((p, p))
    v = np.asarray(v, dtype=float).copy()
    off = r != c
    v[off] = v[off] / offdiag_scale
    M[r, c] = v
    M[c, r] = v
    return M


class Block:
    """Affine symmetric-matrix expression required to be PSD.

    Terms are accumulated symbolically and compiled to one constant
    matrix plus one coefficient matrix per decision-vector entry.
    """

    def __init__(self, side, tag):
        self.side = side
        self.tag = tag
        self.terms = []

    def add_const(self, C):
        self.terms.append(("const", np.asarray(C, dtype=float)))
        return self

    def add_scalar(self, var_name, C):
        """Add C * x for a scalar variable x."""
        self.terms.append(("scalar", var_name, np.asarray(C, dtype=float)))
        return self

    def add_matrix(self, var_name, L=None, R=None, symmetrize=False):
        """Add L @ X @ R for a symmetric matrix variable X.

        With ``symmetrize`` the transpose R^T X L^T is added too, which is
        how terms like A W + W A^T and off-diagonal placements enter.
        """
        self.terms.append(("mat", var_name, L, R, symmetrize))
        return self

    def add_raw(self, const, coeffs):
        """Precompiled content (used by deserialization)."""
        self.terms.append(("raw", np.asarray(const, dtype=float),
                           {int(k): np.asarray(v, dtype=float) for k, v in coeffs.items()}))
        return self


class SdpProblem:
    """Variables, PSD blocks, nonnegative rows, and a linear objective."""

    def __init__(self):
        self.variables = {}
        self._order = []
        self.blocks = []
        self.nonneg = []  # (const, {flat index: coeff}, tag)
        self.objective = {}  # flat index -> coeff, minimized
        self._num = 0

    # -- variables ----------------------------------------------------
    def add_scalar_var(self, name):
        return self._add_var(name, "scalar", 1)

    def add_symmetric_var(self, name, n):
        return self._add_var(name, "symmetric", n)

    def _add_var(self, name, kind, n):
        if name in self.variables:
            raise ValueError(f"duplicate variable {name!r}")
        v = Variable(name=name, kind=kind, n=n, offset=self._num)
        self.variables[name] = v
        self._order.append(name)
        self._num += v.size
        return v

    @property
    def num_vars(self):
        return self._num

    # -- constraints and objective -------------------------------------
    def new_block(self, side, tag):
        b = Block(side, tag)
        self.blocks.append(b)
        return b

    def add_nonneg(self, const, coeffs, tag):
        """Affine row const + sum coeff_name * scalar_var >= 0."""
        flat = {}
        for name, c in coeffs.items():
            v = self.variables[name]
            if v.kind != "scalar":
                raise ValueError(f"nonneg rows take scalar variables, got {name!r}")
            flat[v.offset] = flat.get(v.offset, 0.0) + float(c)
        self.nonneg.append((float(const), flat, tag))

    def set_objective(self, coeffs):
        """Minimize sum coeff_name * scalar_var."""
        self.objective = {}
        for name, c in coeffs.items():
            v = self.variables[name]
            if v.kind != "scalar":
                raise ValueError("objective must be over scalar variables")
            self.objective[v.offset] = float(c)

    # -- compilation ----------------------------------------------------
    def compile_block(self, block):
        """Return (C0, {flat index: symmetric coefficient matrix})."""
        p = block.side
        C0 = np.zeros((p, p))
        coeffs = {}

        def bump(g, T):
            if g in coeffs:
                coeffs[g] = coeffs[g] + T
            else:
                coeffs[g] = T

        for term in block.terms:
            kind = term[0]
            if kind == "const":
                C0 += term[1]
            elif kind == "scalar":
                _, name, C = term
                bump(self.variables[name].offset, C.copy())
            elif kind == "mat":
                _, name, L, R, symm = term
                v = self.variables[name]
                q = v.n
                L = np.eye(p, q) if L is None else np.asarray(L, dtype=float)
                R = np.eye(q, p) if R is None else np.asarray(R, dtype=float)
                for j in range(q):
                    for i in range(j + 1):
                        # basis e_i e_j^T + e_j e_i^T (single e_i e_i^T on the diagonal)
                        T = np.outer(L[:, i], R[j, :])
                        if i != j:
                            T = T + np.outer(L[:, j], R[i, :])
                        if symm:
                            T = T + T.T
                        bump(v.offset + _tri_count(j) + i, T)
            elif kind == "raw":
                _, C, raw = term
                C0 += C
                for g, T in raw.items():
                    bump(g, T.copy())
            else:
                raise ValueError(f"unknown term kind {kind!r}")

        sym_err = np.linalg.norm(C0 - C0.T)
        for g, T in coeffs.items():
            sym_err = max(sym_err, np.linalg.norm(T - T.T))
        if sym_err > 1e-9 * max(1.0, np.linalg.norm(C0)):
            raise ValueError(f"block {block.tag!r} compiled to a non-symmetric expression")
        C0 = 0.5 * (C0 + C0.T)
        coeffs = {g: 0.5 * (T + T.T) for g, T in coeffs.items()}
        return C0, coeffs

    def compiled(self):
        if not hasattr(self, "_compiled_cache") or len(self._compiled_cache) != len(self.blocks):
            self._compiled_cache = [self.compile_block(b) for b in self.blocks]
        return self._compiled_cache

    # -- evaluation -----------------------------------------------------
    def evaluate_block(self, k, x):
        C0, coeffs = self.compiled()[k]
        out = C0.copy()
        for g, T in coeffs.items():
            out = out + x[g] * T
        return out

    def evaluate_nonneg(self, x):
        return np.array([c0 + sum(a * x[g] for g, a in flat.items())
                         for c0, flat, _ in self.nonneg])

    def extract(self, name, x):
        v = self.variables[name]
        if v.kind == "scalar":
            return float(x[v.offset])
        return smat(x[v.offset:v.offset + v.size], v.n, offdiag_scale=1.0)

    def objective_value(self, x):
        return sum(c * x[g] for g, c in self.objective.items())

    # -- serialization ----------------------------------------------------
    def to_json(self):
        def triplets(M, tol=0.0):
            out = []
            p = M.shape[0]
            for i in range(p):
                for j in range(i, p):
                    if abs(M[i, j]) > tol:
                        out.append([i, j, M[i, j]])
            return out

        blocks = []
        for b, (C0, coeffs) in zip(self.blocks, self.compiled()):
            blocks.append({
                "tag": b.tag,
                "side": b.side,
                "const": triplets(C0),
                "coeffs": [{"index": g, "entries": triplets(T)}
                           for g, T in sorted(coeffs.items())],
            })
        doc = {
            "variables": [{"name": v.name, "kind": v.kind, "n": v.n,
                           "offset": v.offset}
                          for v in (self.variables[n] for n in self._order)],
            "objective": [[g, c] for g, c in sorted(self.objective.items())],
            "nonneg": [{"const": c0, "coeffs": [[g, a] for g, a in sorted(flat.items())],
                        "tag": tag}
                       for c0, flat, tag in self.nonneg],
            "psd_blocks": blocks,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        prob = cls()
        for v in doc["variables"]:
            if v["kind"] == "scalar":
                prob.add_scalar_var(v["name"])
            else:
                prob.add_symmetric_var(v["name"], v["n"])
        prob.objective = {int(g): float(c) for g, c in doc["objective"]}
        for row in doc["nonneg"]:
            prob.nonneg.append((float(row["const"]),
                                {int(g): float(a) for g, a in row["coeffs"]},
                                row["tag"]))

        def from_triplets(entries, p):
            M = np.zeros((p, p))
            for i, j, v in entries:
                M[int(i), int(j)] = v
                M[int(j), int(i)] = v
            return M

        for b in doc["psd_blocks"]:
            blk = prob.new_block(b["side"], b["tag"])
            blk.add_raw(from_triplets(b["const"], b["side"]),
                        {int(c["index"]): from_triplets(c["entries"], b["side"])
                         for c in b["coeffs"]})
        return prob


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

def _conic_data(problem, lower=False):
    """Stack nonneg rows then PSD blocks into A x + s = b, s in K."""
    N = problem.num_vars
    rows_A = []
    rows_b = []
    n_lin = len(problem.nonneg)
    for c0, flat, _ in problem.nonneg:
        row = np.zeros(N)
        for g, a in flat.items():
            row[g] = -a
        rows_A.append(row)
        rows_b.append(c0)
    psd_sides = []
    for k, b in enumerate(problem.blocks):
        C0, coeffs = problem.compiled()[k]
        p = b.side
        psd_sides.append(p)
        m = _tri_count(p)
        Ab = np.zeros((m, N))
        for g, T in coeffs.items():
            Ab[:, g] = -svec(T, lower=lower)
        rows_A.append(Ab)
        rows_b.append(svec(C0, lower=lower))
    A = np.vstack([np.atleast_2d(r) for r in rows_A]) if rows_A else np.zeros((0, N))
    b = np.concatenate([np.atleast_1d(r) for r in rows_b]) if rows_b else np.zeros(0)
    q = np.zeros(N)
    for g, c in problem.objective.items():
        q[g] = c
    return A, b, q, n_lin, psd_sides


class ClarabelBackend:
    """Interior-point conic solve via the clarabel wheel."""

    name = "clarabel"

    def __init__(self, tol=1e-9, max_iter=200):
        self.tol = tol
        self.max_iter = max_iter

    def solve(self, problem):
        import clarabel

        A, b, q, n_lin, psd_sides = _conic_data(problem, lower=False)
        N = problem.num_vars
        cones = []
        if n_lin:
            cones.append(clarabel.NonnegativeConeT(n_lin))
        for p in psd_sides:
            cones.append(clarabel.PSDTriangleConeT(p))
        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.max_iter = self.max_iter
        settings.tol_feas = self.tol
        settings.tol_gap_abs = self.tol
        settings.tol_gap_rel = self.tol
        P = sparse.csc_matrix((N, N))
        solver = clarabel.DefaultSolver(P, q, sparse.csc_matrix(A), b, cones, settings)
        t0 = time.perf_counter()
        sol = solver.solve()
        wall = time.perf_counter() - t0
        status = str(sol.status)
        mapping = {
            "Solved": "optimal",
            "AlmostSolved": "inaccurate",
            "PrimalInfeasible": "infeasible",
            "AlmostPrimalInfeasible": "infeasible",
            "DualInfeasible": "inaccurate",
            "AlmostDualInfeasible": "inaccurate",
            "MaxIterations": "inaccurate",
            "MaxTime": "inaccurate",
        }
        if status not in mapping:
            raise SolverError(f"clarabel returned status {status}")
        x = np.asarray(sol.x, dtype=float) if mapping[status] != "infeasible" else None
        return {"status": mapping[status], "x": x,
                "objective": float(sol.obj_val) if x is not None else None,
                "solve_time": wall, "backend": self.name,
                "raw_status": status}


class ScsBackend:
    """First-order conic solve via SCS; looser accuracy than clarabel."""

    name = "scs"

    def __init__(self, tol=1e-9, max_iter=100000):
        self.tol = tol
        self.max_iter = max_iter

    def solve(self, problem):
        import scs

        A, b, q, n_lin, psd_sides = _conic_data(problem, lower=True)
        data = {"A": sparse.csc_matrix(A), "b": b, "c": q}
        cone = {}
        if n_lin:
            cone["l"] = n_lin
        if psd_sides:
            cone["s"] = psd_sides
        t0 = time.perf_counter()
        out = scs.solve(data, cone, verbose=False, eps_abs=self.tol,
                        eps_rel=self.tol, max_iters=self.max_iter)
        wall = time.perf_counter() - t0
        raw = out["info"]["status"].lower()
        if raw.startswith("solved"):
            status = "optimal" if "inaccurate" not in raw else "inaccurate"
        elif "infeasible" in raw:
            status = "infeasible"
        elif "unbounded" in raw:
            status = "inaccurate"
        else:
            raise SolverError(f"scs returned status {out['info']['status']}")
        x = np.asarray(out["x"], dtype=float) if status != "infeasible" else None
        return {"status": status, "x": x,
                "objective": float(problem.objective_value(x)) if x is not None else None,
                "solve_time": wall, "backend": self.name,
                "raw_status": out["info"]["status"]}


class BarrierBackend:
    """Dense log-barrier reference solver for small problems.

    Phase 1 minimizes the uniform slack lambda over {block_i + lambda I >= 0,
    row_j + lambda >= 0} until strictly feasible (or declares infeasibility);
    phase 2 follows the central path of the original objective. Pure numpy:
    slow, but dependency-free and adequate for the unit-test instances.
    """

    name = "barrier"

    def __init__(self, tol=1e-8, mu=10.0, t0=1.0, newton_tol=1e-11,
                 max_newton=80, infeas_tol=1e-7):
        self.tol = tol
        self.mu = mu
        self.t0 = t0
        self.newton_tol = newton_tol
        self.max_newton = max_newton
        self.infeas_tol = infeas_tol

    # barrier value/gradient/hessian of -sum logdet(S_i) - sum log(r_j)
    def _barrier_terms(self, problem, x):
        N = problem.num_vars
        val = 0.0
        grad = np.zeros(N)
        hess = np.zeros((N, N))
        for k in range(len(problem.blocks)):
            S = problem.evaluate_block(k, x)
            try:
                Lc = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                return None
            val -= 2.0 * np.sum(np.log(np.diag(Lc)))
            Sinv = np.linalg.inv(S)
            _, coeffs = problem.compiled()[k]
            idx = sorted(coeffs)
            Ys = [Sinv @ coeffs[g] for g in idx]
            for a, g in enumerate(idx):
                grad[g] -= np.trace(Ys[a])
                for bcol, h in enumerate(idx[:a + 1]):
                    hv = np.sum(Ys[a] * Ys[bcol].T)
                    hess[g, h] += hv
                    if g != h:
                        hess[h, g] += hv
        rows = problem.evaluate_nonneg(x)
        if len(rows) and np.any(rows <= 0):
            return None
        for (c0, flat, _), r in zip(problem.nonneg, rows):
            val -= np.log(r)
            a = np.zeros(N)
            for g, coef in flat.items():
                a[g] = coef
            grad -= a / r
            hess += np.outer(a, a) / (r * r)
        return val, grad, hess

    def _newton(self, problem, x, c, t):
        for _ in range(self.max_newton):
            terms = self._barrier_terms(problem, x)
            if terms is None:
                raise SolverError("barrier iterate left the feasible cone")
            val, grad, hess = terms
            g = t * c + grad
            H = hess + 1e-12 * np.eye(len(x))
            try:
                step = -np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(H, g, rcond=None)[0]
            lam2 = float(-g @ step)
            if lam2 / 2.0 <= self.newton_tol:
                return x
            # backtracking line search on t*c@x + barrier
            f0 = t * float(c @ x) + val
            alpha = 1.0
            for _ in range(60):
                xn = x + alpha * step
                tn = self._barrier_terms(problem, xn)
                if tn is not None and t * float(c @ xn) + tn[0] <= f0 + 1e-4 * alpha * float(g @ step):
                    x = xn
                    break
                alpha *= 0.5
            else:
                return x
        return x

    def _phase1(self, problem):
        aug = SdpProblem()
        for name in problem._order:
            v = problem.variables[name]
            if v.kind == "scalar":
                aug.add_scalar_var(name)
            else:
                aug.add_symmetric_var(name, v.n)
        aug.add_scalar_var("_slack")
        s_off = aug.variables["_slack"].offset
        for b, (C0, coeffs) in zip(problem.blocks, problem.compiled()):
            blk = aug.new_block(b.side, b.tag)
            raw = dict(coeffs)
            raw[s_off] = np.eye(b.side)
            blk.add_raw(C0, raw)
        for c0, flat, tag in problem.nonneg:
            nf = dict(flat)
            nf[s_off] = nf.get(s_off, 0.0) + 1.0
            aug.nonneg.append((c0, nf, tag))
        x = np.zeros(aug.num_vars)
        worst = 0.0
        for k in range(len(problem.blocks)):
            S = problem.evaluate_block(k, x[:problem.num_vars])
            worst = max(worst, -float(np.linalg.eigvalsh(S)[0]))
        for c0, flat, _ in problem.nonneg:
            worst = max(worst, -c0)
        x[s_off] = worst + 1.0
        c = np.zeros(aug.num_vars)
        c[s_off] = 1.0
        t = self.t0
        target = -1e-4  # strictly feasible margin; no need to fully minimize
        for _ in range(40):
            x = self._newton(aug, x, c, t)
            if x[s_off] < target:
                break
            m_total = sum(b.side for b in aug.blocks) + len(aug.nonneg)
            if m_total / t < min(self.infeas_tol, 1e-8):
                break
            t *= self.mu
        return x[:problem.num_vars], float(x[s_off])

    def solve(self, problem):
        t_start = time.perf_counter()
        x, slack = self._phase1(problem)
        if slack >= self.infeas_tol:
            return {"status": "infeasible", "x": None, "objective": None,
                    "solve_time": time.perf_counter() - t_start,
                    "backend": self.name, "raw_status": f"phase1 slack {slack:.3e}"}
        if slack >= -1e-9:
            # feasible but without a usable interior margin
            return {"status": "inaccurate", "x": x,
                    "objective": float(problem.objective_value(x)),
                    "solve_time": time.perf_counter() - t_start,
                    "backend": self.name, "raw_status": f"phase1 slack {slack:.3e}"}
        N = problem.num_vars
        c = np.zeros(N)
        for g, coef in problem.objective.items():
            c[g] = coef
        m_total = sum(b.side for b in problem.blocks) + len(problem.nonneg)
        t = self.t0
        while m_total / t > self.tol:
            x = self._newton(problem, x, c, t)
            t *= self.mu
        x = self._newton(problem, x, c, t)
        return {"status": "optimal", "x": x,
                "objective": float(problem.objective_value(x)),
                "solve_time": time.perf_counter() - t_start,
                "backend": self.name, "raw_status": "central path converged"}


def default_backend(tol=1e-9):
    """Clarabel when importable, then SCS, then the dense barrier."""
    try:
        import clarabel  # noqa: F401
        return ClarabelBackend(tol=tol)
    except ImportError:
        pass
    try:
        import scs  # noqa: F401
        return ScsBackend(tol=tol)
    except ImportError:
        pass
    return BarrierBackend()
