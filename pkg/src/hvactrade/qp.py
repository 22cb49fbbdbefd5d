"""Dense convex quadratic programming.

Problems have the form

    minimize    0.5 x'Qx + c'x + offset
    subject to  A_eq x  = b_eq
                A_in x <= b_in

with Q symmetric positive semidefinite.  The solver runs an
over-relaxed operator-splitting iteration on the stacked constraint
system (a single indefinite KKT factorization, reused every step),
then polishes the active set with a direct regularized KKT solve and
iterative refinement.  Iterations start from zero, so repeated solves
of the same problem are bit-identical.

Infeasibility is decided by a linear feasibility phase (smallest
uniform constraint relaxation, solved via linprog) rather than from
the splitting iterates, so the Infeasible status is definitive.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

__all__ = [
    "QpStatus",
    "QpProblem",
    "QpSolution",
    "QpBuilder",
    "Workspace",
    "solve",
    "check_kkt",
    "epigraph_max",
    "dump_problem",
]


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITERATION_LIMIT = "iteration_limit"


def _matrix(m, name, ncols):
    if m is None:
        return np.zeros((0, ncols))
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != ncols:
        raise ValueError(f"{name} must be 2-D with {ncols} columns, got {arr.shape}")
    return arr


def _vector(v, name, length):
    if v is None:
        return np.zeros(length)
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (length,):
        raise ValueError(f"{name} must have shape ({length},), got {arr.shape}")
    return arr


@dataclass
class QpProblem:
    quadratic_term: np.ndarray
    linear_term: np.ndarray
    eq_matrix: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None
    ineq_matrix: np.ndarray | None = None
    ineq_rhs: np.ndarray | None = None
    var_names: list[str] | None = None
    offset: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.quadratic_term, dtype=np.float64)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError(f"quadratic_term must be square, got shape {q.shape}")
        n = q.shape[0]
        c = np.asarray(self.linear_term, dtype=np.float64)
        if c.shape != (n,):
            raise ValueError(f"linear_term must have shape ({n},), got {c.shape}")
        scale = max(1.0, float(np.max(np.abs(q))) if n else 1.0)
        if n and float(np.max(np.abs(q - q.T))) > 1e-9 * scale:
            raise ValueError("quadratic_term must be symmetric")
        # PSD gate: Gershgorin lower bound first, exact eigenvalue as fallback.
        if n:
            diag = np.diag(q)
            gersh = float(np.min(diag - (np.sum(np.abs(q), axis=1) - np.abs(diag))))
            if gersh < -1e-8 * scale:
                lo = float(np.min(np.linalg.eigvalsh(q))) if n <= 2000 else gersh
                if lo < -1e-8 * scale:
                    raise ValueError(
                        f"quadratic_term is not positive semidefinite "
                        f"(smallest eigenvalue estimate {lo:.3e})"
                    )
        self.quadratic_term = q
        self.linear_term = c
        self.eq_matrix = _matrix(self.eq_matrix, "eq_matrix", n)
        self.eq_rhs = _vector(self.eq_rhs, "eq_rhs", self.eq_matrix.shape[0])
        self.ineq_matrix = _matrix(self.ineq_matrix, "ineq_matrix", n)
        self.ineq_rhs = _vector(self.ineq_rhs, "ineq_rhs", self.ineq_matrix.shape[0])
        if self.var_names is not None and len(self.var_names) != n:
            raise ValueError("var_names length must match variable count")
        self.offset = float(self.offset)

    @property
    def n(self) -> int:
        return self.quadratic_term.shape[0]

    @property
    def n_eq(self) -> int:
        return self.eq_matrix.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.ineq_matrix.shape[0]

    def objective_value(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(0.5 * x @ self.quadratic_term @ x + self.linear_term @ x
                     + self.offset)


@dataclass
class QpSolution:
    primal: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    objective: float
    status: QpStatus
    kkt_residual: float
    iterations: int


def check_kkt(problem: QpProblem, solution: QpSolution) -> float:
    """Max-norm KKT residual, recomputed from scratch.

    Covers stationarity, primal feasibility, dual sign, and
    complementary slackness; uses only the problem data and the
    candidate point, no solver internals.
    """
    x = np.asarray(solution.primal, dtype=np.float64)
    grad = problem.quadratic_term @ x + problem.linear_term
    if problem.n_eq:
        grad = grad + problem.eq_matrix.T @ solution.eq_duals
    res = 0.0
    if problem.n_ineq:
        mu = np.asarray(solution.ineq_duals, dtype=np.float64)
        grad = grad + problem.ineq_matrix.T @ mu
        viol = problem.ineq_matrix @ x - problem.ineq_rhs
        res = max(res,
                  float(np.max(np.maximum(viol, 0.0), initial=0.0)),
                  float(np.max(-mu, initial=0.0)),
                  float(np.max(np.abs(mu * viol), initial=0.0)))
    if problem.n_eq:
        res = max(res, float(np.max(np.abs(problem.eq_matrix @ x - problem.eq_rhs))))
    if problem.n:
        res = max(res, float(np.max(np.abs(grad))))
    return res


def _feasibility_gap(problem: QpProblem) -> float:
    """Smallest uniform slack t with A_in x <= b_in + t, A_eq x = b_eq.

    Returns +inf when even the equality system is inconsistent.  A gap
    above tolerance certifies infeasibility of the original problem.
    """
    n = problem.n
    cost = np.zeros(n + 1)
    cost[-1] = 1.0
    a_ub = b_ub = None
    if problem.n_ineq:
        a_ub = np.hstack([problem.ineq_matrix, -np.ones((problem.n_ineq, 1))])
        b_ub = problem.ineq_rhs
    a_eq = b_eq = None
    if problem.n_eq:
        a_eq = np.hstack([problem.eq_matrix, np.zeros((problem.n_eq, 1))])
        b_eq = problem.eq_rhs
    bounds = [(None, None)] * n + [(-1.0, None)]
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
                  bounds=bounds, method="highs")
    if res.status == 2:  # equality system inconsistent
        return float("inf")
    if not res.success:
        return float("inf")
    return float(res.fun)


class Workspace:
    """Reusable solve state for one problem structure.

    Keeps the KKT factorization and the last iterates, so a sequence of
    solves that only change the linear term (the trading subproblem
    across iterations) pays for one factorization and warm-starts each
    subsequent solve.
    """

    def __init__(self, problem: QpProblem, rho: float = 0.1,
                 sigma: float = 1e-6, alpha: float = 1.6):
        self.problem = problem
        self._sigma = float(sigma)
        self._alpha = float(alpha)
        n = problem.n
        self._A = np.vstack([problem.eq_matrix, problem.ineq_matrix])
        m = self._A.shape[0]
        self._me = problem.n_eq
        self._upper = np.concatenate([problem.eq_rhs, problem.ineq_rhs])
        self._lower = np.concatenate(
            [problem.eq_rhs, np.full(problem.n_ineq, -np.inf)])
        self._rho_base = float(rho)
        self._rho = self._make_rho(self._rho_base)
        self._x = np.zeros(n)
        self._z = np.clip(np.zeros(m), self._lower, self._upper)
        self._y = np.zeros(m)
        self._lu = None
        self._have_solution = False
        self._polish_cache = {}  # active-set mask bytes -> (lu, rows) or None

    def _make_rho(self, base):
        rho = np.full(self._A.shape[0], base)
        rho[:self._me] *= 1e3  # stiffer weight keeps equality rows tight
        return np.clip(rho, 1e-6, 1e6)

    def _factorize(self):
        n = self.problem.n
        m = self._A.shape[0]
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = self.problem.quadratic_term
        kkt[:n, :n] += self._sigma * np.eye(n)
        kkt[:n, n:] = self._A.T
        kkt[n:, :n] = self._A
        kkt[n:, n:] = -np.diag(1.0 / self._rho)
        self._lu = sla.lu_factor(kkt)

    def update(self, linear_term=None, offset=None):
        """Swap the linear objective without touching the factorization."""
        if linear_term is not None:
            c = np.asarray(linear_term, dtype=np.float64)
            if c.shape != (self.problem.n,):
                raise ValueError("linear_term shape mismatch")
            self.problem.linear_term = c
        if offset is not None:
            self.problem.offset = float(offset)

    def reset(self):
        self._x = np.zeros(self.problem.n)
        self._z = np.clip(np.zeros(self._A.shape[0]), self._lower, self._upper)
        self._y = np.zeros(self._A.shape[0])
        self._have_solution = False

    def _adopt(self, cand):
        """Store a polished optimum as the warm-start state."""
        self._x = cand.primal.copy()
        self._z = np.clip(self._A @ cand.primal, self._lower, self._upper)
        self._y = np.concatenate([cand.eq_duals, cand.ineq_duals])
        self._have_solution = True

    def solve(self, tol: float = 1e-8, max_iter: int = 20000) -> QpSolution:
        prob = self.problem
        n = prob.n
        if n == 0:
            return QpSolution(np.zeros(0), np.zeros(0), np.zeros(0),
                              prob.offset, QpStatus.OPTIMAL, 0.0, 0)
        if self._A.shape[0] == 0:
            return self._solve_unconstrained(tol)

        if self._have_solution:
            # The previous optimum's active set usually survives a small
            # change in the linear term; a direct solve on it is far
            # cheaper than splitting iterations.
            cand = self._polish(self._x, self._y, good_enough=tol, limit=1)
            if cand is not None and cand.kkt_residual <= tol:
                self._adopt(cand)
                return cand

        if self._lu is None:
            self._factorize()
        q = prob.quadratic_term
        c = prob.linear_term
        A = self._A
        rho = self._rho
        x, z, y = self._x, self._z, self._y
        alpha = self._alpha
        sigma = self._sigma

        check_every = 10
        polish_gate = max(1e-4, tol)
        best = None
        y_mark = y.copy()
        rho_updates = 0
        k = 0
        while k < max_iter:
            k += 1
            rhs = np.concatenate([sigma * x - c, z - y / rho])
            sol = sla.lu_solve(self._lu, rhs)
            xt = sol[:n]
            nu = sol[n:]
            zt = z + (nu - y) / rho
            x = alpha * xt + (1.0 - alpha) * x
            ztmp = alpha * zt + (1.0 - alpha) * z + y / rho
            z = np.clip(ztmp, self._lower, self._upper)
            y = rho * (ztmp - z)

            if k % check_every and k != max_iter:
                continue
            ax = A @ x
            qx = q @ x
            aty = A.T @ y
            r_prim = float(np.max(np.abs(ax - z)))
            r_dual = float(np.max(np.abs(qx + c + aty)))
            s_prim = max(1.0, float(np.max(np.abs(ax))), float(np.max(np.abs(z))))
            s_dual = max(1.0, float(np.max(np.abs(qx))), float(np.max(np.abs(aty))),
                         float(np.max(np.abs(c), initial=0.0)))

            if r_prim <= polish_gate * s_prim and r_dual <= polish_gate * s_dual:
                cand = self._polish(x, y, good_enough=tol)
                if cand is not None and cand.kkt_residual <= tol:
                    self._adopt(cand)
                    cand.iterations = k
                    return cand
                self._x, self._z, self._y = x, z, y
                polish_gate = max(polish_gate * 1e-2, tol * 1e-2)

            if r_prim <= tol and r_dual <= tol:
                mu = np.maximum(y[self._me:], 0.0)
                raw = QpSolution(x.copy(), y[:self._me].copy(), mu,
                                 prob.objective_value(x), QpStatus.OPTIMAL, 0.0, k)
                raw.kkt_residual = check_kkt(prob, raw)
                if raw.kkt_residual <= tol:
                    self._x, self._z, self._y = x, z, y
                    self._have_solution = True
                    return raw
                best = raw

            # Divergence watch: a translating dual step is an
            # infeasibility certificate candidate; let the LP decide.
            dy = y - y_mark
            y_mark = y.copy()
            dy_norm = float(np.max(np.abs(dy), initial=0.0))
            if dy_norm > 1e-12 and k > 200:
                aty_dy = float(np.max(np.abs(A.T @ dy)))
                neg_ok = bool(np.all(dy[self._me:] >= -1e-6 * dy_norm))
                support = float(self._upper[:self._me] @ dy[:self._me]
                                + prob.ineq_rhs @ np.maximum(dy[self._me:], 0.0))
                if neg_ok and aty_dy <= 1e-6 * dy_norm and support < -1e-6 * dy_norm:
                    verdict = self._declare_infeasible(tol)
                    if verdict is not None:
                        return verdict

            # Residual-balancing penalty update; refactors, so rate-limited.
            if k % (check_every * 20) == 0 and rho_updates < 15:
                ratio = (r_prim / s_prim) / max(r_dual / s_dual, 1e-16)
                if ratio > 25.0 or ratio < 0.04:
                    self._rho_base = float(np.clip(
                        self._rho_base * np.sqrt(ratio), 1e-6, 1e6))
                    self._rho = self._make_rho(self._rho_base)
                    rho = self._rho
                    self._factorize()
                    rho_updates += 1

        self._x, self._z, self._y = x, z, y
        verdict = self._declare_infeasible(tol)
        if verdict is not None:
            return verdict
        if best is None:
            mu = np.maximum(y[self._me:], 0.0)
            best = QpSolution(x.copy(), y[:self._me].copy(), mu,
                              prob.objective_value(x), QpStatus.ITERATION_LIMIT,
                              0.0, max_iter)
            best.kkt_residual = check_kkt(prob, best)
        best.status = QpStatus.ITERATION_LIMIT
        best.iterations = max_iter
        return best

    def _solve_unconstrained(self, tol):
        prob = self.problem
        x, *_ = np.linalg.lstsq(prob.quadratic_term, -prob.linear_term, rcond=None)
        sol = QpSolution(x, np.zeros(0), np.zeros(0), prob.objective_value(x),
                         QpStatus.OPTIMAL, 0.0, 1)
        sol.kkt_residual = check_kkt(prob, sol)
        if sol.kkt_residual > max(tol, 1e-8 * max(1.0, float(np.max(np.abs(prob.linear_term), initial=0.0)))):
            sol.status = QpStatus.ITERATION_LIMIT  # descent direction: no finite minimum
        return sol

    def _declare_infeasible(self, tol):
        gap = _feasibility_gap(self.problem)
        feas_tol = max(1e-7, tol) * max(
            1.0,
            float(np.max(np.abs(self.problem.eq_rhs), initial=0.0)),
            float(np.max(np.abs(self.problem.ineq_rhs), initial=0.0)))
        if gap > feas_tol:
            n = self.problem.n
            return QpSolution(np.full(n, np.nan), np.zeros(self._me),
                              np.zeros(self.problem.n_ineq), float("nan"),
                              QpStatus.INFEASIBLE, float("inf"), 0)
        return None

    def _polish_factor(self, mask):
        """LU of the regularized active-set KKT matrix, cached by mask.

        The matrix only involves the quadratic term and constraint rows,
        so entries survive linear-term updates across repeated solves.
        """
        key = mask.tobytes()
        if key in self._polish_cache:
            return self._polish_cache[key]
        prob = self.problem
        n = prob.n
        g = np.vstack([prob.eq_matrix, prob.ineq_matrix[mask]])
        ma = g.shape[0]
        delta = 1e-8
        kreg = np.zeros((n + ma, n + ma))
        kreg[:n, :n] = prob.quadratic_term + delta * np.eye(n)
        kreg[:n, n:] = g.T
        kreg[n:, :n] = g
        kreg[n:, n:] = -delta * np.eye(ma)
        try:
            entry = (sla.lu_factor(kreg), g)
        except (ValueError, np.linalg.LinAlgError):
            entry = None
        if len(self._polish_cache) >= 6:
            self._polish_cache.pop(next(iter(self._polish_cache)))
        self._polish_cache[key] = entry
        return entry

    def _polish(self, x, y, good_enough=0.0, limit=None):
        """Direct KKT solve on the detected active set.

        Regularized factorization plus iterative refinement against the
        unregularized system; returns the best candidate or None.  Stops
        at the first candidate whose residual is at most `good_enough`;
        `limit` caps how many threshold variants are tried.
        """
        prob = self.problem
        n = prob.n
        me = self._me
        mi = prob.n_ineq
        if mi == 0:
            masks = [np.zeros(0, dtype=bool)]
        else:
            y_in = y[me:]
            slack = prob.ineq_rhs - prob.ineq_matrix @ x
            sy = max(1.0, float(np.max(np.abs(y_in), initial=0.0)))
            ss = max(1.0, float(np.max(np.abs(prob.ineq_rhs), initial=0.0)))
            masks = []
            for ty, ts in ((1e-6, 1e-7), (1e-9, 1e-9), (1e-3, 1e-6)):
                mask = (y_in > ty * sy) | (slack < ts * ss)
                if not any(np.array_equal(mask, m) for m in masks):
                    masks.append(mask)

        best = None
        for mask in masks[:limit]:
            # A rank-deficient row set can yield a negative multiplier even
            # at the true optimum; dropping those rows and re-solving walks
            # to a sign-feasible assignment in a few steps.
            for _ in range(4):
                entry = self._polish_factor(mask)
                if entry is None:
                    break
                lu, g = entry
                rhs = np.concatenate([-prob.linear_term, prob.eq_rhs,
                                      prob.ineq_rhs[mask]])
                t = sla.lu_solve(lu, rhs)
                for _ in range(3):  # refinement against the exact KKT system
                    r_top = rhs[:n] - (prob.quadratic_term @ t[:n] + g.T @ t[n:])
                    r_bot = rhs[n:] - g @ t[:n]
                    t = t + sla.lu_solve(lu, np.concatenate([r_top, r_bot]))
                xp = t[:n]
                if not np.all(np.isfinite(xp)):
                    break
                mu = np.zeros(mi)
                mu_act = t[n + me:]
                mu[mask] = mu_act
                cand = QpSolution(xp, t[n:n + me], mu, prob.objective_value(xp),
                                  QpStatus.OPTIMAL, 0.0, 0)
                cand.kkt_residual = check_kkt(prob, cand)
                if best is None or cand.kkt_residual < best.kkt_residual:
                    best = cand
                if best.kkt_residual <= good_enough:
                    return best
                scale = max(1.0, float(np.max(np.abs(mu_act), initial=0.0)))
                neg = mu_act < -1e-9 * scale
                if not neg.any():
                    break
                next_mask = mask.copy()
                next_mask[np.flatnonzero(mask)[neg]] = False
                mask = next_mask
        return best


def solve(problem: QpProblem, tol: float = 1e-8, max_iter: int = 20000) -> QpSolution:
    """One-shot solve; see Workspace for reuse across related problems."""
    return Workspace(problem).solve(tol=tol, max_iter=max_iter)


class QpBuilder:
    """Incremental dense QP assembly with named variables and bounds.

    Bounds become inequality rows at build time (lower rows then upper
    rows, in variable order, after all explicitly added rows), so row
    order is deterministic.
    """

    def __init__(self):
        self._names: list[str] = []
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._quad: list[tuple[int, float]] = []
        self._lin: list[tuple[int, float]] = []
        self._offset = 0.0
        self._eq: list[tuple[np.ndarray, np.ndarray, float]] = []
        self._ineq: list[tuple[np.ndarray, np.ndarray, float]] = []

    @property
    def var_count(self) -> int:
        return len(self._names)

    def add_var(self, name=None, lb=None, ub=None) -> int:
        idx = len(self._names)
        self._names.append(name if name is not None else f"x{idx}")
        self._lb.append(-np.inf if lb is None else float(lb))
        self._ub.append(np.inf if ub is None else float(ub))
        return idx

    def add_vars(self, count, prefix, lb=None, ub=None) -> np.ndarray:
        lbs = np.broadcast_to(np.asarray(-np.inf if lb is None else lb, dtype=float),
                              (count,))
        ubs = np.broadcast_to(np.asarray(np.inf if ub is None else ub, dtype=float),
                              (count,))
        return np.array([self.add_var(f"{prefix}[{t}]", lbs[t], ubs[t])
                         for t in range(count)])

    def add_square(self, var, weight, center=0.0):
        """Add weight * (x_var - center)^2 to the objective."""
        self._quad.append((int(var), 2.0 * weight))
        if center:
            self._lin.append((int(var), -2.0 * weight * center))
            self._offset += weight * center * center

    def add_linear(self, vars, coefs):
        coefs = np.broadcast_to(np.asarray(coefs, dtype=float), (len(vars),))
        for v, co in zip(vars, coefs):
            self._lin.append((int(v), float(co)))

    def add_offset(self, value):
        self._offset += float(value)

    def add_eq(self, vars, coefs, rhs):
        self._eq.append((np.asarray(vars, dtype=int),
                         np.asarray(coefs, dtype=float), float(rhs)))

    def add_ineq(self, vars, coefs, rhs):
        """Row sum(coefs * x[vars]) <= rhs."""
        self._ineq.append((np.asarray(vars, dtype=int),
                           np.asarray(coefs, dtype=float), float(rhs)))

    def build(self) -> QpProblem:
        n = len(self._names)
        q = np.zeros((n, n))
        for i, w in self._quad:
            q[i, i] += w
        c = np.zeros(n)
        for i, co in self._lin:
            c[i] += co
        rows = list(self._ineq)
        for i in range(n):
            if np.isfinite(self._lb[i]):
                rows.append((np.array([i]), np.array([-1.0]), -self._lb[i]))
            if np.isfinite(self._ub[i]):
                rows.append((np.array([i]), np.array([1.0]), self._ub[i]))
        a_in = np.zeros((len(rows), n))
        b_in = np.zeros(len(rows))
        for r, (idx, co, rhs) in enumerate(rows):
            a_in[r, idx] = co
            b_in[r] = rhs
        a_eq = np.zeros((len(self._eq), n))
        b_eq = np.zeros(len(self._eq))
        for r, (idx, co, rhs) in enumerate(self._eq):
            a_eq[r, idx] = co
            b_eq[r] = rhs
        return QpProblem(q, c, a_eq, b_eq, a_in, b_in,
                         var_names=list(self._names), offset=self._offset)


def epigraph_max(builder: QpBuilder, vars) -> int:
    """Bound max(x[vars]) from above with a fresh variable.

    Adds m with x_v <= m for each v and returns m's index; minimizing a
    positive weight on m prices the peak of the given variables.
    """
    m = builder.add_var("epi_max")
    for v in vars:
        builder.add_ineq([int(v), m], [1.0, -1.0], 0.0)
    return m


def dump_problem(problem: QpProblem, path):
    """Plain-text dump (matrix-market style blocks) for offline inspection."""
    def block(fh, name, arr):
        arr = np.atleast_2d(arr)
        fh.write(f"%%block {name} array real general\n")
        fh.write(f"{arr.shape[0]} {arr.shape[1]}\n")
        for row in arr:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    with open(path, "w") as fh:
        fh.write("%%qp dense\n")
        fh.write(f"% n={problem.n} n_eq={problem.n_eq} n_ineq={problem.n_ineq} "
                 f"offset={problem.offset!r}\n")
        block(fh, "quadratic_term", problem.quadratic_term)
        block(fh, "linear_term", problem.linear_term)
        block(fh, "eq_matrix", problem.eq_matrix)
        block(fh, "eq_rhs", problem.eq_rhs)
        block(fh, "ineq_matrix", problem.ineq_matrix)
        block(fh, "ineq_rhs", problem.ineq_rhs)
        if problem.var_names:
            fh.write("%%block var_names\n")
            for name in problem.var_names:
                fh.write(name + "\n")
