"""Linearized repair QP: assembly, an operator-splitting solver, and KKT
verification.

Standard form used throughout:

    minimise    0.5 xᵀ diag(p) x + qᵀ x
    subject to  l <= A x <= u          (u = +inf for every row built here)

The decision vector is the beta block (r * d_in entries, row-major over the
update coefficient matrix) followed by one slack entry per repair sample.
Constraint rows come in three groups, in order: repair margins (with slack),
remain margins (hard), slack non-negativity.

The solver is a dense ADMM splitting in the OSQP style. The quadratic term
is diagonal here, so the x-update reduces to an m x m Schur system on the
constraint side, which is refactored only when the splitting penalty
changes. After the iteration converges, an active-set polish solves the
reduced KKT system exactly and is adopted only if its residuals verify.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import nnls

from .model import _competitor_from_scores, activate, activation_derivative
from .model import gap as exact_gap
from .util import parallel_map

__all__ = [
    "RepairHyper",
    "QpProblem",
    "QpSolution",
    "repair_coefficients",
    "remain_coefficients",
    "assemble",
    "solve",
    "kkt_residuals",
]

_INFEAS_TOL = 1e-8  # certificate residual threshold for (in)feasibility
_CHECK_EVERY = 25  # termination checks
_RHO_EVERY = 50  # splitting-penalty rescaling interval
_SIGMA = 1e-6  # step regularization on the x-update
_POLISH_DELTA = 1e-6
_POLISH_REFINE = 8


@dataclass(frozen=True)
class RepairHyper:
    """Hyperparameters of one repair run (defaults follow the reference
    configuration: rank 2, margins 1.0/0.3, slack penalty 50, ridge 2)."""

    rank: int = 2
    gamma_s: float = 1.0
    gamma_h: float = 0.3
    lam: float = 50.0
    rho: float = 2.0
    max_iters: int = 300

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.gamma_s <= 0 or self.gamma_h <= 0:
            raise ValueError("margins must be > 0")
        if self.lam <= 0 or self.rho <= 0:
            raise ValueError("lam and rho must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class QpProblem:
    p_diag: np.ndarray  # diagonal of P, length n
    q: np.ndarray
    A: np.ndarray  # (m, n)
    l: np.ndarray
    u: np.ndarray
    n_beta: int
    n_slack: int
    groups: tuple  # (repair rows, remain rows, slack rows)

    @property
    def n(self):
        return self.A.shape[1]

    @property
    def m(self):
        return self.A.shape[0]

    @property
    def repair_rows(self):
        return slice(0, self.groups[0])

    @property
    def remain_rows(self):
        return slice(self.groups[0], self.groups[0] + self.groups[1])

    @property
    def slack_rows(self):
        return slice(self.groups[0] + self.groups[1], self.m)

    def objective(self, x):
        x = np.asarray(x, dtype=np.float64)
        return float(0.5 * x @ (self.p_diag * x) + self.q @ x)


@dataclass
class QpSolution:
    beta: np.ndarray
    xi: np.ndarray
    duals: np.ndarray  # one per constraint row, >= 0 convention for lower bounds
    status: str  # solved | max-iter | primal-infeasible | dual-infeasible
    iterations: int
    primal_residual: float
    dual_residual: float

    @property
    def x(self):
        return np.concatenate([self.beta, self.xi])


def _gap_coefficients(m, U, v, label):
    """vec([Uᵀ J(v) (w_label - w_comp)] vᵀ), row-major over the (r, d_in)
    coefficient matrix. The competitor is evaluated at the current weights.
    """
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] != m.d_out:
        raise ValueError(f"basis has shape {U.shape}, expected ({m.d_out}, r)")
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (m.d_in,):
        raise ValueError(f"input has shape {v.shape}, expected ({m.d_in},)")
    z = m.W @ v + m.b
    jac_diag = activation_derivative(m.activation, z)
    h = activate(m.activation, z)
    s = m.W_c @ h + m.b_c
    comp = _competitor_from_scores(s, int(label))
    w_diff = m.W_c[int(label)] - m.W_c[comp]
    direction = U.T @ (jac_diag * w_diff)  # (r,)
    return np.outer(direction, v).reshape(-1)


def repair_coefficients(m, U, sample):
    """Linearized gap coefficients of a repair sample w.r.t. its target label."""
    return _gap_coefficients(m, U, sample.v, sample.label)


def remain_coefficients(m, U, sample):
    """Same construction for a remain sample, using its recorded prediction."""
    return _gap_coefficients(m, U, sample.v, sample.label)


def assemble(m, U, repair, remain, hyper, repair_margins=None, threads=1):
    """Build the repair QP around the current weights.

    Gaps entering the lower bounds are evaluated exactly with the current
    model, not carried over from a previous linearization. ``repair_margins``
    optionally overrides the per-row margin (defaults to gamma_s everywhere);
    the repair loop uses it when remain rows are promoted to soft treatment.
    """
    U = np.asarray(U, dtype=np.float64)
    r = U.shape[1]
    n_s = len(repair)
    n_p = len(remain)
    n_beta = r * m.d_in
    n = n_beta + n_s
    if repair_margins is None:
        repair_margins = np.full(n_s, hyper.gamma_s)
    else:
        repair_margins = np.asarray(repair_margins, dtype=np.float64)
        if repair_margins.shape != (n_s,):
            raise ValueError("repair_margins must have one entry per repair sample")

    p_diag = np.concatenate([np.full(n_beta, hyper.rho), np.zeros(n_s)])
    q = np.concatenate([np.zeros(n_beta), np.full(n_s, hyper.lam)])

    m_rows = n_s + n_p + n_s
    A = np.zeros((m_rows, n))
    l = np.zeros(m_rows)
    u = np.full(m_rows, np.inf)

    repair_rows = parallel_map(lambda s: repair_coefficients(m, U, s), repair, threads)
    remain_rows = parallel_map(lambda s: remain_coefficients(m, U, s), remain, threads)
    for i, s in enumerate(repair):
        A[i, :n_beta] = repair_rows[i]
        A[i, n_beta + i] = 1.0
        l[i] = repair_margins[i] - exact_gap(m, s.v, s.label)
    for p, s in enumerate(remain):
        A[n_s + p, :n_beta] = remain_rows[p]
        l[n_s + p] = hyper.gamma_h - exact_gap(m, s.v, s.label)
    for i in range(n_s):
        A[n_s + n_p + i, n_beta + i] = 1.0
        l[n_s + n_p + i] = 0.0

    return QpProblem(
        p_diag=p_diag,
        q=q,
        A=A,
        l=l,
        u=u,
        n_beta=n_beta,
        n_slack=n_s,
        groups=(n_s, n_p, n_s),
    )


class _SchurSolver:
    """Solves (diag(d) + rho A^T A) x = rhs through the m x m Schur
    complement G = I/rho + A diag(1/d) A^T, exploiting the diagonal
    quadratic term."""

    def __init__(self, d, A, rho):
        self.A = A
        self.d_inv = 1.0 / d
        G = np.diag(np.full(A.shape[0], 1.0 / rho)) + (A * self.d_inv) @ A.T
        self.factor = cho_factor(G, lower=True)

    def solve(self, rhs):
        t = self.d_inv * rhs
        w = cho_solve(self.factor, self.A @ t)
        return t - self.d_inv * (self.A.T @ w)


def _residuals(p, x, z, y):
    r_prim = float(np.max(np.abs(p.A @ x - z))) if p.m else 0.0
    r_dual = float(np.max(np.abs(p.p_diag * x + p.q + p.A.T @ y))) if p.m else float(
        np.max(np.abs(p.p_diag * x + p.q))
    )
    return r_prim, r_dual


def _primal_infeasibility_certificate(p, delta_y):
    norm = np.max(np.abs(delta_y)) if delta_y.size else 0.0
    if norm <= 1e-30:
        return False
    v = delta_y / norm
    # rows with an infinite upper bound admit no positive certificate entry
    support = 0.0
    for i in range(p.m):
        if np.isinf(p.u[i]):
            if v[i] > _INFEAS_TOL:
                return False
        else:
            support += p.u[i] * max(v[i], 0.0)
        support += p.l[i] * min(v[i], 0.0)
    if support >= -_INFEAS_TOL:
        return False
    return float(np.max(np.abs(p.A.T @ v))) < _INFEAS_TOL


def _farkas_certificate(p):
    """Direct search for a primal infeasibility ray when all upper bounds
    are infinite: v >= 0 with vᵀA = 0 and vᵀl > 0 proves {Ax >= l} empty.

    The dual-delta heuristic misses rays whose divergence couples into the
    strictly convex block, so this solves the nonnegative least-squares
    problem min ||[Aᵀ; lᵀ] v - e_last||² over v >= 0 exactly and verifies
    the result. Returns the certificate vector or None.
    """
    if p.m == 0 or not np.all(np.isinf(p.u)):
        return None
    M = np.vstack([p.A.T, p.l[None, :]])
    target = np.zeros(M.shape[0])
    target[-1] = 1.0
    try:
        v, _ = nnls(M, target, maxiter=max(200, 10 * p.m))
    except RuntimeError:  # iteration cap; treat as "no certificate found"
        return None
    norm = float(np.max(np.abs(v)))
    if norm <= 0.0:
        return None
    v = v / norm
    if float(np.max(np.abs(p.A.T @ v))) < _INFEAS_TOL and float(p.l @ v) > _INFEAS_TOL:
        return v
    return None


def _dual_infeasibility_certificate(p, delta_x):
    norm = np.max(np.abs(delta_x)) if delta_x.size else 0.0
    if norm <= 1e-30:
        return False
    w = delta_x / norm
    if float(p.q @ w) >= -_INFEAS_TOL:
        return False
    if float(np.max(np.abs(p.p_diag * w))) >= _INFEAS_TOL:
        return False
    Aw = p.A @ w
    for i in range(p.m):
        if np.isinf(p.u[i]):
            if Aw[i] < -_INFEAS_TOL:
                return False
        elif abs(Aw[i]) >= _INFEAS_TOL:
            return False
    return True


def _polish(p, y_osqp, eps_abs):
    """Exact solve on the active set guessed from the dual signs.

    Returns (x, y_osqp_full) when the polished point verifies primal
    feasibility, dual signs and KKT residuals at eps_abs; otherwise None.
    """
    # ignore dual noise when guessing the active set; a genuinely active row
    # dropped here still gets checked by the primal-feasibility validation
    threshold = -1e-9 * max(1.0, float(np.max(np.abs(y_osqp))) if y_osqp.size else 0.0)
    active = np.flatnonzero(y_osqp < threshold)
    if active.size == 0:
        if np.any((p.p_diag == 0.0) & (p.q != 0.0)):
            return None
        x = np.where(p.p_diag > 0.0, -p.q / np.where(p.p_diag > 0.0, p.p_diag, 1.0), 0.0)
        y_full = np.zeros(p.m)
    else:
        A_act = p.A[active]
        d = p.p_diag + _POLISH_DELTA
        d_inv = 1.0 / d
        G = (A_act * d_inv) @ A_act.T + _POLISH_DELTA * np.eye(active.size)
        try:
            factor = cho_factor(G, lower=True)
        except np.linalg.LinAlgError:
            return None
        y_act = cho_solve(factor, (A_act * d_inv) @ (-p.q) - p.l[active])
        x = d_inv * (-p.q - A_act.T @ y_act)
        for _ in range(_POLISH_REFINE):
            r1 = p.p_diag * x + p.q + A_act.T @ y_act
            r2 = A_act @ x - p.l[active]
            dy = cho_solve(factor, (A_act * d_inv) @ (-r1) + r2)
            dx = d_inv * (-r1 - A_act.T @ dy)
            x = x + dx
            y_act = y_act + dy
        if np.any(y_act > 1e-9 * max(1.0, float(np.max(np.abs(y_act))))):
            return None
        y_full = np.zeros(p.m)
        y_full[active] = y_act

    slack = p.A @ x - p.l if p.m else np.zeros(0)
    if p.m and float(np.min(slack)) < -eps_abs:
        return None
    r_dual = float(np.max(np.abs(p.p_diag * x + p.q + p.A.T @ y_full))) if p.m else float(
        np.max(np.abs(p.p_diag * x + p.q))
    )
    if r_dual > eps_abs:
        return None
    if p.m:
        comp = float(np.max(np.abs(y_full * slack)))
        if comp > eps_abs:
            return None
    return x, y_full


def _finish(p, x, y_osqp, status, iters, r_prim, r_dual):
    return QpSolution(
        beta=x[: p.n_beta].copy(),
        xi=x[p.n_beta :].copy(),
        duals=-y_osqp,
        status=status,
        iterations=iters,
        primal_residual=r_prim,
        dual_residual=r_dual,
    )


def solve(p, eps_abs=1e-6, eps_rel=1e-6, max_solver_iters=50_000, x0=None, y0=None):
    """ADMM on the standard form above.

    ``status == "solved"`` guarantees both unscaled residual infinity norms
    are at most ``eps_abs`` (the combined absolute/relative criterion only
    decides when to attempt the polish step). ``x0``/``y0`` select a
    different starting point; the default is the origin.
    """
    if np.any(p.p_diag < 0.0):
        raise ValueError("quadratic diagonal must be non-negative")
    if p.m and np.any(p.l > p.u):
        raise ValueError("inconsistent bounds: l > u on some row")

    n, m_rows = p.n, p.m
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    y = np.zeros(m_rows) if y0 is None else np.asarray(y0, dtype=np.float64).copy()
    if x.shape != (n,) or y.shape != (m_rows,):
        raise ValueError("warm-start vectors have wrong shapes")

    if m_rows == 0:
        if np.any((p.p_diag == 0.0) & (p.q != 0.0)):
            return _finish(p, x, y, "dual-infeasible", 0, 0.0, 0.0)
        x = np.where(p.p_diag > 0.0, -p.q / np.where(p.p_diag > 0.0, p.p_diag, 1.0), 0.0)
        return _finish(p, x, y, "solved", 0, 0.0, 0.0)

    z = p.A @ x
    rho = 0.1
    schur = _SchurSolver(p.p_diag + _SIGMA, p.A, rho)
    delta_x = np.zeros(n)
    delta_y = np.zeros(m_rows)
    r_prim = r_dual = np.inf
    stall_best = np.inf

    for k in range(1, max_solver_iters + 1):
        x_prev, y_prev = x, y
        rhs = _SIGMA * x - p.q + p.A.T @ (rho * z - y)
        x_t = schur.solve(rhs)
        z_t = p.A @ x_t
        x = x_t
        z_new = np.clip(z_t + y / rho, p.l, p.u)
        y = y + rho * (z_t - z_new)
        z = z_new
        delta_x = x - x_prev
        delta_y = y - y_prev

        if k % _CHECK_EVERY == 0 or k == max_solver_iters:
            r_prim, r_dual = _residuals(p, x, z, y)
            scale_p = max(
                float(np.max(np.abs(p.A @ x))) if m_rows else 0.0,
                float(np.max(np.abs(z))) if m_rows else 0.0,
            )
            scale_d = max(
                float(np.max(np.abs(p.A.T @ y))) if m_rows else 0.0,
                float(np.max(np.abs(p.p_diag * x))),
                float(np.max(np.abs(p.q))) if p.q.size else 0.0,
            )
            eps_p = eps_abs + eps_rel * scale_p
            eps_d = eps_abs + eps_rel * scale_d
            if r_prim <= eps_p and r_dual <= eps_d:
                polished = _polish(p, y, eps_abs)
                if polished is not None:
                    xp, yp = polished
                    rp, rd = _residuals(p, xp, np.clip(p.A @ xp, p.l, p.u), yp)
                    return _finish(p, xp, yp, "solved", k, rp, rd)
                if r_prim <= eps_abs and r_dual <= eps_abs:
                    # raw-iterate acceptance must also verify complementarity:
                    # with large duals, |y|*(Ax - l) can dwarf the primal
                    # residual that produced it
                    comp = float(np.max(np.abs(y * (p.A @ x - p.l))))
                    if comp <= eps_abs:
                        return _finish(p, x, y, "solved", k, r_prim, r_dual)
            if r_prim > eps_p and _primal_infeasibility_certificate(p, delta_y):
                return _finish(p, x, y, "primal-infeasible", k, r_prim, r_dual)
            if r_dual > eps_d and _dual_infeasibility_certificate(p, delta_x):
                return _finish(p, x, y, "dual-infeasible", k, r_prim, r_dual)

        if k % 500 == 0 and r_prim > eps_abs:
            # primal residual stalling points at infeasibility the dual-delta
            # test cannot see; go look for an explicit Farkas ray
            if r_prim > 0.9 * stall_best and _farkas_certificate(p) is not None:
                return _finish(p, x, y, "primal-infeasible", k, r_prim, r_dual)
            stall_best = min(stall_best, r_prim)

        if k % _RHO_EVERY == 0:
            r_p, r_d = _residuals(p, x, z, y)
            if r_d > 0 and r_p > 0:
                ratio = np.sqrt(r_p / r_d)
                new_rho = float(np.clip(rho * ratio, 1e-6, 1e6))
                if new_rho / rho > 1.2 or new_rho / rho < 0.8:
                    rho = new_rho
                    schur = _SchurSolver(p.p_diag + _SIGMA, p.A, rho)

    if _farkas_certificate(p) is not None:
        return _finish(p, x, y, "primal-infeasible", max_solver_iters, r_prim, r_dual)
    return _finish(p, x, y, "max-iter", max_solver_iters, r_prim, r_dual)


def kkt_residuals(p, s):
    """Independent KKT check of a solved QP.

    Returns (stationarity, primal, complementarity) infinity norms with the
    y >= 0 convention for lower-bound duals.
    """
    if s.status != "solved":
        raise ValueError(f"KKT residuals require a solved QP, got status {s.status!r}")
    x = s.x
    y = np.asarray(s.duals, dtype=np.float64)
    stationarity = float(np.max(np.abs(p.p_diag * x + p.q - p.A.T @ y)))
    if p.m:
        slack = p.A @ x - p.l
        primal = float(np.max(np.clip(-slack, 0.0, None)))
        complementarity = float(np.max(np.abs(y * slack)))
    else:
        primal = 0.0
        complementarity = 0.0
    return stationarity, primal, complementarity
