"""Small dense LP / convex QP solver.

LPs go through a two-phase tableau simplex with Bland's smallest-index rule.
The pivot sequence depends only on the signs of reduced costs (compared against
a tolerance relative to ``max|c|``) and on ratio tests that never touch ``c``,
so scaling the cost vector by a positive constant returns the identical point.

QPs (``q`` nonzero) start from the phase-1 vertex and run a primal active-set
method with a fixed, index-ordered working-set rule.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

JITTER_LADDER = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
PIVOT_TOL = 1e-9


class Status(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


class NumericalError(RuntimeError):
    """Factorization or pivoting broke down beyond recovery."""


@dataclass
class Program:
    """``min 0.5 x'Qx + c'x  s.t.  A_ineq x <= b_ineq, A_eq x = b_eq, lb <= x <= ub``."""

    c: np.ndarray
    q: np.ndarray | None = None
    a_ineq: np.ndarray | None = None
    b_ineq: np.ndarray | None = None
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    ineq_labels: list[str] | None = None
    eq_labels: list[str] | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if self.q is not None:
            self.q = np.asarray(self.q, dtype=float)
            if self.q.shape != (n, n):
                raise ValueError(f"q has shape {self.q.shape}, expected {(n, n)}")
            if not np.any(self.q):
                self.q = None
        self.a_ineq, self.b_ineq = _rows(self.a_ineq, self.b_ineq, n, "ineq")
        self.a_eq, self.b_eq = _rows(self.a_eq, self.b_eq, n, "eq")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel()
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("bounds must match the number of variables")
        if self.ineq_labels is None:
            self.ineq_labels = [f"ineq[{i}]" for i in range(self.b_ineq.size)]
        if self.eq_labels is None:
            self.eq_labels = [f"eq[{i}]" for i in range(self.b_eq.size)]

    @property
    def n(self) -> int:
        return self.c.size

    def objective(self, x: np.ndarray) -> float:
        val = float(self.c @ x)
        if self.q is not None:
            val += 0.5 * float(x @ self.q @ x)
        return val

    def max_violation(self, x: np.ndarray) -> float:
        viol = [0.0]
        if self.b_ineq.size:
            viol.append(float(np.max(self.a_ineq @ x - self.b_ineq)))
        if self.b_eq.size:
            viol.append(float(np.max(np.abs(self.a_eq @ x - self.b_eq))))
        viol.append(float(np.max(self.lb - x, initial=0.0)))
        viol.append(float(np.max(x - self.ub, initial=0.0)))
        return max(viol)


def _rows(a, b, n, what):
    if a is None or (np.size(a) == 0 and np.size(b if b is not None else []) == 0):
        return np.zeros((0, n)), np.zeros(0)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != (b.size, n):
        raise ValueError(f"{what} block has shape {a.shape} but rhs {b.size} and n={n}")
    return a, b


@dataclass
class Solution:
    x: np.ndarray | None
    objective: float
    status: Status
    iterations: int = 0
    infeasible_rows: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


def solve(p: Program, tol_feas: float = 1e-8, tol_opt: float = 1e-8) -> Solution:
    if p.q is None:
        return _Simplex(p, tol_feas, tol_opt).run()
    return _solve_qp(p, tol_feas, tol_opt)


# --- simplex ----------------------------------------------------------------

class _Simplex:
    def __init__(self, p: Program, tol_feas: float, tol_opt: float):
        self.p = p
        self.tol_feas = tol_feas
        self.tol_opt = tol_opt
        self._standard_form()

    def _standard_form(self):
        p = self.p
        n = p.n
        # x = off + D y, y >= 0
        cols, off = [], np.zeros(n)
        ub_rows = []
        for j in range(n):
            lo, hi = p.lb[j], p.ub[j]
            if np.isfinite(lo):
                off[j] = lo
                cols.append((j, 1.0))
                if np.isfinite(hi):
                    ub_rows.append((len(cols) - 1, hi - lo, f"ub[{j}]"))
            elif np.isfinite(hi):
                off[j] = hi
                cols.append((j, -1.0))
            else:
                cols.append((j, 1.0))
                cols.append((j, -1.0))
        ny = len(cols)
        d = np.zeros((n, ny))
        for k, (j, sgn) in enumerate(cols):
            d[j, k] = sgn
        self.off, self.d = off, d

        ineq_a = p.a_ineq @ d
        ineq_b = p.b_ineq - p.a_ineq @ off
        labels = list(p.ineq_labels)
        if ub_rows:
            extra = np.zeros((len(ub_rows), ny))
            for r, (k, _, _) in enumerate(ub_rows):
                extra[r, k] = 1.0
            ineq_a = np.vstack([ineq_a, extra])
            ineq_b = np.concatenate([ineq_b, [u for _, u, _ in ub_rows]])
            labels += [lab for _, _, lab in ub_rows]
        eq_a = p.a_eq @ d
        eq_b = p.b_eq - p.a_eq @ off
        labels += list(p.eq_labels)

        m_in, m_eq = ineq_b.size, eq_b.size
        m = m_in + m_eq
        n_slack = m_in
        # artificial columns for rows whose slack cannot start basic
        needs_art = [i for i in range(m_in) if ineq_b[i] < 0] + list(range(m_in, m))
        n_art = len(needs_art)
        ncols = ny + n_slack + n_art
        tab = np.zeros((m, ncols + 1))
        tab[:m_in, :ny] = ineq_a
        tab[:m_in, ny:ny + m_in] = np.eye(m_in)
        tab[:m_in, -1] = ineq_b
        tab[m_in:, :ny] = eq_a
        tab[m_in:, -1] = eq_b
        neg = tab[:, -1] < 0
        tab[neg] *= -1.0
        basis = np.empty(m, dtype=int)
        for i in range(m_in):
            basis[i] = ny + i
        for k, i in enumerate(needs_art):
            col = ny + n_slack + k
            tab[i, col] = 1.0
            basis[i] = col
        self.tab, self.basis = tab, basis
        self.ny, self.n_art = ny, n_art
        self.art_start = ny + n_slack
        self.row_labels = labels
        self.row_ids = np.arange(m)

    def _pivot(self, r: int, j: int):
        tab = self.tab
        tab[r] /= tab[r, j]
        col = tab[:, j].copy()
        col[r] = 0.0
        tab -= np.outer(col, tab[r])
        self.dcost -= self.dcost[j] * tab[r, :-1]
        self.basis[r] = j

    def _iterate(self, allowed: int, thr: float, max_iter: int) -> Status | None:
        tab = self.tab
        for _ in range(max_iter):
            cand = np.flatnonzero(self.dcost[:allowed] < -thr)
            if cand.size == 0:
                return None
            j = int(cand[0])
            col = tab[:, j]
            pos = np.flatnonzero(col > PIVOT_TOL)
            if pos.size == 0:
                return Status.UNBOUNDED
            ratios = tab[pos, -1] / col[pos]
            best = ratios.min()
            ties = pos[ratios <= best + 1e-12 * (1.0 + abs(best))]
            r = int(ties[np.argmin(self.basis[ties])])
            self._pivot(r, j)
            self.iterations += 1
        raise NumericalError("simplex iteration limit reached")

    def run(self) -> Solution:
        tab = self.tab
        m = tab.shape[0]
        ncols = tab.shape[1] - 1
        max_iter = 50 * (m + ncols) + 100
        self.iterations = 0

        if self.n_art:
            cost = np.zeros(ncols)
            cost[self.art_start:] = 1.0
            self.dcost = cost - cost[self.basis] @ tab[:, :-1]
            status = self._iterate(ncols, self.tol_opt, max_iter)
            if status is not None:  # phase 1 is bounded below by 0
                raise NumericalError("phase-1 reported unbounded")
            art_rows = self.basis >= self.art_start
            infeas = float(np.sum(tab[art_rows, -1]))
            scale = 1.0 + float(np.max(np.abs(tab[:, -1]), initial=0.0))
            if infeas > self.tol_feas * scale:
                bad = [self.row_labels[self.row_ids[i]] for i in np.flatnonzero(art_rows) if tab[i, -1] > self.tol_feas * scale]
                return Solution(None, float("nan"), Status.INFEASIBLE, self.iterations, tuple(bad))
            self._drive_out_artificials()

        c_full = np.zeros(ncols)
        c_full[: self.ny] = self.d.T @ self.p.c
        scale = float(np.max(np.abs(c_full), initial=0.0))
        if scale > 0:
            self.dcost = c_full.copy() - c_full[self.basis] @ self.tab[:, :-1]
            self.dcost[self.art_start:] = 0.0
            status = self._iterate(self.art_start, self.tol_opt * scale, max_iter)
            if status is Status.UNBOUNDED:
                return Solution(None, float("-inf"), status, self.iterations)
        y = np.zeros(ncols)
        y[self.basis] = self.tab[:, -1]
        x = self.off + self.d @ y[: self.ny]
        return Solution(x, self.p.objective(x), Status.OPTIMAL, self.iterations)

    def _drive_out_artificials(self):
        keep = np.ones(self.tab.shape[0], dtype=bool)
        for r in range(self.tab.shape[0]):
            if self.basis[r] < self.art_start:
                continue
            row = self.tab[r, : self.art_start]
            nz = np.flatnonzero(np.abs(row) > PIVOT_TOL)
            if nz.size:
                self._pivot(r, int(nz[0]))
            else:
                keep[r] = False  # redundant equality
        if not keep.all():
            self.tab = self.tab[keep]
            self.basis = self.basis[keep]
            self.row_ids = self.row_ids[keep]


# --- QP -----------------------------------------------------------------------

def psd_factor(q: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky of ``q + jitter*I`` with the smallest jitter on the ladder that works."""
    scale = max(1.0, float(np.max(np.abs(np.diag(q)))))
    eye = np.eye(q.shape[0])
    for jit in JITTER_LADDER:
        try:
            return np.linalg.cholesky(q + jit * scale * eye), jit * scale
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("quadratic term is not positive semidefinite (jitter ladder exhausted)")


def _independent(rows: np.ndarray, new: np.ndarray) -> bool:
    if rows.shape[0] == 0:
        return bool(np.any(np.abs(new) > PIVOT_TOL))
    stacked = np.vstack([rows, new])
    return np.linalg.matrix_rank(stacked, tol=1e-10) > np.linalg.matrix_rank(rows, tol=1e-10)


def _solve_qp(p: Program, tol_feas: float, tol_opt: float) -> Solution:
    _, jitter = psd_factor(p.q)
    q = p.q + jitter * np.eye(p.n)

    start = _Simplex(Program(np.zeros(p.n), None, p.a_ineq, p.b_ineq, p.a_eq, p.b_eq, p.lb, p.ub,
                             p.ineq_labels, p.eq_labels), tol_feas, tol_opt).run()
    if not start.ok:
        return Solution(None, float("nan"), start.status, start.iterations, start.infeasible_rows)
    x = start.x.copy()

    # all inequalities as G x <= h, bounds last
    n = p.n
    eye = np.eye(n)
    fin_u = np.flatnonzero(np.isfinite(p.ub))
    fin_l = np.flatnonzero(np.isfinite(p.lb))
    g_mat = np.vstack([p.a_ineq, eye[fin_u], -eye[fin_l]])
    h_vec = np.concatenate([p.b_ineq, p.ub[fin_u], -p.lb[fin_l]])
    e_mat, e_vec = p.a_eq, p.b_eq

    work: list[int] = []
    act = e_mat.copy()
    for i in np.flatnonzero(np.abs(g_mat @ x - h_vec) <= tol_feas * (1.0 + np.abs(h_vec))):
        if _independent(act, g_mat[i]):
            work.append(int(i))
            act = np.vstack([act, g_mat[i]])

    max_iter = 20 * (g_mat.shape[0] + n) + 100
    for it in range(1, max_iter + 1):
        grad = q @ x + p.c
        a_w = np.vstack([e_mat, g_mat[work]]) if work else e_mat
        k = a_w.shape[0]
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = q
        kkt[:n, n:] = a_w.T
        kkt[n:, :n] = a_w
        rhs = np.concatenate([-grad, np.zeros(k)])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular KKT system in active-set QP") from exc
        step, lam = sol[:n], sol[n:]
        if np.max(np.abs(step), initial=0.0) <= 1e-12 * (1.0 + np.max(np.abs(x))):
            mu = lam[e_mat.shape[0]:]
            gscale = 1.0 + float(np.max(np.abs(grad)))
            if mu.size == 0 or mu.min() >= -tol_opt * gscale:
                return Solution(x, p.objective(x), Status.OPTIMAL, it)
            drop = int(np.argmin(mu))  # first index on ties
            del work[drop]
            continue
        g_step = g_mat @ step
        alpha, block = 1.0, None
        free = np.setdiff1d(np.arange(g_mat.shape[0]), work)
        moving = free[g_step[free] > 1e-14]
        if moving.size:
            slack = np.maximum(h_vec[moving] - g_mat[moving] @ x, 0.0)
            ratios = slack / g_step[moving]
            i = int(np.argmin(ratios))
            if ratios[i] < 1.0:
                alpha, block = float(ratios[i]), int(moving[i])
        x = x + alpha * step
        if block is not None:
            work.append(block)
    raise NumericalError("active-set QP iteration limit reached")
