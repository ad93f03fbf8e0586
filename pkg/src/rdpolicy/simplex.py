"""Dense two-phase tableau simplex with Bland's anti-cycling rule.

Problems are posed the way ``scipy.optimize.linprog`` poses them::

    minimize    c @ x
    subject to  A_ub @ x <= b_ub
                A_eq @ x == b_eq
                lo <= x <= hi

and are reduced internally to the standard form ``A y = b, y >= 0, b >= 0``.
The solver returns the standard-form dual vector alongside the primal
solution so callers can check strong duality.
"""

from dataclasses import dataclass

import numpy as np

from .errors import Infeasible, Unbounded

PIVOT_TOL = 1e-12


@dataclass
class StandardForm:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    offset: np.ndarray  # x = offset + transform @ y
    transform: np.ndarray
    n_artificial_rows: int


@dataclass
class LPResult:
    x: np.ndarray
    fun: float
    dual_objective: float
    duals: np.ndarray
    y: np.ndarray
    basis: np.ndarray
    iterations: int
    std: StandardForm

    def reduced_costs(self):
        return self.std.c - self.std.A.T @ self.duals


def _as_2d(A, n):
    if A is None:
        return np.zeros((0, n))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[1] != n:
        raise ValueError(f"constraint matrix has {A.shape[1]} columns, expected {n}")
    return A


def to_standard_form(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None):
    c = np.asarray(c, dtype=float)
    n = c.size
    A_ub = _as_2d(A_ub, n)
    A_eq = _as_2d(A_eq, n)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).ravel()
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    if bounds is None:
        bounds = [(0.0, np.inf)] * n
    elif isinstance(bounds, tuple) and len(bounds) == 2 and not isinstance(bounds[0], (tuple, list)):
        bounds = [bounds] * n

    offset = np.zeros(n)
    cols = []  # (var index, sign)
    upper_rows = []  # (column index in y, width)
    for j, (lo, hi) in enumerate(bounds):
        lo = -np.inf if lo is None else float(lo)
        hi = np.inf if hi is None else float(hi)
        if lo > hi:
            raise Infeasible(f"variable {j} has empty bounds [{lo}, {hi}]")
        if np.isfinite(lo):
            offset[j] = lo
            cols.append((j, 1.0))
            if np.isfinite(hi):
                upper_rows.append((len(cols) - 1, hi - lo))
        elif np.isfinite(hi):
            offset[j] = hi
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))

    ny = len(cols)
    T = np.zeros((n, ny))
    for k, (j, s) in enumerate(cols):
        T[j, k] = s

    bound_A = np.zeros((len(upper_rows), ny))
    bound_b = np.zeros(len(upper_rows))
    for r, (k, width) in enumerate(upper_rows):
        bound_A[r, k] = 1.0
        bound_b[r] = width

    ub_A = np.vstack([A_ub @ T, bound_A])
    ub_b = np.concatenate([b_ub - A_ub @ offset, bound_b])
    eq_A = A_eq @ T
    eq_b = b_eq - A_eq @ offset

    m_ub, m_eq = ub_A.shape[0], eq_A.shape[0]
    A = np.zeros((m_ub + m_eq, ny + m_ub))
    A[:m_ub, :ny] = ub_A
    A[:m_ub, ny:] = np.eye(m_ub)
    A[m_ub:, :ny] = eq_A
    b = np.concatenate([ub_b, eq_b])
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0
    c_std = np.concatenate([T.T @ c, np.zeros(m_ub)])

    # rows whose slack cannot start in the basis need an artificial
    needs_art = np.ones(m_ub + m_eq, dtype=bool)
    needs_art[:m_ub] = neg[:m_ub]
    return StandardForm(A, b, c_std, offset, T, int(needs_art.sum())), needs_art


def _pivot(tab, z, basis, r, col):
    tab[r] /= tab[r, col]
    factors = tab[:, col].copy()
    factors[r] = 0.0
    tab -= np.outer(factors, tab[r])
    z -= z[col] * tab[r]
    basis[r] = col


def _bland(tab, z, basis, allowed, tol, max_iter, it):
    while True:
        candidates = np.flatnonzero(z[:-1][allowed] < -tol)
        if candidates.size == 0:
            return it
        col = np.flatnonzero(allowed)[candidates[0]]
        column = tab[:, col]
        rows = np.flatnonzero(column > PIVOT_TOL)
        if rows.size == 0:
            raise Unbounded("LP objective is unbounded below")
        ratios = tab[rows, -1] / column[rows]
        best = ratios.min()
        ties = rows[ratios <= best + PIVOT_TOL * max(1.0, abs(best))]
        r = ties[np.argmin(basis[ties])]
        _pivot(tab, z, basis, r, col)
        it += 1
        if it > max_iter:
            raise RuntimeError(f"simplex exceeded {max_iter} pivots")


def solve_lp(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None,
             tol=1e-9, max_iter=50_000):
    """Solve an LP to optimality or raise :class:`Infeasible` / :class:`Unbounded`."""
    std, needs_art = to_standard_form(c, A_ub, b_ub, A_eq, b_eq, bounds)
    A, b = std.A, std.b
    m, ncol = A.shape
    n_art = int(needs_art.sum())
    ny = std.transform.shape[1]

    tab = np.zeros((m, ncol + n_art + 1))
    tab[:, :ncol] = A
    tab[:, -1] = b
    basis = np.empty(m, dtype=int)
    art_rows = np.flatnonzero(needs_art)
    for k, r in enumerate(art_rows):
        tab[r, ncol + k] = 1.0
        basis[r] = ncol + k
    for r in np.flatnonzero(~needs_art):
        basis[r] = ny + r  # its own slack column

    it = 0
    if n_art:
        z = np.zeros(ncol + n_art + 1)
        z[ncol:ncol + n_art] = 1.0
        z -= tab[art_rows].sum(axis=0)
        allowed = np.ones(ncol + n_art, dtype=bool)
        it = _bland(tab, z, basis, allowed, tol, max_iter, it)
        scale = max(1.0, float(np.abs(b).max(initial=0.0)))
        if -z[-1] > tol * scale:
            raise Infeasible(f"LP infeasible (phase-one residual {-z[-1]:.3e})")
        keep = np.ones(m, dtype=bool)
        for r in range(m):
            if basis[r] < ncol:
                continue
            nz = np.flatnonzero(np.abs(tab[r, :ncol]) > 1e-10)
            if nz.size:
                _pivot(tab, z, basis, r, nz[0])
            else:
                keep[r] = False
        tab = tab[keep]
        basis = basis[keep]
    else:
        keep = np.ones(m, dtype=bool)

    tab = np.delete(tab, np.s_[ncol:ncol + n_art], axis=1)
    cB = std.c[basis]
    z = np.empty(ncol + 1)
    z[:ncol] = std.c - cB @ tab[:, :ncol]
    z[-1] = -cB @ tab[:, -1]
    it = _bland(tab, z, basis, np.ones(ncol, dtype=bool), tol, max_iter, it)

    # recompute from the final basis to shed accumulated tableau round-off
    B = A[keep][:, basis]
    yB = np.linalg.solve(B, b[keep])
    yB[np.abs(yB) < 1e-14] = 0.0
    y = np.zeros(ncol)
    y[basis] = yB
    duals = np.zeros(m)
    duals[keep] = np.linalg.solve(B.T, std.c[basis])
    x = std.offset + std.transform @ y[:ny]
    fun = float(np.asarray(c, dtype=float) @ x)
    dual_obj = float(b @ duals + np.asarray(c, dtype=float) @ std.offset)
    return LPResult(x=x, fun=fun, dual_objective=dual_obj, duals=duals, y=y,
                    basis=basis, iterations=it, std=std)
