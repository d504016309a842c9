"""Least-absolute-deviation projection of the baseline onto the observations.

Finds nonnegative rates closest to the baseline in the elementwise L1 norm
whose row sums, column sums and interior flows match the window-averaged
observations, with directly observed edges pinned to their mean counts.  The
result is the warm start for the EM estimators.

The solver is ADMM on the split ``x = z``, ``A x = w``: ``z`` takes the L1
proximal step around the baseline followed by clipping at zero, ``w`` is
either fixed at the targets (equality form) or soft-thresholded around them
(penalized form, used when the targets are inconsistent).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InconsistentObservationError
from .netsim import FlowMap, check_rate_matrix

__all__ = [
    "ConstraintSystem",
    "MreConfig",
    "MreSolution",
    "build_constraints",
    "solve_mre",
    "solve_lp",
    "feasibility_residual",
]


@dataclass
class ConstraintSystem:
    """Averaged targets: rows, columns, flows and pinned edges."""

    row_targets: np.ndarray
    col_targets: np.ndarray
    flow_targets: np.ndarray
    flowmap: FlowMap
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        self.row_targets = np.asarray(self.row_targets, dtype=float)
        self.col_targets = np.asarray(self.col_targets, dtype=float)
        self.flow_targets = np.asarray(self.flow_targets, dtype=float).reshape(self.flowmap.H)
        self.fixed = {(int(i), int(j)): float(v) for (i, j), v in self.fixed.items()}
        P = self.P
        if self.col_targets.shape != (P,):
            raise ValueError("row and column targets differ in length")
        for arr in (self.row_targets, self.col_targets, self.flow_targets):
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError("targets must be finite and nonnegative")
        for (i, j), v in self.fixed.items():
            if i == j or not (0 <= i < P and 0 <= j < P) or v < 0:
                raise ValueError(f"bad fixed entry ({i}, {j}) = {v}")

    @property
    def P(self):
        return len(self.row_targets)

    @property
    def H(self):
        return self.flowmap.H

    def fixed_mask(self):
        m = np.zeros((self.P, self.P), dtype=bool)
        for i, j in self.fixed:
            m[i, j] = True
        return m

    def fixed_matrix(self):
        out = np.zeros((self.P, self.P))
        for (i, j), v in self.fixed.items():
            out[i, j] = v
        return out

    def free_mask(self):
        return ~np.eye(self.P, dtype=bool) & ~self.fixed_mask()

    def linear_system(self):
        """``(A, b, free)``: constraints on the free entries (row-major order)."""
        P = self.P
        free = self.free_mask()
        ii, jj = np.nonzero(free)
        n = len(ii)
        masks = self.flowmap.masks(P)
        A = np.zeros((2 * P + self.H, n))
        A[ii, np.arange(n)] = 1.0
        A[P + jj, np.arange(n)] = 1.0
        for h in range(self.H):
            A[2 * P + h] = masks[h][ii, jj]
        fix = self.fixed_matrix()
        b = np.concatenate(
            [
                self.row_targets - fix.sum(axis=1),
                self.col_targets - fix.sum(axis=0),
                self.flow_targets - np.einsum("hij,ij->h", masks, fix),
            ]
        )
        return A, b, free


def build_constraints(obs, flowmap=None):
    """Window means of the observations as a :class:`ConstraintSystem`."""
    flowmap = obs.flowmap if flowmap is None else flowmap
    if obs.T < 1:
        raise ValueError("need at least one window")
    means = obs.observed_counts.mean(axis=0) if obs.observed_edges else []
    fixed = dict(zip(obs.observed_edges, np.asarray(means, dtype=float).tolist()))
    return ConstraintSystem(
        obs.row_sums.mean(axis=0),
        obs.col_sums.mean(axis=0),
        obs.flows.mean(axis=0),
        flowmap,
        fixed,
    )


def feasibility_residual(rates, cs):
    """Largest absolute violation over row, column, flow and pinned constraints."""
    lam = np.asarray(rates, dtype=float)
    return float(np.max(np.abs(_residual_vector(lam, cs)), initial=0.0))


def _residual_vector(lam, cs):
    lam = np.where(np.eye(cs.P, dtype=bool), 0.0, lam)
    masks = cs.flowmap.masks(cs.P)
    parts = [
        lam.sum(axis=1) - cs.row_targets,
        lam.sum(axis=0) - cs.col_targets,
        np.einsum("hij,ij->h", masks, lam) - cs.flow_targets,
        np.array([lam[i, j] - v for (i, j), v in cs.fixed.items()]),
    ]
    return np.concatenate(parts)


@dataclass
class MreConfig:
    rel_tol: float = 1e-8
    max_iter: int = 50_000
    rho: float = 1.0
    penalty: float = 100.0
    infeasible_tol: float = 1e-6


@dataclass
class MreSolution:
    rates: np.ndarray
    objective: float
    residuals: np.ndarray
    multipliers: np.ndarray
    iterations: int
    converged: bool
    penalized: bool = False

    @property
    def max_residual(self):
        return float(np.max(np.abs(self.residuals), initial=0.0))

    def diagnostics(self):
        return {
            "objective": self.objective,
            "max_residual": self.max_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "penalized": self.penalized,
        }


def _admm(A, b, x0, penalty, cfg):
    """ADMM for min ||x - x0||_1 + pen(Ax - b), x >= 0.

    ``penalty=None`` means the equality constraint ``A x = b``; otherwise
    ``pen = penalty * ||.||_1``.
    """
    m, n = A.shape
    AtA = A.T @ A
    # x-step solves (I + A'A) x = rhs; Cholesky of n x n or the m x m Woodbury form
    if n <= m:
        chol = np.linalg.cholesky(np.eye(n) + AtA)
        solve = lambda r: _cho_solve(chol, r)  # noqa: E731
    else:
        chol = np.linalg.cholesky(np.eye(m) + A @ A.T)
        solve = lambda r: r - A.T @ _cho_solve(chol, A @ r)  # noqa: E731
    rho = cfg.rho
    z = np.maximum(x0, 0.0)
    w = A @ z if penalty is not None else b.copy()
    u = np.zeros(n)
    y = np.zeros(m)
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        x = solve(z - u + A.T @ (w - y))
        Ax = A @ x
        z_old, w_old = z, w
        t = x + u
        z = np.maximum(x0 + np.sign(t - x0) * np.maximum(np.abs(t - x0) - 1.0 / rho, 0.0), 0.0)
        if penalty is None:
            w = b
        else:
            s = Ax + y - b
            w = b + np.sign(s) * np.maximum(np.abs(s) - penalty / rho, 0.0)
        u = u + x - z
        y = y + Ax - w
        if it % 10 == 0 or it == cfg.max_iter:
            r_pri = np.sqrt(np.sum((x - z) ** 2) + np.sum((Ax - w) ** 2))
            r_dual = rho * np.sqrt(np.sum((z - z_old + A.T @ (w - w_old)) ** 2))
            pri_ref = max(np.linalg.norm(x), np.linalg.norm(z), np.linalg.norm(b), 1.0)
            dual_ref = max(rho * np.sqrt(np.sum(u ** 2) + np.sum(y ** 2)), 1.0)
            if r_pri <= cfg.rel_tol * pri_ref and r_dual <= cfg.rel_tol * dual_ref:
                converged = True
                break
            # residual balancing; scaled duals follow rho
            if r_pri > 10.0 * r_dual:
                rho *= 2.0
                u, y = u / 2.0, y / 2.0
            elif r_dual > 10.0 * r_pri:
                rho /= 2.0
                u, y = u * 2.0, y * 2.0
    return z, rho * y, it, converged


def _cho_solve(L, r):
    from scipy.linalg import solve_triangular

    return solve_triangular(L.T, solve_triangular(L, r, lower=True), lower=False)


def _assemble(cs, lam0, free, x):
    lam = cs.fixed_matrix()
    lam[free] = x
    np.fill_diagonal(lam, 0.0)
    off = ~np.eye(cs.P, dtype=bool)
    obj = float(np.abs(lam - lam0)[off].sum())
    return lam, obj


def solve_mre(cs, lam0, cfg=None):
    """Nonnegative rates minimizing ``||lam - lam0||_1`` subject to the targets.

    Falls back to the penalized problem (``cfg.penalty`` times the L1
    constraint violation) when the targets admit no nonnegative solution;
    the solution then has ``penalized=True``.
    """
    cfg = cfg or MreConfig()
    lam0 = check_rate_matrix(lam0, "lam0")
    if lam0.shape != (cs.P, cs.P):
        raise ValueError("baseline does not match the constraint system")
    A, b, free = cs.linear_system()
    x0 = lam0[free]
    if A.shape[1] == 0:
        lam, obj = _assemble(cs, lam0, free, x0[:0])
        res = _residual_vector(lam, cs)
        return MreSolution(lam, obj, res, np.zeros(len(b)), 0, True,
                           penalized=bool(np.abs(res).max(initial=0.0) > cfg.infeasible_tol))
    scale = max(1.0, np.abs(b).max(initial=0.0))
    # affine consistency first: least-squares residual of A x = b
    xls, *_ = np.linalg.lstsq(A, b, rcond=None)
    penalized = bool(np.abs(A @ xls - b).max(initial=0.0) > cfg.infeasible_tol * scale)
    if not penalized:
        x, mult, it, conv = _admm(A, b / scale, x0 / scale, None, cfg)
        x, mult = x * scale, mult
        if np.abs(A @ x - b).max(initial=0.0) > cfg.infeasible_tol * scale and not conv:
            penalized = True
    if penalized:
        x, mult, it, conv = _admm(A, b / scale, x0 / scale, cfg.penalty, cfg)
        x = x * scale
    lam, obj = _assemble(cs, lam0, free, x)
    return MreSolution(lam, obj, _residual_vector(lam, cs), mult, it, conv, penalized)


def solve_lp(cs, lam0, penalty=None):
    """Reference solution by linear programming (used as a test oracle).

    Splits ``x - x0 = p - q`` (and the constraint violation likewise when
    ``penalty`` is given) and solves with scipy's HiGHS.
    """
    from scipy.optimize import linprog

    lam0 = check_rate_matrix(lam0, "lam0")
    A, b, free = cs.linear_system()
    m, n = A.shape
    x0 = lam0[free]
    # variables: x, p, q [, s_plus, s_minus]
    eye = np.eye(n)
    A_eq = [np.hstack([eye, -eye, eye]), None]
    b_eq = [x0, None]
    c = np.concatenate([np.zeros(n), np.ones(2 * n)])
    if penalty is None:
        A_eq[1] = np.hstack([A, np.zeros((m, 2 * n))])
    else:
        A_eq = [np.hstack([A_eq[0], np.zeros((n, 2 * m))]), None]
        A_eq[1] = np.hstack([A, np.zeros((m, 2 * n)), -np.eye(m), np.eye(m)])
        c = np.concatenate([c, np.full(2 * m, float(penalty))])
    b_eq[1] = b
    res = linprog(c, A_eq=np.vstack(A_eq), b_eq=np.concatenate(b_eq), bounds=(0, None), method="highs")
    if res.status != 0:
        raise InconsistentObservationError(f"linear program failed: {res.message}")
    lam, obj = _assemble(cs, lam0, free, res.x[:n])
    if penalty is not None:
        obj_total = float(res.fun) + float(np.abs(lam - lam0)[cs.fixed_mask()].sum())
        return lam, obj, obj_total
    return lam, obj
