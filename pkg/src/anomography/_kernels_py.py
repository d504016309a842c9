"""Pure numpy implementation of the hyperparameter kernels.

Each edge ``e`` owns a segment ``offsets[e]:offsets[e+1]`` of ``values`` /
``weights``: distinct replica conditional means and their multiplicities.
``counts[e]`` is the total number of replica observations of that edge
(zero-valued observations may be left out of the segment but still count
here).  The objective maximized over ``eps``::

    f(eps) = sum_k w_k [lgamma(v_k + a + 1) - lgamma(a + 1)]
             + K (a + 1) log(eps / (1 + eps)) - S log(1 + eps),   a = eps * lam0

is the negative binomial log-likelihood of the replica means.  Work happens in
``u = log eps``; ``g(u) = eps * f'(eps)``.
"""

import numpy as np

from .specfn import digamma_diff, lgamma_ratio

__all__ = ["eps_objective", "eps_score", "eps_argmax", "IMPL"]

IMPL = "python"

AT_INTERIOR = 0
AT_LOWER = 1
AT_UPPER = 2


def _padded(values, weights, offsets):
    E = len(offsets) - 1
    lens = np.diff(offsets)
    width = max(int(lens.max()) if E else 0, 1)
    V = np.zeros((E, width))
    W = np.zeros((E, width))
    if len(values):
        row = np.repeat(np.arange(E), lens)
        col = np.arange(len(values)) - np.repeat(offsets[:-1], lens)
        V[row, col] = values
        W[row, col] = weights
    return V, W


def _sums(V, W):
    return (V * W).sum(axis=1)


def _objective(V, W, S, K, lam0, eps):
    a1 = eps * lam0 + 1.0
    lr = lgamma_ratio(a1[:, None] * np.ones_like(V), V).reshape(V.shape)
    return (W * lr).sum(axis=1) - K * a1 * np.log1p(1.0 / eps) - S * np.log1p(eps)


def _score(V, W, S, K, lam0, eps):
    a = eps * lam0
    dd = digamma_diff((a + 1.0)[:, None] * np.ones_like(V), V).reshape(V.shape)
    return (
        a * (W * dd).sum(axis=1)
        - a * K * np.log1p(1.0 / eps)
        + K * (a + 1.0) / (1.0 + eps)
        - S * eps / (1.0 + eps)
    )


def eps_objective(values, weights, offsets, counts, lam0, eps):
    values, weights, offsets, counts, lam0 = _prep(values, weights, offsets, counts, lam0)
    V, W = _padded(values, weights, offsets)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), lam0.shape).copy()
    return _objective(V, W, _sums(V, W), counts, lam0, eps)


def eps_score(values, weights, offsets, counts, lam0, eps):
    """``eps * d f / d eps`` per edge."""
    values, weights, offsets, counts, lam0 = _prep(values, weights, offsets, counts, lam0)
    V, W = _padded(values, weights, offsets)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), lam0.shape).copy()
    return _score(V, W, _sums(V, W), counts, lam0, eps)


def _prep(values, weights, offsets, counts, lam0):
    return (
        np.ascontiguousarray(values, dtype=float),
        np.ascontiguousarray(weights, dtype=float),
        np.ascontiguousarray(offsets, dtype=np.int64),
        np.ascontiguousarray(counts, dtype=float),
        np.ascontiguousarray(lam0, dtype=float),
    )


def _refine(V, W, S, K, lam0, lo, hi, glo, ghi, xtol, max_iter):
    """Illinois regula falsi on brackets with g(lo) > 0 >= g(hi), vectorized."""
    lo, hi, glo, ghi = lo.copy(), hi.copy(), glo.copy(), ghi.copy()
    root = 0.5 * (lo + hi)
    side = np.zeros(lo.shape, dtype=np.int8)
    active = np.ones(lo.shape, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        l, h, gl, gh = lo[idx], hi[idx], glo[idx], ghi[idx]
        denom = gl - gh
        x = np.where(denom > 0, h - gh * (h - l) / np.where(denom > 0, denom, 1.0), 0.5 * (l + h))
        bad = ~((x > l) & (x < h))
        x[bad] = 0.5 * (l[bad] + h[bad])
        gx = _score(V[idx], W[idx], S[idx], K[idx], lam0[idx], np.exp(x))
        pos = gx > 0
        # Illinois: halve the retained endpoint's value when the same side repeats
        s_old = side[idx]
        i_pos = idx[pos]
        lo[i_pos], glo[i_pos] = x[pos], gx[pos]
        rep = pos & (s_old == 1)
        ghi[idx[rep]] *= 0.5
        i_neg = idx[~pos]
        hi[i_neg], ghi[i_neg] = x[~pos], gx[~pos]
        rep = (~pos) & (s_old == -1)
        glo[idx[rep]] *= 0.5
        side[idx] = np.where(pos, 1, -1)
        root[idx] = x
        done = (hi[idx] - lo[idx] <= xtol) | (gx == 0)
        active[idx[done]] = False
    return root


def eps_argmax(values, weights, offsets, counts, lam0, eps_min, eps_max, *,
               eps_init=None, n_scan=37, xtol=1e-10, max_iter=200):
    """Per-edge maximizer of the negative binomial hyperparameter objective.

    Without ``eps_init`` the score is scanned on ``n_scan`` log-spaced points
    and every bracketed local maximum (plus the bounds) is compared by
    objective value.  With ``eps_init`` a bracket is grown from that point in
    the ascent direction (unit steps in ``log eps``) and only that local
    maximum is refined.

    Returns ``(eps, flag)`` with ``flag`` 0 interior, 1 at ``eps_min``, 2 at
    ``eps_max``.
    """
    values, weights, offsets, counts, lam0 = _prep(values, weights, offsets, counts, lam0)
    V, W = _padded(values, weights, offsets)
    S = _sums(V, W)
    E = len(lam0)
    umin, umax = np.log(eps_min), np.log(eps_max)
    if E == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int8)
    if eps_init is None:
        return _argmax_scan(V, W, S, counts, lam0, umin, umax, n_scan, xtol, max_iter)
    return _argmax_local(V, W, S, counts, lam0, umin, umax,
                         np.asarray(eps_init, dtype=float), xtol, max_iter)


def _argmax_scan(V, W, S, K, lam0, umin, umax, n_scan, xtol, max_iter):
    E = len(lam0)
    grid = np.linspace(umin, umax, n_scan)
    G = np.empty((E, n_scan))
    for k, u in enumerate(grid):
        G[:, k] = _score(V, W, S, K, lam0, np.full(E, np.exp(u)))
    # candidates: bounds and every + to - crossing
    rows, cols = np.nonzero((G[:, :-1] > 0) & (G[:, 1:] <= 0))
    roots = np.empty(0)
    if len(rows):
        lo, hi = grid[cols], grid[cols + 1]
        roots = _refine(V[rows], W[rows], S[rows], K[rows], lam0[rows],
                        lo, hi, G[rows, cols], G[rows, cols + 1], xtol, max_iter)
    # order matters for ties: lower bound, interior roots, upper bound
    cand_edge = np.concatenate([np.arange(E), rows, np.arange(E)])
    cand_u = np.concatenate([np.full(E, umin), roots, np.full(E, umax)])
    cand_flag = np.concatenate([np.full(E, AT_LOWER), np.full(len(rows), AT_INTERIOR),
                                np.full(E, AT_UPPER)]).astype(np.int8)
    # a bound is only a candidate if the score points into it
    ok = np.concatenate([G[:, 0] <= 0, np.ones(len(rows), dtype=bool), G[:, -1] >= 0])
    cand_edge, cand_u, cand_flag = cand_edge[ok], cand_u[ok], cand_flag[ok]
    f = _objective(V[cand_edge], W[cand_edge], S[cand_edge], K[cand_edge],
                   lam0[cand_edge], np.exp(cand_u))
    best_u = np.full(E, np.nan)
    best_f = np.full(E, -np.inf)
    best_flag = np.zeros(E, dtype=np.int8)
    for c in range(len(cand_edge)):
        e = cand_edge[c]
        if f[c] > best_f[e]:
            best_f[e], best_u[e], best_flag[e] = f[c], cand_u[c], cand_flag[c]
    missing = np.isnan(best_u)
    if missing.any():
        # score sign pattern gave no candidate (non-finite scores); fall back to the grid
        idx = np.nonzero(missing)[0]
        best_u[idx], best_flag[idx] = _golden(V[idx], W[idx], S[idx], K[idx], lam0[idx], umin, umax)
    return np.exp(best_u), best_flag


def _golden(V, W, S, K, lam0, umin, umax, n_iter=120):
    """Golden-section search on f over [umin, umax] (fallback path)."""
    r = 0.5 * (np.sqrt(5.0) - 1.0)
    a = np.full(len(lam0), umin)
    b = np.full(len(lam0), umax)
    c = b - r * (b - a)
    d = a + r * (b - a)
    fc = _objective(V, W, S, K, lam0, np.exp(c))
    fd = _objective(V, W, S, K, lam0, np.exp(d))
    for _ in range(n_iter):
        left = fc >= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c_new = b - r * (b - a)
        d_new = a + r * (b - a)
        fc_new = _objective(V, W, S, K, lam0, np.exp(c_new))
        fd_new = _objective(V, W, S, K, lam0, np.exp(d_new))
        c, d, fc, fd = c_new, d_new, fc_new, fd_new
    u = 0.5 * (a + b)
    flag = np.where(u <= umin + 1e-8, AT_LOWER, np.where(u >= umax - 1e-8, AT_UPPER, AT_INTERIOR))
    return u, flag.astype(np.int8)


def _argmax_local(V, W, S, K, lam0, umin, umax, eps_init, xtol, max_iter):
    E = len(lam0)
    u0 = np.clip(np.log(np.clip(eps_init, np.exp(umin), np.exp(umax))), umin, umax)
    g0 = _score(V, W, S, K, lam0, np.exp(u0))
    up = g0 > 0
    lo = np.where(up, u0, u0)
    hi = lo.copy()
    glo = g0.copy()
    ghi = g0.copy()
    out_u = np.full(E, np.nan)
    out_flag = np.zeros(E, dtype=np.int8)
    # grow the bracket: moving up while g > 0, down while g <= 0
    active = np.ones(E, dtype=bool)
    cur, gcur = u0.copy(), g0.copy()
    while active.any():
        idx = np.nonzero(active)[0]
        step = np.where(up[idx], 1.0, -1.0)
        nxt = np.clip(cur[idx] + step, umin, umax)
        gn = _score(V[idx], W[idx], S[idx], K[idx], lam0[idx], np.exp(nxt))
        crossed = np.where(up[idx], gn <= 0, gn > 0)
        at_bound = np.where(up[idx], nxt >= umax, nxt <= umin) & ~crossed
        i_c = idx[crossed]
        u_up = up[i_c]
        lo[i_c] = np.where(u_up, cur[i_c], nxt[crossed])
        glo[i_c] = np.where(u_up, gcur[i_c], gn[crossed])
        hi[i_c] = np.where(u_up, nxt[crossed], cur[i_c])
        ghi[i_c] = np.where(u_up, gn[crossed], gcur[i_c])
        i_b = idx[at_bound]
        out_u[i_b] = np.where(up[i_b], umax, umin)
        out_flag[i_b] = np.where(up[i_b], AT_UPPER, AT_LOWER)
        cur[idx], gcur[idx] = nxt, gn
        active[idx[crossed | at_bound]] = False
    todo = np.isnan(out_u)
    if todo.any():
        idx = np.nonzero(todo)[0]
        out_u[idx] = _refine(V[idx], W[idx], S[idx], K[idx], lam0[idx],
                             lo[idx], hi[idx], glo[idx], ghi[idx], xtol, max_iter)
    return np.exp(out_u), out_flag
