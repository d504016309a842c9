# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hyperparameter kernels; same interface as ``_kernels_py``.

Per edge the work is scalar: score scan, Illinois refinement of each sign
change, objective comparison.  Special functions follow the formulas of
``anomography.specfn``.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log, log1p, sqrt, INFINITY, isfinite

cnp.import_array()

IMPL = "compiled"

DEF AT_INTERIOR = 0
DEF AT_LOWER = 1
DEF AT_UPPER = 2

cdef double HALF_LOG_2PI = 0.91893853320467274178

cdef double[9] LANCZOS = [
    0.99999999999980993, 676.5203681218851, -1259.1392167224028,
    771.32342877765313, -176.61502916214059, 12.507343278686905,
    -0.13857109526572012, 9.9843695780195716e-6, 1.5056327351493116e-7,
]
cdef double[7] STIRLING = [
    1.0 / 12.0, -1.0 / 360.0, 1.0 / 1260.0, -1.0 / 1680.0,
    1.0 / 1188.0, -691.0 / 360360.0, 1.0 / 156.0,
]
cdef double[7] DIG_ASYM = [
    1.0 / 12.0, -1.0 / 120.0, 1.0 / 252.0, -1.0 / 240.0,
    1.0 / 132.0, -691.0 / 32760.0, 1.0 / 12.0,
]

# Taylor coefficients of log Gamma(1 + z), filled at import from specfn
cdef double LG1[30]
from .specfn import _LG1_COEF as _coef
for _k in range(30):
    LG1[_k] = _coef[_k]


cdef inline double lg1_series(double z) nogil:
    cdef double acc = 0.0
    cdef int k
    for k in range(29, -1, -1):
        acc = acc * z + LG1[k]
    return acc * z


cdef inline double stirling_tail(double x) nogil:
    cdef double inv = 1.0 / x
    cdef double inv2 = inv * inv
    cdef double acc = 0.0
    cdef int k
    for k in range(6, -1, -1):
        acc = acc * inv2 + STIRLING[k]
    return acc * inv


cdef inline double lanczos(double x) nogil:
    cdef double z = x - 1.0
    cdef double s = LANCZOS[0]
    cdef int i
    for i in range(1, 9):
        s += LANCZOS[i] / (z + i)
    cdef double t = z + 7.5
    return HALF_LOG_2PI + (z + 0.5) * log(t) - t + log(s)


cdef inline double log_gamma(double x) nogil:
    if fabs(x - 1.0) <= 0.2:
        return lg1_series(x - 1.0)
    if fabs(x - 2.0) <= 0.2:
        return log1p(x - 2.0) + lg1_series(x - 2.0)
    if x >= 10.0:
        return (x - 0.5) * log(x) - x + HALF_LOG_2PI + stirling_tail(x)
    return lanczos(x)


cdef inline double digamma(double x) nogil:
    cdef double acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    cdef double inv2 = 1.0 / (x * x)
    cdef double ser = 0.0
    cdef int k
    for k in range(6, -1, -1):
        ser = ser * inv2 + DIG_ASYM[k]
    return acc + log(x) - 0.5 / x - ser * inv2


cdef inline double lgamma_ratio(double a, double v) nogil:
    if a >= 10.0:
        return ((a - 0.5) * log1p(v / a) + v * log(a + v) - v
                + stirling_tail(a + v) - stirling_tail(a))
    return log_gamma(a + v) - log_gamma(a)


cdef inline double digamma_diff(double a, double v) nogil:
    cdef double b, acc, ia2, ib2, pa, pb
    cdef int k
    if a >= 1.0e3:
        b = a + v
        acc = log1p(v / a) + 0.5 * v / (a * b)
        ia2 = 1.0 / (a * a)
        ib2 = 1.0 / (b * b)
        pa = ia2
        pb = ib2
        for k in range(4):
            acc -= DIG_ASYM[k] * (pb - pa)
            pa *= ia2
            pb *= ib2
        return acc
    return digamma(a + v) - digamma(a)


cdef double objective(const double* V, const double* W, Py_ssize_t n, double S,
                      double K, double lam0, double eps) nogil:
    cdef double a1 = eps * lam0 + 1.0
    cdef double acc = 0.0
    cdef Py_ssize_t k
    for k in range(n):
        acc += W[k] * lgamma_ratio(a1, V[k])
    return acc - K * a1 * log1p(1.0 / eps) - S * log1p(eps)


cdef double score(const double* V, const double* W, Py_ssize_t n, double S,
                  double K, double lam0, double eps) nogil:
    cdef double a = eps * lam0
    cdef double acc = 0.0
    cdef Py_ssize_t k
    if a > 0.0:
        for k in range(n):
            acc += W[k] * digamma_diff(a + 1.0, V[k])
    return (a * acc - a * K * log1p(1.0 / eps)
            + K * (a + 1.0) / (1.0 + eps) - S * eps / (1.0 + eps))


cdef double refine(const double* V, const double* W, Py_ssize_t n, double S,
                   double K, double lam0, double lo, double hi, double glo,
                   double ghi, double xtol, int max_iter) nogil:
    # Illinois regula falsi in u = log eps; g(lo) > 0 >= g(hi)
    cdef int side = 0
    cdef int it
    cdef double x = 0.5 * (lo + hi)
    cdef double gx, denom
    for it in range(max_iter):
        denom = glo - ghi
        if denom > 0.0:
            x = hi - ghi * (hi - lo) / denom
        else:
            x = 0.5 * (lo + hi)
        if not (x > lo and x < hi):
            x = 0.5 * (lo + hi)
        gx = score(V, W, n, S, K, lam0, exp(x))
        if gx > 0.0:
            lo = x
            glo = gx
            if side == 1:
                ghi *= 0.5
            side = 1
        else:
            hi = x
            ghi = gx
            if side == -1:
                glo *= 0.5
            side = -1
        if hi - lo <= xtol or gx == 0.0:
            break
    return x


cdef double golden(const double* V, const double* W, Py_ssize_t n, double S,
                   double K, double lam0, double umin, double umax, int* flag) nogil:
    cdef double r = 0.5 * (sqrt(5.0) - 1.0)
    cdef double a = umin
    cdef double b = umax
    cdef double c = b - r * (b - a)
    cdef double d = a + r * (b - a)
    cdef double fc = objective(V, W, n, S, K, lam0, exp(c))
    cdef double fd = objective(V, W, n, S, K, lam0, exp(d))
    cdef int it
    for it in range(120):
        if fc >= fd:
            b = d
        else:
            a = c
        c = b - r * (b - a)
        d = a + r * (b - a)
        fc = objective(V, W, n, S, K, lam0, exp(c))
        fd = objective(V, W, n, S, K, lam0, exp(d))
    cdef double u = 0.5 * (a + b)
    if u <= umin + 1e-8:
        flag[0] = AT_LOWER
    elif u >= umax - 1e-8:
        flag[0] = AT_UPPER
    else:
        flag[0] = AT_INTERIOR
    return u


cdef double argmax_scan(const double* V, const double* W, Py_ssize_t n, double S,
                        double K, double lam0, double umin, double umax,
                        int n_scan, double xtol, int max_iter, int* flag) nogil:
    cdef double step = (umax - umin) / (n_scan - 1)
    cdef double u_prev = umin
    cdef double g_prev = score(V, W, n, S, K, lam0, exp(umin))
    cdef double best_u = 0.0
    cdef double best_f = -INFINITY
    cdef int best_flag = -1
    cdef double f, u, g, root
    cdef int k
    # lower bound is a candidate when the score points down into it
    if g_prev <= 0.0:
        f = objective(V, W, n, S, K, lam0, exp(umin))
        if f > best_f:
            best_f, best_u, best_flag = f, umin, AT_LOWER
    for k in range(1, n_scan):
        u = umin + k * step if k < n_scan - 1 else umax
        g = score(V, W, n, S, K, lam0, exp(u))
        if g_prev > 0.0 and g <= 0.0:
            root = refine(V, W, n, S, K, lam0, u_prev, u, g_prev, g, xtol, max_iter)
            f = objective(V, W, n, S, K, lam0, exp(root))
            if f > best_f:
                best_f, best_u, best_flag = f, root, AT_INTERIOR
        u_prev, g_prev = u, g
    if g_prev >= 0.0:
        f = objective(V, W, n, S, K, lam0, exp(umax))
        if f > best_f:
            best_f, best_u, best_flag = f, umax, AT_UPPER
    if best_flag < 0:
        return golden(V, W, n, S, K, lam0, umin, umax, flag)
    flag[0] = best_flag
    return best_u


cdef double argmax_local(const double* V, const double* W, Py_ssize_t n, double S,
                         double K, double lam0, double umin, double umax, double u0,
                         double xtol, int max_iter, int* flag) nogil:
    cdef double g0 = score(V, W, n, S, K, lam0, exp(u0))
    cdef bint up = g0 > 0.0
    cdef double cur = u0
    cdef double gcur = g0
    cdef double nxt, gn
    while True:
        nxt = cur + 1.0 if up else cur - 1.0
        if nxt > umax:
            nxt = umax
        if nxt < umin:
            nxt = umin
        gn = score(V, W, n, S, K, lam0, exp(nxt))
        if up and gn <= 0.0:
            flag[0] = AT_INTERIOR
            return refine(V, W, n, S, K, lam0, cur, nxt, gcur, gn, xtol, max_iter)
        if (not up) and gn > 0.0:
            flag[0] = AT_INTERIOR
            return refine(V, W, n, S, K, lam0, nxt, cur, gn, gcur, xtol, max_iter)
        if up and nxt >= umax:
            flag[0] = AT_UPPER
            return umax
        if (not up) and nxt <= umin:
            flag[0] = AT_LOWER
            return umin
        cur = nxt
        gcur = gn


def _prep(values, weights, offsets, counts, lam0):
    return (
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(weights, dtype=np.float64),
        np.ascontiguousarray(offsets, dtype=np.int64),
        np.ascontiguousarray(counts, dtype=np.float64),
        np.ascontiguousarray(lam0, dtype=np.float64),
    )


cdef double seg_sum(const double* V, const double* W, Py_ssize_t n) nogil:
    cdef double s = 0.0
    cdef Py_ssize_t k
    for k in range(n):
        s += V[k] * W[k]
    return s


def eps_objective(values, weights, offsets, counts, lam0, eps):
    cdef const double[::1] V, W, K, L, E
    cdef const cnp.int64_t[::1] O
    values, weights, offsets, counts, lam0 = _prep(values, weights, offsets, counts, lam0)
    V, W, O, K, L = values, weights, offsets, counts, lam0
    eps_arr = np.ascontiguousarray(np.broadcast_to(np.asarray(eps, dtype=np.float64), lam0.shape))
    E = eps_arr
    cdef Py_ssize_t ne = L.shape[0]
    out = np.empty(ne)
    cdef double[::1] o = out
    cdef Py_ssize_t e, a, n
    cdef const double* pv
    cdef const double* pw
    with nogil:
        for e in range(ne):
            a = O[e]
            n = O[e + 1] - a
            pv = &V[a] if n > 0 else NULL
            pw = &W[a] if n > 0 else NULL
            o[e] = objective(pv, pw, n, seg_sum(pv, pw, n), K[e], L[e], E[e])
    return out


def eps_score(values, weights, offsets, counts, lam0, eps):
    """``eps * d f / d eps`` per edge."""
    cdef const double[::1] V, W, K, L, E
    cdef const cnp.int64_t[::1] O
    values, weights, offsets, counts, lam0 = _prep(values, weights, offsets, counts, lam0)
    V, W, O, K, L = values, weights, offsets, counts, lam0
    eps_arr = np.ascontiguousarray(np.broadcast_to(np.asarray(eps, dtype=np.float64), lam0.shape))
    E = eps_arr
    cdef Py_ssize_t ne = L.shape[0]
    out = np.empty(ne)
    cdef double[::1] o = out
    cdef Py_ssize_t e, a, n
    cdef const double* pv
    cdef const double* pw
    with nogil:
        for e in range(ne):
            a = O[e]
            n = O[e + 1] - a
            pv = &V[a] if n > 0 else NULL
            pw = &W[a] if n > 0 else NULL
            o[e] = score(pv, pw, n, seg_sum(pv, pw, n), K[e], L[e], E[e])
    return out


def eps_argmax(values, weights, offsets, counts, lam0, double eps_min, double eps_max, *,
               eps_init=None, int n_scan=37, double xtol=1e-10, int max_iter=200):
    """Per-edge maximizer of the hyperparameter objective; see ``_kernels_py.eps_argmax``."""
    cdef const double[::1] V, W, K, L, I
    cdef const cnp.int64_t[::1] O
    values, weights, offsets, counts, lam0 = _prep(values, weights, offsets, counts, lam0)
    V, W, O, K, L = values, weights, offsets, counts, lam0
    cdef Py_ssize_t ne = L.shape[0]
    out = np.empty(ne)
    flags = np.zeros(ne, dtype=np.int8)
    cdef double[::1] o = out
    cdef cnp.int8_t[::1] fl = flags
    cdef double umin = log(eps_min)
    cdef double umax = log(eps_max)
    cdef bint local = eps_init is not None
    if local:
        I = np.ascontiguousarray(np.clip(np.asarray(eps_init, dtype=np.float64), eps_min, eps_max))
    cdef Py_ssize_t e, a, n
    cdef const double* pv
    cdef const double* pw
    cdef int flag
    cdef double u, u0, S
    with nogil:
        for e in range(ne):
            a = O[e]
            n = O[e + 1] - a
            pv = &V[a] if n > 0 else NULL
            pw = &W[a] if n > 0 else NULL
            S = seg_sum(pv, pw, n)
            flag = AT_INTERIOR
            if local:
                u0 = log(I[e])
                if u0 < umin:
                    u0 = umin
                if u0 > umax:
                    u0 = umax
                u = argmax_local(pv, pw, n, S, K[e], L[e], umin, umax, u0, xtol, max_iter, &flag)
            else:
                u = argmax_scan(pv, pw, n, S, K[e], L[e], umin, umax, n_scan, xtol, max_iter, &flag)
            o[e] = exp(u)
            fl[e] = flag
    return out, flags
