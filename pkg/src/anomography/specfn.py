"""Special functions: log-gamma, digamma, regularized incomplete gamma, chi-square.

Everything here is written against numpy only.  ``log_gamma`` and ``digamma``
accept scalars or arrays and return the same kind; the chi-square routines are
scalar.
"""

import math

import numpy as np

from .errors import NumericalError

__all__ = [
    "log_gamma",
    "digamma",
    "lgamma_ratio",
    "digamma_diff",
    "regularized_gamma_p",
    "chi2_cdf",
    "chi2_sf",
    "chi2_pdf",
    "chi2_inv_cdf",
    "chi2_inv_sf",
]

EULER_GAMMA = 0.57721566490153286061
HALF_LOG_2PI = 0.91893853320467274178

# Lanczos (g=7, n=9) coefficients for Gamma(1 + z).
_LANCZOS_G = 7.0
_LANCZOS = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)

# B_{2k} / (2k (2k - 1)) for the Stirling series of log Gamma.
_STIRLING = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)

# B_{2k} / (2k) for the asymptotic series of digamma.
_DIGAMMA_ASYM = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)

_STIRLING_MIN = 10.0
_DIGAMMA_SHIFT = 6.0
_ROOT_RADIUS = 0.2


def _zeta_table(kmax, n=20):
    """zeta(k) for k = 2..kmax by Euler-Maclaurin with cut-off ``n``."""
    out = []
    for k in range(2, kmax + 1):
        s = math.fsum(m ** -k for m in range(1, n))
        # tail: integral + endpoint + B2, B4, B6 corrections
        s += n ** (1 - k) / (k - 1) + 0.5 * n ** -k
        s += k * n ** (-k - 1) / 12.0
        s -= k * (k + 1) * (k + 2) * n ** (-k - 3) / 720.0
        s += k * (k + 1) * (k + 2) * (k + 3) * (k + 4) * n ** (-k - 5) / 30240.0
        out.append(s)
    return tuple(out)


# Taylor coefficients of log Gamma(1 + z): -gamma z + sum_k (-1)^k zeta(k)/k z^k.
_LG1_COEF = (-EULER_GAMMA,) + tuple(
    (-1.0) ** k * z / k for k, z in zip(range(2, 31), _zeta_table(30))
)


def _as_positive_array(x, name="x"):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    if np.any(arr <= 0.0):
        raise ValueError(f"{name} must be > 0")
    return arr


def _wrap(arr, like):
    if np.ndim(like) == 0:
        return float(arr)
    return arr


def _lg1_series(z):
    """log Gamma(1 + z) for |z| <= 0.2 (Horner on the zeta expansion)."""
    acc = np.zeros_like(z)
    for c in reversed(_LG1_COEF):
        acc = acc * z + c
    return acc * z


def _lanczos(x):
    z = x - 1.0
    s = np.full_like(z, _LANCZOS[0])
    for i in range(1, len(_LANCZOS)):
        s = s + _LANCZOS[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(s)


def _stirling_tail(x):
    inv = 1.0 / x
    inv2 = inv * inv
    acc = np.zeros_like(x)
    for c in reversed(_STIRLING):
        acc = acc * inv2 + c
    return acc * inv


def _stirling(x):
    return (x - 0.5) * np.log(x) - x + HALF_LOG_2PI + _stirling_tail(x)


def _log_gamma_unchecked(x):
    out = np.empty_like(x)
    near1 = np.abs(x - 1.0) <= _ROOT_RADIUS
    near2 = np.abs(x - 2.0) <= _ROOT_RADIUS
    big = x >= _STIRLING_MIN
    mid = ~(near1 | near2 | big)
    if near1.any():
        out[near1] = _lg1_series(x[near1] - 1.0)
    if near2.any():
        z = x[near2] - 2.0
        out[near2] = np.log1p(z) + _lg1_series(z)
    if big.any():
        out[big] = _stirling(x[big])
    if mid.any():
        out[mid] = _lanczos(x[mid])
    return out


def log_gamma(x):
    """Natural log of the gamma function for ``x > 0``."""
    arr = _as_positive_array(x)
    flat = np.atleast_1d(arr).astype(float)
    return _wrap(_log_gamma_unchecked(flat).reshape(arr.shape), x)


def _digamma_unchecked(x):
    y = x.copy()
    acc = np.zeros_like(x)
    low = y < _DIGAMMA_SHIFT
    while low.any():
        acc[low] -= 1.0 / y[low]
        y[low] += 1.0
        low = y < _DIGAMMA_SHIFT
    inv2 = 1.0 / (y * y)
    ser = np.zeros_like(y)
    for c in reversed(_DIGAMMA_ASYM):
        ser = ser * inv2 + c
    return acc + np.log(y) - 0.5 / y - ser * inv2


def digamma(x):
    """Derivative of :func:`log_gamma`."""
    arr = _as_positive_array(x)
    flat = np.atleast_1d(arr).astype(float)
    return _wrap(_digamma_unchecked(flat).reshape(arr.shape), x)


def lgamma_ratio(a, v):
    """``log Gamma(a + v) - log Gamma(a)`` for ``a > 0``, ``v >= 0``.

    Computed without forming the two large log-gamma values when ``a`` is in
    the Stirling regime, so it stays accurate for ``a`` up to ~1e12.
    """
    a = np.asarray(a, dtype=float)
    v = np.asarray(v, dtype=float)
    a, v = np.broadcast_arrays(a, v)
    a = np.atleast_1d(a).astype(float)
    v = np.atleast_1d(v).astype(float)
    out = np.empty_like(a)
    big = a >= _STIRLING_MIN
    if big.any():
        ab, vb = a[big], v[big]
        out[big] = (
            (ab - 0.5) * np.log1p(vb / ab)
            + vb * np.log(ab + vb)
            - vb
            + _stirling_tail(ab + vb)
            - _stirling_tail(ab)
        )
    small = ~big
    if small.any():
        out[small] = _log_gamma_unchecked(a[small] + v[small]) - _log_gamma_unchecked(a[small])
    return out


def digamma_diff(a, v):
    """``digamma(a + v) - digamma(a)`` for ``a > 0``, ``v >= 0``, cancellation-free."""
    a = np.asarray(a, dtype=float)
    v = np.asarray(v, dtype=float)
    a, v = np.broadcast_arrays(a, v)
    a = np.atleast_1d(a).astype(float)
    v = np.atleast_1d(v).astype(float)
    out = np.empty_like(a)
    big = a >= 1.0e3
    if big.any():
        ab, vb = a[big], v[big]
        b = ab + vb
        # log(b/a) - [1/(2b) - 1/(2a)] - sum c_k (b^-2k - a^-2k)
        acc = np.log1p(vb / ab) + 0.5 * vb / (ab * b)
        ia2, ib2 = 1.0 / (ab * ab), 1.0 / (b * b)
        pa, pb = ia2, ib2
        for c in _DIGAMMA_ASYM[:4]:
            acc -= c * (pb - pa)
            pa, pb = pa * ia2, pb * ib2
        out[big] = acc
    small = ~big
    if small.any():
        out[small] = _digamma_unchecked(a[small] + v[small]) - _digamma_unchecked(a[small])
    return out


def _scalar_lgamma(x):
    return float(_log_gamma_unchecked(np.array([float(x)]))[0])


def regularized_gamma_p(s, x, *, eps=1e-16, max_iter=10_000):
    """Regularized lower incomplete gamma ``P(s, x)``.

    Series for ``x < s + 1``, Lentz continued fraction for the upper tail
    otherwise.
    """
    if s <= 0:
        raise ValueError("shape must be > 0")
    if x < 0:
        raise ValueError("x must be >= 0")
    if x == 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    log_pref = s * math.log(x) - x - _scalar_lgamma(s)
    if x < s + 1.0:
        ap = s
        term = 1.0 / s
        total = term
        for _ in range(max_iter):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * eps:
                break
        else:
            raise NumericalError("incomplete gamma series did not converge")
        return min(1.0, total * math.exp(log_pref))
    return 1.0 - _upper_cf(s, x, log_pref, eps, max_iter)


def _upper_cf(s, x, log_pref, eps, max_iter):
    tiny = 1e-300
    b = x + 1.0 - s
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, max_iter):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    else:
        raise NumericalError("incomplete gamma continued fraction did not converge")
    return math.exp(log_pref) * h


def _check_df(df):
    if df < 1 or int(df) != df:
        raise ValueError("df must be a positive integer")


def chi2_cdf(df, x):
    _check_df(df)
    if x < 0:
        raise ValueError("x must be >= 0")
    return regularized_gamma_p(0.5 * df, 0.5 * x)


def chi2_sf(df, x):
    """Upper tail ``1 - chi2_cdf``, evaluated directly in the tail."""
    _check_df(df)
    if x < 0:
        raise ValueError("x must be >= 0")
    s, y = 0.5 * df, 0.5 * x
    if y == 0:
        return 1.0
    if math.isinf(y):
        return 0.0
    if y < s + 1.0:
        return 1.0 - regularized_gamma_p(s, y)
    log_pref = s * math.log(y) - y - _scalar_lgamma(s)
    return _upper_cf(s, y, log_pref, 1e-16, 10_000)


def chi2_pdf(df, x):
    _check_df(df)
    if x < 0:
        return 0.0
    s = 0.5 * df
    if x == 0:
        if s < 1:
            return math.inf
        return 0.5 if s == 1 else 0.0
    return math.exp((s - 1.0) * math.log(x) - 0.5 * x - s * math.log(2.0) - _scalar_lgamma(s))


def chi2_inv_cdf(df, p, *, tol=1e-12, max_iter=200):
    """Quantile of the chi-square distribution by bracketed Newton.

    ``tol`` is relative to the smaller tail probability, so deep lower-tail
    quantiles are located as accurately as central ones.  Raises
    :class:`NumericalError` if the bracket does not collapse within
    ``max_iter`` steps.
    """
    _check_df(df)
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if p > 0.5:
        return _newton_quantile(df, 1.0 - p, upper=True, tol=tol, max_iter=max_iter)
    return _newton_quantile(df, p, upper=False, tol=tol, max_iter=max_iter)


def chi2_inv_sf(df, q, *, tol=1e-12, max_iter=200):
    """Upper-tail quantile: ``x`` with ``chi2_sf(df, x) = q``.

    Accurate for tail probabilities far below the double resolution of
    ``1 - q``.
    """
    _check_df(df)
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if q > 0.5:
        return _newton_quantile(df, 1.0 - q, upper=False, tol=tol, max_iter=max_iter)
    return _newton_quantile(df, q, upper=True, tol=tol, max_iter=max_iter)


def _newton_quantile(df, target, *, upper, tol, max_iter):
    # solve tail(x) = target where tail is the cdf (lower) or sf (upper);
    # g(x) = sign * (tail(x) - target) is increasing in x
    tail = (lambda x: chi2_sf(df, x)) if upper else (lambda x: chi2_cdf(df, x))
    sign = -1.0 if upper else 1.0
    lo, hi = 0.0, float(max(df, 1))
    while sign * (tail(hi) - target) < 0:
        lo, hi = hi, 2.0 * hi
        if hi > 1e12:
            raise NumericalError("could not bracket the chi-square quantile")
    x = 0.5 * (lo + hi) if lo > 0 else min(float(df), hi)
    for _ in range(max_iter):
        g = sign * (tail(x) - target)
        if abs(g) <= tol * target:
            return x
        if g < 0:
            lo = x
        else:
            hi = x
        dens = chi2_pdf(df, x)
        step_ok = False
        if dens > 0 and math.isfinite(dens):
            cand = x - g / dens
            if lo < cand < hi:
                x_new, step_ok = cand, True
        if not step_ok:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= 1e-15 * max(1.0, x):
            return x_new
        x = x_new
    raise NumericalError("chi-square quantile did not converge")
