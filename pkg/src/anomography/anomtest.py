"""Goodness-of-fit test of a fitted model against the baseline, and ROC tools.

The statistic compares the EM surrogate (expected complete-data log
likelihood, plus the log prior for MAP and HIER fits) at the baseline and at
the fitted rates::

    psi = -2 (S(lam0) - S(lam_hat))

and rejects the baseline when it exceeds the upper-alpha chi-square quantile
with ``P**2 - P`` degrees of freedom.

The surrogate sums over the ``2 + H`` replicas, each of which is a full copy
of the same windows.  With ``scale="replica-mean"`` (the default) the
statistic is divided by the replica count, so that it reduces to the ordinary
likelihood ratio when every edge is observed.  ``scale="replica-sum"`` keeps
the raw sum.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import xlogy

from .specfn import chi2_inv_sf

__all__ = [
    "REPLICA_MEAN",
    "REPLICA_SUM",
    "TestResult",
    "RocCurve",
    "surrogate_log_model",
    "edge_statistics",
    "psi_statistic",
    "anomaly_test",
    "edge_flags",
    "critical_value",
    "roc_curve",
    "auc_pairwise",
    "operating_point",
]

REPLICA_MEAN = "replica-mean"
REPLICA_SUM = "replica-sum"


def _prior_weights(fit):
    """``(eps, lam0)`` of the fit's prior, or ``None`` for MLEM."""
    if fit.variant == "MLEM" or fit.eps_hat is None:
        return None
    eps = np.broadcast_to(np.asarray(fit.eps_hat, dtype=float), fit.lambda_hat.shape)
    return eps, fit.lam0


def _offdiag(P):
    return ~np.eye(P, dtype=bool)


def surrogate_log_model(fit, rates):
    """Surrogate log model of ``fit`` evaluated at ``rates``.

    Sum over replicas, windows and off-diagonal edges of
    ``N_hat log(rate) - rate``, plus (MAP, HIER) the log prior counted once.
    Returns ``-inf`` when a zero rate meets positive expected counts.
    """
    lam = np.asarray(rates, dtype=float)
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValueError("rates must be finite and nonnegative")
    counts = fit.final_counts
    K = counts.stats.K
    off = _offdiag(lam.shape[0])
    total = float(np.sum(xlogy(counts.totals[off], lam[off]) - K * lam[off]))
    prior = _prior_weights(fit)
    if prior is not None:
        eps, lam0 = prior
        total += float(np.sum(xlogy(eps[off] * lam0[off], lam[off]) - eps[off] * lam[off]))
    return total if not math.isnan(total) else -math.inf


def _bregman(lam, lam_hat):
    """``lam * (r log r - r + 1)`` with ``r = lam_hat / lam``, elementwise and >= 0."""
    out = np.zeros_like(lam)
    pos = lam > 0
    r = np.where(pos, lam_hat / np.where(pos, lam, 1.0), 0.0)
    x = r - 1.0
    small = pos & (np.abs(x) < 1e-4)
    big = pos & ~small
    # series (1+x) log1p(x) - x = x^2/2 - x^3/6 + x^4/12 - ...
    xs = x[small]
    out[small] = lam[small] * xs * xs * (0.5 - xs / 6.0 + xs * xs / 12.0)
    rb = r[big]
    out[big] = lam[big] * np.maximum(xlogy(rb, rb) - rb + 1.0, 0.0)
    zero = ~pos
    out[zero] = np.where(lam_hat[zero] > 0, np.inf, 0.0)
    return out


def edge_statistics(fit, lam0=None, scale=REPLICA_MEAN):
    """Per-edge contributions ``psi_ij`` (``(P, P)``, zero diagonal).

    Uses the fact that ``fit.lambda_hat`` maximizes the surrogate, so each
    edge's term is a nonnegative Bregman divergence; this avoids cancelling
    large prior terms when ``eps`` is near its upper bound.
    """
    lam0 = fit.lam0 if lam0 is None else np.asarray(lam0, dtype=float)
    lam_hat = np.asarray(fit.lambda_hat, dtype=float)
    K = fit.final_counts.stats.K
    weight = np.full(lam_hat.shape, float(K))
    prior = _prior_weights(fit)
    if prior is not None:
        weight = weight + prior[0]
    psi = 2.0 * weight * _bregman(lam0, lam_hat)
    psi[~_offdiag(lam_hat.shape[0])] = 0.0
    return psi / _divisor(fit, scale)


def _divisor(fit, scale):
    if scale == REPLICA_MEAN:
        return float(fit.final_counts.stats.n_replicas)
    if scale == REPLICA_SUM:
        return 1.0
    raise ValueError(f"unknown scale {scale!r}")


def psi_statistic(fit, lam0=None, scale=REPLICA_MEAN):
    """Ratio statistic; ``inf`` when the baseline gives zero rate to a used edge."""
    return float(edge_statistics(fit, lam0, scale).sum())


def critical_value(P, alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return chi2_inv_sf(P * P - P, alpha)


@dataclass
class TestResult:
    __test__ = False  # not a pytest class

    psi_hat: float
    critical_value: float
    df: int
    alpha: float
    reject: bool
    structural_mismatch: bool = False
    mismatch_edges: list = field(default_factory=list)
    per_window_terms: list = field(default_factory=list)
    scale: str = REPLICA_MEAN

    def to_json(self):
        d = asdict(self)
        d["psi_hat"] = _encode_float(self.psi_hat)
        d["per_window_terms"] = [_encode_float(v) for v in self.per_window_terms]
        d["mismatch_edges"] = [list(e) for e in self.mismatch_edges]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["psi_hat"] = _decode_float(d["psi_hat"])
        d["per_window_terms"] = [_decode_float(v) for v in d["per_window_terms"]]
        d["mismatch_edges"] = [tuple(e) for e in d["mismatch_edges"]]
        return cls(**d)


def _encode_float(v):
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _decode_float(v):
    return float(v) if isinstance(v, str) else v


def _per_window_terms(fit, lam0, scale):
    """``-2 (log M_t(lam0) - log M_t(lam_hat))`` per window, prior excluded."""
    counts = fit.final_counts
    n_hat = sum(counts.replicas())  # (T, P, P), summed over replicas
    lam_hat = fit.lambda_hat
    n_rep = counts.stats.n_replicas
    off = _offdiag(lam_hat.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        a = xlogy(n_hat, lam0) - n_rep * lam0
        b = xlogy(n_hat, lam_hat) - n_rep * lam_hat
        terms = -2.0 * np.where(off, a - b, 0.0).sum(axis=(1, 2))
    return (terms / _divisor(fit, scale)).tolist()


def anomaly_test(fit, lam0=None, alpha=0.05, scale=REPLICA_MEAN, window_terms=False):
    """Chi-square test of ``fit`` against ``lam0`` at level ``alpha``."""
    lam0 = fit.lam0 if lam0 is None else np.asarray(lam0, dtype=float)
    P = fit.lambda_hat.shape[0]
    c = critical_value(P, alpha)
    per_edge = edge_statistics(fit, lam0, scale)
    psi = float(per_edge.sum())
    bad = np.argwhere(np.isinf(per_edge))
    terms = _per_window_terms(fit, lam0, scale) if window_terms else []
    return TestResult(
        psi_hat=psi,
        critical_value=c,
        df=P * P - P,
        alpha=float(alpha),
        reject=bool(psi > c),
        structural_mismatch=bool(len(bad)),
        mismatch_edges=[(int(i), int(j)) for i, j in bad],
        per_window_terms=terms,
        scale=scale,
    )


def edge_flags(fit, lam0=None, alpha=0.05, bonferroni=False, scale=REPLICA_MEAN):
    """Edges whose 1-df contribution exceeds the upper-alpha chi-square(1) quantile."""
    P = fit.lambda_hat.shape[0]
    level = alpha / (P * P - P) if bonferroni else alpha
    c = chi2_inv_sf(1, level)
    psi = edge_statistics(fit, lam0, scale)
    return {(int(i), int(j)) for i, j in np.argwhere(psi > c) if i != j}


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def to_csv(self):
        lines = ["threshold,fpr,tpr"]
        for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
            lines.append(f"{_fmt(t)},{float(f)!r},{float(p)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text):
        rows = [ln.split(",") for ln in text.strip().splitlines()[1:]]
        th = np.array([float(r[0]) for r in rows])
        fpr = np.array([float(r[1]) for r in rows])
        tpr = np.array([float(r[2]) for r in rows])
        return cls(fpr, tpr, th, _trap(fpr, tpr))

    def to_json(self):
        return json.dumps(
            {
                "auc": self.auc,
                "fpr": self.fpr.tolist(),
                "tpr": self.tpr.tolist(),
                "thresholds": [_encode_float(t) for t in self.thresholds],
            }
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            np.array(d["fpr"]),
            np.array(d["tpr"]),
            np.array([_decode_float(t) for t in d["thresholds"]]),
            float(d["auc"]),
        )


def _fmt(t):
    t = float(t)
    if math.isinf(t):
        return "inf" if t > 0 else "-inf"
    return repr(t)


def _trap(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) * 0.5))


def roc_curve(statistics, labels):
    """Threshold sweep, highest statistic first; tied statistics form one step.

    The first point is ``(0, 0)`` at threshold ``+inf`` exclusive, i.e. nothing
    is called positive; each later point calls positive every trial whose
    statistic is at least the listed threshold.
    """
    s = np.asarray(statistics, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("statistics and labels must be 1-D of equal length")
    if np.any(np.isnan(s)):
        raise ValueError("statistics contain NaN")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each group of equal statistics
    ends = np.r_[np.nonzero(s[1:] != s[:-1])[0], len(s) - 1]
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[ends]]
    return RocCurve(fpr, tpr, thresholds, _trap(fpr, tpr))


def operating_point(statistics, labels, threshold):
    """``(fpr, tpr)`` of the rule ``statistic > threshold``."""
    s = np.asarray(statistics, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if y.all() or not y.any():
        raise ValueError("need at least one positive and one negative label")
    hit = s > threshold
    return float(hit[~y].mean()), float(hit[y].mean())


def auc_pairwise(statistics, labels):
    """Mann-Whitney AUC: P(stat_pos > stat_neg) + 0.5 P(tie)."""
    s = np.asarray(statistics, dtype=float)
    y = np.asarray(labels, dtype=bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need at least one positive and one negative label")
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return float((gt + 0.5 * eq) / (len(pos) * len(neg)))
