"""EM estimators of the source-destination rate matrix.

Three variants share one E-step:

``MLEM``
    Poisson maximum likelihood.
``MAP``
    Gamma(eps * lam0 + 1, eps) prior with fixed ``eps``.
``HIER``
    Empirical Bayes: ``eps`` re-estimated per edge every iteration by
    maximizing the negative binomial marginal of the replica means.

Row sums, column sums and each interior flow condition their own replica of
the traffic (the "decoupled windows" construction), so every replica's
conditional is an independent multinomial.  With ``H`` interior nodes there
are ``2 + H`` replicas per window; ``strict_three=True`` collapses the flow
replicas into one, giving the literal ``3T`` denominators.

Conditional means are stored in factored form (per-replica shares times
per-window residual totals); the dense ``(T, P, P)`` replicas are built on
request only.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import xlogy

from . import kernels
from .errors import InconsistentObservationError, NumericalError
from .netsim import check_rate_matrix, make_rng

__all__ = [
    "MLEM",
    "MAP",
    "HIER",
    "VARIANTS",
    "EmConfig",
    "ObservationStats",
    "ExpectedCounts",
    "ModelFit",
    "e_step",
    "mle_m_step",
    "map_m_step",
    "epsilon_m_step",
    "epsilon_objective",
    "observed_log_likelihood",
    "random_init",
    "run_em",
]

MLEM = "MLEM"
MAP = "MAP"
HIER = "HIER"
VARIANTS = (MLEM, MAP, HIER)

FLAG_INTERIOR = 0
FLAG_AT_MIN = 1
FLAG_AT_MAX = 2


@dataclass
class EmConfig:
    tol: float = 1e-6
    max_iter: int = 500
    eps_min: float = 1e-9
    eps_max: float = 1e9
    map_eps: float = 1.0
    strict_three: bool = False
    zero_tol: float = 1e-10
    collapse_level: float = 1e-3
    check_ascent: bool = True
    ascent_slack: float = 1e-8
    warm_eps: bool = True
    init_seed: int = 0

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class ObservationStats:
    """Per-dataset quantities reused by every E-step."""

    def __init__(self, obs, flowmap=None, strict_three=False):
        flowmap = obs.flowmap if flowmap is None else flowmap
        if flowmap.H != obs.flows.shape[1]:
            raise ValueError("flow map does not match the observed flows")
        P, T, H = obs.P, obs.T, flowmap.H
        self.P, self.T, self.H = P, T, H
        self.strict_three = bool(strict_three)
        self.n_replicas = 3 if strict_three else 2 + H
        self.K = self.n_replicas * T

        self.offdiag = ~np.eye(P, dtype=bool)
        self.pinned = obs.observed_mask()
        self.free = self.offdiag & ~self.pinned
        pin_t = obs.observed_matrix().astype(float)
        self.pin_t = pin_t
        self.pin_sum = pin_t.sum(axis=0)
        masks = flowmap.masks(P)
        self.fmask = masks & self.free
        self.rres = obs.row_sums - pin_t.sum(axis=2)
        self.cres = obs.col_sums - pin_t.sum(axis=1)
        self.fres = obs.flows - np.einsum("tij,hij->th", pin_t, masks.astype(float))
        for name, arr in (("row", self.rres), ("column", self.cres), ("flow", self.fres)):
            if np.any(arr < 0):
                raise InconsistentObservationError(
                    f"observed edges exceed a {name} total in some window"
                )
        self.sum_r = self.rres.sum(axis=0)
        self.sum_c = self.cres.sum(axis=0)
        self.sum_f = self.fres.sum(axis=0)
        # edges outside flow h's set see an unconditional replica of themselves
        self.uncovered_count = (self.free[None] & ~self.fmask).sum(axis=0) if H else np.zeros((P, P), int)
        cover = self.fmask.sum(axis=0)
        self.cover = cover
        self.edge_flat = np.flatnonzero(self.offdiag.ravel())
        self._build_slots(obs)

    def _build_slots(self, obs):
        """Distinct replica values per edge as (kind, base, weight) slots.

        A slot's conditional mean is ``base * multiplier[kind]`` where the
        multipliers are row share, column share, flow share h, the rate itself
        (unconditional replica) or 1 (pinned edge).
        """
        P, T, H = self.P, self.T, self.H
        uniq = lambda col: np.unique(col, return_counts=True)  # noqa: E731
        urow = [uniq(self.rres[:, i]) for i in range(P)]
        ucol = [uniq(self.cres[:, j]) for j in range(P)]
        uflow = [uniq(self.fres[:, h]) for h in range(H)]
        k_rate = 2 + H
        k_one = 3 + H
        obs_index = {e: n for n, e in enumerate(obs.observed_edges)}
        edge, kind, base, weight = [], [], [], []

        def add(e, k, vals, cnts):
            keep = vals > 0
            n = int(keep.sum())
            edge.extend([e] * n)
            kind.extend([k] * n)
            base.extend(vals[keep].tolist())
            weight.extend(cnts[keep].tolist())

        self.dense_strict = self.strict_three and H > 0
        for e, flat in enumerate(self.edge_flat):
            i, j = divmod(int(flat), P)
            if self.pinned[i, j]:
                v, c = uniq(obs.observed_counts[:, obs_index[(i, j)]].astype(float))
                add(e, k_one, v, c * self.n_replicas)
                continue
            add(e, 0, urow[i][0].astype(float), urow[i][1])
            add(e, 1, ucol[j][0].astype(float), ucol[j][1])
            if self.dense_strict:
                continue  # flow part rebuilt per iteration
            for h in range(H):
                if self.fmask[h, i, j]:
                    add(e, 2 + h, uflow[h][0].astype(float), uflow[h][1])
                else:
                    add(e, k_rate, np.ones(1), np.array([T]))
            if self.strict_three and H == 0:
                add(e, k_rate, np.ones(1), np.array([T]))
        order = np.argsort(np.asarray(edge, dtype=np.int64), kind="stable")
        self.slot_edge = np.asarray(edge, dtype=np.int64)[order]
        self.slot_kind = np.asarray(kind, dtype=np.int64)[order]
        self.slot_base = np.asarray(base, dtype=float)[order]
        self.slot_weight = np.asarray(weight, dtype=float)[order]
        self.slot_flat = self.edge_flat[self.slot_edge]
        E = len(self.edge_flat)
        self.slot_offsets = np.searchsorted(self.slot_edge, np.arange(E + 1)).astype(np.int64)


@dataclass
class ExpectedCounts:
    """Conditional means of the replicated traffic at fixed rates.

    ``row_share[i, j]`` is the fraction of node i's residual egress attributed
    to edge (i, j); analogously ``col_share`` and ``flow_share[h]``.  Pinned
    (directly observed) edges carry their observed counts in every replica.
    """

    rates: np.ndarray
    row_share: np.ndarray
    col_share: np.ndarray
    flow_share: np.ndarray
    totals: np.ndarray
    stats: ObservationStats = field(repr=False)

    @property
    def T(self):
        return self.stats.T

    @property
    def n_replicas(self):
        return self.stats.n_replicas

    def row_replica(self):
        s = self.stats
        return self.row_share[None] * s.rres[:, :, None] + s.pin_t

    def col_replica(self):
        s = self.stats
        return self.col_share[None] * s.cres[:, None, :] + s.pin_t

    def flow_replica(self, h):
        s = self.stats
        if s.strict_three:
            if h != 0:
                raise IndexError("strict mode has a single flow replica")
            return self._strict_flow()
        cond = self.flow_share[h][None] * s.fres[:, h, None, None]
        uncond = (s.free & ~s.fmask[h]) * self.rates
        return cond + uncond[None] + s.pin_t

    def _strict_flow(self):
        s = self.stats
        out = np.broadcast_to((s.free & (s.cover == 0)) * self.rates, (s.T, s.P, s.P)).copy()
        if s.H:
            cond = np.einsum("hij,th->tij", self.flow_share, s.fres)
            with np.errstate(invalid="ignore", divide="ignore"):
                out += np.where(s.cover > 0, cond / np.maximum(s.cover, 1), 0.0)
        return out + s.pin_t

    def replicas(self):
        """All replicas as a list of dense ``(T, P, P)`` arrays."""
        n_flow = 1 if self.stats.strict_three else self.stats.H
        return [self.row_replica(), self.col_replica()] + [self.flow_replica(h) for h in range(n_flow)]

    def slot_values(self):
        """Replica mean of each ε-kernel slot (see ``ObservationStats._build_slots``)."""
        s = self.stats
        P = s.P
        mult = np.concatenate(
            [
                self.row_share.reshape(1, -1),
                self.col_share.reshape(1, -1),
                self.flow_share.reshape(s.H, P * P),
                self.rates.reshape(1, -1),
                np.ones((1, P * P)),
            ]
        )
        vals = s.slot_base * mult[s.slot_kind, s.slot_flat]
        if not s.dense_strict:
            return vals, s.slot_weight, s.slot_offsets
        return self._strict_slots(vals)

    def _strict_slots(self, base_vals):
        s = self.stats
        flow = self._strict_flow().reshape(s.T, -1)
        vals, wts, offs = [], [], [0]
        for e, flat in enumerate(s.edge_flat):
            a, b = s.slot_offsets[e], s.slot_offsets[e + 1]
            v, w = [base_vals[a:b]], [s.slot_weight[a:b]]
            if not s.pinned.flat[flat]:
                u, c = np.unique(flow[:, flat], return_counts=True)
                keep = u > 0
                v.append(u[keep])
                w.append(c[keep].astype(float))
            vals.append(np.concatenate(v))
            wts.append(np.concatenate(w))
            offs.append(offs[-1] + len(vals[-1]))
        return np.concatenate(vals), np.concatenate(wts), np.asarray(offs, dtype=np.int64)


def _share(num, denom, totals, what):
    """``num / denom`` broadcast, requiring denom > 0 wherever totals > 0."""
    bad = (denom <= 0) & (totals > 0)
    if np.any(bad):
        raise InconsistentObservationError(
            f"zero rate mass on a {what} with nonzero observed traffic"
        )
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), 0.0)
    return out


def e_step(rates, obs=None, flowmap=None, *, stats=None, strict_three=False):
    """Multinomial conditional means for every replica at rates ``rates``."""
    if stats is None:
        stats = ObservationStats(obs, flowmap, strict_three=strict_three)
    lam = check_rate_matrix(rates)
    if lam.shape != (stats.P, stats.P):
        raise ValueError("rate matrix does not match the observations")
    s = stats
    lf = np.where(s.free, lam, 0.0)
    row_tot = s.rres.sum(axis=0)
    col_tot = s.cres.sum(axis=0)
    row_share = _share(lf, lf.sum(axis=1, keepdims=True), row_tot[:, None] * s.free, "row")
    col_share = _share(lf, lf.sum(axis=0, keepdims=True), col_tot[None, :] * s.free, "column")
    flow_share = np.zeros((s.H, s.P, s.P))
    for h in range(s.H):
        lh = np.where(s.fmask[h], lam, 0.0)
        flow_share[h] = _share(lh, lh.sum(), s.sum_f[h] * s.fmask[h], "flow")
    totals = row_share * s.sum_r[:, None] + col_share * s.sum_c[None, :]
    if s.strict_three:
        if s.H:
            cond = np.einsum("hij,h->ij", flow_share, s.sum_f)
            totals += np.where(s.cover > 0, cond / np.maximum(s.cover, 1), 0.0)
        totals += (s.free & (s.cover == 0)) * lam * s.T
    else:
        totals += np.einsum("hij,h->ij", flow_share, s.sum_f)
        totals += s.uncovered_count * lam * s.T
    totals += s.n_replicas * s.pin_sum
    return ExpectedCounts(lam, row_share, col_share, flow_share, totals, s)


def _totals_and_K(counts, T, n_replicas):
    if isinstance(counts, ExpectedCounts):
        if T is not None and T != counts.T:
            raise ValueError("T does not match the expected counts")
        return counts.totals, counts.stats.K
    totals = np.asarray(counts, dtype=float)
    if T is None:
        raise ValueError("T is required with a raw totals array")
    return totals, (3 if n_replicas is None else n_replicas) * T


def mle_m_step(counts, T=None, *, n_replicas=None):
    """Poisson MLE ``N_total / (n_replicas * T)``.

    ``counts`` is an :class:`ExpectedCounts` or a raw totals matrix (then
    ``n_replicas`` defaults to 3).
    """
    totals, K = _totals_and_K(counts, T, n_replicas)
    if np.any(totals < 0):
        raise ValueError("expected counts must be nonnegative")
    return totals / K


def map_m_step(counts, eps, lam0, T=None, *, n_replicas=None):
    """Gamma-prior posterior mode ``(eps lam0 + N_total) / (eps + n_replicas T)``."""
    totals, K = _totals_and_K(counts, T, n_replicas)
    eps = np.asarray(eps, dtype=float)
    if np.any(eps < 0):
        raise ValueError("eps must be >= 0")
    lam0 = np.asarray(lam0, dtype=float)
    out = (eps * lam0 + totals) / (eps + K)
    if out.ndim == 2:
        np.fill_diagonal(out, 0.0)
    return out


def _flat_lam0(stats, lam0):
    return np.asarray(lam0, dtype=float).ravel()[stats.edge_flat]


def epsilon_m_step(counts, lam0, T=None, *, cfg=None, eps_init=None):
    """Per-edge empirical Bayes hyperparameters.

    Returns ``(eps, flags)`` as ``(P, P)`` arrays; ``flags`` is 1 where the
    maximizer sits at ``eps_min`` and 2 where it sits at ``eps_max``.  Pass
    ``eps_init`` to search only the local maximum reachable from it.
    """
    cfg = cfg or EmConfig()
    s = counts.stats
    if T is not None and T != s.T:
        raise ValueError("T does not match the expected counts")
    lam0 = check_rate_matrix(lam0, "lam0")
    vals, wts, offs = counts.slot_values()
    K = np.full(len(s.edge_flat), float(s.K))
    l0 = _flat_lam0(s, lam0)
    init = None if eps_init is None else np.asarray(eps_init, dtype=float).ravel()[s.edge_flat]
    eps_e, flag_e = kernels.eps_argmax(vals, wts, offs, K, l0, cfg.eps_min, cfg.eps_max, eps_init=init)
    if not np.all(np.isfinite(eps_e)):
        raise NumericalError("non-finite hyperparameter estimate")
    # boundary estimates are reported as the exact bounds
    eps_e = np.where(flag_e == FLAG_AT_MAX, cfg.eps_max, np.where(flag_e == FLAG_AT_MIN, cfg.eps_min, eps_e))
    f = kernels.eps_objective(vals, wts, offs, K, l0, eps_e)
    if not np.all(np.isfinite(f)):
        raise NumericalError("non-finite hyperparameter objective (corrupt expected counts?)")
    eps = np.zeros((s.P, s.P))
    flags = np.zeros((s.P, s.P), dtype=np.int8)
    eps.ravel()[s.edge_flat] = eps_e
    flags.ravel()[s.edge_flat] = flag_e
    return eps, flags


def epsilon_objective(counts, lam0, eps):
    """Hyperparameter objective per edge at ``eps`` (scalar or ``(P, P)``), as a ``(P, P)`` array."""
    s = counts.stats
    vals, wts, offs = counts.slot_values()
    K = np.full(len(s.edge_flat), float(s.K))
    l0 = _flat_lam0(s, lam0)
    e = np.broadcast_to(np.asarray(eps, dtype=float), (s.P, s.P)).ravel()[s.edge_flat]
    out = np.full((s.P, s.P), np.nan)
    out.ravel()[s.edge_flat] = kernels.eps_objective(vals, wts, offs, K, l0, e)
    return out


def _poisson_ll(counts, mean):
    # sum of count log(mean) - mean, with 0 log 0 = 0
    return float(np.sum(xlogy(counts, mean) - mean))


def observed_log_likelihood(rates, stats):
    """Decoupled observed-data log likelihood maximized by the MLEM iteration.

    Each replica contributes the Poisson likelihood of its own aggregate
    (residual row totals, column totals, flows) plus the pinned edges.
    """
    s = stats
    lf = np.where(s.free, rates, 0.0)
    ll = _poisson_ll(s.rres, lf.sum(axis=1)[None, :])
    ll += _poisson_ll(s.cres, lf.sum(axis=0)[None, :])
    for h in range(s.H):
        ll += _poisson_ll(s.fres[:, h], np.where(s.fmask[h], rates, 0.0).sum())
    if s.pinned.any():
        ll += s.n_replicas * _poisson_ll(s.pin_t[:, s.pinned], rates[s.pinned][None, :])
    return ll


def _log_prior(rates, eps, lam0, offdiag):
    eps = np.broadcast_to(eps, rates.shape)
    return float(np.sum(np.where(offdiag, xlogy(eps * lam0, rates) - eps * rates, 0.0)))


@dataclass
class ModelFit:
    """Result of :func:`run_em`.

    ``final_counts`` are the expected counts whose surrogate ``lambda_hat``
    maximizes (the last E-step); ``eps_hat`` is the fixed prior weight for
    MAP, the estimated matrix for HIER and ``None`` for MLEM.
    """

    variant: str
    lambda_hat: np.ndarray
    eps_hat: Optional[np.ndarray]
    final_counts: ExpectedCounts = field(repr=False)
    iterations: int
    converged: bool
    init_kind: str
    lam0: Optional[np.ndarray] = field(default=None, repr=False)
    eps_flags: Optional[np.ndarray] = field(default=None, repr=False)
    delta_trace: list = field(default_factory=list, repr=False)
    objective_trace: list = field(default_factory=list, repr=False)
    init_rates: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def P(self):
        return self.lambda_hat.shape[0]

    def summary(self):
        out = {
            "variant": self.variant,
            "iterations": self.iterations,
            "converged": self.converged,
            "init": self.init_kind,
        }
        if self.eps_hat is not None:
            e = np.asarray(self.eps_hat, dtype=float)
            off = ~np.eye(self.P, dtype=bool)
            vals = np.broadcast_to(e, (self.P, self.P))[off]
            out["eps_median"] = float(np.median(vals))
            out["eps_min"] = float(vals.min())
            out["eps_max"] = float(vals.max())
        if self.eps_flags is not None:
            out["eps_at_max"] = int((self.eps_flags == FLAG_AT_MAX).sum())
            out["eps_at_min"] = int((self.eps_flags == FLAG_AT_MIN).sum())
        return out


def _collapsing(old, new, level):
    """True while some small rate is still shrinking geometrically toward zero.

    Such rates barely move the Frobenius norm but have not reached their
    limit (exactly zero) yet.
    """
    if level <= 0:
        return False
    small = (new > 0) & (new < level * max(float(new.mean()), 1e-300))
    return bool(np.any(small & (new < 0.5 * old)))


def _check_ascent(objs, val, it, slack):
    prev = objs[-1]
    if val < prev - slack * max(1.0, abs(prev)):
        raise NumericalError(f"EM objective decreased at iteration {it}: {prev:.12g} -> {val:.12g}")
    objs.append(val)


def random_init(obs, seed):
    """Entrywise Uniform(0, 2 mean(R_bar) / P) on the off-diagonal."""
    P = obs.P
    hi = 2.0 * obs.row_sums.mean(axis=0).mean() / P
    rng = make_rng(seed)
    lam = rng.uniform(0.0, hi, size=(P, P)) if hi > 0 else np.zeros((P, P))
    np.fill_diagonal(lam, 0.0)
    return lam


def _initial_rates(init, obs, lam0, flowmap, cfg):
    if isinstance(init, np.ndarray):
        return check_rate_matrix(init, "init").copy(), "custom"
    if init in (None, "mre"):
        from .mre import build_constraints, solve_mre

        sol = solve_mre(build_constraints(obs, flowmap), lam0)
        return sol.rates.copy(), "mre"
    if init == "random":
        return random_init(obs, cfg.init_seed), "random"
    if init == "baseline":
        return np.array(lam0, dtype=float), "baseline"
    raise ValueError(f"unknown init {init!r}")


def run_em(obs, lam0, flowmap=None, variant=HIER, init=None, cfg=None):
    """Iterate E-step and the variant's M-step until the rates settle.

    ``init`` is a rate matrix or one of ``"mre"`` (default), ``"random"``,
    ``"baseline"``.  Stops when the relative Frobenius change drops below
    ``cfg.tol`` (and no rate below ``cfg.collapse_level`` times the mean
    rate more than halved in the last step) or after ``cfg.max_iter``
    iterations.  Between iterations,
    rates below ``cfg.zero_tol`` are set to exactly zero so edges can switch
    off; the returned rates come from one final unthresholded M-step, so they
    maximize the surrogate built from ``final_counts``.
    """
    cfg = cfg or EmConfig()
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    lam0 = check_rate_matrix(lam0, "lam0")
    stats = ObservationStats(obs, flowmap, strict_three=cfg.strict_three)
    if lam0.shape != (stats.P, stats.P):
        raise ValueError("baseline does not match the observations")
    lam, init_kind = _initial_rates(init, obs, lam0, flowmap, cfg)
    init_rates = lam.copy()
    check_ascent = cfg.check_ascent and variant != HIER and not cfg.strict_three
    eps = None
    flags = None
    if variant == MAP:
        eps = np.broadcast_to(np.asarray(cfg.map_eps, dtype=float), lam.shape).copy()
        np.fill_diagonal(eps, 0.0)

    def m_step(counts, eps_prev):
        nonlocal flags
        if variant == MLEM:
            return mle_m_step(counts), None
        if variant == MAP:
            return map_m_step(counts, eps, lam0), eps
        warm = eps_prev if (cfg.warm_eps and eps_prev is not None) else None
        e, flags = epsilon_m_step(counts, lam0, cfg=cfg, eps_init=warm)
        return map_m_step(counts, e, lam0), e

    def objective(rates, e):
        ll = observed_log_likelihood(rates, stats)
        if variant == MAP:
            ll += _log_prior(rates, e, lam0, stats.offdiag)
        return ll

    deltas, objs = [], []
    if check_ascent:
        objs.append(objective(lam, eps))
    converged = False
    it = 0
    while it < cfg.max_iter:
        it += 1
        counts = e_step(lam, stats=stats)
        new, eps = m_step(counts, eps)
        delta = np.linalg.norm(new - lam) / max(np.linalg.norm(lam), 1e-300)
        deltas.append(float(delta))
        new = np.where(new < cfg.zero_tol, 0.0, new)
        if check_ascent:
            _check_ascent(objs, objective(new, eps), it, cfg.ascent_slack)
        collapsing = _collapsing(lam, new, cfg.collapse_level)
        lam = new
        if delta < cfg.tol and not collapsing:
            converged = True
            break
    # one more step without thresholding: lambda_hat is then the exact
    # maximizer of the surrogate built from final_counts
    counts = e_step(lam, stats=stats)
    lam, eps = m_step(counts, eps)
    if check_ascent:
        _check_ascent(objs, objective(lam, eps), it + 1, cfg.ascent_slack)
    return ModelFit(
        variant=variant,
        lambda_hat=lam,
        eps_hat=eps,
        final_counts=counts,
        iterations=it,
        converged=converged,
        init_kind=init_kind,
        lam0=lam0,
        eps_flags=flags,
        delta_trace=deltas,
        objective_trace=objs,
        init_rates=init_rates,
    )
