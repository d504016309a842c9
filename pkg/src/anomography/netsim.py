"""Synthetic traffic networks, partial observation, and the Oracle estimator.

Rate and traffic matrices are plain numpy arrays: a rate matrix is a float
``(P, P)`` array with a structurally zero diagonal, a traffic sample is an
integer ``(T, P, P)`` array.

Randomness goes through :func:`numpy.random.default_rng` (PCG64).  Every
generator accepts a *seed-like* value: an int, a tuple of ints, a
``SeedSequence`` or a ``Generator``.  The trial harness derives independent
streams as ``(master_seed, trial_index, stream_id)`` so results do not depend
on how trials are scheduled across workers.
"""

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "RATE_INCREASE",
    "HIDDEN_NODE",
    "ScenarioSpec",
    "FlowMap",
    "ObservationSet",
    "Trial",
    "make_rng",
    "check_rate_matrix",
    "offdiag_pairs",
    "gen_baseline",
    "apply_rate_anomalies",
    "apply_hidden_node",
    "gen_flowmap",
    "sample_traffic",
    "observe",
    "oracle_mle",
    "simulate_trial",
]

RATE_INCREASE = "rate-increase"
HIDDEN_NODE = "hidden-node"
SCENARIO_KINDS = (RATE_INCREASE, HIDDEN_NODE)

# stream ids for seed derivation
STREAM_BASELINE = 0
STREAM_ANOMALY = 1
STREAM_FLOWMAP = 2
STREAM_TRAFFIC = 3
STREAM_OBSERVE = 4
STREAM_LABEL = 5
STREAM_HIDDEN = 6
STREAM_INIT = 7


def make_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, tuple):
        seed = list(seed)
    return np.random.default_rng(seed)


def offdiag_pairs(P):
    """All ``(i, j)`` with ``i != j``, in row-major order."""
    return [(i, j) for i in range(P) for j in range(P) if i != j]


def check_rate_matrix(lam, name="rates"):
    """Validate and return ``lam`` as a float array with a zero diagonal."""
    arr = np.asarray(lam, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    if np.any(arr < 0):
        raise ValueError(f"{name} must be nonnegative")
    if np.any(np.diag(arr) != 0):
        raise ValueError(f"{name} must have a zero diagonal")
    return arr


@dataclass(frozen=True)
class ScenarioSpec:
    """Parameters of one simulated network family.

    Defaults reproduce the 10-node / 2-interior-node study: baseline edges with
    probability 0.65 and Gamma(1.75, 1) rates, anomalies with probability 0.2
    and Gamma(0.75, 1) increments, 7 edges per interior node.
    """

    P: int = 10
    interior_count: int = 2
    edges_per_interior: int = 7
    edge_prob: float = 0.65
    baseline_shape: float = 1.75
    baseline_rate: float = 1.0
    anomaly_prob: float = 0.2
    anomaly_shape: float = 0.75
    anomaly_rate: float = 1.0
    kind: str = RATE_INCREASE
    seed: int = 0

    def __post_init__(self):
        if self.P < 2:
            raise ValueError("P must be at least 2")
        if self.interior_count < 0:
            raise ValueError("interior_count must be >= 0")
        for name in ("edge_prob", "anomaly_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("baseline_shape", "baseline_rate", "anomaly_shape", "anomaly_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"kind must be one of {SCENARIO_KINDS}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in known:
                raise ValueError(f"unknown scenario key {key!r}")
            kwargs[key] = _coerce(known[key].type, value)
        return cls(**kwargs)

    def to_keyvalue(self):
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_keyvalue(cls, text):
        data = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            data[key] = value
        return cls.from_dict(data)

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


def _coerce(tp, value):
    if tp in (int, "int"):
        return int(value)
    if tp in (float, "float"):
        return float(value)
    return str(value)


@dataclass(frozen=True)
class FlowMap:
    """Directed edge sets aggregated by each interior node."""

    edge_sets: tuple

    def __post_init__(self):
        sets = tuple(tuple((int(i), int(j)) for i, j in s) for s in self.edge_sets)
        for s in sets:
            if not s:
                raise ValueError("flow edge sets must be nonempty")
            if any(i == j for i, j in s):
                raise ValueError("flow edge sets cannot contain diagonal pairs")
        object.__setattr__(self, "edge_sets", sets)

    @property
    def H(self):
        return len(self.edge_sets)

    def masks(self, P):
        """Boolean ``(H, P, P)`` array, ``True`` where edge (i, j) is in set h."""
        out = np.zeros((self.H, P, P), dtype=bool)
        for h, s in enumerate(self.edge_sets):
            idx = np.asarray(s, dtype=int)
            out[h, idx[:, 0], idx[:, 1]] = True
        return out

    def restrict(self, P):
        """Keep pairs with both endpoints below ``P``; returns (flowmap, kept set indices)."""
        sets, kept = [], []
        for h, s in enumerate(self.edge_sets):
            r = tuple((i, j) for i, j in s if i < P and j < P)
            if r:
                sets.append(r)
                kept.append(h)
        return FlowMap(tuple(sets)), kept

    def to_json(self):
        return [[list(e) for e in s] for s in self.edge_sets]

    @classmethod
    def from_json(cls, data):
        return cls(tuple(tuple(tuple(e) for e in s) for s in data))


@dataclass
class ObservationSet:
    """Per-window aggregates available to the estimators.

    ``row_sums`` and ``col_sums`` are ``(T, P)``, ``flows`` is ``(T, H)``,
    ``observed_counts`` is ``(T, len(observed_edges))``.  ``flowmap`` is the
    estimator-side flow map that ``flows`` refer to.
    """

    row_sums: np.ndarray
    col_sums: np.ndarray
    flows: np.ndarray
    flowmap: FlowMap
    observed_edges: tuple = ()
    observed_counts: Optional[np.ndarray] = None

    def __post_init__(self):
        self.row_sums = np.asarray(self.row_sums, dtype=np.int64)
        self.col_sums = np.asarray(self.col_sums, dtype=np.int64)
        T, P = self.row_sums.shape
        self.flows = np.asarray(self.flows, dtype=np.int64).reshape(T, self.flowmap.H)
        self.observed_edges = tuple((int(i), int(j)) for i, j in self.observed_edges)
        if self.observed_counts is None:
            self.observed_counts = np.zeros((T, 0), dtype=np.int64)
        self.observed_counts = np.asarray(self.observed_counts, dtype=np.int64).reshape(
            T, len(self.observed_edges)
        )
        if self.col_sums.shape != (T, P):
            raise ValueError("row and column sums must have the same shape")
        if self.flows.shape[1] != self.flowmap.H:
            raise ValueError("flows do not match the flow map")
        for arr in (self.row_sums, self.col_sums, self.flows, self.observed_counts):
            if np.any(arr < 0):
                raise ValueError("observations must be nonnegative")
        if any(i == j or i >= P or j >= P for i, j in self.observed_edges):
            raise ValueError("observed edges must be off-diagonal pairs of known nodes")

    @property
    def T(self):
        return self.row_sums.shape[0]

    @property
    def P(self):
        return self.row_sums.shape[1]

    @property
    def H(self):
        return self.flowmap.H

    def observed_mask(self):
        m = np.zeros((self.P, self.P), dtype=bool)
        if self.observed_edges:
            idx = np.asarray(self.observed_edges)
            m[idx[:, 0], idx[:, 1]] = True
        return m

    def observed_matrix(self):
        """``(T, P, P)`` array of observed counts, zero where unobserved."""
        out = np.zeros((self.T, self.P, self.P), dtype=np.int64)
        if self.observed_edges:
            idx = np.asarray(self.observed_edges)
            out[:, idx[:, 0], idx[:, 1]] = self.observed_counts
        return out


@dataclass
class Trial:
    """One simulated network: truth, baseline, traffic and observation structure."""

    index: int
    anomalous: bool
    truth: np.ndarray
    baseline: np.ndarray
    traffic: np.ndarray
    flowmap: FlowMap
    known: int = field(default=0)

    def __post_init__(self):
        if not self.known:
            self.known = self.baseline.shape[0]

    def observe(self, fraction, seed):
        return observe(self.traffic, self.flowmap, fraction, seed, known=self.known)

    @property
    def truth_known(self):
        """Truth restricted to the known-node block (the estimation target)."""
        return self.truth[: self.known, : self.known]


def _offdiag_mask(P):
    return ~np.eye(P, dtype=bool)


def gen_baseline(spec):
    """Baseline rate matrix: Bernoulli(edge_prob) support, Gamma rates on it."""
    rng = make_rng((spec.seed, STREAM_BASELINE))
    P = spec.P
    support = (rng.random((P, P)) < spec.edge_prob) & _offdiag_mask(P)
    rates = rng.gamma(spec.baseline_shape, 1.0 / spec.baseline_rate, size=(P, P))
    return np.where(support, rates, 0.0)


def apply_rate_anomalies(lam0, spec):
    """Add Gamma(anomaly_shape, anomaly_rate) increments with probability anomaly_prob."""
    lam0 = check_rate_matrix(lam0, "lam0")
    rng = make_rng((spec.seed, STREAM_ANOMALY))
    P = lam0.shape[0]
    hit = (rng.random((P, P)) < spec.anomaly_prob) & _offdiag_mask(P)
    delta = rng.gamma(spec.anomaly_shape, 1.0 / spec.anomaly_rate, size=(P, P))
    return lam0 + np.where(hit, delta, 0.0)


def apply_hidden_node(spec):
    """Truth with one extra (hidden) node; returns ``(truth, baseline)``.

    The known block is drawn exactly as :func:`gen_baseline` would draw it;
    edges to and from the hidden node exist with probability ``anomaly_prob``
    and carry baseline-distributed rates.
    """
    baseline = gen_baseline(spec)
    rng = make_rng((spec.seed, STREAM_HIDDEN))
    P = spec.P
    truth = np.zeros((P + 1, P + 1))
    truth[:P, :P] = baseline
    out_edges = rng.random(P) < spec.anomaly_prob
    in_edges = rng.random(P) < spec.anomaly_prob
    shape, scale = spec.baseline_shape, 1.0 / spec.baseline_rate
    truth[P, :P] = np.where(out_edges, rng.gamma(shape, scale, size=P), 0.0)
    truth[:P, P] = np.where(in_edges, rng.gamma(shape, scale, size=P), 0.0)
    return truth, baseline


def gen_flowmap(P, H, edges_per_interior, seed):
    """``H`` independent uniform subsets of off-diagonal pairs of a fixed size."""
    n_pairs = P * (P - 1)
    if not 1 <= edges_per_interior <= n_pairs:
        raise ValueError(f"edges_per_interior must lie in [1, {n_pairs}]")
    rng = make_rng(seed)
    pairs = offdiag_pairs(P)
    sets = []
    for _ in range(H):
        pick = np.sort(rng.choice(n_pairs, size=edges_per_interior, replace=False))
        sets.append(tuple(pairs[k] for k in pick))
    return FlowMap(tuple(sets))


def sample_traffic(lam, T, seed):
    """``(T, P, P)`` independent Poisson draws with the given rates."""
    lam = check_rate_matrix(lam)
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = make_rng(seed)
    return rng.poisson(lam, size=(T,) + lam.shape).astype(np.int64)


def observe(traffic, flowmap, fraction, seed, known=None):
    """Reduce traffic to row/column sums, interior flows and a random edge subset.

    ``known`` limits R, C and the observable edges to the first ``known``
    nodes; row sums of known nodes still include traffic sent to unknown ones
    (and column sums traffic received from them).  Flow sets are evaluated on
    the full traffic, then restricted to known pairs for the estimator.
    """
    traffic = np.asarray(traffic)
    if traffic.ndim == 2:
        traffic = traffic[None]
    T, N, _ = traffic.shape
    P = N if known is None else int(known)
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rows = traffic[:, :P, :].sum(axis=2)
    cols = traffic[:, :, :P].sum(axis=1)
    masks = flowmap.masks(N)
    flows = np.einsum("tij,hij->th", traffic, masks.astype(np.int64))
    est_map, kept = flowmap.restrict(P)
    flows = flows[:, kept]
    rng = make_rng(seed)
    pairs = offdiag_pairs(P)
    n_obs = int(round(fraction * len(pairs)))
    pick = np.sort(rng.choice(len(pairs), size=n_obs, replace=False)) if n_obs else []
    observed = tuple(pairs[k] for k in pick)
    if observed:
        idx = np.asarray(observed)
        counts = traffic[:, idx[:, 0], idx[:, 1]]
    else:
        counts = np.zeros((T, 0), dtype=np.int64)
    return ObservationSet(rows, cols, flows, est_map, observed, counts)


def oracle_mle(traffic, known=None):
    """Entrywise sample mean of fully observed traffic."""
    traffic = np.asarray(traffic, dtype=float)
    if traffic.ndim == 2:
        traffic = traffic[None]
    if traffic.shape[0] < 1:
        raise ValueError("need at least one window")
    P = traffic.shape[1] if known is None else int(known)
    return traffic[:, :P, :P].mean(axis=0)


def simulate_trial(spec, index, T, anomaly_coin=0.5, anomalous=None):
    """Generate trial ``index`` of a scenario family.

    The anomaly coin is a Bernoulli(``anomaly_coin``) draw unless
    ``anomalous`` forces it; the stored label is true only if the truth
    actually differs from the baseline.  All streams derive from ``(spec.seed, index)``.
    """
    tspec = spec.with_seed(_trial_seed(spec.seed, index))
    if anomalous is None:
        anomalous = bool(make_rng((tspec.seed, STREAM_LABEL)).random() < anomaly_coin)
    if spec.kind == HIDDEN_NODE:
        truth, baseline = apply_hidden_node(tspec)
        if not anomalous:
            truth = np.zeros_like(truth)
            truth[: spec.P, : spec.P] = baseline
        n_nodes = spec.P + 1
    else:
        baseline = gen_baseline(tspec)
        truth = apply_rate_anomalies(baseline, tspec) if anomalous else baseline.copy()
        n_nodes = spec.P
    flowmap = gen_flowmap(
        n_nodes, spec.interior_count, spec.edges_per_interior, (tspec.seed, STREAM_FLOWMAP)
    ) if spec.interior_count else FlowMap(())
    traffic = sample_traffic(truth, T, (tspec.seed, STREAM_TRAFFIC))
    # a coin that produced no actual change is a negative
    padded = np.zeros_like(truth)
    padded[: spec.P, : spec.P] = baseline
    anomalous = bool(anomalous and not np.array_equal(truth, padded))
    return Trial(index, anomalous, truth, baseline, traffic, flowmap, known=spec.P)


def _trial_seed(master, index):
    # 63-bit child seed from (master, index); stable across platforms
    a, b = np.random.SeedSequence([int(master), int(index)]).generate_state(2)
    return (int(a) << 31) ^ int(b)
