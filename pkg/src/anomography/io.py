"""CSV/JSON artifacts and edge-list ingestion.

Formats (all with a header line):

rates            ``src,dst,rate`` (every off-diagonal entry)
observations     ``t,kind,a,b,count`` with kind in row/col/flow/edge
edge records     ``t,src,dst,count``
baseline         ``src,dst,rate`` (node ids; missing pairs are zero)
observed edges   ``src,dst``
flow map         JSON list of edge sets, each a list of ``[src, dst]``

Floats are written with ``repr`` so re-reading reproduces them exactly.
"""

import csv
import io as _io
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import IngestError
from .netsim import FlowMap, ObservationSet, make_rng

__all__ = [
    "write_rates",
    "read_rates",
    "rates_to_csv",
    "rates_from_csv",
    "observations_to_csv",
    "observations_from_csv",
    "write_json",
    "read_json",
    "EdgeRecord",
    "IngestResult",
    "read_edge_records",
    "ingest",
    "node_flowmap",
]


def _open_write(path):
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    return open(path, "w", newline="", encoding="utf-8")


def write_json(path, obj):
    with _open_write(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def rates_to_csv(lam):
    lam = np.asarray(lam, dtype=float)
    buf = _io.StringIO()
    buf.write("src,dst,rate\n")
    P = lam.shape[0]
    for i in range(P):
        for j in range(P):
            if i != j:
                buf.write(f"{i},{j},{float(lam[i, j])!r}\n")
    return buf.getvalue()


def rates_from_csv(text, P=None):
    rows = list(csv.reader(_io.StringIO(text)))
    if not rows or rows[0] != ["src", "dst", "rate"]:
        raise ValueError("expected header src,dst,rate")
    entries = [(int(a), int(b), float(c)) for a, b, c in rows[1:]]
    n = P if P is not None else 1 + max((max(a, b) for a, b, _ in entries), default=0)
    lam = np.zeros((n, n))
    for a, b, c in entries:
        lam[a, b] = c
    return lam


def write_rates(path, lam):
    with _open_write(path) as fh:
        fh.write(rates_to_csv(lam))


def read_rates(path, P=None):
    with open(path, encoding="utf-8") as fh:
        return rates_from_csv(fh.read(), P)


def observations_to_csv(obs):
    """Long-format CSV of every aggregate and observed edge count."""
    buf = _io.StringIO()
    buf.write("t,kind,a,b,count\n")
    for t in range(obs.T):
        for i in range(obs.P):
            buf.write(f"{t},row,{i},-1,{int(obs.row_sums[t, i])}\n")
        for j in range(obs.P):
            buf.write(f"{t},col,{j},-1,{int(obs.col_sums[t, j])}\n")
        for h in range(obs.H):
            buf.write(f"{t},flow,{h},-1,{int(obs.flows[t, h])}\n")
        for k, (i, j) in enumerate(obs.observed_edges):
            buf.write(f"{t},edge,{i},{j},{int(obs.observed_counts[t, k])}\n")
    return buf.getvalue()


def observations_from_csv(text, flowmap, P, T=None):
    rows = list(csv.reader(_io.StringIO(text)))
    if not rows or rows[0] != ["t", "kind", "a", "b", "count"]:
        raise ValueError("expected header t,kind,a,b,count")
    recs = [(int(t), k, int(a), int(b), int(c)) for t, k, a, b, c in rows[1:]]
    if T is None:
        T = 1 + max((r[0] for r in recs), default=-1)
    R = np.zeros((T, P), dtype=np.int64)
    C = np.zeros((T, P), dtype=np.int64)
    F = np.zeros((T, flowmap.H), dtype=np.int64)
    edges = []
    index = {}
    for t, k, a, b, c in recs:
        if k == "edge" and (a, b) not in index:
            index[(a, b)] = len(edges)
            edges.append((a, b))
    N = np.zeros((T, len(edges)), dtype=np.int64)
    for t, k, a, b, c in recs:
        if k == "row":
            R[t, a] = c
        elif k == "col":
            C[t, a] = c
        elif k == "flow":
            F[t, a] = c
        elif k == "edge":
            N[t, index[(a, b)]] = c
        else:
            raise ValueError(f"unknown observation kind {k!r}")
    return ObservationSet(R, C, F, flowmap, tuple(edges), N)


@dataclass(frozen=True)
class EdgeRecord:
    window: int
    src: int
    dst: int
    count: int


@dataclass
class IngestResult:
    obs: ObservationSet
    baseline: np.ndarray
    nodes: list
    skipped: list = field(default_factory=list)
    window_starts: list = field(default_factory=list)


def _parse_time(raw):
    raw = raw.strip()
    try:
        return float(int(raw))
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    ts = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.timestamp()


def _sort_ids(ids):
    ids = list(ids)
    if all(_is_int(x) for x in ids):
        return sorted(ids, key=int)
    return sorted(ids)


def _is_int(s):
    try:
        int(s)
    except ValueError:
        return False
    return True


def _read_csv_rows(path, header):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise IngestError("empty file", path=path, line=1) from None
        if [h.strip() for h in first] != header:
            raise IngestError(f"expected header {','.join(header)}", path=path, line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            yield lineno, [c.strip() for c in row]


def read_edge_records(path, strict=True, known_nodes=None):
    """Raw ``(line, t, src, dst, count)`` tuples from an edge CSV.

    Malformed rows raise :class:`IngestError` in strict mode and are returned
    in the skipped list otherwise.
    """
    good, skipped = [], []
    for lineno, row in _read_csv_rows(path, ["t", "src", "dst", "count"]):
        try:
            if len(row) != 4:
                raise ValueError("expected 4 fields")
            t = _parse_time(row[0])
            src, dst = row[1], row[2]
            count = int(row[3])
            if count < 0:
                raise ValueError("negative count")
            if src == dst:
                raise ValueError("self loop")
            if known_nodes is not None:
                for n in (src, dst):
                    if n not in known_nodes:
                        raise ValueError(f"unknown node id {n!r}")
        except ValueError as exc:
            if strict:
                raise IngestError(str(exc), path=path, line=lineno) from None
            skipped.append((lineno, str(exc)))
            continue
        good.append((lineno, t, src, dst, count))
    return good, skipped


def _read_baseline(path, strict):
    out = {}
    for lineno, row in _read_csv_rows(path, ["src", "dst", "rate"]):
        try:
            if len(row) != 3:
                raise ValueError("expected 3 fields")
            rate = float(row[2])
            if rate < 0 or not math.isfinite(rate):
                raise ValueError("rate must be finite and >= 0")
            if row[0] == row[1]:
                raise ValueError("self loop")
        except ValueError as exc:
            if strict:
                raise IngestError(str(exc), path=path, line=lineno) from None
            continue
        out[(row[0], row[1])] = rate
    return out


def ingest(edge_csv, window_length=1.0, *, baseline_csv=None, flowmap_file=None,
           observed_file=None, baseline_windows=None, strict=True, origin=None):
    """Aggregate an edge list into an :class:`ObservationSet` and baseline.

    Records fall into fixed-width windows ``floor((t - origin) / window_length)``
    (``origin`` defaults to the earliest time).  With ``baseline_csv`` the
    node universe is the baseline's; otherwise it is every id seen.  Without
    a baseline file the baseline is the per-window mean traffic over
    ``baseline_windows = (start, stop)`` (required in that case).
    """
    if window_length <= 0:
        raise ValueError("window_length must be > 0")
    base_rates = _read_baseline(baseline_csv, strict) if baseline_csv else None
    known = None
    if base_rates is not None:
        known = {n for pair in base_rates for n in pair}
    recs, skipped = read_edge_records(edge_csv, strict=strict, known_nodes=known)
    if not recs:
        raise IngestError("no usable records", path=edge_csv, line=None)
    ids = known if known is not None else {n for r in recs for n in r[2:4]}
    nodes = _sort_ids(ids)
    index = {n: k for k, n in enumerate(nodes)}
    P = len(nodes)
    t0 = min(r[1] for r in recs) if origin is None else float(origin)
    win = [int(math.floor((r[1] - t0) / window_length)) for r in recs]
    if min(win) < 0:
        raise IngestError("record before the window origin", path=edge_csv, line=None)
    T = max(win) + 1
    traffic = np.zeros((T, P, P), dtype=np.int64)
    for w, (_, _, s, d, c) in zip(win, recs):
        traffic[w, index[s], index[d]] += c

    fm = FlowMap(())
    if flowmap_file:
        raw = read_json(flowmap_file)
        sets = []
        for h, es in enumerate(raw):
            pairs = []
            for e in es:
                if len(e) != 2 or str(e[0]) not in index or str(e[1]) not in index:
                    raise IngestError(f"flow set {h}: unknown edge {e!r}", path=flowmap_file, line=None)
                pairs.append((index[str(e[0])], index[str(e[1])]))
            sets.append(tuple(pairs))
        fm = FlowMap(tuple(sets))
    observed = []
    if observed_file:
        for lineno, row in _read_csv_rows(observed_file, ["src", "dst"]):
            if len(row) != 2 or row[0] not in index or row[1] not in index or row[0] == row[1]:
                if strict:
                    raise IngestError(f"bad observed edge {row!r}", path=observed_file, line=lineno)
                continue
            observed.append((index[row[0]], index[row[1]]))
    observed = tuple(dict.fromkeys(observed))

    rows = traffic.sum(axis=2)
    cols = traffic.sum(axis=1)
    flows = np.einsum("tij,hij->th", traffic, fm.masks(P).astype(np.int64))
    if observed:
        idx = np.asarray(observed)
        counts = traffic[:, idx[:, 0], idx[:, 1]]
    else:
        counts = np.zeros((T, 0), dtype=np.int64)
    obs = ObservationSet(rows, cols, flows, fm, observed, counts)

    if base_rates is not None:
        baseline = np.zeros((P, P))
        for (s, d), r in base_rates.items():
            baseline[index[s], index[d]] = r
    else:
        if baseline_windows is None:
            raise ValueError("need baseline_csv or baseline_windows")
        a, b = baseline_windows
        if not 0 <= a < b <= T:
            raise ValueError(f"baseline windows must satisfy 0 <= start < stop <= {T}")
        baseline = traffic[a:b].mean(axis=0)
    np.fill_diagonal(baseline, 0.0)
    starts = [t0 + k * window_length for k in range(T)]
    return IngestResult(obs, baseline, nodes, skipped, starts)


def node_flowmap(P, H, coverage=0.7, seed=0):
    """Flow sets built from nodes: each interior node carries all edges leaving
    ``round(coverage * P)`` randomly chosen source nodes.

    A convenience for real-data configurations; pass an explicit flow map
    file when the routing is known.
    """
    if not 0 < coverage <= 1:
        raise ValueError("coverage must lie in (0, 1]")
    rng = make_rng(seed)
    k = max(1, int(round(coverage * P)))
    sets = []
    for _ in range(H):
        srcs = np.sort(rng.choice(P, size=k, replace=False))
        sets.append(tuple((int(i), j) for i in srcs for j in range(P) if j != i))
    return FlowMap(tuple(sets))
