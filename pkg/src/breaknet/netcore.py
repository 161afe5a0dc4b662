"""
Graph structures for collaboration data.

``CollabNetwork`` is an undirected weighted graph whose edge weights count
collaborations. ``DynamicNetwork`` is a contiguous run of unweighted yearly
snapshots plus the year each artist first became active.
"""

from collections import Counter, deque
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from .errors import ValidationError


def _pair(i, j):
    return (i, j) if i < j else (j, i)


class _Unreachable:
    """Marker for node pairs with no connecting path."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNREACHABLE"

    def __reduce__(self):
        return (_Unreachable, ())


UNREACHABLE = _Unreachable()


class CollabNetwork:
    """Immutable undirected weighted collaboration graph."""

    __slots__ = ("_nodes", "_weights", "_adj")

    def __init__(self, nodes, weights):
        nodes = frozenset(int(v) for v in nodes)
        clean = {}
        for (i, j), w in weights.items():
            if i == j:
                raise ValidationError(f"self-loop on node {i}")
            if w < 1 or int(w) != w:
                raise ValidationError(f"edge ({i}, {j}) has invalid weight {w}")
            if i not in nodes or j not in nodes:
                raise ValidationError(f"edge ({i}, {j}) references an undeclared node")
            key = _pair(int(i), int(j))
            clean[key] = clean.get(key, 0) + int(w)
        adj = {v: {} for v in nodes}
        for (i, j), w in clean.items():
            adj[i][j] = w
            adj[j][i] = w
        self._nodes = nodes
        self._weights = MappingProxyType(clean)
        self._adj = MappingProxyType({v: MappingProxyType(nb) for v, nb in adj.items()})

    @property
    def nodes(self):
        return self._nodes

    @property
    def edges(self):
        """Mapping of ``(i, j)`` with ``i < j`` to collaboration count."""
        return self._weights

    def weight(self, i, j):
        return self._weights.get(_pair(i, j), 0)

    def neighbors(self, v):
        return self._adj[v]

    def __len__(self):
        return len(self._nodes)

    def __repr__(self):
        return f"CollabNetwork(n={len(self._nodes)}, m={len(self._weights)})"

    def __reduce__(self):
        return (CollabNetwork, (self._nodes, dict(self._weights)))

    def subnetwork(self, keep):
        keep = frozenset(keep) & self._nodes
        return CollabNetwork(
            keep, {e: w for e, w in self._weights.items() if e[0] in keep and e[1] in keep}
        )

    def weight_matrix(self, order=None):
        """Dense symmetric weight matrix with rows in ``order`` (default sorted ids)."""
        order = sorted(self._nodes) if order is None else list(order)
        index = {v: k for k, v in enumerate(order)}
        W = np.zeros((len(order), len(order)))
        for (i, j), w in self._weights.items():
            if i in index and j in index:
                W[index[i], index[j]] = W[index[j], index[i]] = w
        return W


def build_collab_network(pairwise_collaborations, nodes=()):
    """
    Accumulate collaboration rows into a weighted network.

    Parameters
    ----------
    pairwise_collaborations : iterable of (int, int)
        One row per collaboration; repeated pairs, in either orientation,
        add to the weight.
    nodes : iterable of int, optional
        Declared node universe. Artists listed here but absent from every
        row become isolates.
    """
    counts = Counter()
    universe = set(int(v) for v in nodes)
    for row, (a, b) in enumerate(pairwise_collaborations):
        a, b = int(a), int(b)
        if a == b:
            raise ValidationError(f"row {row}: self-collaboration ({a}, {a})")
        counts[_pair(a, b)] += 1
        universe.update((a, b))
    return CollabNetwork(universe, dict(counts))


@dataclass(frozen=True)
class YearSnapshot:
    year: int
    edges: frozenset

    def __post_init__(self):
        norm = set()
        for i, j in self.edges:
            if i == j:
                raise ValidationError(f"self-loop on node {i} in year {self.year}")
            norm.add(_pair(int(i), int(j)))
        object.__setattr__(self, "edges", frozenset(norm))

    def has_edge(self, i, j):
        return _pair(i, j) in self.edges


@dataclass(frozen=True)
class ExclusionReport:
    out_of_range: tuple = ()
    non_contiguous: tuple = ()

    @property
    def total(self):
        return len(self.out_of_range) + len(self.non_contiguous)


@dataclass(frozen=True)
class DynamicNetwork:
    snapshots: tuple
    node_universe: frozenset
    entry_year: MappingProxyType
    excluded: ExclusionReport = field(default_factory=ExclusionReport)

    def __post_init__(self):
        years = [s.year for s in self.snapshots]
        if not years:
            raise ValidationError("dynamic network needs at least one snapshot")
        if any(b != a + 1 for a, b in zip(years, years[1:])):
            raise ValidationError(f"snapshot years not contiguous: {years}")
        for snap in self.snapshots:
            for i, j in snap.edges:
                for v in (i, j):
                    if v not in self.node_universe:
                        raise ValidationError(f"node {v} in year {snap.year} not in universe")
                    if self.entry_year.get(v, snap.year + 1) > snap.year:
                        raise ValidationError(
                            f"node {v} has a tie in {snap.year} before its entry year"
                        )
        if not isinstance(self.entry_year, MappingProxyType):
            object.__setattr__(self, "entry_year", MappingProxyType(dict(self.entry_year)))

    def __reduce__(self):
        # mappingproxy cannot be pickled; rebuild from a plain dict
        return (DynamicNetwork, (self.snapshots, self.node_universe, dict(self.entry_year), self.excluded))

    @property
    def years(self):
        return [s.year for s in self.snapshots]

    def snapshot(self, year):
        first = self.snapshots[0].year
        if not first <= year <= self.snapshots[-1].year:
            raise KeyError(year)
        return self.snapshots[year - first]

    def events(self):
        """Emit the edge list as ``(i, j, year)`` rows, sorted."""
        return sorted((i, j, s.year) for s in self.snapshots for i, j in s.edges)


def _longest_run(years):
    years = sorted(set(years))
    best = cur = [years[0]]
    for y in years[1:]:
        cur = cur + [y] if y == cur[-1] + 1 else [y]
        if len(cur) > len(best):
            best = cur
    return best[0], best[-1]


def build_dynamic_network(collab_events, year_range, nodes=(), entry_year=None):
    """
    Build yearly unweighted snapshots from dated collaboration rows.

    Rows outside ``year_range`` are dropped. Inside the range only the
    longest run of consecutive years that each hold at least one event is
    kept; remaining rows (e.g. isolated early years) are excluded. Both kinds
    of exclusion are listed in the returned network's ``excluded`` report.

    ``entry_year`` may supply first-activity years from other sources
    (e.g. sampling events); the earliest of that and the first retained
    collaboration year is used.
    """
    start, end = year_range
    if start > end:
        raise ValidationError(f"invalid year range {year_range}")
    in_range, out_of_range = [], []
    for row in collab_events:
        i, j, year = int(row[0]), int(row[1]), int(row[2])
        if i == j:
            raise ValidationError(f"self-collaboration ({i}, {i}) in {year}")
        (in_range if start <= year <= end else out_of_range).append((i, j, year))
    if not in_range:
        raise ValidationError(f"no collaboration events within {start}-{end}")
    lo, hi = _longest_run(y for _, _, y in in_range)
    kept = [e for e in in_range if lo <= e[2] <= hi]
    dropped = [e for e in in_range if not lo <= e[2] <= hi]

    by_year = {y: set() for y in range(lo, hi + 1)}
    universe = set(int(v) for v in nodes)
    entry = {}
    for v, y in (entry_year or {}).items():
        entry[int(v)] = int(y)
        universe.add(int(v))
    for i, j, y in kept:
        by_year[y].add(_pair(i, j))
        universe.update((i, j))
        for v in (i, j):
            if y < entry.get(v, y + 1):
                entry[v] = y
    snaps = tuple(YearSnapshot(y, frozenset(by_year[y])) for y in range(lo, hi + 1))
    return DynamicNetwork(
        snaps,
        frozenset(universe),
        MappingProxyType(entry),
        ExclusionReport(tuple(sorted(out_of_range)), tuple(sorted(dropped))),
    )


def _adjacency(edges):
    adj = {}
    for i, j in edges:
        adj.setdefault(i, set()).add(j)
        adj.setdefault(j, set()).add(i)
    return adj


def geodesic_distances(snapshot, nodes=None):
    """
    Breadth-first hop distances between every ordered pair of nodes.

    ``nodes`` defaults to the endpoints of the snapshot's edges. Pairs with no
    connecting path map to ``UNREACHABLE``.
    """
    adj = _adjacency(snapshot.edges)
    nodes = sorted(adj) if nodes is None else sorted(set(nodes))
    out = {}
    for src in nodes:
        dist = {src: 0}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for w in adj.get(u, ()):
                if w not in dist:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        for dst in nodes:
            out[(src, dst)] = dist.get(dst, UNREACHABLE)
    return out
