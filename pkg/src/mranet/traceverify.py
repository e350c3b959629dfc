"""Combinatorial verification of the doubled contraction network.

The spectral-norm analysis of the corrected contraction rests on counting
frequency labelings of a large network built by chaining ``2q`` copies of
the nine-vertex ring (two rings per layer, layers closed into a cycle).
This module makes that combinatorics executable at small sizes: build the
expanded network, enumerate every edge labeling consistent with the
per-vertex zero-sum structure, check the repeated-label/region inequality
on fully labeled instances, and cross-check the expected trace identity
against a direct Monte Carlo evaluation of the flattened chain matrix.

Frequencies live in the usual band (plus/minus 1..p/2, no zero).  Every
edge carries a label ``f`` at one designated end and ``-f`` at the other;
a vertex is a copy of the third-moment tensor, so the three end labels
incident to it must sum to zero.  At p <= 4 the nine-step chain has a
parity obstruction (no in-band walk returns to a displacement the closing
edge can carry), so there are no labelings at all and every quantity here
is exactly zero; the machinery becomes non-trivial from p = 6 up.
"""

from __future__ import annotations

import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

from .core import check_band_dim, freq_to_index
from .errors import BudgetError, VerificationError
from .moments import SignalSet, exact_moment
from .networks import NetworkGraph
from .rng import substream

__all__ = [
    "ExpandedNetwork",
    "TraceEdge",
    "LabelingStats",
    "build_expanded",
    "enumerate_edge_labelings",
    "labeling_stats",
    "labeling_trace_sum",
    "expected_labeling_sum",
    "build_w_matrix",
    "chain_gram_trace",
    "trace_crosscheck",
    "verify_region_lemma",
    "DEFAULT_ENUM_BUDGET",
]

DEFAULT_ENUM_BUDGET = 10_000_000

# external leg role at ring position m (the order the chain consumes them)
_EXTERNAL_ROLES = ("a", "j1", "c", "j2", "b", "j3", "d", "j4", "j5")
_AB_POSITIONS = (0, 4)
_SHARED_POSITIONS = (1, 2, 3, 5, 6, 7, 8)


@dataclass(frozen=True)
class TraceEdge:
    """One edge of the expanded network.

    ``end0`` is the (vertex, port) whose incident label equals the edge's
    label; the label at ``end1`` is its negation.  ``role`` names the
    quantity the label represents in the trace formulas: ``a``..``j5`` for
    the nine ring legs, ``i1``..``i9`` for the first ring's internal chain,
    ``ii1``..``ii9`` for the second ring's.
    """

    index: int
    layer: int
    role: str
    end0: tuple[int, int]
    end1: tuple[int, int]

    @property
    def is_ab(self) -> bool:
        return self.role in ("a", "b")


@dataclass(frozen=True)
class ExpandedNetwork:
    """``q`` layers of two nine-vertex rings, closed into a cycle.

    Within a layer the two rings share the seven legs c, d, j1..j5; the a
    and b legs of layer ``l`` connect its first ring to the second ring of
    layer ``l-1`` (cyclically).  18q vertices of arity 3, 27q edges: per
    layer 2 in the {a,b} class and 25 in the {c,d,i,itilde,j} class.
    """

    q: int
    edges: tuple[TraceEdge, ...]
    # per vertex: three (edge index, sign) pairs; sign +1 when the vertex
    # holds the edge's end0
    incidence: tuple[tuple[tuple[int, int], ...], ...] = field(repr=False)
    edge_index: dict = field(repr=False)

    def __post_init__(self) -> None:
        q = self.q
        if len(self.edges) != 27 * q:
            raise ValueError(f"expected {27 * q} edges, got {len(self.edges)}")
        if len(self.incidence) != 18 * q:
            raise ValueError("expected 18 vertices per layer")
        if any(len(ends) != 3 for ends in self.incidence):
            raise ValueError("every vertex must have arity 3")
        for layer in range(q):
            ab = sum(1 for e in self.edges if e.layer == layer and e.is_ab)
            rest = sum(1 for e in self.edges if e.layer == layer and not e.is_ab)
            if ab != 2 or rest != 25:
                raise ValueError(
                    f"layer {layer} has {ab} linking and {rest} in-layer edges"
                )

    @property
    def num_vertices(self) -> int:
        return 18 * self.q

    @property
    def num_edges(self) -> int:
        return 27 * self.q

    def edge(self, role: str, layer: int) -> TraceEdge:
        return self.edges[self.edge_index[(role, layer % self.q)]]

    def to_network(self, that: np.ndarray) -> NetworkGraph:
        """Realize the network with a concrete third-moment tensor.

        Every edge joins opposite frequencies, so all edges are dotted in
        the executor's convention.  Contraction yields the trace of the
        q-th power of the flattened-chain Gram matrix, without the
        correction weights (those are accounted separately).
        """
        that = np.asarray(that, dtype=np.complex128)
        p = that.shape[0]
        if that.shape != (p, p, p):
            raise ValueError(f"expected a cubic tensor, got shape {that.shape}")
        net = NetworkGraph(dim=p, signed=True)
        for v in range(self.num_vertices):
            net.add_node(f"v{v}", that)
        for e in self.edges:
            net.add_edge(
                f"v{e.end0[0]}", e.end0[1], f"v{e.end1[0]}", e.end1[1], dotted=True
            )
        return net


def build_expanded(q: int) -> ExpandedNetwork:
    """Construct the expanded network with ``q`` layers."""
    q = int(q)
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")

    def vid(layer: int, ring: int, m: int) -> int:
        return (layer % q) * 18 + ring * 9 + m

    edges: list[TraceEdge] = []
    index: dict = {}

    def add(layer: int, role: str, end0, end1) -> None:
        index[(role, layer)] = len(edges)
        edges.append(
            TraceEdge(index=len(edges), layer=layer, role=role, end0=end0, end1=end1)
        )

    for layer in range(q):
        # internal chain of each ring: the edge leaving position m carries
        # the chain label with 1-based subscript ((m+1) mod 9) + 1
        for m in range(9):
            sub = (m + 1) % 9 + 1
            add(layer, f"i{sub}", (vid(layer, 0, m), 2), (vid(layer, 0, (m + 1) % 9), 0))
        for m in range(9):
            sub = (m + 1) % 9 + 1
            add(layer, f"ii{sub}", (vid(layer, 1, m), 2), (vid(layer, 1, (m + 1) % 9), 0))
        # legs shared between the two rings of this layer (positive end on
        # the first ring)
        for m in _SHARED_POSITIONS:
            add(layer, _EXTERNAL_ROLES[m], (vid(layer, 0, m), 1), (vid(layer, 1, m), 1))
        # a and b link this layer's first ring back to the previous layer's
        # second ring (positive end on this layer's first ring)
        for m in _AB_POSITIONS:
            add(layer, _EXTERNAL_ROLES[m], (vid(layer, 0, m), 1), (vid(layer - 1, 1, m), 1))

    incident: list[list[tuple[int, int]]] = [[] for _ in range(18 * q)]
    for e in edges:
        incident[e.end0[0]].append((e.index, +1))
        incident[e.end1[0]].append((e.index, -1))
    return ExpandedNetwork(
        q=q,
        edges=tuple(edges),
        incidence=tuple(tuple(ends) for ends in incident),
        edge_index=index,
    )


def _default_order(net: ExpandedNetwork) -> list[int]:
    """Edge order that lets zero-sum propagation do most of the work.

    Per layer: the first internal label, then the nine legs in chain order
    (each assignment propagates one step of the first ring), then the
    second ring's first internal label (propagating that whole ring).
    Remaining internals are derived, never branched on.
    """
    order: list[int] = []
    for layer in range(net.q):
        order.append(net.edge_index[("i1", layer)])
        for role in _EXTERNAL_ROLES:
            order.append(net.edge_index[(role, layer)])
        order.append(net.edge_index[("ii1", layer)])
    seen = set(order)
    order.extend(e.index for e in net.edges if e.index not in seen)
    return order


def _exclusion_pairs(net: ExpandedNetwork) -> list[tuple[int, int]]:
    pairs = []
    for layer in range(net.q):
        pairs.append((net.edge_index[("a", layer)], net.edge_index[("b", layer)]))
        pairs.append((net.edge_index[("c", layer)], net.edge_index[("d", layer)]))
    return pairs


def repeated_label_count(labels: Sequence[int], half: int) -> int:
    """Number of repeated labels: per magnitude class, its edge count minus
    one (when occupied), summed over classes."""
    counts = [0] * (half + 1)
    for f in labels:
        counts[abs(f)] += 1
    return sum(n - 1 for n in counts[1:] if n > 0)


def _assert_ring_closure(net: ExpandedNetwork, labels: Sequence[int]) -> None:
    """Both rings of every layer telescope to the same two-leg sum."""
    q = net.q
    for layer in range(q):
        a = labels[net.edge_index[("a", layer)]]
        b = labels[net.edge_index[("b", layer)]]
        rest = sum(
            labels[net.edge_index[(role, layer)]]
            for role in ("c", "d", "j1", "j2", "j3", "j4", "j5")
        )
        a_next = labels[net.edge_index[("a", (layer + 1) % q)]]
        b_next = labels[net.edge_index[("b", (layer + 1) % q)]]
        if a + b != -rest or a + b != a_next + b_next:
            raise AssertionError(
                f"ring closure violated at layer {layer}: "
                f"a+b={a + b}, -(c+d+sum j)={-rest}, next a+b={a_next + b_next}"
            )


def enumerate_edge_labelings(
    net: ExpandedNetwork,
    p: int,
    budget: int = DEFAULT_ENUM_BUDGET,
    order: Sequence[int] | None = None,
    apply_exclusions: bool = True,
    prefix: Sequence[int] | None = None,
    counters: dict | None = None,
) -> Iterator[tuple[tuple[int, ...], int]]:
    """Yield every edge labeling with zero vertex sums, duplicate-free.

    Depth-first search over the edges in ``order`` (a permutation of all
    edge indices; default interleaves legs with ring chains so each choice
    propagates).  Whenever a vertex has two of its three incident labels,
    the third is forced; out-of-band forcings prune the branch.  With
    ``apply_exclusions`` the two leg pairs whose correction weight is
    identically zero (a = -b, c = -d) are pruned as well.

    ``prefix`` pins the first ``len(prefix)`` edges of ``order`` to the
    given frequencies, restricting the stream to one search subtree; the
    streams over all prefixes of a fixed length partition the full
    enumeration, which is how the search splits across workers.

    Yields ``(labels, c)``: the per-edge labels (at each edge's positive
    end, in edge-index order) and the repeated-label count.  Raises
    :class:`BudgetError` when more than ``budget`` branch assignments are
    attempted, reporting progress so far.  ``counters``, when given, is
    filled with the running ``attempts`` and ``found`` tallies.
    """
    check_band_dim(p)
    half = p // 2
    E = net.num_edges
    if order is None:
        order_list = _default_order(net)
    else:
        order_list = [int(e) for e in order]
        if sorted(order_list) != list(range(E)):
            raise ValueError("order must be a permutation of all edge indices")

    partner: dict[int, int] = {}
    if apply_exclusions:
        for ea, eb in _exclusion_pairs(net):
            partner[ea] = eb
            partner[eb] = ea

    labels: list[int | None] = [None] * E
    end_sum = [0] * net.num_vertices
    unknown = [3] * net.num_vertices
    edge_ends = [(e.end0[0], e.end1[0]) for e in net.edges]
    incidence = net.incidence
    band = [f for f in range(-half, half + 1) if f != 0]

    attempts = 0
    found = 0

    def assign(e0: int, f0: int, trail: list[int]) -> bool:
        """Set edge e0 to f0 and run zero-sum propagation; False on clash."""
        stack = [(e0, f0)]
        while stack:
            e, f = stack.pop()
            cur = labels[e]
            if cur is not None:
                if cur != f:
                    return False
                continue
            if f == 0 or abs(f) > half:
                return False
            mate = partner.get(e)
            if mate is not None and labels[mate] is not None and labels[mate] == -f:
                return False
            labels[e] = f
            trail.append(e)
            for v, s in ((edge_ends[e][0], +1), (edge_ends[e][1], -1)):
                end_sum[v] += s * f
                unknown[v] -= 1
                if unknown[v] == 0:
                    if end_sum[v] != 0:
                        return False
                elif unknown[v] == 1:
                    for e2, s2 in incidence[v]:
                        if labels[e2] is None:
                            stack.append((e2, -end_sum[v] * s2))
                            break
        return True

    def undo(trail: list[int]) -> None:
        for e in reversed(trail):
            f = labels[e]
            labels[e] = None
            for v, s in ((edge_ends[e][0], +1), (edge_ends[e][1], -1)):
                end_sum[v] -= s * f
                unknown[v] += 1

    def note_counts() -> None:
        if counters is not None:
            counters["attempts"] = attempts
            counters["found"] = found

    def dfs(pos: int) -> Iterator[tuple[tuple[int, ...], int]]:
        nonlocal attempts, found
        while pos < E and labels[order_list[pos]] is not None:
            pos += 1
        if pos == E:
            out = tuple(labels)  # type: ignore[arg-type]
            for v in range(net.num_vertices):
                if end_sum[v] != 0:
                    raise AssertionError(f"vertex {v} sum {end_sum[v]} != 0")
            _assert_ring_closure(net, out)
            found += 1
            note_counts()
            yield out, repeated_label_count(out, half)
            return
        e = order_list[pos]
        for f in band:
            attempts += 1
            if attempts > budget:
                note_counts()
                raise BudgetError(
                    f"labeling enumeration exceeded its budget of {budget:,} "
                    f"assignments ({found:,} labelings found so far)"
                )
            trail: list[int] = []
            if assign(e, f, trail):
                yield from dfs(pos + 1)
            undo(trail)

    start = 0
    if prefix is not None:
        if len(prefix) > E:
            raise ValueError("prefix is longer than the edge list")
        pin_trail: list[int] = []
        ok = True
        for k, f in enumerate(prefix):
            if not assign(order_list[k], int(f), pin_trail):
                ok = False
                break
        if not ok:
            note_counts()
            return
        start = len(prefix)
    yield from dfs(start)
    note_counts()


@dataclass(frozen=True)
class LabelingStats:
    """Validity record for one fully labeled instance.

    ``valid_i``: all vertex label sums vanish.  ``valid_ii``: no layer has
    its first leg pair or second leg pair at opposite frequencies.
    ``valid_iii``: every region (vertices sharing one signal index) sees as
    many incident ``+f`` as ``-f`` boundary labels, for every frequency.
    ``c`` is the repeated-label count, ``r`` the number of regions.
    """

    edge_labels: tuple[int, ...]
    vertex_labels: tuple[int, ...]
    c: int
    r: int
    valid_i: bool
    valid_ii: bool
    valid_iii: bool

    @property
    def valid(self) -> bool:
        return self.valid_i and self.valid_ii and self.valid_iii


def labeling_stats(
    net: ExpandedNetwork,
    p: int,
    edge_labels: Sequence[int],
    vertex_labels: Sequence[int],
) -> LabelingStats:
    """Compute the validity flags and counting statistics of a labeling."""
    check_band_dim(p)
    half = p // 2
    edge_labels = tuple(int(f) for f in edge_labels)
    vertex_labels = tuple(int(k) for k in vertex_labels)
    if len(edge_labels) != net.num_edges:
        raise ValueError(f"expected {net.num_edges} edge labels")
    if len(vertex_labels) != net.num_vertices:
        raise ValueError(f"expected {net.num_vertices} vertex labels")
    if any(f == 0 or abs(f) > half for f in edge_labels):
        raise ValueError("edge labels must be nonzero band frequencies")

    valid_i = all(
        sum(s * edge_labels[e] for e, s in ends) == 0 for ends in net.incidence
    )
    valid_ii = all(
        edge_labels[ea] != -edge_labels[eb] for ea, eb in _exclusion_pairs(net)
    )

    # region balance, on boundary edges only: edges interior to a region
    # contribute f and -f to the same tally and can never break it
    balance: dict[int, dict[int, int]] = {}
    for e in net.edges:
        k0 = vertex_labels[e.end0[0]]
        k1 = vertex_labels[e.end1[0]]
        if k0 == k1:
            continue
        f = edge_labels[e.index]
        balance.setdefault(k0, {}).setdefault(f, 0)
        balance[k0][f] += 1
        balance.setdefault(k1, {}).setdefault(-f, 0)
        balance[k1][-f] += 1
    valid_iii = all(
        tally.get(f, 0) == tally.get(-f, 0)
        for tally in balance.values()
        for f in range(1, half + 1)
    )

    return LabelingStats(
        edge_labels=edge_labels,
        vertex_labels=vertex_labels,
        c=repeated_label_count(edge_labels, half),
        r=len(set(vertex_labels)),
        valid_i=valid_i,
        valid_ii=valid_ii,
        valid_iii=valid_iii,
    )


def _correction_values(correction, p: int) -> np.ndarray | None:
    if correction is None:
        return None
    values = getattr(correction, "values", correction)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (p, p, p, p):
        raise ValueError(f"correction values must be {(p,) * 4}, got {values.shape}")
    return values


def _labeling_matrix(
    net: ExpandedNetwork,
    p: int,
    labelings,
    apply_exclusions: bool,
) -> np.ndarray:
    if labelings is None:
        labelings = enumerate_edge_labelings(
            net, p, apply_exclusions=apply_exclusions
        )
        rows = [lab for lab, _ in labelings]
    else:
        # accept either bare label tuples or (labels, c) pairs as yielded
        # by the enumerator
        rows = [lab[0] if isinstance(lab[0], tuple) else lab for lab in labelings]
    if not rows:
        return np.zeros((0, net.num_edges), dtype=np.int64)
    return np.asarray(rows, dtype=np.int64)


def _freq_index_array(p: int, f: np.ndarray) -> np.ndarray:
    half = p // 2
    return np.where(f < 0, f + half, f + half - 1)


def _correction_factor(
    net: ExpandedNetwork, p: int, L: np.ndarray, values: np.ndarray | None
) -> np.ndarray:
    """Per-labeling product of correction weights: for each layer, one factor
    at that layer's leg frequencies and one at the negated next-layer pair."""
    n = L.shape[0]
    if values is None:
        return np.ones(n, dtype=np.float64)
    out = np.ones(n, dtype=np.float64)
    q = net.q
    for layer in range(q):
        a = L[:, net.edge_index[("a", layer)]]
        b = L[:, net.edge_index[("b", layer)]]
        c = L[:, net.edge_index[("c", layer)]]
        d = L[:, net.edge_index[("d", layer)]]
        a2 = L[:, net.edge_index[("a", (layer + 1) % q)]]
        b2 = L[:, net.edge_index[("b", (layer + 1) % q)]]
        out *= values[
            _freq_index_array(p, a),
            _freq_index_array(p, b),
            _freq_index_array(p, c),
            _freq_index_array(p, d),
        ]
        out *= values[
            _freq_index_array(p, -a2),
            _freq_index_array(p, -b2),
            _freq_index_array(p, -c),
            _freq_index_array(p, -d),
        ]
    return out


def labeling_trace_sum(
    net: ExpandedNetwork,
    p: int,
    that: np.ndarray,
    correction=None,
    labelings=None,
) -> complex:
    """Deterministic trace of the q-th Gram power as a labeling sum.

    For a fixed moment tensor, sums the per-vertex tensor entries over all
    zero-sum labelings, weighted by the correction factors.  Equals the
    trace computed from the flattened chain matrix; with ``correction``
    None the weights are identically one and the exclusion pruning is
    dropped (the unweighted identity).
    """
    check_band_dim(p)
    that = np.asarray(that, dtype=np.complex128)
    if that.shape != (p, p, p):
        raise ValueError(f"expected a ({p},{p},{p}) tensor, got {that.shape}")
    values = _correction_values(correction, p)
    L = _labeling_matrix(net, p, labelings, apply_exclusions=values is not None)
    if L.shape[0] == 0:
        return complex(0.0)
    term = np.ones(L.shape[0], dtype=np.complex128)
    for ends in net.incidence:
        (e1, s1), (e2, s2), (e3, s3) = ends
        i1 = _freq_index_array(p, s1 * L[:, e1])
        i2 = _freq_index_array(p, s2 * L[:, e2])
        i3 = _freq_index_array(p, s3 * L[:, e3])
        term *= that[i1, i2, i3]
    term *= _correction_factor(net, p, L, values)
    return complex(term.sum())


def _vertex_label_vectors(K: int, n: int) -> Iterator[tuple[tuple[int, ...], int]]:
    """All vertex-label vectors with their multiplicity.

    For two signals, vectors come in pairs under swapping the labels, with
    identical regions; only the representative with the first vertex
    labeled 0 is generated, carrying weight 2.  Otherwise every vector is
    generated with weight 1.
    """
    if K == 2:
        for rest in np.ndindex(*(2,) * (n - 1)):
            yield (0, *rest), 2
    else:
        for vec in np.ndindex(*(K,) * n):
            yield tuple(vec), 1


def _region_moment(p: int, region_end_labels: dict[int, list[int]]) -> float:
    """Expected product of signal coordinates over the given regions.

    Each region contributes the moment of its incident label multiset:
    zero unless every frequency appears as often as its negation, else the
    product over positive frequencies of m! p^-m for multiplicity m.
    """
    half = p // 2
    out = 1.0
    for ends in region_end_labels.values():
        counts = [0] * (2 * half + 1)
        for f in ends:
            counts[f + half] += 1
        for f in range(1, half + 1):
            m = counts[f + half]
            if m != counts[-f + half]:
                return 0.0
            out *= math.factorial(m) * p ** (-m)
    return out


def expected_labeling_sum(
    net: ExpandedNetwork,
    p: int,
    K: int,
    correction=None,
    labelings=None,
    k_budget: int = 2_000_000,
) -> float:
    """Exact expectation of the trace as a sum over valid labelings.

    Sums, over edge labelings and vertex labelings, the correction product
    times the Gaussian moment of each region's incident labels (m! p^-m
    per frequency of multiplicity m).  ``K`` counts the signals; for two,
    vertex labelings are enumerated up to the label swap and reweighted.
    """
    check_band_dim(p)
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    values = _correction_values(correction, p)
    L = _labeling_matrix(net, p, labelings, apply_exclusions=values is not None)
    if L.shape[0] == 0:
        return 0.0
    weights = _correction_factor(net, p, L, values)
    half = p // 2
    n_vert = net.num_vertices

    if K == 1:
        # single region: balance is automatic (every edge is interior) and
        # the multiplicity of +f equals the number of edges labeled +-f
        absL = np.abs(L)
        moment = np.ones(L.shape[0], dtype=np.float64)
        for f in range(1, half + 1):
            m = (absL == f).sum(axis=1)
            moment *= np.array([math.factorial(int(v)) for v in m], dtype=np.float64)
            moment *= np.power(float(p), -m.astype(np.float64))
        return float((weights * moment).sum())

    n_vectors = K ** n_vert if K != 2 else 2 ** (n_vert - 1)
    if L.shape[0] * n_vectors > k_budget:
        raise BudgetError(
            f"vertex-label sum needs {L.shape[0]:,} x {n_vectors:,} "
            f"evaluations, over the budget of {k_budget:,}"
        )
    # incident end labels per vertex, per labeling row
    vertex_ends = []
    for ends in net.incidence:
        vertex_ends.append([(e, s) for e, s in ends])
    total = 0.0
    for row, w in zip(L, weights):
        if w == 0.0:
            continue
        ends_of = [
            [int(s * row[e]) for e, s in ends] for ends in vertex_ends
        ]
        for kvec, mult in _vertex_label_vectors(K, n_vert):
            regions: dict[int, list[int]] = {}
            for v, k in enumerate(kvec):
                regions.setdefault(k, []).extend(ends_of[v])
            total += mult * w * _region_moment(p, regions)
    return float(total)


def _chain_transfer(that: np.ndarray) -> np.ndarray:
    """One chain step: A[i, x, i'] = that[-i, x, i'] restricted to i' = i - x.

    ``i`` and ``x`` are canonical frequency indices; steps whose target
    frequency falls outside the band are zero.
    """
    that = np.asarray(that, dtype=np.complex128)
    p = that.shape[0]
    check_band_dim(p)
    if that.shape != (p, p, p):
        raise ValueError(f"expected a cubic tensor, got shape {that.shape}")
    half = p // 2
    f = np.concatenate([np.arange(-half, 0), np.arange(1, half + 1)])
    neg = np.arange(p)[::-1]
    diff = f[:, None] - f[None, :]  # frequency of i - x
    ok = (np.abs(diff) >= 1) & (np.abs(diff) <= half)
    target = np.where(diff < 0, diff + half, diff + half - 1)
    target = np.where(ok, target, 0)
    A = np.zeros((p, p, p), dtype=np.complex128)
    rows = np.repeat(np.arange(p), p)
    cols = np.tile(np.arange(p), p)
    A[rows, cols, target[rows, cols]] = np.where(
        ok[rows, cols], that[neg[rows], cols, target[rows, cols]], 0.0
    )
    return A


def chain_gram_trace(that: np.ndarray) -> float:
    """Unweighted squared Frobenius norm of the chain matrix, any band size.

    Works in the pair space of two chain copies: one nine-fold power of a
    p^2 x p^2 transfer matrix, never touching the p^9 dense form.  Serves
    as an independent route to the single-layer trace at sizes where the
    explicit matrix cannot be built.
    """
    A = _chain_transfer(that)
    p = A.shape[0]
    B = np.einsum("ixk,jxl->ijkl", A, A.conj()).reshape(p * p, p * p)
    return float(np.trace(np.linalg.matrix_power(B, 9)).real)


def build_w_matrix(that: np.ndarray, correction=None) -> np.ndarray:
    """Explicit flattened chain matrix, rows (a, b), columns (c, d, j1..j5).

    Built entrywise from the nine-factor chain definition by accumulating
    transfer steps; feasible only at p <= 4 (the dense form has p^9
    entries).  ``correction`` weights the (a, b, c, d) block; None leaves
    the chain unweighted.
    """
    that = np.asarray(that, dtype=np.complex128)
    p = that.shape[0]
    check_band_dim(p)
    if that.shape != (p, p, p):
        raise ValueError(f"expected a cubic tensor, got shape {that.shape}")
    if p > 4:
        raise BudgetError(
            f"the explicit chain matrix has p^9 entries; p={p} is over the "
            f"p <= 4 limit for building it densely"
        )
    values = _correction_values(correction, p)
    A = _chain_transfer(that)

    C = A  # axes [i1, x1, i2]
    for _ in range(7):
        C = np.tensordot(C, A, axes=([-1], [0]))
    # close the ring: contract the ninth factor over both chain ends
    W = np.einsum(C, [0, *range(1, 9), 9], A, [9, 10, 0], [*range(1, 9), 10])
    # reorder legs (a, j1, c, j2, b, j3, d, j4, j5) -> (a, b, c, d, j1..j5)
    W = W.transpose(0, 4, 2, 6, 1, 3, 5, 7, 8)
    if values is not None:
        W = W * values[:, :, :, :, None, None, None, None, None]
    return W.reshape(p * p, p ** 7)


def trace_crosscheck(
    p: int,
    q: int = 1,
    K: int = 1,
    mc_samples: int = 1000,
    seed: int = 0,
    include_correction: bool = True,
) -> tuple[float, float, float]:
    """Monte Carlo vs exact-labeling evaluation of the expected trace.

    Returns ``(lhs, rhs, stderr)``: the sample mean of the squared
    Frobenius norm of the explicit chain matrix over random signal draws,
    the exact labeling sum, and the standard error of the mean.  The two
    agree within a few standard errors when the wiring, the moment
    formula, and the correction bookkeeping are all consistent.  Capped at
    p <= 4 and q = 1, where the dense matrix is affordable.
    """
    check_band_dim(p)
    if p > 4:
        raise ValueError(f"trace_crosscheck is limited to p <= 4, got p={p}")
    if q != 1:
        raise ValueError(f"trace_crosscheck is limited to q = 1, got q={q}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if mc_samples < 2:
        raise ValueError(f"need at least 2 samples, got {mc_samples}")
    if include_correction:
        from .correction import correction_table

        table = correction_table(p, mode="exact")
    else:
        table = None

    net = build_expanded(q)
    labelings = [
        lab
        for lab, _ in enumerate_edge_labelings(
            net, p, apply_exclusions=include_correction
        )
    ]
    rhs = expected_labeling_sum(net, p, K, correction=table, labelings=labelings)

    rng = substream(seed, "trace-crosscheck")
    vals = np.empty(mc_samples, dtype=np.float64)
    for s in range(mc_samples):
        sig = SignalSet.random(p, K, rng)
        that = exact_moment(sig, 3)
        Wm = build_w_matrix(that, table)
        vals[s] = float(np.sum(np.abs(Wm) ** 2))
    lhs = float(vals.mean())
    stderr = float(vals.std(ddof=1) / math.sqrt(mc_samples))
    return lhs, rhs, stderr


def _lemma_count_bound(q: int, p: int, c: int) -> float:
    """Stated ceiling on the number of valid edge labelings at each c."""
    return 3.0 * (2.0 * (27.0 * q) ** 2) ** c * float(p) ** (1 + 9 * q - c / 25.0)


def verify_region_lemma(
    net: ExpandedNetwork,
    p: int,
    K: int,
    sample_budget: int = 1_000_000,
    seed: int = 0,
    mode: str = "auto",
    enum_budget: int = DEFAULT_ENUM_BUDGET,
) -> dict:
    """Check the repeated-label/region inequality on full labelings.

    ``mode`` picks how vertex labelings are covered: ``"exhaustive"``
    iterates them all (allowed only at p <= 4 with at most two layers —
    beyond that the space is out of reach and the request is refused),
    ``"sampled"`` draws ``sample_budget`` random full labelings from the
    enumerated edge labelings, and ``"auto"`` goes exhaustive exactly when
    the size cap allows it.  Every valid labeling with more than one
    region must have at least half as many repeated labels as regions; a
    counterexample raises :class:`VerificationError` with the labeling
    dumped (it would mean the wiring or the statistics are wrong, so it is
    never converted into a soft result).

    Returns a JSON-ready report with the per-c labeling histogram, the
    stated counting bound at each observed c, and empty violation lists on
    success.
    """
    check_band_dim(p)
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if mode not in ("auto", "exhaustive", "sampled"):
        raise ValueError(f"unknown mode {mode!r}")
    cap_ok = p <= 4 and net.q <= 2
    if mode == "exhaustive" and not cap_ok:
        raise BudgetError(
            f"exhaustive verification is capped at p <= 4 with q <= 2; "
            f"got p={p}, q={net.q} (use sampling instead)"
        )
    exhaustive = cap_ok if mode == "auto" else mode == "exhaustive"
    edge_labelings = [
        lab
        for lab, _ in enumerate_edge_labelings(
            net, p, budget=enum_budget, apply_exclusions=True
        )
    ]
    per_c_histogram: dict[int, int] = {}
    half = p // 2
    for lab in edge_labelings:
        c = repeated_label_count(lab, half)
        per_c_histogram[c] = per_c_histogram.get(c, 0) + 1
    per_c_bound = {c: _lemma_count_bound(net.q, p, c) for c in per_c_histogram}
    bound_violations = [
        {"c": c, "count": n, "bound": per_c_bound[c]}
        for c, n in sorted(per_c_histogram.items())
        if n > per_c_bound[c]
    ]

    violations: list[dict] = []
    r_histogram: dict[int, int] = {}
    checked = 0
    valid_count = 0
    valid_r_gt_1 = 0

    def consider(stats: LabelingStats, mult: int) -> None:
        nonlocal valid_count, valid_r_gt_1
        if not stats.valid:
            return
        valid_count += mult
        r_histogram[stats.r] = r_histogram.get(stats.r, 0) + mult
        if stats.r > 1:
            valid_r_gt_1 += mult
            if stats.c < stats.r / 2:
                violations.append(
                    {
                        "edge_labels": list(stats.edge_labels),
                        "vertex_labels": list(stats.vertex_labels),
                        "c": stats.c,
                        "r": stats.r,
                    }
                )

    if exhaustive:
        mode = "exhaustive"
        for lab in edge_labelings:
            for kvec, mult in _vertex_label_vectors(K, net.num_vertices):
                checked += mult
                consider(labeling_stats(net, p, lab, kvec), mult)
    else:
        mode = "sampled"
        rng = substream(seed, "region-lemma-sample")
        if edge_labelings:
            for _ in range(sample_budget):
                lab = edge_labelings[int(rng.integers(len(edge_labelings)))]
                kvec = rng.integers(0, K, net.num_vertices)
                checked += 1
                consider(labeling_stats(net, p, lab, kvec), 1)

    report = {
        "mode": mode,
        "p": p,
        "q": net.q,
        "K": K,
        "edge_labelings": len(edge_labelings),
        "full_labelings_checked": checked,
        "valid_full_labelings": valid_count,
        "valid_with_multiple_regions": valid_r_gt_1,
        "r_histogram": {str(k): v for k, v in sorted(r_histogram.items())},
        "per_c_histogram": {str(k): v for k, v in sorted(per_c_histogram.items())},
        "per_c_bound": {str(k): v for k, v in sorted(per_c_bound.items())},
        "bound_violations": bound_violations,
        "violations": violations,
    }
    if violations:
        first = violations[0]
        err = VerificationError(
            f"repeated-label/region inequality violated: c={first['c']} < "
            f"r/2={first['r'] / 2} for edge labels {first['edge_labels']} "
            f"and vertex labels {first['vertex_labels']}",
        )
        err.report = report
        raise err
    return report
