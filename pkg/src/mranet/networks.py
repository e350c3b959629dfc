"""Tensor-network graphs and a generic contraction executor.

A network is a multigraph: nodes carry dense tensors, edges join two
tensor ports (index positions) and mean "sum this index", and external
legs name the output axes. Networks over frequency-indexed tensors may
additionally mark an edge as *dotted*, which pairs index i on one side
with -i on the other; this is how frequency-domain and standard-basis
sub-networks glue together, since transpose(basis) @ basis is exactly
the frequency-negation permutation.

The executor is deliberately simple and deterministic: it repeatedly
contracts the pair of connected nodes whose intermediate result is
smallest, breaking ties toward the lowest node ids. It exists to be an
independently-trustworthy oracle for the specialized kernels (the ring
contraction, the trace diagnostics), not to win benchmarks; tensors are
kept dense and every pairwise step is a single einsum.

Networks can be built programmatically or loaded from a small text
format (see parse_network):

    index p=4 signed
    node  A  T
    node  B  T
    edge  A.2 B.2
    dedge A.1 B.0
    leg   a  A.0
    leg   b  B.1

"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import flatten4


@dataclass(frozen=True)
class PortRef:
    node: str
    port: int


@dataclass(frozen=True)
class Edge:
    a: PortRef
    b: PortRef
    dotted: bool = False


@dataclass(frozen=True)
class Leg:
    name: str
    ref: PortRef


@dataclass
class NetworkGraph:
    """A tensor network: dimension, nodes, edges, and ordered external legs.

    `signed` declares that indices are frequencies with a negation
    involution (canonical order, so negation reverses each axis); only
    signed networks may contain dotted edges.
    """

    dim: int
    signed: bool = False
    nodes: dict[str, np.ndarray] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)
    legs: list[Leg] = field(default_factory=list)

    def add_node(self, name: str, tensor: np.ndarray) -> None:
        if name in self.nodes:
            raise ValueError(f"duplicate node name {name!r}")
        tensor = np.asarray(tensor)
        if any(d != self.dim for d in tensor.shape):
            raise ValueError(
                f"node {name!r} has shape {tensor.shape}, expected all axes "
                f"of size {self.dim}"
            )
        self.nodes[name] = tensor

    def add_edge(self, na: str, pa: int, nb: str, pb: int, dotted: bool = False) -> None:
        if dotted and not self.signed:
            raise ValueError("dotted edges require a signed (frequency) network")
        self.edges.append(Edge(PortRef(na, pa), PortRef(nb, pb), dotted))

    def add_leg(self, name: str, node: str, port: int) -> None:
        if any(leg.name == name for leg in self.legs):
            raise ValueError(f"duplicate leg name {name!r}")
        self.legs.append(Leg(name, PortRef(node, port)))

    def validate(self) -> None:
        """Check that every tensor port is used exactly once."""
        seen: dict[PortRef, str] = {}

        def use(ref: PortRef, what: str) -> None:
            if ref.node not in self.nodes:
                raise ValueError(f"{what} references unknown node {ref.node!r}")
            arity = self.nodes[ref.node].ndim
            if not (0 <= ref.port < arity):
                raise ValueError(
                    f"{what} references port {ref.port} of node {ref.node!r} "
                    f"which has arity {arity}"
                )
            if ref in seen:
                raise ValueError(
                    f"port {ref.node}.{ref.port} used twice ({seen[ref]} and {what})"
                )
            seen[ref] = what

        for k, e in enumerate(self.edges):
            use(e.a, f"edge {k}")
            use(e.b, f"edge {k}")
        for leg in self.legs:
            use(leg.ref, f"leg {leg.name!r}")
        for name, tensor in self.nodes.items():
            for port in range(tensor.ndim):
                if PortRef(name, port) not in seen:
                    raise ValueError(f"dangling port {name}.{port}")


def parse_network(text: str, tensors: dict[str, np.ndarray]) -> NetworkGraph:
    """Build a NetworkGraph from the declarative text format.

    Lines: `index p=<dim> [signed|plain]`, `node <name> <slot>`,
    `edge <n>.<port> <n>.<port>`, `dedge ...` (dotted), and
    `leg <name> <n>.<port>`. `#` starts a comment. Tensors are bound to
    nodes by slot name from the `tensors` mapping.
    """
    net: NetworkGraph | None = None

    def ref(token: str) -> tuple[str, int]:
        node, _, port = token.rpartition(".")
        if not node:
            raise ValueError(f"expected <node>.<port>, got {token!r}")
        return node, int(port)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "index":
                fields = dict(kv.split("=") for kv in parts[1:] if "=" in kv)
                flags = [tok for tok in parts[1:] if "=" not in tok]
                signed = "signed" in flags
                net = NetworkGraph(dim=int(fields["p"]), signed=signed)
            elif net is None:
                raise ValueError("first directive must be `index`")
            elif kind == "node":
                name, slot = parts[1], parts[2]
                if slot not in tensors:
                    raise ValueError(f"no tensor bound for slot {slot!r}")
                net.add_node(name, tensors[slot])
            elif kind in ("edge", "dedge"):
                (na, pa), (nb, pb) = ref(parts[1]), ref(parts[2])
                net.add_edge(na, pa, nb, pb, dotted=(kind == "dedge"))
            elif kind == "leg":
                name, (node, port) = parts[1], ref(parts[2])
                net.add_leg(name, node, port)
            else:
                raise ValueError(f"unknown directive {kind!r}")
        except (IndexError, KeyError) as exc:
            raise ValueError(f"line {lineno}: malformed {kind!r} directive") from exc
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if net is None:
        raise ValueError("empty network description")
    return net


def _prepared_tensors(net: NetworkGraph) -> tuple[dict[str, np.ndarray], dict[str, list[int]]]:
    """Resolve dotted edges by flipping one endpoint axis of each.

    Flipping an axis of a canonically-ordered frequency tensor evaluates
    it at the negated index, so after this step every edge is a plain
    contraction. Returns (tensor by node, axis labels by node); edge k
    gets label k, leg j gets label len(edges)+j.
    """
    flips: dict[str, set[int]] = {name: set() for name in net.nodes}
    for e in net.edges:
        if e.dotted:
            # flip the second endpoint; for a dotted self-loop on equal
            # ports there is no consistent orientation, reject it.
            if e.a == e.b:
                raise ValueError("dotted edge cannot join a port to itself")
            flips[e.b.node].add(e.b.port)

    labels: dict[str, list[int]] = {
        name: [-1] * t.ndim for name, t in net.nodes.items()
    }
    for k, e in enumerate(net.edges):
        labels[e.a.node][e.a.port] = k
        labels[e.b.node][e.b.port] = k
    for j, leg in enumerate(net.legs):
        labels[leg.ref.node][leg.ref.port] = len(net.edges) + j

    prepared: dict[str, np.ndarray] = {}
    for name, t in net.nodes.items():
        axes = sorted(flips[name])
        if axes:
            t = t[tuple(slice(None, None, -1) if ax in axes else slice(None) for ax in range(t.ndim))]
        prepared[name] = np.ascontiguousarray(t)
    return prepared, labels


def _einsum_compact(*args):
    """``np.einsum`` in interleaved integer-label form, compacting labels.

    Axis labels are global edge ids, which can outgrow einsum's symbol
    range on large networks; only the distinct labels within one call
    matter, so they are renumbered densely per call.
    """
    mapping: dict[int, int] = {}
    converted = []
    for item in args:
        if isinstance(item, list):
            converted.append([mapping.setdefault(l, len(mapping)) for l in item])
        else:
            converted.append(item)
    return np.einsum(*converted)


def contract(net: NetworkGraph, return_order: bool = False):
    """Contract the network; output axes follow leg declaration order.

    Strategy: trace out repeated labels within single nodes, then
    greedily contract the node pair producing the smallest intermediate,
    ties broken by lowest node ids (creation order). Deterministic:
    identical inputs give float-identical outputs.
    """
    net.validate()
    prepared, labels = _prepared_tensors(net)
    out_labels = [len(net.edges) + j for j in range(len(net.legs))]

    order_log: list[tuple[str, ...]] = []
    # worklist: id -> (tensor, labels); ids follow node creation order
    ids = {name: k for k, name in enumerate(net.nodes)}
    names = {k: name for name, k in ids.items()}
    work: dict[int, tuple[np.ndarray, list[int]]] = {
        ids[name]: (prepared[name], labels[name]) for name in net.nodes
    }
    next_id = len(work)

    def trace_repeats(k: int) -> None:
        t, lab = work[k]
        while len(set(lab)) < len(lab):
            seenl: dict[int, int] = {}
            dup = None
            for ax, l in enumerate(lab):
                if l in seenl:
                    dup = (seenl[l], ax, l)
                    break
                seenl[l] = ax
            ax1, ax2, l = dup
            keep = [l2 for i, l2 in enumerate(lab) if i not in (ax1, ax2)]
            if l in out_labels:
                raise ValueError("an external leg label cannot be repeated")
            t = _einsum_compact(t, lab, keep)
            lab = keep
            work[k] = (t, lab)

    for k in list(work):
        trace_repeats(k)

    while len(work) > 1:
        best = None
        keys = sorted(work)
        for i, ka in enumerate(keys):
            la = set(work[ka][1])
            for kb in keys[i + 1:]:
                lb = set(work[kb][1])
                shared = (la & lb) - set(out_labels)
                result_labels = (la | lb) - shared
                size = net.dim ** len(result_labels)
                cand = (size, 0 if shared else 1, ka, kb)
                if best is None or cand < best:
                    best = cand
        _, _, ka, kb = best
        ta, la = work.pop(ka)
        tb, lb = work.pop(kb)
        shared = (set(la) & set(lb)) - set(out_labels)
        keep = [l for l in la if l not in shared] + [l for l in lb if l not in shared and l not in la]
        t = _einsum_compact(ta, la, tb, lb, keep)
        order_log.append((names.get(ka, f"t{ka}"), names.get(kb, f"t{kb}"), f"t{next_id}"))
        work[next_id] = (t, keep)
        names[next_id] = f"t{next_id}"
        trace_repeats(next_id)
        next_id += 1

    (k, (t, lab)), = work.items()
    if sorted(lab) != sorted(out_labels):
        raise AssertionError("internal error: leftover contraction labels")
    if out_labels:
        t = _einsum_compact(t, lab, out_labels)
    else:
        t = t if np.ndim(t) == 0 else _einsum_compact(t, lab, [])
    result = t[()] if np.ndim(t) == 0 else t
    if return_order:
        return result, order_log
    return result


def pair_network(T: np.ndarray) -> NetworkGraph:
    """Two copies of an order-3 tensor joined on their last index.

    Contracts to B[a,b,c,d] = sum_i T[a,b,i] * T[c,d,i].
    """
    net = NetworkGraph(dim=T.shape[0])
    net.add_node("T1", T)
    net.add_node("T2", T)
    net.add_edge("T1", 2, "T2", 2)
    for name, (node, port) in zip("abcd", [("T1", 0), ("T1", 1), ("T2", 0), ("T2", 1)]):
        net.add_leg(name, node, port)
    return net


def triple_network(T: np.ndarray, u: np.ndarray) -> NetworkGraph:
    """Three copies of T with a vector u closing the triangle.

    Contracts to C[a,b,c,d] = sum_{i,j,k} T[a,c,j] T[b,d,k] T[i,j,k] u[i];
    its pair flattening is the matrix computed by hsss_matrix.
    """
    net = NetworkGraph(dim=T.shape[0])
    net.add_node("T1", T)
    net.add_node("T2", T)
    net.add_node("T3", T)
    net.add_node("u", u)
    net.add_edge("T1", 2, "T3", 1)
    net.add_edge("T2", 2, "T3", 2)
    net.add_edge("T3", 0, "u", 0)
    net.add_leg("a", "T1", 0)
    net.add_leg("b", "T2", 0)
    net.add_leg("c", "T1", 1)
    net.add_leg("d", "T2", 1)
    return net


def hsss_matrix(T: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Random-contraction spectral matrix for order-3 tensor decomposition.

    M[(a,b),(c,d)] = sum_{i,j,k} T[a,c,j] T[b,d,k] T[i,j,k] u[i], the pair
    flattening of the triangle network above. For T = sum_r x_r^(x)3 with
    unit x_r, rows/columns concentrate on the span of x_r (x) x_r and the
    top eigenvector exposes one component.
    """
    T = np.asarray(T, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    p = T.shape[0]
    if T.shape != (p, p, p) or u.shape != (p,):
        raise ValueError(f"shape mismatch: T {T.shape}, u {u.shape}")
    Tu = np.tensordot(u, T, axes=([0], [0]))  # [j,k]
    C = np.einsum("acj,bdk,jk->abcd", T, T, Tu, optimize=True)
    return flatten4(C)
