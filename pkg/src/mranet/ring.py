"""Nine-vertex ring contraction of the third-moment tensor.

The recovery matrix is a closed ring of nine third-moment vertices.  Four of
them keep an external frequency index (``a``, ``c``, ``b``, ``d`` in ring
order), the other five are contracted against an order-5 probe tensor.  Each
vertex contributes the factor ``That[-i_m, x_m, i_{m+1}]`` where ``i_m`` is the
incoming ring frequency and ``x_m`` the vertex's outer frequency; the zero-sum
support of the third moment forces the chain ``i_{m+1} = i_m - x_m``, so the
whole ring is parameterised by the entry frequencies ``(a, b, c, d)``, the four
free probe frequencies ``(j1..j4)`` and the starting ring frequency ``i1``.
The fifth probe frequency is determined: ``j5 = -(a+b+c+d+j1+j2+j3+j4)``.

Two execution paths are provided:

* :func:`ring_contract` — direct chain enumeration, ``O(p^9)`` multiply-adds
  with aggressive pruning of broken chains; parallel over output entries.
* :func:`precompute_G` — caches the probe-independent part of the sum as a
  ``p^4 x p^4`` table so that many probes can be evaluated against the same
  moment tensor at ``O(p^8)`` each.  The table is refused with
  :class:`~mranet.errors.BudgetError` when it would not fit the memory cap.

Both paths return the same flat ``p^2 x p^2`` complex matrix (frequency
basis), satisfying the conjugate-negation symmetry
``M[-a,-b,-c,-d] = conj(M[a,b,c,d])``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .core import check_band_dim, flatten4, freqs, negate_index
from .errors import BudgetError, SymmetryError, VerificationError
from .networks import NetworkGraph

__all__ = [
    "DEFAULT_MEM_CAP_BYTES",
    "VertexWeightTable",
    "RingPrecompute",
    "ring_contract",
    "precompute_G",
    "ring_network",
    "probe_to_fourier",
]

DEFAULT_MEM_CAP_BYTES = 2**31  # 2 GiB: admits p <= 10, refuses p >= 12


def _freq_tables(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Frequency value per index, and index per shifted frequency (-1 = invalid).

    The index table covers ``f in [-p, p]`` at offset ``f + p``, which is the
    full range a difference of two valid frequencies can reach.
    """
    freq_of = np.array(freqs(p), dtype=np.int64)
    idx_table = np.full(2 * p + 1, -1, dtype=np.int64)
    for i, f in enumerate(freq_of):
        idx_table[f + p] = i
    return freq_of, idx_table


@dataclass(frozen=True)
class VertexWeightTable:
    """Per-vertex ring factors ``W[x, i] = That[-i, x, i-x]``.

    Entries where ``i - x`` is not a valid frequency are zero.  ``p`` is the
    number of frequencies and ``num_signals`` (optional metadata) the number of
    component signals the source tensor aggregates.
    """

    p: int
    table: np.ndarray = field(repr=False)
    num_signals: int | None = None

    def __post_init__(self) -> None:
        check_band_dim(self.p)
        if self.table.shape != (self.p, self.p):
            raise ValueError(
                f"weight table must be {(self.p, self.p)}, got {self.table.shape}"
            )

    @classmethod
    def from_tensor(
        cls,
        that: np.ndarray,
        num_signals: int | None = None,
        symmetry_tol: float = 1e-9,
    ) -> "VertexWeightTable":
        """Build the table from a dense frequency-basis third-moment tensor.

        The tensor must carry the conjugate-negation symmetry
        ``conj(That[a,b,c]) = That[-a,-b,-c]`` (automatic for moments of real
        data); a larger relative defect raises :class:`SymmetryError`.
        """
        that = np.asarray(that, dtype=np.complex128)
        if that.ndim != 3 or len(set(that.shape)) != 1:
            raise ValueError(f"expected a cubic order-3 tensor, got shape {that.shape}")
        p = that.shape[0]
        check_band_dim(p)
        scale = max(np.max(np.abs(that)), 1.0)
        defect = np.max(np.abs(np.conj(that) - that[::-1, ::-1, ::-1]))
        if not defect <= symmetry_tol * scale:
            raise SymmetryError(
                "third-moment tensor lacks conjugate-negation symmetry: "
                f"defect {defect:.3e} exceeds {symmetry_tol:.1e} * scale {scale:.3e}"
            )
        freq_of, idx_table = _freq_tables(p)
        W = np.zeros((p, p), dtype=np.complex128)
        for xi in range(p):
            for ii in range(p):
                di = idx_table[freq_of[ii] - freq_of[xi] + p]
                if di >= 0:
                    W[xi, ii] = that[negate_index(p, ii), xi, di]
        return cls(p=p, table=W, num_signals=num_signals)

    @classmethod
    def from_signals(cls, theta_hats: np.ndarray) -> "VertexWeightTable":
        """Build the table from exact frequency-basis signals, shape ``(K, p)``.

        Computes the entries directly from the signals and cross-checks them
        against the tensor route on construction; disagreement raises
        :class:`VerificationError`.
        """
        theta_hats = np.atleast_2d(np.asarray(theta_hats, dtype=np.complex128))
        K, p = theta_hats.shape
        check_band_dim(p)
        freq_of, idx_table = _freq_tables(p)
        W = np.zeros((p, p), dtype=np.complex128)
        for xi in range(p):
            for ii in range(p):
                di = idx_table[freq_of[ii] - freq_of[xi] + p]
                if di >= 0:
                    W[xi, ii] = np.sum(
                        theta_hats[:, negate_index(p, ii)]
                        * theta_hats[:, xi]
                        * theta_hats[:, di]
                    )
        # Independent route: assemble the dense zero-sum moment tensor and
        # read the same entries back through from_tensor.
        support = (
            freq_of[:, None, None] + freq_of[None, :, None] + freq_of[None, None, :]
        ) == 0
        that = np.einsum("ka,kb,kc->abc", theta_hats, theta_hats, theta_hats) * support
        via_tensor = cls.from_tensor(that, num_signals=K).table
        scale = max(np.max(np.abs(W)), 1.0)
        defect = np.max(np.abs(W - via_tensor))
        if not defect <= 1e-10 * scale:
            raise VerificationError(
                f"weight-table construction routes disagree by {defect:.3e}"
            )
        return cls(p=p, table=W, num_signals=K)


def _as_correction_array(correction, p: int) -> np.ndarray | None:
    if correction is None:
        return None
    values = getattr(correction, "values", correction)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (p, p, p, p):
        raise ValueError(
            f"correction table must have shape {(p, p, p, p)}, got {values.shape}"
        )
    return values


def _check_probe_symmetry(u_hat: np.ndarray, p: int, tol: float) -> np.ndarray:
    u_hat = np.ascontiguousarray(u_hat, dtype=np.complex128)
    if u_hat.shape != (p,) * 5:
        raise ValueError(f"probe tensor must have shape {(p,) * 5}, got {u_hat.shape}")
    flipped = u_hat[::-1, ::-1, ::-1, ::-1, ::-1]
    scale = max(np.max(np.abs(u_hat)), 1.0)
    defect = np.max(np.abs(np.conj(u_hat) - flipped))
    if not defect <= tol * scale:
        raise SymmetryError(
            "probe tensor lacks conjugate-negation symmetry: "
            f"defect {defect:.3e} exceeds {tol:.1e} * scale {scale:.3e}"
        )
    return u_hat


def probe_to_fourier(u: np.ndarray) -> np.ndarray:
    """Frequency transform of a real order-5 probe tensor, one mode at a time."""
    from .core import tensor_to_fourier

    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 5 or len(set(u.shape)) != 1:
        raise ValueError(f"expected a real order-5 cubic tensor, got shape {u.shape}")
    return tensor_to_fourier(u)


@njit(cache=True, parallel=True)
def _ring_kernel(W, Uneg, freq_of, idx_table, smask, a_count, p):  # pragma: no cover
    out = np.zeros((p, p, p, p), dtype=np.complex128)
    n_outer = a_count * p * p * p
    for flat in prange(n_outer):
        a_i = flat // (p * p * p)
        rem = flat - a_i * p * p * p
        b_i = rem // (p * p)
        rem -= b_i * p * p
        c_i = rem // p
        d_i = rem - c_i * p
        if smask[a_i, b_i, c_i, d_i] == 0:
            continue
        fa = freq_of[a_i]
        fb = freq_of[b_i]
        fc = freq_of[c_i]
        fd = freq_of[d_i]
        acc = complex(0.0, 0.0)
        for i1 in range(p):
            w1 = W[a_i, i1]
            if w1 == 0:
                continue
            i2 = idx_table[freq_of[i1] - fa + p]
            if i2 < 0:
                continue
            for j1 in range(p):
                w2 = w1 * W[j1, i2]
                if w2 == 0:
                    continue
                i3 = idx_table[freq_of[i2] - freq_of[j1] + p]
                if i3 < 0:
                    continue
                w3 = w2 * W[c_i, i3]
                if w3 == 0:
                    continue
                i4 = idx_table[freq_of[i3] - fc + p]
                if i4 < 0:
                    continue
                for j2 in range(p):
                    w4 = w3 * W[j2, i4]
                    if w4 == 0:
                        continue
                    i5 = idx_table[freq_of[i4] - freq_of[j2] + p]
                    if i5 < 0:
                        continue
                    w5 = w4 * W[b_i, i5]
                    if w5 == 0:
                        continue
                    i6 = idx_table[freq_of[i5] - fb + p]
                    if i6 < 0:
                        continue
                    for j3 in range(p):
                        w6 = w5 * W[j3, i6]
                        if w6 == 0:
                            continue
                        i7 = idx_table[freq_of[i6] - freq_of[j3] + p]
                        if i7 < 0:
                            continue
                        w7 = w6 * W[d_i, i7]
                        if w7 == 0:
                            continue
                        i8 = idx_table[freq_of[i7] - fd + p]
                        if i8 < 0:
                            continue
                        for j4 in range(p):
                            w8 = w7 * W[j4, i8]
                            if w8 == 0:
                                continue
                            i9 = idx_table[freq_of[i8] - freq_of[j4] + p]
                            if i9 < 0:
                                continue
                            j5 = idx_table[freq_of[i9] - freq_of[i1] + p]
                            if j5 < 0:
                                continue
                            w9 = w8 * W[j5, i9]
                            if w9 == 0:
                                continue
                            acc += w9 * Uneg[j1, j2, j3, j4, j5]
        out[a_i, b_i, c_i, d_i] = acc
    return out


def _mirror_half(core_half: np.ndarray) -> np.ndarray:
    """Fill ``a``-indices in the upper half by conjugate negation."""
    return core_half + np.conj(core_half[::-1, ::-1, ::-1, ::-1])


def ring_contract(
    weights: VertexWeightTable,
    u_hat: np.ndarray,
    correction=None,
    symmetry_tol: float = 1e-9,
) -> np.ndarray:
    """Contract the nine-vertex ring against an order-5 frequency-basis probe.

    ``correction`` is an optional entrywise real factor of shape
    ``(p, p, p, p)`` (or an object with such a ``.values`` array); entries where
    it vanishes are skipped outright.  It must itself be negation symmetric for
    the output symmetry to hold — the canonical table is.  Returns the flat
    ``p^2 x p^2`` complex matrix, linear in ``u_hat``.

    For ``p <= 4`` the output is identically zero: chain indices move by at
    most ``p/2`` per step, which makes the transition graph bipartite, and the
    closing probe frequency of every chain lands on ``0`` or out of band.
    ``p = 6`` is the narrowest band with surviving chains.
    """
    p = weights.p
    u_hat = _check_probe_symmetry(u_hat, p, symmetry_tol)
    S = _as_correction_array(correction, p)
    freq_of, idx_table = _freq_tables(p)
    Uneg = np.ascontiguousarray(u_hat[::-1, ::-1, ::-1, ::-1, ::-1])
    if S is None:
        smask = np.ones((p, p, p, p), dtype=np.uint8)
    else:
        smask = (S != 0).astype(np.uint8)
    core_half = _ring_kernel(
        np.ascontiguousarray(weights.table),
        Uneg,
        freq_of,
        idx_table,
        smask,
        p // 2,
        p,
    )
    core = _mirror_half(core_half)
    if S is not None:
        core = core * S
    return flatten4(core)


@njit(cache=True, parallel=True)
def _g_kernel(W, freq_of, idx_table, rpos, cpos, p):  # pragma: no cover
    n4 = p**4
    G = np.zeros((n4, n4), dtype=np.complex128)
    for flat in prange(n4):
        a_i = flat // (p * p * p)
        rem = flat - a_i * p * p * p
        b_i = rem // (p * p)
        rem -= b_i * p * p
        c_i = rem // p
        d_i = rem - c_i * p
        row = rpos[flat]
        fa = freq_of[a_i]
        fb = freq_of[b_i]
        fc = freq_of[c_i]
        fd = freq_of[d_i]
        for i1 in range(p):
            w1 = W[a_i, i1]
            if w1 == 0:
                continue
            i2 = idx_table[freq_of[i1] - fa + p]
            if i2 < 0:
                continue
            for j1 in range(p):
                w2 = w1 * W[j1, i2]
                if w2 == 0:
                    continue
                i3 = idx_table[freq_of[i2] - freq_of[j1] + p]
                if i3 < 0:
                    continue
                w3 = w2 * W[c_i, i3]
                if w3 == 0:
                    continue
                i4 = idx_table[freq_of[i3] - fc + p]
                if i4 < 0:
                    continue
                for j2 in range(p):
                    w4 = w3 * W[j2, i4]
                    if w4 == 0:
                        continue
                    i5 = idx_table[freq_of[i4] - freq_of[j2] + p]
                    if i5 < 0:
                        continue
                    w5 = w4 * W[b_i, i5]
                    if w5 == 0:
                        continue
                    i6 = idx_table[freq_of[i5] - fb + p]
                    if i6 < 0:
                        continue
                    for j3 in range(p):
                        w6 = w5 * W[j3, i6]
                        if w6 == 0:
                            continue
                        i7 = idx_table[freq_of[i6] - freq_of[j3] + p]
                        if i7 < 0:
                            continue
                        w7 = w6 * W[d_i, i7]
                        if w7 == 0:
                            continue
                        i8 = idx_table[freq_of[i7] - fd + p]
                        if i8 < 0:
                            continue
                        for j4 in range(p):
                            w8 = w7 * W[j4, i8]
                            if w8 == 0:
                                continue
                            i9 = idx_table[freq_of[i8] - freq_of[j4] + p]
                            if i9 < 0:
                                continue
                            j5 = idx_table[freq_of[i9] - freq_of[i1] + p]
                            if j5 < 0:
                                continue
                            w9 = w8 * W[j5, i9]
                            if w9 == 0:
                                continue
                            t = ((j1 * p + j2) * p + j3) * p + j4
                            G[row, cpos[t]] += w9
    return G


def _sum_groups(
    freq_of: np.ndarray, p: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Group flat 4-tuples of frequency indices by their frequency sum.

    Returns (position of each flat tuple in the sorted layout, sorted flat
    tuple ids, group boundary offsets, distinct sums per group) with groups
    ordered by increasing sum.
    """
    n4 = p**4
    grids = np.meshgrid(freq_of, freq_of, freq_of, freq_of, indexing="ij")
    sums = (grids[0] + grids[1] + grids[2] + grids[3]).reshape(n4)
    order = np.argsort(sums, kind="stable")
    pos = np.empty(n4, dtype=np.int64)
    pos[order] = np.arange(n4)
    sorted_sums = sums[order]
    boundaries = np.flatnonzero(np.diff(sorted_sums)) + 1
    offsets = np.concatenate(([0], boundaries, [n4]))
    group_sums = sorted_sums[offsets[:-1]]
    return pos, order, offsets, group_sums


@dataclass(frozen=True)
class RingPrecompute:
    """Probe-independent ring table, rows/columns grouped by frequency sum."""

    p: int
    table: np.ndarray = field(repr=False)  # (p^4, p^4) complex, sorted layout
    row_pos: np.ndarray = field(repr=False)
    row_offsets: np.ndarray = field(repr=False)
    row_sums: np.ndarray = field(repr=False)  # distinct a+b+c+d per row group
    col_order: np.ndarray = field(repr=False)
    col_offsets: np.ndarray = field(repr=False)
    col_sums: np.ndarray = field(repr=False)  # distinct j1+..+j4 per col group

    @property
    def nonzero_count(self) -> int:
        return int(np.count_nonzero(self.table))

    def contract(
        self,
        u_hat: np.ndarray,
        correction=None,
        symmetry_tol: float = 1e-9,
    ) -> np.ndarray:
        """Evaluate the ring against a probe using the cached table."""
        p = self.p
        u_hat = _check_probe_symmetry(u_hat, p, symmetry_tol)
        S = _as_correction_array(correction, p)
        freq_of, idx_table = _freq_tables(p)
        Uneg = np.ascontiguousarray(u_hat[::-1, ::-1, ::-1, ::-1, ::-1])
        Uneg_flat = Uneg.reshape(p**4, p)
        out_sorted = np.zeros(p**4, dtype=np.complex128)
        for rg in range(len(self.row_sums)):
            r0, r1 = self.row_offsets[rg], self.row_offsets[rg + 1]
            w = self.row_sums[rg]
            for cg in range(len(self.col_sums)):
                s = self.col_sums[cg]
                j5 = idx_table[-(w + s) + p] if -p <= -(w + s) <= p else -1
                if j5 < 0:
                    continue
                c0, c1 = self.col_offsets[cg], self.col_offsets[cg + 1]
                probe_vec = Uneg_flat[self.col_order[c0:c1], j5]
                out_sorted[r0:r1] += self.table[r0:r1, c0:c1] @ probe_vec
        core = out_sorted[self.row_pos].reshape(p, p, p, p)
        if S is not None:
            core = core * S
        return flatten4(core)


def precompute_G(
    weights: VertexWeightTable,
    mem_cap_bytes: int = DEFAULT_MEM_CAP_BYTES,
) -> RingPrecompute:
    """Cache the probe-independent ring sums for repeated probe evaluation.

    Raises :class:`BudgetError` before allocating anything when the ``p^8``
    complex table would exceed ``mem_cap_bytes``.
    """
    p = weights.p
    need = 16 * p**8
    if need > mem_cap_bytes:
        raise BudgetError(
            f"ring precompute needs {need:,} bytes for p={p} "
            f"(p^8 complex entries) but the memory cap is {mem_cap_bytes:,} bytes"
        )
    freq_of, idx_table = _freq_tables(p)
    pos, order, offsets, group_sums = _sum_groups(freq_of, p)
    row_pos, row_offsets, row_sums = pos, offsets, group_sums
    col_order, col_offsets, col_sums = order, offsets, group_sums
    G = _g_kernel(
        np.ascontiguousarray(weights.table),
        freq_of,
        idx_table,
        row_pos,
        pos,
        p,
    )
    return RingPrecompute(
        p=p,
        table=G,
        row_pos=row_pos,
        row_offsets=row_offsets,
        row_sums=row_sums,
        col_order=col_order,
        col_offsets=col_offsets,
        col_sums=col_sums,
    )


def ring_network(that: np.ndarray, u_hat: np.ndarray) -> NetworkGraph:
    """The nine-vertex ring as an explicit signed graph, probe node included.

    Vertex ``m`` has axes (0: negated incoming ring frequency, 1: outer
    frequency, 2: outgoing ring frequency); ring edges and probe attachments
    pair ``i`` with ``-i``, so all edges are dotted.  Output legs are ordered
    ``(a, b, c, d)``; outer positions around the ring are ``a, j1, c, j2, b,
    j3, d, j4, j5``.
    """
    that = np.asarray(that, dtype=np.complex128)
    p = that.shape[0]
    u_hat = np.asarray(u_hat, dtype=np.complex128)
    if u_hat.shape != (p,) * 5:
        raise ValueError(f"probe tensor must have shape {(p,) * 5}, got {u_hat.shape}")
    net = NetworkGraph(dim=p, signed=True)
    for m in range(1, 10):
        net.add_node(f"T{m}", that)
    net.add_node("U", u_hat)
    for m in range(1, 10):
        net.add_edge(f"T{m}", 2, f"T{m % 9 + 1}", 0, dotted=True)
    for slot, m in enumerate((2, 4, 6, 8, 9)):
        net.add_edge(f"T{m}", 1, "U", slot, dotted=True)
    net.add_leg("a", "T1", 1)
    net.add_leg("b", "T5", 1)
    net.add_leg("c", "T3", 1)
    net.add_leg("d", "T7", 1)
    return net
