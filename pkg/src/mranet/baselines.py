"""Closed-form and spectral comparison methods.

Two families live here.  ``frequency_marching`` inverts exact second and
third moments of a single signal in closed form: magnitudes come off the
power spectrum and phases are chained up the frequencies one product at a
time.  The ``pca_*`` functions are the four classical spectral estimators
for rank-one order-3 tensor recovery (unfolding, squared-slice covariance,
partial trace, and the diagonal-contraction initialization); each has a
direct dense implementation here and an equivalent tensor-network graph
(``*_network``) contracted by the generic executor, kept as mutual oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import flatten4, freq_to_index, symmetrize
from .networks import NetworkGraph
from .spectral import _dominant_pair

__all__ = [
    "frequency_marching",
    "PcaInstance",
    "pca_unfolding",
    "pca_spectral_sos",
    "pca_partial_trace",
    "pca_homotopy_init",
    "unfolding_matrix",
    "sos_matrix",
    "partial_trace_matrix",
    "homotopy_vector",
    "unfolding_network",
    "sos_network",
    "partial_trace_network",
    "homotopy_network",
]


def frequency_marching(that2: np.ndarray, that3: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Invert single-signal moments in closed form, marching up frequencies.

    Magnitudes are square roots of the power spectrum (the anti-diagonal of
    the second moment).  Phases fix the orbit representative with zero phase
    at frequency 1, read the frequency-2 phase from the (-1,-1,2) third-moment
    entry, and then each next phase from the (-1,-(j-1),j) entry, since that
    product telescopes to one new unknown per step.  Returns the recovered
    signal's frequency coordinates; the output lies in the true orbit when
    the inputs are exact single-signal moments.

    Raises ValueError naming the frequency when a power-spectrum entry falls
    below ``tol`` — the phase chain has no information to march through a
    vanishing coefficient.
    """
    that2 = np.asarray(that2, dtype=np.complex128)
    that3 = np.asarray(that3, dtype=np.complex128)
    p = that2.shape[0]
    if that2.shape != (p, p) or that3.shape != (p, p, p):
        raise ValueError(
            f"expected (p, p) and (p, p, p) moments, got {that2.shape} and {that3.shape}"
        )

    def fi(f: int) -> int:
        return freq_to_index(p, f)

    half = p // 2
    mags = {}
    for j in range(1, half + 1):
        power = float(that2[fi(j), fi(-j)].real)
        if power < tol:
            raise ValueError(
                f"power spectrum vanishes at frequency {j} "
                f"(entry {power:.3e} below tolerance {tol:.1e})"
            )
        mags[j] = np.sqrt(power)

    phases = {1: 0.0}
    if half >= 2:
        phases[2] = float(np.angle(that3[fi(-1), fi(-1), fi(2)])) + 2 * phases[1]
    for j in range(3, half + 1):
        phases[j] = (
            float(np.angle(that3[fi(-1), fi(-(j - 1)), fi(j)]))
            + phases[1]
            + phases[j - 1]
        )

    out = np.zeros(p, dtype=np.complex128)
    for j in range(1, half + 1):
        value = mags[j] * np.exp(1j * phases[j])
        out[fi(j)] = value
        out[fi(-j)] = np.conj(value)
    return out


@dataclass(frozen=True)
class PcaInstance:
    """A planted rank-one tensor recovery problem.

    ``tensor`` is ``lam * x^{x3} + W`` for a unit vector ``x`` and (for the
    random factory) i.i.d. standard Gaussian noise ``W``.
    """

    p: int
    lam: float
    x: np.ndarray = field(repr=False)
    tensor: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=np.float64)
        t = np.asarray(self.tensor, dtype=np.float64)
        if x.shape != (self.p,) or t.shape != (self.p,) * 3:
            raise ValueError(
                f"shape mismatch: x {x.shape}, tensor {t.shape} for p={self.p}"
            )
        if abs(float(np.linalg.norm(x)) - 1.0) > 1e-9:
            raise ValueError("planted vector must be unit norm")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "tensor", t)

    @classmethod
    def random(cls, p: int, lam: float, rng: np.random.Generator) -> "PcaInstance":
        x = rng.standard_normal(p)
        x /= np.linalg.norm(x)
        signal = lam * np.einsum("a,b,c->abc", x, x, x)
        return cls(p=p, lam=lam, x=x, tensor=signal + rng.standard_normal((p, p, p)))

    @classmethod
    def noiseless(cls, p: int, lam: float, x: np.ndarray) -> "PcaInstance":
        x = np.asarray(x, dtype=np.float64)
        x = x / np.linalg.norm(x)
        return cls(p=p, lam=lam, x=x, tensor=lam * np.einsum("a,b,c->abc", x, x, x))


def _as_order3(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    p = T.shape[0]
    if T.shape != (p, p, p):
        raise ValueError(f"expected an order-3 cube, got shape {T.shape}")
    return T


def unfolding_matrix(T: np.ndarray) -> np.ndarray:
    """Gram matrix of the mode-1 unfolding: ``sum_{jk} T[a,j,k] T[b,j,k]``."""
    T = _as_order3(T)
    flat = T.reshape(T.shape[0], -1)
    return flat @ flat.T


def sos_matrix(T: np.ndarray) -> np.ndarray:
    """Slice covariance ``sum_i vec(T_i) vec(T_i)^T`` as a ``p^2 x p^2`` matrix."""
    T = _as_order3(T)
    return flatten4(np.einsum("ijk,ilm->jklm", T, T, optimize=True))


def partial_trace_matrix(T: np.ndarray) -> np.ndarray:
    """Trace-weighted slice sum ``sum_i (sum_j T[i,j,j]) T_i``."""
    T = _as_order3(T)
    traces = np.einsum("ijj->i", T)
    return np.einsum("i,iab->ab", traces, T)


def homotopy_vector(T: np.ndarray) -> np.ndarray:
    """Diagonal contraction ``z_j = sum_i T[i,i,j]``."""
    T = _as_order3(T)
    return np.einsum("iij->j", T)


def pca_unfolding(T: np.ndarray) -> np.ndarray:
    """Top eigenvector of the unfolding Gram matrix (unit, sign-arbitrary)."""
    _, v, _, _ = _dominant_pair(unfolding_matrix(T))
    return v


def pca_spectral_sos(T: np.ndarray) -> np.ndarray:
    """Two-stage extraction from the slice covariance: its top eigenvector
    reshapes to (approximately) the planted ``x x^T``, whose own leading
    eigenvector is the estimate."""
    T = _as_order3(T)
    p = T.shape[0]
    M = sos_matrix(T)
    _, v, _, _ = _dominant_pair(symmetrize(M)[0])
    V, _ = symmetrize(v.reshape(p, p))
    _, est, _, _ = _dominant_pair(V)
    return est


def pca_partial_trace(T: np.ndarray) -> np.ndarray:
    """Largest-magnitude eigenvector of the symmetrized trace-weighted sum."""
    M, _ = symmetrize(partial_trace_matrix(T))
    _, v, _, _ = _dominant_pair(M)
    return v


def pca_homotopy_init(T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal-contraction initialization: ``(z, z/||z||)``; a zero
    contraction returns a zero vector in both slots."""
    z = homotopy_vector(T)
    norm = float(np.linalg.norm(z))
    return z, (z / norm if norm > 0 else np.zeros_like(z))


def unfolding_network(T: np.ndarray) -> NetworkGraph:
    """Two tensor copies joined on their last two axes: the unfolding Gram."""
    T = _as_order3(T)
    net = NetworkGraph(dim=T.shape[0])
    net.add_node("T1", T)
    net.add_node("T2", T)
    net.add_edge("T1", 1, "T2", 1)
    net.add_edge("T1", 2, "T2", 2)
    net.add_leg("a", "T1", 0)
    net.add_leg("b", "T2", 0)
    return net


def sos_network(T: np.ndarray) -> NetworkGraph:
    """Two copies joined on the slice axis; contracts to the order-4 slice
    covariance whose pair flattening is ``sos_matrix``."""
    T = _as_order3(T)
    net = NetworkGraph(dim=T.shape[0])
    net.add_node("T1", T)
    net.add_node("T2", T)
    net.add_edge("T1", 0, "T2", 0)
    net.add_leg("a", "T1", 1)
    net.add_leg("b", "T1", 2)
    net.add_leg("c", "T2", 1)
    net.add_leg("d", "T2", 2)
    return net


def partial_trace_network(T: np.ndarray) -> NetworkGraph:
    """One traced copy (self-loop on its last two axes) weighting a second."""
    T = _as_order3(T)
    net = NetworkGraph(dim=T.shape[0])
    net.add_node("T1", T)
    net.add_node("T2", T)
    net.add_edge("T1", 1, "T1", 2)
    net.add_edge("T1", 0, "T2", 0)
    net.add_leg("a", "T2", 1)
    net.add_leg("b", "T2", 2)
    return net


def homotopy_network(T: np.ndarray) -> NetworkGraph:
    """A single copy with its first two axes traced; one free leg."""
    T = _as_order3(T)
    net = NetworkGraph(dim=T.shape[0])
    net.add_node("T1", T)
    net.add_edge("T1", 0, "T1", 1)
    net.add_leg("j", "T1", 2)
    return net
