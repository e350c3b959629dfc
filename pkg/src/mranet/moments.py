"""Exact frequency-domain moment tensors, observation sampling, estimation.

Signals are real length-``p`` vectors with no zero frequency; their moments
under a uniform random rotation live on the zero-frequency-sum support.  The
internal convention for exact moments is the plain SUM over component signals
(the algorithm consumes that scaling); the mean is available through the
``normalization`` flag, and empirical estimates (which estimate the mean) are
rescaled by callers that need the sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core import (
    apply_rotation,
    check_band_dim,
    freqs,
    from_fourier,
    to_fourier,
)
from .errors import SymmetryError

__all__ = [
    "SignalSet",
    "ZeroSumTensor3",
    "ObservationBatch",
    "EmpiricalMoment",
    "zero_sum_support",
    "exact_moment",
    "sample_observations",
    "empirical_third_moment",
    "moment_error",
]

_NORMALIZATIONS = ("sum_over_K", "mean_over_K")


@lru_cache(maxsize=None)
def zero_sum_support(p: int, d: int) -> tuple[tuple[int, ...], ...]:
    """All order-``d`` frequency tuples summing to zero (lexicographic order)."""
    check_band_dim(p)
    if d < 1 or d > 3:
        raise ValueError(f"moment order must be 1, 2 or 3, got {d}")
    f = freqs(p)
    out = []
    if d == 1:
        return ()  # no frequency is zero
    if d == 2:
        for a in f:
            out.append((int(a), int(-a)))
        return tuple(out)
    fset = set(int(x) for x in f)
    for a in f:
        for b in f:
            c = -int(a) - int(b)
            if c in fset:
                out.append((int(a), int(b), c))
    return tuple(out)


@dataclass(frozen=True)
class SignalSet:
    """A bundle of frequency-basis signals, one row per component."""

    p: int
    signals: np.ndarray = field(repr=False)  # (K, p) complex128

    def __post_init__(self) -> None:
        check_band_dim(self.p)
        sig = np.atleast_2d(np.asarray(self.signals, dtype=np.complex128))
        if sig.shape[1] != self.p:
            raise ValueError(f"signals must have {self.p} columns, got {sig.shape}")
        object.__setattr__(self, "signals", sig)
        scale = max(np.max(np.abs(sig)), 1.0)
        defect = np.max(np.abs(np.conj(sig) - sig[:, ::-1]))
        if not defect <= 1e-9 * scale:
            raise SymmetryError(
                f"signals lack conjugate-negation symmetry (defect {defect:.3e})"
            )

    @property
    def K(self) -> int:
        return self.signals.shape[0]

    @classmethod
    def from_real(cls, thetas: np.ndarray) -> "SignalSet":
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        return cls(p=thetas.shape[1], signals=to_fourier(thetas))

    @classmethod
    def random(cls, p: int, K: int, rng: np.random.Generator) -> "SignalSet":
        """Independent N(0, I/p) real signals in the frequency basis."""
        return cls.from_real(rng.normal(scale=1.0 / np.sqrt(p), size=(K, p)))

    def real_signals(self) -> np.ndarray:
        return from_fourier(self.signals)


@dataclass(frozen=True)
class ZeroSumTensor3:
    """Order-3 tensor supported on frequency triples summing to zero."""

    p: int
    entries: dict[tuple[int, int, int], complex] = field(repr=False)

    def __post_init__(self) -> None:
        check_band_dim(self.p)
        valid = set(zero_sum_support(self.p, 3))
        for key in self.entries:
            if key not in valid:
                raise ValueError(f"entry {key} is off the zero-sum support")

    @classmethod
    def from_signals(
        cls, signals: SignalSet, normalization: str = "sum_over_K"
    ) -> "ZeroSumTensor3":
        dense = exact_moment(signals, d=3, normalization=normalization)
        return cls.from_dense(dense, tol=0.0)

    @classmethod
    def from_dense(cls, that: np.ndarray, tol: float = 1e-9) -> "ZeroSumTensor3":
        """Wrap a dense frequency tensor; rejects off-support or asymmetric input.

        ``tol`` is relative to the largest entry; it bounds both the permitted
        off-support mass and the conjugate-negation / permutation defects.
        """
        that = np.asarray(that, dtype=np.complex128)
        if that.ndim != 3 or len(set(that.shape)) != 1:
            raise ValueError(f"expected a cubic order-3 tensor, got {that.shape}")
        p = that.shape[0]
        check_band_dim(p)
        f = np.array(freqs(p))
        mask = (f[:, None, None] + f[None, :, None] + f[None, None, :]) == 0
        scale = max(np.max(np.abs(that)), 1.0)
        off = np.max(np.abs(that * ~mask)) if (~mask).any() else 0.0
        if not off <= tol * scale:
            raise ValueError(
                f"off-support mass {off:.3e} exceeds tolerance {tol:.1e} * {scale:.3e}"
            )
        conj_defect = np.max(np.abs(np.conj(that) - that[::-1, ::-1, ::-1]))
        perm_defect = max(
            np.max(np.abs(that - np.transpose(that, perm)))
            for perm in ((0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))
        )
        if not conj_defect <= max(tol, 1e-12) * scale:
            raise SymmetryError(
                f"conjugate-negation defect {conj_defect:.3e} too large"
            )
        if not perm_defect <= max(tol, 1e-12) * scale:
            raise SymmetryError(f"permutation defect {perm_defect:.3e} too large")
        idx_of = {int(v): i for i, v in enumerate(f)}
        entries = {}
        for key in zero_sum_support(p, 3):
            val = complex(that[idx_of[key[0]], idx_of[key[1]], idx_of[key[2]]])
            if val != 0:
                entries[key] = val
        return cls(p=p, entries=entries)

    @property
    def support(self) -> tuple[tuple[int, int, int], ...]:
        return zero_sum_support(self.p, 3)

    def to_dense(self) -> np.ndarray:
        p = self.p
        f = list(freqs(p))
        idx_of = {int(v): i for i, v in enumerate(f)}
        out = np.zeros((p, p, p), dtype=np.complex128)
        for (a, b, c), val in self.entries.items():
            out[idx_of[a], idx_of[b], idx_of[c]] = val
        return out

    def __len__(self) -> int:
        return len(self.entries)


def exact_moment(
    signals: SignalSet, d: int, normalization: str = "sum_over_K"
) -> np.ndarray:
    """Dense order-``d`` frequency-basis moment of the signal set.

    Entry ``(j1..jd)`` is ``sum_k prod_m sig[k, j_m]`` on the zero-sum support
    and zero elsewhere; ``mean_over_K`` divides by the number of signals.
    """
    if normalization not in _NORMALIZATIONS:
        raise ValueError(
            f"normalization must be one of {_NORMALIZATIONS}, got {normalization!r}"
        )
    if d < 1 or d > 3:
        raise ValueError(f"moment order must be 1, 2 or 3, got {d}")
    p = signals.p
    sig = signals.signals
    f = np.array(freqs(p))
    if d == 1:
        out = np.zeros(p, dtype=np.complex128)
    elif d == 2:
        mask = (f[:, None] + f[None, :]) == 0
        out = np.einsum("ka,kb->ab", sig, sig) * mask
    else:
        mask = (f[:, None, None] + f[None, :, None] + f[None, None, :]) == 0
        out = np.einsum("ka,kb,kc->abc", sig, sig, sig) * mask
    if normalization == "mean_over_K":
        out = out / signals.K
    return out


@dataclass(frozen=True)
class ObservationBatch:
    """Real-basis observations with optional generation metadata."""

    y: np.ndarray = field(repr=False)  # (n, p) float64
    sigma: float = 0.0
    rotations: np.ndarray | None = field(default=None, repr=False)
    labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        y = np.atleast_2d(np.asarray(self.y, dtype=np.float64))
        if not np.all(np.isfinite(y)):
            raise ValueError("observations contain non-finite entries")
        check_band_dim(y.shape[1])
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.y.shape[1]


def sample_observations(
    signals: SignalSet,
    sigma: float,
    n: int,
    rng: np.random.Generator,
) -> ObservationBatch:
    """Draw ``y_i = g_i . theta^{k_i} + xi_i`` with uniform rotation and label.

    Rotations act diagonally in the frequency basis; the draw order is fixed
    (angles, then labels, then noise) so a given generator state yields a
    bit-reproducible batch.
    """
    if sigma < 0:
        raise ValueError(f"noise level must be nonnegative, got {sigma}")
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    p, K = signals.p, signals.K
    g = rng.uniform(0.0, 2.0 * np.pi, size=n)
    k = rng.integers(0, K, size=n)
    f = np.array(freqs(signals.p))
    phases = np.exp(1j * f[None, :] * g[:, None])
    clean_hat = signals.signals[k] * phases
    clean = from_fourier(clean_hat)
    noise = rng.normal(scale=sigma, size=(n, p)) if sigma > 0 else np.zeros((n, p))
    return ObservationBatch(y=clean + noise, sigma=sigma, rotations=g, labels=k)


@dataclass(frozen=True)
class EmpiricalMoment:
    """Third-moment estimate with support diagnostics.

    ``fourier_full`` is the raw mean of frequency-basis outer cubes;
    ``support`` restricts it to the zero-sum triples (where the population
    moment lives); ``real_full`` is the same estimate in the real basis,
    accumulated independently; ``off_support_max``/``off_support_fro`` measure
    the mass the estimator leaves off the support (vanishes as n grows).
    """

    n: int
    sigma: float
    fourier_full: np.ndarray = field(repr=False)
    support: ZeroSumTensor3 = field(repr=False)
    real_full: np.ndarray = field(repr=False)
    off_support_max: float = 0.0
    off_support_fro: float = 0.0


def empirical_third_moment(
    batch: ObservationBatch, chunk_size: int = 4096
) -> EmpiricalMoment:
    """Mean of ``y_i``-outer-cubes in both bases, with off-support diagnostics.

    Estimates the MEAN over hidden labels; multiply by the number of signal
    components to compare against the sum-normalized exact moment.  No noise
    debiasing is applied: the first moment vanishes identically (there is no
    zero frequency), so the third moment has no noise-proportional bias.
    """
    if batch.n < 1:
        raise ValueError("cannot estimate moments from an empty batch")
    p, n = batch.p, batch.n
    acc_hat = np.zeros((p, p, p), dtype=np.complex128)
    acc_real = np.zeros((p, p, p), dtype=np.float64)
    for start in range(0, n, chunk_size):
        ys = batch.y[start : start + chunk_size]
        yh = to_fourier(ys)
        acc_hat += np.einsum("ni,nj,nk->ijk", yh, yh, yh, optimize=True)
        acc_real += np.einsum("ni,nj,nk->ijk", ys, ys, ys, optimize=True)
    est_hat = acc_hat / n
    est_real = acc_real / n
    f = np.array(freqs(p))
    mask = (f[:, None, None] + f[None, :, None] + f[None, None, :]) == 0
    off = est_hat * ~mask
    support = ZeroSumTensor3.from_dense(est_hat * mask, tol=1e-7)
    return EmpiricalMoment(
        n=n,
        sigma=batch.sigma,
        fourier_full=est_hat,
        support=support,
        real_full=est_real,
        off_support_max=float(np.max(np.abs(off))),
        off_support_fro=float(np.linalg.norm(off)),
    )


def moment_error(est: np.ndarray, exact: np.ndarray) -> float:
    """Largest absolute entrywise deviation between two real-basis tensors."""
    est = np.asarray(est, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    if est.shape != exact.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {exact.shape}")
    return float(np.max(np.abs(est - exact)))
