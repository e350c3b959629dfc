"""Band-limited signals on the circle: frequency indexing and basics.

A signal with p real degrees of freedom (p even) is indexed by the
frequency set {-p/2, ..., -1, 1, ..., p/2}; there is no zero frequency.
Arrays use the canonical order (-p/2, ..., -1, 1, ..., p/2) throughout
the package, so negating a frequency reverses the array index
(idx(-f) == p - 1 - idx(f)).

The complex representation pairs the coordinates at +-j,

    xhat_j  = (x_j + 1j * x_{-j}) / sqrt(2),    j > 0,
    xhat_-j = conj(xhat_j),

which makes the unit-magnitude frequency representation of a rotation by
angle g act diagonally: (g . xhat)_j = exp(1j * j * g) * xhat_j. The
change of basis is the unitary matrix returned by fourier_matrix(), with
x = fourier_matrix(p) @ xhat. Its transpose-times-itself is exactly the
frequency-negation permutation, which is why contractions between a
frequency-domain tensor and a real-domain tensor pair index i with -i.

This module also carries the two matrix helpers the spectral pipeline
needs: flattening an order-4 tensor into a matrix of index pairs, and a
leading-eigenpair solver (shifted power iteration).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import ConvergenceError, SymmetryError
from .rng import substream


def check_band_dim(p: int) -> int:
    p = int(p)
    if p < 2 or p % 2 != 0:
        raise ValueError(f"number of frequencies must be even and >= 2, got {p}")
    return p


def freqs(p: int) -> np.ndarray:
    """Frequency values in canonical order: -p/2..-1, 1..p/2."""
    check_band_dim(p)
    half = p // 2
    return np.concatenate([np.arange(-half, 0), np.arange(1, half + 1)])


def freq_to_index(p: int, f: int) -> int:
    """Array index of frequency f under the canonical order."""
    half = p // 2
    if f == 0 or abs(f) > half:
        raise ValueError(f"frequency {f} outside +-[1..{half}]")
    return f + half if f < 0 else f + half - 1


def index_to_freq(p: int, i: int) -> int:
    half = p // 2
    f = i - half
    return f if f < 0 else f + 1


def negate_index(p: int, i):
    """Index of the negated frequency; negation reverses canonical order."""
    return p - 1 - i


def negate_tensor(t: np.ndarray) -> np.ndarray:
    """View of a frequency-indexed tensor evaluated at negated indices."""
    return t[tuple(slice(None, None, -1) for _ in range(t.ndim))]


@lru_cache(maxsize=None)
def fourier_matrix(p: int) -> np.ndarray:
    """Unitary change of basis: real coords = fourier_matrix(p) @ complex coords.

    Column -j is the conjugate of column j, so conjugating the matrix is
    the same as permuting its columns by frequency negation.
    """
    check_band_dim(p)
    half = p // 2
    D = np.zeros((p, p), dtype=np.complex128)
    r = 1.0 / np.sqrt(2.0)
    for j in range(1, half + 1):
        pj, nj = freq_to_index(p, j), freq_to_index(p, -j)
        D[pj, pj] = r
        D[pj, nj] = r
        D[nj, pj] = -1j * r
        D[nj, nj] = 1j * r
    D.setflags(write=False)
    return D


def to_fourier(x: np.ndarray) -> np.ndarray:
    """Complex frequency coordinates of real signal(s); acts on the last axis."""
    x = np.asarray(x, dtype=np.float64)
    D = fourier_matrix(x.shape[-1])
    return x @ np.conj(D)


def conj_symmetry_defect(xhat: np.ndarray) -> float:
    """Max deviation from the required symmetry xhat_{-j} == conj(xhat_j)."""
    xhat = np.asarray(xhat)
    return float(np.max(np.abs(xhat - np.conj(negate_tensor(xhat)))))


def from_fourier(xhat: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Real signal from complex frequency coordinates (last axis).

    Raises SymmetryError if the input is not conjugate-symmetric under
    frequency negation within tol (relative to the input scale), since a
    non-symmetric input has no real preimage.
    """
    xhat = np.asarray(xhat, dtype=np.complex128)
    p = xhat.shape[-1]
    scale = max(float(np.max(np.abs(xhat))), 1e-300)
    x = xhat @ fourier_matrix(p).T
    resid = float(np.max(np.abs(x.imag)))
    if resid > tol * scale:
        raise SymmetryError(
            f"frequency coordinates are not conjugate-symmetric: "
            f"imaginary residue {resid:.3e} exceeds {tol:.1e} * scale"
        )
    return np.ascontiguousarray(x.real)


def apply_rotation(xhat: np.ndarray, angle: float) -> np.ndarray:
    """Rotate by `angle`: multiply frequency j by exp(1j*j*angle)."""
    xhat = np.asarray(xhat, dtype=np.complex128)
    p = xhat.shape[-1]
    return xhat * np.exp(1j * freqs(p) * angle)


def rotate_signal(x: np.ndarray, angle: float) -> np.ndarray:
    """Rotate real signal(s) by `angle`; stays real exactly (up to roundoff)."""
    return from_fourier(apply_rotation(to_fourier(x), angle))


def tensor_to_fourier(T: np.ndarray) -> np.ndarray:
    """Apply the frequency change of basis to every mode of a real tensor."""
    T = np.asarray(T, dtype=np.float64).astype(np.complex128)
    Dh = np.conj(fourier_matrix(T.shape[0])).T
    for mode in range(T.ndim):
        T = np.moveaxis(np.tensordot(Dh, np.moveaxis(T, mode, 0), axes=1), 0, mode)
    return T


def tensor_from_fourier(That: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Invert tensor_to_fourier; raises SymmetryError on imaginary residue."""
    That = np.asarray(That, dtype=np.complex128)
    D = fourier_matrix(That.shape[0])
    T = That
    for mode in range(T.ndim):
        T = np.moveaxis(np.tensordot(D, np.moveaxis(T, mode, 0), axes=1), 0, mode)
    scale = max(float(np.max(np.abs(T))), 1e-300)
    resid = float(np.max(np.abs(T.imag)))
    if resid > tol * scale:
        raise SymmetryError(
            f"tensor has no real preimage: imaginary residue {resid:.3e}"
        )
    return np.ascontiguousarray(T.real)


def flatten4(T4: np.ndarray) -> np.ndarray:
    """Flatten an order-4 tensor to a matrix of row pairs (a,b), column pairs (c,d).

    Row-major pairing: entry T4[a,b,c,d] lands at [a*p + b, c*p + d]. The
    rank-1 consistency to remember: flatten4 of the outer product
    x (x) y (x) x (x) y equals (x (x) y)(x (x) y)^T as a matrix.
    """
    T4 = np.asarray(T4)
    p = T4.shape[0]
    if T4.shape != (p, p, p, p):
        raise ValueError(f"expected a (p,p,p,p) tensor, got shape {T4.shape}")
    return T4.reshape(p * p, p * p)


def unflatten4(M: np.ndarray) -> np.ndarray:
    """Inverse of flatten4."""
    M = np.asarray(M)
    n = M.shape[0]
    p = int(round(np.sqrt(n)))
    if M.shape != (n, n) or p * p != n:
        raise ValueError(f"expected a (p^2, p^2) matrix, got shape {M.shape}")
    return M.reshape(p, p, p, p)


def symmetrize(M: np.ndarray) -> tuple[np.ndarray, float]:
    """Return ((M + M.T)/2, removed), where removed = ||(M - M.T)/2||_F.

    Idempotent: symmetrizing a symmetric matrix removes nothing.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    S = 0.5 * (M + M.T)
    removed = float(np.linalg.norm(M - S))
    return S, removed


def _shifted_power(
    M: np.ndarray,
    tol_change: float,
    max_iter: int,
    resid_tol: float,
) -> tuple[float, np.ndarray]:
    """Largest *algebraic* eigenpair of symmetric M via shifted power iteration.

    Iterates on M + c*I with c = ||M||_1; the shift dominates the spectral
    radius, so every eigenvalue of the shifted matrix is nonnegative and
    the iteration heads for the algebraically largest one. Stops when the
    Rayleigh quotient of M is stable to tol_change (relative) and the
    residual ||M v - lam v|| is within resid_tol.
    """
    n = M.shape[0]
    norm_f = float(np.linalg.norm(M))
    shift = float(np.max(np.abs(M).sum(axis=0)))

    rng = substream(0, "power-iteration-start", n)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    resid = norm_f
    lam_prev = None
    restarts = 0
    for _ in range(max_iter):
        w = M @ v
        lam = float(v @ w)
        resid = float(np.linalg.norm(w - lam * v))
        if lam_prev is not None:
            stable = abs(lam - lam_prev) <= tol_change * max(1.0, abs(lam))
            if stable and resid <= resid_tol:
                return lam, v
        lam_prev = lam
        step = w + shift * v
        nrm = float(np.linalg.norm(step))
        if nrm <= 1e-14 * norm_f:
            # Start vector (numerically) annihilated; restart from a fresh one.
            restarts += 1
            rng2 = substream(restarts, "power-iteration-start", n)
            v = rng2.standard_normal(n)
            v /= np.linalg.norm(v)
            lam_prev = None
            continue
        v = step / nrm
    raise ConvergenceError(
        f"power iteration did not reach residual {resid_tol:.3e} "
        f"(last residual {resid:.3e}, eigenvalue {lam:.6g})",
        iterations=max_iter,
    )


def leading_eigenvector(
    M: np.ndarray,
    mode: str = "largest_algebraic",
    tol_change: float = 1e-10,
    max_iter: int = 10_000,
    residual_factor: float = 1e-8,
    symmetry_tol: float = 1e-9,
) -> tuple[float, np.ndarray]:
    """Leading eigenpair of a symmetric matrix by shifted power iteration.

    mode="largest_algebraic" finds the largest eigenvalue on the real
    line; mode="largest_absolute" finds the eigenvalue of largest
    magnitude by running the shifted iteration on both M and -M and
    keeping the larger-|lambda| result. (Running on M alone stalls when
    the spectrum is nearly symmetric, as for wide random matrices, and
    would miss the residual guarantee below.) On an exact +-lambda tie
    the pair found first, from the un-negated run, is reported; that
    choice is deterministic but otherwise arbitrary.

    Returns (lambda, v) with ||M v - lambda v|| <= residual_factor *
    ||M||_F, or raises ConvergenceError carrying the iteration count.
    Raises SymmetryError when max|M - M.T| exceeds symmetry_tol
    relative to the entry scale.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    asym = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    scale = max(float(np.max(np.abs(M))), 1e-300)
    if asym > symmetry_tol * scale:
        raise SymmetryError(
            f"matrix is not symmetric: max |M - M.T| = {asym:.3e} "
            f"(tolerance {symmetry_tol:.1e} relative)"
        )
    if mode not in ("largest_algebraic", "largest_absolute"):
        raise ValueError(f"unknown mode {mode!r}")

    n = M.shape[0]
    norm_f = float(np.linalg.norm(M))
    if norm_f == 0.0:
        v = np.zeros(n)
        v[0] = 1.0
        return 0.0, v
    resid_tol = residual_factor * norm_f

    lam_top, v_top = _shifted_power(M, tol_change, max_iter, resid_tol)
    if mode == "largest_algebraic":
        return lam_top, v_top
    lam_neg, v_bot = _shifted_power(-M, tol_change, max_iter, resid_tol)
    lam_bot = -lam_neg  # most negative eigenvalue of M
    if abs(lam_bot) > abs(lam_top):
        return lam_bot, v_bot
    return lam_top, v_top
