"""Spectral list recovery from corrected ring contractions.

The pipeline per trial: draw (or plant) an order-5 real probe ``u``, contract
the third-moment ring against it with the entrywise correction applied, map
the resulting frequency-basis matrix back to the real basis, and run the
two-stage eigenvector extraction — leading eigenvector of the symmetrized
``p^2 x p^2`` matrix, reshaped ``p x p`` and symmetrized again for the final
unit candidate.  Candidates are scored against known signals by raw and
orbit-maximized squared correlations.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    check_band_dim,
    fourier_matrix,
    freqs,
    from_fourier,
    leading_eigenvector,
    symmetrize,
    tensor_from_fourier,
    tensor_to_fourier,
    to_fourier,
)
from .errors import BudgetError, ConfigError, ConvergenceError, SymmetryError
from .moments import SignalSet, ZeroSumTensor3
from .ring import (
    DEFAULT_MEM_CAP_BYTES,
    VertexWeightTable,
    precompute_G,
    probe_to_fourier,
    ring_contract,
)
from .rng import substream

__all__ = [
    "ExperimentConfig",
    "TrialDiagnostics",
    "ExtractionResult",
    "ListRecoveryResult",
    "ErrorScalingResult",
    "build_M",
    "extract_candidate",
    "list_recovery",
    "orbit_correlation",
    "het_signal_gap",
    "error_term_scaling",
]

_EIGENVALUE_TIE_TOL = 1e-12
_ORBIT_GRID = 1024
_ORBIT_ANGLE_TOL = 1e-8


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated knobs for a list-recovery experiment.

    ``n=None`` means exact (population) moments; ``epsilon`` is informational
    only — the trial count ``L`` is never derived from it because the
    accuracy-to-trials mapping has unspecified constants.  The planted-probe
    fields replace the Gaussian probe of trial ``t`` by
    ``planted_alpha * (signal_k)^{outer 5} + planted_noise * Gaussian``.
    """

    p: int
    K: int = 1
    sigma: float = 0.0
    n: int | None = None
    L: int = 1
    epsilon: float | None = None
    seed: int = 0
    mem_cap_bytes: int = DEFAULT_MEM_CAP_BYTES
    threads: int | None = None
    use_precompute: bool = True
    planted_u: bool = False
    planted_k: int = 0
    planted_alpha: float = 1.0
    planted_noise: float = 0.0

    def __post_init__(self) -> None:
        try:
            check_band_dim(self.p)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.n is not None and self.n < 1:
            raise ConfigError(f"n must be >= 1 or None for exact moments, got {self.n}")
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if self.epsilon is not None and not 0 < self.epsilon:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.mem_cap_bytes < 1:
            raise ConfigError("memory cap must be positive")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if not 0 <= self.planted_k < self.K:
            raise ConfigError(
                f"planted_k must index a signal in [0, {self.K}), got {self.planted_k}"
            )
        if self.planted_noise < 0:
            raise ConfigError(f"planted_noise must be >= 0, got {self.planted_noise}")

    @property
    def exact_moments(self) -> bool:
        return self.n is None


@dataclass(frozen=True)
class TrialDiagnostics:
    """Per-trial record of the recovery pipeline.

    ``alpha_tilde`` holds the probe/signal alignments ``<u, s_k^{x5}> /
    ||s_k||^5`` (one per signal) whenever signals were supplied; correlations
    are likewise per-signal.  Orbit-maximized correlations are normalized to
    [0, 1]; raw squared correlations are bounded by ``||signal||^2``, which
    concentrates near 1 for the calibrated ensemble but is not clamped.
    """

    trial: int
    seed: int
    stage1_eigenvalue: float
    stage2_eigenvalue: float
    degenerate: bool
    zero_matrix: bool
    alpha_tilde: tuple[float, ...] | None = None
    raw_correlations: tuple[float, ...] | None = None
    orbit_correlations: tuple[float, ...] | None = None
    wall_time_seconds: float = 0.0

    def __post_init__(self) -> None:
        if self.wall_time_seconds < 0:
            raise ValueError("wall time cannot be negative")
        if self.raw_correlations is not None and any(
            c < 0 for c in self.raw_correlations
        ):
            raise ValueError("raw squared correlations cannot be negative")
        if self.orbit_correlations is not None and any(
            not 0 <= c <= 1 + 1e-6 for c in self.orbit_correlations
        ):
            raise ValueError("orbit correlations must lie in [0, 1 + tolerance]")


@dataclass(frozen=True)
class ExtractionResult:
    """Unit candidate and the eigen-data behind it.

    ``degenerate`` marks a tie between the extreme eigenvalues of the second
    stage (both candidates reported, the lexicographically larger returned);
    ``zero_matrix`` marks an all-zero input whose candidate is arbitrary.
    """

    tau: np.ndarray = field(repr=False)
    stage1_eigenvalue: float
    stage2_eigenvalue: float
    degenerate: bool = False
    zero_matrix: bool = False
    candidates: tuple[np.ndarray, ...] = field(default=(), repr=False)


@dataclass(frozen=True)
class ListRecoveryResult:
    candidates: list[np.ndarray] = field(repr=False)
    diagnostics: list[TrialDiagnostics] = field(repr=False)
    used_precompute: bool = False

    def __len__(self) -> int:
        return len(self.candidates)


@dataclass(frozen=True)
class ErrorScalingResult:
    """Log-log fit of matrix perturbation against moment perturbation size:
    ``difference ~ constant * magnitude^slope``."""

    slope: float
    constant: float
    magnitudes: tuple[float, ...]
    differences: tuple[float, ...]


def _as_dense_moment(that) -> np.ndarray:
    if isinstance(that, ZeroSumTensor3):
        return that.to_dense()
    return np.asarray(that, dtype=np.complex128)


def _as_order5(u: np.ndarray, p: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape == (p**5,):
        u = u.reshape((p,) * 5)
    if u.shape != (p,) * 5:
        raise ValueError(f"probe must have shape {(p,) * 5} or ({p**5},), got {u.shape}")
    return u


def _to_real_basis(m_hat_flat: np.ndarray, p: int, symmetry_tol: float) -> np.ndarray:
    """Conjugate the frequency-basis matrix back to real coordinates."""
    D = fourier_matrix(p)
    DD = np.kron(D, D)
    M = DD @ m_hat_flat @ DD.T
    scale = max(float(np.linalg.norm(M.real)), 1e-300)
    resid = float(np.linalg.norm(M.imag))
    if resid > symmetry_tol * scale:
        raise SymmetryError(
            f"real-basis matrix has imaginary residue {resid:.3e} "
            f"(> {symmetry_tol:.1e} relative): inputs break conjugation symmetry"
        )
    return np.ascontiguousarray(M.real)


def build_M(that, u: np.ndarray, correction=None, symmetry_tol: float = 1e-9) -> np.ndarray:
    """Corrected ring contraction of the third moment against a real probe.

    Returns the real ``p^2 x p^2`` matrix; linear in ``u``.  Raises
    :class:`SymmetryError` when the imaginary residue of the real-basis
    result exceeds ``symmetry_tol`` relatively (a symmetry bug upstream).
    """
    dense = _as_dense_moment(that)
    p = dense.shape[0]
    u = _as_order5(u, p)
    weights = VertexWeightTable.from_tensor(dense)
    m_hat = ring_contract(weights, probe_to_fourier(u), correction=correction)
    return _to_real_basis(m_hat, p, symmetry_tol)


def _canonical_sign(v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    for x in v:
        if abs(x) > tol:
            return v if x > 0 else -v
    return v


def _dominant_pair(
    V: np.ndarray,
    tol_change: float = 1e-12,
    max_iter: int = 10_000,
    residual_factor: float = 1e-8,
):
    """Extreme-magnitude eigenpair(s) of small symmetric ``V``.

    Power iteration on ``V @ V`` heads for the span of the extreme
    eigenvectors regardless of sign, so a ``+lambda / -lambda`` pair never
    stalls the iteration the way running on ``V`` and ``-V`` separately
    would.  The iterate ``x`` is split into ``x + Vx/lambda`` and
    ``x - Vx/lambda``, which isolate the positive and negative extreme;
    both Rayleigh quotients then come from the same run, so a magnitude
    tie is a machine-precision comparison rather than a race between two
    independently converged solves.

    Returns ``(rho_a, a, rho_b, b)`` with ``|rho_a| >= |rho_b|``; the
    second pair is ``(0.0, None)`` when the split has no significant
    second component.
    """
    n = V.shape[0]
    norm_f = float(np.linalg.norm(V))
    if norm_f == 0.0:
        e1 = np.zeros(n)
        e1[0] = 1.0
        return 0.0, e1, 0.0, None
    resid_tol = residual_factor * norm_f
    rng = substream(0, "extreme-pair-start", n)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    mu_prev = None
    best = None
    restarts = 0
    for _ in range(max_iter):
        y = V @ x
        mu = float(y @ y)
        if mu <= (1e-14 * norm_f) ** 2:
            restarts += 1
            if restarts > 3:
                raise ConvergenceError(
                    "iterate keeps landing in the kernel", iterations=max_iter
                )
            rng = substream(restarts, "extreme-pair-start", n)
            x = rng.standard_normal(n)
            x /= np.linalg.norm(x)
            mu_prev = None
            continue
        lam = math.sqrt(mu)
        a = x + y / lam
        b = x - y / lam
        na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
        if nb > na:
            a, b, na, nb = b, a, nb, na
        a = a / na
        Va = V @ a
        rho_a = float(a @ Va)
        res_a = float(np.linalg.norm(Va - rho_a * a))
        if nb / na > 1e-6:
            b = b / nb
            Vb = V @ b
            rho_b = float(b @ Vb)
            res_b = float(np.linalg.norm(Vb - rho_b * b))
        else:
            b, rho_b, res_b = None, 0.0, 0.0
        best = (rho_a, a, rho_b, b)
        stable = mu_prev is not None and abs(mu - mu_prev) <= tol_change * mu
        mu_prev = mu
        if stable and res_a <= resid_tol and res_b <= resid_tol:
            break
        x = V @ y
        x /= np.linalg.norm(x)
    rho_a, a, rho_b, b = best
    if b is not None and abs(rho_b) > abs(rho_a):
        rho_a, a, rho_b, b = rho_b, b, rho_a, a
    return rho_a, a, rho_b, b


def _stage1_eigenvector(sym: np.ndarray) -> tuple[float, np.ndarray]:
    try:
        return leading_eigenvector(sym, "largest_algebraic")
    except ConvergenceError:
        # A near-tie at the algebraic top decays slowly; one deeper run
        # resolves everything but genuinely ambiguous leading directions.
        return leading_eigenvector(sym, "largest_algebraic", max_iter=100_000)


def extract_candidate(M: np.ndarray) -> ExtractionResult:
    """Two-stage eigenvector extraction of a unit signal candidate.

    Stage 1 takes the leading (algebraic) eigenvector of the symmetrized
    input; stage 2 reshapes it ``p x p``, symmetrizes, and takes the
    eigenvector of largest eigenvalue magnitude.  When the two extreme
    eigenvalues tie in magnitude (within 1e-12, opposite signs) both
    sign-canonicalized candidates are reported and the lexicographically
    larger one returned.
    """
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix entries must be finite")
    sym, _ = symmetrize(M)
    p2 = sym.shape[0]
    p = int(round(math.sqrt(p2)))
    if p * p != p2:
        raise ValueError(f"matrix side {p2} is not a perfect square")
    if not np.any(sym):
        tau = np.zeros(p)
        tau[0] = 1.0
        return ExtractionResult(
            tau=tau,
            stage1_eigenvalue=0.0,
            stage2_eigenvalue=0.0,
            zero_matrix=True,
            candidates=(tau,),
        )
    lam1, v = _stage1_eigenvector(sym)
    V, _ = symmetrize(v.reshape(p, p))
    if not np.any(V):
        tau = np.zeros(p)
        tau[0] = 1.0
        return ExtractionResult(
            tau=tau,
            stage1_eigenvalue=lam1,
            stage2_eigenvalue=0.0,
            zero_matrix=True,
            candidates=(tau,),
        )
    rho_a, a, rho_b, b = _dominant_pair(V)
    tie = (
        b is not None
        and rho_a * rho_b < 0
        and abs(abs(rho_a) - abs(rho_b)) <= _EIGENVALUE_TIE_TOL * max(1.0, abs(rho_a))
    )
    if tie:
        ca = _canonical_sign(a.copy())
        cb = _canonical_sign(b.copy())
        first, second = (ca, cb) if list(ca) >= list(cb) else (cb, ca)
        lam2 = rho_a if first is ca else rho_b
        return ExtractionResult(
            tau=first,
            stage1_eigenvalue=lam1,
            stage2_eigenvalue=lam2,
            degenerate=True,
            candidates=(first, second),
        )
    return ExtractionResult(
        tau=a,
        stage1_eigenvalue=lam1,
        stage2_eigenvalue=rho_a,
        candidates=(a,),
    )


def _golden_section_max(f, lo: float, hi: float, tol: float) -> tuple[float, float]:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    g = 0.5 * (a + b)
    return g, f(g)


def orbit_correlation(
    tau: np.ndarray,
    theta: np.ndarray,
    grid: int = _ORBIT_GRID,
    angle_tol: float = _ORBIT_ANGLE_TOL,
) -> tuple[float, float]:
    """Best squared correlation of ``tau`` with the rotation orbit of ``theta``.

    Returns ``(orbit_max, raw)``: the maximum over rotations of
    ``<tau, g.theta>^2 / ||theta||^2`` (coarse grid then golden-section
    refinement to ``angle_tol``), and the unnormalized squared inner product
    at the identity rotation.  ``theta`` may be a real vector or its complex
    frequency coordinates.  Raises ValueError on a zero signal.
    """
    tau = np.asarray(tau, dtype=np.float64)
    theta = np.asarray(theta)
    theta_hat = theta.astype(np.complex128) if np.iscomplexobj(theta) else to_fourier(theta)
    p = tau.shape[0]
    if theta_hat.shape != (p,):
        raise ValueError(f"signal must have length {p}, got {theta_hat.shape}")
    norm_sq = float(np.sum(np.abs(theta_hat) ** 2))
    if norm_sq == 0.0:
        raise ValueError("cannot correlate against an identically-zero signal")
    coeffs = np.conj(to_fourier(tau)) * theta_hat
    raw = float(np.real(np.sum(coeffs)) ** 2)

    f = np.asarray(freqs(p), dtype=np.float64)

    def value(g: float) -> float:
        return float(np.real(np.sum(coeffs * np.exp(1j * f * g))) ** 2) / norm_sq

    angles = np.linspace(0.0, 2.0 * np.pi, grid, endpoint=False)
    phases = np.exp(1j * np.outer(angles, f))
    grid_vals = np.real(phases @ coeffs) ** 2 / norm_sq
    best = int(np.argmax(grid_vals))
    step = 2.0 * np.pi / grid
    _, peak = _golden_section_max(
        value, angles[best] - step, angles[best] + step, angle_tol
    )
    return max(peak, float(grid_vals[best])), raw


def _outer5(theta: np.ndarray) -> np.ndarray:
    return np.einsum("a,b,c,d,e->abcde", theta, theta, theta, theta, theta)


def _signal_matrix(signals, p: int, K: int) -> np.ndarray:
    """Normalize a signal argument to complex frequency coordinates (K, p)."""
    if isinstance(signals, SignalSet):
        hat = signals.signals
    else:
        arr = np.asarray(signals)
        hat = arr.astype(np.complex128) if np.iscomplexobj(arr) else to_fourier(arr)
    if hat.shape != (K, p):
        raise ConfigError(f"signals must have shape {(K, p)}, got {hat.shape}")
    return hat


def list_recovery(that, correction, config: ExperimentConfig, signals=None) -> ListRecoveryResult:
    """Run ``config.L`` independent probe trials and collect unit candidates.

    ``signals`` (frequency coordinates, ``SignalSet``, or real rows) enables
    per-signal diagnostics and is required for the planted-probe mode.
    Trials run sequentially, each on its own RNG substream, so results are
    reproducible and ordered by trial index.
    """
    dense = _as_dense_moment(that)
    p = dense.shape[0]
    if p != config.p:
        raise ConfigError(f"moment tensor is for p={p} but config.p={config.p}")
    if config.threads is not None:
        import numba

        numba.set_num_threads(min(config.threads, numba.config.NUMBA_NUM_THREADS))
    signal_hat = None
    signal_real = None
    if signals is not None:
        signal_hat = _signal_matrix(signals, p, config.K)
        signal_real = from_fourier(signal_hat)
    if config.planted_u and signal_real is None:
        raise ConfigError("planted-probe mode needs the signals to plant")

    weights = VertexWeightTable.from_tensor(dense)
    pre = None
    if config.use_precompute:
        try:
            pre = precompute_G(weights, mem_cap_bytes=config.mem_cap_bytes)
        except BudgetError:
            pre = None  # fall back to the direct per-probe kernel

    planted_term = None
    if config.planted_u:
        planted_term = config.planted_alpha * _outer5(signal_real[config.planted_k])

    candidates: list[np.ndarray] = []
    diagnostics: list[TrialDiagnostics] = []
    for t in range(config.L):
        t0 = time.perf_counter()
        rng = substream(config.seed, "probe", t)
        if planted_term is not None:
            u = planted_term.copy()
            if config.planted_noise > 0:
                u += config.planted_noise * rng.standard_normal((p,) * 5)
        else:
            u = rng.standard_normal((p,) * 5)
        u_hat = probe_to_fourier(u)
        if pre is not None:
            m_hat = pre.contract(u_hat, correction=correction)
        else:
            m_hat = ring_contract(weights, u_hat, correction=correction)
        M = _to_real_basis(m_hat, p, 1e-9)
        extraction = extract_candidate(M)

        alpha = raw = orbit = None
        if signal_real is not None:
            alpha_list, raw_list, orbit_list = [], [], []
            for k in range(config.K):
                th = signal_real[k]
                nrm = float(np.linalg.norm(th))
                align = float(np.einsum("abcde,a,b,c,d,e->", u, th, th, th, th, th))
                alpha_list.append(align / nrm**5 if nrm > 0 else float("nan"))
                o, r = orbit_correlation(extraction.tau, signal_hat[k])
                raw_list.append(r)
                orbit_list.append(o)
            alpha, raw, orbit = tuple(alpha_list), tuple(raw_list), tuple(orbit_list)

        candidates.append(extraction.tau)
        diagnostics.append(
            TrialDiagnostics(
                trial=t,
                seed=config.seed,
                stage1_eigenvalue=extraction.stage1_eigenvalue,
                stage2_eigenvalue=extraction.stage2_eigenvalue,
                degenerate=extraction.degenerate,
                zero_matrix=extraction.zero_matrix,
                alpha_tilde=alpha,
                raw_correlations=raw,
                orbit_correlations=orbit,
                wall_time_seconds=time.perf_counter() - t0,
            )
        )
    return ListRecoveryResult(
        candidates=candidates, diagnostics=diagnostics, used_precompute=pre is not None
    )


def het_signal_gap(that_full, that_single, theta, correction=None) -> float:
    """Frobenius distance between the full-mixture and single-signal matrices
    probed at that signal's own rank-1 power: direct differencing of the two
    contractions."""
    theta = np.asarray(theta)
    theta_real = from_fourier(theta) if np.iscomplexobj(theta) else theta.astype(np.float64)
    u = _outer5(theta_real)
    m_full = build_M(that_full, u, correction)
    m_single = build_M(that_single, u, correction)
    return float(np.linalg.norm(m_full - m_single))


def _symmetric_unit_perturbation(p: int, rng: np.random.Generator) -> np.ndarray:
    """Random symmetric zero-sum-supported direction with unit max entry."""
    raw = rng.standard_normal((p, p, p))
    sym = np.zeros_like(raw)
    for perm in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
        sym += raw.transpose(perm)
    hat = tensor_to_fourier(sym / 6.0)
    f = np.asarray(freqs(p))
    support = (f[:, None, None] + f[None, :, None] + f[None, None, :]) == 0
    hat *= support
    real = tensor_from_fourier(hat)
    peak = float(np.max(np.abs(real)))
    if peak == 0.0:
        raise ValueError("degenerate perturbation draw")
    return real / peak


def error_term_scaling(
    that,
    magnitudes,
    u: np.ndarray,
    correction=None,
    seed: int = 0,
) -> ErrorScalingResult:
    """Response of the contraction to entrywise moment perturbations.

    Injects a fixed random symmetric on-support direction scaled to each
    requested max-entry magnitude, measures the Frobenius change of the
    output matrix, and fits ``log(difference)`` against ``log(magnitude)``.
    """
    magnitudes = tuple(float(m) for m in magnitudes)
    if len(magnitudes) < 2:
        raise ValueError("need at least two magnitudes to fit a slope")
    if any(m <= 0 for m in magnitudes):
        raise ValueError("magnitudes must be positive")
    dense = _as_dense_moment(that)
    p = dense.shape[0]
    u = _as_order5(u, p)
    base = build_M(dense, u, correction)
    direction = _symmetric_unit_perturbation(p, substream(seed, "error-direction"))
    direction_hat = tensor_to_fourier(direction)
    diffs = []
    for m in magnitudes:
        perturbed = build_M(dense + m * direction_hat, u, correction)
        diffs.append(float(np.linalg.norm(perturbed - base)))
    if any(d <= 0 for d in diffs):
        raise ValueError(
            "perturbation produced no output change; slope is undefined "
            "(is the probe or the correction annihilating the direction?)"
        )
    slope, intercept = np.polyfit(np.log(magnitudes), np.log(diffs), 1)
    return ErrorScalingResult(
        slope=float(slope),
        constant=float(np.exp(intercept)),
        magnitudes=magnitudes,
        differences=tuple(diffs),
    )
