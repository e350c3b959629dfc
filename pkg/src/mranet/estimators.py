"""Estimator-style wrappers over the recovery pipelines.

These follow the scikit-learn conventions — constructor arguments stored
verbatim, ``fit(X, y=None)`` returning ``self``, fitted state in
trailing-underscore attributes — so the pipelines drop into existing
model-selection tooling.  They are thin: all numerics live in
:mod:`mranet.spectral`, :mod:`mranet.baselines`, and :mod:`mranet.moments`.

``X`` may be a real observation matrix ``(n_samples, p)``, an
:class:`~mranet.moments.ObservationBatch`, or — for exact-moment runs — a
:class:`~mranet.moments.SignalSet`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .baselines import frequency_marching
from .core import freqs, from_fourier, to_fourier
from .correction import correction_table
from .errors import ConfigError
from .moments import (
    ObservationBatch,
    SignalSet,
    empirical_third_moment,
    exact_moment,
)
from .spectral import DEFAULT_MEM_CAP_BYTES, ExperimentConfig, list_recovery

__all__ = [
    "FrequencyMarchingEstimator",
    "SpectralListRecovery",
    "empirical_second_moment",
]


def _as_batch(X) -> ObservationBatch:
    if isinstance(X, ObservationBatch):
        return X
    return ObservationBatch(y=np.asarray(X, dtype=np.float64))


def empirical_second_moment(batch: ObservationBatch, debias: bool = True) -> np.ndarray:
    """Mean of frequency-basis outer squares, restricted to zero-sum pairs.

    White real-basis noise is white in the frequency basis too, up to the
    frequency-negation permutation (conjugating the basis matrix permutes
    its columns by negation), so its entire contribution sits on the dotted
    diagonal ``f + f' = 0`` at level ``sigma^2``; ``debias`` subtracts it
    using the batch's recorded noise level.
    """
    yh = to_fourier(batch.y)
    est = np.einsum("ni,nj->ij", yh, yh) / batch.n
    f = np.array(freqs(batch.p))
    mask = (f[:, None] + f[None, :]) == 0
    est = est * mask
    if debias and batch.sigma > 0:
        est = est - batch.sigma**2 * mask
    return est


class SpectralListRecovery(BaseEstimator):
    """List recovery of heterogeneous signals from third moments.

    ``fit`` estimates (or computes exactly) the component-summed third
    moment, builds the correction table, and runs ``n_trials`` probe
    trials; the unit candidates land in ``candidates_`` with one
    diagnostics record per trial in ``diagnostics_``.

    Passing a ``SignalSet`` as ``X`` runs on exact population moments and
    unlocks per-signal correlation diagnostics and the planted-probe mode;
    observation inputs estimate the moment as ``n_components`` times the
    empirical mean, projected onto the zero-sum support.
    """

    def __init__(
        self,
        n_components: int = 1,
        n_trials: int = 1,
        seed: int = 0,
        correction_mode: str = "auto",
        correction_samples: int = 100_000,
        use_precompute: bool = True,
        planted_u: bool = False,
        planted_k: int = 0,
        planted_alpha: float = 1.0,
        planted_noise: float = 0.0,
        threads: int | None = None,
        mem_cap_bytes: int = DEFAULT_MEM_CAP_BYTES,
    ):
        self.n_components = n_components
        self.n_trials = n_trials
        self.seed = seed
        self.correction_mode = correction_mode
        self.correction_samples = correction_samples
        self.use_precompute = use_precompute
        self.planted_u = planted_u
        self.planted_k = planted_k
        self.planted_alpha = planted_alpha
        self.planted_noise = planted_noise
        self.threads = threads
        self.mem_cap_bytes = mem_cap_bytes

    def fit(self, X, y=None):
        signals = None
        self.moment_ = None
        if isinstance(X, SignalSet):
            if X.K != self.n_components:
                raise ConfigError(
                    f"signal set has {X.K} components but the estimator was "
                    f"configured for {self.n_components}"
                )
            p = X.p
            that = exact_moment(X, 3)
            signals = X
        else:
            batch = _as_batch(X)
            p = batch.p
            est = empirical_third_moment(batch)
            f = np.array(freqs(p))
            mask = (f[:, None, None] + f[None, :, None] + f[None, None, :]) == 0
            that = self.n_components * est.fourier_full * mask
            self.moment_ = est
        if self.planted_u and signals is None:
            raise ConfigError("planted-probe mode needs a SignalSet input")

        config = ExperimentConfig(
            p=p,
            K=self.n_components,
            L=self.n_trials,
            seed=self.seed,
            mem_cap_bytes=self.mem_cap_bytes,
            threads=self.threads,
            use_precompute=self.use_precompute,
            planted_u=self.planted_u,
            planted_k=self.planted_k,
            planted_alpha=self.planted_alpha,
            planted_noise=self.planted_noise,
        )
        self.correction_ = correction_table(
            p, mode=self.correction_mode, samples=self.correction_samples
        )
        result = list_recovery(that, self.correction_, config, signals=signals)
        self.n_features_in_ = p
        self.config_ = config
        self.result_ = result
        self.candidates_ = result.candidates
        self.diagnostics_ = result.diagnostics
        return self


class FrequencyMarchingEstimator(BaseEstimator):
    """Closed-form single-signal recovery by marching up the frequencies.

    ``fit`` computes second and third moments (exactly from a one-signal
    ``SignalSet``, or empirically from observations with the second-moment
    noise level debiased) and inverts them; the recovered orbit
    representative is stored in ``signal_hat_`` (frequency coordinates)
    and ``signal_`` (real coordinates).
    """

    def __init__(self, tol: float = 1e-10):
        self.tol = tol

    def fit(self, X, y=None):
        if isinstance(X, SignalSet):
            if X.K != 1:
                raise ConfigError(
                    f"frequency marching is a single-signal method; got K={X.K}"
                )
            that2 = exact_moment(X, 2)
            that3 = exact_moment(X, 3)
            p = X.p
        else:
            batch = _as_batch(X)
            that2 = empirical_second_moment(batch)
            that3 = empirical_third_moment(batch).fourier_full
            p = batch.p
        self.signal_hat_ = frequency_marching(that2, that3, tol=self.tol)
        self.signal_ = from_fourier(self.signal_hat_)
        self.n_features_in_ = p
        return self
