"""Tests for the spectral list-recovery pipeline."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mranet.core import leading_eigenvector, rotate_signal, symmetrize, to_fourier
from mranet.correction import (
    chain_sums_all,
    correction_table,
    signal_squared_magnitudes,
)
from mranet.errors import ConfigError
from mranet.moments import SignalSet, ZeroSumTensor3, exact_moment
from mranet.ring import VertexWeightTable, probe_to_fourier, ring_contract
from mranet.rng import substream
from mranet.spectral import (
    ExperimentConfig,
    TrialDiagnostics,
    _dominant_pair,
    build_M,
    error_term_scaling,
    extract_candidate,
    het_signal_gap,
    list_recovery,
    orbit_correlation,
)


def outer5(v):
    return np.einsum("a,b,c,d,e->abcde", v, v, v, v, v)


@pytest.fixture(scope="module")
def table6(tmp_path_factory):
    return correction_table(6, mode="exact", cache_dir=tmp_path_factory.mktemp("t6"))


@pytest.fixture(scope="module")
def table8(tmp_path_factory):
    return correction_table(8, mode="exact", cache_dir=tmp_path_factory.mktemp("t8"))


@pytest.fixture(scope="module")
def single6():
    sig = SignalSet.random(6, 1, substream(41, "spectral-signals"))
    return sig, exact_moment(sig, 3)


@pytest.fixture(scope="module")
def single8():
    sig = SignalSet.random(8, 1, substream(42, "spectral-signals"))
    return sig, exact_moment(sig, 3)


# ---------------------------------------------------------------- config


def test_experiment_config_validation():
    cfg = ExperimentConfig(p=8, K=2, sigma=0.5, n=1000, L=3, seed=7)
    assert not cfg.exact_moments
    assert ExperimentConfig(p=8).exact_moments
    with pytest.raises(ConfigError):
        ExperimentConfig(p=7)
    with pytest.raises(ConfigError):
        ExperimentConfig(p=8, K=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(p=8, L=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(p=8, sigma=-0.1)
    with pytest.raises(ConfigError):
        ExperimentConfig(p=8, n=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(p=8, epsilon=0.0)
    with pytest.raises(ConfigError):
        ExperimentConfig(p=8, threads=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(p=8, mem_cap_bytes=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(p=8, K=2, planted_k=2)
    with pytest.raises(ConfigError):
        ExperimentConfig(p=8, planted_noise=-1.0)


def test_trial_diagnostics_validation():
    ok = TrialDiagnostics(
        trial=0,
        seed=1,
        stage1_eigenvalue=2.0,
        stage2_eigenvalue=-1.0,
        degenerate=False,
        zero_matrix=False,
        raw_correlations=(1.7,),  # raw is unnormalized: > 1 is legal
        orbit_correlations=(0.93,),
        wall_time_seconds=0.01,
    )
    assert ok.raw_correlations == (1.7,)
    with pytest.raises(ValueError, match="orbit"):
        TrialDiagnostics(
            trial=0,
            seed=1,
            stage1_eigenvalue=0.0,
            stage2_eigenvalue=0.0,
            degenerate=False,
            zero_matrix=False,
            orbit_correlations=(1.01,),
        )
    with pytest.raises(ValueError, match="raw"):
        TrialDiagnostics(
            trial=0,
            seed=1,
            stage1_eigenvalue=0.0,
            stage2_eigenvalue=0.0,
            degenerate=False,
            zero_matrix=False,
            raw_correlations=(-0.1,),
        )
    with pytest.raises(ValueError, match="wall time"):
        TrialDiagnostics(
            trial=0,
            seed=1,
            stage1_eigenvalue=0.0,
            stage2_eigenvalue=0.0,
            degenerate=False,
            zero_matrix=False,
            wall_time_seconds=-1.0,
        )


# ---------------------------------------------------------------- build_M


def test_build_m_linear_in_probe(single6, table6):
    _, that = single6
    rng = substream(5, "linearity")
    u1 = rng.standard_normal((6,) * 5)
    u2 = rng.standard_normal((6,) * 5)
    m1 = build_M(that, u1, table6)
    m2 = build_M(that, u2, table6)
    combo = build_M(that, 0.3 * u1 - 1.7 * u2, table6)
    assert np.linalg.norm(m1) > 0
    scale = max(np.linalg.norm(m1), np.linalg.norm(m2))
    assert np.linalg.norm(combo - (0.3 * m1 - 1.7 * m2)) <= 1e-12 * scale


def test_build_m_zero_moment_gives_zero_matrix(table6):
    that = ZeroSumTensor3(p=6, entries={})
    M = build_M(that, substream(1, "z").standard_normal((6,) * 5), table6)
    assert M.shape == (36, 36)
    assert not np.any(M)
    ex = extract_candidate(M)
    assert ex.zero_matrix
    assert ex.stage1_eigenvalue == 0.0 and ex.stage2_eigenvalue == 0.0
    assert np.array_equal(ex.tau, np.eye(6)[0])
    assert len(ex.candidates) == 1


def test_build_m_rejects_bad_probe_shape(single6, table6):
    _, that = single6
    with pytest.raises(ValueError, match="probe"):
        build_M(that, np.zeros((6,) * 4), table6)


def test_planted_probe_factorizes_into_pattern_times_chain_sums(single6):
    """Cross-module oracle: for one signal probed at its own fifth power, the
    uncorrected ring entry (a,b,c,d) equals the product of the four signal
    frequency coordinates times the draw's chain sum at that entry."""
    sig, that = single6
    p = 6
    theta_hat = sig.signals[0]
    theta = sig.real_signals()[0]
    raw = ring_contract(
        VertexWeightTable.from_tensor(that), probe_to_fourier(outer5(theta))
    ).reshape(p, p, p, p)
    s = chain_sums_all(signal_squared_magnitudes(theta_hat), p)
    pattern = np.einsum("a,b,c,d->abcd", theta_hat, theta_hat, theta_hat, theta_hat)
    predicted = pattern * s
    nz = s != 0
    assert nz.sum() > 0 and np.max(np.abs(raw)) > 0
    assert np.max(np.abs(raw - predicted)) <= 1e-12 * np.max(np.abs(predicted))
    if (~nz).any():
        assert np.max(np.abs(raw[~nz])) == 0.0


# ------------------------------------------------------- extract_candidate


def test_extract_candidate_exact_rank_one():
    rng = substream(9, "rank1")
    y = rng.standard_normal(8)
    y /= np.linalg.norm(y)
    w = np.kron(y, y)
    M = 3.5 * np.outer(w, w)
    ex = extract_candidate(M)
    assert not ex.zero_matrix and not ex.degenerate
    assert abs(float(ex.tau @ y) ** 2 - 1.0) <= 1e-8
    assert abs(np.linalg.norm(ex.tau) - 1.0) <= 1e-10
    assert ex.stage1_eigenvalue == pytest.approx(3.5, rel=1e-8)
    assert abs(ex.stage2_eigenvalue) == pytest.approx(1.0, rel=1e-8)


def _tied_pair():
    y = np.array([2.0, 1.0, 0.5, -0.5])
    y /= np.linalg.norm(y)
    z = np.array([1.0, -2.0, 0.5, 0.5])
    z -= (z @ y) * y
    z /= np.linalg.norm(z)
    return y, z


def test_stage_two_solver_separates_an_exact_magnitude_tie():
    # The 1e-12 tie window is a property of the stage-2 input itself: the
    # stage-1 eigenvector of any data matrix carries ~1e-10 iteration
    # noise, which splits an ideal tie before stage 2 ever sees it.
    y, z = _tied_pair()
    V0 = np.outer(y, y) - np.outer(z, z)  # eigenvalues exactly +1 and -1
    rho_a, a, rho_b, b = _dominant_pair(V0)
    assert b is not None
    assert rho_a * rho_b < 0
    assert abs(abs(rho_a) - abs(rho_b)) <= 1e-12
    for vec in (a, b):
        assert max(float(vec @ y) ** 2, float(vec @ z) ** 2) >= 1 - 1e-8
    assert {round(float(a @ y) ** 2), round(float(b @ y) ** 2)} == {0, 1}


def test_extract_candidate_near_tie_still_returns_an_extreme():
    y, z = _tied_pair()
    V0 = np.outer(y, y) - np.outer(z, z)
    w = V0.reshape(-1)
    M = np.outer(w, w)  # stage-1 noise turns the tie into a ~1e-10 split
    ex = extract_candidate(M)
    assert not ex.zero_matrix
    tau = ex.tau
    assert max(float(tau @ y) ** 2, float(tau @ z) ** 2) >= 1 - 1e-6
    assert abs(ex.stage2_eigenvalue) == pytest.approx(1 / np.sqrt(2), abs=1e-6)
    if ex.degenerate:
        assert len(ex.candidates) == 2
        assert list(ex.candidates[0]) >= list(ex.candidates[1])
        assert np.array_equal(ex.tau, ex.candidates[0])


def test_extract_candidate_rejects_bad_input():
    with pytest.raises(ValueError, match="square"):
        extract_candidate(np.ones((6, 6)))  # 6 is not a perfect square
    with pytest.raises(ValueError, match="finite"):
        extract_candidate(np.full((4, 4), np.nan))


@settings(max_examples=20, deadline=None)
@given(
    seed=st.integers(0, 10**6),
    alpha=st.floats(0.5, 4.0),
    beta_ratio=st.floats(0.01, 0.24),
)
def test_rank_one_plus_bounded_error_recovery(seed, alpha, beta_ratio):
    """Perturbation bounds for the two-stage extraction: a rank-one planted
    matrix plus an error of operator norm beta keeps the stage-1 eigenvector
    within 1 - 2*beta/alpha of the planted direction and the final candidate
    within 1 - 2*sqrt(beta/alpha) of the planted signal (squared)."""
    p = 6
    rng = substream(seed, "bound")
    y = rng.standard_normal(p)
    y /= np.linalg.norm(y)
    w = np.kron(y, y)
    B = rng.standard_normal((p * p, p * p))
    B = (B + B.T) / 2
    B *= 1.0 / np.max(np.abs(np.linalg.eigvalsh(B)))
    beta = beta_ratio * alpha
    M = alpha * np.outer(w, w) + beta * B
    sym, _ = symmetrize(M)
    _, v = leading_eigenvector(sym, "largest_algebraic")
    assert float(v @ w) ** 2 >= 1 - 2 * beta_ratio - 1e-9
    ex = extract_candidate(M)
    assert float(ex.tau @ y) ** 2 >= 1 - 2 * np.sqrt(beta_ratio) - 1e-9


# ------------------------------------------------------- orbit_correlation


def test_orbit_correlation_perfect_match():
    rng = substream(3, "orbit")
    theta = rng.normal(scale=1 / np.sqrt(8), size=8)
    tau = theta / np.linalg.norm(theta)
    orbit, raw = orbit_correlation(tau, theta)
    assert abs(orbit - 1.0) <= 1e-10
    assert raw == pytest.approx(float(theta @ theta) ** 2 / float(theta @ theta))


def test_orbit_correlation_finds_rotated_copy():
    rng = substream(4, "orbit")
    theta = rng.normal(scale=1 / np.sqrt(8), size=8)
    rotated = rotate_signal(theta, 0.7)
    tau = rotated / np.linalg.norm(rotated)
    orbit, raw = orbit_correlation(tau, theta)
    assert abs(orbit - 1.0) <= 1e-8
    assert raw < float(theta @ theta)  # identity is not the aligning rotation


def test_orbit_correlation_rotation_invariant_in_both_arguments():
    rng = substream(6, "orbit")
    theta = rng.normal(scale=1 / np.sqrt(8), size=8)
    tau = rng.standard_normal(8)
    tau /= np.linalg.norm(tau)
    base, _ = orbit_correlation(tau, theta)
    rot_tau, _ = orbit_correlation(rotate_signal(tau, 1.3), theta)
    rot_theta, _ = orbit_correlation(tau, rotate_signal(theta, -2.1))
    assert abs(rot_tau - base) <= 1e-8
    assert abs(rot_theta - base) <= 1e-8


def test_orbit_correlation_accepts_frequency_coordinates():
    rng = substream(8, "orbit")
    theta = rng.normal(scale=1 / np.sqrt(6), size=6)
    tau = rng.standard_normal(6)
    tau /= np.linalg.norm(tau)
    a = orbit_correlation(tau, theta)
    b = orbit_correlation(tau, to_fourier(theta))
    assert a == pytest.approx(b, abs=1e-12)


def test_orbit_correlation_disjoint_frequencies_is_flat_zero():
    p = 6
    tau_hat = np.zeros(p, complex)
    theta_hat = np.zeros(p, complex)
    # tau on frequency +-1, theta on +-2: correlation vanishes identically
    tau_hat[p // 2] = tau_hat[p // 2 - 1] = 1 / np.sqrt(2)
    theta_hat[p // 2 + 1] = theta_hat[p // 2 - 2] = 1.0
    from mranet.core import from_fourier

    tau = from_fourier(tau_hat)
    orbit, raw = orbit_correlation(tau, theta_hat)
    assert orbit == 0.0 and raw == 0.0


def test_orbit_correlation_zero_signal_raises():
    with pytest.raises(ValueError, match="zero"):
        orbit_correlation(np.eye(6)[0], np.zeros(6))


def test_orbit_correlation_null_scale_shrinks_with_p():
    means = {}
    for p in (8, 16):
        rng = substream(7, "null", p)
        theta = rng.normal(scale=1 / np.sqrt(p), size=p)
        vals = []
        for _ in range(150):
            t = rng.standard_normal(p)
            t /= np.linalg.norm(t)
            orbit, _ = orbit_correlation(t, theta)
            assert 0.0 <= orbit <= 1 + 1e-9
            vals.append(orbit)
        means[p] = np.mean(vals)
    assert means[16] < means[8]
    assert means[16] < 0.5  # measured 0.35, a couple of log(p)/p


# ----------------------------------------------------------- list_recovery


def test_list_recovery_reproducible_and_ordered(single6, table6):
    sig, that = single6
    cfg = ExperimentConfig(p=6, L=3, seed=12)
    a = list_recovery(that, table6, cfg, signals=sig)
    b = list_recovery(that, table6, cfg, signals=sig)
    assert [d.trial for d in a.diagnostics] == [0, 1, 2]
    for ca, cb in zip(a.candidates, b.candidates):
        assert np.array_equal(ca, cb)
    for da, db in zip(a.diagnostics, b.diagnostics):
        assert da.orbit_correlations == db.orbit_correlations
        assert da.alpha_tilde == db.alpha_tilde
        assert da.seed == 12
    assert len(a) == 3


def test_list_recovery_different_trials_use_different_probes(single6, table6):
    _, that = single6
    cfg = ExperimentConfig(p=6, L=2, seed=12)
    res = list_recovery(that, table6, cfg)
    assert not np.array_equal(res.candidates[0], res.candidates[1])
    assert res.diagnostics[0].alpha_tilde is None  # no signals supplied


def test_list_recovery_planted_probe_recovers_signal(single8, table8):
    sig, that = single8
    theta = sig.real_signals()[0]
    cfg = ExperimentConfig(p=8, L=1, seed=0, planted_u=True)
    res = list_recovery(that, table8, cfg, signals=sig)
    d = res.diagnostics[0]
    assert d.orbit_correlations[0] >= 0.9
    norm = float(np.linalg.norm(theta))
    assert d.alpha_tilde[0] == pytest.approx(norm**5, rel=1e-10)
    assert res.used_precompute


def test_list_recovery_planted_needs_signals(single8, table8):
    _, that = single8
    cfg = ExperimentConfig(p=8, L=1, planted_u=True)
    with pytest.raises(ConfigError, match="planted"):
        list_recovery(that, table8, cfg)


def test_list_recovery_budget_fallback_matches_precompute(single6, table6):
    sig, that = single6
    fast = list_recovery(
        that, table6, ExperimentConfig(p=6, L=1, seed=5), signals=sig
    )
    slow = list_recovery(
        that,
        table6,
        ExperimentConfig(p=6, L=1, seed=5, mem_cap_bytes=1000),
        signals=sig,
    )
    assert fast.used_precompute and not slow.used_precompute
    assert abs(float(fast.candidates[0] @ slow.candidates[0])) >= 1 - 1e-8


def test_list_recovery_validates_shapes(single6, table6):
    sig, that = single6
    with pytest.raises(ConfigError, match="config.p"):
        list_recovery(that, table6, ExperimentConfig(p=8, L=1), signals=sig)
    with pytest.raises(ConfigError, match="signals"):
        list_recovery(
            that, table6, ExperimentConfig(p=6, K=2, L=1), signals=sig
        )


def test_list_recovery_zero_moment_flags_zero_matrices(table6):
    that = ZeroSumTensor3(p=6, entries={})
    res = list_recovery(that, table6, ExperimentConfig(p=6, L=2, seed=1))
    assert all(d.zero_matrix for d in res.diagnostics)


# ---------------------------------------------- het gap and error scaling


def test_het_signal_gap_zero_for_single_signal(single6, table6):
    sig, that = single6
    assert het_signal_gap(that, that, sig.real_signals()[0], table6) == 0.0


def test_het_signal_gap_positive_for_mixture(table6):
    sigs = SignalSet.random(6, 2, substream(19, "het"))
    that_full = exact_moment(sigs, 3)
    single = SignalSet(p=6, signals=sigs.signals[:1])
    that_single = exact_moment(single, 3)
    gap = het_signal_gap(that_full, that_single, sigs.real_signals()[0], table6)
    assert gap > 0


def test_error_term_scaling_linear_response(single6, table6):
    sig, that = single6
    u = outer5(sig.real_signals()[0])
    res = error_term_scaling(that, [1e-6, 1e-5, 1e-4], u, table6, seed=2)
    assert abs(res.slope - 1.0) <= 0.15
    assert res.constant > 0
    assert len(res.differences) == 3
    again = error_term_scaling(that, [1e-6, 1e-5, 1e-4], u, table6, seed=2)
    assert res.differences == again.differences


def test_error_term_scaling_validates_magnitudes(single6, table6):
    sig, that = single6
    u = outer5(sig.real_signals()[0])
    with pytest.raises(ValueError, match="two magnitudes"):
        error_term_scaling(that, [1e-4], u, table6)
    with pytest.raises(ValueError, match="positive"):
        error_term_scaling(that, [1e-4, -1e-3], u, table6)
