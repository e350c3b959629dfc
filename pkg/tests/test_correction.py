from __future__ import annotations

import collections
import math

import numpy as np
import pytest
from numpy.polynomial.laguerre import laggauss

from mranet.core import freqs, to_fourier
from mranet.correction import (
    CorrectionTable,
    _chain_tuples,
    _monte_carlo_expectations,
    chain_sum_direct,
    chain_sums_all,
    concentration_deviations,
    correction_table,
    exact_expected_table,
    expected_s,
    read_correction_cache,
    signal_squared_magnitudes,
    write_correction_cache,
)
from mranet.errors import ConfigError
from mranet.rng import substream


def entry_index(p, a, b, c, d):
    f = list(freqs(p))
    return f.index(a), f.index(b), f.index(c), f.index(d)


# ---------------------------------------------------------------------------
# chain evaluation: factorized route against direct enumeration
# ---------------------------------------------------------------------------


def test_transfer_matrix_matches_direct_enumeration():
    p = 6
    rng = np.random.default_rng(0)
    f = list(freqs(p))
    x = rng.exponential(scale=1.0 / p, size=p // 2)
    s = chain_sums_all(x, p)
    assert s.shape == (p, p, p, p)
    assert np.max(s) > 0  # the band is wide enough for chains to survive
    entries = [(a, b, c, d) for a in f for b in f for c in f for d in f]
    rng.shuffle(entries)
    for a, b, c, d in entries[:80]:
        direct = chain_sum_direct(x, a, b, c, d, p)
        got = s[entry_index(p, a, b, c, d)]
        assert abs(got - direct) <= 1e-12 * max(direct, 1e-12)


def test_narrow_bands_have_no_chains():
    # consecutive chain indices move by at most p/2, so for p <= 4 the index
    # transition graph is bipartite and the closing probe frequency always
    # falls on 0 or out of band: every chain dies, both routes return zero
    for p in (2, 4):
        f = list(freqs(p))
        assert all(not list(_chain_tuples(a, b, c, d, p)) for a in f for b in f for c in f for d in f)
        x = np.random.default_rng(1).exponential(size=(3, p // 2))
        assert np.all(chain_sums_all(x, p) == 0)
        assert np.all(exact_expected_table(p) == 0)


def test_chain_sums_batched_and_squeezed_shapes():
    p = 6
    rng = np.random.default_rng(1)
    batchwise = chain_sums_all(rng.exponential(size=(5, p // 2)), p)
    assert batchwise.shape == (5, p, p, p, p)
    single = chain_sums_all(rng.exponential(size=p // 2), p)
    assert single.shape == (p, p, p, p)
    with pytest.raises(ValueError):
        chain_sums_all(rng.exponential(size=p), p)


# ---------------------------------------------------------------------------
# exact expectations
# ---------------------------------------------------------------------------


def test_exponential_moment_formula_against_quadrature():
    # the closed form behind expected_s: k-th moment of an exponential of
    # mean 1/p is k! p^{-k}; checked against Gauss-Laguerre quadrature
    p = 6
    xq, wq = laggauss(60)
    for k in (1, 2, 5, 9):
        quad = float(np.sum(wq * (xq / p) ** k))
        assert math.isclose(quad, math.factorial(k) / p**k, rel_tol=1e-10)


def test_expected_s_negation_symmetry():
    p = 6
    for a, b, c, d in [(1, 1, -2, 1), (2, -1, 1, 1), (3, -1, -1, 2)]:
        assert math.isclose(
            expected_s(a, b, c, d, p), expected_s(-a, -b, -c, -d, p), rel_tol=1e-12
        )


def test_expected_s_validates_frequencies():
    with pytest.raises(ValueError):
        expected_s(0, 1, 1, 1, 4)
    with pytest.raises(ValueError):
        expected_s(3, 1, 1, 1, 4)


def test_exact_table_matches_per_entry_reference():
    p = 6
    table = exact_expected_table(p)
    f = list(freqs(p))
    rng = np.random.default_rng(2)
    entries = [(a, b, c, d) for a in f for b in f for c in f for d in f]
    rng.shuffle(entries)
    for a, b, c, d in entries[:40]:
        ref = expected_s(a, b, c, d, p)
        assert ref > 0
        got = table[entry_index(p, a, b, c, d)]
        assert abs(got - ref) < 1e-12 * ref


def test_exact_table_matches_per_entry_reference_larger_band():
    p = 8
    table = exact_expected_table(p)
    for a, b, c, d in [(1, 2, -3, 4), (-4, 1, 1, 1), (2, 2, 2, 2)]:
        ref = expected_s(a, b, c, d, p)
        assert ref > 0
        got = table[entry_index(p, a, b, c, d)]
        assert abs(got - ref) < 1e-12 * ref


def test_expectation_scale_window():
    # nonzero expectations scaled by p^9 sit in a fixed window below 14!
    for p in (6, 8):
        table = exact_expected_table(p)
        nz = table[table > 0]
        assert nz.size > 0
        scaled = nz * p**9
        assert np.min(scaled) > 0
        assert np.max(scaled) <= math.factorial(14) * (1 + 1e-12)


# ---------------------------------------------------------------------------
# Monte Carlo estimator
# ---------------------------------------------------------------------------


def test_monte_carlo_mechanics_batch_invariant():
    p = 6
    m1, se1 = _monte_carlo_expectations(p, 1500, substream(3, "batching"), batch=64)
    m2, se2 = _monte_carlo_expectations(p, 1500, substream(3, "batching"), batch=977)
    assert np.allclose(m1, m2, rtol=1e-10)
    assert np.allclose(se1, se2, rtol=1e-8)
    assert np.all(se1 >= 0)


def test_estimator_unbiased_on_bounded_draws():
    # heavy-tailed exponential draws make tight statistical checks of the
    # full estimator hopeless at feasible sample sizes, so run it through a
    # bounded draw law, where the CLT is sharp, against moments derived
    # independently from the chain enumeration:
    # for x ~ U[lo, hi], E[x^k] = (hi^{k+1} - lo^{k+1}) / ((hi - lo) (k + 1))
    p = 6
    lo, hi = 0.8 / p, 1.2 / p
    rng_pick = np.random.default_rng(4)
    table = exact_expected_table(p)
    f = list(freqs(p))
    picks = rng_pick.permutation(np.argwhere(table > 0))[:12]

    def uniform_moment(k):
        return (hi ** (k + 1) - lo ** (k + 1)) / ((hi - lo) * (k + 1))

    refs = []
    for a_i, b_i, c_i, d_i in picks:
        total = 0.0
        for chain in _chain_tuples(f[a_i], f[b_i], f[c_i], f[d_i], p):
            counts = collections.Counter(abs(v) for v in chain)
            total += math.prod(uniform_moment(k) for k in counts.values())
        refs.append(total)

    rng = substream(5, "bounded-draws")
    n = 20_000
    acc = np.zeros(len(picks))
    acc2 = np.zeros(len(picks))
    for _ in range(n // 2000):
        draws = rng.uniform(lo, hi, size=(2000, p // 2))
        s = chain_sums_all(draws, p)
        vals = s[:, picks[:, 0], picks[:, 1], picks[:, 2], picks[:, 3]]
        acc += vals.sum(axis=0)
        acc2 += (vals**2).sum(axis=0)
    mean = acc / n
    se = np.sqrt(np.maximum(acc2 / n - mean**2, 0) / n)
    z = np.abs(mean - np.array(refs)) / se
    assert np.all(z <= 3.5)


def test_exponential_monte_carlo_brackets_exact():
    # with exponential draws only a coarse bracket is defensible: estimates
    # of distinct entries share draws, and rare large draws swing the whole
    # table together
    p = 6
    exact = exact_expected_table(p)
    mean, se = _monte_carlo_expectations(p, 30_000, substream(6, "bracket"))
    nz = exact > 0
    ratio = mean[nz] / exact[nz]
    assert np.all(ratio > 0)
    assert 0.2 <= np.median(ratio) <= 5.0


# ---------------------------------------------------------------------------
# correction tables
# ---------------------------------------------------------------------------


def test_exact_correction_table_invariants():
    p = 6
    t = correction_table(p, mode="exact")
    assert t.mode == "exact"
    f = list(freqs(p))
    for ai in range(p):
        bi = p - 1 - ai  # index of the negated frequency
        assert np.all(t.values[ai, bi, :, :] == 0)
        assert np.all(t.values[:, :, ai, bi] == 0)
    assert np.array_equal(t.values, t.values[::-1, ::-1, ::-1, ::-1])
    assert t.c1_measured is not None and t.c2_measured is not None
    assert 0 < t.c1_measured <= t.c2_measured <= math.factorial(14) * (1 + 1e-12)
    ex = np.zeros((p, p), dtype=bool)
    ex[np.arange(p), np.arange(p)[::-1]] = True
    excluded = ex[:, :, None, None] | ex[None, None, :, :]
    assert np.all(t.values[~excluded] > 0)
    assert np.all(t.values[excluded] == 0)


def test_narrow_band_tables_are_all_zero():
    for p in (2, 4):
        t = correction_table(p, mode="exact")
        assert np.all(t.values == 0)
        assert t.c1_measured is None and t.c2_measured is None


def test_monte_carlo_table_same_support_as_exact():
    p = 6
    exact = correction_table(p, mode="exact")
    mc = correction_table(p, mode="monte_carlo", samples=5_000, seed=3)
    assert mc.standard_errors is not None
    assert np.array_equal(exact.nonzero_mask, mc.nonzero_mask)
    assert np.array_equal(mc.values, mc.values[::-1, ::-1, ::-1, ::-1])


def test_auto_mode_dispatch():
    assert correction_table(6, mode="auto").mode == "exact"
    small = correction_table(12, mode="auto", samples=50, seed=4)
    assert small.mode == "monte_carlo"
    with pytest.raises(ConfigError):
        correction_table(6, mode="bogus")
    with pytest.raises(ConfigError):
        correction_table(6, mode="monte_carlo", samples=0)


def test_cross_check_recorded():
    mc = correction_table(6, mode="monte_carlo", samples=5_000, seed=5, cross_check_entries=4)
    assert mc.cross_check is not None
    assert np.isfinite(mc.cross_check) and mc.cross_check >= 0
    ex = correction_table(6, mode="exact", samples=5_000, seed=5, cross_check_entries=4)
    assert ex.cross_check is not None
    assert np.isfinite(ex.cross_check) and ex.cross_check >= 0


def test_cache_round_trip(tmp_path):
    t = correction_table(6, mode="monte_carlo", samples=2_000, seed=6)
    path = tmp_path / "table.bin"
    write_correction_cache(path, t)
    back = read_correction_cache(path)
    assert back.p == t.p and back.mode == t.mode and back.samples == t.samples
    assert np.array_equal(back.values, t.values)
    assert np.array_equal(back.standard_errors, t.standard_errors)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTACACHE" + b"\x00" * 64)
    with pytest.raises(ConfigError):
        read_correction_cache(bad)


def test_correction_table_uses_cache(tmp_path):
    t1 = correction_table(6, mode="monte_carlo", samples=2_000, seed=7, cache_dir=tmp_path)
    t2 = correction_table(6, mode="monte_carlo", samples=2_000, seed=7, cache_dir=tmp_path)
    assert np.array_equal(t1.values, t2.values)
    assert len(list(tmp_path.glob("correction-*.bin"))) == 1


def test_constructor_rejects_bad_tables():
    p = 6
    good = correction_table(p, mode="exact").values
    tampered = good.copy()
    tampered[0, p - 1, 0, 0] = 1.0  # opposite first pair must stay zero
    with pytest.raises(ValueError):
        CorrectionTable(p=p, values=tampered)
    asym = good.copy()
    nz = tuple(np.argwhere(good > 0)[0])
    asym[nz] *= 2
    with pytest.raises(ValueError, match="negation"):
        CorrectionTable(p=p, values=asym)
    with pytest.raises(ValueError):
        CorrectionTable(p=p, values=-good)


# ---------------------------------------------------------------------------
# concentration diagnostics
# ---------------------------------------------------------------------------


def test_concentration_deviations_shape_and_sign():
    p = 8
    table = correction_table(p, mode="exact")
    rng = substream(8, "signals")
    thetas = rng.normal(scale=1.0 / np.sqrt(p), size=(3, p))
    devs = concentration_deviations(table, to_fourier(thetas))
    assert devs.shape == (3, int(table.nonzero_mask.sum()))
    assert np.all(devs >= 0)
    assert np.all(np.isfinite(devs))


def test_signal_squared_magnitudes_ordering():
    th = np.array([0.0, 0.0, 3.0, 4.0], dtype=complex)  # frequencies -2,-1,1,2
    x = signal_squared_magnitudes(th)
    assert np.allclose(x, [9.0, 16.0])
