from __future__ import annotations

import numpy as np
import pytest

from mranet.core import flatten4, freqs, negate_index, to_fourier, unflatten4
from mranet.errors import BudgetError, SymmetryError
from mranet.networks import contract
from mranet.ring import (
    RingPrecompute,
    VertexWeightTable,
    _freq_tables,
    _ring_kernel,
    precompute_G,
    probe_to_fourier,
    ring_contract,
    ring_network,
)


def random_signals(p, K, seed):
    rng = np.random.default_rng(seed)
    theta = rng.normal(scale=1 / np.sqrt(p), size=(K, p))
    return to_fourier(theta)


def dense_third_moment(theta_hats):
    # independent route: dense outer-product sum masked to the zero-sum support
    p = theta_hats.shape[1]
    f = np.array(freqs(p))
    support = (f[:, None, None] + f[None, :, None] + f[None, None, :]) == 0
    raw = np.einsum("ka,kb,kc->abc", theta_hats, theta_hats, theta_hats)
    return raw * support


def random_probe(p, seed):
    rng = np.random.default_rng(seed)
    return probe_to_fourier(rng.standard_normal((p,) * 5))


def test_weight_table_entries_match_manual_sum():
    p, K = 4, 2
    th = random_signals(p, K, 10)
    W = VertexWeightTable.from_signals(th).table
    f = list(freqs(p))
    for xi, fx in enumerate(f):
        for ii, fi in enumerate(f):
            diff = fi - fx
            if diff == 0 or abs(diff) > p // 2:
                assert W[xi, ii] == 0
            else:
                di = f.index(diff)
                manual = np.sum(th[:, negate_index(p, ii)] * th[:, xi] * th[:, di])
                assert abs(W[xi, ii] - manual) < 1e-12


def test_weight_table_routes_agree():
    p, K = 8, 3
    th = random_signals(p, K, 11)
    via_signals = VertexWeightTable.from_signals(th)
    via_tensor = VertexWeightTable.from_tensor(dense_third_moment(th), num_signals=K)
    assert np.max(np.abs(via_signals.table - via_tensor.table)) < 1e-12
    assert via_signals.num_signals == K


def test_from_tensor_rejects_asymmetric_input():
    rng = np.random.default_rng(12)
    bad = rng.standard_normal((4, 4, 4)) + 1j * rng.standard_normal((4, 4, 4))
    with pytest.raises(SymmetryError):
        VertexWeightTable.from_tensor(bad)


def test_zero_weights_give_zero_matrix():
    p = 4
    Wt = VertexWeightTable(p=p, table=np.zeros((p, p), dtype=complex))
    M = ring_contract(Wt, random_probe(p, 13))
    assert M.shape == (p * p, p * p)
    assert np.all(M == 0)


@pytest.mark.parametrize("p", [4, 6])
def test_ring_contract_matches_generic_executor(p):
    K = 2
    th = random_signals(p, K, 14)
    that = dense_third_moment(th)
    u_hat = random_probe(p, 15)
    fast = ring_contract(VertexWeightTable.from_tensor(that), u_hat)
    oracle = flatten4(contract(ring_network(that, u_hat)))
    scale = max(np.max(np.abs(oracle)), 1e-30)
    assert np.max(np.abs(fast - oracle)) / scale < 1e-10
    if p == 4:
        # bands this narrow have no surviving index chains; both routes must
        # agree that the matrix vanishes outright
        assert np.all(fast == 0) and np.max(np.abs(oracle)) < 1e-12
    else:
        assert np.max(np.abs(oracle)) > 0


def test_ring_contract_linear_in_probe():
    p = 6
    Wt = VertexWeightTable.from_signals(random_signals(p, 1, 16))
    u1 = random_probe(p, 17)
    u2 = random_probe(p, 18)
    lhs = ring_contract(Wt, u1 + u2)
    rhs = ring_contract(Wt, u1) + ring_contract(Wt, u2)
    scale = max(np.max(np.abs(rhs)), 1e-30)
    assert np.max(np.abs(rhs)) > 0
    assert np.max(np.abs(lhs - rhs)) / scale < 1e-12


def test_output_has_conjugate_negation_symmetry():
    p = 6
    Wt = VertexWeightTable.from_signals(random_signals(p, 2, 19))
    core = unflatten4(ring_contract(Wt, random_probe(p, 20)))
    flipped = np.conj(core[::-1, ::-1, ::-1, ::-1])
    assert np.max(np.abs(core)) > 0
    assert np.max(np.abs(core - flipped)) < 1e-12 * max(np.max(np.abs(core)), 1.0)


def test_half_computation_matches_full_kernel():
    p = 6
    Wt = VertexWeightTable.from_signals(random_signals(p, 2, 21))
    u_hat = random_probe(p, 22)
    freq_of, idx_table = _freq_tables(p)
    Uneg = np.ascontiguousarray(u_hat[::-1, ::-1, ::-1, ::-1, ::-1])
    smask = np.ones((p, p, p, p), dtype=np.uint8)
    full = _ring_kernel(
        np.ascontiguousarray(Wt.table), Uneg, freq_of, idx_table, smask, p, p
    )
    halved = unflatten4(ring_contract(Wt, u_hat))
    assert np.max(np.abs(full)) > 0
    assert np.max(np.abs(full - halved)) < 1e-12 * max(np.max(np.abs(full)), 1.0)


def test_smallest_band_is_identically_zero():
    # with two frequencies every vertex chain breaks: three odd frequencies
    # cannot sum to zero, so the weight table and the matrix both vanish
    p = 2
    Wt = VertexWeightTable.from_signals(random_signals(p, 3, 23))
    assert np.all(Wt.table == 0)
    assert np.all(ring_contract(Wt, random_probe(p, 24)) == 0)


def achievable_probe_sums(p, count=5):
    vals = freqs(p)
    sums = {0}
    for _ in range(count):
        sums = {s + v for s in sums for v in vals}
    return sums


@pytest.mark.parametrize("p", [2, 4])
def test_entries_with_unreachable_probe_sum_vanish(p):
    Wt = VertexWeightTable.from_signals(random_signals(p, 2, 25))
    core = unflatten4(ring_contract(Wt, random_probe(p, 26)))
    reachable = achievable_probe_sums(p)
    f = freqs(p)
    for ai, fa in enumerate(f):
        for bi, fb in enumerate(f):
            for ci, fc in enumerate(f):
                for di, fd in enumerate(f):
                    if -(fa + fb + fc + fd) not in reachable:
                        assert core[ai, bi, ci, di] == 0


def test_correction_factor_multiplies_entrywise():
    p = 6
    Wt = VertexWeightTable.from_signals(random_signals(p, 2, 27))
    u_hat = random_probe(p, 28)
    rng = np.random.default_rng(29)
    S = rng.uniform(0.5, 2.0, size=(p, p, p, p))
    keep = rng.random((p, p, p, p)) < 0.7
    keep &= keep[::-1, ::-1, ::-1, ::-1]  # zero pattern symmetric under negation
    S = S * keep
    S = 0.5 * (S + S[::-1, ::-1, ::-1, ::-1])  # negation-symmetric values
    plain = unflatten4(ring_contract(Wt, u_hat))
    corrected = ring_contract(Wt, u_hat, correction=S)
    assert np.max(np.abs(plain)) > 0
    assert np.max(np.abs(corrected - flatten4(S * plain))) < 1e-12


def test_precompute_matches_direct_path():
    p = 6
    Wt = VertexWeightTable.from_signals(random_signals(p, 2, 30))
    pre = precompute_G(Wt)
    assert isinstance(pre, RingPrecompute)
    for seed in (31, 32):
        u_hat = random_probe(p, seed)
        direct = ring_contract(Wt, u_hat)
        cached = pre.contract(u_hat)
        scale = max(np.max(np.abs(direct)), 1e-30)
        assert np.max(np.abs(direct)) > 0
        assert np.max(np.abs(direct - cached)) / scale < 1e-12
    rng = np.random.default_rng(33)
    S = rng.uniform(0.0, 2.0, size=(p, p, p, p))
    S = 0.5 * (S + S[::-1, ::-1, ::-1, ::-1])
    u_hat = random_probe(p, 34)
    assert np.max(
        np.abs(ring_contract(Wt, u_hat, correction=S) - pre.contract(u_hat, correction=S))
    ) < 1e-12 * max(np.max(np.abs(ring_contract(Wt, u_hat, correction=S))), 1.0)


def test_precompute_small_band_slot_bound():
    p = 2
    Wt = VertexWeightTable.from_signals(random_signals(p, 1, 35))
    pre = precompute_G(Wt)
    assert pre.nonzero_count <= (2 * p + 1) * p**4 * p**4
    assert np.all(np.isfinite(pre.table.view(np.float64)))


def test_precompute_budget_refusal():
    p = 16
    Wt = VertexWeightTable(p=p, table=np.zeros((p, p), dtype=complex))
    with pytest.raises(BudgetError, match="memory cap"):
        precompute_G(Wt, mem_cap_bytes=2**20)


def test_ring_contract_is_deterministic():
    p = 6
    Wt = VertexWeightTable.from_signals(random_signals(p, 2, 36))
    u_hat = random_probe(p, 37)
    assert np.array_equal(ring_contract(Wt, u_hat), ring_contract(Wt, u_hat))


def test_asymmetric_probe_rejected():
    p = 4
    Wt = VertexWeightTable.from_signals(random_signals(p, 1, 38))
    rng = np.random.default_rng(39)
    bad = rng.standard_normal((p,) * 5) + 1j * rng.standard_normal((p,) * 5)
    with pytest.raises(SymmetryError):
        ring_contract(Wt, bad)


def test_probe_transform_produces_symmetric_tensor():
    p = 4
    u_hat = random_probe(p, 40)
    flipped = u_hat[::-1, ::-1, ::-1, ::-1, ::-1]
    assert np.max(np.abs(np.conj(u_hat) - flipped)) < 1e-12
