"""Entrywise correction factors for the ring contraction.

For Gaussian signals each surviving ring chain carries a product of fourteen
squared frequency magnitudes (nine ring indices, five probe indices).  The
correction divides every matrix entry by the exact expectation of that chain
sum so that the planted-signal contribution has unit scale.  Entries with
``a = -b`` or ``c = -d`` are zeroed outright; entries whose chain sum is empty
are also zeroed (they are identically zero in the contraction anyway).

Two computation modes:

* ``exact`` — enumerate every chain and accumulate the closed-form moment
  ``prod_m k_m! p^{-k_m}`` where ``k_m`` counts chain indices of absolute
  value ``m`` (squared magnitudes at distinct absolute frequencies are
  independent exponentials of mean ``1/p``).
* ``monte_carlo`` — average the chain sum over sampled magnitudes, evaluated
  for all entries at once through a transfer-matrix factorization
  (``Tr(A_a B A_c B A_b B A_d B B)``) at ``O(p^6)`` per draw.

At ``p <= 4`` no chain survives at all: consecutive chain indices are linked
by steps of magnitude at most ``p/2``, which makes the index transition graph
bipartite, and after the eight inner steps the closing probe frequency is
forced to ``0`` or out of band.  Those tables are identically zero.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange

from .core import check_band_dim, freqs
from .errors import ConfigError
from .ring import _freq_tables
from .rng import substream

__all__ = [
    "CorrectionTable",
    "expected_s",
    "chain_sum_direct",
    "chain_sums_all",
    "signal_squared_magnitudes",
    "correction_table",
    "concentration_deviations",
    "DEFAULT_MC_SAMPLES",
    "EXACT_MODE_MAX_P",
]

DEFAULT_MC_SAMPLES = 100_000
EXACT_MODE_MAX_P = 10
_MAX_CHAIN_FACTORS = 14
_FACTORIALS = np.array([math.factorial(k) for k in range(_MAX_CHAIN_FACTORS + 1)], dtype=np.float64)
_CACHE_MAGIC = b"MRNCORR1"


def _chain_tuples(a: int, b: int, c: int, d: int, p: int):
    """Yield the 14 frequencies of every valid chain for one entry."""
    f = [int(v) for v in freqs(p)]
    valid = set(f)
    for i1 in f:
        i2 = i1 - a
        if i2 not in valid:
            continue
        for j1 in f:
            i3 = i2 - j1
            if i3 not in valid:
                continue
            i4 = i3 - c
            if i4 not in valid:
                continue
            for j2 in f:
                i5 = i4 - j2
                if i5 not in valid:
                    continue
                i6 = i5 - b
                if i6 not in valid:
                    continue
                for j3 in f:
                    i7 = i6 - j3
                    if i7 not in valid:
                        continue
                    i8 = i7 - d
                    if i8 not in valid:
                        continue
                    for j4 in f:
                        i9 = i8 - j4
                        if i9 not in valid:
                            continue
                        j5 = i9 - i1
                        if j5 not in valid:
                            continue
                        yield (i1, i2, i3, i4, i5, i6, i7, i8, i9, j1, j2, j3, j4, j5)


def expected_s(a: int, b: int, c: int, d: int, p: int) -> float:
    """Exact expectation of the chain sum for one entry (frequency arguments).

    Groups each chain's 14 indices by absolute value ``m`` with multiplicity
    ``k_m`` and accumulates ``prod_m k_m! p^{-k_m}``.
    """
    check_band_dim(p)
    valid = set(int(v) for v in freqs(p))
    for name, v in (("a", a), ("b", b), ("c", c), ("d", d)):
        if v not in valid:
            raise ValueError(f"{name}={v} is not a valid frequency for p={p}")
    total = 0.0
    for chain in _chain_tuples(a, b, c, d, p):
        counts: dict[int, int] = {}
        for v in chain:
            counts[abs(v)] = counts.get(abs(v), 0) + 1
        term = 1.0
        for k in counts.values():
            term *= math.factorial(k)
        total += term * p**-14
    return total


@njit(cache=True, parallel=True)
def _exact_table_kernel(freq_of, idx_table, factorials, p):  # pragma: no cover
    out = np.zeros((p, p, p, p), dtype=np.float64)
    half = p // 2
    pm14 = p ** (-14.0)
    for flat in prange(p**4):
        a_i = flat // (p * p * p)
        rem = flat - a_i * p * p * p
        b_i = rem // (p * p)
        rem -= b_i * p * p
        c_i = rem // p
        d_i = rem - c_i * p
        fa = freq_of[a_i]
        fb = freq_of[b_i]
        fc = freq_of[c_i]
        fd = freq_of[d_i]
        total = 0.0
        cnt = np.zeros(half + 1, dtype=np.int64)
        for i1 in range(p):
            f1 = freq_of[i1]
            i2 = idx_table[f1 - fa + p]
            if i2 < 0:
                continue
            f2 = freq_of[i2]
            for j1 in range(p):
                fj1 = freq_of[j1]
                i3 = idx_table[f2 - fj1 + p]
                if i3 < 0:
                    continue
                f3 = freq_of[i3]
                i4 = idx_table[f3 - fc + p]
                if i4 < 0:
                    continue
                f4 = freq_of[i4]
                for j2 in range(p):
                    fj2 = freq_of[j2]
                    i5 = idx_table[f4 - fj2 + p]
                    if i5 < 0:
                        continue
                    f5 = freq_of[i5]
                    i6 = idx_table[f5 - fb + p]
                    if i6 < 0:
                        continue
                    f6 = freq_of[i6]
                    for j3 in range(p):
                        fj3 = freq_of[j3]
                        i7 = idx_table[f6 - fj3 + p]
                        if i7 < 0:
                            continue
                        f7 = freq_of[i7]
                        i8 = idx_table[f7 - fd + p]
                        if i8 < 0:
                            continue
                        f8 = freq_of[i8]
                        for j4 in range(p):
                            fj4 = freq_of[j4]
                            i9 = idx_table[f8 - fj4 + p]
                            if i9 < 0:
                                continue
                            f9 = freq_of[i9]
                            fj5 = f9 - f1
                            if fj5 == 0 or fj5 > half or fj5 < -half:
                                continue
                            for m in range(half + 1):
                                cnt[m] = 0
                            cnt[abs(f1)] += 1
                            cnt[abs(f2)] += 1
                            cnt[abs(f3)] += 1
                            cnt[abs(f4)] += 1
                            cnt[abs(f5)] += 1
                            cnt[abs(f6)] += 1
                            cnt[abs(f7)] += 1
                            cnt[abs(f8)] += 1
                            cnt[abs(f9)] += 1
                            cnt[abs(fj1)] += 1
                            cnt[abs(fj2)] += 1
                            cnt[abs(fj3)] += 1
                            cnt[abs(fj4)] += 1
                            cnt[abs(fj5)] += 1
                            term = pm14
                            for m in range(1, half + 1):
                                term *= factorials[cnt[m]]
                            total += term
        out[a_i, b_i, c_i, d_i] = total
    return out


def exact_expected_table(p: int) -> np.ndarray:
    """Exact chain-sum expectations for all entries at once."""
    check_band_dim(p)
    freq_of, idx_table = _freq_tables(p)
    return _exact_table_kernel(freq_of, idx_table, _FACTORIALS, p)


def signal_squared_magnitudes(theta_hat: np.ndarray) -> np.ndarray:
    """Squared magnitudes per absolute frequency, ``x[m-1] = |theta_hat_m|^2``."""
    theta_hat = np.asarray(theta_hat)
    p = theta_hat.shape[-1]
    check_band_dim(p)
    # positive frequencies occupy the upper half of the canonical order
    return np.abs(theta_hat[..., p // 2 :]) ** 2


def chain_sum_direct(x_abs: np.ndarray, a: int, b: int, c: int, d: int, p: int) -> float:
    """Chain sum for one entry and one draw by direct enumeration (oracle)."""
    x_abs = np.asarray(x_abs, dtype=np.float64)
    total = 0.0
    for chain in _chain_tuples(a, b, c, d, p):
        term = 1.0
        for v in chain:
            term *= x_abs[abs(v) - 1]
        total += term
    return float(total)


def chain_sums_all(x_abs: np.ndarray, p: int) -> np.ndarray:
    """Chain sums for every entry via the transfer-matrix factorization.

    ``x_abs`` has shape ``(B, p/2)`` (or ``(p/2,)``): squared magnitudes per
    absolute frequency and draw.  Returns ``(B, p, p, p, p)`` (or squeezed
    ``(p, p, p, p)``) real chain sums, at ``O(p^6)`` per draw.
    """
    check_band_dim(p)
    squeeze = np.asarray(x_abs).ndim == 1
    x_abs = np.atleast_2d(np.asarray(x_abs, dtype=np.float64))
    if x_abs.shape[1] != p // 2:
        raise ValueError(f"need {p // 2} magnitudes per draw, got {x_abs.shape[1]}")
    B = x_abs.shape[0]
    freq_of, idx_table = _freq_tables(p)
    # x over signed frequencies: |theta_{-m}|^2 = |theta_m|^2
    x_full = x_abs[:, np.abs(freq_of) - 1]  # (B, p)
    diff = freq_of[:, None] - freq_of[None, :]
    diff_valid = (diff != 0) & (np.abs(diff) <= p // 2)
    diff_abs = np.where(diff_valid, np.abs(diff) - 1, 0)
    X = np.where(diff_valid[None, :, :], x_abs[:, diff_abs], 0.0)  # (B, p, p)
    Bmat = x_full[:, :, None] * X
    F = np.zeros((p, B, p, p))
    for y in range(p):
        rowmap = idx_table[freq_of - freq_of[y] + p]
        valid = rowmap >= 0
        gathered = Bmat[:, np.where(valid, rowmap, 0), :]
        gathered[:, ~valid, :] = 0.0
        F[y] = x_full[:, :, None] * gathered
    H = np.einsum("dBij,Bjk->dBik", F, Bmat, optimize=True)
    P = np.einsum("aBij,cBjk->acBik", F, F, optimize=True)
    Q = np.einsum("bBij,dBjk->bdBik", F, H, optimize=True)
    P2 = P.transpose(2, 0, 1, 3, 4).reshape(B, p * p, p * p)
    Q2 = Q.transpose(2, 0, 1, 4, 3).reshape(B, p * p, p * p)
    s = np.matmul(P2, Q2.transpose(0, 2, 1)).reshape(B, p, p, p, p)
    # axes currently (B, a, c, b, d) -> (B, a, b, c, d)
    s = s.transpose(0, 1, 3, 2, 4)
    return s[0] if squeeze else s


@dataclass(frozen=True)
class CorrectionTable:
    """Validated entrywise correction factors.

    ``values[a,b,c,d]`` is ``1/E[chain sum]`` off the excluded slices and zero
    on them (and wherever no chain survives).  ``standard_errors`` holds the
    per-entry standard error of the underlying Monte Carlo mean (None for
    exact mode); ``cross_check`` records the max relative disagreement against
    the other mode when requested.
    """

    p: int
    values: np.ndarray = field(repr=False)
    mode: str = "exact"
    samples: int | None = None
    seed: int | None = None
    #: min/max of the p^9-scaled chain-sum expectations over retained entries
    #: (None when the table is identically zero)
    c1_measured: float | None = None
    c2_measured: float | None = None
    standard_errors: np.ndarray | None = field(default=None, repr=False)
    cross_check: float | None = None

    def __post_init__(self) -> None:
        check_band_dim(self.p)
        p = self.p
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (p, p, p, p):
            raise ValueError(f"values must be {(p, p, p, p)}, got {v.shape}")
        object.__setattr__(self, "values", v)
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("correction factors must be finite and nonnegative")
        eye_flip = np.arange(p)[::-1]
        ab_excluded = np.zeros((p, p), dtype=bool)
        ab_excluded[np.arange(p), eye_flip] = True  # b = -a
        if np.any(v[ab_excluded, :, :] != 0):
            raise ValueError("entries with opposite first index pair must be zero")
        if np.any(v.transpose(2, 3, 0, 1)[ab_excluded, :, :] != 0):
            raise ValueError("entries with opposite second index pair must be zero")
        if not np.array_equal(v, v[::-1, ::-1, ::-1, ::-1]):
            raise ValueError("correction table must be negation symmetric")

    @property
    def nonzero_mask(self) -> np.ndarray:
        return self.values != 0


def _excluded_mask(p: int) -> np.ndarray:
    """Entries with ``b = -a`` or ``d = -c``."""
    eye_flip = np.zeros((p, p), dtype=bool)
    eye_flip[np.arange(p), np.arange(p)[::-1]] = True
    return eye_flip[:, :, None, None] | eye_flip[None, None, :, :]


def _table_from_expectations(
    exp_s: np.ndarray, p: int, **meta
) -> CorrectionTable:
    values = np.zeros_like(exp_s)
    keep = (~_excluded_mask(p)) & (exp_s > 0)
    values[keep] = 1.0 / exp_s[keep]
    values = 0.5 * (values + values[::-1, ::-1, ::-1, ::-1])
    nz = values[values != 0]
    scaled = p**9 / nz if nz.size else None
    c1 = float(np.min(scaled)) if nz.size else None
    c2 = float(np.max(scaled)) if nz.size else None
    se = meta.pop("standard_errors", None)
    if se is not None:
        se = 0.5 * (se + se[::-1, ::-1, ::-1, ::-1])
    return CorrectionTable(
        p=p, values=values, c1_measured=c1, c2_measured=c2, standard_errors=se, **meta
    )


def _monte_carlo_expectations(
    p: int, samples: int, rng: np.random.Generator, batch: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error of the chain sum per entry."""
    acc = np.zeros((p, p, p, p))
    acc2 = np.zeros((p, p, p, p))
    done = 0
    while done < samples:
        nb = min(batch, samples - done)
        x_abs = rng.exponential(scale=1.0 / p, size=(nb, p // 2))
        s = chain_sums_all(x_abs, p)
        acc += s.sum(axis=0)
        acc2 += (s * s).sum(axis=0)
        done += nb
    mean = acc / samples
    var = np.maximum(acc2 / samples - mean**2, 0.0)
    se = np.sqrt(var / samples)
    return mean, se


def _cache_path(cache_dir, p: int, mode: str, samples: int | None, seed: int | None) -> Path:
    tag = f"p{p}-{mode}" + ("" if mode == "exact" else f"-n{samples}-seed{seed}")
    return Path(cache_dir) / f"correction-{tag}.bin"


def write_correction_cache(path, table: CorrectionTable) -> None:
    """Documented binary layout: magic, version, p, mode, samples, seed, f64 values."""
    mode_code = 0 if table.mode == "exact" else 1
    header = _CACHE_MAGIC + struct.pack(
        "<IIBQQ",
        1,
        table.p,
        mode_code,
        table.samples or 0,
        table.seed or 0,
    )
    payload = table.values.astype("<f8").tobytes(order="C")
    se_flag = b"\x01" if table.standard_errors is not None else b"\x00"
    se_payload = (
        table.standard_errors.astype("<f8").tobytes(order="C")
        if table.standard_errors is not None
        else b""
    )
    Path(path).write_bytes(header + payload + se_flag + se_payload)


def read_correction_cache(path) -> CorrectionTable:
    raw = Path(path).read_bytes()
    if raw[:8] != _CACHE_MAGIC:
        raise ConfigError(f"{path} is not a correction cache (bad magic)")
    version, p, mode_code, samples, seed = struct.unpack("<IIBQQ", raw[8:33])
    if version != 1:
        raise ConfigError(f"unsupported correction cache version {version}")
    n = p**4
    offset = 33
    values = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape((p,) * 4)
    offset += 8 * n
    se = None
    if raw[offset : offset + 1] == b"\x01":
        se = np.frombuffer(raw, dtype="<f8", count=n, offset=offset + 1).reshape((p,) * 4)
    return CorrectionTable(
        p=p,
        values=values.copy(),
        mode="exact" if mode_code == 0 else "monte_carlo",
        samples=samples or None,
        seed=seed if mode_code == 1 else None,
        c1_measured=None,
        c2_measured=None,
        standard_errors=None if se is None else se.copy(),
    )


def correction_table(
    p: int,
    mode: str = "auto",
    samples: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
    cache_dir=None,
    cross_check_entries: int = 0,
) -> CorrectionTable:
    """Build (or load) the correction table.

    ``auto`` uses exact enumeration up to p=10 and Monte Carlo above.  With
    ``cache_dir`` set, a previously written table with the same key is reused.
    ``cross_check_entries > 0`` re-evaluates that many random nonzero entries
    in the other mode and records the max relative disagreement.
    """
    check_band_dim(p)
    if mode == "auto":
        mode = "exact" if p <= EXACT_MODE_MAX_P else "monte_carlo"
    if mode not in ("exact", "monte_carlo"):
        raise ConfigError(f"unknown correction mode {mode!r}")
    if mode == "monte_carlo" and samples < 1:
        raise ConfigError("monte_carlo mode needs at least one sample")
    cache_file = None
    if cache_dir is not None:
        cache_file = _cache_path(cache_dir, p, mode, samples, seed)
        if cache_file.is_file():
            cached = read_correction_cache(cache_file)
            if cached.p == p and cached.mode == mode:
                return cached
    if mode == "exact":
        table = _table_from_expectations(exact_expected_table(p), p, mode="exact")
    else:
        rng = substream(seed, "correction-table")
        mean, se = _monte_carlo_expectations(p, samples, rng)
        table = _table_from_expectations(
            mean,
            p,
            mode="monte_carlo",
            samples=samples,
            seed=seed,
            standard_errors=se,
        )
    if cross_check_entries > 0:
        table = _with_cross_check(table, cross_check_entries, samples, seed)
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        write_correction_cache(cache_file, table)
    return table


def _with_cross_check(
    table: CorrectionTable, entries: int, samples: int, seed: int
) -> CorrectionTable:
    p = table.p
    rng = substream(seed, "correction-crosscheck")
    nz = np.argwhere(table.nonzero_mask)
    if nz.size == 0:
        return table
    picks = nz[rng.choice(len(nz), size=min(entries, len(nz)), replace=False)]
    f = list(freqs(p))
    worst = 0.0
    if table.mode == "exact":
        # re-estimate the picked expectations by Monte Carlo
        draws = rng.exponential(scale=1.0 / p, size=(samples, p // 2))
        s = chain_sums_all(draws, p)
        for a_i, b_i, c_i, d_i in picks:
            mc = float(np.mean(s[:, a_i, b_i, c_i, d_i]))
            ex = 1.0 / table.values[a_i, b_i, c_i, d_i]
            worst = max(worst, abs(mc - ex) / ex)
    else:
        for a_i, b_i, c_i, d_i in picks:
            ex = expected_s(f[a_i], f[b_i], f[c_i], f[d_i], p)
            mc = 1.0 / table.values[a_i, b_i, c_i, d_i]
            worst = max(worst, abs(mc - ex) / ex)
    return CorrectionTable(
        p=p,
        values=table.values,
        mode=table.mode,
        samples=table.samples,
        seed=table.seed,
        c1_measured=table.c1_measured,
        c2_measured=table.c2_measured,
        standard_errors=table.standard_errors,
        cross_check=worst,
    )


def concentration_deviations(
    table: CorrectionTable, theta_hats: np.ndarray
) -> np.ndarray:
    """|S * chain_sum - 1| over nonzero entries, one row per signal draw.

    For a Gaussian signal the corrected chain sum concentrates near 1; the
    returned deviations quantify how tightly, per draw and entry.
    """
    theta_hats = np.atleast_2d(np.asarray(theta_hats, dtype=np.complex128))
    p = table.p
    if theta_hats.shape[1] != p:
        raise ValueError(f"signals must have length {p}")
    x_abs = signal_squared_magnitudes(theta_hats)
    s = chain_sums_all(x_abs, p)
    mask = table.nonzero_mask
    prods = s[:, mask] * table.values[mask][None, :]
    return np.abs(prods - 1.0)
