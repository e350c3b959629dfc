"""File formats for experiment artifacts.

Four families of files, all documented in the README:

* a binary tensor container (fixed header followed by little-endian f64
  real/imaginary pairs) for moment tensors, signal sets, and observation
  batches;
* CSV views of the same data for small band sizes, plus the per-trial
  summary table;
* JSON files carrying per-trial diagnostics and run manifests;
* a line-oriented ``key = value`` config format whose key set matches
  :class:`~mranet.spectral.ExperimentConfig` exactly — unknown keys are
  errors, never silently ignored.

The correction-table cache format lives with the table code and is
re-exported here (:func:`write_correction_cache`,
:func:`read_correction_cache`).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import platform
import struct
import subprocess
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .correction import read_correction_cache, write_correction_cache
from .errors import ConfigError
from .moments import ObservationBatch, SignalSet
from .spectral import ExperimentConfig, TrialDiagnostics

__all__ = [
    "CONTAINER_VERSION",
    "RunManifest",
    "TensorContainer",
    "artifact_version",
    "build_experiment_config",
    "parse_config_text",
    "read_config_file",
    "read_container",
    "read_correction_cache",
    "read_diagnostics_json",
    "read_moment_csv",
    "read_observation_csv",
    "write_correction_cache",
    "write_diagnostics_json",
    "write_moment_container",
    "write_moment_csv",
    "write_observation_container",
    "write_observation_csv",
    "write_signal_container",
    "write_summary_csv",
]


# ---------------------------------------------------------------------------
# binary tensor container
#
# header (36 bytes, little-endian):
#   magic   6s  b"MRANET"
#   version u16 container format version (currently 1)
#   p       u32 band dimension
#   K       u32 signal components (0 when not applicable/unknown)
#   d       u32 tensor order (3 for moments, 2 for signal/observation matrices)
#   layout  8s  payload kind, NUL-padded: b"moment", b"signals", b"obsreal"
#   count   u64 number of complex elements that follow
# payload: count little-endian (real, imag) f64 pairs in C index order,
# frequency axes in canonical order -p/2..-1, 1..p/2.

_MAGIC = b"MRANET"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<6sHIII8sQ")
_LAYOUTS = ("moment", "signals", "obsreal")


@dataclass(frozen=True)
class TensorContainer:
    """Decoded contents of a binary tensor container file."""

    layout: str
    p: int
    K: int
    d: int
    array: np.ndarray = field(repr=False)

    def signal_set(self) -> SignalSet:
        if self.layout != "signals":
            raise ValueError(f"container holds {self.layout!r}, not signals")
        return SignalSet(p=self.p, signals=self.array)

    def observation_batch(self, sigma: float = 0.0) -> ObservationBatch:
        if self.layout != "obsreal":
            raise ValueError(f"container holds {self.layout!r}, not observations")
        return ObservationBatch(y=self.array, sigma=sigma)


def _write_container(path, layout: str, p: int, K: int, data: np.ndarray) -> None:
    flat = np.ascontiguousarray(data, dtype=np.complex128).reshape(-1)
    pairs = np.empty((flat.size, 2), dtype="<f8")
    pairs[:, 0] = flat.real
    pairs[:, 1] = flat.imag
    header = _HEADER.pack(
        _MAGIC,
        CONTAINER_VERSION,
        p,
        K,
        data.ndim,
        layout.encode("ascii").ljust(8, b"\x00"),
        flat.size,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pairs.tobytes())


def write_moment_container(path, that: np.ndarray, K: int = 0) -> None:
    """Write a dense ``(p, p, p)`` frequency-basis moment tensor."""
    that = np.asarray(that, dtype=np.complex128)
    if that.ndim != 3 or len(set(that.shape)) != 1:
        raise ValueError(f"expected a cubic order-3 tensor, got shape {that.shape}")
    _write_container(path, "moment", that.shape[0], K, that)


def write_signal_container(path, signals: SignalSet) -> None:
    """Write a signal set as its ``(K, p)`` frequency-coordinate matrix."""
    _write_container(path, "signals", signals.p, signals.K, signals.signals)


def write_observation_container(path, batch: ObservationBatch, K: int = 0) -> None:
    """Write real-basis observations ``(n, p)``; imaginary halves are zero."""
    _write_container(path, "obsreal", batch.p, K, batch.y.astype(np.complex128))


def read_container(path) -> TensorContainer:
    """Read any container written by the ``write_*_container`` functions."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: too short to hold a container header")
    magic, version, p, K, d, layout_raw, count = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a tensor container (bad magic {magic!r})")
    if version != CONTAINER_VERSION:
        raise ValueError(
            f"{path}: unsupported container version {version} "
            f"(this build reads version {CONTAINER_VERSION})"
        )
    layout = layout_raw.rstrip(b"\x00").decode("ascii")
    if layout not in _LAYOUTS:
        raise ValueError(f"{path}: unknown payload layout {layout!r}")
    expected = _HEADER.size + 16 * count
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload is {len(raw) - _HEADER.size} bytes, "
            f"expected {16 * count} for {count} elements"
        )
    pairs = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(-1, 2)
    flat = pairs[:, 0] + 1j * pairs[:, 1]
    if layout == "moment":
        if d != 3 or count != p**3:
            raise ValueError(f"{path}: moment payload has {count} elements, not p^3")
        array: np.ndarray = flat.reshape(p, p, p)
    elif layout == "signals":
        if d != 2 or count != K * p:
            raise ValueError(f"{path}: signal payload has {count} elements, not K*p")
        array = flat.reshape(K, p)
    else:
        if d != 2 or p == 0 or count % p != 0:
            raise ValueError(f"{path}: observation payload size {count} not n*p")
        if np.any(pairs[:, 1] != 0.0):
            raise ValueError(f"{path}: real observation payload has imaginary parts")
        array = pairs[:, 0].reshape(count // p, p).copy()
    return TensorContainer(layout=layout, p=p, K=K, d=d, array=array)


# ---------------------------------------------------------------------------
# CSV views (small p)


def _format_float(x: float) -> str:
    return repr(float(x))


def write_moment_csv(path, that: np.ndarray) -> None:
    """All entries of a moment tensor as ``f1,f2,f3,real,imag`` rows."""
    that = np.asarray(that, dtype=np.complex128)
    if that.ndim != 3 or len(set(that.shape)) != 1:
        raise ValueError(f"expected a cubic order-3 tensor, got shape {that.shape}")
    p = that.shape[0]
    half = p // 2
    fs = [f for f in range(-half, half + 1) if f != 0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["f1", "f2", "f3", "real", "imag"])
        for i1, f1 in enumerate(fs):
            for i2, f2 in enumerate(fs):
                for i3, f3 in enumerate(fs):
                    z = that[i1, i2, i3]
                    writer.writerow(
                        [f1, f2, f3, _format_float(z.real), _format_float(z.imag)]
                    )


def read_moment_csv(path) -> np.ndarray:
    """Rebuild the dense tensor written by :func:`write_moment_csv`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["f1", "f2", "f3", "real", "imag"]:
        raise ValueError(f"{path}: not a moment CSV (bad header)")
    count = len(rows) - 1
    p = round(count ** (1 / 3))
    if p**3 != count or p % 2 != 0 or p == 0:
        raise ValueError(f"{path}: {count} rows do not form a full even-p grid")
    half = p // 2
    index = {f: (f + half if f < 0 else f + half - 1) for f in range(-half, half + 1) if f != 0}
    out = np.full((p, p, p), np.nan, dtype=np.complex128)
    for f1, f2, f3, re, im in rows[1:]:
        try:
            pos = (index[int(f1)], index[int(f2)], index[int(f3)])
        except (KeyError, ValueError):
            raise ValueError(f"{path}: frequency triple ({f1},{f2},{f3}) out of band")
        out[pos] = float(re) + 1j * float(im)
    if np.any(np.isnan(out)):
        raise ValueError(f"{path}: grid is missing entries")
    return out


def write_observation_csv(path, batch: ObservationBatch) -> None:
    """Observations as one row per sample: ``sample,x0..x{p-1}``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample"] + [f"x{j}" for j in range(batch.p)])
        for i, row in enumerate(batch.y):
            writer.writerow([i] + [_format_float(v) for v in row])


def read_observation_csv(path, sigma: float = 0.0) -> ObservationBatch:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "sample":
        raise ValueError(f"{path}: not an observation CSV (bad header)")
    p = len(rows[0]) - 1
    y = np.array([[float(v) for v in row[1:]] for row in rows[1:]], dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != p:
        raise ValueError(f"{path}: ragged rows")
    return ObservationBatch(y=y, sigma=sigma)


# ---------------------------------------------------------------------------
# per-trial diagnostics: JSON and the CSV summary table

_DIAG_FORMAT = "mranet-diagnostics"
_DIAG_VERSION = 1


def _diag_to_dict(diag: TrialDiagnostics) -> dict:
    out = dataclasses.asdict(diag)
    for key in ("alpha_tilde", "raw_correlations", "orbit_correlations"):
        if out[key] is not None:
            out[key] = list(out[key])
    return out


def _diag_from_dict(data: dict) -> TrialDiagnostics:
    kwargs = dict(data)
    for key in ("alpha_tilde", "raw_correlations", "orbit_correlations"):
        if kwargs.get(key) is not None:
            kwargs[key] = tuple(kwargs[key])
    return TrialDiagnostics(**kwargs)


def write_diagnostics_json(path, diagnostics, run: dict | None = None) -> None:
    """Per-trial diagnostics, with an optional run-level info block."""
    doc = {
        "format": _DIAG_FORMAT,
        "version": _DIAG_VERSION,
        "run": run or {},
        "trials": [_diag_to_dict(d) for d in diagnostics],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_diagnostics_json(path) -> tuple[list[TrialDiagnostics], dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != _DIAG_FORMAT:
        raise ValueError(f"{path}: not a diagnostics file")
    if doc.get("version") != _DIAG_VERSION:
        raise ValueError(f"{path}: unsupported diagnostics version {doc.get('version')}")
    return [_diag_from_dict(d) for d in doc["trials"]], doc.get("run", {})


def write_summary_csv(path, diagnostics) -> None:
    """One row per trial: correlations per component, eigenvalues, wall time.

    Correlation columns are sized by the widest trial; trials without
    recorded correlations leave the cells empty.
    """
    diags = list(diagnostics)

    def width(attr: str) -> int:
        return max((len(getattr(d, attr) or ()) for d in diags), default=0)

    raw_k = width("raw_correlations")
    orbit_k = width("orbit_correlations")
    header = (
        ["trial", "seed"]
        + [f"raw_corr_{k}" for k in range(raw_k)]
        + [f"orbit_corr_{k}" for k in range(orbit_k)]
        + ["stage1_eigenvalue", "stage2_eigenvalue", "wall_time_seconds"]
    )

    def cells(values, k: int) -> list[str]:
        vals = list(values or ())
        return [_format_float(v) for v in vals] + [""] * (k - len(vals))

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for d in diags:
            writer.writerow(
                [d.trial, d.seed]
                + cells(d.raw_correlations, raw_k)
                + cells(d.orbit_correlations, orbit_k)
                + [
                    _format_float(d.stage1_eigenvalue),
                    _format_float(d.stage2_eigenvalue),
                    _format_float(d.wall_time_seconds),
                ]
            )


# ---------------------------------------------------------------------------
# config files


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment; blanks ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


_INT_KEYS = frozenset({"p", "K", "L", "seed", "mem_cap_bytes", "planted_k"})
_OPT_INT_KEYS = frozenset({"n", "threads"})
_FLOAT_KEYS = frozenset({"sigma", "planted_alpha", "planted_noise"})
_OPT_FLOAT_KEYS = frozenset({"epsilon"})
_BOOL_KEYS = frozenset({"use_precompute", "planted_u"})
_ALL_KEYS = _INT_KEYS | _OPT_INT_KEYS | _FLOAT_KEYS | _OPT_FLOAT_KEYS | _BOOL_KEYS
assert _ALL_KEYS == {f.name for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key: str, value: str):
    text = value.strip()
    optional = key in _OPT_INT_KEYS or key in _OPT_FLOAT_KEYS
    if optional and text.lower() in ("", "none", "null"):
        return None
    try:
        if key in _INT_KEYS or key in _OPT_INT_KEYS:
            return int(text)
        if key in _FLOAT_KEYS or key in _OPT_FLOAT_KEYS:
            return float(text)
        lowered = text.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None


def build_experiment_config(
    mapping: dict[str, str], overrides: dict | None = None
) -> ExperimentConfig:
    """Typed, validated config from string key/values plus typed overrides.

    Unknown keys are errors by design: a misspelled knob must fail loudly,
    not silently run the default experiment.
    """
    unknown = sorted(set(mapping) - _ALL_KEYS)
    if unknown:
        raise ConfigError(
            f"unknown config keys: {', '.join(unknown)} "
            f"(valid keys: {', '.join(sorted(_ALL_KEYS))})"
        )
    kwargs = {key: _coerce(key, value) for key, value in mapping.items()}
    for key, value in (overrides or {}).items():
        if key not in _ALL_KEYS:
            raise ConfigError(f"unknown config override {key!r}")
        kwargs[key] = value
    if "p" not in kwargs:
        raise ConfigError("config must set the band dimension p")
    return ExperimentConfig(**kwargs)


def read_config_file(path, overrides: dict | None = None) -> ExperimentConfig:
    return build_experiment_config(parse_config_text(Path(path).read_text()), overrides)


# ---------------------------------------------------------------------------
# run manifests


def artifact_version() -> str:
    """Package version, with the source revision appended when available."""
    here = Path(__file__).resolve().parent
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short=12", "HEAD"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass(frozen=True)
class RunManifest:
    """Audit record written beside every command's outputs.

    ``outputs`` maps artifact names to paths; :meth:`save` refuses to write
    the manifest while any named output is missing, so a manifest on disk
    certifies that the files it lists existed at the end of the run.
    """

    command: str
    config: dict
    version: str
    seeds: dict
    timing_seconds: dict
    outputs: dict
    environment: dict
    created: str

    @classmethod
    def collect(
        cls,
        command: str,
        config: ExperimentConfig | dict,
        seeds: dict,
        timing_seconds: dict,
        outputs: dict,
    ) -> "RunManifest":
        if isinstance(config, ExperimentConfig):
            config = dataclasses.asdict(config)
        return cls(
            command=command,
            config=dict(config),
            version=artifact_version(),
            seeds=dict(seeds),
            timing_seconds={k: float(v) for k, v in timing_seconds.items()},
            outputs={k: str(v) for k, v in outputs.items()},
            environment={
                "threads": config.get("threads"),
                "mem_cap_bytes": config.get("mem_cap_bytes"),
                "platform": platform.platform(),
                "python": platform.python_version(),
                "numpy": np.__version__,
            },
            created=datetime.now(timezone.utc).isoformat(),
        )

    def save(self, path) -> None:
        missing = [
            f"{name} -> {target}"
            for name, target in sorted(self.outputs.items())
            if not Path(target).exists()
        ]
        if missing:
            raise FileNotFoundError(
                "manifest lists outputs that do not exist: " + "; ".join(missing)
            )
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls(**json.load(fh))
