"""Experiment runner: generation, recovery, verification, baselines, eval.

Every command is reproducible from its config file and seed — all
randomness flows through named substreams of the one master seed — and
every command writes a manifest naming its outputs, so runs are
auditable after the fact.

Exit codes: 0 success, 2 configuration error (bad flags, bad config
keys, missing inputs), 3 numerical failure, 4 verification violation.

Moment-tensor files store mean-over-components estimates; recovery
multiplies by the configured component count, because the core algorithm
consumes the component-summed moment.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .baselines import (
    PcaInstance,
    frequency_marching,
    pca_homotopy_init,
    pca_partial_trace,
    pca_spectral_sos,
    pca_unfolding,
)
from .core import freqs, from_fourier, to_fourier
from .correction import correction_table
from .errors import ConfigError, MranetError, VerificationError
from .io import (
    RunManifest,
    build_experiment_config,
    read_config_file,
    read_container,
    write_diagnostics_json,
    write_observation_container,
    write_signal_container,
    write_summary_csv,
)
from .moments import (
    SignalSet,
    empirical_third_moment,
    exact_moment,
    sample_observations,
)
from .rng import substream
from .spectral import ExperimentConfig, list_recovery, orbit_correlation
from .traceverify import build_expanded, trace_crosscheck, verify_region_lemma

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VERIFICATION = 4

_PCA_METHODS = {
    "unfolding": pca_unfolding,
    "sos": pca_spectral_sos,
    "partial_trace": pca_partial_trace,
    "homotopy": lambda T: pca_homotopy_init(T)[1],
}


def _add_common_flags(sub: argparse.ArgumentParser, with_config: bool = True) -> None:
    if with_config:
        sub.add_argument("--config", help="path to a key = value config file")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--threads", type=int, help="worker pool size for the numerics")
    sub.add_argument("--mem-cap", type=int, help="precompute memory cap in bytes")
    sub.add_argument(
        "--out-dir", default=".", help="directory for output files (default: .)"
    )


def _overrides(args: argparse.Namespace) -> dict:
    out: dict = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        out["threads"] = args.threads
    if getattr(args, "mem_cap", None) is not None:
        out["mem_cap_bytes"] = args.mem_cap
    if getattr(args, "exact_moments", False):
        out["n"] = None
    if getattr(args, "planted_u", False):
        out["planted_u"] = True
    return out


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("this command needs --config")
    return read_config_file(args.config, _overrides(args))


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(
    command: str,
    config,
    out: Path,
    outputs: dict,
    timing: dict,
    seeds: dict,
) -> Path:
    manifest = RunManifest.collect(
        command=command,
        config=config,
        seeds=seeds,
        timing_seconds=timing,
        outputs=outputs,
    )
    path = out / f"manifest-{command}.json"
    manifest.save(path)
    return path


def _support_mask(p: int) -> np.ndarray:
    f = np.array(freqs(p))
    return (f[:, None, None] + f[None, :, None] + f[None, None, :]) == 0


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    if config.exact_moments:
        raise ConfigError("generate needs a sample count: set n in the config")
    out = _out_dir(args)
    t0 = time.perf_counter()
    signals = SignalSet.random(config.p, config.K, substream(config.seed, "signals"))
    batch = sample_observations(
        signals, config.sigma, config.n, substream(config.seed, "observations")
    )
    if config.sigma == 0:
        # rotations are unitary, so noiseless observations must keep the
        # norm of the component they came from
        signal_norms = np.linalg.norm(signals.real_signals(), axis=1)
        defect = float(
            np.max(np.abs(np.linalg.norm(batch.y, axis=1) - signal_norms[batch.labels]))
        )
        if defect > 1e-9:
            raise MranetError(
                f"noiseless batch fails the norm-preservation check ({defect:.3e})"
            )
    outputs = {
        "signals": out / "signals.mrt",
        "observations": out / "observations.mrt",
    }
    write_signal_container(outputs["signals"], signals)
    write_observation_container(outputs["observations"], batch, K=config.K)
    _write_manifest(
        "generate",
        config,
        out,
        outputs,
        {"total": time.perf_counter() - t0},
        {"master": config.seed, "streams": ["signals", "observations"]},
    )
    print(
        f"wrote {config.n} observations (p={config.p}, K={config.K}, "
        f"sigma={config.sigma}) to {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# recover


def _load_moment(args: argparse.Namespace, config: ExperimentConfig, signals):
    """The component-summed moment tensor plus a provenance note."""
    if args.moments is None:
        if not config.exact_moments:
            raise ConfigError(
                "recover needs either --moments FILE or --exact-moments"
            )
        return exact_moment(signals, 3), "exact population moment"
    box = read_container(args.moments)
    if box.p != config.p:
        raise ConfigError(f"moments file is for p={box.p} but config.p={config.p}")
    if box.layout == "moment":
        return config.K * box.array, f"{args.moments} (mean x K={config.K})"
    if box.layout == "obsreal":
        est = empirical_third_moment(box.observation_batch())
        that = config.K * est.fourier_full * _support_mask(config.p)
        return that, (
            f"empirical mean of {est.n} observations from {args.moments} "
            f"(x K={config.K}, projected to the zero-sum support)"
        )
    raise ConfigError(f"{args.moments}: expected a moment or observation container")


def cmd_recover(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    signals = None
    if args.signals is not None:
        signals = read_container(args.signals).signal_set()
        if signals.p != config.p or signals.K != config.K:
            raise ConfigError(
                f"signals file has (p={signals.p}, K={signals.K}) but config "
                f"says (p={config.p}, K={config.K})"
            )
    elif config.exact_moments:
        signals = SignalSet.random(
            config.p, config.K, substream(config.seed, "signals")
        )
    that, moment_source = _load_moment(args, config, signals)
    correction = correction_table(config.p)
    t_moment = time.perf_counter()
    result = list_recovery(that, correction, config, signals=signals)
    t_recover = time.perf_counter()

    candidate_hat = to_fourier(np.array(result.candidates))
    outputs = {
        "candidates": out / "candidates.mrt",
        "diagnostics": out / "diagnostics.json",
        "summary": out / "summary.csv",
    }
    write_signal_container(
        outputs["candidates"], SignalSet(p=config.p, signals=candidate_hat)
    )
    write_diagnostics_json(
        outputs["diagnostics"],
        result.diagnostics,
        run={
            "config": dataclasses.asdict(config),
            "moment_source": moment_source,
            "used_precompute": result.used_precompute,
        },
    )
    write_summary_csv(outputs["summary"], result.diagnostics)
    _write_manifest(
        "recover",
        config,
        out,
        outputs,
        {
            "moments": t_moment - t0,
            "recovery": t_recover - t_moment,
            "total": time.perf_counter() - t0,
        },
        {"master": config.seed, "streams": ["signals", "probe"]},
    )
    print(
        f"recovered {len(result.candidates)} candidates (p={config.p}, "
        f"K={config.K}, source: {moment_source}) in {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else 0
    t0 = time.perf_counter()
    net = build_expanded(args.q)
    report_path = out / "verify-report.json"

    def write_report(doc: dict) -> None:
        with open(report_path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    try:
        region = verify_region_lemma(
            net,
            args.p,
            args.K,
            sample_budget=args.sample_budget,
            seed=seed,
            mode=args.mode,
        )
    except VerificationError as exc:
        write_report({"region_inequality": exc.report, "trace_crosscheck": None})
        raise

    crosscheck = None
    if args.crosscheck_draws > 0 and args.p <= 4 and args.q == 1:
        lhs, rhs, stderr = trace_crosscheck(
            args.p, q=1, K=args.K, mc_samples=args.crosscheck_draws, seed=seed
        )
        agrees = abs(lhs - rhs) <= 3 * stderr + 1e-12
        crosscheck = {
            "labeling_sum": lhs,
            "monte_carlo_mean": rhs,
            "standard_error": stderr,
            "draws": args.crosscheck_draws,
            "agrees_within_3_se": agrees,
        }
        if not agrees:
            write_report({"region_inequality": region, "trace_crosscheck": crosscheck})
            raise VerificationError(
                f"trace cross-check disagrees: labeling sum {lhs} vs Monte Carlo "
                f"mean {rhs} with standard error {stderr} over "
                f"{args.crosscheck_draws} draws"
            )

    write_report({"region_inequality": region, "trace_crosscheck": crosscheck})
    _write_manifest(
        "verify",
        {"p": args.p, "q": args.q, "K": args.K, "mode": args.mode, "seed": seed},
        out,
        {"report": report_path},
        {"total": time.perf_counter() - t0},
        {"master": seed, "streams": ["region-lemma-sample", "trace-crosscheck"]},
    )
    checked = region["full_labelings_checked"]
    print(
        f"{len(region['violations'])} violations over {checked} checked labelings "
        f"(p={args.p}, q={args.q}, K={args.K}, mode: {region['mode']}); "
        f"report: {report_path}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# baselines


def cmd_baselines(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    rows: list[tuple] = []
    if args.method == "fm":
        if config.K != 1:
            raise ConfigError(
                f"frequency marching is a single-signal method; config has K={config.K}"
            )
        signals = SignalSet.random(config.p, 1, substream(config.seed, "signals"))
        recovered = frequency_marching(
            exact_moment(signals, 2), exact_moment(signals, 3)
        )
        tau = from_fourier(recovered)
        orbit, _ = orbit_correlation(tau / np.linalg.norm(tau), signals.signals[0])
        rows.append(("", config.p, "fm", orbit))
    else:
        methods = (
            _PCA_METHODS
            if args.method == "all"
            else {args.method: _PCA_METHODS[args.method]}
        )
        for draw in range(args.draws):
            instance = PcaInstance.random(
                config.p, args.lam, substream(config.seed, "pca-draw", draw)
            )
            for name, method in methods.items():
                estimate = method(instance.tensor)
                correlation = float(np.dot(estimate, instance.x) ** 2)
                rows.append((args.lam, config.p, name, correlation))

    outputs = {"draws": out / "baselines.csv"}
    with open(outputs["draws"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "p", "method", "correlation"])
        for lam, p, method, correlation in rows:
            writer.writerow([lam, p, method, repr(float(correlation))])
    _write_manifest(
        "baselines",
        config,
        out,
        outputs,
        {"total": time.perf_counter() - t0},
        {"master": config.seed, "streams": ["signals", "pca-draw"]},
    )
    print(f"wrote {len(rows)} baseline rows ({args.method}) to {outputs['draws']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    t0 = time.perf_counter()
    cand_box = read_container(args.candidates)
    sig_box = read_container(args.signals)
    if cand_box.layout != "signals" or sig_box.layout != "signals":
        raise ConfigError("eval consumes signal-layout containers for both inputs")
    if cand_box.p != sig_box.p:
        raise ConfigError(
            f"candidates are p={cand_box.p} but signals are p={sig_box.p}"
        )
    candidates = from_fourier(cand_box.array)
    signal_hat = sig_box.signal_set().signals
    rows = []
    for i, tau in enumerate(candidates):
        norm = float(np.linalg.norm(tau))
        if norm == 0:
            raise ConfigError(f"candidate {i} is identically zero")
        for k in range(signal_hat.shape[0]):
            orbit, raw = orbit_correlation(tau / norm, signal_hat[k])
            rows.append((i, k, raw, orbit))

    outputs = {"correlations": out / "eval.csv"}
    with open(outputs["correlations"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["candidate", "signal", "raw_corr", "orbit_corr"])
        for i, k, raw, orbit in rows:
            writer.writerow([i, k, repr(float(raw)), repr(float(orbit))])
    _write_manifest(
        "eval",
        {"candidates": str(args.candidates), "signals": str(args.signals)},
        out,
        outputs,
        {"total": time.perf_counter() - t0},
        {},
    )
    print(
        f"evaluated {candidates.shape[0]} candidates against "
        f"{signal_hat.shape[0]} signals -> {outputs['correlations']}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mranet",
        description=(
            "Heterogeneous multi-reference alignment experiments: generate "
            "data, recover signal candidates, verify the trace diagnostics, "
            "run baselines, and score candidates."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", help="draw signals and observations")
    _add_common_flags(generate)
    generate.set_defaults(func=cmd_generate)

    recover = sub.add_parser("recover", help="run list recovery on third moments")
    _add_common_flags(recover)
    recover.add_argument(
        "--moments", help="moment or observation container to recover from"
    )
    recover.add_argument(
        "--exact-moments",
        action="store_true",
        help="use exact population moments instead of a moments file",
    )
    recover.add_argument(
        "--signals", help="signal container for diagnostics and planted probes"
    )
    recover.add_argument(
        "--planted-u",
        action="store_true",
        help="plant the probe on a signal instead of drawing it Gaussian",
    )
    recover.set_defaults(func=cmd_recover)

    verify = sub.add_parser(
        "verify", help="check the combinatorial and trace identities"
    )
    _add_common_flags(verify, with_config=False)
    verify.add_argument("--p", type=int, required=True, help="band dimension")
    verify.add_argument("--q", type=int, default=1, help="layer count (default 1)")
    verify.add_argument("--K", type=int, default=2, help="component count (default 2)")
    verify.add_argument(
        "--mode",
        choices=("auto", "exhaustive", "sampled"),
        default="auto",
        help="labeling coverage (exhaustive is capped at p <= 4, q <= 2)",
    )
    verify.add_argument(
        "--sample-budget",
        type=int,
        default=1_000_000,
        help="full labelings to check in sampled mode",
    )
    verify.add_argument(
        "--crosscheck-draws",
        type=int,
        default=100_000,
        help="Monte Carlo draws for the trace cross-check (0 disables)",
    )
    verify.set_defaults(func=cmd_verify)

    baselines = sub.add_parser("baselines", help="closed-form and PCA baselines")
    _add_common_flags(baselines)
    baselines.add_argument(
        "--method",
        choices=("fm", "unfolding", "sos", "partial_trace", "homotopy", "all"),
        required=True,
    )
    baselines.add_argument(
        "--lam", type=float, default=0.0, help="planted signal strength"
    )
    baselines.add_argument("--draws", type=int, default=1, help="instances per method")
    baselines.set_defaults(func=cmd_baselines)

    evaluate = sub.add_parser("eval", help="score candidates against signals")
    _add_common_flags(evaluate, with_config=False)
    evaluate.add_argument("--candidates", required=True)
    evaluate.add_argument("--signals", required=True)
    evaluate.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION
    except (MranetError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
