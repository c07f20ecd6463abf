"""Command-line surface tying the toolkit together.

Commands are deterministic given their flags: seeds are explicit
(default 0, never wall-clock), JSON output is key-sorted, and no
artifact embeds a timestamp, so repeating a command reproduces its
outputs byte for byte.

Exit codes: 0 success, 1 runtime failure (including a failed
verification), 2 validation failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from .exceptions import (
    FormatError,
    NotSupportedError,
    ParameterError,
    PSF4DError,
    ShapeError,
)
from .noise import (
    SHARED_MODES,
    NoiseConfig,
    StructuredNoise,
    correlation_table,
    empirical_correlation_table,
    sample_structured,
)
from .pipeline import ABLATIONS, PipelineConfig, rectify, run_psf4d
from .rng import RngState
from .schedule import (
    DiffusionSchedule,
    GaussianOracle,
    ddim_invert,
    ddim_sample,
    ddim_step,
    forward_diffuse,
    roundtrip_error,
    zero_predictor,
)
from .tensor import load_tensor, save_tensor, standard_normal

VALIDATION_ERRORS = (ParameterError, ShapeError, FormatError, NotSupportedError)

# z-score of the pass band for single-draw covariance checks; the
# empirical correlation of B pooled elements fluctuates at ~1/sqrt(B)
COVARIANCE_Z = 4.75


def _config_digest(config: PipelineConfig) -> str:
    return hashlib.sha256(config.to_text().encode("ascii")).hexdigest()[:12]


def _print_json(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _strip_noise_suffix(path: str) -> str:
    for suffix in (".psf4d", ".json"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(part) for part in text.lower().split("x"))
    except ValueError:
        raise ParameterError(f"shape must look like 64x64, got {text!r}") from None
    if not dims or any(d <= 0 for d in dims):
        raise ParameterError(f"shape dimensions must be positive, got {text!r}")
    return dims


# ---------------------------------------------------------------------------
# shared flag groups


def _add_schedule_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--timesteps", type=int, default=1000)
    parser.add_argument("--ddim-steps", type=int, default=30)
    parser.add_argument(
        "--kind", choices=("linear", "scaled_linear"), default="linear"
    )
    parser.add_argument("--beta-start", type=float, default=1e-4)
    parser.add_argument("--beta-end", type=float, default=0.02)


def _schedule_from_args(args) -> DiffusionSchedule:
    return DiffusionSchedule(
        timesteps=args.timesteps,
        kind=args.kind,
        beta_start=args.beta_start,
        beta_end=args.beta_end,
        ddim_steps=args.ddim_steps,
    )


# ---------------------------------------------------------------------------
# sample-noise


def cmd_sample_noise(args) -> int:
    config = NoiseConfig(
        gamma=args.gamma,
        lam=args.lam,
        views=args.views,
        windows=args.windows,
        frames_per_window=args.frames,
        channels=args.channels,
        height=args.height,
        width=args.width,
        seed=args.seed,
        shared_temporal_mode=args.mode,
    )
    draw = sample_structured(config, epoch=args.epoch)
    prefix = _strip_noise_suffix(args.out)
    draw.save(prefix)
    record = {
        "tensor": prefix + ".psf4d",
        "sidecar": prefix + ".json",
        "shape": list(draw.values.shape),
        "elements": int(draw.values.size),
    }
    if args.json:
        _print_json(record)
    else:
        print(
            f"wrote {record['tensor']} and {record['sidecar']} "
            f"({config.views} views, {config.windows} windows, "
            f"{config.frames_per_window} frames per window)"
        )
    return 0


# ---------------------------------------------------------------------------
# verify-covariance


def _covariance_check(draw: StructuredNoise, tolerance: float | None):
    config = draw.config
    theoretical = correlation_table(config)
    empirical = empirical_correlation_table(draw.values[None])
    if tolerance is None:
        pooled = config.block_elements
        tolerance = COVARIANCE_Z / math.sqrt(pooled)
    kn = config.views * config.windows
    violations = []
    worst = (0.0, None)
    for p in range(kn):
        for q in range(p, kn):
            gap = abs(empirical[p, q] - theoretical[p, q])
            bad = (not math.isfinite(gap)) or gap > tolerance
            if math.isnan(gap) or gap > worst[0]:
                worst = (gap, (p, q))
            if bad:
                violations.append((p, q, empirical[p, q], theoretical[p, q]))
    return tolerance, violations, worst


def _slice_name(config: NoiseConfig, index: int) -> str:
    view, window = divmod(index, config.windows)
    return f"view {view} window {window}"


def cmd_verify_covariance(args) -> int:
    draw = StructuredNoise.load(_strip_noise_suffix(args.noise))
    tolerance, violations, worst = _covariance_check(draw, args.tolerance)
    config = draw.config
    kn = config.views * config.windows
    passed = not violations

    def clean(value: float):
        return None if math.isnan(value) else value

    if args.json:
        _print_json(
            {
                "pass": passed,
                "tolerance": tolerance,
                "slices": kn,
                "pairs": kn * (kn + 1) // 2,
                "worst_gap": clean(worst[0]),
                "violations": [
                    {
                        "a": _slice_name(config, p),
                        "b": _slice_name(config, q),
                        "empirical": clean(emp),
                        "theoretical": theo,
                    }
                    for p, q, emp, theo in violations
                ],
            }
        )
    else:
        print(
            f"{kn} slices, {kn * (kn + 1) // 2} pairs checked, "
            f"tolerance {tolerance:.4f}"
        )
        for p, q, emp, theo in violations[:10]:
            print(
                f"  {_slice_name(config, p)} vs {_slice_name(config, q)}: "
                f"empirical {emp:.4f}, theoretical {theo:.4f}"
            )
        if len(violations) > 10:
            print(f"  ... and {len(violations) - 10} more")
        print("PASS" if passed else f"FAIL: {len(violations)} pairs out of tolerance")
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# run-pipeline


PIPELINE_FLAGS = {
    "gamma": "gamma",
    "lam": "lam",
    "views": "views",
    "windows": "windows",
    "frames": "frames_per_window",
    "channels": "channels",
    "height": "height",
    "width": "width",
    "noise_floor": "noise_floor",
    "timesteps": "timesteps",
    "ddim_steps": "ddim_steps",
    "edit_fraction": "edit_fraction",
    "refine_iterations": "refine_iterations",
    "omega_start": "omega_start",
    "omega_end": "omega_end",
    "oracle_sigma2": "oracle_sigma2",
    "edit_channel": "edit_channel",
    "edit_scale": "edit_scale",
    "seed": "seed",
    "threads": "threads",
}


def _pipeline_config_from_args(args) -> PipelineConfig:
    # precedence: defaults, then config file, then explicit flags
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = PipelineConfig.from_text(fh.read())
    else:
        config = PipelineConfig()
    overrides = {
        field: getattr(args, flag)
        for flag, field in PIPELINE_FLAGS.items()
        if getattr(args, flag) is not None
    }
    config = config.updated(overrides)
    for name in args.ablate or ():
        config = config.ablate(name)
    return config


def cmd_run_pipeline(args) -> int:
    config = _pipeline_config_from_args(args)
    result = run_psf4d(config=config, keep_latents=args.dump_latents)
    digest = _config_digest(config)
    os.makedirs(args.out, exist_ok=True)

    trace_path = os.path.join(args.out, "trace.jsonl")
    records = []
    for item in result.trace:
        record = item.to_record()
        record["config_digest"] = digest
        records.append(record)
    with open(trace_path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    model_path = os.path.join(args.out, "model.psf4d")
    save_tensor(model_path, result.model.canonical_est)
    sidecar_path = os.path.join(args.out, "model.json")
    sidecar = {
        "config": config.to_record(),
        "config_digest": digest,
        "view_gains": [m.gain for m in result.model.view_maps],
        "view_shift_rows": [m.shift_rows for m in result.model.view_maps],
        "view_shift_cols": [m.shift_cols for m in result.model.view_maps],
        "residual_norms": list(result.model.residual_norms),
        "residual_rms": result.model.residual_rms,
    }
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")

    outputs = {"trace": trace_path, "model": model_path, "sidecar": sidecar_path}
    if args.dump_latents:
        for index, latents in enumerate(result.latents_history):
            path = os.path.join(args.out, f"latents_{index}.psf4d")
            save_tensor(path, latents)
            outputs[f"latents_{index}"] = path

    if args.json:
        _print_json({"config_digest": digest, "records": records, "outputs": outputs})
    else:
        print("iter   omega  inconsistency   flicker     psnr    ssim  residual_rms")
        for item in result.trace:
            metrics = item.metrics
            omega = "     -" if item.omega is None else f"{item.omega:6.2f}"
            print(
                f"{item.iteration:4d}  {omega}  {metrics.cross_view_inconsistency:13.6f}  "
                f"{metrics.flicker_pooled:8.6f}  {metrics.psnr:7.2f}  "
                f"{metrics.ssim:6.4f}  {item.residual_rms:12.6f}"
            )
        print(f"wrote {trace_path}, {model_path}, {sidecar_path}")
    return 0


# ---------------------------------------------------------------------------
# compare


COMPARE_METRICS = (
    "cross_view_inconsistency",
    "flicker_pooled",
    "psnr",
    "ssim",
    "residual_rms",
)


def _read_trace(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise FormatError(f"trace {path} is empty")
    try:
        return [json.loads(line) for line in lines]
    except json.JSONDecodeError as exc:
        raise FormatError(f"trace {path} is not JSON lines: {exc}") from None


def cmd_compare(args) -> int:
    traces = [(path, _read_trace(path)) for path in args.traces]
    digests = {records[-1].get("config_digest") for _, records in traces}
    mismatched = len(digests) > 1
    if mismatched:
        print("warning: config digests differ across traces", file=sys.stderr)
    base_path, base_records = traces[0]
    base = base_records[-1]
    entries = []
    for path, records in traces[1:]:
        final = records[-1]
        entries.append(
            {
                "path": path,
                "metrics": {key: final.get(key) for key in COMPARE_METRICS},
                "deltas": {
                    key: (
                        final[key] - base[key]
                        if isinstance(final.get(key), (int, float))
                        and isinstance(base.get(key), (int, float))
                        else None
                    )
                    for key in COMPARE_METRICS
                },
            }
        )
    if args.json:
        _print_json(
            {
                "baseline": {
                    "path": base_path,
                    "metrics": {key: base.get(key) for key in COMPARE_METRICS},
                },
                "entries": entries,
                "digest_mismatch": mismatched,
            }
        )
    else:
        width = max(len(key) for key in COMPARE_METRICS)
        print(f"baseline: {base_path}")
        for entry in entries:
            print(f"vs {entry['path']}:")
            for key in COMPARE_METRICS:
                value = entry["metrics"][key]
                delta = entry["deltas"][key]
                shown = "n/a" if value is None else f"{value:12.6f}"
                gap = "n/a" if delta is None else f"{delta:+.6f}"
                print(f"  {key:<{width}}  {shown}  ({gap})")
    return 0


# ---------------------------------------------------------------------------
# binding-support commands


def cmd_schedule_export(args) -> int:
    schedule = _schedule_from_args(args)
    schedule.save(args.out)
    if args.json:
        _print_json({"path": args.out, "members": list(schedule.ddim_timesteps)})
    else:
        print(f"wrote {args.out} ({schedule.ddim_steps} sub-schedule members)")
    return 0


def cmd_forward_diffuse(args) -> int:
    schedule = _schedule_from_args(args)
    z0 = load_tensor(args.input)
    eps = load_tensor(args.noise)
    save_tensor(args.out, forward_diffuse(schedule, z0, args.t, eps))
    if args.json:
        _print_json({"path": args.out, "t": args.t})
    else:
        print(f"wrote {args.out}")
    return 0


def cmd_rectify(args) -> int:
    denoised = load_tensor(args.denoised)
    previous = load_tensor(args.previous)
    save_tensor(args.out, rectify(denoised, previous, args.omega))
    if args.json:
        _print_json({"path": args.out, "omega": args.omega})
    else:
        print(f"wrote {args.out}")
    return 0


def _predictor_from_args(schedule, args):
    if args.predictor == "zero":
        return zero_predictor
    return GaussianOracle(schedule, mu=args.mu, sigma2=args.sigma2)


def _add_predictor_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--predictor", choices=("oracle", "zero"), default="oracle")
    parser.add_argument("--mu", type=float, default=0.3)
    parser.add_argument("--sigma2", type=float, default=0.25)


def cmd_ddim_move(args) -> int:
    schedule = _schedule_from_args(args)
    z = load_tensor(args.input)
    predictor = _predictor_from_args(schedule, args)
    if args.op == "step":
        if args.t_from is None or args.t_to is None:
            raise ParameterError("op=step needs both --from and --to")
        moved = ddim_step(schedule, z, args.t_from, args.t_to, predictor)
    elif args.op == "sample":
        moved = ddim_sample(schedule, z, predictor, from_t=args.t_from)
    else:
        moved = ddim_invert(schedule, z, predictor, to_t=args.t_to)
    save_tensor(args.out, moved)
    if args.json:
        _print_json({"path": args.out, "op": args.op})
    else:
        print(f"wrote {args.out}")
    return 0


def cmd_ddim_roundtrip(args) -> int:
    schedule = _schedule_from_args(args)
    if args.input is not None:
        z0 = load_tensor(args.input)
    else:
        shape = _parse_shape(args.shape)
        spread = math.sqrt(args.sigma2)
        z0 = args.mu + spread * standard_normal(shape, RngState(args.seed, 0))
    predictor = _predictor_from_args(schedule, args)
    error = roundtrip_error(schedule, z0, predictor)
    if args.json:
        _print_json(
            {
                "max_abs_error": error,
                "ddim_steps": schedule.ddim_steps,
                "shape": list(z0.shape),
            }
        )
    else:
        print(f"round trip over {schedule.ddim_steps} steps: max abs error {error:.3e}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psf4d",
        description="Structured-noise sampling and view-consistent latent editing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    noise = sub.add_parser("sample-noise", help="draw structured noise to files")
    noise.add_argument("--gamma", type=float, default=0.65)
    noise.add_argument("--lambda", dest="lam", type=float, default=0.7)
    noise.add_argument("--views", type=int, default=4)
    noise.add_argument("--windows", type=int, default=6)
    noise.add_argument("--frames", type=int, default=8)
    noise.add_argument("--channels", type=int, default=4)
    noise.add_argument("--height", type=int, default=8)
    noise.add_argument("--width", type=int, default=8)
    noise.add_argument("--seed", type=int, default=0)
    noise.add_argument("--epoch", type=int, default=0)
    noise.add_argument("--mode", choices=SHARED_MODES, default=SHARED_MODES[0])
    noise.add_argument("--out", default="noise", help="output prefix")
    noise.add_argument("--json", action="store_true")
    noise.set_defaults(func=cmd_sample_noise)

    verify = sub.add_parser(
        "verify-covariance", help="check a draw against its theoretical correlations"
    )
    verify.add_argument("noise", help="prefix or file written by sample-noise")
    verify.add_argument(
        "--tolerance",
        type=float,
        default=None,
        help="max |empirical - theoretical|; default scales with draw size",
    )
    verify.add_argument("--json", action="store_true")
    verify.set_defaults(func=cmd_verify_covariance)

    run = sub.add_parser("run-pipeline", help="full edit loop with metrics trace")
    run.add_argument("--config", default=None, help="key = value config file")
    run.add_argument("--gamma", type=float, default=None)
    run.add_argument("--lambda", dest="lam", type=float, default=None)
    run.add_argument("--views", type=int, default=None)
    run.add_argument("--windows", type=int, default=None)
    run.add_argument("--frames", type=int, default=None)
    run.add_argument("--channels", type=int, default=None)
    run.add_argument("--height", type=int, default=None)
    run.add_argument("--width", type=int, default=None)
    run.add_argument("--noise-floor", type=float, default=None)
    run.add_argument("--timesteps", type=int, default=None)
    run.add_argument("--ddim-steps", type=int, default=None)
    run.add_argument("--edit-fraction", type=float, default=None)
    run.add_argument("--refine-iterations", type=int, default=None)
    run.add_argument("--omega-start", type=float, default=None)
    run.add_argument("--omega-end", type=float, default=None)
    run.add_argument("--oracle-sigma2", type=float, default=None)
    run.add_argument("--edit-channel", type=int, default=None)
    run.add_argument("--edit-scale", type=float, default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--threads", type=int, default=None)
    run.add_argument(
        "--ablate", action="append", choices=ABLATIONS, default=None
    )
    run.add_argument("--out", default=".", help="directory for trace and model files")
    run.add_argument("--dump-latents", action="store_true")
    run.add_argument("--json", action="store_true")
    run.set_defaults(func=cmd_run_pipeline)

    compare = sub.add_parser("compare", help="tabulate metric deltas between traces")
    compare.add_argument("traces", nargs="+", help="trace.jsonl files; first is baseline")
    compare.add_argument("--json", action="store_true")
    compare.set_defaults(func=cmd_compare)

    export = sub.add_parser("schedule-export", help="write a schedule description")
    _add_schedule_flags(export)
    export.add_argument("--out", required=True)
    export.add_argument("--json", action="store_true")
    export.set_defaults(func=cmd_schedule_export)

    diffuse = sub.add_parser("forward-diffuse", help="jump a tensor to timestep t")
    _add_schedule_flags(diffuse)
    diffuse.add_argument("--in", dest="input", required=True)
    diffuse.add_argument("--noise", required=True)
    diffuse.add_argument("--t", type=int, required=True)
    diffuse.add_argument("--out", required=True)
    diffuse.add_argument("--json", action="store_true")
    diffuse.set_defaults(func=cmd_forward_diffuse)

    blend = sub.add_parser("rectify", help="blend denoised and previous tensors")
    blend.add_argument("--denoised", required=True)
    blend.add_argument("--previous", required=True)
    blend.add_argument("--omega", type=float, required=True)
    blend.add_argument("--out", required=True)
    blend.add_argument("--json", action="store_true")
    blend.set_defaults(func=cmd_rectify)

    move = sub.add_parser(
        "ddim-move", help="run the deterministic update on a tensor file"
    )
    _add_schedule_flags(move)
    _add_predictor_flags(move)
    move.add_argument("--op", choices=("step", "sample", "invert"), required=True)
    move.add_argument("--in", dest="input", required=True)
    move.add_argument("--from", dest="t_from", type=int, default=None)
    move.add_argument("--to", dest="t_to", type=int, default=None)
    move.add_argument("--out", required=True)
    move.add_argument("--json", action="store_true")
    move.set_defaults(func=cmd_ddim_move)

    roundtrip = sub.add_parser(
        "ddim-roundtrip", help="invert then denoise and report the gap"
    )
    _add_schedule_flags(roundtrip)
    _add_predictor_flags(roundtrip)
    roundtrip.add_argument(
        "--in", dest="input", default=None,
        help="start tensor; omitted, a Gaussian draw of --shape is used",
    )
    roundtrip.add_argument("--shape", default="64x64")
    roundtrip.add_argument("--seed", type=int, default=0)
    roundtrip.add_argument("--json", action="store_true")
    roundtrip.set_defaults(func=cmd_ddim_roundtrip)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PSF4DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
