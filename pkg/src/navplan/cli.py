"""Command-line entry point exposing the pipeline as subcommands.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.
Every subcommand accepts ``--dry-run`` to validate inputs and print the
work plan without writing anything.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, action_fit, evaluation, scene_log
from .config import RunConfig, dump_config, load_config
from .errors import NavplanError, SchemaError
from .kinematics import KinematicState, rollout
from .prompting import AblationFlags, OutputMode, parse_actions, serialize_waypoints
from .scene_log import CommandThresholds
from .vlm_gateway import (
    EchoBackend,
    HttpBackend,
    ReasoningCache,
    RetryPolicy,
    ScriptedOracleBackend,
    VlmGateway,
    get_or_generate_reasoning,
)

logger = logging.getLogger(__name__)

# Table-style ablation rows: reasoning always on, command/images toggled.
ABLATION_ROWS = (
    AblationFlags(reason=True, command=False, images=False),
    AblationFlags(reason=True, command=False, images=True),
    AblationFlags(reason=True, command=True, images=False),
    AblationFlags(reason=True, command=True, images=True),
)

_CANNED_REASONING = (
    "Scene Description: the road ahead is clear with light traffic.\n"
    "Recommended Action: follow the high-level command at a safe speed.\n"
    "Reasoning: no obstacles or signals require deviating from the commanded maneuver."
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        raise UsageError(message)


def _scene_log_paths(root: Path) -> list[Path]:
    if root.is_dir():
        return sorted(p for p in root.glob("*.jsonl") if p.is_file())
    return [root]


def _thresholds(cfg: RunConfig) -> CommandThresholds:
    t = cfg.dataset.thresholds
    return CommandThresholds(
        stop_speed=t.stop_speed,
        stop_ratio=t.stop_ratio,
        straight_deg=t.straight_deg,
        hard_deg=t.hard_deg,
    )


def _flags(args, cfg: RunConfig) -> AblationFlags:
    return AblationFlags(
        reason=cfg.eval.reason if args.reason is None else args.reason,
        command=cfg.eval.command if args.command is None else args.command,
        images=cfg.eval.images if args.images is None else args.images,
    )


def _add_flag_overrides(parser: argparse.ArgumentParser) -> None:
    for name in ("reason", "command", "images"):
        group = parser.add_mutually_exclusive_group()
        group.add_argument(f"--{name}", dest=name, action="store_true", default=None)
        group.add_argument(f"--no-{name}", dest=name, action="store_false", default=None)


def _add_backend_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mock", choices=("oracle", "echo"), help="use an in-process mock backend")
    parser.add_argument("--sigma", type=float, default=0.0, help="oracle mock noise sigma")
    parser.add_argument("--seed", type=int, default=None, help="sampling / mock seed")
    parser.add_argument("--endpoint-url", help="chat-completions URL (overrides config)")
    parser.add_argument("--model", help="model id (overrides config)")


def _http_gateway(args, endpoint, kind: str) -> tuple[VlmGateway, str]:
    url = args.endpoint_url or endpoint.url
    if not url:
        raise UsageError(f"no {kind} endpoint configured; pass --endpoint-url or --mock")
    backend = HttpBackend(url, api_key_env=endpoint.api_key_env, timeout=endpoint.timeout)
    retry = RetryPolicy(max_attempts=endpoint.max_attempts, base_delay=endpoint.base_delay)
    gateway = VlmGateway(backend, retry=retry, max_in_flight=endpoint.max_in_flight)
    return gateway, (args.model or endpoint.model or kind)


def _driver_gateway(args, cfg: RunConfig, clips, mode: OutputMode) -> tuple[VlmGateway, str]:
    if args.mock == "oracle":
        backend = ScriptedOracleBackend(
            clips, mode=mode, noise_sigma=args.sigma, seed=args.seed or 0
        )
        return VlmGateway(backend), "mock-oracle"
    if args.mock == "echo":
        return VlmGateway(EchoBackend(_CANNED_REASONING)), "mock-echo"
    return _http_gateway(args, cfg.endpoints.driver, "driver")


def _navigator_gateway(args, cfg: RunConfig) -> tuple[VlmGateway, str]:
    if args.mock:
        return VlmGateway(EchoBackend(_CANNED_REASONING)), "mock-echo"
    return _http_gateway(args, cfg.endpoints.navigator, "navigator")


def _require_input(path: Path, what: str) -> None:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")


# --- subcommands -------------------------------------------------------------

def _split_filter(args, cfg: RunConfig) -> set[str] | None:
    """Scene ids admitted by --split, or None when no filtering applies."""
    if not args.split:
        return None
    split_file = args.split_file or cfg.dataset.split_file
    if not split_file:
        raise UsageError("--split needs a split file (--split-file or dataset.split_file)")
    _require_input(Path(split_file), "split file")
    listing = json.loads(Path(split_file).read_text("utf-8"))
    if args.split not in listing:
        raise UsageError(f"split {args.split!r} not present in {split_file}")
    return set(listing[args.split])


def cmd_extract(args, cfg: RunConfig) -> int:
    source = Path(args.scene_logs or cfg.paths.scene_logs or "")
    if not str(source):
        raise UsageError("no scene logs given; pass --scene-logs or set paths.scene_logs")
    _require_input(source, "scene logs")
    admitted = _split_filter(args, cfg)
    paths = _scene_log_paths(source)
    window = args.window if args.window is not None else cfg.dataset.window_frames
    stride = args.stride if args.stride is not None else cfg.dataset.stride_frames

    clips = []
    scenes_used = 0
    for path in paths:
        scene = scene_log.load_scene_log(path)
        if admitted is not None and scene.scene_id not in admitted:
            continue
        scenes_used += 1
        clips.extend(scene_log.extract_clips(scene, window, stride, _thresholds(cfg)))

    if args.dry_run:
        print(f"would write {len(clips)} clips from {scenes_used} scene(s) to {args.out}")
        return 0
    count = scene_log.emit_eval_manifest(clips, args.out)
    print(f"{count} clips from {scenes_used} scene(s) -> {args.out}")
    return 0


def cmd_fit_actions(args, cfg: RunConfig) -> int:
    manifest = Path(args.manifest)
    _require_input(manifest, "manifest")
    clips = scene_log.load_eval_manifest(manifest)
    lam = args.lam if args.lam is not None else cfg.fitting.lam
    refine = cfg.fitting.refine if args.refine is None else args.refine

    if args.dry_run:
        print(f"would fit controls for {len(clips)} clips (lambda={lam}) to {args.out}")
        return 0

    rmses = []
    fitted = []
    for clip in clips:
        init = KinematicState(position=(0.0, 0.0), heading=0.0, speed=clip.ego_state.speed)
        result = action_fit.fit_controls(
            clip.future, init, lam=lam, refine=refine, kappa_max=cfg.fitting.kappa_max
        )
        rmses.append(result.rollout_rmse)
        fitted.append(scene_log.with_controls(clip, result.controls))
    count = scene_log.emit_eval_manifest(fitted, args.out)

    edges = [0.0, 0.01, 0.05, 0.1, 0.5, float("inf")]
    hist, _ = np.histogram(rmses, bins=edges)
    print(f"{count} clips fitted -> {args.out}")
    print("round-trip RMSE histogram (m):")
    for lo, hi, n in zip(edges, edges[1:], hist):
        label = f"[{lo:g}, {hi:g})" if hi != float("inf") else f">= {lo:g}"
        print(f"  {label:>14}: {n}")
    return 0


def cmd_gen_reason(args, cfg: RunConfig) -> int:
    manifest = Path(args.manifest)
    _require_input(manifest, "manifest")
    clips = scene_log.load_eval_manifest(manifest)
    cache_dir = Path(args.cache or cfg.paths.cache_dir)

    if args.dry_run:
        missing = sum(1 for c in clips if c.reasoning is None)
        print(f"would generate reasoning for {missing} of {len(clips)} clips into {cache_dir}")
        return 0

    gateway, model_id = _navigator_gateway(args, cfg)
    cache = ReasoningCache(cache_dir)
    annotated = []
    for clip in clips:
        reasoning = get_or_generate_reasoning(
            clip,
            gateway,
            cache,
            model_id,
            temperature=cfg.sampling.navigator_temperature,
            max_tokens=cfg.sampling.max_tokens,
        )
        annotated.append(scene_log.with_reasoning(clip, reasoning))
    count = scene_log.emit_eval_manifest(annotated, args.out)
    print(f"{count} clips annotated with reasoning -> {args.out} (cache: {cache_dir})")
    return 0


def cmd_emit_sft(args, cfg: RunConfig) -> int:
    manifest = Path(args.manifest)
    _require_input(manifest, "manifest")
    clips = scene_log.load_eval_manifest(manifest)
    mode = OutputMode(args.mode or cfg.eval.mode)
    flags = _flags(args, cfg)

    if args.dry_run:
        print(f"would write {len(clips)} {mode.value} records to {args.out}")
        return 0
    count = scene_log.emit_sft_corpus(clips, mode, flags, args.out)
    readme = Path(args.out).with_suffix(".README.md")
    scene_log.emit_corpus_readme(readme)
    print(f"{count} {mode.value} SFT records -> {args.out} (notes: {readme})")
    return 0


def _run_single_eval(args, cfg: RunConfig, clips, flags: AblationFlags, mode: OutputMode):
    gateway, model_id = _driver_gateway(args, cfg, clips, mode)

    attach = None
    nav_model = None
    if flags.reason and any(clip.reasoning is None for clip in clips):
        nav_gateway, nav_model = _navigator_gateway(args, cfg)
        cache = ReasoningCache(args.cache or cfg.paths.cache_dir)

        def attach(clip):
            reasoning = get_or_generate_reasoning(
                clip,
                nav_gateway,
                cache,
                nav_model,
                temperature=cfg.sampling.navigator_temperature,
                max_tokens=cfg.sampling.max_tokens,
            )
            return scene_log.with_reasoning(clip, reasoning)

    return evaluation.run_eval(
        clips,
        gateway,
        flags,
        k=args.k or cfg.sampling.k,
        mode=mode,
        model_id=model_id,
        temperature=cfg.sampling.driver_temperature,
        seed=args.seed,
        workers=args.workers,
        include_fallback=cfg.eval.include_fallback,
        attach_reasoning=attach,
        navigator_model_id=nav_model,
    )


def _emit_eval_outputs(report, out_dir: Path, stem: str, include_6s: bool = True) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluation.emit_report(report, "markdown", out_dir / f"{stem}.md", include_6s=include_6s)
    evaluation.emit_report(report, "csv", out_dir / f"{stem}.csv")
    evaluation.emit_report(report, "jsonl", out_dir / f"{stem}.jsonl")


def cmd_evaluate(args, cfg: RunConfig) -> int:
    manifest = Path(args.manifest)
    _require_input(manifest, "manifest")
    clips = scene_log.load_eval_manifest(manifest)
    mode = OutputMode(args.mode or cfg.eval.mode)
    flags = _flags(args, cfg)
    out_dir = Path(args.out_dir or cfg.paths.output_dir)

    if args.dry_run:
        print(
            f"would evaluate {len(clips)} clips (k={args.k or cfg.sampling.k}, "
            f"mode={mode.value}, flags={flags.label()}) into {out_dir}"
        )
        return 0

    report = _run_single_eval(args, cfg, clips, flags, mode)
    _emit_eval_outputs(report, out_dir, "report")
    agg = report.aggregates["cumulative"]
    print(
        f"{len(report.rows)} clips evaluated, {report.failure_count} parse failures; "
        f"cumulative avg L2 6s = {agg.avg_6s:.3f} m -> {out_dir}"
    )
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    manifest = Path(args.manifest)
    _require_input(manifest, "manifest")
    clips = scene_log.load_eval_manifest(manifest)
    mode = OutputMode(args.mode or cfg.eval.mode)
    out_dir = Path(args.out_dir or cfg.paths.output_dir)

    if args.dry_run:
        rows = ", ".join(flags.label() for flags in ABLATION_ROWS)
        print(f"would evaluate {len(clips)} clips under 4 flag rows ({rows}) into {out_dir}")
        return 0

    reports = []
    for flags in ABLATION_ROWS:
        report = _run_single_eval(args, cfg, clips, flags, mode)
        _emit_eval_outputs(report, out_dir, f"ablate-{flags.label()}")
        reports.append(report)
    combined = evaluation.render_markdown(reports, include_6s=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.md").write_text(combined, encoding="utf-8")
    print(combined)
    print(f"4-row ablation table -> {out_dir / 'ablation.md'}")
    return 0


def cmd_rollout(args, cfg: RunConfig) -> int:
    if args.actions_file:
        text = Path(args.actions_file).read_text("utf-8")
    elif args.actions:
        text = args.actions
    else:
        raise UsageError("pass an action string or --actions-file")
    controls = parse_actions(text, args.count, dt=args.dt, kappa_max=cfg.fitting.kappa_max)
    init = KinematicState(position=(args.x, args.y), heading=args.heading, speed=args.speed)
    if args.dry_run:
        print(f"would integrate {len(controls)} steps from speed {args.speed:g} m/s")
        return 0
    print(serialize_waypoints(rollout(controls, init)))
    return 0


def cmd_config_dump(args, cfg: RunConfig) -> int:
    print(dump_config(cfg), end="")
    return 0


def cmd_version(args, cfg: RunConfig) -> int:
    print(f"navplan {__version__}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="navplan", description=__doc__)
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--dry-run", action="store_true", help="validate and plan, write nothing")
    parser.add_argument("--workers", type=int, default=min(8, os.cpu_count() or 1))
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="scene logs -> clip manifest")
    p.add_argument("--scene-logs", help="scene-log file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--split", help="keep only scenes listed under this split name")
    p.add_argument("--split-file", help="JSON file mapping split name -> scene ids")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("fit-actions", help="manifest -> manifest with fitted controls")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lam", type=float, default=None)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--refine", dest="refine", action="store_true", default=None)
    group.add_argument("--no-refine", dest="refine", action="store_false", default=None)
    p.set_defaults(func=cmd_fit_actions)

    p = sub.add_parser("gen-reason", help="manifest -> reasoning cache + annotated manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache", help="reasoning cache directory")
    _add_backend_options(p)
    p.set_defaults(func=cmd_gen_reason)

    p = sub.add_parser("emit-sft", help="manifest + cache -> SFT corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=[m.value for m in OutputMode], default=None)
    _add_flag_overrides(p)
    p.set_defaults(func=cmd_emit_sft)

    p = sub.add_parser("evaluate", help="manifest + driver endpoint -> report files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--cache", help="reasoning cache directory")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--mode", choices=[m.value for m in OutputMode], default=None)
    _add_flag_overrides(p)
    _add_backend_options(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="evaluate across the four input-component rows")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--cache", help="reasoning cache directory")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--mode", choices=[m.value for m in OutputMode], default=None)
    _add_backend_options(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("rollout", help="action string -> waypoints (debug utility)")
    p.add_argument("actions", nargs="?", help="serialized action pairs")
    p.add_argument("--actions-file")
    p.add_argument("--count", type=int, default=12)
    p.add_argument("--dt", type=float, default=0.5)
    p.add_argument("--speed", type=float, default=0.0)
    p.add_argument("--heading", type=float, default=0.0)
    p.add_argument("--x", type=float, default=0.0)
    p.add_argument("--y", type=float, default=0.0)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("config-dump", help="print the effective configuration")
    p.set_defaults(func=cmd_config_dump)

    p = sub.add_parser("version", help="print the package version")
    p.set_defaults(func=cmd_version)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 1
    except NavplanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
