#!/usr/bin/env python3
"""
CLI entry point for guided diffusion on Gaussian-mixture data
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from mixdiff.config import ConfigError, ExperimentConfig, load_experiment_config
from mixdiff.experiment import (ExperimentRunner, encode_points, file_sha256, interpolate_points,
                                load_models, samples_frame, write_csv, write_manifest)
from mixdiff.mixture import load_points_csv, points_frame
from mixdiff.models import CountingDenoiser
from mixdiff.samplers import SamplerConfig, resolve_temperature_mode, sample
from mixdiff.schedules import SegmentSchedule
from mixdiff.training import TrainingDivergedError

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def print_summary(title: str, rows: Dict):
    """
    Print a banner-framed summary of a run

    Args:
        title: banner heading
        rows: label -> value pairs
    """
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    for label, value in rows.items():
        print(f"{label + ':':<24}{value}")
    print("=" * 60)


def sampler_from_args(args, base: SamplerConfig) -> SamplerConfig:
    """Overlay sampler flags onto the configured (or default) sampler"""
    if args.steps is not None and args.segments is not None:
        raise ValueError("--steps and --segments are mutually exclusive")
    respacing = base.respacing
    if args.steps is not None:
        respacing = {"kind": "uniform", "count": args.steps}
    elif args.segments is not None:
        segments = SegmentSchedule.parse(args.segments)
        respacing = {"kind": "segments", "counts": list(segments.segment_counts)}
        logger.info(f"Segment schedule {segments.segment_counts} ({segments.total} steps)")

    overrides = {"respacing": respacing}
    if args.ddim:
        overrides["kind"] = "ddim"
    if args.guidance_scale is not None:
        overrides["guidance_scale"] = args.guidance_scale
    if args.temperature_mode:
        overrides["temperature_mode"] = resolve_temperature_mode(args.temperature_mode)
    if args.tau is not None:
        overrides["tau"] = args.tau
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.variance_mode is not None:
        overrides["variance_mode"] = args.variance_mode
    if args.allow_experimental:
        overrides["allow_experimental"] = True
    return replace(base, **overrides)


def _load_config(path: Optional[str]) -> Optional[ExperimentConfig]:
    return load_experiment_config(path) if path else None


def _resolve_models(args, cfg: Optional[ExperimentConfig]):
    """Denoiser, classifier and base schedule from --oracle or checkpoints"""
    if args.oracle:
        if cfg is None:
            raise ValueError("--oracle needs --config for the dataset and schedule")
        runner = ExperimentRunner(cfg)
        model, classifier = runner.oracle_models()
        return model, classifier, runner.schedule, {}
    model, classifier, schedule = load_models(args.checkpoint, args.classifier_checkpoint)
    inputs = {str(args.checkpoint): file_sha256(args.checkpoint)}
    if args.classifier_checkpoint:
        inputs[str(args.classifier_checkpoint)] = file_sha256(args.classifier_checkpoint)
    return model, classifier, schedule, inputs


def _base_sampler(args, cfg: Optional[ExperimentConfig]) -> SamplerConfig:
    base = cfg.sampler if cfg is not None else SamplerConfig()
    if args.oracle and base.variance_mode == "learned-v" and args.variance_mode is None:
        logger.info("Analytic denoiser has no variance head; using fixed-beta-tilde variance")
        base = replace(base, variance_mode="fixed-beta-tilde")
    return base


def _settings(command: str, cfg: Optional[ExperimentConfig], **extra) -> Dict:
    settings = {"command": command, "config": cfg.canonical if cfg is not None else None}
    settings.update(extra)
    return json.loads(json.dumps(settings, default=str))


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config)
    logger.info("=" * 60)
    logger.info(f"Training run: {cfg.source} -> {cfg.output_dir}")
    logger.info("=" * 60)
    results = ExperimentRunner(cfg).train()
    print_summary("TRAINING SUMMARY", {
        "Output directory": cfg.output_dir,
        "Artifacts": len(results["artifacts"]),
        **{k.replace("_", " ").capitalize(): v for k, v in results["statistics"].items()},
    })
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _load_config(args.config)
    model, classifier, schedule, inputs = _resolve_models(args, cfg)
    sampler = sampler_from_args(args, _base_sampler(args, cfg))
    if args.trajectory:
        sampler = replace(sampler, record_trajectory=True)
    n = args.n if args.n is not None else (cfg.metrics.num_samples if cfg else 1000)
    counter = CountingDenoiser(model) if args.count_evals else model

    logger.info(f"Sampling {n} chains: kind={sampler.kind}, s={sampler.guidance_scale}, "
                f"temperature={sampler.temperature_mode}, seed={sampler.seed}")
    result = sample(counter, schedule, sampler, n, classifier, args.class_label)
    frame = samples_frame(result.samples,
                          result.labels if args.class_label is not None else None, sampler.seed)
    output = write_csv(frame, args.output)
    artifacts = [output]
    if args.trajectory:
        traj = result.trajectory
        rows = [points_frame(state).assign(step=int(step), chain=np.arange(n))
                for step, state in zip(traj.timesteps, traj.states)]
        artifacts.append(write_csv(pd.concat(rows, ignore_index=True), args.trajectory))

    summary = {"Samples": n, "Steps": result.schedule.num_steps, "Output": output}
    if args.count_evals:
        logger.info(f"Model evaluations per chain: {counter.calls}")
        summary["Evaluations per chain"] = counter.calls
    write_manifest(output.parent, "sample",
                   _settings("sample", cfg, sampler=asdict(sampler), n=n,
                             class_label=args.class_label, inputs=inputs),
                   {"sampler": sampler.seed}, artifacts,
                   {"schedule": result.schedule.describe()})
    print_summary("SAMPLING SUMMARY", summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_experiment_config(args.config)
    runner = ExperimentRunner(cfg)
    samples, _ = load_points_csv(args.samples)
    reference = load_points_csv(args.reference)[0] if args.reference else None
    report = runner.evaluate(samples, reference)

    output = Path(args.output)
    artifacts = [write_csv(pd.DataFrame([report.to_row()]), output)]
    summary_path = output.with_suffix(".json")
    summary_path.write_text(json.dumps(report.to_row(), sort_keys=True, indent=2) + "\n",
                            encoding="utf-8")
    artifacts.append(summary_path)
    inputs = {str(args.samples): file_sha256(args.samples)}
    if args.reference:
        inputs[str(args.reference)] = file_sha256(args.reference)
    write_manifest(output.parent, "eval", _settings("eval", cfg, inputs=inputs),
                   {"reference": cfg.metrics.reference_seed}, artifacts)
    print_summary("EVALUATION SUMMARY", {
        "Frechet distance": f"{report.frechet:.6f}",
        "Precision": f"{report.precision:.4f}",
        "Recall": f"{report.recall:.4f}",
        "Class fidelity": f"{report.class_fidelity:.4f}",
    })
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_experiment_config(args.config)
    runner = ExperimentRunner(cfg)
    model, classifier, schedule, inputs = _resolve_models(args, cfg)
    if classifier is None:
        raise ValueError("a guidance sweep needs --classifier-checkpoint or --oracle")
    sampler = sampler_from_args(args, _base_sampler(args, cfg))
    scales = ([float(s) for s in args.scales.split(",")] if args.scales
              else list(cfg.metrics.scales))
    n = args.n if args.n is not None else cfg.metrics.num_samples
    output_dir = Path(args.output_dir) if args.output_dir else cfg.output_dir / "sweep"

    table = runner.sweep(model, classifier, schedule, sampler, scales, n, output_dir)
    artifacts = [output_dir / "sweep.csv"] + sorted(output_dir.glob("*.svg"))
    write_manifest(output_dir, "sweep",
                   _settings("sweep", cfg, sampler=asdict(sampler), scales=scales, n=n,
                             inputs=inputs),
                   {**runner.seeds(), "sampler": sampler.seed}, artifacts)
    print("\n" + table.to_string(index=False))
    return EXIT_OK


def cmd_encode(args) -> int:
    cfg = _load_config(args.config)
    model, _, schedule, inputs = _resolve_models(args, cfg)
    points, labels = load_points_csv(args.points)
    latents = encode_points(model, schedule, points, args.reverse_steps, labels)
    output = write_csv(points_frame(latents, labels), args.output)
    inputs[str(args.points)] = file_sha256(args.points)
    write_manifest(output.parent, "encode",
                   _settings("encode", cfg, reverse_steps=args.reverse_steps, inputs=inputs),
                   {}, [output])
    return EXIT_OK


def cmd_interpolate(args) -> int:
    cfg = _load_config(args.config)
    model, _, schedule, inputs = _resolve_models(args, cfg)
    points, labels = load_points_csv(args.points)
    if args.class_label is not None:
        labels = np.full(len(points), args.class_label)
    y = labels[:2] if model.conditional and labels is not None else None
    frame = interpolate_points(model, schedule, points[:2], args.reverse_steps, args.theta_count, y)
    output = write_csv(frame, args.output)
    inputs[str(args.points)] = file_sha256(args.points)
    write_manifest(output.parent, "interpolate",
                   _settings("interpolate", cfg, reverse_steps=args.reverse_steps,
                             theta_count=args.theta_count, class_label=args.class_label,
                             inputs=inputs),
                   {}, [output])
    return EXIT_OK


def _add_model_args(parser):
    parser.add_argument('--config', help='Experiment YAML file')
    parser.add_argument('--checkpoint', help='Denoiser checkpoint')
    parser.add_argument('--classifier-checkpoint', help='Noisy classifier checkpoint')
    parser.add_argument('--oracle', action='store_true',
                        help='Use the exact analytic denoiser and classifier of the config dataset')


def _add_sampler_args(parser):
    parser.add_argument('--steps', type=int, help='Uniformly respace to this many steps')
    parser.add_argument('--segments', help='Five-segment step schedule a,b,c,d,e')
    parser.add_argument('--guidance-scale', type=float, help='Classifier guidance scale s >= 0')
    parser.add_argument('--temperature-mode', action='append',
                        choices=['none', 'noise-scale', 'eps-scale'],
                        help='Temperature variant (give at most one)')
    parser.add_argument('--tau', type=float, help='Temperature value')
    parser.add_argument('--seed', type=int, help='Sampler seed')
    parser.add_argument('--ddim', action='store_true', help='Deterministic DDIM sampling')
    parser.add_argument('--variance-mode', choices=['learned-v', 'fixed-beta', 'fixed-beta-tilde'],
                        help='Reverse-step variance for ancestral sampling')
    parser.add_argument('--allow-experimental', action='store_true',
                        help='Permit guidance together with temperature')
    parser.add_argument('--n', type=int, help='Number of chains')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Guided diffusion on Gaussian-mixture data',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Train denoiser and classifier
  python run_diffusion.py train configs/toy.yaml

  # 25-step DDIM samples from a checkpoint, counting model calls
  python run_diffusion.py sample --checkpoint runs/toy/denoiser.ckpt --ddim --steps 25 --count-evals

  # Guided samples of class 2 with the analytic oracles
  python run_diffusion.py sample --config configs/benchmark.yaml --oracle --guidance-scale 2 --class 2

  # Five-segment schedule
  python run_diffusion.py sample --config configs/benchmark.yaml --oracle --segments 90,60,60,20,20

  # Evaluate, sweep, encode, interpolate
  python run_diffusion.py eval --config configs/benchmark.yaml --samples samples.csv
  python run_diffusion.py sweep --config configs/benchmark.yaml --oracle --scales 0,1,2,5,10
  python run_diffusion.py encode --config configs/benchmark.yaml --oracle --points pts.csv --reverse-steps 250
  python run_diffusion.py interpolate --config configs/benchmark.yaml --oracle --points pts.csv --reverse-steps 250 --theta-count 9

Exit codes: 0 success, 2 invalid config or arguments, 3 training diverged
        """
    )
    parser.add_argument('--debug', action='store_true', help='Enable debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='Train the configured denoiser and classifier')
    p.add_argument('config', help='Experiment YAML file')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('sample', help='Draw samples to CSV')
    _add_model_args(p)
    _add_sampler_args(p)
    p.add_argument('--class', dest='class_label', type=int, help='Class label to sample')
    p.add_argument('--count-evals', action='store_true', help='Report model evaluations per chain')
    p.add_argument('--trajectory', help='Also write every intermediate state to this CSV')
    p.add_argument('--output', default='samples.csv', help='Output CSV (default: samples.csv)')
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser('eval', help='Score a sample CSV against the reference batch')
    p.add_argument('--config', required=True, help='Experiment YAML file')
    p.add_argument('--samples', required=True, help='Sample CSV')
    p.add_argument('--reference', help='Reference CSV (default: seeded draw from the dataset)')
    p.add_argument('--output', default='metrics.csv', help='Metrics CSV; a JSON summary is written alongside')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('sweep', help='Metrics across guidance scales, CSV + SVG')
    _add_model_args(p)
    _add_sampler_args(p)
    p.add_argument('--scales', help='Comma-separated guidance scales')
    p.add_argument('--output-dir', help='Directory for sweep.csv and plots')
    p.set_defaults(handler=cmd_sweep)

    for name, helptext, handler in (('encode', 'Encode points to DDIM latents', cmd_encode),
                                    ('interpolate', 'Interpolate between two encoded points',
                                     cmd_interpolate)):
        p = sub.add_parser(name, help=helptext)
        _add_model_args(p)
        p.add_argument('--points', required=True, help='Points CSV (x0, x1, ...)')
        p.add_argument('--reverse-steps', type=int, required=True,
                       help='Length of the reverse-ODE chain')
        p.add_argument('--output', default=f'{name}.csv', help='Output CSV')
        if name == 'interpolate':
            p.add_argument('--theta-count', type=int, default=9,
                           help='Number of angles from 0 to pi/2 (default: 9)')
            p.add_argument('--class', dest='class_label', type=int,
                           help='Class of both endpoints (default: the points CSV class column)')
        p.set_defaults(handler=handler)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI function"""
    args = build_parser().parse_args(argv)

    # Set logging level
    if args.debug:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(f"Invalid config: {e}")
        return EXIT_USAGE
    except TrainingDivergedError as e:
        logger.error(f"Training diverged: {e}")
        return EXIT_DIVERGED
    except (ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
