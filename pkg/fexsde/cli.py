#!/usr/bin/env python3
import asyncio
import json
import sys
import argparse
from typing import List, Optional

from pydantic import ValidationError

from .config import EnvironmentConfig, RunConfig, load_config
from .errors import (
    ArtifactMissingError, ConfigurationError, NumericalError, EXIT_CONFIG, EXIT_MISSING_ARTIFACT,
    EXIT_NUMERICAL, EXIT_OK,
)
from .expression import pretty_print
from .monitoring import RunLogger
from .pipeline import Pipeline
from .simulation import BENCHMARKS


class CLI:
    def __init__(self, cfg: RunConfig, stage: str = "full"):
        self.config = cfg
        self.stage = stage
        self.logger = RunLogger("fexsde.cli")

    def _pipeline(self, cfg: Optional[RunConfig] = None) -> Pipeline:
        return Pipeline(cfg or self.config, self.logger)

    async def generate(self):
        pipeline = self._pipeline()
        print(f"🔍 Simulating {pipeline.case.name}: {pipeline.n_trajectories} trajectories...")
        traj = await pipeline.run("generate")
        print(f"✅ Dataset written to {pipeline.store.root} "
              f"({traj.n_trajectories}×{traj.n_steps + 1}×{traj.dim})")

    async def fit(self):
        pipeline = self._pipeline()
        print(f"🔍 Searching drift for {pipeline.case.name} ({pipeline.iterations} iterations per dimension)...")
        result = await pipeline.run("fit", self.stage)
        for i, expr in enumerate(result["expressions"]):
            print(f"   dim {i + 1}: {pretty_print(expr)}")
        if result["decoder"] is None:
            print("⚠️  Noise stage skipped (drift-only)")
        else:
            print(f"✅ Decoder trained, final loss {result['decoder'].final_loss:.6g}")

    async def evaluate(self):
        pipeline = self._pipeline()
        print(f"📊 Evaluating {pipeline.case.name}...")
        summary = await pipeline.run("evaluate")
        self._print_summary(summary)

    async def reproduce(self, names: Optional[List[str]] = None):
        configs = [self.config] if names is None else [
            self.config.model_copy(update={"benchmark": name, "custom": None}, deep=True).apply_scale()
            for name in names
        ]
        for cfg in configs:
            pipeline = self._pipeline(cfg)
            print(f"🔄 Reproducing {pipeline.case.name} ({cfg.scale} scale)...")
            summary = await pipeline.run("reproduce", self.stage)
            self._print_summary(summary)

    def print_config(self):
        print(json.dumps(self.config.model_dump(), indent=2, sort_keys=True))

    def _print_summary(self, summary):
        print(f"\n📊 {summary.benchmark}")
        print("-" * 40)
        for i, expr in enumerate(summary.expressions):
            reference = summary.reference_expressions[i] if i < len(summary.reference_expressions) else "-"
            print(f"dim {i + 1}: {expr}")
            print(f"   reference: {reference}")
        if summary.noise_std:
            print(f"noise mean {summary.noise_mean}, std {summary.noise_std}")
        for name, passed in summary.checks.items():
            print(f"{'✅' if passed else '❌'} {name}")
        print("-" * 40)


def build_config(args, env: Optional[EnvironmentConfig] = None) -> RunConfig:
    """Файл → масштаб → --set → флаги → переменные окружения для сида"""
    env = env or EnvironmentConfig()
    benchmark = args.benchmark
    if benchmark == "all":
        # reproduce подставляет каждую задачу сама
        benchmark = next(iter(BENCHMARKS))
    cfg = load_config(args.config, benchmark)
    if args.scale:
        cfg.scale = args.scale
    for assignment in args.set or []:
        cfg = cfg.set_value(assignment)

    if args.trajectories is not None:
        cfg.data.n_trajectories = args.trajectories
    if args.iterations is not None:
        cfg.search.iterations = args.iterations
    # Для "all" масштаб применяется к каждой задаче отдельно
    if args.benchmark != "all":
        cfg = cfg.apply_scale()

    threads = args.threads if args.threads is not None else env.get_threads()
    if threads is not None:
        cfg.threads = threads
    cfg.out_dir = args.out or env.get_out_dir(cfg.out_dir)

    seed = args.seed if args.seed is not None else env.get_seed()
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='fexsde - two-stage learning of SDEs from trajectory data')
    parser.add_argument('command', choices=[
        'generate', 'fit', 'evaluate', 'reproduce', 'print-config'
    ])
    parser.add_argument('--config', help='Path to a JSON run configuration')
    parser.add_argument('--out', help='Output directory')
    parser.add_argument('--benchmark', help=f"Benchmark name ({', '.join(BENCHMARKS)}) or 'all' for reproduce")
    parser.add_argument('--scale', choices=['full', 'desk'], help='Full-size settings or reduced desk settings')
    parser.add_argument('--stage', choices=['full', 'drift-only'], default='full')
    parser.add_argument('--threads', type=int, help='Worker threads for scoring and pair construction')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--trajectories', type=int, help='Number of simulated trajectories L')
    parser.add_argument('--iterations', type=int, help='Search iterations per dimension')
    parser.add_argument('--set', action='append', metavar='SECTION.FIELD=VALUE',
                        help='Override a config value, e.g. search.epsilon=0.2')
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    args = make_parser().parse_args(argv)

    try:
        cfg = build_config(args)
        cli = CLI(cfg, args.stage)
        if args.command == 'generate':
            asyncio.run(cli.generate())
        elif args.command == 'fit':
            asyncio.run(cli.fit())
        elif args.command == 'evaluate':
            asyncio.run(cli.evaluate())
        elif args.command == 'reproduce':
            names = list(BENCHMARKS) if args.benchmark == 'all' else None
            asyncio.run(cli.reproduce(names))
        elif args.command == 'print-config':
            cli.print_config()
    except (ConfigurationError, ValidationError) as e:
        print(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    except ArtifactMissingError as e:
        print(f"❌ {e}")
        return EXIT_MISSING_ARTIFACT
    except NumericalError as e:
        print(f"❌ Numerical failure: {e}")
        return EXIT_NUMERICAL
    except Exception as e:
        print(f"❌ Error: {e}")
        return 1
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()
