import asyncio
import json
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__
from .acceptance import acceptance_checks
from .config import RunConfig, data_hash, fit_hash
from .errors import ConfigurationError
from .evaluation import (
    LearnedSde, compare_functions, conditional_density, density_evolution, density_grid, effective_sweep,
    predict_step, reference_density_evolution, reference_rollout, rollout, sweep_grid,
    true_effective_coefficients,
)
from .expression import ExpressionInstance, deserialize, pretty_print, serialize
from .models import DecoderPayload, Summary
from .monitoring import RunLogger, StageMetrics, timed_stage
from .noise import (
    DecoderModel, DiffusionSchedule, build_pairs, residuals, sample_moments, sample_noise,
    train_decoder,
)
from .plotting import plot_bands, plot_densities, plot_sweep
from .search import SearchReport, regression_sets, run_search
from .simulation import (
    BenchmarkCase, InitRegion, TransitionPairs, benchmark, decode_pairs, encode_pairs,
    encode_trajectories, euler_maruyama, make_pairs, spec_from_strings, trajectories_to_csv,
)
from .storage import ArtifactChecker, ArtifactStore


def resolve_case(cfg: RunConfig) -> BenchmarkCase:
    """Эталонная задача или пользовательское SDE из конфигурации"""
    if cfg.custom is not None:
        c = cfg.custom
        spec = spec_from_strings(c.drift, c.diffusion, c.noise_kind, c.name)
        sigma = np.sqrt(np.sum(np.asarray(c.diffusion) ** 2, axis=1))
        return BenchmarkCase(
            name=c.name, spec=spec, init_region=InitRegion(c.init_low, c.init_high),
            n_trajectories=c.n_trajectories, t_eval=c.t_eval,
            eval_x0=[np.asarray(x0, dtype=np.float64) for x0 in c.eval_x0],
            search_iterations=c.search_iterations, sweep_low=np.asarray(c.sweep_low),
            sweep_high=np.asarray(c.sweep_high), reference_expressions=[], true_sigma=sigma,
        )
    if not cfg.benchmark:
        raise ConfigurationError("Configuration names neither a benchmark nor a custom SDE")
    return benchmark(cfg.benchmark)


def x0_tag(x0) -> str:
    return "_".join(f"{float(v):g}" for v in np.atleast_1d(x0))


class Pipeline:
    """generate → fit → evaluate для одной задачи; артефакты в {out_dir}/{name}/"""

    def __init__(self, cfg: RunConfig, logger: Optional[RunLogger] = None):
        self.cfg = cfg
        self.case = resolve_case(cfg)
        self.logger = logger or RunLogger("fexsde.pipeline")
        self.metrics = StageMetrics()
        self.store = ArtifactStore(cfg.out_dir, self.case.name, __version__, self.logger.child("storage"))
        self.checker = ArtifactChecker(self.store)

    @property
    def n_trajectories(self) -> int:
        return self.cfg.data.n_trajectories or self.case.n_trajectories

    @property
    def iterations(self) -> int:
        return self.cfg.search.iterations or self.case.search_iterations

    @property
    def t_eval(self) -> float:
        return self.cfg.eval.t_eval or self.case.t_eval

    @property
    def eval_x0(self) -> List[np.ndarray]:
        if self.cfg.eval.x0 is not None:
            return [np.asarray(x0, dtype=np.float64) for x0 in self.cfg.eval.x0]
        return self.case.eval_x0

    def _seeds(self) -> Dict[str, int]:
        return {
            "data": self.cfg.data.seed,
            "search": self.cfg.search.seed,
            "noise": self.cfg.noise.seed,
            "decoder": self.cfg.noise.decoder.seed,
            "eval": self.cfg.eval.seed,
        }

    async def _write_config(self):
        await self.store.write_text("effective_config", "effective_config.json",
                                    json.dumps(self.cfg.model_dump(), indent=2, sort_keys=True))

    @timed_stage
    async def generate(self):
        data = self.cfg.data
        traj = await asyncio.to_thread(
            euler_maruyama, self.case.spec, self.case.init_region, data.dt, data.n_steps,
            self.n_trajectories, data.seed, self.logger,
        )
        self.metrics.increment("excluded_trajectories", traj.excluded)
        pairs = make_pairs(traj)

        await self._write_config()
        await self.store.write_text("trajectories_csv", "trajectories.csv", trajectories_to_csv(traj))
        await self.store.write_bytes("trajectories", "trajectories.bin", encode_trajectories(traj))
        await self.store.write_bytes("pairs", "pairs.bin", encode_pairs(pairs))
        await self.store.commit_manifest(data_hash=data_hash(self.cfg), seeds=self._seeds())
        self.logger.info(f"Generated {traj.n_trajectories} trajectories, {len(pairs)} pairs")
        return traj

    async def load_pairs(self) -> TransitionPairs:
        await self.checker.check("fit", data_hash=data_hash(self.cfg))
        return decode_pairs(await self.store.read_bytes("pairs.bin", command="generate"))

    @timed_stage
    async def fit(self, stage: str = "full") -> Dict[str, Any]:
        if stage not in ("full", "drift-only"):
            raise ConfigurationError(f"Unknown stage: {stage}")
        pairs = await self.load_pairs()
        search_log = self.logger.child("search")

        sets = regression_sets(pairs, self.cfg.search, self.case.spec.noise_kind, search_log)
        report: SearchReport = await asyncio.to_thread(
            run_search, sets, self.cfg.search, self.iterations, self.cfg.threads, search_log, self.metrics,
        )
        for i, expr in enumerate(report.expressions):
            await self.store.write_bytes(f"expression_dim{i}", f"expression_dim{i}.json", serialize(expr))
        await self.store.write_text("search_log", "search_log.csv", report.history.to_csv())
        await self._write_config()

        decoder = None
        if stage == "full":
            decoder = await self._fit_noise(pairs, report.expressions)
        else:
            await self.store.forget("decoder", "labeled_pairs", "labeled_pairs_meta")

        await self.store.commit_manifest(fit_hash=fit_hash(self.cfg), seeds=self._seeds())
        return {"expressions": report.expressions, "decoder": decoder, "report": report}

    async def _fit_noise(self, pairs: TransitionPairs, drift: List[ExpressionInstance]) -> DecoderModel:
        noise_cfg = self.cfg.noise
        noise_log = self.logger.child("noise")
        res = residuals(pairs, drift, noise_log, self.metrics)
        noise_log.info(f"Residual moments: {res.moments()}")

        schedule = DiffusionSchedule(noise_cfg.K)
        labeled = await asyncio.to_thread(
            build_pairs, res, noise_cfg.n_pairs, schedule, noise_cfg.K, noise_cfg.seed,
            noise_cfg.mc_batch, noise_cfg.max_residuals, self.cfg.threads, noise_log,
        )
        await self.store.write_bytes("labeled_pairs", "labeled_pairs.bin", labeled.to_bytes())
        await self.store.write_model("labeled_pairs_meta", "labeled_pairs.json", labeled.meta())

        decoder = await asyncio.to_thread(train_decoder, labeled, noise_cfg.decoder, noise_log)
        await self.store.write_text("decoder", "decoder.json", decoder.to_json())
        return decoder

    async def load_model(self) -> LearnedSde:
        await self.checker.check("evaluate", fit_hash=fit_hash(self.cfg))
        manifest = await self.store.manifest()
        drift = []
        for i in range(self.case.spec.dim):
            drift.append(deserialize(await self.store.read_bytes(f"expression_dim{i}.json", command="fit")))
        decoder = None
        if "decoder" in manifest.artifacts:
            payload = await self.store.read_model("decoder.json", DecoderPayload, command="fit")
            decoder = DecoderModel.from_payload(payload)
        return LearnedSde(drift, decoder, self.cfg.data.dt)

    async def _write_csv(self, metric: str, tag: str, text: str):
        filename = f"{self.case.name}_{metric}_{tag}.csv"
        await self.store.write_text(f"{metric}_{tag}", filename, text)

    @timed_stage
    async def evaluate(self) -> Summary:
        model = await self.load_model()
        ev = self.cfg.eval
        spec = self.case.spec
        eval_log = self.logger.child("eval")
        steps = int(round(self.t_eval / model.dt))
        metrics: Dict[str, Any] = {}

        # Ансамбли и одношаговые плотности для каждого x0
        for k, x0 in enumerate(self.eval_x0):
            tag = x0_tag(x0)
            learned = await asyncio.to_thread(rollout, model, x0, steps, ev.n_realizations, ev.seed + k)
            reference = await asyncio.to_thread(reference_rollout, spec, x0, steps, ev.n_realizations,
                                                model.dt, ev.seed + 1000 + k, ev.reference_refine)
            await self._write_csv("rollout", tag, learned.to_csv())
            await self._write_csv("reference", tag, reference.to_csv())
            metrics[f"rollout_mean_error_{tag}"] = float(np.max(np.abs(learned.mean - reference.mean)))
            if ev.plots:
                await self.store.write_bytes(f"bands_{tag}", f"{self.case.name}_bands_{tag}.svg",
                                             plot_bands(learned, reference, title=f"{self.case.name} x0={tag}"))

            if spec.dim == 1:
                rng = np.random.default_rng(ev.seed + 2000 + k)
                one_step = predict_step(model, np.tile(x0, (ev.n_realizations, 1)), rng)[:, 0]
                true_step = reference_rollout(spec, x0, 1, ev.n_realizations, model.dt,
                                              ev.seed + 3000 + k, ev.reference_refine, snapshot_times=[model.dt])
                truth = true_step.snapshots[model.dt][:, 0]
                grid = density_grid(np.concatenate([one_step, truth]), ev.kde_points)
                await self._write_csv("density", tag, conditional_density(one_step, grid, logger=eval_log).to_csv())
                await self._write_csv("density-true", tag, conditional_density(truth, grid, logger=eval_log).to_csv())

        # Сравнение сноса и эффективных коэффициентов на расширенной области
        grid = sweep_grid(self.case.sweep_low, self.case.sweep_high, ev.sweep_points)
        low, high = self.case.train_low, self.case.train_high
        eff = await asyncio.to_thread(effective_sweep, model, grid, ev.n_realizations, ev.seed + 4000)
        true_eff = true_effective_coefficients(spec, grid, model.dt)
        effective_drift_cmp = None
        for i in range(spec.dim):
            drift_cmp = compare_functions(lambda g, i=i: model.drift[i].predict(g),
                                          lambda g, i=i: spec.drift(g)[:, i], grid, low, high)
            eff_cmp = compare_functions(lambda g, i=i: eff.drift[:, i], lambda g, i=i: true_eff.drift[:, i],
                                        grid, low, high)
            diff_cmp = compare_functions(lambda g, i=i: eff.diffusion[:, i], lambda g, i=i: true_eff.diffusion[:, i],
                                         grid, low, high)
            tag = f"dim{i + 1}"
            await self._write_csv("drift", tag, drift_cmp.to_csv())
            await self._write_csv("effective-drift", tag, eff_cmp.to_csv())
            await self._write_csv("effective-diffusion", tag, diff_cmp.to_csv())
            metrics[f"drift_l2_error_{tag}"] = drift_cmp.l2_error
            metrics[f"drift_max_error_{tag}"] = drift_cmp.max_error
            metrics[f"effective_drift_max_error_{tag}"] = eff_cmp.max_error
            metrics[f"effective_diffusion_max_error_{tag}"] = diff_cmp.max_error
            if i == 0:
                effective_drift_cmp = eff_cmp
            if ev.plots and spec.dim == 1:
                await self.store.write_bytes(f"drift_plot_{tag}", f"{self.case.name}_drift_{tag}.svg",
                                             plot_sweep(drift_cmp, "drift", title=self.case.name))
                await self.store.write_bytes(f"diffusion_plot_{tag}", f"{self.case.name}_diffusion_{tag}.svg",
                                             plot_sweep(diff_cmp, "diffusion", title=self.case.name))

        # Эволюция плотности на длинных горизонтах
        times = ev.density_times if ev.density_times is not None else self.case.density_times
        if times and spec.dim == 1:
            x0 = self.eval_x0[min(1, len(self.eval_x0) - 1)]
            estimates = await asyncio.to_thread(density_evolution, model, x0, times, ev.n_realizations,
                                                ev.seed + 5000, None, 0, ev.kde_points, eval_log)
            shared_grid = next(iter(estimates.values())).grid
            true_estimates = await asyncio.to_thread(reference_density_evolution, spec, x0, times,
                                                     ev.n_realizations, model.dt, ev.seed + 7000, shared_grid,
                                                     ev.reference_refine, 0, eval_log)
            for t, est in estimates.items():
                await self._write_csv("evolution", f"t{t:g}", est.to_csv())
                await self._write_csv("evolution-true", f"t{t:g}", true_estimates[t].to_csv())
            if ev.plots:
                await self.store.write_bytes("evolution_plot", f"{self.case.name}_evolution.svg",
                                             plot_densities({f"t={t:g}": e for t, e in estimates.items()},
                                                            {f"t={t:g}": e for t, e in true_estimates.items()},
                                                            title=self.case.name))

        noise_samples = None
        moments = {"mean": [], "std": []}
        if model.decoder is not None:
            noise_samples = sample_noise(model.decoder, ev.n_realizations, ev.seed + 6000)
            moments = sample_moments(noise_samples)
            metrics["noise_skewness"] = moments["skewness"]

        checks = acceptance_checks(
            self.case.name, model.drift, noise_samples,
            drift_sweep=effective_drift_cmp if spec.dim == 1 and model.decoder is not None else None,
            drift_se=eff.drift_se[:, 0] if spec.dim == 1 else None,
            diffusion_sweep=eff.diffusion[:, 0] if spec.dim == 1 and model.decoder is not None else None,
        )
        manifest = await self.store.manifest()
        summary = Summary(
            benchmark=self.case.name,
            fit_hash=manifest.fit_hash,
            expressions=[pretty_print(e) for e in model.drift],
            reference_expressions=self.case.reference_expressions,
            noise_mean=moments["mean"],
            noise_std=moments["std"],
            checks=checks,
            metrics=metrics,
        )
        await self.store.write_model("summary", "summary.json", summary)
        return summary

    async def run(self, command: str, stage: str = "full"):
        """Запуск команды и атомарная фиксация манифеста с таймингами"""
        if command == "generate":
            result = await self.generate()
        elif command == "fit":
            result = await self.fit(stage)
        elif command == "evaluate":
            result = await self.evaluate()
        elif command == "reproduce":
            await self.generate()
            await self.fit(stage)
            result = await self.evaluate()
        else:
            raise ConfigurationError(f"Unknown command: {command}")
        await self.store.commit_manifest(timings=self.metrics.timings)
        return result
