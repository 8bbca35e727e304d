import json
import os

import numpy as np
import pytest

from fexsde import SdeLearner
from fexsde.cli import build_config, make_parser, run
from fexsde.config import load_config_dict
from fexsde.errors import ArtifactMissingError, EXIT_CONFIG, EXIT_MISSING_ARTIFACT, EXIT_OK
from fexsde.models import RunManifest
from fexsde.pipeline import Pipeline, resolve_case, x0_tag
from fexsde.storage import ArtifactChecker, ArtifactStore

from .conftest import tiny_settings


@pytest.mark.asyncio
async def test_store_writes_atomically(tmp_path):
    store = ArtifactStore(str(tmp_path), "demo", "1.0")
    await store.write_text("notes", "notes.txt", "hello")
    await store.write_bytes("blob", "blob.bin", b"\x00\x01")
    assert await store.read_text("notes.txt") == "hello"
    assert await store.read_bytes("blob.bin") == b"\x00\x01"
    assert not any(name.endswith(".tmp") for name in os.listdir(store.root))

    manifest = await store.commit_manifest(timings={"generate": 1.5}, seeds={"data": 3})
    assert manifest.artifacts == {"notes": "notes.txt", "blob": "blob.bin"}
    assert manifest.seeds == {"data": 3}
    assert manifest.updated_at is not None

    await store.commit_manifest(seeds={"search": 4})
    on_disk = RunManifest.model_validate(json.loads((tmp_path / "demo" / "manifest.json").read_text()))
    assert on_disk.seeds == {"data": 3, "search": 4}
    assert on_disk.timings == {"generate": 1.5}


@pytest.mark.asyncio
async def test_store_forget_and_missing(tmp_path):
    store = ArtifactStore(str(tmp_path), "demo")
    await store.write_text("decoder", "decoder.json", "{}")
    await store.forget("decoder", "never_written")
    assert not store.exists("decoder.json")
    assert "decoder" not in (await store.manifest()).artifacts

    with pytest.raises(ArtifactMissingError) as excinfo:
        await store.read_text("decoder.json", command="fit")
    assert excinfo.value.command == "fit"
    assert "fexsde fit" in str(excinfo.value)


@pytest.mark.asyncio
async def test_checker_reports_missing_inputs(tmp_path):
    store = ArtifactStore(str(tmp_path), "demo")
    checker = ArtifactChecker(store)
    with pytest.raises(ArtifactMissingError) as excinfo:
        await checker.check("fit")
    assert excinfo.value.command == "generate"

    await store.write_bytes("pairs", "pairs.bin", b"")
    await store.commit_manifest(data_hash="abc")
    await checker.check("fit", data_hash="abc")
    with pytest.raises(ArtifactMissingError):
        await checker.check("fit", data_hash="other")

    os.remove(store.path("pairs.bin"))
    status = await checker.status()
    assert status["status"] == "incomplete"
    assert status["checks"]["pairs"]["status"] == "error"


@pytest.mark.asyncio
async def test_full_pipeline(tiny_config):
    pipeline = Pipeline(tiny_config)
    traj = await pipeline.run("generate")
    assert traj.states.shape == (60, 21, 1)
    assert pipeline.store.exists("trajectories.csv") and pipeline.store.exists("pairs.bin")

    result = await pipeline.run("fit")
    assert len(result["expressions"]) == 1
    assert result["decoder"] is not None
    for filename in ["expression_dim0.json", "search_log.csv", "labeled_pairs.bin", "labeled_pairs.json",
                     "decoder.json"]:
        assert pipeline.store.exists(filename)

    summary = await pipeline.run("evaluate")
    assert summary.benchmark == "ou"
    assert len(summary.expressions) == 1
    assert summary.reference_expressions == ["1.1989 - 0.9953*x1"]
    assert len(summary.noise_std) == 1
    assert {"drift_degree", "drift_slope", "drift_intercept", "noise_std", "noise_mean"} <= set(summary.checks)

    assert pipeline.store.exists("ou_rollout_1.5.csv")
    assert pipeline.store.exists("ou_reference_1.5.csv")
    assert pipeline.store.exists("ou_density-true_1.5.csv")
    assert pipeline.store.exists("ou_effective-diffusion_dim1.csv")
    assert pipeline.store.exists("ou_evolution_t0.05.csv")
    assert pipeline.store.exists("ou_evolution-true_t0.05.csv")

    manifest = await pipeline.store.manifest()
    assert manifest.fit_hash == summary.fit_hash
    assert {"generate", "fit", "evaluate"} <= set(manifest.timings)
    assert "timings" not in json.loads(await pipeline.store.read_text("summary.json"))


@pytest.mark.asyncio
async def test_pipeline_is_reproducible(tmp_path):
    summaries = []
    for name in ["first", "second"]:
        cfg = load_config_dict(tiny_settings(str(tmp_path / name)))
        summaries.append(await Pipeline(cfg).run("reproduce"))
    assert summaries[0].model_dump() == summaries[1].model_dump()


@pytest.mark.asyncio
async def test_drift_only_stage(tiny_config):
    pipeline = Pipeline(tiny_config)
    await pipeline.run("generate")
    result = await pipeline.run("fit", "drift-only")
    assert result["decoder"] is None
    assert not pipeline.store.exists("decoder.json")

    model = await pipeline.load_model()
    assert model.decoder is None
    summary = await pipeline.run("evaluate")
    assert summary.noise_std == []
    assert "noise_std" not in summary.checks


@pytest.mark.asyncio
async def test_stage_order_is_enforced(tiny_config):
    pipeline = Pipeline(tiny_config)
    with pytest.raises(ArtifactMissingError) as excinfo:
        await pipeline.run("fit")
    assert excinfo.value.command == "generate"
    with pytest.raises(ArtifactMissingError) as excinfo:
        await pipeline.run("evaluate")
    assert excinfo.value.command == "fit"
    assert pipeline.metrics.get_metrics()["errors"] == 2


@pytest.mark.asyncio
async def test_stale_dataset_is_rejected(tiny_config):
    await Pipeline(tiny_config).run("generate")
    changed = tiny_config.set_value("data.n_steps=10")
    with pytest.raises(ArtifactMissingError) as excinfo:
        await Pipeline(changed).run("fit")
    assert excinfo.value.command == "generate"


@pytest.mark.asyncio
async def test_two_dimensional_benchmark_with_plots(tmp_path):
    settings = tiny_settings(str(tmp_path), "ol2d")
    settings["eval"].update(plots=True, x0=[[0.6, 0.6]])
    pipeline = Pipeline(load_config_dict(settings))
    summary = await pipeline.run("reproduce")
    assert len(summary.expressions) == 2
    assert pipeline.store.exists("ol2d_drift_dim2.csv")
    assert "drift2_linear" in summary.checks
    svg = await pipeline.store.read_text(f"ol2d_bands_{x0_tag([0.6, 0.6])}.svg")
    assert "<svg" in svg


@pytest.mark.asyncio
async def test_custom_sde_and_facade(tmp_path):
    settings = tiny_settings(str(tmp_path))
    settings.update(benchmark=None, custom={
        "name": "decay", "drift": ["-3*x1"], "diffusion": [[0.2]], "init_low": [0.0], "init_high": [1.0],
        "eval_x0": [[0.5]], "sweep_low": [-2.0], "sweep_high": [2.0], "t_eval": 0.05,
    })
    cfg = load_config_dict(settings)
    case = resolve_case(cfg)
    assert case.name == "decay"
    np.testing.assert_allclose(case.spec.drift(np.array([[1.0]])), [[-3.0]])

    learner = SdeLearner(cfg)
    await learner.generate()
    await learner.fit()
    summary = await learner.evaluate()
    assert summary.checks == {}
    assert summary.reference_expressions == []

    health = await learner.health_check()
    assert health["status"] == "ok"
    assert learner.get_metrics()["stages"] == 3


def test_cli_exit_codes(tmp_path, capsys):
    assert run(["print-config", "--benchmark", "trig", "--seed", "5", "--out", str(tmp_path)]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed["benchmark"] == "trig" and printed["search"]["seed"] == 5

    assert run(["generate", "--benchmark", "lorenz", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert run(["print-config", "--benchmark", "ou", "--set", "search.epsilon=3", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert run(["generate", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "either benchmark or custom" in capsys.readouterr().out
    assert not (tmp_path / "ou").exists()
    assert run(["evaluate", "--benchmark", "ou", "--out", str(tmp_path)]) == EXIT_MISSING_ARTIFACT
    assert "fexsde fit" in capsys.readouterr().out


def test_cli_reproduce_from_config_file(tmp_path, capsys):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_settings(str(tmp_path / "ignored"))))
    out = tmp_path / "runs"
    assert run(["reproduce", "--config", str(path), "--out", str(out), "--stage", "drift-only"]) == EXIT_OK
    assert (out / "ou" / "summary.json").exists()
    assert "reference: 1.1989 - 0.9953*x1" in capsys.readouterr().out


def test_cli_desk_scale_flags(monkeypatch, tmp_path):
    monkeypatch.setenv("FEX_SDE_SEED", "4")
    args = make_parser().parse_args(["fit", "--benchmark", "double_well", "--scale", "desk",
                                     "--iterations", "7", "--out", str(tmp_path)])
    cfg = build_config(args)
    assert cfg.search.iterations == 7
    assert cfg.data.n_trajectories == 2000
    assert cfg.noise.K == 2000
    assert cfg.search.seed == 4

    args = make_parser().parse_args(["fit", "--benchmark", "ou", "--seed", "11", "--out", str(tmp_path)])
    assert build_config(args).data.seed == 11


@pytest.mark.asyncio
async def test_density_plot_overlays_true_evolution(tmp_path):
    settings = tiny_settings(str(tmp_path))
    settings["eval"].update(plots=True)
    pipeline = Pipeline(load_config_dict(settings))
    await pipeline.run("reproduce")
    for t in ["0.02", "0.05"]:
        learned = await pipeline.store.read_text(f"ou_evolution_t{t}.csv")
        true = await pipeline.store.read_text(f"ou_evolution-true_t{t}.csv")
        assert [row.split(",")[0] for row in learned.splitlines()] == [row.split(",")[0] for row in true.splitlines()]
    svg = await pipeline.store.read_text("ou_evolution.svg")
    assert "learned t=0.05" in svg and "true t=0.05" in svg
