import pytest

from fexsde.config import RunConfig


def tiny_settings(out_dir: str, benchmark: str = "ou") -> dict:
    return {
        "benchmark": benchmark,
        "out_dir": out_dir,
        "data": {"n_steps": 20, "n_trajectories": 60, "seed": 1},
        "search": {"depth": 1, "iterations": 2, "score_iters": 20, "score_eval_every": 10,
                   "lbfgs_iters": 5, "refine_iters": 20, "pool_size": 3},
        "noise": {"K": 20, "n_pairs": 200, "mc_batch": 100, "decoder": {"iterations": 20}},
        "eval": {"n_realizations": 200, "sweep_points": 5, "kde_points": 20, "reference_refine": 2,
                 "t_eval": 0.05, "density_times": [0.02, 0.05], "x0": [[1.5]]},
    }


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    return RunConfig.model_validate(tiny_settings(str(tmp_path)))
