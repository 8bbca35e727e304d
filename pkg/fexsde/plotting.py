import io
from typing import Dict, Optional

import matplotlib
matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import DensityEstimate, EnsembleStats, FunctionComparison


def _to_svg(fig) -> bytes:
    buffer = io.BytesIO()
    fig.savefig(buffer, format="svg", bbox_inches="tight", facecolor="white")
    plt.close(fig)
    return buffer.getvalue()


def plot_bands(learned: EnsembleStats, reference: Optional[EnsembleStats] = None,
               component: int = 0, title: str = "") -> bytes:
    """Среднее ± std по времени для обученной модели и эталона"""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for stats, label, color in [(learned, "learned", "tab:blue"), (reference, "true", "tab:orange")]:
        if stats is None:
            continue
        mean = stats.mean[:, component]
        std = stats.std[:, component]
        ax.plot(stats.times, mean, color=color, label=f"{label} mean")
        ax.fill_between(stats.times, mean - std, mean + std, color=color, alpha=0.25)
    ax.set_xlabel("t")
    ax.set_ylabel(f"x{component + 1}")
    ax.set_title(title)
    ax.legend()
    return _to_svg(fig)


def plot_sweep(comparison: FunctionComparison, ylabel: str, title: str = "") -> bytes:
    """Сравнение функций вдоль сетки; область обучения затенена"""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    s = comparison.grid[:, 0]
    ax.plot(s, comparison.true, color="black", linestyle="--", label="true")
    ax.plot(s, comparison.learned, color="tab:red", label="learned")
    inside = s[comparison.in_domain]
    if inside.size:
        ax.axvspan(inside.min(), inside.max(), color="grey", alpha=0.15, label="training domain")
    ax.set_xlabel("x1")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    return _to_svg(fig)


def plot_densities(learned: Dict[str, DensityEstimate], reference: Optional[Dict[str, DensityEstimate]] = None,
                   title: str = "") -> bytes:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, est in learned.items():
        ax.plot(est.grid, est.values, label=f"learned {label}")
    for label, est in (reference or {}).items():
        ax.plot(est.grid, est.values, linestyle="--", label=f"true {label}")
    ax.set_xlabel("x")
    ax.set_ylabel("density")
    ax.set_title(title)
    ax.legend(fontsize="small")
    return _to_svg(fig)
