"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_curves(curves: dict[str, tuple[np.ndarray, np.ndarray]], path: str | Path,
                title: str = "hypervolume by step") -> Path:
    """Mean hv per step with a one-stderr band; ``curves[name] = (mean, stderr)``."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (mean, se) in curves.items():
        steps = np.arange(1, len(mean) + 1)
        ax.plot(steps, mean, label=name)
        ax.fill_between(steps, mean - se, mean + se, alpha=0.2)
    ax.set_xlabel("step")
    ax.set_ylabel("hypervolume")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_profiles(profiles: dict[str, tuple[np.ndarray, np.ndarray]], path: str | Path) -> Path:
    """Performance profiles; ``profiles[name] = (taus, fractions)``."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (taus, frac) in profiles.items():
        ax.step(taus, frac, where="post", label=name)
    ax.set_xlabel("normalized final hypervolume threshold")
    ax.set_ylabel("fraction of episodes")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
