"""SVG overlays of observed, predicted and ground-truth trajectories."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import Scene  # noqa: E402

BEST = "#ff4fa3"  # pink: the prediction closest to the ground truth
OTHER = "#8c8c8c"


def best_index(predictions: np.ndarray, future: np.ndarray) -> int:
    """Joint best-of-K: the prediction with the lowest scene-mean displacement."""
    err = np.linalg.norm(predictions - future[None], axis=-1).mean(axis=(1, 2))
    return int(err.argmin())


def plot_scene(scene: Scene, predictions, path) -> None:
    predictions = np.asarray(predictions, dtype=np.float64)
    past, future = scene.past, scene.future
    best = best_index(predictions, future)
    fig, ax = plt.subplots(figsize=(5, 5))
    for k, pred in enumerate(predictions):
        if k == best:
            continue
        for a in range(scene.n_agents):
            path_k = np.vstack([past[a, -1:], pred[a]])
            ax.plot(path_k[:, 0], path_k[:, 1], ":", color=OTHER, lw=1, alpha=0.7)
    for a in range(scene.n_agents):
        color = f"C{a % 10}"
        ax.plot(past[a, :, 0], past[a, :, 1], "-", color=color, lw=2)
        gt = np.vstack([past[a, -1:], future[a]])
        ax.plot(gt[:, 0], gt[:, 1], "-", color=color, lw=1, alpha=0.5)
        pk = np.vstack([past[a, -1:], predictions[best, a]])
        ax.plot(pk[:, 0], pk[:, 1], ":", color=BEST, lw=2)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title(f"{scene.scene_id}  (K={len(predictions)})")
    with plt.rc_context({"svg.hashsalt": "trajflow"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
