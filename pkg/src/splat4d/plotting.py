"""Report figures written next to the CLI's numeric outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .flowvis import flow_to_color  # noqa: E402


def _save(fig, path):
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_loss_curve(trace: list[dict], path) -> None:
    """Total and component losses per iteration on a log axis."""
    fig, ax = plt.subplots(figsize=(6, 4))
    if trace:
        it = np.array([row["iteration"] for row in trace])
        for key in ("total", "point", "motion", "pose", "photo", "smooth"):
            vals = np.array([row.get(key, np.nan) for row in trace], dtype=np.float64)
            if np.any(vals > 0):
                ax.semilogy(it, np.where(vals > 0, vals, np.nan), label=key, lw=1.5 if key == "total" else 1.0)
        ax.legend(fontsize=8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title("fit loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_eval(pred_points, gt_points, masks, path, pred_flows=None, gt_flows=None) -> None:
    """Per-frame point error maps and, when given, 3D flow error maps."""
    n = len(pred_points)
    rows = 2 if pred_flows is not None else 1
    fig, axes = plt.subplots(rows, n, figsize=(3.2 * n, 3.0 * rows), squeeze=False)
    for i in range(n):
        m = np.asarray(masks[i], bool)
        err = np.linalg.norm(np.asarray(pred_points[i]) - np.asarray(gt_points[i]), axis=-1)
        im = axes[0, i].imshow(np.where(m, err, np.nan), cmap="magma")
        axes[0, i].set_title(f"point error, frame {i}", fontsize=9)
        fig.colorbar(im, ax=axes[0, i], fraction=0.046)
        if pred_flows is not None:
            ferr = np.linalg.norm(np.asarray(pred_flows[i]) - np.asarray(gt_flows[i]), axis=-1)
            im = axes[1, i].imshow(np.where(m, ferr, np.nan), cmap="viridis")
            axes[1, i].set_title(f"flow error, frame {i}", fontsize=9)
            fig.colorbar(im, ax=axes[1, i], fraction=0.046)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)


def plot_flow(flow2d, valid, path, max_norm=None) -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(flow_to_color(flow2d, max_norm, valid))
    ax.set_axis_off()
    ax.set_title("projected optical flow", fontsize=9)
    fig.tight_layout()
    _save(fig, path)
