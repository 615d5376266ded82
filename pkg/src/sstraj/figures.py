"""Matplotlib figure rendering for CLI reports.

Every command with a report path writes PNG figures next to its text
outputs: point sets and trajectories, loss curves, and grayscale image
panels (optionally center-cropped for display, the full arrays are
always written unchanged).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"dpi": 120, "bbox_inches": "tight", "metadata": {"Software": None}}


def _crop(img: np.ndarray, crop: int | None) -> np.ndarray:
    if crop is None or crop >= min(img.shape):
        return img
    cy, cx = img.shape[0] // 2, img.shape[1] // 2
    h = crop // 2
    return img[cy - h : cy - h + crop, cx - h : cx - h + crop]


def save_point_set(path: str | Path, points: np.ndarray, k_box: float, title: str = "sample locations") -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(points[:, 1], points[:, 0], ".", markersize=2, color="tab:blue")
    ax.set_xlim(-k_box, k_box)
    ax.set_ylim(-k_box, k_box)
    ax.set_xlabel("kx (cycles/m)")
    ax.set_ylabel("ky (cycles/m)")
    ax.set_title(title)
    ax.set_aspect("equal")
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_trajectory(path: str | Path, points: np.ndarray, k_box: float, title: str = "trajectory") -> None:
    fig, ax = plt.subplots(figsize=(5.5, 5))
    seg = np.stack([points[:-1], points[1:]], axis=1)
    from matplotlib.collections import LineCollection

    lc = LineCollection(seg[:, :, ::-1], cmap="viridis", linewidths=0.8)
    lc.set_array(np.arange(len(seg)))
    ax.add_collection(lc)
    ax.plot(points[0, 1], points[0, 0], "o", color="red", markersize=4, label="start (k-space center)")
    ax.set_xlim(-k_box, k_box)
    ax.set_ylim(-k_box, k_box)
    ax.set_xlabel("kx (cycles/m)")
    ax.set_ylabel("ky (cycles/m)")
    ax.set_title(title)
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8)
    cbar = fig.colorbar(lc, ax=ax, fraction=0.046)
    cbar.set_label("sample index (time)")
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_grayscale(path: str | Path, img: np.ndarray, crop: int | None = None, title: str | None = None) -> None:
    mag = _crop(np.abs(img), crop)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.imshow(mag, cmap="gray", interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_recon_panel(path: str | Path, panels: list[tuple[str, np.ndarray]], crop: int | None = None) -> None:
    fig, axes = plt.subplots(1, len(panels), figsize=(3.4 * len(panels), 3.6))
    if len(panels) == 1:
        axes = [axes]
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(_crop(np.abs(img), crop), cmap="gray", interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_axis_off()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_loss_curves(path: str | Path, records, val_records=None) -> None:
    steps = [r.step for r in records]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    axes[0].semilogy(steps, [max(r.total, 1e-300) for r in records], label="total")
    axes[0].semilogy(steps, [max(r.task, 1e-300) for r in records], label="task")
    axes[0].set_xlabel("step")
    axes[0].set_title("loss")
    axes[0].legend(fontsize=8)
    axes[1].semilogy(steps, [max(r.constraint, 1e-300) for r in records])
    axes[1].set_xlabel("step")
    axes[1].set_title("constraint penalty")
    axes[2].semilogy(steps, [max(r.max_v_violation, 1e-300) for r in records], label="velocity")
    axes[2].semilogy(steps, [max(r.max_a_violation, 1e-300) for r in records], label="acceleration")
    axes[2].set_xlabel("step")
    axes[2].set_title("max violation")
    axes[2].legend(fontsize=8)
    if val_records:
        axes[0].semilogy(
            [v.step for v in val_records if v.step > 0],
            [max(v.total, 1e-300) for v in val_records if v.step > 0],
            "o--", markersize=3, label="validation",
        )
        axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
