"""Figure rendering for reports. Everything is drawn with the Agg backend straight to PNG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.interpolation": "nearest",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def _hwc(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    return np.clip(a.transpose(1, 2, 0), 0, 1) if a.ndim == 3 and a.shape[0] == 3 else a


def smooth(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if window <= 1 or len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")


def training_curves(records: list[dict], path, window: int = 50) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3))
        steps = np.array([r["step"] for r in records])
        for ax, key, label in zip(axes, ("l_recon", "l_balance", "lr"), ("reconstruction L1", "balance", "learning rate")):
            vals = np.array([r[key] for r in records])
            if key == "lr":
                ax.plot(steps, vals, lw=0.8)
            else:
                ax.plot(steps, vals, lw=0.3, alpha=0.3, color="C0")
                s = smooth(vals, window)
                ax.plot(steps[len(steps) - len(s) :], s, lw=1.0, color="C0")
            ax.set_title(label)
            ax.set_xlabel("step")
        axes[0].set_yscale("log")
        return _save(fig, path)


def metric_sweep(rows: list[dict], path) -> Path:
    """aRGB vs RGB distance with the deviation from the chord through the end points."""
    r = np.array([row["rgb_mean"] for row in rows])
    a = np.array([row["argb_mean"] for row in rows])
    a_sd = np.array([row["argb_std"] for row in rows])
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3))
        ax0.errorbar(r, a, yerr=a_sd, marker="o", ms=3, lw=1, capsize=2)
        ax0.set_xlabel("RGB mean squared distance")
        ax0.set_ylabel("aRGB mean squared distance")
        if len(r) >= 2 and r[-1] > r[0]:
            chord = a[0] + (a[-1] - a[0]) * (r - r[0]) / (r[-1] - r[0])
            ax1.plot(r, a - chord, marker="o", ms=3, lw=1)
        ax1.axhline(0, color="k", lw=0.5)
        ax1.set_xlabel("RGB mean squared distance")
        ax1.set_title("deviation from chord")
        return _save(fig, path)


def grad_histograms(stats: dict, path) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(stats), figsize=(4 * len(stats), 3), squeeze=False)
        for ax, (label, st) in zip(axes[0], stats.items()):
            centers = 0.5 * (st.bin_edges[1:] + st.bin_edges[:-1])
            ax.bar(centers, st.counts, width=np.diff(st.bin_edges), color="C3" if "argb" in label.lower() else "C0")
            ax.set_yscale("log")
            ax.set_title(f"{label}  mean|g|={st.mean_abs:.3g}")
            ax.set_xlabel("gradient")
        return _save(fig, path)


def expert_map(indices: np.ndarray, num_experts: int, path, image=None) -> Path:
    cmap = plt.get_cmap("tab20", max(num_experts, 2))
    with plt.rc_context(STYLE):
        n = 2 if image is not None else 1
        fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
        if image is not None:
            axes[0, 0].imshow(_hwc(image))
            axes[0, 0].set_title("input")
        im = axes[0, -1].imshow(indices, cmap=cmap, vmin=-0.5, vmax=max(num_experts, 2) - 0.5)
        axes[0, -1].set_title("expert selection")
        fig.colorbar(im, ax=axes[0, -1], fraction=0.046, ticks=range(num_experts))
        for ax in axes[0]:
            ax.set_axis_off()
        return _save(fig, path)


def expert_map_rgb(indices: np.ndarray, num_experts: int) -> np.ndarray:
    """Colour-coded map as a 3 x H x W float array (for plain PNG export)."""
    cmap = plt.get_cmap("tab20", max(num_experts, 2))
    return cmap(indices)[..., :3].transpose(2, 0, 1).astype(np.float32)


def self_reference(rms: np.ndarray, path) -> Path:
    vals = rms[np.isfinite(rms)]
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.2))
        im = ax0.imshow(rms, cmap="magma")
        ax0.set_axis_off()
        ax0.set_title("RMS of diag(A df/dx)")
        fig.colorbar(im, ax=ax0, fraction=0.046)
        ax1.hist(vals, bins=50)
        ax1.set_title(f"min {vals.min():.4f}  mean {vals.mean():.4f}  max {vals.max():.4f}")
        return _save(fig, path)


def image_grid(images: list, titles: list[str], path, ncols: int | None = None) -> Path:
    n = len(images)
    ncols = ncols or n
    nrows = int(np.ceil(n / ncols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(2.6 * ncols, 2.6 * nrows), squeeze=False)
        for ax in axes.ravel():
            ax.set_axis_off()
        for ax, img, title in zip(axes.ravel(), images, titles):
            ax.imshow(_hwc(img), cmap="gray" if np.asarray(img).ndim == 2 else None)
            ax.set_title(title)
        return _save(fig, path)


def loss_trace(traces: dict, path, ylabel: str = "loss", logy: bool = True) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for label, tr in traces.items():
            ax.plot(np.arange(len(tr)), tr, label=label, lw=1)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        ax.legend()
        return _save(fig, path)


def restoration_curves(logs: dict, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for label, records in logs.items():
            pts = [(r["step"], r["val_psnr"]) for r in records if "val_psnr" in r]
            if pts:
                s, p = zip(*pts)
                ax.plot(s, p, marker="o", ms=2, lw=1, label=label)
        ax.set_xlabel("step")
        ax.set_ylabel("validation PSNR [dB]")
        ax.legend()
        return _save(fig, path)
