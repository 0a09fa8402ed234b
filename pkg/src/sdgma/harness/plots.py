"""Figures from a finished run directory."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiment import RunManifest, StageError  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed metadata keeps PNG bytes identical across runs.
_PNG_META = {"Software": None}


def _read_csv(path) -> dict[str, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: [r[k] for r in rows] for k in (rows[0].keys() if rows else [])}


def sweep_figure(curve):
    """Figure with avg_all and unknown accuracy against the threshold."""
    w0 = [c[0] for c in curve]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(w0, [100 * c[1] for c in curve], marker="o", ms=3, label="Target domain")
    ax.plot(w0, [100 * c[2] for c in curve], marker="s", ms=3, label="Target-unknown")
    ax.set_xlabel("threshold $w_0$")
    ax.set_ylabel("accuracy (%)")
    ax.set_xlim(0, 2)
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    return fig


def _save(fig, path) -> Path:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def plot_threshold_sweep(sweep_csv, path) -> Path:
    cols = _read_csv(sweep_csv)
    curve = list(zip(map(float, cols["w0"]), map(float, cols["avg_all"]),
                     map(float, cols["unknown_accuracy"])))
    return _save(sweep_figure(curve), path)


def plot_losses(manifest: RunManifest, path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    ma = _read_csv(manifest.artifact("ma_log"))
    steps = np.array(ma["step"], dtype=int)
    for key in ("adv_loss", "ce_loss", "simi_loss"):
        axes[0].plot(steps, np.array(ma[key], dtype=float), label=key, lw=0.8)
    axes[0].set_title("model adaptation")
    axes[0].set_xlabel("step")
    axes[0].legend()
    if "sdg_report" in manifest.artifacts:
        sdg = _read_csv(manifest.artifact("sdg_report"))
        s = np.array(sdg["step"], dtype=int)
        axes[1].plot(s, np.array(sdg["cls_loss"], dtype=float), label="classifier loss")
        axes[1].plot(s, np.array(sdg["style_loss"], dtype=float), label="style loss")
        axes[1].plot(s, np.array(sdg["recovery_accuracy"], dtype=float), label="recovery")
        axes[1].set_title("source data generation")
        axes[1].set_xlabel("step")
        axes[1].legend()
    else:
        axes[1].set_axis_off()
    fig.tight_layout()
    return _save(fig, path)


def reduce_2d(features: np.ndarray, method: str = "tsne", seed: int = 0) -> np.ndarray:
    if method == "pca":
        from sklearn.decomposition import PCA
        return PCA(n_components=2, random_state=seed).fit_transform(features)
    from sklearn.manifold import TSNE
    perplexity = min(30.0, max(2.0, (len(features) - 1) / 3))
    return TSNE(n_components=2, init="pca", random_state=seed,
                perplexity=perplexity).fit_transform(features)


def plot_embeddings(embeddings_csv, shared, path, method: str = "tsne", seed: int = 0,
                    max_points: int = 1500) -> Path:
    with open(embeddings_csv, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    rng = np.random.default_rng(seed)
    if len(rows) > max_points:
        rows = [rows[i] for i in sorted(rng.choice(len(rows), max_points, replace=False))]
    domain = np.array([r[1] for r in rows])
    known = np.array([r[2] in shared or r[1] != "target" for r in rows])
    xy = reduce_2d(np.array([r[3:] for r in rows], dtype=float), method, seed)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    colors = {"real_source": "tab:blue", "synthetic_source": "tab:green", "target": "tab:red"}
    for dom, col in colors.items():
        m = domain == dom
        if m.any():
            axes[0].scatter(*xy[m].T, s=4, c=col, label=dom)
    axes[0].set_title("domain")
    axes[0].legend(markerscale=3)
    axes[1].scatter(*xy[known].T, s=4, c="tab:gray", label="known")
    axes[1].scatter(*xy[~known].T, s=4, c="gold", label="unknown")
    axes[1].set_title("category")
    axes[1].legend(markerscale=3)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def emit_plots(manifest: RunManifest, reducer: str = "tsne") -> list[Path]:
    """Write sweep, loss and embedding figures into the run's ``plots/`` dir."""
    out = Path(manifest.run_dir) / "plots"
    out.mkdir(exist_ok=True)
    written = [
        plot_threshold_sweep(manifest.artifact("threshold_sweep"), out / "threshold_sweep.png"),
        plot_losses(manifest, out / "losses.png"),
    ]
    if "embeddings" in manifest.artifacts:
        shared = set()
        if manifest.metrics and manifest.metrics.get("per_class"):
            shared = {k for k in manifest.metrics["per_class"] if k != "unknown"}
        written.append(plot_embeddings(manifest.artifact("embeddings"), shared,
                                       out / "embeddings.png", reducer, manifest.seed))
    else:
        logger.warning("no embedding export in %s; skipping embedding plot",
                       manifest.run_dir)
    for p in written:
        manifest.add(f"plot_{p.stem}", str(p.relative_to(manifest.run_dir)))
    manifest.save()
    return written
