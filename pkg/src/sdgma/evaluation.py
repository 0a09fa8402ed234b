"""Evaluation protocol: per-class accuracy with a single unknown bucket, sweeps,
and feature export."""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .datamodel import BENCHMARK_TASKS, DomainDataset, UniDATask
from .ma import UNKNOWN, TargetScores, score_target
from .netcore import to_tensor

UNKNOWN_NAME = "unknown"


@dataclass
class MetricsReport:
    per_class: dict[str, float]
    avg_shared: float
    avg_all: float
    jaccard: float
    jaccard_reported: Optional[float] = None
    confusion: dict[str, dict[str, int]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    w0: Optional[float] = None
    threshold_curve: Optional[list] = None
    shared_size_curve: Optional[list] = None

    @property
    def unknown_accuracy(self) -> Optional[float]:
        return self.per_class.get(UNKNOWN_NAME)

    def to_dict(self) -> dict:
        return {
            "per_class": self.per_class, "avg_shared": self.avg_shared,
            "avg_all": self.avg_all, "jaccard": self.jaccard,
            "jaccard_reported": self.jaccard_reported, "confusion": self.confusion,
            "counts": self.counts, "w0": self.w0, "threshold_curve": self.threshold_curve,
            "shared_size_curve": self.shared_size_curve,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "accuracy", "n_samples"])
            for name, acc in self.per_class.items():
                w.writerow([name, f"{acc:.6f}", self.counts[name]])
            w.writerow(["avg_shared", f"{self.avg_shared:.6f}", ""])
            w.writerow(["avg_all", f"{self.avg_all:.6f}", ""])

    def table(self) -> str:
        width = max([len(n) for n in self.per_class] + [10])
        lines = [f"{'class':<{width}}  accuracy  n"]
        for name, acc in self.per_class.items():
            lines.append(f"{name:<{width}}  {100 * acc:8.2f}  {self.counts[name]}")
        lines.append(f"{'avg_shared':<{width}}  {100 * self.avg_shared:8.2f}")
        lines.append(f"{'avg_all':<{width}}  {100 * self.avg_all:8.2f}")
        xi = f"jaccard {self.jaccard:.4f}"
        if self.jaccard_reported is not None:
            xi += f" (table value {self.jaccard_reported:.2f})"
        lines.append(xi)
        return "\n".join(lines)


def averages_from_confusion(confusion: Mapping[str, Mapping[str, int]]):
    """(per-class accuracy, avg_shared, avg_all) from truth -> prediction counts."""
    per_class = {}
    for truth, row in confusion.items():
        total = sum(row.values())
        if total:
            per_class[truth] = row.get(truth, 0) / total
    shared = [v for k, v in per_class.items() if k != UNKNOWN_NAME]
    avg_shared = float(np.mean(shared)) if shared else float("nan")
    avg_all = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, avg_shared, avg_all


def score(predictions: Mapping[str, Optional[str]], ground_truth: Mapping[str, str],
          task: UniDATask, w0: Optional[float] = None) -> MetricsReport:
    """Score predicted class names (None or "unknown" for rejections).

    Target-private ground truth collapses into the unknown class; a shared
    class with no target samples contributes no term to the averages.
    """
    if set(predictions) != set(ground_truth):
        missing = set(ground_truth) ^ set(predictions)
        raise ValueError(f"prediction/ground-truth id mismatch ({len(missing)} ids)")
    order = list(task.shared) + [UNKNOWN_NAME]
    confusion: dict[str, Counter] = {}
    for sid, truth in ground_truth.items():
        truth = truth if truth in task.shared else UNKNOWN_NAME
        pred = predictions[sid]
        pred = UNKNOWN_NAME if pred is None else pred
        confusion.setdefault(truth, Counter())[pred] += 1
    confusion = {k: dict(sorted(confusion[k].items())) for k in order if k in confusion}
    per_class, avg_shared, avg_all = averages_from_confusion(confusion)
    counts = {k: sum(v.values()) for k, v in confusion.items()}
    reported = _reported_xi(task)
    return MetricsReport(per_class, avg_shared, avg_all, task.jaccard, reported,
                         confusion, counts, w0)


def _reported_xi(task: UniDATask) -> Optional[float]:
    from .datamodel import benchmark_task

    for (s, t), xi in BENCHMARK_TASKS.items():
        ref = benchmark_task(s, t)
        if ref.source_labels == task.source_labels and ref.target_labels == task.target_labels:
            return xi
    return None


def decisions_to_names(decisions: np.ndarray, source_names: Sequence[str]) -> list:
    return [None if c == UNKNOWN else source_names[c] for c in decisions]


def score_cached(scores: TargetScores, target: DomainDataset, task: UniDATask,
                 w0: float) -> MetricsReport:
    names = decisions_to_names(scores.decide(w0), task.source_labels.names)
    truth = dict(zip(target.ids, target.label_names()))
    return score(dict(zip(scores.ids, names)), truth, task, w0)


def threshold_sweep(bundle, target: DomainDataset, task: UniDATask, grid, config=None,
                    scores: Optional[TargetScores] = None) -> list[tuple]:
    """(w0, avg_all, unknown accuracy) per grid point from one forward pass."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty threshold grid")
    if scores is None:
        scores = score_target(bundle, target, config)
    curve = []
    for w0 in grid:
        rep = score_cached(scores, target, task, float(w0))
        unk = rep.unknown_accuracy
        curve.append((float(w0), rep.avg_all, float("nan") if unk is None else unk))
    return curve


def shared_set_sweep(config, sizes: Sequence[int], out_dir, total_classes: Optional[int] = None):
    """Accuracy against the number of shared classes, one full run per size.

    The total class count is held fixed; classes moved into the shared set
    are taken from the private sets, alternating target then source.
    """
    from pathlib import Path
    from .harness.experiment import run_experiment

    total = total_classes or (config.n_shared + config.n_source_private
                              + config.n_target_private)
    n_src = config.n_shared + config.n_source_private
    curve = []
    for k in sizes:
        if not 0 <= k <= min(n_src, total - n_src + config.n_shared):
            raise ValueError(f"shared size {k} not reachable")
        # |source| fixed at n_src; target gets the remaining classes plus the shared ones
        cfg = config.replace(n_shared=k, n_source_private=n_src - k,
                             n_target_private=total - n_src)
        manifest = run_experiment(cfg, Path(out_dir) / f"shared_{k:02d}")
        m = manifest.metrics
        curve.append((k, m["avg_all"], m["avg_shared"], m["per_class"].get(UNKNOWN_NAME)))
    return curve


@torch.no_grad()
def export_embeddings(bundle, datasets: Mapping[str, DomainDataset], path=None,
                      batch_size: int = 256):
    """Rows of (sample id, domain tag, category tag, feature...) from F."""
    bundle.eval()
    rows = []
    for domain, ds in datasets.items():
        x = to_tensor(ds.images)
        feats = torch.cat([bundle.F(x[i:i + batch_size])
                           for i in range(0, len(x), batch_size)]).numpy()
        cats = ds.label_names()
        for sid, cat, f in zip(ds.ids, cats, feats):
            rows.append((sid, domain, cat if cat is not None else "", f))
    if path is not None:
        dim = len(rows[0][3]) if rows else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "domain", "category"] + [f"f{i}" for i in range(dim)])
            for sid, dom, cat, f in rows:
                w.writerow([sid, dom, cat] + [f"{v:.6g}" for v in f])
    return rows
