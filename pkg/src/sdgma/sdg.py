"""Source data generation: invert a frozen classifier into a conditional generator."""
from __future__ import annotations

import copy
import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import DomainDataset
from .netcore import Generator, PretrainedModel, parameter_checksum, to_tensor

logger = logging.getLogger(__name__)

EPS = 1e-8


@dataclass
class LatentSample:
    y: torch.Tensor  # (B, K) one-hot
    z: torch.Tensor  # (B, z_dim)

    @property
    def labels(self) -> torch.Tensor:
        return self.y.argmax(1)

    def __len__(self):
        return len(self.y)


def sample_latent(batch: int, n_classes: int, z_dim: int,
                  rng: torch.Generator) -> LatentSample:
    """Uniform categorical one-hot labels and standard normal noise."""
    if min(batch, n_classes, z_dim) < 1:
        raise ValueError("batch, n_classes and z_dim must be >= 1")
    labels = torch.randint(n_classes, (batch,), generator=rng)
    y = F.one_hot(labels, n_classes).float()
    z = torch.randn(batch, z_dim, generator=rng)
    return LatentSample(y, z)


def classifier_loss(y: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Batch mean of -sum_i y_i log p_i."""
    return -(y * torch.log(probs.clamp_min(EPS))).sum(1).mean()


def gram_matrix(fmap: torch.Tensor) -> torch.Tensor:
    """(C, H, W) -> (C, C), or batched (B, C, H, W) -> (B, C, C); normalised by C*H*W."""
    squeeze = fmap.dim() == 3
    if squeeze:
        fmap = fmap.unsqueeze(0)
    b, c, h, w = fmap.shape
    flat = fmap.reshape(b, c, h * w)
    gram = flat @ flat.transpose(1, 2) / (c * h * w)
    return gram[0] if squeeze else gram


def gram_style_distance(feats_f, feats_t) -> torch.Tensor:
    """Per-pair sum over taps of squared Frobenius distance between Gram matrices."""
    total = 0.0
    for a, b in zip(feats_f, feats_t):
        diff = gram_matrix(a) - gram_matrix(b)
        total = total + diff.pow(2).sum(dim=(1, 2))
    return total


def style_loss(x_f: torch.Tensor, x_t: torch.Tensor, phi) -> torch.Tensor:
    """Gram-matrix style distance between position-paired images, batch mean."""
    if len(x_f) != len(x_t):
        raise ValueError("style loss needs equally sized batches")
    return gram_style_distance(phi(x_f), phi(x_t)).mean()


@dataclass
class SdgReport:
    steps: list[int] = field(default_factory=list)
    cls_loss: list[float] = field(default_factory=list)
    style_loss: list[float] = field(default_factory=list)
    recovery: list[float] = field(default_factory=list)
    best_index: Optional[int] = None

    @property
    def best_recovery(self) -> float:
        return self.recovery[self.best_index] if self.best_index is not None else float("nan")

    @property
    def best_step(self) -> Optional[int]:
        return self.steps[self.best_index] if self.best_index is not None else None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "cls_loss", "style_loss", "recovery_accuracy"])
            for row in zip(self.steps, self.cls_loss, self.style_loss, self.recovery):
                w.writerow([row[0]] + [f"{v:.8g}" for v in row[1:]])


@torch.no_grad()
def recovery_accuracy(G: Generator, M: PretrainedModel, n: int, seed: int) -> float:
    """Fraction of G(y, z) that M assigns to the conditioning class y."""
    was_training = G.training
    G.eval()
    lat = sample_latent(n, G.n_classes, G.z_dim, torch.Generator().manual_seed(seed))
    pred = M(G(lat.y, lat.z)).argmax(1)
    G.train(was_training)
    return float((pred == lat.labels).float().mean())


def train_sdg(M: PretrainedModel, phi, G: Generator, target: DomainDataset, config,
              eval_samples: int = 600):
    """Train G to minimise classifier loss against M plus style loss to the target.

    Returns the snapshot of G with the highest category-recovery accuracy, and
    the per-evaluation report.
    """
    G = copy.deepcopy(G)
    report = SdgReport()
    if config.sdg_steps == 0:
        return G, report
    checksum = parameter_checksum(M, phi)
    x_t = to_tensor(target.images)
    rng = torch.Generator().manual_seed(config.seed + 101)
    pair_rng = torch.Generator().manual_seed(config.seed + 202)
    torch.manual_seed(config.seed + 303)
    opt = torch.optim.Adam(G.parameters(), lr=config.sdg_lr)
    eval_seed = config.seed + 404
    best_state, best_acc = copy.deepcopy(G.state_dict()), -1.0
    running_cls, running_style, n_run = 0.0, 0.0, 0
    G.train()
    for step in range(1, config.sdg_steps + 1):
        lat = sample_latent(config.batch_size, G.n_classes, G.z_dim, rng)
        x_f = G(lat.y, lat.z)
        loss = 0.0
        l_cls = classifier_loss(lat.y, M(x_f))
        if not config.disable_classifier_loss:
            loss = loss + l_cls
        pair = torch.randint(len(x_t), (len(x_f),), generator=pair_rng)
        l_style = style_loss(x_f, x_t[pair], phi)
        if not config.disable_style_loss:
            loss = loss + config.style_weight * l_style
        opt.zero_grad()
        if torch.is_tensor(loss):
            loss.backward()
            opt.step()
        running_cls += l_cls.item()
        running_style += l_style.item()
        n_run += 1
        if step % config.sdg_eval_every == 0 or step == config.sdg_steps:
            acc = recovery_accuracy(G, M, eval_samples, eval_seed)
            report.steps.append(step)
            report.cls_loss.append(running_cls / n_run)
            report.style_loss.append(running_style / n_run)
            report.recovery.append(acc)
            running_cls, running_style, n_run = 0.0, 0.0, 0
            if acc >= best_acc:  # ties go to the later, longer-styled snapshot
                best_acc, report.best_index = acc, len(report.recovery) - 1
                best_state = copy.deepcopy(G.state_dict())
            if parameter_checksum(M, phi) != checksum:
                raise RuntimeError("frozen model or style network changed during SDG")
            logger.debug("sdg step %d: cls %.4f style %.5f recovery %.3f", step,
                         report.cls_loss[-1], report.style_loss[-1], acc)
    G.load_state_dict(best_state)
    G.eval()
    if best_acc < 1.0 / G.n_classes + 0.05:
        warnings.warn("generator failed to recover categories "
                      f"(recovery accuracy {best_acc:.3f})")
    return G, report


@torch.no_grad()
def generate_dataset(G: Generator, n: int, seed: int, label_set) -> DomainDataset:
    """Draw a labelled synthetic source domain from a trained generator."""
    G.eval()
    lat = sample_latent(n, G.n_classes, G.z_dim, torch.Generator().manual_seed(seed))
    x = G(lat.y, lat.z).permute(0, 2, 3, 1).numpy()
    return DomainDataset("synthetic_source", x, lat.labels.numpy(), label_set)


def save_contact_sheet(G: Generator, path, per_class: int = 8, seed: int = 0) -> None:
    from PIL import Image

    with torch.no_grad():
        G.eval()
        k = G.n_classes
        y = F.one_hot(torch.arange(k).repeat_interleave(per_class), k).float()
        z = torch.randn(len(y), G.z_dim, generator=torch.Generator().manual_seed(seed))
        imgs = G(y, z).permute(0, 2, 3, 1).numpy()
    s = G.image_size
    sheet = np.zeros((k * s, per_class * s, 3), dtype=np.float32)
    for i, img in enumerate(imgs):
        r, c = divmod(i, per_class)
        sheet[r * s:(r + 1) * s, c * s:(c + 1) * s] = img
    Image.fromarray((sheet * 255).round().astype(np.uint8)).save(path)
