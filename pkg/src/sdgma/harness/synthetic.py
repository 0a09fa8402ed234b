"""Procedural shape-scene domains standing in for the remote-sensing dataset pairs."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from ..datamodel import DomainDataset, LabelSet, ValidationError

SHAPES = ("disk", "square", "triangle", "plus", "ring", "hstripes",
          "twodots", "checker", "dotgrid", "diamond", "xcross", "vstripes",
          "frame", "crescent", "hourglass", "arrow")


@dataclass(frozen=True)
class DomainStyle:
    background: tuple[float, float, float] = (0.15, 0.15, 0.15)
    background_jitter: float = 0.1
    texture: float = 0.06
    hue_range: tuple[float, float] = (0.0, 0.5)
    saturation: float = 0.8
    noise: float = 0.03
    blur: float = 0.0


SOURCE_STYLE = DomainStyle()
# Shifted ground colour, heavier texture, overlapping but shifted hues, mild blur.
TARGET_STYLE = DomainStyle(background=(0.45, 0.4, 0.3), background_jitter=0.1,
                           texture=0.15, hue_range=(0.4, 0.9), saturation=0.6,
                           noise=0.06, blur=0.4)


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Class partition and style pair for a synthetic source/target task.

    Classes are ordered shared, source-private, target-private; shape ``k``
    of ``SHAPES`` is class ``k``.
    """

    n_shared: int = 4
    n_source_private: int = 2
    n_target_private: int = 3
    samples_per_class: int = 200
    image_size: int = 32
    seed: int = 0
    source_style: DomainStyle = SOURCE_STYLE
    target_style: DomainStyle = TARGET_STYLE

    @property
    def class_names(self) -> list[str]:
        return list(SHAPES[: self.n_shared + self.n_source_private + self.n_target_private])

    @property
    def source_classes(self) -> list[str]:
        return self.class_names[: self.n_shared + self.n_source_private]

    @property
    def target_classes(self) -> list[str]:
        names = self.class_names
        return names[: self.n_shared] + names[self.n_shared + self.n_source_private:]

    @classmethod
    def from_config(cls, config) -> "SyntheticDomainSpec":
        return cls(n_shared=config.n_shared, n_source_private=config.n_source_private,
                   n_target_private=config.n_target_private,
                   samples_per_class=config.samples_per_class,
                   image_size=config.image_size, seed=config.seed)


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    if shape == "disk":
        return r < 0.5
    if shape == "square":
        return np.maximum(abs(u), abs(v)) < 0.42
    if shape == "triangle":
        return (v > -0.4) & (v < 0.5) & (abs(u) < (0.5 - v) * 0.55)
    if shape == "plus":
        return ((abs(u) < 0.15) & (abs(v) < 0.58)) | ((abs(v) < 0.15) & (abs(u) < 0.58))
    if shape == "ring":
        return (r > 0.32) & (r < 0.56)
    if shape == "hstripes":
        return (abs(u) < 0.6) & (abs(v) < 0.6) & (np.sin(v * np.pi * 2.5) > 0)
    if shape == "vstripes":
        return (abs(u) < 0.6) & (abs(v) < 0.6) & (np.sin(u * np.pi * 2.5) > 0)
    if shape == "diamond":
        return abs(u) + abs(v) < 0.58
    if shape == "xcross":
        a, b = (u + v) / np.sqrt(2), (u - v) / np.sqrt(2)
        return ((abs(a) < 0.14) & (abs(b) < 0.6)) | ((abs(b) < 0.14) & (abs(a) < 0.6))
    if shape == "twodots":
        return (np.hypot(u - 0.3, v - 0.3) < 0.22) | (np.hypot(u + 0.3, v + 0.3) < 0.22)
    if shape == "frame":
        m = np.maximum(abs(u), abs(v))
        return (m < 0.55) & (m > 0.36)
    if shape == "crescent":
        return (r < 0.52) & (np.hypot(u - 0.25, v) > 0.42)
    if shape == "checker":
        return ((abs(u) < 0.6) & (abs(v) < 0.6)
                & ((np.floor((u + 0.6) / 0.3) + np.floor((v + 0.6) / 0.3)) % 2 == 0))
    if shape == "dotgrid":
        cu, cv = (u + 0.6) % 0.4 - 0.2, (v + 0.6) % 0.4 - 0.2
        return (abs(u) < 0.6) & (abs(v) < 0.6) & (np.hypot(cu, cv) < 0.11)
    if shape == "hourglass":
        return (abs(v) < 0.55) & (abs(u) < abs(v) * 0.9 + 0.04)
    if shape == "arrow":
        head = (v > 0.0) & (v < 0.55) & (abs(u) < (0.55 - v) * 0.9)
        return head | ((abs(u) < 0.13) & (v <= 0.0) & (v > -0.55))
    raise ValueError(f"unknown shape {shape!r}")


def render(shape: str, style: DomainStyle, size: int,
           rng: np.random.Generator) -> np.ndarray:
    """One (size, size, 3) image in [0, 1]."""
    ss = 2 * size  # supersample for anti-aliasing
    g = (np.arange(ss) + 0.5) / ss * 2 - 1
    yy, xx = np.meshgrid(g, g, indexing="ij")
    theta = rng.uniform(-0.25, 0.25)
    scale = rng.uniform(0.85, 1.15)
    tx, ty = rng.uniform(-0.15, 0.15, size=2)
    c, s = np.cos(theta), np.sin(theta)
    u = (c * (xx - tx) + s * (yy - ty)) / scale
    v = (-s * (xx - tx) + c * (yy - ty)) / scale
    mask = _shape_mask(shape, u, v).astype(np.float32)
    mask = mask.reshape(size, 2, size, 2).mean(axis=(1, 3))

    bg = np.clip(np.asarray(style.background)
                 + rng.normal(0, style.background_jitter, 3), 0, 1)
    img = np.broadcast_to(bg, (size, size, 3)).astype(np.float32).copy()
    if style.texture > 0:
        gy, gx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
        tex = np.zeros((size, size), dtype=np.float32)
        for _ in range(3):
            fx, fy = rng.uniform(1, 6, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            tex += np.sin(2 * np.pi * (fx * gx + fy * gy) + ph)
        img += (style.texture / 3) * tex[..., None] * rng.uniform(0.5, 1.0, 3)
    h = rng.uniform(*style.hue_range) % 1.0
    fg = np.asarray(colorsys.hsv_to_rgb(h, style.saturation, rng.uniform(0.8, 1.0)))
    img = img * (1 - mask[..., None]) + fg * mask[..., None]
    if style.blur > 0:
        img = gaussian_filter(img, sigma=(style.blur, style.blur, 0))
    img += rng.normal(0, style.noise, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def _render_domain(role, classes, all_classes, style, spec, rng) -> DomainDataset:
    images, labels = [], []
    for k, name in enumerate(classes):
        for _ in range(spec.samples_per_class):
            images.append(render(name, style, spec.image_size, rng))
            labels.append(k)
    ids = [f"{role}-{classes[l]}-{i:05d}" for i, l in enumerate(labels)]
    return DomainDataset(role, np.stack(images), np.asarray(labels), LabelSet(classes), ids)


def synthesize_dataset(spec: SyntheticDomainSpec, require_shared: bool = True):
    """Deterministic (source, target) pair for ``spec``."""
    if spec.samples_per_class < 1:
        raise ValidationError("samples_per_class must be >= 1")
    if require_shared and spec.n_shared < 1:
        raise ValidationError("need at least one shared class")
    counts = (spec.n_shared, spec.n_source_private, spec.n_target_private)
    if sum(counts) > len(SHAPES) or min(counts) < 0:
        raise ValidationError(f"class counts must be >= 0 and total <= {len(SHAPES)}")
    if not spec.source_classes or not spec.target_classes:
        raise ValidationError("both domains need at least one class")
    src_rng, tgt_rng = (np.random.default_rng(s) for s in
                        np.random.SeedSequence(spec.seed).spawn(2))
    names = spec.class_names
    source = _render_domain("real_source", spec.source_classes, names,
                            spec.source_style, spec, src_rng)
    target = _render_domain("target", spec.target_classes, names,
                            spec.target_style, spec, tgt_rng)
    return source, target


def write_folder_dataset(ds: DomainDataset, root) -> None:
    """Write ``ds`` as class-folder PNGs readable by ``ingest_folder_dataset``."""
    from PIL import Image

    root = Path(root)
    for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
        d = root / ds.label_set.names[lab]
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray((img * 255).round().astype(np.uint8)).save(d / f"{i:05d}.png")
