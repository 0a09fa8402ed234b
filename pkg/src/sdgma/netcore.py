"""Learnable components, the frozen style network and gradient reversal."""
from __future__ import annotations

import copy
import hashlib
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def to_tensor(images) -> torch.Tensor:
    """(N, H, W, 3) array in [0, 1] -> (N, 3, H, W) float tensor."""
    if isinstance(images, torch.Tensor):
        return images
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, dtype=np.float32)
                                                 .transpose(0, 3, 1, 2)))


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambd, None


def reverse_gradient(x: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
    """Identity on the forward pass; multiplies the gradient by -lambd."""
    if lambd < 0:
        raise ValueError("lambda must be >= 0")
    return _GradReverse.apply(x, float(lambd))


def grl_lambda(progress: float) -> float:
    """Warm-up 2 / (1 + exp(-10 p)) - 1 for training progress p in [0, 1]."""
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


def annealed_lr(lr0: float, progress: float) -> float:
    return lr0 / (1.0 + 10.0 * progress) ** 0.75


class FeatureExtractor(nn.Module):
    def __init__(self, channels=(32, 64, 128, 128), image_size: int = 32):
        super().__init__()
        layers, c_in = [], 3
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1),
                       nn.BatchNorm2d(c), nn.ReLU(inplace=True)]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.out_dim = c_in
        self.image_size = image_size

    def forward(self, x):
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} input, "
                             f"got {tuple(x.shape[-2:])}")
        return self.body(x).mean(dim=(2, 3))


class Classifier(nn.Module):
    """Single linear layer; ``forward`` returns logits, ``probs`` the simplex."""

    def __init__(self, in_dim: int, n_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, n_classes)
        self.n_classes = n_classes

    def forward(self, f):
        return self.fc(f)

    def probs(self, f):
        return F.softmax(self.fc(f), dim=1)


class DomainDiscriminator(nn.Module):
    """Three linear layers, ReLU between the first two, sigmoid output."""

    def __init__(self, in_dim: int, hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True),
                                 nn.Linear(hidden, hidden), nn.Linear(hidden, 1))

    def logits(self, f):
        return self.net(f).squeeze(1)

    def forward(self, f):
        return torch.sigmoid(self.logits(f))


class Generator(nn.Module):
    """Conditional generator: (one-hot y, noise z) -> image in [0, 1]."""

    def __init__(self, n_classes: int, z_dim: int = 10, image_size: int = 32,
                 base: int = 128, hidden: int = 256):
        super().__init__()
        if image_size % 4 or image_size < 8:
            raise ValueError("image_size must be a multiple of 4 and >= 8")
        self.n_classes, self.z_dim, self.image_size = n_classes, z_dim, image_size
        n_up = int(math.log2(image_size // 4))
        if 4 * 2 ** n_up != image_size:
            raise ValueError("image_size must be 4 * 2**k")
        self.base = base
        self.fc = nn.Sequential(
            nn.Linear(n_classes + z_dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, base * 16), nn.BatchNorm1d(base * 16), nn.ReLU(inplace=True),
        )
        ups, c = [], base
        for i in range(n_up):
            last = i == n_up - 1
            c_out = 3 if last else max(c // 2, 16)
            ups.append(nn.ConvTranspose2d(c, c_out, 4, stride=2, padding=1))
            if not last:
                ups += [nn.BatchNorm2d(c_out), nn.ReLU(inplace=True)]
            c = c_out
        self.up = nn.Sequential(*ups)

    def forward(self, y, z):
        h = self.fc(torch.cat([y, z], dim=1)).view(-1, self.base, 4, 4)
        return torch.sigmoid(self.up(h))


class StyleNetwork(nn.Module):
    """Fixed random conv pyramid with four taps at full, 1/2, 1/4, 1/8 resolution.

    Weights come from a private generator seeded with ``seed`` so building the
    network never touches the global RNG.
    """

    def __init__(self, channels=(16, 32, 64, 64), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages, c_in = [], 3
        for j, c in enumerate(channels):
            conv = nn.Conv2d(c_in, c, 3, stride=1 if j == 0 else 2, padding=1)
            fan_in = c_in * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            stages.append(nn.Sequential(conv, nn.ReLU()))
            c_in = c
        self.stages = nn.ModuleList(stages)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps


class VGGStyleNetwork(nn.Module):
    """VGG-16 taps relu1_2, relu2_2, relu3_3, relu4_3. Needs torchvision and,
    for meaningful statistics, ImageNet weights (``weights="DEFAULT"`` or a
    state-dict path)."""

    TAPS = (3, 8, 15, 22)
    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self, weights=None):
        super().__init__()
        import torchvision

        if weights is None or weights == "DEFAULT":
            vgg = torchvision.models.vgg16(weights=weights)
        else:
            vgg = torchvision.models.vgg16(weights=None)
            vgg.load_state_dict(torch.load(weights, map_location="cpu"))
        self.features = vgg.features[: self.TAPS[-1] + 1]
        self.register_buffer("mean", torch.tensor(self.MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self.STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        x = (x - self.mean) / self.std
        taps = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.TAPS:
                taps.append(x)
        return taps


def style_activations(phi: nn.Module, x: torch.Tensor) -> list[torch.Tensor]:
    return phi(x)


def classify(C: Classifier, F_: FeatureExtractor, x: torch.Tensor) -> torch.Tensor:
    return C.probs(F_(x))


def parameter_checksum(*modules: nn.Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for t in list(m.state_dict().values()):
            h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class PretrainedModel(nn.Module):
    """Frozen feature extractor + classifier trained on the real source."""

    def __init__(self, feature: FeatureExtractor, classifier: Classifier):
        super().__init__()
        self.feature = feature
        self.classifier = classifier
        self.train_accuracy: Optional[float] = None
        self.freeze()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        return self.classifier.probs(self.feature(x))

    def thaw_copy(self) -> tuple[FeatureExtractor, Classifier]:
        """Trainable copies of F and C for adaptation."""
        f, c = copy.deepcopy(self.feature), copy.deepcopy(self.classifier)
        for p in list(f.parameters()) + list(c.parameters()):
            p.requires_grad_(True)
        return f.train(), c.train()


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches, reshuffled each pass."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[i:i + batch_size]


def pretrain_source_model(source, config) -> PretrainedModel:
    """Cross-entropy training of F and C on the labelled real source domain."""
    labels = torch.from_numpy(source.training_labels())
    n_classes = len(source.label_set)
    if n_classes < 2:
        raise ValueError("pretraining needs at least 2 classes")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    x = to_tensor(source.images)
    f = FeatureExtractor(image_size=x.shape[-1])
    c = Classifier(f.out_dim, n_classes)
    opt = torch.optim.SGD(list(f.parameters()) + list(c.parameters()),
                          lr=config.pretrain_lr, momentum=config.momentum)
    stream = batches(len(x), config.batch_size, rng)
    f.train(), c.train()
    for step in range(config.pretrain_steps):
        idx = torch.from_numpy(next(stream))
        loss = F.cross_entropy(c(f(x[idx])), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    model = PretrainedModel(f, c)
    model.train_accuracy = accuracy(model, x, labels)
    logger.info("source model: train accuracy %.4f", model.train_accuracy)
    return model


@torch.no_grad()
def predict_probs(model, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    return torch.cat([model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def accuracy(model, x, labels) -> float:
    probs = predict_probs(model, x)
    return float((probs.argmax(1) == labels).float().mean())


@dataclass
class ModelBundle:
    """Adapted components plus the frozen model and style network."""

    F: FeatureExtractor
    C: Classifier
    D: DomainDiscriminator
    D_prime: DomainDiscriminator
    M: PretrainedModel
    phi: nn.Module
    G: Optional[Generator] = None
    labels: Optional[object] = None  # source LabelSet

    def eval(self):
        for m in (self.F, self.C, self.D, self.D_prime):
            m.eval()
        if self.G is not None:
            self.G.eval()
        return self

    def components(self) -> dict[str, nn.Module]:
        out = {"F": self.F, "C": self.C, "D": self.D, "D_prime": self.D_prime}
        if self.G is not None:
            out["G"] = self.G
        return out


def save_checkpoint(path, module: nn.Module, config=None, **meta) -> None:
    payload = {"state_dict": module.state_dict(), "meta": meta}
    if config is not None:
        payload["config"] = config.to_dict()
        payload["seed"] = config.seed
    torch.save(payload, path)


def load_checkpoint(path, module: nn.Module) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    module.load_state_dict(payload["state_dict"])
    return payload
