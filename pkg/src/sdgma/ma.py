"""Model adaptation with transferable weights and threshold-based unknown rejection."""
from __future__ import annotations

import copy
import csv
import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import DomainDataset, ValidationError
from .netcore import (
    Classifier, DomainDiscriminator, FeatureExtractor, Generator, ModelBundle,
    PretrainedModel, annealed_lr, batches, grl_lambda, reverse_gradient, to_tensor,
)
from .sdg import EPS, sample_latent

logger = logging.getLogger(__name__)

UNKNOWN = -1


class DivergenceError(RuntimeError):
    pass


class DivergenceGuard:
    """Trips once the loss stays above ``factor`` x its first value (floored at
    0.1) for ``patience`` consecutive updates. NaN counts as above."""

    def __init__(self, factor: float = 10.0, patience: int = 200):
        self.factor, self.patience = factor, patience
        self.ref: Optional[float] = None
        self.bad = 0

    def update(self, value: float) -> bool:
        if self.ref is None:
            self.ref = max(value, 0.1)
        self.bad = self.bad + 1 if not value <= self.factor * self.ref else 0
        return self.bad >= self.patience


# --- transferable weights -------------------------------------------------

def _check_unit(name, x):
    x = torch.as_tensor(x, dtype=torch.float32)
    if torch.any(x < 0) or torch.any(x > 1):
        raise ValidationError(f"{name} must lie in [0, 1]")
    return x


def transferable_weight_target(d, conf, disable_domain_similarity=False,
                               disable_confidence=False) -> torch.Tensor:
    """w_t = d + max-probability; larger means more likely a shared class."""
    d, conf = _check_unit("d", d), _check_unit("conf", conf)
    w = torch.zeros_like(d)
    if not disable_domain_similarity:
        w = w + d
    if not disable_confidence:
        w = w + conf
    return w


def transferable_weight_source(d, conf, disable_domain_similarity=False,
                               disable_confidence=False) -> torch.Tensor:
    """w_f = -d - max-probability."""
    return -transferable_weight_target(d, conf, disable_domain_similarity,
                                       disable_confidence)


def normalize_weights(raw) -> torch.Tensor:
    """Min-max rescale a batch into [0, 1]; a constant batch maps to 0.5."""
    raw = torch.as_tensor(raw, dtype=torch.float32)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        return torch.full_like(raw, 0.5)
    return (raw - lo) / (hi - lo)


@dataclass
class TransferableWeights:
    d: torch.Tensor
    conf: torch.Tensor
    raw: torch.Tensor
    norm_w: torch.Tensor
    domain: str  # "source" or "target"

    @classmethod
    def compute(cls, d, conf, domain: str, config=None) -> "TransferableWeights":
        flags = _flags(config)
        fn = transferable_weight_source if domain == "source" else transferable_weight_target
        raw = fn(d, conf, **flags)
        return cls(d, conf, raw, normalize_weights(raw), domain)


def _flags(config) -> dict:
    if config is None:
        return {}
    return {"disable_domain_similarity": config.disable_domain_similarity,
            "disable_confidence": config.disable_confidence}


# --- losses ---------------------------------------------------------------

def _log(x):
    return torch.log(x.clamp_min(EPS))


def weighted_adversarial_loss(p_source, p_target, w_f, w_t) -> torch.Tensor:
    """-E[w_f log D(f_s)] - E[w_t log(1 - D(f_t))] from discriminator outputs."""
    return -(w_f * _log(p_source)).mean() - (w_t * _log(1 - p_target)).mean()


def adversarial_loss(D, F_, x_f, x_t, w_f, w_t, lambd: float = 1.0) -> torch.Tensor:
    """Weighted domain-adversarial loss with D behind gradient reversal.

    Minimising it trains D to separate the domains while the reversed
    gradient pushes F to confuse D. Weights are used as constants.
    """
    f = F_(torch.cat([x_f, x_t]))
    p = D(reverse_gradient(f, lambd))
    n = len(x_f)
    return weighted_adversarial_loss(p[:n], p[n:], w_f.detach(), w_t.detach())


def source_ce_loss(C, F_, x_f, y_f) -> torch.Tensor:
    y_f = torch.as_tensor(y_f)
    if y_f.min() < 0 or y_f.max() >= C.n_classes:
        raise ValidationError("source label out of range")
    return F.cross_entropy(C(F_(x_f)), y_f)


def similarity_loss_from_outputs(d_source, d_target) -> torch.Tensor:
    return -_log(d_source).mean() - _log(1 - d_target).mean()


def similarity_loss(D_prime, F_, x_f, x_t) -> torch.Tensor:
    """BCE for D' with source labelled 1 and target 0, on detached features."""
    f = F_(torch.cat([x_f, x_t])).detach()
    d = D_prime(f)
    n = len(x_f)
    return similarity_loss_from_outputs(d[:n], d[n:])


@torch.no_grad()
def domain_similarity(D_prime, F_, x, batch_size: int = 256) -> torch.Tensor:
    D_prime.eval(), F_.eval()
    return torch.cat([D_prime(F_(x[i:i + batch_size])) for i in range(0, len(x), batch_size)])


# --- training -------------------------------------------------------------

@dataclass
class MaLog:
    rows: list[tuple] = field(default_factory=list)

    COLUMNS = ("step", "adv_loss", "ce_loss", "simi_loss", "mean_w_source", "mean_w_target",
               "lambda", "lr")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r[0]] + [f"{v:.8g}" for v in r[1:]])

    def column(self, name) -> np.ndarray:
        i = self.COLUMNS.index(name)
        return np.array([r[i] for r in self.rows])


class _SourceStream:
    """Labelled source batches from a real dataset or a frozen generator."""

    def __init__(self, source, batch_size, seed):
        self.batch_size = batch_size
        if isinstance(source, Generator):
            self.G = source.eval()
            self.rng = torch.Generator().manual_seed(seed)
        else:
            self.G = None
            self.x = to_tensor(source.images)
            self.y = torch.from_numpy(source.training_labels())
            self.idx = batches(len(self.x), batch_size, np.random.default_rng(seed))

    @torch.no_grad()
    def next(self):
        if self.G is not None:
            lat = sample_latent(self.batch_size, self.G.n_classes, self.G.z_dim, self.rng)
            return self.G(lat.y, lat.z), lat.labels
        i = torch.from_numpy(next(self.idx))
        return self.x[i], self.y[i]


def init_bundle(M: PretrainedModel, phi, G: Optional[Generator] = None, seed: int = 0,
                labels=None) -> ModelBundle:
    F_, C = M.thaw_copy()
    gen = torch.random.fork_rng()
    with gen:
        torch.manual_seed(seed)
        D = DomainDiscriminator(F_.out_dim)
        D_prime = DomainDiscriminator(F_.out_dim)
    return ModelBundle(F_, C, D, D_prime, M, phi, G, labels)


def train_ma(source, target: DomainDataset, M: PretrainedModel, phi, config,
             G: Optional[Generator] = None):
    """Weighted adversarial adaptation of a copy of M; returns (bundle, log).

    ``source`` is a labelled real-source dataset, or a generator whose samples
    stand in for it. With ``config.source_only`` F and C stay frozen and only
    D' is fitted, which yields the unadapted baseline.
    """
    if G is None and isinstance(source, Generator):
        G = source
    bundle = init_bundle(M, phi, G, seed=config.seed + 11)
    log = MaLog()
    if config.ma_steps == 0:
        return bundle, log
    F_, C, D, Dp = bundle.F, bundle.C, bundle.D, bundle.D_prime
    adapt = not config.source_only
    torch.manual_seed(config.seed + 12)
    src = _SourceStream(source, config.batch_size, config.seed + 13)
    x_t_all = to_tensor(target.images)
    tgt_idx = batches(len(x_t_all), config.batch_size, np.random.default_rng(config.seed + 14))
    groups = [{"params": Dp.parameters(), "scale": config.dprime_lr_scale}]
    if adapt:
        groups += [{"params": list(F_.parameters()) + list(C.parameters()), "scale": 1.0},
                   {"params": D.parameters(), "scale": 1.0}]
    else:
        F_.eval()
        for p in list(F_.parameters()) + list(C.parameters()):
            p.requires_grad_(False)
    opt = torch.optim.SGD(groups, lr=config.ma_lr, momentum=config.momentum, nesterov=True,
                          weight_decay=config.weight_decay)
    flags = _flags(config)
    guard = DivergenceGuard()
    for step in range(config.ma_steps):
        progress = step / config.ma_steps
        lr = annealed_lr(config.ma_lr, progress)
        for g in opt.param_groups:
            g["lr"] = lr * g["scale"]
        lambd = grl_lambda(progress)
        x_f, y_f = src.next()
        x_t = x_t_all[torch.from_numpy(next(tgt_idx))]
        n = len(x_f)
        if adapt:
            F_.train(), C.train()
        f = F_(torch.cat([x_f, x_t]))
        logits = C(f)
        d_out = Dp(f.detach())
        with torch.no_grad():
            conf = F.softmax(logits, 1).max(1).values
            d = d_out.detach()
            w_f = normalize_weights(transferable_weight_source(d[:n], conf[:n], **flags))
            w_t = normalize_weights(transferable_weight_target(d[n:], conf[n:], **flags))
        l_simi = similarity_loss_from_outputs(d_out[:n], d_out[n:])
        l_ce = F.cross_entropy(logits[:n], y_f)
        if adapt:
            p = D(reverse_gradient(f, lambd))
            l_adv = weighted_adversarial_loss(p[:n], p[n:], w_f, w_t)
            loss = l_ce + l_adv + l_simi
        else:
            l_adv = torch.zeros(())
            loss = l_simi
        opt.zero_grad()
        loss.backward()
        opt.step()

        ce = l_ce.item()
        if guard.update(ce):
            raise DivergenceError(
                f"source CE {ce:.4f} above {guard.factor:g}x reference {guard.ref:.4f} for "
                f"{guard.patience} steps (step {step}, adv {l_adv.item():.4f}, "
                f"simi {l_simi.item():.4f})")
        log.rows.append((step, l_adv.item(), ce, l_simi.item(), float(w_f.mean()),
                         float(w_t.mean()), lambd, lr))
    bundle.eval()
    return bundle, log


# --- inference ------------------------------------------------------------

@dataclass
class Prediction:
    class_index: Optional[int]
    w_t: float
    w0: float

    @property
    def is_unknown(self) -> bool:
        return self.class_index is None


@dataclass
class TargetScores:
    """Per-sample quantities cached from one forward pass over the target."""

    ids: list[str]
    d: np.ndarray
    conf: np.ndarray
    argmax: np.ndarray
    w_t: np.ndarray

    def decide(self, w0: float) -> np.ndarray:
        return np.where(self.w_t > w0, self.argmax, UNKNOWN)

    def predictions(self, w0: float) -> list[Prediction]:
        return [Prediction(int(c) if c != UNKNOWN else None, float(w), w0)
                for c, w in zip(self.decide(w0), self.w_t)]

    def to_csv(self, path, w0: float, label_names=None) -> None:
        dec = self.decide(w0)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "w_t", "d", "conf", "decision"])
            for i, sid in enumerate(self.ids):
                c = int(dec[i])
                name = "unknown" if c == UNKNOWN else (label_names[c] if label_names else c)
                w.writerow([sid, f"{self.w_t[i]:.8f}", f"{self.d[i]:.8f}",
                            f"{self.conf[i]:.8f}", name])


@torch.no_grad()
def score_target(bundle: ModelBundle, target: DomainDataset, config=None,
                 batch_size: int = 256) -> TargetScores:
    bundle.eval()
    x = to_tensor(target.images)
    f = torch.cat([bundle.F(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    probs = bundle.C.probs(f)
    d = bundle.D_prime(f)
    conf, arg = probs.max(1)
    w_t = transferable_weight_target(d, conf, **_flags(config))
    return TargetScores(list(target.ids), d.numpy(), conf.numpy(), arg.numpy(), w_t.numpy())


def predict(bundle: ModelBundle, x_t, w0: float, config=None) -> list[Prediction]:
    """Class if w_t > w0 (strict), otherwise unknown."""
    if w0 < 0:
        raise ValidationError("w0 must be >= 0")
    if isinstance(x_t, DomainDataset):
        target = x_t
    else:
        x = np.asarray(x_t)
        target = DomainDataset("target", x, -np.ones(len(x)), bundle.labels or _dummy(bundle))
    return score_target(bundle, target, config).predictions(w0)


def _dummy(bundle):
    from .datamodel import LabelSet
    return LabelSet(str(i) for i in range(bundle.C.n_classes))


# --- expectation-ordering diagnostic --------------------------------------

ORDER = ("source_private", "source_shared", "target_shared", "target_private")


@dataclass
class OrderingReport:
    mean_d: dict
    mean_conf: dict
    d_checks: dict  # (group_a, group_b) -> True / False / None (not applicable)
    conf_checks: dict

    def holds(self, quantity: str = "d") -> int:
        checks = self.d_checks if quantity == "d" else self.conf_checks
        return sum(1 for v in checks.values() if v)

    def as_dict(self) -> dict:
        fmt = lambda c: {f"{a}>{b}": v for (a, b), v in c.items()}
        return {"mean_d": self.mean_d, "mean_conf": self.mean_conf,
                "d_checks": fmt(self.d_checks), "conf_checks": fmt(self.conf_checks)}


@torch.no_grad()
def ordering_diagnostic(bundle: ModelBundle, probes: dict) -> OrderingReport:
    """Group means of d and max-probability and the pairwise chain comparisons.

    ``probes`` maps group names from ``ORDER`` to image arrays or tensors;
    missing or empty groups make their comparisons not applicable.
    """
    bundle.eval()
    mean_d, mean_c = {}, {}
    for g in ORDER:
        x = probes.get(g)
        if x is None or len(x) == 0:
            mean_d[g] = mean_c[g] = None
            continue
        x = to_tensor(x)
        f = bundle.F(x)
        mean_d[g] = float(bundle.D_prime(f).mean())
        mean_c[g] = float(bundle.C.probs(f).max(1).values.mean())

    def chain(means):
        out = {}
        for a, b in itertools.combinations(ORDER, 2):
            out[(a, b)] = None if means[a] is None or means[b] is None else means[a] > means[b]
        return out

    return OrderingReport(mean_d, mean_c, chain(mean_d), chain(mean_c))
