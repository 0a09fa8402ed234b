"""Stage-by-stage experiment runner with a run directory and manifest."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .. import evaluation as ev
from ..datamodel import (
    DomainDataset, ExperimentConfig, build_unida_task, default_threshold,
    ingest_folder_dataset,
)
from ..ma import ordering_diagnostic, score_target, train_ma
from ..netcore import (
    Classifier, DomainDiscriminator, FeatureExtractor, Generator, ModelBundle,
    PretrainedModel, StyleNetwork, load_checkpoint, pretrain_source_model,
    save_checkpoint, seed_everything,
)
from ..sdg import generate_dataset, save_contact_sheet, train_sdg
from .synthetic import SyntheticDomainSpec, synthesize_dataset

logger = logging.getLogger(__name__)

STYLE_SEED = 1234
SWEEP_GRID = tuple(np.round(np.linspace(0.0, 2.0, 51), 4))
PROBE_SAMPLES = 600


class StageError(RuntimeError):
    pass


@dataclass
class RunManifest:
    run_dir: str
    config: dict
    seed: int
    input_hashes: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    stage_seconds: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    status: str = "running"
    error: Optional[str] = None
    metrics: Optional[dict] = None

    FILENAME = "manifest.json"

    @property
    def path(self) -> Path:
        return Path(self.run_dir) / self.FILENAME

    def artifact(self, name: str) -> Path:
        if name not in self.artifacts:
            raise StageError(f"artifact {name!r} missing from run {self.run_dir}")
        return Path(self.run_dir) / self.artifacts[name]

    def add(self, name: str, relpath: str) -> Path:
        self.artifacts[name] = relpath
        return Path(self.run_dir) / relpath

    def save(self) -> None:
        self.path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        data = json.loads((Path(run_dir) / cls.FILENAME).read_text())
        data["run_dir"] = str(run_dir)
        return cls(**data)


def _hash_arrays(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def load_data(config: ExperimentConfig) -> tuple[DomainDataset, DomainDataset]:
    if config.source_dir and config.target_dir:
        src = ingest_folder_dataset(config.source_dir, "real_source", config.image_size)
        tgt = ingest_folder_dataset(config.target_dir, "target", config.image_size)
        return src, tgt
    return synthesize_dataset(SyntheticDomainSpec.from_config(config),
                              require_shared=False)


@contextmanager
def _stage(manifest: RunManifest, name: str):
    t0 = time.perf_counter()
    try:
        yield
    except Exception as exc:
        manifest.status = "failed"
        manifest.error = f"{name}: {type(exc).__name__}: {exc}"
        manifest.save()
        raise
    finally:
        manifest.stage_seconds[name] = round(time.perf_counter() - t0, 3)


class Run:
    """A run directory plus the in-memory state stages share."""

    def __init__(self, config: ExperimentConfig, run_dir, resume: bool = False):
        self.config = config
        self.dir = Path(run_dir)
        (self.dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        if resume and (self.dir / RunManifest.FILENAME).exists():
            self.manifest = RunManifest.load(self.dir)
        else:
            self.manifest = RunManifest(str(self.dir), config.to_dict(), config.seed)
        self.source, self.target = load_data(config)
        self.task = build_unida_task(self.source.label_set, self.target.label_set)
        self.manifest.input_hashes = {
            "source": _hash_arrays(self.source.images, self.source.labels),
            "target": _hash_arrays(self.target.images),
            "config": hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True)
                                     .encode()).hexdigest()[:16],
        }
        self.phi = StyleNetwork(seed=STYLE_SEED)
        config.save(self.manifest.add("config", "config.yaml"))
        self.M: Optional[PretrainedModel] = None
        self.G: Optional[Generator] = None
        self.bundle: Optional[ModelBundle] = None

    @property
    def n_classes(self) -> int:
        return len(self.source.label_set)

    @property
    def w0(self) -> float:
        return self.config.w0 if self.config.w0 is not None else default_threshold(self.task)

    def _ckpt(self, key: str, module, **meta) -> None:
        rel = f"checkpoints/{key}.pt"
        save_checkpoint(self.dir / rel, module, self.config, **meta)
        self.manifest.add(f"ckpt_{key}", rel)
        self.manifest.checkpoints[key] = rel

    def _load(self, key: str, module):
        rel = self.manifest.checkpoints.get(key)
        if rel is None:
            raise StageError(f"checkpoint {key!r} not found; run the producing stage first")
        load_checkpoint(self.dir / rel, module)
        return module

    # --- stages -----------------------------------------------------------

    def pretrain(self) -> PretrainedModel:
        with _stage(self.manifest, "pretrain"):
            seed_everything(self.config.seed)
            self.M = pretrain_source_model(self.source, self.config)
            self._ckpt("pretrained_F", self.M.feature, role="M")
            self._ckpt("pretrained_C", self.M.classifier, role="M",
                       train_accuracy=self.M.train_accuracy)
            self.manifest.checkpoints["M"] = ["pretrained_F", "pretrained_C"]
            self._write_json("pretrain", "pretrain.json",
                             {"train_accuracy": self.M.train_accuracy})
        self.manifest.save()
        return self.M

    def load_M(self) -> PretrainedModel:
        if self.M is None:
            f = FeatureExtractor(image_size=self.config.image_size)
            c = Classifier(f.out_dim, self.n_classes)
            self._load("pretrained_F", f)
            self._load("pretrained_C", c)
            self.M = PretrainedModel(f, c)
        return self.M

    def new_generator(self) -> Generator:
        with torch.random.fork_rng():
            torch.manual_seed(self.config.seed + 7)
            return Generator(self.n_classes, self.config.z_dim, self.config.image_size)

    def sdg(self) -> Generator:
        M = self.load_M()
        with _stage(self.manifest, "sdg"):
            seed_everything(self.config.seed)
            G, report = train_sdg(M, self.phi, self.new_generator(), self.target, self.config)
            self.G = G
            report.to_csv(self.manifest.add("sdg_report", "sdg_report.csv"))
            self._ckpt("G", G, best_step=report.best_step, recovery=report.best_recovery)
            save_contact_sheet(G, self.manifest.add("contact_sheet", "generated.png"),
                               seed=self.config.seed)
            self._write_json("sdg_summary", "sdg_summary.json",
                             {"best_recovery": report.best_recovery,
                              "best_step": report.best_step})
        self.manifest.save()
        return G

    def load_G(self) -> Optional[Generator]:
        if self.G is None and "G" in self.manifest.checkpoints:
            self.G = self._load("G", self.new_generator()).eval()
        return self.G

    def ma(self) -> ModelBundle:
        M, cfg = self.load_M(), self.config
        with _stage(self.manifest, "ma"):
            seed_everything(cfg.seed)
            if cfg.method in ("source_only", "ma"):
                source = self.source
                G = None
            elif cfg.method == "ma_only":
                source = G = self.new_generator().eval()
            else:
                source = G = self.load_G()
                if G is None:
                    raise StageError("SDG-MA needs a trained generator; run the sdg stage")
            bundle, log = train_ma(source, self.target, M, self.phi, cfg, G=G)
            bundle.labels = self.source.label_set
            self.bundle = bundle
            log.to_csv(self.manifest.add("ma_log", "ma_log.csv"))
            for key, module in (("F", bundle.F), ("C", bundle.C), ("D", bundle.D),
                                ("D_prime", bundle.D_prime)):
                self._ckpt(key, module)
        self.manifest.save()
        return bundle

    def load_bundle(self) -> ModelBundle:
        if self.bundle is None:
            M = self.load_M()
            F_, C = M.thaw_copy()
            D, Dp = DomainDiscriminator(F_.out_dim), DomainDiscriminator(F_.out_dim)
            for key, module in (("F", F_), ("C", C), ("D", D), ("D_prime", Dp)):
                self._load(key, module)
            self.bundle = ModelBundle(F_, C, D, Dp, M, self.phi, self.load_G(),
                                      self.source.label_set).eval()
        return self.bundle

    def evaluate(self) -> ev.MetricsReport:
        bundle, cfg = self.load_bundle(), self.config
        with _stage(self.manifest, "eval"):
            scores = score_target(bundle, self.target, cfg)
            w0 = self.w0
            scores.to_csv(self.manifest.add("predictions", "predictions.csv"), w0,
                          list(self.source.label_set.names))
            report = ev.score_cached(scores, self.target, self.task, w0)
            report.threshold_curve = ev.threshold_sweep(bundle, self.target, self.task,
                                                        SWEEP_GRID, cfg, scores=scores)
            report.to_json(self.manifest.add("metrics", "metrics.json"))
            report.to_csv(self.manifest.add("metrics_csv", "metrics.csv"))
            self.manifest.add("metrics_table", "metrics.txt")
            (self.dir / "metrics.txt").write_text(report.table() + "\n")
            self._write_sweep(report.threshold_curve)
            diag = ordering_diagnostic(bundle, self.probe_sets())
            self._write_json("ordering", "ordering.json", diag.as_dict())
            ev.export_embeddings(bundle, self.embedding_sets(),
                                 self.manifest.add("embeddings", "embeddings.csv"))
            self.manifest.metrics = {
                "avg_all": report.avg_all, "avg_shared": report.avg_shared,
                "per_class": report.per_class, "w0": w0, "jaccard": report.jaccard,
                "jaccard_reported": report.jaccard_reported,
            }
        self.manifest.save()
        return report

    def sweep(self, grid=SWEEP_GRID) -> list:
        bundle = self.load_bundle()
        with _stage(self.manifest, "sweep"):
            curve = ev.threshold_sweep(bundle, self.target, self.task, grid, self.config)
            self._write_sweep(curve)
        self.manifest.save()
        return curve

    # --- helpers ----------------------------------------------------------

    def _write_json(self, name, rel, data) -> None:
        path = self.manifest.add(name, rel)
        path.write_text(json.dumps(data, indent=2, sort_keys=True))

    def _write_sweep(self, curve) -> None:
        path = self.manifest.add("threshold_sweep", "threshold_sweep.csv")
        with open(path, "w") as fh:
            fh.write("w0,avg_all,unknown_accuracy\n")
            for w0, avg, unk in curve:
                fh.write(f"{w0:.4f},{avg:.6f},{unk:.6f}\n")

    def synthetic_source(self) -> Optional[DomainDataset]:
        G = self.load_G() if self.config.method == "sdg_ma" else None
        if G is None and self.config.method == "ma_only":
            G = self.new_generator().eval()
        if G is None:
            return None
        return generate_dataset(G, PROBE_SAMPLES, self.config.seed + 5,
                                self.source.label_set)

    def probe_sets(self) -> dict:
        """Grouped images for the expectation-ordering diagnostic."""
        src = self.synthetic_source() or self.source
        src_names = src.label_names()
        tgt_names = self.target.label_names()
        shared = self.task.shared
        pick = lambda ds, names, keep: ds.images[[keep(n) for n in names]]
        return {
            "source_private": pick(src, src_names, lambda n: n not in shared),
            "source_shared": pick(src, src_names, lambda n: n in shared),
            "target_shared": pick(self.target, tgt_names, lambda n: n in shared),
            "target_private": pick(self.target, tgt_names, lambda n: n not in shared),
        }

    def embedding_sets(self) -> dict:
        sets = {"real_source": self.source, "target": self.target}
        syn = self.synthetic_source()
        if syn is not None:
            sets["synthetic_source"] = syn
        return sets


def run_experiment(config: ExperimentConfig, run_dir) -> RunManifest:
    """pretrain -> (sdg) -> ma -> eval, persisting everything under ``run_dir``.

    With ``config.runs > 1`` each repetition uses seed + i in its own
    subdirectory and the returned manifest carries the mean metrics.
    """
    run_dir = Path(run_dir)
    if config.runs > 1:
        return _run_repeated(config, run_dir)
    run = Run(config, run_dir)
    run.pretrain()
    if config.method == "sdg_ma":
        run.sdg()
    run.ma()
    run.evaluate()
    run.manifest.status = "complete"
    run.manifest.save()
    return run.manifest


def _run_repeated(config, run_dir) -> RunManifest:
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(str(run_dir), config.to_dict(), config.seed)
    subs = []
    for i in range(config.runs):
        sub = run_experiment(config.replace(seed=config.seed + i, runs=1),
                             run_dir / f"run_{i}")
        subs.append(sub)
        manifest.artifacts[f"run_{i}"] = f"run_{i}/{RunManifest.FILENAME}"
        manifest.stage_seconds[f"run_{i}"] = round(sum(sub.stage_seconds.values()), 3)
    keys = subs[0].metrics["per_class"].keys()
    manifest.metrics = {
        "avg_all": float(np.mean([s.metrics["avg_all"] for s in subs])),
        "avg_shared": float(np.mean([s.metrics["avg_shared"] for s in subs])),
        "per_class": {k: float(np.mean([s.metrics["per_class"][k] for s in subs]))
                      for k in keys},
        "runs": [s.metrics["avg_all"] for s in subs],
    }
    manifest.status = "complete"
    manifest.save()
    return manifest
