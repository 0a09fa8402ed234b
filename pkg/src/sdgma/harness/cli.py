"""Command-line entry point: ``sdgma <stage> --config cfg.yaml --run-dir runs/x``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from ..datamodel import ExperimentConfig, ValidationError

log = logging.getLogger("sdgma")


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = _parse_set(args.set)
    for key in ("seed", "source_dir", "target_dir", "w0"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    return cfg.replace(**over) if over else cfg


def _run(args, resume=True):
    from .experiment import Run
    cfg = build_config(args)
    run_dir = Path(args.run_dir)
    # later stages reuse the run directory's saved config unless overridden
    if resume and args.config is None and (run_dir / "config.yaml").exists():
        cfg = ExperimentConfig.load(run_dir / "config.yaml").replace(**_parse_set(args.set))
    return Run(cfg, run_dir, resume=resume)


def cmd_pretrain(args):
    run = _run(args, resume=False)
    M = run.pretrain()
    print(f"source accuracy {M.train_accuracy:.4f}")


def cmd_sdg(args):
    run = _run(args)
    run.sdg()
    print((run.dir / "sdg_summary.json").read_text())


def cmd_ma(args):
    run = _run(args)
    run.ma()
    print(f"adapted ({run.config.method}); log at {run.manifest.artifact('ma_log')}")


def cmd_eval(args):
    run = _run(args)
    report = run.evaluate()
    run.manifest.status = "complete"
    run.manifest.save()
    print(report.table())


def cmd_sweep(args):
    run = _run(args)
    for w0, avg, unk in run.sweep():
        print(f"{w0:.2f}  {100 * avg:6.2f}  {100 * unk:6.2f}")


def cmd_run_all(args):
    from .experiment import run_experiment
    manifest = run_experiment(build_config(args), args.run_dir)
    m = manifest.metrics
    print(f"avg_all {100 * m['avg_all']:.2f}  avg_shared {100 * m['avg_shared']:.2f}")
    for name, acc in m["per_class"].items():
        print(f"  {name:<16} {100 * acc:6.2f}")


def cmd_synth_data(args):
    from .synthetic import SyntheticDomainSpec, synthesize_dataset, write_folder_dataset
    cfg = build_config(args)
    src, tgt = synthesize_dataset(SyntheticDomainSpec.from_config(cfg))
    out = Path(args.out)
    write_folder_dataset(src, out / "source")
    write_folder_dataset(tgt, out / "target")
    print(f"wrote {len(src)} source and {len(tgt)} target images under {out}")


def cmd_plots(args):
    from .experiment import RunManifest
    from .plots import emit_plots
    for p in emit_plots(RunManifest.load(args.run_dir), reducer=args.reducer):
        print(p)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdgma", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, run_dir=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML or JSON experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--source-dir", dest="source_dir")
        p.add_argument("--target-dir", dest="target_dir")
        p.add_argument("--w0", type=float, help="rejection threshold override")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config field (repeatable)")
        if run_dir:
            p.add_argument("--run-dir", required=True)
        p.set_defaults(func=fn)
        return p

    add("pretrain", cmd_pretrain, "train the source model M")
    add("sdg", cmd_sdg, "train the generator against frozen M")
    add("ma", cmd_ma, "adapt F and C to the target")
    add("eval", cmd_eval, "score the adapted model on the target")
    add("sweep", cmd_sweep, "accuracy against the rejection threshold")
    add("run-all", cmd_run_all, "every stage end to end")
    p = add("synth-data", cmd_synth_data, "write the synthetic task as image folders",
            run_dir=False)
    p.add_argument("--out", required=True)
    p = sub.add_parser("plots", help="figures for a finished run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--reducer", choices=("tsne", "pca"), default="tsne")
    p.set_defaults(func=cmd_plots)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # report, don't traceback, for expected failures
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
