"""Experiment harness: synthetic tasks, staged runs, CLI and figures."""
from .experiment import Run, RunManifest, run_experiment

__all__ = ["Run", "RunManifest", "run_experiment"]
