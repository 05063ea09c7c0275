"""Helpers shared by the experiment scripts."""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from dsbridge.engine import SourceConfig, clean_accuracy, train_source
from dsbridge.knowledge import build_procedural
from dsbridge.model import ModelParams, load_checkpoint, save_checkpoint
from dsbridge.stream import default_domains, make_stream


def base_parser(doc: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=doc)
    ap.add_argument("--seeds", default="0,1,2", help="comma list of run seeds")
    ap.add_argument("--sources", default="runs/sources", help="checkpoint cache directory")
    ap.add_argument("--severity", type=int, default=5)
    ap.add_argument("--batches-per-domain", type=int, default=20)
    return ap


def seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def source(root: str | Path, seed: int) -> ModelParams:
    """Load the source model for ``seed``, training it on first use."""
    path = Path(root) / f"seed{seed}"
    if (path / "manifest.json").is_file():
        return load_checkpoint(path)
    params = train_source(SourceConfig(seed=seed))
    save_checkpoint(params, path)
    print(f"trained source seed {seed}: clean accuracy {clean_accuracy(params):.4f}", flush=True)
    return params


def setup(args, seed: int, per_class: int = 2):
    stream = make_stream(default_domains(args.severity), args.batches_per_domain, 50, seed=100 + seed)
    return source(args.sources, seed), stream, build_procedural(10, per_class, seed=seed)


def fmt_row(label: str, values, width: int = 8) -> str:
    return f"{label:<14}" + "".join(f"{100 * v:{width}.2f}" for v in values)


def mean_std(values) -> str:
    v = np.asarray(values)
    return f"{100 * v.mean():6.2f} +- {100 * v.std():4.2f}"
