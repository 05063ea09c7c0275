"""Command-line entry point: ``dsbridge <command> [options]``.

Commands: gen-kb, gen-data, train-source, adapt, ablate, report.

Run settings come from an optional JSON file (``--config``) and from flags;
a flag always beats the file, and the file beats built-in defaults. Relative
output paths are placed under ``$DSB_OUT_ROOT`` when that variable is set.

Exit codes: 0 success, 2 usage or config error, 3 adaptation aborted on a
non-finite loss, 4 file-system error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import knowledge
from .engine import (ABLATION_GRID, PARTS, SCOPES, ST_VARIANTS, AdaptConfig, AdaptationAborted,
                     SourceConfig, clean_accuracy, evaluate_frozen, run_episode, train_source)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .stream import (KINDS, DomainSpec, load_stream, make_stream, save_stream,
                     shuffle_mixed, stream_hash)

log = logging.getLogger("dsbridge")

EXIT_OK, EXIT_USAGE, EXIT_ABORT, EXIT_IO = 0, 2, 3, 4
OUT_ROOT_ENV = "DSB_OUT_ROOT"


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class StreamSpec:
    kinds: list[str] = field(default_factory=lambda: list(KINDS))
    severity: int = 5
    batches_per_domain: int = 20
    batch_size: int = 50
    seed: int = 100
    mixed: bool = False
    mix_seed: int = 200
    data_dir: str | None = None

    def build(self):
        if self.data_dir:
            stream = load_stream(self.data_dir)
        else:
            domains = [DomainSpec(k, self.severity) for k in self.kinds]
            stream = make_stream(domains, self.batches_per_domain, self.batch_size, self.seed)
        return shuffle_mixed(stream, self.mix_seed) if self.mixed else stream


@dataclass
class KBSpec:
    classes: int = 10
    per_class: int = 2
    seed: int = 0
    directory: str | None = None

    def build(self) -> knowledge.KnowledgeBase:
        if self.directory:
            return knowledge.load(self.directory)
        return knowledge.build_procedural(self.classes, self.per_class, self.seed)


@dataclass
class RunConfig:
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    stream: StreamSpec = field(default_factory=StreamSpec)
    kb: KBSpec = field(default_factory=KBSpec)
    source: str | None = None
    out: str | None = None

    def to_dict(self) -> dict:
        return {
            "adapt": self.adapt.to_dict(),
            "stream": {f.name: getattr(self.stream, f.name) for f in fields(self.stream)},
            "kb": {f.name: getattr(self.kb, f.name) for f in fields(self.kb)},
            "source": self.source,
            "out": self.out,
        }


def _merge_section(cls, values: dict, section: str):
    extra = set(values) - {f.name for f in fields(cls)}
    if extra:
        raise UsageError(f"unknown {section} keys in config: {sorted(extra)}")
    return cls(**values)


def resolve_config(file_cfg: dict, overrides: dict) -> RunConfig:
    """Combine file values and flag overrides (flags win) into a RunConfig.

    ``overrides`` is sectioned like the file: ``{"adapt": {...}, "stream":
    {...}, "kb": {...}, "source": ..., "out": ...}``; ``None`` values are
    treated as unset.
    """
    allowed = {"adapt", "stream", "kb", "source", "out"}
    extra = set(file_cfg) - allowed
    if extra:
        raise UsageError(f"unknown top-level config keys: {sorted(extra)}")
    merged = {}
    for sec in ("adapt", "stream", "kb"):
        vals = dict(file_cfg.get(sec) or {})
        vals.update({k: v for k, v in (overrides.get(sec) or {}).items() if v is not None})
        merged[sec] = vals
    try:
        adapt = AdaptConfig.from_dict(merged["adapt"])
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    stream = _merge_section(StreamSpec, merged["stream"], "stream")
    kb = _merge_section(KBSpec, merged["kb"], "kb")
    for k in stream.kinds:
        if k not in KINDS:
            raise UsageError(f"unknown corruption kind {k!r}")
    pick = lambda key: overrides.get(key) if overrides.get(key) is not None else file_cfg.get(key)  # noqa: E731
    return RunConfig(adapt, stream, kb, pick("source"), pick("out"))


def read_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def out_path(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _prepare_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise FileExistsError(f"{path} exists and is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _csv_list(text: str | None, cast=str):
    if text is None:
        return None
    return [cast(t.strip()) for t in text.split(",") if t.strip()]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_kb(args) -> int:
    if args.classes < 1 or args.per_class < 1:
        raise UsageError("--classes and --per-class must be >= 1")
    out = _prepare_dir(out_path(args.out), args.force)
    kb = knowledge.build_procedural(args.classes, args.per_class, args.seed)
    knowledge.save(kb, out)
    print(f"wrote {len(kb)} exemplars to {out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    spec = StreamSpec(
        kinds=_csv_list(args.kinds) or list(KINDS), severity=args.severity,
        batches_per_domain=args.batches_per_domain, batch_size=args.batch_size,
        seed=args.seed, mixed=args.mixed, mix_seed=args.mix_seed)
    if args.batches_per_domain < 1 or args.batch_size < 1:
        raise UsageError("batch counts must be >= 1")
    for k in spec.kinds:
        if k not in KINDS:
            raise UsageError(f"unknown corruption kind {k!r}")
    out = _prepare_dir(out_path(args.out), args.force)
    stream = spec.build()
    meta = {f.name: getattr(spec, f.name) for f in fields(spec)}
    save_stream(stream, out, meta={**meta, "stream_hash": stream_hash(stream)})
    print(f"wrote {len(stream)} batches to {out}")
    return EXIT_OK


def cmd_train_source(args) -> int:
    if args.epochs < 0 or args.lr <= 0:
        raise UsageError("--epochs must be >= 0 and --lr > 0")
    cfg = SourceConfig(samples=args.samples, epochs=args.epochs, lr=args.lr, seed=args.seed,
                       augment=not args.no_augment, model=ModelConfig())
    out = _prepare_dir(out_path(args.out), args.force)
    params = train_source(cfg)
    save_checkpoint(params, out)
    acc = clean_accuracy(params)
    (out / "source.json").write_text(json.dumps(
        {"clean_accuracy": acc, "epochs": cfg.epochs, "lr": cfg.lr, "samples": cfg.samples,
         "seed": cfg.seed, "augment": cfg.augment}, indent=2))
    print(f"clean accuracy {acc:.4f}; checkpoint in {out}")
    return EXIT_OK


def _adapt_overrides(args) -> dict:
    return {
        "adapt": {
            "lr": args.lr, "momentum": args.momentum, "batch_size": args.batch_size,
            "parts": _csv_list(args.parts), "st_variant": args.st_variant,
            "update_scope": args.update_scope, "tau": args.tau, "fourier_beta": args.beta,
            "confidence": args.confidence, "evaluate_with": args.evaluate_with,
            "precision": args.precision, "seed": args.seed,
        },
        "stream": {
            "kinds": _csv_list(args.kinds), "severity": args.severity,
            "batches_per_domain": args.batches_per_domain, "batch_size": args.batch_size,
            "seed": args.stream_seed, "mixed": True if args.mixed else None,
            "data_dir": args.data,
        },
        "kb": {"per_class": args.kb_per_class, "seed": args.kb_seed, "directory": args.kb},
        "source": args.source,
        "out": args.out,
    }


def _run_one(run: RunConfig, stream, kb, out: Path, extra: dict | None = None) -> dict:
    params = load_checkpoint(run.source)
    report = run_episode(params, run.adapt, stream, kb, dump_dir=out)
    report.extra.update({
        "run": run.to_dict(),
        "st_variant": run.adapt.st_variant,
        "update_scope": run.adapt.update_scope,
        "stream_order": "mixed" if run.stream.mixed else "ordered",
        "kb_size": len(kb),
        **(extra or {}),
    })
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    report.write_summary(out / "summary.json")
    return report.summary()


def _load_run(args) -> RunConfig:
    run = resolve_config(read_config_file(args.config), _adapt_overrides(args))
    if not run.source:
        raise UsageError("a source checkpoint is required (--source or 'source' in config)")
    if not (Path(run.source) / "manifest.json").is_file():
        raise FileNotFoundError(f"no checkpoint at {run.source}")
    if not run.out:
        raise UsageError("an output directory is required (--out or 'out' in config)")
    return run


def cmd_adapt(args) -> int:
    run = _load_run(args)
    out = _prepare_dir(out_path(run.out), args.force)
    summary = _run_one(run, run.stream.build(), run.kb.build(), out)
    print(f"mean error {summary['mean_error']:.4f}; results in {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = _load_run(args)
    rows = _csv_list(args.rows) or list(ABLATION_GRID)
    unknown = set(rows) - set(ABLATION_GRID)
    if unknown:
        raise UsageError(f"unknown ablation rows {sorted(unknown)}")
    sizes = _csv_list(args.kb_size, int) or [run.kb.per_class]
    if any(m < 1 for m in sizes):
        raise UsageError("--kb-size entries must be >= 1")
    out = _prepare_dir(out_path(run.out), args.force)
    stream = run.stream.build()
    table = []
    if args.with_frozen:
        rep = evaluate_frozen(load_checkpoint(run.source), stream, run.adapt.seed)
        (out / "frozen").mkdir()
        rep.write_csv(out / "frozen" / "metrics.csv")
        rep.write_summary(out / "frozen" / "summary.json")
        table.append({"row": "frozen", "kb_size": 0, "mean_error": rep.mean_error,
                      "stream_hash": rep.stream_hash})
    for m in sizes:
        kb = KBSpec(run.kb.classes, m, run.kb.seed, run.kb.directory).build()
        for name in rows:
            cfg = AdaptConfig.from_dict({**run.adapt.to_dict(), "parts": list(ABLATION_GRID[name])})
            cell = RunConfig(cfg, run.stream, run.kb, run.source, run.out)
            sub = out / (name if len(sizes) == 1 else f"{name}_M{m}")
            summary = _run_one(cell, stream, kb, sub, {"ablation_row": name})
            table.append({"row": name, "kb_size": m, "mean_error": summary["mean_error"],
                          "stream_hash": summary["stream_hash"]})
            print(f"{name:>6} M={m}: mean error {summary['mean_error']:.4f}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["row", "kb_size", "mean_error", "stream_hash"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(table)
    return EXIT_OK


def _find_summaries(paths: list[str]) -> list[Path]:
    found = []
    for p in paths:
        p = Path(p)
        if p.is_file() and p.name == "summary.json":
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(p.rglob("summary.json")))
        else:
            raise FileNotFoundError(f"{p} is neither a run directory nor a summary.json")
    if not found:
        raise FileNotFoundError("no summary.json found under the given paths")
    return found


def aggregate(summaries: list[dict]) -> list[dict]:
    """Per-domain mean and std of error across runs, plus a final mean row."""
    domain_sets = {tuple(sorted(s["domain_errors"])) for s in summaries}
    if len(domain_sets) != 1:
        raise UsageError("incomparable runs: domain sets differ")
    # keep the first run's domain order (stream order for ordered runs)
    domains = list(summaries[0]["domain_errors"])
    rows = []
    for d in domains:
        vals = np.array([s["domain_errors"][d] for s in summaries])
        rows.append({"domain": d, "mean": float(vals.mean()), "std": float(vals.std()),
                     "runs": len(vals)})
    means = np.array([s["mean_error"] for s in summaries])
    rows.append({"domain": "mean", "mean": float(means.mean()), "std": float(means.std()),
                 "runs": len(means)})
    return rows


def cmd_report(args) -> int:
    paths = _find_summaries(args.runs)
    summaries = []
    for p in paths:
        try:
            summaries.append(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed summary {p}: {exc}") from exc
    rows = aggregate(summaries)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "domain_errors.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["domain", "mean", "std", "runs"], lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "mean": f"{r['mean']:.6f}", "std": f"{r['std']:.6f}"})
    with open(out / "loss_traces.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "step", "loss_pce", "loss_scl", "loss_st", "loss_total", "batch_error"])
        for p in paths:
            metrics = p.parent / "metrics.csv"
            if not metrics.is_file():
                continue
            with open(metrics, newline="") as mf:
                for rec in csv.DictReader(mf):
                    writer.writerow([str(p.parent), rec["step"], rec["loss_pce"], rec["loss_scl"],
                                     rec["loss_st"], rec["loss_total"], rec["batch_error"]])
    for r in rows:
        print(f"{r['domain']:>20}  {100 * r['mean']:6.2f} +- {100 * r['std']:5.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--source", help="source checkpoint directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g = p.add_argument_group("adaptation")
    g.add_argument("--lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--parts", help=f"comma list from {','.join(PARTS)}")
    g.add_argument("--st-variant", choices=ST_VARIANTS)
    g.add_argument("--update-scope", choices=SCOPES)
    g.add_argument("--tau", type=float)
    g.add_argument("--beta", type=float, help="Fourier swap window (0..1)")
    g.add_argument("--confidence", type=float)
    g.add_argument("--evaluate-with", choices=("teacher", "student"))
    g.add_argument("--precision", choices=("float32", "float64"))
    g.add_argument("--seed", type=int)
    g = p.add_argument_group("stream")
    g.add_argument("--data", help="stream directory written by gen-data")
    g.add_argument("--kinds", help="comma list of corruption kinds")
    g.add_argument("--severity", type=int)
    g.add_argument("--batches-per-domain", type=int)
    g.add_argument("--stream-seed", type=int)
    g.add_argument("--mixed", action="store_true", help="shuffle batches across domains")
    g = p.add_argument_group("knowledge base")
    g.add_argument("--kb", help="exemplar directory written by gen-kb")
    g.add_argument("--kb-per-class", type=int)
    g.add_argument("--kb-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsbridge", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-kb", help="write a procedural exemplar directory")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_kb)

    p = sub.add_parser("gen-data", help="materialise a corrupted target stream")
    p.add_argument("--out", required=True)
    p.add_argument("--kinds")
    p.add_argument("--severity", type=int, default=5)
    p.add_argument("--batches-per-domain", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--seed", type=int, default=100)
    p.add_argument("--mixed", action="store_true")
    p.add_argument("--mix-seed", type=int, default=200)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="train the source model on clean glyphs")
    p.add_argument("--out", required=True)
    defaults = SourceConfig()
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--samples", type=int, default=defaults.samples)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="run one online adaptation episode")
    _add_run_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("ablate", help="run the component ablation grid")
    _add_run_flags(p)
    p.add_argument("--rows", help=f"subset of {','.join(ABLATION_GRID)}")
    p.add_argument("--kb-size", help="comma list of exemplars per class, e.g. 1,2,4,8")
    p.add_argument("--with-frozen", action="store_true", help="also score the unadapted source")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate run summaries into CSV tables")
    p.add_argument("runs", nargs="+", help="run directories or summary.json files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AdaptationAborted as exc:
        print(f"error: adaptation aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
