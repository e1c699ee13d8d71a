"""Command line entry point.

Every subcommand reads an optional YAML key-value config (``--config``),
applies ``--set key=value`` overrides and writes its outputs under
``--run-dir`` together with ``outputs.json``, a manifest of the files it
produced. The dataset root comes from ``--root`` or ``$GAZEVIT_DATA_ROOT``.
Failures exit with the category code of the raised error (see
``gazevit.exceptions``).
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import harness, pipeline
from .events import Manifest
from .exceptions import GazeViTError, InvalidParameterError, MissingDataError
from .harness import DATA_ROOT_ENV, AuditedStore, ExperimentConfig
from .report import render_report
from .synth import SynthSpec, generate_synthetic_dataset

logger = logging.getLogger("gazevit")


class RunDirectory:
    """Collects produced files and writes ``outputs.json`` listing them."""

    def __init__(self, path, command):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.files = []

    def add(self, *paths):
        for p in paths:
            p = Path(p)
            if p.is_dir():
                self.files.extend(sorted(f for f in p.rglob("*") if f.is_file()))
            elif p.exists():
                self.files.append(p)

    def _entry(self, f):
        f = Path(f).resolve()
        try:
            name = str(f.relative_to(self.path.resolve()))
        except ValueError:
            name = str(f)
        return {"path": name, "bytes": f.stat().st_size, "sha256": hashlib.sha256(f.read_bytes()).hexdigest()}

    def finalize(self):
        seen, entries = set(), []
        for f in self.files:
            key = Path(f).resolve()
            if key not in seen and key.name != "outputs.json":
                seen.add(key)
                entries.append(self._entry(f))
        out = self.path / "outputs.json"
        out.write_text(json.dumps({"command": self.command, "files": entries}, indent=2))
        return out


def _overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise InvalidParameterError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _load_yaml(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise InvalidParameterError(f"{path} must hold a key-value mapping")
    return data


def _experiment_config(args):
    data = {**_load_yaml(args.config), **_overrides(args.set)}
    if args.root:
        data["dataset_root"] = str(args.root)
    return ExperimentConfig.from_dict(data)


def _root(args, config=None):
    root = args.root or (config.dataset_root if config else None) or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise MissingDataError(f"no dataset root: pass --root or set ${DATA_ROOT_ENV}")
    return Path(root)


# --- subcommands ----------------------------------------------------------

def cmd_synth(args, run):
    data = {**_load_yaml(args.config), **_overrides(args.set)}
    known = {f.name for f in dataclasses.fields(SynthSpec)}
    unknown = set(data) - known
    if unknown:
        raise InvalidParameterError(f"unknown synth keys: {sorted(unknown)}")
    root = _root(args)
    generate_synthetic_dataset(SynthSpec(**data), args.seed, root)
    run.add(root)
    print(root)


def cmd_detect_turns(args, run):
    root = _root(args)
    params = _overrides(args.set)
    events = pipeline.detect_turns(root, args.source, **params)
    run.add(root / pipeline.EVENTS_FILE)
    print(f"{len(events)} turns")


def cmd_build_fixmaps(args, run):
    root = _root(args)
    out = pipeline.build_fixmaps(root, args.sigma, args.duration_weighting)
    run.add(*(root / rel for rel in out.values()))
    print(f"{len(out)} fixation maps")


def cmd_preprocess(args, run):
    config = _experiment_config(args)
    root = _root(args, config)
    if not (root / pipeline.EVENTS_FILE).exists():
        pipeline.detect_turns(root, args.source)
        run.add(root / pipeline.EVENTS_FILE)
    if not any((root / pipeline.FIXMAP_DIR).glob("*.npy")):
        run.add(*(root / rel for rel in pipeline.build_fixmaps(root).values()))
    manifest = pipeline.preprocess(root, config.uncertainty_source, config.uncertainty_rule,
                                   config.uncertainty_threshold)
    run.add(root / pipeline.MANIFEST_FILE, root / "uncertainty.json")
    print(f"{len(manifest)} records, {len(manifest.rejects)} rejected")


def cmd_split(args, run):
    config = _experiment_config(args)
    store = AuditedStore(_root(args, config))
    parts = harness.split_dataset(store.manifest(), config.split_ratios, args.seed)
    for name, part in zip(harness.SPLITS, parts):
        run.add(part.write(run.path / f"{name}.jsonl"))
    print(" ".join(f"{n}={len(p)}" for n, p in zip(harness.SPLITS, parts)))


def cmd_train(args, run):
    config = _experiment_config(args)
    records = harness.train(config, run.path)
    run.add(run.path)
    for r in records:
        print(f"seed {r.seed}: accuracy {r.metrics['total']['accuracy']:.4f} iou {r.alignment['iou']:.4f}")


def cmd_evaluate(args, run):
    root = _root(args)
    manifest = Manifest.read(args.manifest)
    store = AuditedStore(root)
    metrics = harness.evaluate(args.checkpoint, manifest, store)
    out = run.path / "metrics.json"
    out.write_text(json.dumps(metrics, sort_keys=True, indent=2))
    run.add(out)
    print(json.dumps(metrics["total"]))


def cmd_sweep(args, run):
    config = _experiment_config(args)
    grid = [float(v) for v in args.grid.split(",")] if args.grid else harness.LAMBDA_GRID
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    harness.lambda_sweep(config, grid, seeds, run.path)
    run.add(run.path)
    print((run.path / "sweep.tsv").read_text(), end="")


def cmd_compare(args, run):
    groups = {}
    for spec in args.model:
        if "=" in spec:
            name, path = spec.split("=", 1)
            groups[name] = harness.load_records(path)
        else:
            for name, recs in harness.group_by_model(harness.load_records(spec)).items():
                groups.setdefault(name, []).extend(recs)
    if len(groups) < 2:
        raise InvalidParameterError("compare needs at least two models")
    rows = harness.compare(groups, args.alpha)
    out = harness.write_tsv(run.path / "comparison.tsv", rows, harness.COMPARE_COLUMNS)
    run.add(out)
    print(out.read_text(), end="")


def cmd_report(args, run):
    records = [r for path in args.runs for r in harness.load_records(path)]
    run.add(*render_report(records, run.path))
    print(run.path / "report.md")


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "detect-turns": cmd_detect_turns,
    "build-fixmaps": cmd_build_fixmaps,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="gazevit", description="Gaze-supervised ViT turn prediction harness")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML key-value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--root", type=Path, help=f"dataset root (default ${DATA_ROOT_ENV})")
        p.add_argument("--run-dir", type=Path, default=None, help="output directory (default runs/<command>)")
        return p

    p = add("synth", "generate a synthetic dataset under the root")
    p.add_argument("--seed", type=int, default=0)
    p = add("detect-turns", "extract turn events from steering or geo logs")
    p.add_argument("--source", choices=("steering", "geo"), default="steering")
    p = add("build-fixmaps", "build one fixation map per event")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--duration-weighting", action="store_true")
    p = add("preprocess", "select frames, score uncertainty and write the manifest")
    p.add_argument("--source", choices=("steering", "geo"), default="steering")
    p = add("split", "write stratified train/valid/test manifests")
    p.add_argument("--seed", type=int, default=0)
    add("train", "train every seed of a config")
    p = add("evaluate", "score a checkpoint on a manifest without gaze")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p = add("sweep", "train over a lambda grid")
    p.add_argument("--grid", help="comma-separated lambdas (default 0,0.01,0.1,0.2,0.8,1)")
    p.add_argument("--seeds", help="comma-separated seeds (default: config seeds)")
    p = add("compare", "pairwise Mann-Whitney tests between models")
    p.add_argument("--model", action="append", required=True,
                   help="NAME=RUN_DIR, or a directory whose runs are grouped by model")
    p.add_argument("--alpha", type=float, default=0.05)
    p = add("report", "figures and tables from finished runs")
    p.add_argument("--runs", action="append", type=Path, default=[], help="directory holding run records")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    run = RunDirectory(args.run_dir or Path("runs") / args.command, args.command)
    try:
        COMMANDS[args.command](args, run)
    except GazeViTError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error (OSError): {exc}", file=sys.stderr)
        return MissingDataError.exit_code
    run.finalize()
    return 0


if __name__ == "__main__":
    sys.exit(main())
