"""Experiment orchestration: config, audited data access, splits, runs and comparisons."""

import contextlib
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .estimator import GazeViTClassifier, breakdown_records
from .events import Manifest
from .exceptions import (
    AuditViolationError,
    InvalidParameterError,
    MissingDataError,
)
from .gaze import load_fixation_map, minmax_normalize, reduce_fixation_map
from .losses import LAMBDA_GRID
from .metrics import classification_metrics, iou_alignment, layer_similarity, mann_whitney_u
from .pipeline import MANIFEST_FILE, load_frame
from .vit import render_attention_map

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "GAZEVIT_DATA_ROOT"
SPLITS = ("train", "valid", "test")


# --- configuration ------------------------------------------------------

@dataclass
class ExperimentConfig:
    dataset_id: str = "synthetic"
    dataset_root: str = None
    split_ratios: tuple = (0.65, 0.15, 0.20)
    depth: int = 2
    heads: int = 2
    embed_dim: int = 64
    patch_size: int = 8
    mlp_ratio: float = 2.0
    head_init: str = "zeros"
    init: str = "fan_in"
    loss: str = "bce"
    lam: float = None
    reduction: str = "column"
    normalization: str = "unit-sum"
    optimizer: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 32
    lr_step_epoch: int = 50
    lr_gamma: float = 0.1
    max_epochs: int = 100
    patience: int = 20
    seeds: tuple = (0,)
    deterministic: bool = True
    dtype: str = "float32"
    uncertainty_source: str = "contrast"
    uncertainty_rule: str = "median"
    uncertainty_threshold: float = None

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        self.seeds = tuple(int(s) for s in self.seeds)
        if len(self.split_ratios) != 3 or any(r <= 0 for r in self.split_ratios):
            raise InvalidParameterError(f"split_ratios must be three positive numbers, got {self.split_ratios}")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise InvalidParameterError(f"split_ratios must sum to 1, got {sum(self.split_ratios)}")
        if self.patience > self.max_epochs:
            raise InvalidParameterError("patience cannot exceed max_epochs")
        if self.loss not in ("bce", "fax"):
            raise InvalidParameterError(f"loss must be bce or fax, got {self.loss!r}")
        if (self.lam is not None) != (self.loss == "fax"):
            raise InvalidParameterError("lam must be set exactly when loss is fax")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise InvalidParameterError(f"lam must lie in [0, 1], got {self.lam}")
        if not self.seeds:
            raise InvalidParameterError("seeds must be nonempty")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, path, overrides=None):
        path = Path(path)
        if not path.exists():
            raise MissingDataError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise InvalidParameterError(f"cannot parse {path}: {exc}") from None
        if not isinstance(data, dict):
            raise InvalidParameterError(f"{path} must hold a key-value mapping")
        return cls.from_dict({**data, **(overrides or {})})

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        d["seeds"] = list(self.seeds)
        return d

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def config_hash(self):
        """Digest of everything except seeds and the dataset location."""
        d = self.to_dict()
        for key in ("seeds", "dataset_root"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def model_name(self):
        if self.loss == "bce":
            return f"{self.depth}-ViT"
        return f"{self.depth}-FAX(lam={self.lam:g})"

    def resolve_root(self):
        root = self.dataset_root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise MissingDataError(f"no dataset root: set dataset_root or ${DATA_ROOT_ENV}")
        return Path(root)

    def estimator(self, seed):
        return GazeViTClassifier(
            depth=self.depth, heads=self.heads, embed_dim=self.embed_dim, patch_size=self.patch_size,
            mlp_ratio=self.mlp_ratio, head_init=self.head_init, init=self.init,
            loss=self.loss, lam=self.lam or 0.0, reduction=self.reduction, normalization=self.normalization,
            optimizer=self.optimizer, lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
            batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience,
            lr_step_epoch=self.lr_step_epoch, lr_gamma=self.lr_gamma, dtype=self.dtype,
            deterministic=self.deterministic, random_state=seed,
        )


# --- audited data access ----------------------------------------------------

class AuditedStore:
    """Loads frames and fixation maps for manifest records and counts every read.

    Inside ``phase(name, fixations=False)`` any fixation read raises
    ``AuditViolationError``; ``forbidden_ids`` blocks all reads of the given
    records (used to keep test data out of training).
    """

    def __init__(self, root):
        self.root = Path(root)
        self.reads = Counter()
        self._phase = "default"
        self._fixations_allowed = True
        self._forbidden = frozenset()

    @contextlib.contextmanager
    def phase(self, name, fixations=True, forbidden_ids=()):
        saved = self._phase, self._fixations_allowed, self._forbidden
        self._phase, self._fixations_allowed, self._forbidden = name, fixations, frozenset(forbidden_ids)
        try:
            yield self
        finally:
            self._phase, self._fixations_allowed, self._forbidden = saved

    def count(self, phase, kind):
        return self.reads[(phase, kind)]

    def _check(self, records, kind):
        for rec in records:
            if rec["id"] in self._forbidden:
                raise AuditViolationError(f"record {rec['id']} read during {self._phase}")
        self.reads[(self._phase, kind)] += len(records)

    def manifest(self, name=MANIFEST_FILE):
        return Manifest.read(self.root / name)

    def frames(self, records):
        self._check(records, "frame")
        return np.stack([load_frame(self.root / r["frame"]) for r in records])

    def fixations(self, records):
        if not self._fixations_allowed:
            raise AuditViolationError(f"fixation data requested during {self._phase}")
        self._check(records, "fixation")
        return np.stack([load_fixation_map(self.root / r["fixation"]) for r in records])


# --- splits --------------------------------------------------------------

def largest_remainder(total, ratios):
    raw = np.asarray(ratios, dtype=np.float64) * total
    sizes = np.floor(raw).astype(int)
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[: total - sizes.sum()]] += 1
    return sizes


def _controlled_rounding(class_sizes, split_sizes):
    """Integer class x split table with the given margins, each cell within 1 of ``n_c * n_s / n``."""
    n = class_sizes.sum()
    target = np.outer(class_sizes, split_sizes) / n
    table = np.floor(target + 1e-12).astype(int)
    frac = target - table
    rows_left = class_sizes - table.sum(1)
    cols_left = split_sizes - table.sum(0)
    for flat in np.argsort(-frac, axis=None, kind="stable"):
        c, s = divmod(int(flat), len(split_sizes))
        if rows_left[c] > 0 and cols_left[s] > 0 and frac[c, s] > 0:
            table[c, s] += 1
            rows_left[c] -= 1
            cols_left[s] -= 1
    # any remainder (only possible through float noise) goes wherever both margins allow
    while rows_left.sum():
        c = int(np.flatnonzero(rows_left)[0])
        s = int(np.flatnonzero(cols_left)[0])
        table[c, s] += 1
        rows_left[c] -= 1
        cols_left[s] -= 1
    return table


def split_dataset(manifest, ratios=(0.65, 0.15, 0.20), seed=0):
    """Label-stratified (train, valid, test) partition of a manifest.

    Split sizes follow the largest-remainder rule; within each label the
    records are shuffled with ``seed`` and dealt out so every split's left
    count is within one sample of its proportional share.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidParameterError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    records = manifest.records
    sizes = largest_remainder(len(records), ratios)
    if np.any(sizes < 1):
        raise InvalidParameterError(f"split sizes {sizes.tolist()} leave a split empty")
    labels = sorted({r["label"] for r in records})
    by_label = [[i for i, r in enumerate(records) if r["label"] == lab] for lab in labels]
    table = _controlled_rounding(np.array([len(b) for b in by_label]), sizes)

    rng = np.random.default_rng(seed)
    parts = [[] for _ in SPLITS]
    for c, members in enumerate(by_label):
        members = list(rng.permutation(members))
        start = 0
        for s in range(len(SPLITS)):
            parts[s].extend(members[start:start + table[c, s]])
            start += table[c, s]
    return tuple(Manifest([records[i] for i in sorted(p)], []) for p in parts)


# --- runs ----------------------------------------------------------------

@dataclass
class RunRecord:
    config_hash: str
    model: str
    seed: int
    lam: float
    depth: int
    history: list
    best_epoch: int
    metrics: dict
    alignment: dict = field(default_factory=dict)
    checkpoint: str = None

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def _labels(records):
    return np.array([r["label"] for r in records])


def _metrics_dict(m, n):
    return {"n": int(n), "accuracy": m.accuracy, "auc": m.auc, "f1": m.f1}


def evaluate(checkpoint, manifest, store):
    """Accuracy/AUC/F1 overall and per uncertainty split, from frames alone.

    Runs in an audited phase where any fixation read is an error, and
    checks afterwards that none happened.
    """
    records = manifest.records
    if not records:
        raise InvalidParameterError("cannot evaluate an empty manifest")
    tags = [r.get("uncertainty_split") for r in records]
    if any(t not in ("high", "low") for t in tags):
        raise MissingDataError("every test record needs an uncertainty_split tag")
    est = GazeViTClassifier.from_checkpoint(checkpoint)
    before = store.count("evaluate", "fixation")
    with store.phase("evaluate", fixations=False):
        X = store.frames(records)
        proba = est.predict_proba(X)
    if store.count("evaluate", "fixation") != before:
        raise AuditViolationError("fixation data was read during evaluation")

    left_col = int(np.flatnonzero(est.classes_ == "left")[0])
    scores = proba[:, left_col]
    positive = _labels(records) == "left"
    tags = np.array(tags)
    out = {"total": _metrics_dict(classification_metrics(scores, positive), len(records))}
    for split in ("high", "low"):
        sel = tags == split
        if np.any(sel):
            out[split] = _metrics_dict(classification_metrics(scores[sel], positive[sel]), sel.sum())
        else:
            out[split] = {"n": 0, "accuracy": None, "auc": None, "f1": None}
    return out


def alignment(est, manifest, store, threshold=0.4):
    """Mean IoU over samples, layers and heads plus per-layer similarity.

    This is a post-hoc analysis that reads test fixations; it never feeds
    back into training or checkpoint selection.
    """
    records = manifest.records
    with store.phase("analysis"):
        X = store.frames(records)
        maps = store.fixations(records)
    reduced = est.reduced_attention(X)
    grid, p = est.model_.config.grid_size, est.patch_size
    ious, sims = [], []
    for i in range(len(records)):
        fix = minmax_normalize(maps[i])
        for l in range(reduced.shape[1]):
            for a in range(reduced.shape[2]):
                ious.append(iou_alignment(render_attention_map(reduced[i, l, a], grid, p), fix, threshold))
        sims.append(layer_similarity(reduced[i], reduce_fixation_map(maps[i], p, est.normalization)))
    mean_maps = reduced.mean(axis=0)
    return {
        "iou": float(np.mean(ious)),
        "similarity": [float(v) for v in np.mean(sims, axis=0)],
        "mean_attention": mean_maps.tolist(),
    }


def train_run(config, seed, run_dir, store=None):
    """One seed of ``config``: split, fit, checkpoint, then evaluate the test split once."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    store = store or AuditedStore(config.resolve_root())
    manifest = store.manifest()
    train, valid, test = split_dataset(manifest, config.split_ratios, seed)
    (run_dir / "splits").mkdir(exist_ok=True)
    for name, part in zip(SPLITS, (train, valid, test)):
        part.write(run_dir / "splits" / f"{name}.jsonl")

    test_ids = [r["id"] for r in test.records]
    fax = config.loss == "fax"
    with store.phase("train", fixations=fax, forbidden_ids=test_ids):
        Xtr, Xva = store.frames(train.records), store.frames(valid.records)
        Ftr = store.fixations(train.records) if fax else None
        Fva = store.fixations(valid.records) if fax else None
    est = config.estimator(seed)
    est.fit(Xtr, _labels(train.records), Ftr, (Xva, _labels(valid.records), Fva))

    ckpt = run_dir / "checkpoint.npz"
    est.save(ckpt)
    with open(run_dir / "steps.jsonl", "w") as fh:
        for row in breakdown_records(est.step_log_):
            fh.write(json.dumps(row) + "\n")

    metrics = evaluate(ckpt, test, store)
    align = alignment(est, test, store)
    record = RunRecord(
        config_hash=config.config_hash, model=config.model_name, seed=int(seed), lam=float(config.lam or 0.0),
        depth=config.depth, history=est.history_, best_epoch=int(est.best_epoch_), metrics=metrics,
        alignment=align, checkpoint=ckpt.name,
    )
    (run_dir / "run_record.json").write_text(record.to_json())
    (run_dir / "metrics.json").write_text(json.dumps(
        {"config_hash": record.config_hash, "seed": record.seed, "metrics": metrics,
         "iou": align["iou"], "history": est.history_}, sort_keys=True, indent=2))
    (run_dir / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    return record


def train(config, run_dir, store=None):
    """Every seed of ``config``; runs land in ``run_dir/seed<k>``."""
    store = store or AuditedStore(config.resolve_root())
    return [train_run(config, s, Path(run_dir) / f"seed{s}", store) for s in config.seeds]


def load_records(path):
    path = Path(path)
    files = [path] if path.is_file() else sorted(path.rglob("run_record.json"))
    return [RunRecord.load(f) for f in files]


# --- sweeps and comparisons ---------------------------------------------------

def lambda_config(config, lam):
    """``lam == 0`` means plain BCE training."""
    return config.replace(loss="bce", lam=None) if lam == 0 else config.replace(loss="fax", lam=float(lam))


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    return float(np.mean(values)), float(np.std(values))


def summarize(records, key=lambda r: r.lam):
    """Mean and std of total/high/low accuracy and IoU per group."""
    rows = []
    for group, recs in itertools.groupby(sorted(records, key=key), key=key):
        recs = list(recs)
        row = {"group": group, "n_runs": len(recs)}
        for split in ("total", "high", "low"):
            row[f"{split}_mean"], row[f"{split}_std"] = _mean_std([r.metrics[split]["accuracy"] for r in recs])
        row["iou_mean"], row["iou_std"] = _mean_std([r.alignment.get("iou") for r in recs])
        rows.append(row)
    return rows


def lambda_sweep(config, grid=LAMBDA_GRID, seeds=None, out_dir="sweep", store=None):
    """One run per (lambda, seed); returns the records and writes ``sweep.tsv``."""
    grid = list(grid)
    if not grid:
        raise InvalidParameterError("lambda grid must be nonempty")
    seeds = config.seeds if seeds is None else tuple(seeds)
    out_dir = Path(out_dir)
    store = store or AuditedStore(config.resolve_root())
    records = []
    for lam in grid:
        cfg = lambda_config(config, lam)
        for seed in seeds:
            records.append(train_run(cfg, seed, out_dir / f"lam{lam:g}" / f"seed{seed}", store))
    write_tsv(out_dir / "sweep.tsv", summarize(records))
    return records


COMPARE_COLUMNS = ("model_a", "model_b", "metric", "n_a", "n_b", "u", "p_value", "reject")


def compare(groups, alpha=0.05, metrics=("total", "high")):
    """Two-sided Mann-Whitney test for each model pair on each accuracy metric.

    ``groups`` maps a model name to its list of RunRecords (or of metrics
    dicts with the same layout as ``RunRecord.metrics``).
    """
    for name, recs in groups.items():
        if len(recs) < 2:
            raise InvalidParameterError(f"model {name!r} has {len(recs)} runs; at least 2 are needed")
    rows = []
    for a, b in itertools.combinations(groups, 2):
        for metric in metrics:
            xa = [_metric(r, metric) for r in groups[a]]
            xb = [_metric(r, metric) for r in groups[b]]
            res = mann_whitney_u(xa, xb)
            rows.append({"model_a": a, "model_b": b, "metric": metric, "n_a": len(xa), "n_b": len(xb),
                         "u": res.statistic, "p_value": res.pvalue, "reject": bool(res.pvalue < alpha)})
    return rows


def _metric(rec, metric):
    metrics = rec.metrics if isinstance(rec, RunRecord) else rec
    return metrics[metric]["accuracy"]


def group_by_model(records):
    groups = {}
    for r in records:
        groups.setdefault(r.model, []).append(r)
    return groups


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "True" if v else "False"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def _parse(text):
    if text == "":
        return None
    if text in ("True", "False"):
        return text == "True"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def write_tsv(path, rows, columns=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])
    return path


def read_tsv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, [])
        return [dict(zip(header, (_parse(v) for v in row))) for row in reader]
