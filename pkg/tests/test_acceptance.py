"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line in the terminal summary. The
desk-scale trend checks (5 and 6) train 20 models on a 2000-sample
synthetic dataset and take roughly 20-25 minutes on one CPU core.
"""

import json
import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch

from gazevit import harness, pipeline
from gazevit.cli import main
from gazevit.estimator import GazeViTClassifier
from gazevit.events import Manifest, SteeringTrace, detect_steering_turns
from gazevit.gaze import GazeTrace, build_fixation_map, dilate, patch_means, reduce_fixation_map
from gazevit.harness import AuditedStore, ExperimentConfig
from gazevit.losses import fax_backward_check, fax_loss, intersection_loss
from gazevit.metrics import auc_score, dummy_classify, mann_whitney_u
from gazevit.synth import SynthSpec, generate, generate_synthetic_dataset
from gazevit.uncertainty import local_contrast, luminance
from gazevit.vit import ModelConfig, VisionTransformer, prune_to_depth, randomize_parameters, reduce_attention

from . import oracles

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"
DESK_MODEL = dict(depth=2, heads=2, embed_dim=64, patch_size=8, image_size=32)
SEEDS = (0, 1, 2, 3, 4)


def desk_model(seed, dtype=torch.float64):
    torch.manual_seed(seed)
    return randomize_parameters(VisionTransformer(ModelConfig(**DESK_MODEL)).to(dtype), seed).eval()


@pytest.fixture(scope="module")
def desk_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk") / "data"
    generate_synthetic_dataset(SynthSpec(n_samples=2000, rho=0.9), seed=0, root=root)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pipeline.detect_turns(root)
        pipeline.build_fixmaps(root)
        manifest = pipeline.preprocess(root, "contrast")
    assert len(manifest) == 2000
    return root


@pytest.fixture(scope="module")
def desk_runs(desk_root, tmp_path_factory):
    """lambda in {0, 0.2, 1} for the 2-layer model and lambda = 0.2 for a 1-layer model, 5 seeds each."""
    out = tmp_path_factory.mktemp("desk-runs")
    config = ExperimentConfig.from_yaml(DESK_CONFIG, {"dataset_root": str(desk_root)})
    store = AuditedStore(desk_root)
    start = time.perf_counter()
    sweep = harness.lambda_sweep(config, [0.0, 0.2, 1.0], SEEDS, out / "sweep", store)
    shallow = harness.train(harness.lambda_config(config, 0.2).replace(depth=1), out / "depth1", store)
    elapsed = time.perf_counter() - start
    by_lam = {lam: [r for r in sweep if r.lam == lam] for lam in (0.0, 0.2, 1.0)}
    return {"lam": by_lam, "depth1": shallow, "seconds": elapsed, "dir": out, "store": store}


def test_criterion_1_gradient_check(criterion):
    with criterion(1, "FAX backward check, lambda in {0, 0.5, 1}") as c:
        start = time.perf_counter()
        g = torch.Generator().manual_seed(0)
        images = torch.rand(4, 3, 32, 32, generator=g, dtype=torch.float64)
        labels = torch.tensor([0, 1, 0, 1])
        f = torch.rand(4, 16, generator=g, dtype=torch.float64)
        f = f / f.sum(1, keepdim=True)
        errors = {}
        for lam in (0.0, 0.5, 1.0):
            err, details = fax_backward_check(desk_model(1), (images, labels, f), lam, n_params=200,
                                              return_details=True)
            errors[lam] = err
            assert len(details) >= 200
            if lam == 1.0:
                assert any(abs(d["analytic"]) > 0 for d in details if d["group"] == "query_key")
        elapsed = time.perf_counter() - start
        c.detail = "max rel err " + ", ".join(f"{k:g}: {v:.2e}" for k, v in errors.items())
        assert max(errors.values()) < 1e-4
        assert elapsed < 300


def test_criterion_2_loss_identities(criterion):
    with criterion(2, "loss identities") as c:
        data = generate(SynthSpec(n_samples=160), seed=1)
        fix = np.stack([build_fixation_map(g, w, (32, 32)).grid for g, w in zip(data.gaze, data.windows)])
        common = dict(DESK_MODEL, batch_size=16, max_epochs=10, patience=10, dtype="float64", optimizer="adam",
                      lr=1e-3)
        common.pop("image_size")
        bce = GazeViTClassifier(loss="bce", **common).fit(data.frames, data.labels)
        fax = GazeViTClassifier(loss="fax", lam=0.0, **common).fit(data.frames, data.labels, fix)
        steps = len(bce.step_log_)
        assert steps >= 100 and len(fax.step_log_) == steps
        worst = max(abs(a.l_fax - b.l_fax) for a, b in zip(bce.step_log_, fax.step_log_))
        assert worst <= 1e-12

        assert abs(float(intersection_loss(0.0)) - 2.0) < 1e-9
        assert abs(float(intersection_loss(1.0)) - (1 + math.exp(-1))) < 1e-9

        # the mix is linear in lambda, so a wide central difference carries no truncation error
        rng = np.random.default_rng(2)
        gap, h = 0.0, 1e-3
        for _ in range(1000):
            b, li, lam = rng.uniform(0, 5), rng.uniform(1, 2), rng.uniform(0.01, 0.99)
            slope = (fax_loss(b, li, lam + h) - fax_loss(b, li, lam - h)) / (2 * h)
            gap = max(gap, abs(slope - (li - b)))
        assert gap < 1e-9
        c.detail = f"{steps} steps, max step diff {worst:.1e}, dlambda err {gap:.1e}"


def test_criterion_3_attention_invariants(criterion):
    with criterion(3, "attention rows and reduction on 1000 forwards") as c:
        g = torch.Generator().manual_seed(3)
        worst_row, worst_reduce = 0.0, 0.0
        model = None
        for i in range(1000):
            if i % 50 == 0:
                model = desk_model(100 + i // 50, torch.float32)
            x = torch.rand(1, 3, 32, 32, generator=g) * (1 + 10 * torch.rand(1, generator=g))
            with torch.no_grad():
                _, attn = model(x)
            worst_row = max(worst_row, float((attn.sum(-1) - 1).abs().max()))
            weights = attn[0].double().numpy()
            reduced = np.asarray(reduce_attention(weights))
            for l in range(weights.shape[0]):
                for a in range(weights.shape[1]):
                    diff = np.abs(reduced[l, a] - oracles.reduce_column(weights[l, a])).max()
                    worst_reduce = max(worst_reduce, float(diff))
        c.detail = f"row sum err {worst_row:.1e}, reduction err {worst_reduce:.1e}"
        assert worst_row <= 1e-6
        assert worst_reduce < 1e-12


def test_criterion_4_oracle_suite(criterion):
    with criterion(4, "oracle equivalence suite") as c:
        start = time.perf_counter()
        rng = np.random.default_rng(4)
        n = 1000
        worst = {}

        def note(name, value):
            worst[name] = max(worst.get(name, 0.0), float(value))

        for _ in range(n):
            h, w = rng.integers(4, 13, 2)
            k = int(rng.integers(1, 6))
            xs, ys = rng.uniform(-3, w + 3, k), rng.uniform(-3, h + 3, k)
            sigma = rng.uniform(0.5, 5)
            got = build_fixation_map(GazeTrace(np.zeros(k), xs, ys, None), (0, 1), (h, w), sigma).grid
            note("fixation map", np.abs(got - oracles.fixation_map(xs, ys, np.ones(k), h, w, sigma)).max())

            p = int(rng.choice([1, 2, 4]))
            grid = rng.random((4 * int(rng.integers(1, 4)), 4 * int(rng.integers(1, 4))))
            ref = oracles.patch_mean(grid, p)
            note("patch reduction", np.abs(patch_means(grid, p) - ref).max())
            note("patch reduction", np.abs(reduce_fixation_map(grid, p) - ref / ref.sum()).max())

            mask = rng.random(tuple(rng.integers(3, 12, 2))) < rng.uniform(0.02, 0.3)
            kk = int(rng.integers(1, 7))
            assert np.array_equal(dilate(mask, (kk, kk)), oracles.dilate(mask, kk)), "dilation"

            frame = rng.integers(0, 256, (int(rng.integers(3, 10)), int(rng.integers(3, 10)), 3)).astype(np.uint8)
            note("contrast", np.abs(local_contrast(frame, 5) - oracles.local_contrast(luminance(frame), 5)).max())

            fmap = rng.integers(0, 3, tuple(rng.integers(1, 8, 2))).astype(float)
            tie = "left" if rng.random() < 0.5 else "right"
            assert dummy_classify(fmap, tie) == oracles.dummy(fmap, tie), "dummy"

            m = int(rng.integers(3, 80))
            t = np.cumsum(rng.uniform(0.01, 0.1, m))
            angle = np.round(rng.normal(0, 6, m))
            lb, amp = rng.uniform(0.2, 1.5), rng.uniform(1, 8)
            got_ev = [(e.t_event, e.label) for e in detect_steering_turns(SteeringTrace(t, angle), lb, amp)]
            assert got_ev == oracles.steering_peaks(t, angle, lb, amp), "steering"

            size = int(rng.integers(2, 40))
            scores = rng.integers(0, 10, size) / 9
            labels = np.r_[1, 0, rng.integers(0, 2, size - 2)].astype(bool)
            note("auc", abs(auc_score(scores, labels) - oracles.pairwise_auc(scores, labels)))

            na, nb = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            a, b = list(rng.integers(0, 5, na)), list(rng.integers(0, 5, nb))
            alt = ["two-sided", "less", "greater"][int(rng.integers(3))]
            u, pv = mann_whitney_u(a, b, alt)
            if len(set(a + b)) > 1:
                u_ref, p_ref = oracles.mwu_permutation(a, b, alt)
                assert u == u_ref, "mann-whitney U"
                note("mann-whitney p", abs(pv - p_ref))
            else:
                assert pv == 1.0
        elapsed = time.perf_counter() - start
        c.detail = f"{n} instances each, worst continuous err {max(worst.values()):.1e}"
        for name, value in worst.items():
            assert value < 1e-9, name
        assert elapsed < 600


@pytest.mark.slow
def test_criterion_5_desk_trend(desk_runs, criterion):
    with criterion(5, "desk-scale FAX trend over 5 seeds") as c:
        runs = desk_runs["lam"]
        iou0 = np.mean([r.alignment["iou"] for r in runs[0.0]])
        iou2 = np.mean([r.alignment["iou"] for r in runs[0.2]])
        acc1 = [r.metrics["total"]["accuracy"] for r in runs[1.0]]
        high0 = {r.seed: r.metrics["high"]["accuracy"] for r in runs[0.0]}
        high2 = {r.seed: r.metrics["high"]["accuracy"] for r in runs[0.2]}
        diffs = [high2[s] - high0[s] for s in SEEDS]
        c.detail = (f"IoU {iou2:.3f} vs {iou0:.3f}; lambda=1 acc {min(acc1):.3f}..{max(acc1):.3f}; "
                    f"high-unc diff mean {np.mean(diffs):+.3f}; {desk_runs['seconds'] / 60:.1f} min")
        assert iou2 > iou0
        assert all(0.45 <= a <= 0.55 for a in acc1)
        assert all(d >= -0.01 for d in diffs)
        assert np.mean(diffs) >= 0
        assert desk_runs["seconds"] < 4 * 3600


@pytest.mark.slow
def test_criterion_6_pruning(desk_runs, criterion):
    with criterion(6, "pruning consistency and depth trend") as c:
        run = desk_runs["dir"] / "sweep" / "lam0.2" / "seed0"
        est = GazeViTClassifier.from_checkpoint(run / "checkpoint.npz")
        model = est.model_.double()
        x = torch.rand(8, 3, 32, 32, generator=torch.Generator().manual_seed(6), dtype=torch.float64)
        with torch.no_grad():
            diff = float((prune_to_depth(model, model.depth)(x)[0] - model(x)[0]).abs().max())
        deep = np.mean([r.metrics["total"]["accuracy"] for r in desk_runs["lam"][0.2]])
        shallow = np.mean([r.metrics["total"]["accuracy"] for r in desk_runs["depth1"]])
        c.detail = f"logit diff {diff:.1e}; 1-layer {shallow:.3f} vs 2-layer {deep:.3f}"
        assert diff < 1e-9
        assert shallow < deep


@pytest.mark.slow
def test_criterion_7_inference_purity(desk_runs, criterion, monkeypatch):
    with criterion(7, "no fixation reads while evaluating FAX checkpoints") as c:
        raw_reads = []
        real = harness.load_fixation_map
        monkeypatch.setattr(harness, "load_fixation_map", lambda p: raw_reads.append(p) or real(p))
        store = AuditedStore(desk_runs["store"].root)
        checked = 0
        for lam in (0.2, 1.0):
            for seed in SEEDS:
                run = desk_runs["dir"] / "sweep" / f"lam{lam:g}" / f"seed{seed}"
                test = Manifest.read(run / "splits" / "test.jsonl")
                metrics = harness.evaluate(run / "checkpoint.npz", test, store)
                assert metrics == json.loads((run / "metrics.json").read_text())["metrics"]
                checked += 1
        # a training run does read fixations, so the counters are live
        assert desk_runs["store"].count("train", "fixation") > 0
        c.detail = f"{checked} checkpoints, {store.count('evaluate', 'frame')} frames, {len(raw_reads)} fixation reads"
        assert store.count("evaluate", "fixation") == 0
        assert not raw_reads


def test_criterion_8_reproducibility(desk_root, tmp_path, criterion):
    with criterion(8, "deterministic train runs are byte-identical") as c:
        argv = ["train", "--config", str(DESK_CONFIG), "--root", str(desk_root), "--set", "seeds=[0]",
                "--set", "loss=fax", "--set", "lam=0.2", "--set", "max_epochs=10", "--set", "patience=10"]
        assert main([*argv, "--run-dir", str(tmp_path / "a")]) == 0
        assert main([*argv, "--run-dir", str(tmp_path / "b")]) == 0
        names = ("metrics.json", "run_record.json", "steps.jsonl")
        same = [(tmp_path / "a" / "seed0" / n).read_bytes() == (tmp_path / "b" / "seed0" / n).read_bytes()
                for n in names]
        c.detail = ", ".join(f"{n} {'identical' if s else 'DIFFERENT'}" for n, s in zip(names, same))
        assert all(same)
