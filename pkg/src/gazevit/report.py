"""Static figures and the delimited data behind them."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import read_tsv, write_tsv  # noqa: E402

NO_RUNS_BANNER = "NO RUNS: nothing to report"

ACCURACY_COLUMNS = ("model", "seed", "lam", "depth", "total", "high", "low", "iou")
SIMILARITY_COLUMNS = ("model", "seed", "layer", "similarity")


def accuracy_rows(records):
    return [
        {"model": r.model, "seed": r.seed, "lam": r.lam, "depth": r.depth,
         "total": r.metrics["total"]["accuracy"], "high": r.metrics["high"]["accuracy"],
         "low": r.metrics["low"]["accuracy"], "iou": r.alignment.get("iou")}
        for r in records
    ]


def similarity_rows(records):
    return [
        {"model": r.model, "seed": r.seed, "layer": l + 1, "similarity": v}
        for r in records
        for l, v in enumerate(r.alignment.get("similarity", []))
    ]


def _models(records):
    seen = []
    for r in records:
        if r.model not in seen:
            seen.append(r.model)
    return seen


def _accuracy_boxplot(records, path):
    models = _models(records)
    fig, ax = plt.subplots(figsize=(1.6 * len(models) + 2, 3.5))
    data = [[r.metrics["total"]["accuracy"] for r in records if r.model == m] for m in models]
    ax.boxplot(data)
    ax.set_xticks(range(1, len(models) + 1), models, rotation=30, ha="right")
    ax.set_ylabel("test accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _similarity_curves(records, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for m in _models(records):
        curves = [r.alignment["similarity"] for r in records if r.model == m and r.alignment.get("similarity")]
        if curves:
            mean = np.mean(curves, axis=0)
            ax.plot(np.arange(1, mean.size + 1), mean, marker="o", label=m)
    ax.set_xlabel("layer")
    ax.set_ylabel("attention . fixation")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _attention_grid(records, path):
    """One column per model, one row per layer; each cell is the head-mean test attention."""
    models = [m for m in _models(records) if any(r.model == m and r.alignment.get("mean_attention") for r in records)]
    if not models:
        return None
    depth = max(np.asarray(r.alignment["mean_attention"]).shape[0] for r in records if r.alignment.get("mean_attention"))
    fig, axes = plt.subplots(depth, len(models), figsize=(2 * len(models), 2 * depth), squeeze=False)
    for j, m in enumerate(models):
        maps = [np.asarray(r.alignment["mean_attention"]) for r in records if r.model == m and r.alignment.get("mean_attention")]
        mean = np.mean(maps, axis=0)  # (L, A, N)
        side = int(round(np.sqrt(mean.shape[-1])))
        for l in range(depth):
            ax = axes[l, j]
            ax.axis("off")
            if l < mean.shape[0]:
                ax.imshow(mean[l].mean(0).reshape(side, side), cmap="viridis")
                ax.set_title(f"{m} L{l + 1}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def render_report(records, out_dir):
    """Write figures, CSV/TSV data and ``report.md``; returns the produced paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    produced = []
    if not records:
        (out_dir / "report.md").write_text(f"# Report\n\n**{NO_RUNS_BANNER}**\n")
        return [out_dir / "report.md"]

    produced.append(write_tsv(out_dir / "accuracy.tsv", accuracy_rows(records), ACCURACY_COLUMNS))
    produced.append(write_tsv(out_dir / "similarity.tsv", similarity_rows(records), SIMILARITY_COLUMNS))
    _accuracy_boxplot(records, out_dir / "accuracy_boxplot.png")
    produced.append(out_dir / "accuracy_boxplot.png")
    _similarity_curves(records, out_dir / "similarity_vs_layer.png")
    produced.append(out_dir / "similarity_vs_layer.png")
    grid = _attention_grid(records, out_dir / "attention_grid.png")
    if grid:
        produced.append(grid)
        means = {f"{i}": np.asarray(r.alignment["mean_attention"]) for i, r in enumerate(records)
                 if r.alignment.get("mean_attention")}
        np.savez(out_dir / "attention_grid_data.npz", **means)
        produced.append(out_dir / "attention_grid_data.npz")

    lines = ["# Report", "", f"{len(records)} runs over {len(_models(records))} models.", "",
             "| model | runs | total | high | low | IoU |", "|---|---|---|---|---|---|"]
    for m in _models(records):
        rows = [r for r in accuracy_rows(records) if r["model"] == m]

        def fmt(key):
            vals = [r[key] for r in rows if r[key] is not None]
            return f"{np.mean(vals):.3f} ± {np.std(vals):.3f}" if vals else "n/a"

        lines.append(f"| {m} | {len(rows)} | {fmt('total')} | {fmt('high')} | {fmt('low')} | {fmt('iou')} |")
    (out_dir / "report.md").write_text("\n".join(lines) + "\n")
    produced.append(out_dir / "report.md")
    return produced


def read_report_data(out_dir):
    out_dir = Path(out_dir)
    return read_tsv(out_dir / "accuracy.tsv"), read_tsv(out_dir / "similarity.tsv")
