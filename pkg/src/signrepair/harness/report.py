"""Report emission: metrics.json, metrics.csv, PNG plots and config.lock."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import yaml  # noqa: E402

from .pipeline import ReportBundle  # noqa: E402

CSV_FIELDS = ("variant", "condition", "accuracy", "mean_precision", "support")
VOLATILE_EXTRAS = ("seconds",)  # wall-clock data stays out of metrics.json


def metrics_payload(b: ReportBundle) -> dict:
    """Deterministic bundle content; timing data is written separately."""
    d = b.to_dict()
    d["extras"] = {k: v for k, v in d["extras"].items() if k not in VOLATILE_EXTRAS}
    return d


def csv_rows(bundles: list[ReportBundle]) -> list[dict]:
    rows = []
    for b in bundles:
        for cond, m in b.conditions.items():
            rows.append({"variant": b.variant, "condition": cond, "accuracy": m["accuracy"],
                         "mean_precision": m["mean_precision"], "support": int(np.sum(m["confusion"]))})
    return rows


def write_csv(path: Path, rows: list[dict]) -> None:
    # Python's float repr is the shortest string that parses back to the same double
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{**r, "accuracy": float(r["accuracy"]), "mean_precision": float(r["mean_precision"]),
                 "support": int(r["support"])} for r in csv.DictReader(fh)]


def _prepare_dir(out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_probe"
    probe.write_text("")  # raises on unwritable directories
    probe.unlink()
    return out


def plot_accuracy_bars(b: ReportBundle, path: Path) -> None:
    names = list(b.conditions)
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(names)), 4))
    colors = ["tab:green" if n == "clean" or n.startswith("clean/") else
              "tab:blue" if n.endswith("/repaired") else "tab:red" for n in names]
    ax.bar(range(len(names)), [b.accuracy(n) for n in names], color=colors)
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.set_title(f"{b.name} [{b.variant}]")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_similarity(b: ReportBundle, path: Path) -> None:
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    for key, stats in b.similarity.items():
        left.hist(stats["per_sample"], bins=20, alpha=0.5, label=f"Sim_{key}")
        layers = list(stats["per_layer"])
        right.plot(layers, [stats["per_layer"][k] for k in layers], marker="o", label=f"Sim_{key}")
    left.set_xlabel("mean per-layer cosine similarity")
    left.legend()
    right.set_ylabel("cosine similarity")
    right.tick_params(axis="x", rotation=45)
    right.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_loss_curves(b: ReportBundle, path: Path) -> None:
    curves = {k: v for k, v in b.loss_curves.items() if v}
    fig, axes = plt.subplots(1, max(1, len(curves)), figsize=(4 * max(1, len(curves)), 3.5), squeeze=False)
    for ax, (name, rows) in zip(axes[0], curves.items()):
        xkey = "step" if "step" in rows[0] else "epoch"
        for ykey in [k for k in rows[0] if k not in ("step", "epoch")]:
            ax.plot([r[xkey] for r in rows], [r[ykey] for r in rows], label=ykey)
        ax.set_title(name)
        ax.set_xlabel(xkey)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_report(b: ReportBundle, out_dir: str | Path) -> list[Path]:
    """Write the report files for one bundle and return their paths."""
    out = _prepare_dir(out_dir)
    written = []

    def put(name: str, text: str) -> None:
        (out / name).write_text(text)
        written.append(out / name)

    put("metrics.json", json.dumps(metrics_payload(b), indent=1, sort_keys=True))
    write_csv(out / "metrics.csv", csv_rows([b]))
    written.append(out / "metrics.csv")
    put("config.lock", yaml.safe_dump(b.config, sort_keys=False))
    put("timings.json", json.dumps(b.extras.get("seconds", {}), indent=1))
    marker = out / "PARTIAL"
    if b.partial:
        put("PARTIAL", json.dumps({"partial": True, "failed_stage": b.failed_stage,
                                   "missing_stages": b.missing_stages, "error": b.error}, indent=1))
    elif marker.exists():
        marker.unlink()
    plots = {"accuracy.png": plot_accuracy_bars, "loss_curves.png": plot_loss_curves}
    if b.similarity:
        plots["similarity.png"] = plot_similarity
    for name, fn in plots.items():
        if name == "accuracy.png" and not b.conditions:
            continue
        fn(b, out / name)
        written.append(out / name)
    return written


def ablation_summary(bundles: list[ReportBundle]) -> dict:
    """Headline repair score per variant, grouped by ablation axis."""
    axes: dict[str, list] = {}
    for b in bundles:
        axes.setdefault(b.extras.get("axis", "base"), []).append(
            {"variant": b.variant, "repair_score": b.repair_score, "repaired": b.repaired_accuracies(),
             **{k: b.extras[k] for k in ("pattern_diversity", "levels", "views") if k in b.extras}})
    return axes


def plot_ablations(bundles: list[ReportBundle], path: Path) -> None:
    summary = ablation_summary(bundles)
    base = summary.get("base", [{}])[0].get("repair_score")
    panels = [k for k in ("attention", "diversity", "augmentation", "mask_levels", "views") if k in summary]
    fig, axes = plt.subplots(1, max(1, len(panels)), figsize=(3.2 * max(1, len(panels)), 3.5), squeeze=False)
    for ax, axis in zip(axes[0], panels):
        rows = summary[axis]
        if axis in ("mask_levels", "views"):
            xs = [len(r["levels"]) if axis == "mask_levels" else r["views"] for r in rows]
            ax.plot(xs, [r["repair_score"] for r in rows], marker="o")
            ax.set_xlabel("mask levels used" if axis == "mask_levels" else "views R")
        else:
            ax.bar([0, 1], [base, rows[0]["repair_score"]], color=["tab:blue", "tab:gray"])
            ax.set_xticks([0, 1], ["on", "off"])
        ax.set_title(axis)
        ax.set_ylim(0, 1)
    axes[0][0].set_ylabel("repair score")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_ablation_report(bundles: list[ReportBundle], out_dir: str | Path) -> list[Path]:
    out = _prepare_dir(out_dir)
    (out / "ablations.json").write_text(json.dumps(
        {"summary": ablation_summary(bundles), "bundles": [metrics_payload(b) for b in bundles]},
        indent=1, sort_keys=True))
    write_csv(out / "ablations.csv", csv_rows(bundles))
    plot_ablations(bundles, out / "ablations.png")
    return [out / "ablations.json", out / "ablations.csv", out / "ablations.png"]


def load_ablation_bundles(path: str | Path) -> list[ReportBundle]:
    data = json.loads(Path(path).read_text())
    return [ReportBundle.from_dict(d) for d in data["bundles"]]
