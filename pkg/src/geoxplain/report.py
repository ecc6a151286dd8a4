"""Static comparison plots and a crop gallery built only from persisted results."""

from __future__ import annotations

import json
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import yaml  # noqa: E402

from .errors import MissingResults  # noqa: E402


def _label(entry: dict) -> str:
    return f"{entry['attribution_method']} / {entry['segmentation_backend']}"


def plot_comparison(entries: list[dict], path: Path) -> dict:
    """Grouped bars, one group per (method, backend). Returns the plotted heights read back from the axes."""
    fig, axes = plt.subplots(1, 2, figsize=(max(6, 2.5 * len(entries) + 2), 4), sharey=True)
    x = np.arange(len(entries))
    width = 0.38
    plotted = {}
    for ax, test in zip(axes, ("accuracy_deletion", "accuracy_insertion")):
        for j, cond in enumerate(("guided", "random")):
            heights = [e["conditions"].get(cond, {}).get(test, np.nan) for e in entries]
            bars = ax.bar(x + (j - 0.5) * width, heights, width, label=cond)
            for e, bar in zip(entries, bars):
                plotted.setdefault(_label(e), {})[f"{cond}.{test}"] = float(bar.get_height())
        ax.set_xticks(x)
        ax.set_xticklabels([_label(e) for e in entries], rotation=20, ha="right")
        ax.set_title("Deletion" if test == "accuracy_deletion" else "Insertion")
        ax.set_ylim(0, 1.15)
        ax.set_ylabel("top-1 accuracy")
        ax.legend(loc="upper center", ncol=2, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return plotted


def write_gallery(run_dir: Path, entries: list[dict], path: Path, top_k: int, max_images: int) -> int:
    lines = ["# Extracted object-like elements", ""]
    n = 0
    for e in entries:
        pair = f"{e['attribution_method']}__{e['segmentation_backend']}"
        crops_path = run_dir / "pairs" / pair / "crops.jsonl"
        if not crops_path.exists():
            continue
        lines += [f"## {_label(e)}", ""]
        shown = 0
        for line in crops_path.read_text().splitlines():
            row = json.loads(line)
            if not row["boxes"] or shown >= max_images:
                continue
            shown += 1
            name = re.sub(r"[^A-Za-z0-9._-]", "_", row["image_id"])
            lines.append(f"### {row['image_id']} (label {row['label']}, predicted {row['pred']})")
            lines.append("")
            lines.append("| rank | crop | box (r0, c0, r1, c1) | overlap | mean | central | score |")
            lines.append("|---|---|---|---|---|---|---|")
            for b in row["boxes"][:top_k]:
                png = Path("..") / "pairs" / pair / "crops" / f"{name}_{b['rank']}.png"
                img = f"![]({png.as_posix()})" if (path.parent / png).exists() else ""
                lines.append(
                    f"| {b['rank']} | {img} | ({b['row0']}, {b['col0']}, {b['row1']}, {b['col1']}) "
                    f"| {b['overlap_factor']:.3f} | {b['mean_importance']:.3f} "
                    f"| {b['central_importance']:.3f} | {b['score']:.3f} |"
                )
            lines.append("")
        n += shown
    path.write_text("\n".join(lines) + "\n")
    return n


def cmd_report(run_dir: str | Path) -> dict:
    run_dir = Path(run_dir)
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        raise MissingResults(f"no summary.json in {run_dir}; run evaluate first")
    summary = json.loads(summary_path.read_text())
    cfg_path = run_dir / "config.yaml"
    rcfg = (yaml.safe_load(cfg_path.read_text()) or {}).get("report", {}) if cfg_path.exists() else {}
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    entries = summary["entries"]
    plotted = plot_comparison(entries, out / "comparison.png")
    (out / "plot_values.json").write_text(json.dumps(plotted, indent=2, sort_keys=True) + "\n")
    n = write_gallery(run_dir, entries, out / "gallery.md", int(rcfg.get("gallery_top_k", 5)), int(rcfg.get("gallery_max_images", 50)))
    return {"plot": str(out / "comparison.png"), "values": str(out / "plot_values.json"), "gallery": str(out / "gallery.md"), "gallery_images": n}
