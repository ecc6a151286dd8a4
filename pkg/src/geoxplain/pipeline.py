"""Stage orchestration: extract, evaluate, sweep and train over a shared run directory."""

from __future__ import annotations

import copy
import csv
import datetime as dt
import hashlib
import itertools
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .attribution import compute_attribution, threshold_top_p
from .classifier import build_classifier, predict_top1
from .config import as_list, config_hash, output_root, run_dir, set_dotted, validate_config
from .errors import (
    ConceptsUnsupported,
    ConfigError,
    EmptyResults,
    FatalBackendError,
    GeoxplainError,
    GridTooLarge,
    MissingArtifacts,
    MissingFile,
    SchemaError,
)
from .faithfulness import FaithfulnessConfig, FaithfulnessResult, aggregate, evaluate_image
from .ingest import AugmentConfig, PreprocessConfig, load_image, load_manifest, preprocess, save_image
from .segmentation import build_segmenter, load_concepts, segment_image, segment_set_to_dict
from .selection import CropBox, SelectionConfig, run_selection
from .training import TrainConfig, evaluate_accuracy, save_toy_classifier, train_classifier

log = logging.getLogger(__name__)

SWEEP_KEYS = {
    "p": "attribution.p",
    "s_min": "selection.s_min",
    "tau": "selection.iou_threshold",
    "iou_threshold": "selection.iou_threshold",
    "kappa": "selection.containment_threshold",
    "containment_threshold": "selection.containment_threshold",
    "rho": "selection.area_ratio_gate",
    "area_ratio_gate": "selection.area_ratio_gate",
    "pad_fraction": "selection.pad_fraction",
}


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def safe_name(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", s)


def pair_name(method: str, backend: str) -> str:
    return f"{method}__{backend}"


def method_backend_pairs(cfg: dict) -> list[tuple[str, str]]:
    return [(m, b) for m in as_list(cfg["attribution"]["method"]) for b in as_list(cfg["segmentation"]["backend"])]


def write_jsonl(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        row = {"time": self.formatTime(record), "level": record.levelname, "msg": record.getMessage()}
        for key in ("stage", "image_id", "elapsed_ms", "pair"):
            if hasattr(record, key):
                row[key] = getattr(record, key)
        return json.dumps(row)


@contextmanager
def _run_log(rdir: Path):
    handler = logging.FileHandler(rdir / "log.jsonl")
    handler.setFormatter(_JsonFormatter())
    pkg = logging.getLogger("geoxplain")
    pkg.addHandler(handler)
    try:
        yield
    finally:
        pkg.removeHandler(handler)
        handler.close()


def _load_manifest(cfg: dict):
    path = cfg["ingest"]["manifest"]
    if not path:
        raise ConfigError("ingest.manifest is not set")
    try:
        return load_manifest(path)
    except (MissingFile, SchemaError) as exc:
        raise ConfigError(f"manifest unusable: {exc}") from exc


def _eval_records(cfg: dict, manifest):
    records = manifest.split("eval")
    limit = cfg["run"]["limit"]
    return records if limit is None else records[: int(limit)]


def _raw_config(cfg: dict) -> PreprocessConfig:
    pre = PreprocessConfig.from_config(cfg["ingest"])
    return PreprocessConfig(pre.side, "raw_0_1", pre.mean, pre.std)


def _update_run_manifest(rdir: Path, cfg: dict, stage: str, info: dict) -> dict:
    path = rdir / "run_manifest.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data.update({"config_hash": config_hash(cfg), "tool_version": __version__})
    data.setdefault("stages", {})[stage] = info
    missing = [p for st in data["stages"].values() for p in st.get("artifacts", []) if not (rdir / p).exists()]
    if missing:
        raise MissingArtifacts(f"artifacts missing at close-out: {missing[:5]}")
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return data


def _prepare_run_dir(cfg: dict) -> Path:
    rdir = run_dir(cfg)
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    return rdir


@contextmanager
def _model_guard(model):
    if model.thread_safe:
        yield
    else:
        with model.lock:
            yield


# -- extract --------------------------------------------------------------------


def cmd_extract(cfg: dict, workers: int | None = None) -> dict:
    """Attribution, saliency, segments and ranked crops for every eval image."""
    validate_config(cfg)
    manifest = _load_manifest(cfg)
    model = build_classifier(cfg, manifest.num_classes)
    rdir = _prepare_run_dir(cfg)
    records = _eval_records(cfg, manifest)
    raw_cfg = _raw_config(cfg)
    sel_cfg = SelectionConfig.from_config(cfg["selection"])
    seg_cfg = cfg["segmentation"]
    p = float(cfg["attribution"]["p"])
    pairs = method_backend_pairs(cfg)
    segmenters = {b: build_segmenter(b, seg_cfg) for _, b in pairs}
    concepts = load_concepts(seg_cfg["concepts_file"]) if seg_cfg["concepts_file"] else None
    for name, seg in segmenters.items():
        if concepts and not getattr(seg, "supports_concepts", False):
            raise ConfigError(f"backend {name!r} does not accept concepts (segmentation.concepts_file is set)")
    export = bool(cfg["selection"]["export_crops"])
    started = _now()

    for m, b in pairs:
        pdir = rdir / "pairs" / pair_name(m, b)
        for sub in ("maps", "crops"):
            (pdir / sub).mkdir(parents=True, exist_ok=True)
    for b in segmenters:
        (rdir / "segments" / b).mkdir(parents=True, exist_ok=True)

    def process(rec):
        t0 = time.perf_counter()
        name = safe_name(rec.id)
        rows = {}
        try:
            x = preprocess(load_image(manifest.resolve(rec)), raw_cfg)
            with _model_guard(model):
                pred, prob = predict_top1(model, x)
            segsets = {}
            for b, seg in segmenters.items():
                segsets[b] = segment_image(x, seg, concepts, rec.id, int(seg_cfg["min_area"]))
                (rdir / "segments" / b / f"{name}.json").write_text(json.dumps(segment_set_to_dict(segsets[b])))
            for m, b in pairs:
                pdir = rdir / "pairs" / pair_name(m, b)
                with _model_guard(model):
                    amap = compute_attribution(model, x, pred, m, cfg["attribution"])
                saliency = threshold_top_p(amap, p)
                np.savez_compressed(pdir / "maps" / f"{name}.npz", attribution=amap.values.astype(np.float32), saliency=saliency.bits)
                (pdir / "maps" / f"{name}.json").write_text(
                    json.dumps({"image_id": rec.id, "method": m, "target_class": pred, "percentile_p": p}, sort_keys=True)
                )
                sel = run_selection(x, amap, saliency, segsets[b], sel_cfg)
                boxes = []
                for rank, (box, sc) in enumerate(zip(sel.boxes, sel.scored)):
                    boxes.append(
                        {
                            "rank": rank,
                            **box.as_dict(),
                            "overlap_factor": sc.overlap_factor,
                            "mean_importance": sc.mean_importance,
                            "central_importance": sc.central_importance,
                        }
                    )
                    if export:
                        crop = x.values[box.row0 : box.row1 + 1, box.col0 : box.col1 + 1]
                        save_image(crop, pdir / "crops" / f"{name}_{rank}.png")
                rows[(m, b)] = {
                    "image_id": rec.id,
                    "label": rec.label,
                    "pred": pred,
                    "pred_prob": prob,
                    "method": m,
                    "backend": b,
                    "status": "ok",
                    "n_segments": len(segsets[b].segments),
                    "segment_coverage": segsets[b].coverage,
                    "saliency_coverage": float(saliency.bits.mean()),
                    "boxes": boxes,
                }
        except GeoxplainError as exc:
            log.warning("image %s failed: %s", rec.id, exc, extra={"stage": "extract", "image_id": rec.id})
            rows = {
                (m, b): {"image_id": rec.id, "label": rec.label, "method": m, "backend": b, "status": "failed", "error": str(exc), "boxes": []}
                for m, b in pairs
            }
        elapsed = round((time.perf_counter() - t0) * 1000, 2)
        log.info("extracted %s", rec.id, extra={"stage": "extract", "image_id": rec.id, "elapsed_ms": elapsed})
        return rows

    n_workers = max(1, int(workers or cfg["run"]["workers"]))
    with _run_log(rdir):
        log.info("extract: %d images, pairs %s", len(records), pairs, extra={"stage": "extract"})
        if n_workers > 1:
            with ThreadPoolExecutor(n_workers) as pool:
                per_image = list(pool.map(process, records))
        else:
            per_image = [process(r) for r in records]

    artifacts, counts = [], {}
    for m, b in pairs:
        rel = Path("pairs") / pair_name(m, b) / "crops.jsonl"
        rows = [img[(m, b)] for img in per_image]
        write_jsonl(rdir / rel, rows)
        artifacts.append(str(rel))
        counts[pair_name(m, b)] = {
            "images": len(rows),
            "failed": sum(r["status"] == "failed" for r in rows),
            "segments": sum(r.get("n_segments", 0) for r in rows),
            "crops": sum(len(r["boxes"]) for r in rows),
            "no_crops": sum(r["status"] == "ok" and not r["boxes"] for r in rows),
        }
    info = {"started": started, "finished": _now(), "artifacts": artifacts, "counts": counts}
    manifest_data = _update_run_manifest(rdir, cfg, "extract", info)
    if records and all(c["failed"] == c["images"] for c in counts.values()):
        raise FatalBackendError(f"extraction failed for every image; see {rdir / 'log.jsonl'}")
    return {"run_dir": str(rdir), **manifest_data}


# -- evaluate -------------------------------------------------------------------


def summarize(rows: list[dict], crop_rows: list[dict], method: str, backend: str, chash: str) -> dict:
    """Summary entry for one (method, backend) pair from raw result rows."""
    fields = FaithfulnessResult.__dataclass_fields__
    results = [FaithfulnessResult(**{k: r[k] for k in fields}) for r in rows]
    try:
        conditions = aggregate(results).to_dict()
    except EmptyResults:
        conditions = {}
    excluded = {
        "no_crops": sum(r["status"] == "ok" and not r["boxes"] for r in crop_rows),
        "failed": sum(r["status"] == "failed" for r in crop_rows),
    }
    return {
        "attribution_method": method,
        "segmentation_backend": backend,
        "config_hash": chash,
        "n_records": len(crop_rows),
        "excluded": excluded,
        "conditions": conditions,
    }


def cmd_evaluate(cfg: dict, workers: int | None = None) -> dict:
    """Guided and random deletion/insertion over persisted crops; writes results and summary."""
    validate_config(cfg)
    rdir = run_dir(cfg)
    pairs = method_backend_pairs(cfg)
    for m, b in pairs:
        if not (rdir / "pairs" / pair_name(m, b) / "crops.jsonl").exists():
            raise MissingArtifacts(f"no extract artifacts for {pair_name(m, b)} in {rdir}; run extract first")
    manifest = _load_manifest(cfg)
    model = build_classifier(cfg, manifest.num_classes)
    by_id = {r.id: r for r in manifest.records}
    raw_cfg = _raw_config(cfg)
    fcfg = FaithfulnessConfig.from_config(cfg["faithfulness"])
    seed = int(cfg["run"]["seed"])
    chash = config_hash(cfg)
    started = _now()

    def evaluate_row(row):
        if row["status"] != "ok" or not row["boxes"]:
            return []
        t0 = time.perf_counter()
        rec = by_id[row["image_id"]]
        x = preprocess(load_image(manifest.resolve(rec)), raw_cfg)
        boxes = [CropBox(b["row0"], b["col0"], b["row1"], b["col1"], b["source_segment_id"], b["score"]) for b in row["boxes"]]
        with _model_guard(model):
            res = evaluate_image(model, x, boxes, fcfg, rec.id, rec.label, seed)
        log.info(
            "evaluated %s",
            rec.id,
            extra={"stage": "evaluate", "image_id": rec.id, "elapsed_ms": round((time.perf_counter() - t0) * 1000, 2)},
        )
        return [{**r.to_dict(), "method": row["method"], "backend": row["backend"]} for r in res]

    n_workers = max(1, int(workers or cfg["run"]["workers"]))
    entries, artifacts = [], []
    with _run_log(rdir):
        for m, b in pairs:
            pdir = rdir / "pairs" / pair_name(m, b)
            crop_rows = read_jsonl(pdir / "crops.jsonl")
            if n_workers > 1:
                with ThreadPoolExecutor(n_workers) as pool:
                    chunks = list(pool.map(evaluate_row, crop_rows))
            else:
                chunks = [evaluate_row(r) for r in crop_rows]
            rows = [r for chunk in chunks for r in chunk]
            write_jsonl(pdir / "results.jsonl", rows)
            entry = summarize(rows, crop_rows, m, b, chash)
            (pdir / "summary.json").write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n")
            entries.append(entry)
            artifacts += [str(Path("pairs") / pair_name(m, b) / f) for f in ("results.jsonl", "summary.json")]
    summary = {"config_hash": chash, "repeats": fcfg.repeats, "fill": str(fcfg.fill), "entries": entries}
    (rdir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    artifacts.append("summary.json")
    _update_run_manifest(rdir, cfg, "evaluate", {"started": started, "finished": _now(), "artifacts": artifacts})
    return summary


# -- sweep ----------------------------------------------------------------------


def expand_grid(grid: dict, max_points: int) -> list[dict]:
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("sweep grid must be a non-empty mapping of parameter -> list of values")
    keys = []
    for key in grid:
        if key not in SWEEP_KEYS and key not in SWEEP_KEYS.values():
            raise ConfigError(f"parameter {key!r} cannot be swept; choose from {sorted(SWEEP_KEYS)}")
        keys.append(key)
    values = [as_list(grid[k]) for k in keys]
    n = int(np.prod([len(v) for v in values]))
    if n > max_points:
        raise GridTooLarge(f"grid has {n} points, cap is {max_points} (sweep.max_points)")
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def cmd_sweep(cfg: dict, grid: dict, workers: int | None = None) -> dict:
    """One extract + evaluate per grid point, tabulated by parameter values."""
    points = expand_grid(grid, int(cfg["sweep"]["max_points"]))
    rows = []
    for point in points:
        sub = copy.deepcopy(cfg)
        for key, value in point.items():
            set_dotted(sub, SWEEP_KEYS.get(key, key), value)
        validate_config(sub)
        cmd_extract(sub, workers)
        summary = cmd_evaluate(sub, workers)
        rdir = run_dir(sub)
        for entry in summary["entries"]:
            crop_rows = read_jsonl(rdir / "pairs" / pair_name(entry["attribution_method"], entry["segmentation_backend"]) / "crops.jsonl")
            ok = [r for r in crop_rows if r["status"] == "ok"]
            guided = entry["conditions"].get("guided", {})
            rnd = entry["conditions"].get("random", {})
            rows.append(
                {
                    **point,
                    "method": entry["attribution_method"],
                    "backend": entry["segmentation_backend"],
                    "coverage": float(np.mean([r["saliency_coverage"] for r in ok])) if ok else None,
                    "crop_coverage": guided.get("mean_coverage"),
                    "deletion_drop": guided.get("deletion_drop"),
                    "insertion_accuracy": guided.get("accuracy_insertion"),
                    "random_deletion_drop": rnd.get("deletion_drop"),
                    "random_insertion_accuracy": rnd.get("accuracy_insertion"),
                    "run_dir": str(rdir),
                }
            )
    key = hashlib.sha256((config_hash(cfg) + json.dumps(grid, sort_keys=True)).encode()).hexdigest()[:12]
    sdir = output_root(cfg) / f"sweep-{key}"
    sdir.mkdir(parents=True, exist_ok=True)
    (sdir / "sweep.json").write_text(json.dumps({"grid": grid, "rows": rows}, indent=2, sort_keys=True) + "\n")
    if rows:
        with open(sdir / "sweep.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return {"sweep_dir": str(sdir), "rows": rows}


# -- train ----------------------------------------------------------------------


def cmd_train(cfg: dict) -> dict:
    """Fit the toy CNN on the train split and write weights plus a per-epoch report."""
    validate_config(cfg)
    weights = cfg["classifier"]["weights"]
    if not weights:
        raise ConfigError("classifier.weights must name the output file for train")
    manifest = _load_manifest(cfg)
    pre = PreprocessConfig.from_config(cfg["ingest"])
    tcfg = TrainConfig.from_config(cfg["classifier"]["train"])
    model, report = train_classifier(
        manifest, tcfg, pre, AugmentConfig.from_config(cfg["ingest"]["augment"]), cfg["classifier"]["toy_channels"]
    )
    Path(weights).parent.mkdir(parents=True, exist_ok=True)
    save_toy_classifier(model, weights)
    report_path = Path(str(weights) + ".train_report.jsonl")
    report.write(report_path)
    out = {"weights": str(weights), "report": str(report_path), **{k: v for k, v in asdict(report).items() if k != "epochs"}}
    if manifest.split("eval"):
        out["eval_accuracy"] = evaluate_accuracy(model, manifest, "eval", pre)
    return out
