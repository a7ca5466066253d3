"""Preset × concept × seed ablation grids.

A grid directory holds the frozen suite, per-concept reference statistics,
one run directory per cell and the aggregated tables. Cells are keyed by a
content hash; a cell whose ``cell.json`` carries the current key and status
``ok`` is skipped on rerun.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import PRESET_LABELS, ConceptSpec, ExperimentConfig
from .engine import NumericAbort, run_inversion, save_run
from .metrics import MetricReport, evaluate_run
from .metrics.evaluate import COLUMNS
from .modelzoo import load_weights, save_weights
from .objective import ReferenceStats
from .pipeline import build_suite, capture_reference_stats, reference_set
from .statcapture import load_stats, save_stats

log = logging.getLogger(__name__)

HEADERS = {
    "top1": "Top-1",
    "top5": "Top-5",
    "fid_inf": "FID_inf",
    "is": "IS",
    "fid": "FID",
    "lpips": "LPIPS",
    "clip_score": "CLIPScore",
    "bleu": "BLEU",
    "meteor": "METEOR",
    "rouge_l": "ROUGE-L",
}


@dataclass
class AblationCell:
    preset: str
    concept: ConceptSpec
    seed: int
    run_dir: Path
    key: str
    status: str = "pending"

    @property
    def marker(self):
        return self.run_dir / "cell.json"


@dataclass
class GridResult:
    cells: list
    leaderboard: list
    ran: int
    skipped: int

    @property
    def succeeded(self):
        return sum(c.status == "ok" for c in self.cells)

    @property
    def exit_code(self):
        return 0 if self.succeeded else 5


def _sha(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def cell_key(exp: ExperimentConfig, preset, concept, seed) -> str:
    """Hash of the resolved config fragment, the seed and the code version."""
    inv = exp.inversion_config((*exp.preset, preset), concept, seed)
    fragment = {
        "inversion": inv.echo(),
        "suite": asdict(exp.suite),
        "data": asdict(exp.data),
        "stats": asdict(exp.stats),
        "metrics": asdict(exp.metrics),
    }
    return _sha({"fragment": fragment, "seed": seed, "code_version": __version__})


def plan_cells(exp: ExperimentConfig, grid_dir) -> list[AblationCell]:
    if exp.ablation is None:
        raise ValueError("config has no ablation block")
    grid_dir = Path(grid_dir)
    cells = []
    for p in exp.ablation.presets:
        for c in exp.ablation.concepts:
            for s in exp.ablation.seeds:
                run_dir = grid_dir / "cells" / _safe(p) / c.key / f"seed_{s}"
                cells.append(AblationCell(p, c, s, run_dir, cell_key(exp, p, c, s)))
    return cells


def _safe(name):
    return name.replace("+", "plus_").replace("/", "_")


def cell_done(cell: AblationCell) -> bool:
    try:
        doc = json.loads(cell.marker.read_text())
    except (OSError, json.JSONDecodeError):
        return False
    return doc.get("key") == cell.key and doc.get("status") == "ok"


def _stats_paths(grid_dir, concept):
    root = Path(grid_dir) / "stats"
    return root / f"encoder_{concept.key}.json", root / "bn.json"


def prepare(exp: ExperimentConfig, grid_dir):
    """Write the shared suite and reference statistics once per grid."""
    grid_dir = Path(grid_dir)
    (grid_dir / "stats").mkdir(parents=True, exist_ok=True)
    suite_path = grid_dir / "suite.bin"
    if suite_path.exists():
        suite = load_weights(suite_path)
    else:
        suite = build_suite(exp.suite, exp.data)
        save_weights(suite, suite_path)
    for concept in exp.ablation.concepts:
        enc_path, bn_path = _stats_paths(grid_dir, concept)
        if enc_path.exists() and (bn_path.exists() or suite.verifier is None):
            continue
        inv = exp.inversion_config((*exp.preset, exp.ablation.presets[0]), concept)
        label = concept.label if concept.label is not None else exp.stats.label
        stats = capture_reference_stats(exp, suite, inv.mode, label, inv.layers)
        save_stats(stats.encoder, enc_path)
        if stats.bn is not None:
            save_stats(stats.bn, bn_path)
    return suite


def _run_cell(args):
    exp, grid_dir, cell = args
    torch.set_num_threads(1)
    cell.run_dir.mkdir(parents=True, exist_ok=True)
    marker = {"key": cell.key, "preset": cell.preset, "concept": cell.concept.key, "seed": cell.seed,
              "code_version": __version__}
    try:
        suite = load_weights(Path(grid_dir) / "suite.bin")
        enc_path, bn_path = _stats_paths(grid_dir, cell.concept)
        bn = load_stats(bn_path) if bn_path.exists() else None
        stats = ReferenceStats(load_stats(enc_path), bn)
        inv = exp.inversion_config((*exp.preset, cell.preset), cell.concept, cell.seed)
        try:
            result = run_inversion(inv, suite, stats, cell.seed)
            status = "ok"
        except NumericAbort as e:
            result, status = e.result, "aborted"
            marker["error"] = str(e)
        save_run(result, cell.run_dir, {"cell_key": cell.key, "preset": cell.preset})
        if status == "ok":
            evaluate_run(result, suite, reference_set(exp, suite), exp.metrics, cell.run_dir)
    except Exception as e:  # recorded per cell, the grid carries on
        status = "failed"
        marker["error"] = f"{type(e).__name__}: {e}"
        log.debug("cell failed\n%s", traceback.format_exc())
    marker["status"] = status
    cell.marker.write_text(json.dumps(marker, indent=2, sort_keys=True) + "\n")
    return status


def run_grid(exp: ExperimentConfig, grid_dir, workers: int = 1, max_cells: int | None = None) -> GridResult:
    """Execute (or resume) the grid, then aggregate.

    ``max_cells`` bounds the number of cells computed in this call, which
    is how an interrupted run is emulated.
    """
    grid_dir = Path(grid_dir)
    prepare(exp, grid_dir)
    cells = plan_cells(exp, grid_dir)
    pending = []
    for c in cells:
        if cell_done(c):
            c.status = "ok"
        else:
            pending.append(c)
    skipped = len(cells) - len(pending)
    todo = pending if max_cells is None else pending[:max_cells]
    log.info("grid: %d cells, %d done, %d to run", len(cells), skipped, len(todo))
    if todo:
        # a pool even for one worker, so every cell runs in the same kind of process
        with ProcessPoolExecutor(max_workers=max(1, workers)) as pool:
            for c, status in zip(todo, pool.map(_run_cell, [(exp, grid_dir, c) for c in todo])):
                c.status = status
                log.info("cell %s/%s/seed_%d: %s", c.preset, c.concept.key, c.seed, status)
    for c in pending[len(todo):]:
        c.status = "pending"
    rows = aggregate(exp, grid_dir, cells)
    return GridResult(cells, rows, len(todo), skipped)


# ---------------------------------------------------------------------------
# aggregation


def _read_metrics(cell):
    path = cell.run_dir / "metrics.json"
    if cell.status != "ok" or not path.exists():
        return None
    doc = json.loads(path.read_text())
    doc.pop("meta", None)
    return doc


def _mean(docs):
    keys = sorted({k for d in docs for k in d})
    return {k: float(np.mean([d[k] for d in docs if k in d])) for k in keys}


def metric_columns(keys):
    cols = []
    for col in COLUMNS:
        if col == "is_inf":
            cols.extend(sorted(k for k in keys if k.startswith("is_inf[")))
        elif col in keys:
            cols.append(col)
    cols.extend(k for k in ("bleu", "meteor", "rouge_l") if k in keys)
    return cols


def header(col):
    if col.startswith("is_inf["):
        return f"IS_inf[{col[7:-1]}]"
    return HEADERS[col]


def _fmt(v):
    return "" if v is None else repr(float(v))


def aggregate(exp: ExperimentConfig, grid_dir, cells) -> list[dict]:
    """Mean of per-cell metrics.json values per preset, and per preset × concept."""
    grid_dir = Path(grid_dir)
    by_preset, by_concept = {}, {}
    for c in cells:
        m = _read_metrics(c)
        if m is not None:
            by_preset.setdefault(c.preset, []).append(m)
            by_concept.setdefault((c.preset, c.concept.key), []).append(m)
    keys = {k for docs in by_preset.values() for d in docs for k in d}
    cols = metric_columns(keys)

    rows = []
    for p in exp.ablation.presets:
        docs = by_preset.get(p, [])
        n_total = sum(c.preset == p for c in cells)
        means = _mean(docs) if docs else {}
        rows.append({"preset": p, "n_ok": len(docs), "n_cells": n_total, **means})
        out = grid_dir / "presets" / _safe(p)
        out.mkdir(parents=True, exist_ok=True)
        MetricReport(means, {"preset": p, "n_ok": len(docs), "n_cells": n_total,
                             "aggregation": "mean of cell metrics.json"}).write(out / "metrics.json")

    with open(grid_dir / "leaderboard.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["Optimization Objective", *(header(c) for c in cols), "Runs"])
        for r in rows:
            w.writerow([PRESET_LABELS.get(r["preset"], r["preset"]), *(_fmt(r.get(c)) for c in cols),
                        f"{r['n_ok']}/{r['n_cells']}"])

    with open(grid_dir / "concept_summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["preset", "concept", "target", "target_len", "n_ok", *cols])
        for p in exp.ablation.presets:
            for c in exp.ablation.concepts:
                docs = by_concept.get((p, c.key), [])
                means = _mean(docs) if docs else {}
                w.writerow([p, c.name, c.target_text, len(c.target_text.split()), len(docs),
                            *(_fmt(means.get(k)) for k in cols)])

    manifest = {
        "code_version": __version__,
        "presets": list(exp.ablation.presets),
        "concepts": [asdict(c) for c in exp.ablation.concepts],
        "seeds": list(exp.ablation.seeds),
        "cells": [{"preset": c.preset, "concept": c.concept.key, "seed": c.seed, "status": c.status,
                   "run_dir": str(c.run_dir.relative_to(grid_dir)), "key": c.key} for c in cells],
    }
    (grid_dir / "grid.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return rows


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
