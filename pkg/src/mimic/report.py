"""Static charts and an HTML image index for a finished grid."""

from __future__ import annotations

import html
import json
import logging
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .grid import read_csv  # noqa: E402

log = logging.getLogger(__name__)

BAR_COLOURS = {"top1": "#f5d97a", "clip_score": "#8fb8de"}


def _num(v):
    return None if v in ("", None) else float(v)


def chart_data(summary_rows, preset=None) -> dict:
    """Per-concept and per-target-length top-1 / CLIPScore values for one preset.

    The values are read from concept_summary.csv unchanged.
    """
    presets = list(dict.fromkeys(r["preset"] for r in summary_rows))
    preset = preset or presets[-1]
    rows = [r for r in summary_rows if r["preset"] == preset and int(r["n_ok"]) > 0]
    concepts = {}
    for r in rows:
        concepts.setdefault(r["concept"], []).append(r)
    per_concept = [{"concept": r["concept"] if len(concepts[r["concept"]]) == 1 else f"{r['concept']}: {r['target']}",
                    "top1": _num(r.get("top1")), "clip_score": _num(r.get("clip_score"))}
                   for r in rows]
    per_length = {name: [{"target": r["target"], "target_len": int(r["target_len"]),
                          "top1": _num(r.get("top1")), "clip_score": _num(r.get("clip_score"))}
                         for r in sorted(group, key=lambda r: int(r["target_len"]))]
                  for name, group in concepts.items() if len(group) > 1}
    return {"preset": preset, "per_concept": per_concept, "per_length": per_length}


def _bars(ax, labels, top1, clip, title):
    xs = range(len(labels))
    w = 0.38
    ax.bar([x - w / 2 for x in xs], [v or 0.0 for v in top1], w, label="Top-1", color=BAR_COLOURS["top1"])
    ax.set_ylabel("Top-1 accuracy")
    ax.set_ylim(0, 1)
    ax2 = ax.twinx()
    ax2.bar([x + w / 2 for x in xs], [v or 0.0 for v in clip], w, label="CLIPScore", color=BAR_COLOURS["clip_score"])
    ax2.set_ylabel("CLIPScore")
    ax2.set_ylim(0, 100)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels)
    ax.set_title(title)
    handles = ax.get_legend_handles_labels()[0] + ax2.get_legend_handles_labels()[0]
    ax.legend(handles, ["Top-1", "CLIPScore"], loc="upper right")


def _save(fig, path):
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def write_report(grid_dir, out_dir, preset=None) -> int:
    """Write charts, chart_data.json and index.html; returns an exit code (5 when empty)."""
    grid_dir, out_dir = Path(grid_dir), Path(out_dir)
    summary = grid_dir / "concept_summary.csv"
    if not summary.exists():
        log.error("%s has no concept_summary.csv", grid_dir)
        return 5
    rows = read_csv(summary)
    if not any(int(r["n_ok"]) > 0 for r in rows):
        log.error("grid %s has no finished cells", grid_dir)
        return 5
    out_dir.mkdir(parents=True, exist_ok=True)
    data = chart_data(rows, preset)
    (out_dir / "chart_data.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    pc = data["per_concept"]
    fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(pc)), 3.2))
    _bars(ax, [d["concept"] for d in pc], [d["top1"] for d in pc], [d["clip_score"] for d in pc],
          f"per concept ({data['preset']})")
    fig.tight_layout()
    _save(fig, out_dir / "per_concept.png")
    charts = ["per_concept.png"]
    for name, group in data["per_length"].items():
        fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(group)), 3.2))
        _bars(ax, [f"|y|={d['target_len']}" for d in group], [d["top1"] for d in group],
              [d["clip_score"] for d in group], f"{name} across target lengths")
        fig.tight_layout()
        fname = f"per_length_{name}.png"
        _save(fig, out_dir / fname)
        charts.append(fname)

    (out_dir / "index.html").write_text(_index_html(grid_dir, out_dir, charts))
    return 0


def _index_html(grid_dir, out_dir, charts):
    grid = json.loads((grid_dir / "grid.json").read_text())
    parts = ["<!doctype html><html><head><meta charset='utf-8'><title>grid report</title>",
             "<style>img{image-rendering:pixelated;height:96px;margin:2px}td{vertical-align:top}</style>",
             "</head><body><h1>grid report</h1>"]
    parts += [f"<img src='{c}' style='height:auto'>" for c in charts]
    board = grid_dir / "leaderboard.csv"
    rows = read_csv(board)
    if rows:
        cols = list(rows[0])
        parts.append("<h2>leaderboard</h2><table border='1'><tr>")
        parts += [f"<th>{html.escape(c)}</th>" for c in cols]
        parts.append("</tr>")
        for r in rows:
            parts.append("<tr>" + "".join(f"<td>{html.escape(r[c])}</td>" for c in cols) + "</tr>")
        parts.append("</table>")
    parts.append("<h2>synthesized images</h2><table>")
    for cell in grid["cells"]:
        img = grid_dir / cell["run_dir"] / "final.png"
        label = html.escape(f"{cell['preset']} / {cell['concept']} / seed {cell['seed']} ({cell['status']})")
        src = html.escape(os.path.relpath(img, out_dir)) if img.exists() else ""
        parts.append(f"<tr><td>{label}</td><td>{f'<img src={src!r}>' if src else '-'}</td></tr>")
    parts.append("</table></body></html>\n")
    return "\n".join(parts)
