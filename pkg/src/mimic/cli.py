"""``mimic`` command line.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric abort, 5 empty result.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, build_inversion, parse_config, parse_config_dict
from .data import load_image_dir
from .engine import NumericAbort, RunResult, load_final_image, run_inversion, run_multi_seed, save_run
from .grid import run_grid
from .metrics import ReferenceSet, evaluate_run, read_pairs_tsv, text_scores
from .modelzoo import WeightFileError, decode_images, save_weights
from .pipeline import build_suite, capture_reference_stats, reference_stats, set_deterministic
from .report import write_report
from .statcapture import StatsFileError, save_stats

log = logging.getLogger("mimic")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_EMPTY = 0, 2, 3, 4, 5


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        return parse_config_dict({})
    return parse_config(args.config)


def _with_seed(exp: ExperimentConfig, seed):
    if seed is None:
        return exp
    inversion = {**exp.inversion, "seeds": [seed]}
    ablation = exp.ablation and dataclasses.replace(exp.ablation, seeds=(seed,))
    return dataclasses.replace(exp, inversion=inversion, ablation=ablation)


def _layers(text):
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_capture_stats(args) -> int:
    exp = _load_config(args)
    if args.seed is not None:
        exp = dataclasses.replace(exp, data=dataclasses.replace(exp.data, seed=args.seed))
    mode = args.mode or exp.inversion.get("mode", "vlm")
    suite = build_suite(exp.suite, exp.data)
    stats = capture_reference_stats(exp, suite, mode, args.label, args.layers)
    out = Path(args.out or "stats.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_stats(stats.encoder, out)
    enc = stats.encoder
    print(f"captured {enc.image_count} images, mode {enc.mode} -> {out}")
    for layer in enc.layer_ids:
        print(f"  layer {layer}: D={len(enc.mean[layer])} mean|mu|={np.mean(np.abs(enc.mean[layer])):.6g} "
              f"mean sigma={np.mean(enc.std[layer]):.6g}")
    if args.bn_out and stats.bn is not None:
        save_stats(stats.bn, args.bn_out)
        print(f"  {len(stats.bn.means)} BN layers -> {args.bn_out}")
    return EXIT_OK


def _print_entry(entry):
    terms = " ".join(f"{k}={v:.6g}" for k, v in entry.losses.items())
    print(f"step {entry.step:6d} lr={entry.lr:.4g} {terms}", flush=True)


def cmd_invert(args) -> int:
    exp = _with_seed(_load_config(args), args.seed)
    if args.iterations is not None:
        exp = dataclasses.replace(exp, inversion={**exp.inversion, "iterations": args.iterations})
    inv = exp.inversion_config()
    if inv.target is None:
        raise ConfigError("inversion.target is required for invert")
    suite = build_suite(exp.suite, exp.data)
    stats = reference_stats(exp, suite, inv) if _needs_stats(inv) else None
    out = Path(args.out or "runs")
    out.mkdir(parents=True, exist_ok=True)
    extra = {"experiment": exp.to_dict()}
    status = EXIT_OK
    if args.workers > 1 and len(inv.seeds) > 1:
        results = run_multi_seed(inv, suite, stats, args.workers)
    else:
        results = []
        for seed in inv.seeds:
            try:
                results.append(run_inversion(inv, suite, stats, seed, on_log=_print_entry))
            except NumericAbort as e:
                log.error("seed %d: %s; partial run kept", seed, e)
                save_run(e.result, out / f"seed_{seed}", extra)
                status = EXIT_NUMERIC
    for r in results:
        run_dir = save_run(r, out / f"seed_{r.seed}", extra)
        msg = f"seed {r.seed}: {run_dir}"
        if r.decoded:
            msg += f" decoded={r.decoded}"
        print(msg)
    if exp.suite.source != "file":
        save_weights(suite, out / "suite.bin")
    return status


def _needs_stats(inv):
    w = inv.weights
    return w.gamma2 > 0 or w.beta1 > 0


def _run_from_dir(run_dir):
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    image = load_final_image(run_dir)
    return manifest, RunResult(image, {}, [], manifest["config"], manifest["seed"], manifest.get("wall_time", 0.0),
                               manifest.get("status", "ok"), manifest.get("decoded") or [])


def _suite_for_run(args, manifest, run_dir):
    if args.config is not None:
        exp = parse_config(args.config)
    elif "experiment" in manifest:
        exp = parse_config_dict(manifest["experiment"], f"{run_dir}/manifest.json:experiment")
    else:
        raise ConfigError("run manifest has no experiment echo; pass --config")
    saved = Path(run_dir).parent / "suite.bin"
    if exp.suite.source != "file" and saved.exists():
        exp = dataclasses.replace(exp, suite=dataclasses.replace(exp.suite, source="file", path=str(saved)))
    return exp, build_suite(exp.suite, exp.data)


def cmd_eval(args) -> int:
    if args.text_pairs is None and args.run_dir is None:
        raise ConfigError("eval needs a run directory or --text-pairs")
    if args.text_pairs is not None:
        exp = _load_config(args) if args.config else parse_config_dict({})
        max_n = exp.metrics.bleu_max_n
        rows = []
        for cand, ref in read_pairs_tsv(args.text_pairs):
            s = text_scores(cand, ref, max_n)
            rows.append({"candidate": cand, "reference": ref, **s})
            print(f"{s['bleu']:.4f} | {s['meteor']:.4f} | {s['rouge_l']:.4f} | {cand} -> {ref}")
        if not rows:
            log.error("no text pairs in %s", args.text_pairs)
            return EXIT_EMPTY
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
        if args.run_dir is None:
            return EXIT_OK
    manifest, result = _run_from_dir(args.run_dir)
    exp, suite = _suite_for_run(args, manifest, args.run_dir)
    refs = None
    if args.references:
        refs = ReferenceSet(load_image_dir(args.references, suite.input_shape[-1]), None)
    report = evaluate_run(result, suite, refs, exp.metrics, args.run_dir)
    print(report.row())
    return EXIT_OK


def cmd_ablate(args) -> int:
    exp = _with_seed(_load_config(args), args.seed)
    if exp.ablation is None:
        raise ConfigError(f"{args.config}: no 'ablation' block")
    result = run_grid(exp, Path(args.out or "grid"), args.workers, args.max_cells)
    print(f"{result.succeeded}/{len(result.cells)} cells ok ({result.ran} run, {result.skipped} resumed)")
    return result.exit_code


def cmd_report(args) -> int:
    code = write_report(args.grid_dir, args.out or Path(args.grid_dir) / "report", args.preset)
    if code == EXIT_OK:
        print(f"report written to {args.out or Path(args.grid_dir) / 'report'}")
    return code


def cmd_decode(args) -> int:
    manifest, result = _run_from_dir(args.run_dir)
    exp, suite = _suite_for_run(args, manifest, args.run_dir)
    inv = build_inversion(manifest["config"])
    if inv.mode != "vlm" or inv.prompt is None:
        raise ConfigError("decode needs a vlm-mode run with a prompt")
    max_len = args.max_len or len(inv.target.token_ids(suite)) + 2
    texts = decode_images(suite, inv.prompt, result.final_image, max_len)
    if not texts:
        return EXIT_EMPTY
    for t in texts:
        print(t)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="experiment JSON")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output file or directory")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the seed(s)")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="parallel runs")
    common.add_argument("--log-level", default=argparse.SUPPRESS, choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="mimic", description="Model inversion of vision-language models.",
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("capture-stats", parents=[common], help="capture reference encoder statistics")
    s.add_argument("--layers", type=_layers, default=None, help="comma-separated tap ids")
    s.add_argument("--label", type=int, default=None, help="only images of this class")
    s.add_argument("--mode", choices=["vlm", "vit"], default=None, help="which encoder to tap")
    s.add_argument("--bn-out", default=None, help="also write verifier BN statistics here")
    s.set_defaults(func=cmd_capture_stats)

    s = sub.add_parser("invert", parents=[common], help="run the inversion for each seed")
    s.add_argument("--iterations", type=int, default=None)
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("eval", parents=[common], help="score a run directory or text pairs")
    s.add_argument("run_dir", nargs="?", default=None)
    s.add_argument("--references", default=None, help="directory of real reference images")
    s.add_argument("--text-pairs", default=None, help="TSV of (candidate, reference) pairs")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="run a preset x concept x seed grid")
    s.add_argument("--max-cells", type=int, default=None, help="stop after this many new cells")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", parents=[common], help="charts and HTML index for a grid")
    s.add_argument("grid_dir")
    s.add_argument("--preset", default=None, help="preset to chart (default: last)")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("decode", parents=[common], help="greedy-decode a run's final image")
    s.add_argument("run_dir")
    s.add_argument("--max-len", type=int, default=None)
    s.set_defaults(func=cmd_decode)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("out", None), ("seed", None), ("workers", 1), ("log_level", "WARNING")):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", force=True)
    set_deterministic()
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, StatsFileError, WeightFileError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
