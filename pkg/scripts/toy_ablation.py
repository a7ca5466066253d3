"""Run the six-preset ablation grid on the toy suite and render its report.

The grid resumes: rerunning skips every cell that already finished.

    python scripts/toy_ablation.py --out runs/toy_grid --workers 2
"""

import argparse
import logging
from pathlib import Path

from mimic.config import parse_config
from mimic.grid import run_grid
from mimic.pipeline import set_deterministic
from mimic.report import write_report

DEFAULT = Path(__file__).resolve().parent.parent / "configs" / "toy_ablation.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=DEFAULT)
    ap.add_argument("--out", type=Path, default=Path("runs/toy_grid"))
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--max-cells", type=int, default=None)
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    set_deterministic()
    result = run_grid(parse_config(args.config), args.out, args.workers, args.max_cells)
    print(f"{result.succeeded}/{len(result.cells)} cells ok ({result.ran} run, {result.skipped} resumed)")
    print((args.out / "leaderboard.csv").read_text())
    if result.succeeded:
        write_report(args.out, args.out / "report")
        print(f"report: {args.out / 'report' / 'index.html'}")


if __name__ == "__main__":
    main()
