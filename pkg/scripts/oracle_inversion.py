"""Invert the analytic colour VLM toward a target colour word and report what it decodes.

    python scripts/oracle_inversion.py --target red --seeds 0 1 2 --out runs/oracle
"""

import argparse
from pathlib import Path

from mimic.engine import InversionConfig, run_inversion, save_run
from mimic.modelzoo import build_oracle_vlm
from mimic.objective import ObjectiveWeights, TargetSpec
from mimic.pipeline import set_deterministic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--target", default="red", choices=["red", "green", "blue"])
    ap.add_argument("--iterations", type=int, default=1000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()

    set_deterministic()
    suite = build_oracle_vlm()
    cfg = InversionConfig(mode="vlm", iterations=args.iterations, lr=0.05, seeds=tuple(args.seeds),
                          target=TargetSpec("vlm", args.target), weights=ObjectiveWeights(gamma1=1.0),
                          checkpoint_every=0, log_every=max(1, args.iterations // 10))
    for seed in cfg.seeds:
        result = run_inversion(cfg, suite, None, seed)
        rgb = result.final_image[0].double().mean(dim=(1, 2))
        print(f"seed {seed}: decoded={result.decoded} mean rgb={[round(float(v), 3) for v in rgb]} "
              f"final loss={result.trace[-1].losses['total']:.3g}")
        if args.out is not None:
            save_run(result, args.out / f"seed_{seed}")


if __name__ == "__main__":
    main()
