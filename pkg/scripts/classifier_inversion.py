"""Class-conditional inversion of the trained toy classifier with the aggregated weights.

Trains the toy suite on the synthetic blob data, captures per-class backbone
statistics, inverts each class and scores the batch with the verifier.

    python scripts/classifier_inversion.py --iterations 500 --batch 8
"""

import argparse

import torch

from mimic.config import CLASSIFIER_WEIGHTS, parse_config_dict
from mimic.data import make_blob_dataset, train_toy_suite
from mimic.engine import InversionConfig, run_inversion
from mimic.modelzoo import build_toy_suite
from mimic.objective import ObjectiveWeights, TargetSpec
from mimic.pipeline import capture_reference_stats, set_deterministic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=500)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    set_deterministic()
    images, labels = make_blob_dataset(per_class=64, seed=0)
    suite, accs = train_toy_suite(build_toy_suite(0), images, labels, epochs=10, lr=3e-3, seed=0)
    print("train accuracy:", {k: round(v, 3) for k, v in accs.items()})
    exp = parse_config_dict({})
    for label in range(3):
        ref = capture_reference_stats(exp, suite, "vit", label, images=images, labels=labels)
        cfg = InversionConfig(mode="vit", iterations=args.iterations, batch_size=args.batch, schedule="cosine",
                              seeds=(args.seed,), weights=ObjectiveWeights(**CLASSIFIER_WEIGHTS),
                              target=TargetSpec("vit", class_label=label), checkpoint_every=0,
                              log_every=max(1, args.iterations // 5))
        result = run_inversion(cfg, suite, ref, args.seed)
        with torch.no_grad():
            pred = suite.verifier(result.final_image)[0].argmax(dim=1)
        print(f"class {label}: verifier top-1 {float((pred == label).double().mean()):.3f} "
              f"({result.wall_time:.1f}s)")


if __name__ == "__main__":
    main()
