"""Acceptance gate: one group of tests per criterion.

Run with ``pytest tests/test_acceptance.py``; the terminal summary prints one
PASS/FAIL line per criterion. Runtime budgets are asserted where stated.
"""

import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from helpers import central_differences, gradient_agreement, random_images, small_suite, toy_reference
from mimic.cli import main
from mimic.config import CLASSIFIER_WEIGHTS, PRESET_LABELS, ABLATION_ORDER, parse_config_dict
from mimic.data import make_blob_dataset, train_toy_suite
from mimic.engine import InversionConfig, run_inversion
from mimic.grid import plan_cells, run_grid
from mimic.metrics import FeatureSet, bleu, clip_score, fid, inception_score, lpips_like, rouge_l, score_infinity
from mimic.modelzoo import PromptSpec, build_oracle_vlm, build_toy_suite
from mimic.objective import (
    ObjectiveWeights,
    TargetSpec,
    base_loss_kl,
    base_loss_l2,
    patch_regularizer,
    total_objective,
    tv1,
    tv2,
    verifier_regularizer,
)
from mimic.pipeline import capture_reference_stats
from mimic.statcapture import LayerStatistics
from mimic.modelzoo import LayerActivations

C = pytest.mark.criterion

CAPTION_PAIRS = [
    ("It is a fishfish", "It is a goldfish", 0.749, 0.750),
    ("The image depicts a fishfish", "The image depicts a goldfish", 0.799, 0.800),
    ("It is an image of a fishfish", "It is an image of a goldfish", 0.857, 0.857),
]


# ---------------------------------------------------------------------------
# 1. text metrics on the target-length pairs


@C(1, "caption-length text metrics (BLEU-1, ROUGE-L)")
def test_caption_length_metrics():
    start = time.perf_counter()
    for cand, ref, paper_bleu, paper_rouge in CAPTION_PAIRS:
        assert rouge_l(cand, ref) == pytest.approx(paper_rouge, abs=1e-3)
        assert bleu(cand, ref, max_n=1) == pytest.approx(paper_bleu, abs=5e-3)
    assert time.perf_counter() - start < 1.0


# ---------------------------------------------------------------------------
# 2. gradients


GRAD_TERMS = {
    "task": dict(gamma1=1.0),
    "base": dict(gamma1=0.0, gamma2=1.0),
    "tv1": dict(gamma1=0.0, alpha1=1.0),
    "tv2": dict(gamma1=0.0, alpha2=1.0),
    "l2": dict(gamma1=0.0, alpha3=1.0),
    "patch": dict(gamma1=0.0, beta2=1.0),
    "rv": dict(gamma1=0.0, beta1=1.0),
}
GRAD_CASES = [("vlm", "l2", t) for t in GRAD_TERMS] + [("vit", "l2", "task"), ("vit", "l2", "base"),
                                                       ("vlm", "kl", "base"), ("vit", "kl", "base")]


@pytest.fixture(scope="module")
def grad_suite():
    return small_suite(seed=5)


@C(2, "gradient suite vs central differences")
@pytest.mark.parametrize("mode,variant,term", GRAD_CASES)
def test_gradient_suite(grad_suite, mode, variant, term):
    s = grad_suite
    if mode == "vlm":
        target, prompt, ref = TargetSpec("vlm", "red", base_variant=variant), PromptSpec("red"), \
            toy_reference(s, s.vision_encoder)
    else:
        target, prompt, ref = TargetSpec("vit", class_label=2, base_variant=variant), None, \
            toy_reference(s, s.classifier.backbone)
    w = ObjectiveWeights(**GRAD_TERMS[term])
    f = lambda x: total_objective(s, x, prompt, target, ref, w).total  # noqa: E731
    analytic, numeric, roundoff = central_differences(f, random_images(1, 16, seed=21)[0], n=200)
    ok = gradient_agreement(analytic, numeric, roundoff, rtol=1e-4)
    assert ok.mean() >= 0.99


# ---------------------------------------------------------------------------
# 3. metric oracles


@C(3, "metric oracles")
def test_metric_oracles():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 5))
    assert fid(x, x) <= 1e-6
    assert fid(FeatureSet(np.array([[-1.0], [1.0]])), FeatureSet(np.array([[0.0], [2.0]]))) == \
        pytest.approx(1.0, abs=1e-9)
    assert inception_score(np.full((10, 4), 0.25)) == pytest.approx(1.0, abs=1e-9)
    assert inception_score(np.array([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(2.0, abs=1e-9)
    a, b = 3.25, -7.5
    est = score_infinity(lambda idx: a + b / len(idx), np.arange(100), (10, 20, 50, 100))
    assert est == pytest.approx(a, abs=1e-6)
    extract = lambda im: [im[None]]  # noqa: E731
    img = torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(0))
    assert lpips_like(extract, img, img) == 0.0
    const = torch.full((3, 8, 8), 0.7)
    assert lpips_like(extract, const, -const) == pytest.approx(4.0, abs=1e-9)
    e = rng.normal(size=16)
    assert clip_score(e, e) == pytest.approx(100.0, abs=1e-9)


# ---------------------------------------------------------------------------
# 4. oracle VLM


@C(4, "oracle VLM inversion decodes RED")
def test_oracle_vlm_inversion():
    start = time.perf_counter()
    suite = build_oracle_vlm()
    cfg = InversionConfig(mode="vlm", iterations=1000, lr=0.05, seeds=(0, 1, 2),
                          target=TargetSpec("vlm", "red"), weights=ObjectiveWeights(gamma1=1.0),
                          checkpoint_every=0, log_every=100)
    for seed in cfg.seeds:
        result = run_inversion(cfg, suite, None, seed)
        assert any("red" in text.split() for text in result.decoded), result.decoded
        img = result.final_image[0].double()
        r, g, b = img.mean(dim=(1, 2))
        assert float(r - 0.5 * (g + b)) > 0.2
    assert time.perf_counter() - start < 120


# ---------------------------------------------------------------------------
# 5. vit-mode toy pipeline


@pytest.fixture(scope="module")
def trained_toy():
    images, labels = make_blob_dataset(per_class=64, seed=0)
    suite, accs = train_toy_suite(build_toy_suite(0), images, labels, epochs=10, lr=3e-3, seed=0)
    return suite, accs, images, labels


@C(5, "vit-mode toy pipeline, verifier top-1 >= 0.6")
@pytest.mark.parametrize("label", [0, 1, 2])
def test_vit_toy_pipeline(trained_toy, label):
    start = time.perf_counter()
    suite, accs, images, labels = trained_toy
    assert accs["classifier"] >= 0.95
    exp = parse_config_dict({})
    ref = capture_reference_stats(exp, suite, "vit", label, images=images, labels=labels)
    cfg = InversionConfig(mode="vit", iterations=500, batch_size=8, schedule="cosine", seeds=(0,),
                          weights=ObjectiveWeights(**CLASSIFIER_WEIGHTS),
                          target=TargetSpec("vit", class_label=label), checkpoint_every=0, log_every=50)
    result = run_inversion(cfg, suite, ref, 0)
    with torch.no_grad():
        pred = suite.verifier(result.final_image)[0].argmax(dim=1)
    top1 = float((pred == label).double().mean())
    print(f"class {label}: verifier top-1 {top1:.3f}")
    assert top1 >= 0.6
    assert time.perf_counter() - start < 300 / 3


# ---------------------------------------------------------------------------
# 6. regularizer fixed points


@C(6, "regularizer fixed points")
def test_regularizer_fixed_points():
    const = torch.full((3, 16, 16), 0.3, dtype=torch.float64)
    assert tv1(const).item() == 0.0
    assert tv2(const).item() == 0.0
    assert patch_regularizer(const, 4).item() == 0.0
    z = torch.randn(8, 5, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    acts = LayerActivations({1: z, 3: 2 * z + 1})
    ref = LayerStatistics((1, 3), {k: v.mean(0).numpy() for k, v in acts.layers.items()},
                          {k: v.std(0, unbiased=False).numpy() for k, v in acts.layers.items()})
    assert float(base_loss_l2(acts, ref)) == pytest.approx(0.0, abs=1e-9)
    assert float(base_loss_kl(acts, ref)) == pytest.approx(0.0, abs=1e-9)
    mu, var = torch.tensor([0.1, -0.2], dtype=torch.float64), torch.tensor([1.5, 0.4], dtype=torch.float64)
    assert float(verifier_regularizer([(mu, var)], [(mu.numpy(), var.numpy())])) == pytest.approx(0.0, abs=1e-9)
    hand = torch.tensor([[0.0, 1.0], [2.0, 3.0]], dtype=torch.float64)
    assert tv1(hand).item() == 6.0
    assert tv2(hand).item() == 10.0


# ---------------------------------------------------------------------------
# 7. determinism


INVERT_CONFIG = {
    "suite": {"source": "toy", "seed": 0, "image_size": 16},
    "data": {"per_class": 8},
    "inversion": {
        "mode": "vit", "iterations": 15, "batch_size": 2, "seeds": [4], "log_every": 1,
        "checkpoint_every": 5, "target": {"class_label": 1},
        "weights": {"gamma1": 1.0, "gamma2": 0.1, "beta1": 0.01, "beta2": 0.01, "alpha1": 0.001},
    },
}


def _grid_config(presets, seeds, iterations):
    return {
        "suite": {"source": "toy", "seed": 0, "image_size": 16, "train": {"epochs": 3}},
        "data": {"per_class": 16},
        "inversion": {"mode": "vit", "iterations": iterations, "batch_size": 4, "checkpoint_every": 0,
                      "log_every": 5},
        "metrics": {"lpips_refs": 2},
        "ablation": {"presets": list(presets),
                     "concepts": [{"name": "red", "label": 0}, {"name": "green", "label": 1}],
                     "seeds": list(seeds)},
    }


def _write(path, doc):
    path.write_text(json.dumps(doc, indent=2))
    return path


@C(7, "determinism of invert and grid leaderboard")
def test_invert_determinism(tmp_path):
    cfg = _write(tmp_path / "invert.json", INVERT_CONFIG)
    for name in ("a", "b"):
        assert main(["invert", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    from mimic.engine import load_final_image

    x = load_final_image(tmp_path / "a" / "seed_4")
    y = load_final_image(tmp_path / "b" / "seed_4")
    assert float((x - y).abs().max()) <= 1e-6
    assert (tmp_path / "a/seed_4/trace.csv").read_bytes() == (tmp_path / "b/seed_4/trace.csv").read_bytes()


@C(7, "determinism of invert and grid leaderboard")
def test_grid_leaderboard_independent_of_workers(tmp_path):
    cfg = _write(tmp_path / "grid.json", _grid_config(["baseline", "aggregated"], [0, 1], 10))
    for w in ("1", "4"):
        assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / f"w{w}"), "--workers", w]) == 0
    a = (tmp_path / "w1" / "leaderboard.csv").read_bytes()
    assert a == (tmp_path / "w4" / "leaderboard.csv").read_bytes()
    assert (tmp_path / "w1" / "concept_summary.csv").read_bytes() == \
        (tmp_path / "w4" / "concept_summary.csv").read_bytes()


# ---------------------------------------------------------------------------
# 8. ablation harness


@C(8, "6 x 2 x 3 ablation grid, resumable, preset row order")
def test_ablation_harness(tmp_path):
    start = time.perf_counter()
    exp = parse_config_dict(_grid_config(ABLATION_ORDER, [0, 1, 2], 30))
    grid = tmp_path / "grid"
    first = run_grid(exp, grid, workers=1, max_cells=10)
    assert first.ran == 10 and first.succeeded == 10
    done = {c.run_dir: c.marker.stat().st_mtime_ns for c in first.cells if c.status == "ok"}

    second = run_grid(exp, grid, workers=1)
    assert second.skipped == 10 and second.ran == 26
    assert second.succeeded == 36 and second.exit_code == 0
    for run_dir, mtime in done.items():
        assert (run_dir / "cell.json").stat().st_mtime_ns == mtime

    third = run_grid(exp, grid, workers=1)
    assert third.ran == 0 and third.skipped == 36

    with open(grid / "leaderboard.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0][0] == "Optimization Objective"
    assert rows[0][1:3] == ["Top-1", "Top-5"]
    assert [r[0] for r in rows[1:]] == [PRESET_LABELS[p] for p in ABLATION_ORDER]
    assert len(plan_cells(exp, grid)) == 36
    assert time.perf_counter() - start < 600


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
