"""Shared test utilities: finite differences and small configs."""

import numpy as np
import torch

from mimic.modelzoo import build_toy_suite
from mimic.objective import ReferenceStats
from mimic.statcapture import BNStatistics, capture_encoder_stats


def central_differences(f, x, n=200, eps=1e-4, seed=0):
    """Analytic vs central-difference gradient at ``n`` random coordinates.

    Returns (analytic, numeric, roundoff) where ``roundoff`` bounds the
    cancellation error of the difference quotient. ``f`` maps a double
    tensor to a scalar.
    """
    x = x.detach().clone().double()
    xg = x.clone().requires_grad_(True)
    value = f(xg)
    (g,) = torch.autograd.grad(value, xg)
    flat = x.view(-1)
    rng = np.random.default_rng(seed)
    idx = rng.choice(flat.numel(), size=min(n, flat.numel()), replace=False)
    num = np.empty(len(idx))
    with torch.no_grad():
        for j, i in enumerate(idx):
            old = flat[i].item()
            flat[i] = old + eps
            fp = f(x).item()
            flat[i] = old - eps
            fm = f(x).item()
            flat[i] = old
            num[j] = (fp - fm) / (2 * eps)
    roundoff = 10 * np.finfo(np.float64).eps * max(1.0, abs(value.item())) / eps
    return g.view(-1)[idx].numpy(), num, roundoff


def gradient_agreement(analytic, numeric, roundoff, rtol=1e-4):
    """Per-coordinate pass mask: |a - n| <= rtol * max(|a|, |n|) + roundoff."""
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.abs(analytic - numeric) <= rtol * scale + roundoff


def small_suite(seed=0, image_size=16, dtype=torch.float64):
    return build_toy_suite(seed, image_size).to(dtype)


def random_images(n, size=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 3, size, size, generator=g, dtype=torch.float64)


def toy_reference(suite, encoder, layers=(1, 3), seed=1):
    """Encoder stats from random images plus perturbed BN running stats."""
    enc = capture_encoder_stats(encoder, random_images(4, suite.input_shape[-1], seed), layers)
    rng = np.random.default_rng(seed)
    bns = [m for m in suite.verifier.modules() if isinstance(m, torch.nn.BatchNorm2d)]
    bn = BNStatistics([rng.normal(0, 0.3, m.num_features) for m in bns],
                      [rng.uniform(0.5, 2.0, m.num_features) for m in bns])
    return ReferenceStats(enc, bn)
