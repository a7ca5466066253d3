"""Image-quality metrics: top-k accuracy, Inception Score, FID, 1/N
extrapolation, LPIPS-style distance and CLIPScore-style alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class MetricError(ValueError):
    pass


@dataclass
class FeatureSet:
    features: np.ndarray  # N × F
    extractor: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise MetricError("features must be an N×F matrix")
        if not np.isfinite(self.features).all():
            raise MetricError("features must be finite")


def _logits(classifier, images):
    if callable(classifier) and not isinstance(classifier, torch.nn.Module):
        out = classifier(images)
    else:
        with torch.no_grad():
            out = classifier(images)
    if isinstance(out, tuple):
        out = out[0]
    return np.asarray(out.detach().double().cpu() if torch.is_tensor(out) else out, dtype=np.float64)


def top_k_hits(logits, labels, k):
    """Per-row hit flags; ties rank the lower class index first."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.broadcast_to(np.asarray(labels), (logits.shape[0],))
    n_cls = logits.shape[1]
    if not 1 <= k <= n_cls:
        raise MetricError(f"k={k} must lie in [1, {n_cls}]")
    hits = []
    for row, y in zip(logits, labels):
        ly = row[y]
        rank = np.sum(row > ly) + np.sum((row == ly)[:y])
        hits.append(rank < k)
    return np.array(hits)


def top_k_accuracy(classifier, images, label, k=1) -> float:
    """Fraction of images whose label is among the k highest logits.

    ``label`` is one class index or one per image.
    """
    if len(images) == 0:
        raise MetricError("top_k_accuracy needs at least one image")
    return float(top_k_hits(_logits(classifier, images), label, k).mean())


def inception_score(class_probs) -> float:
    """exp(mean KL(p(y|x) || p(y))) over rows of an N×K probability matrix."""
    p = np.atleast_2d(np.asarray(class_probs, dtype=np.float64))
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise MetricError("rows of class_probs must be probability distributions")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def _sqrt_psd(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    w = np.where(np.abs(w) <= 1e-10, 0.0, w)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T, w


def trace_sqrt_product(cov_a, cov_b) -> float:
    """Tr((A B)^{1/2}) for PSD A, B via the symmetric form A^{1/2} B A^{1/2}."""
    root_a, _ = _sqrt_psd(cov_a)
    w = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    w = np.where(np.abs(w) <= 1e-10, 0.0, w)
    if np.any(w < 0):
        raise MetricError(f"covariance product has a negative eigenvalue {w.min():.3g}")
    return float(np.sqrt(w).sum())


def fid(features_a, features_b) -> float:
    """Fréchet distance between Gaussian fits of two feature sets (population covariances)."""
    a = features_a.features if isinstance(features_a, FeatureSet) else np.asarray(features_a, dtype=np.float64)
    b = features_b.features if isinstance(features_b, FeatureSet) else np.asarray(features_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise MetricError("fid needs at least two samples per side")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False, bias=True).reshape(a.shape[1], a.shape[1])
    cov_b = np.cov(b, rowvar=False, bias=True).reshape(b.shape[1], b.shape[1])
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b)
              - 2.0 * trace_sqrt_product(cov_a, cov_b))
    return max(d, 0.0) if d > -1e-9 else d


def score_infinity(score_fn, samples, n_grid, resamples=5, seed=0) -> float:
    """Extrapolate a sample-size-biased score to N -> infinity.

    The score is averaged over ``resamples`` seeded draws without replacement
    at each N, then fitted as a + b/N by least squares; returns a.
    """
    n_grid = [int(n) for n in n_grid]
    if len(n_grid) < 2 or len(set(n_grid)) < 2:
        raise MetricError("score_infinity needs at least two distinct sample counts")
    total = len(samples)
    if any(n < 1 or n > total for n in n_grid):
        raise MetricError(f"sample counts {n_grid} exceed the {total} available samples")
    rng = np.random.Generator(np.random.PCG64(seed))
    means = []
    for n in n_grid:
        scores = [score_fn(samples[np.sort(rng.choice(total, n, replace=False))]) for _ in range(resamples)]
        means.append(np.mean(scores))
    x = 1.0 / np.asarray(n_grid, dtype=np.float64)
    design = np.stack([np.ones_like(x), x], axis=1)
    (a, _), *_ = np.linalg.lstsq(design, np.asarray(means), rcond=None)
    return float(a)


def _normalize(f, eps=1e-10):
    # eps only guards all-zero sites, so unit features stay exactly unit
    return f / np.maximum(np.sqrt((f ** 2).sum(axis=0, keepdims=True)), eps)


def lpips_like(extractor, image_a, image_b) -> float:
    """Unit-weighted LPIPS-style distance.

    Per extractor layer: unit-normalize features along channels at every
    spatial site, square the difference, sum channels, average space; layers
    are summed.
    """
    if tuple(image_a.shape) != tuple(image_b.shape):
        raise MetricError(f"image shapes differ: {tuple(image_a.shape)} vs {tuple(image_b.shape)}")
    with torch.no_grad():
        fa, fb = extractor(image_a), extractor(image_b)
    total = 0.0
    for a, b in zip(fa, fb):
        a = np.asarray(torch.as_tensor(a).double().cpu())
        b = np.asarray(torch.as_tensor(b).double().cpu())
        if a.ndim == 4:  # batch of one
            a, b = a[0], b[0]
        diff = (_normalize(a) - _normalize(b)) ** 2
        total += float(diff.sum(axis=0).mean())
    return total


def clip_score(image_embedding, text_embedding, legacy=False) -> float:
    """w * max(cos, 0) with w = 100, or the 2.5 weighting when ``legacy``."""
    a = np.asarray(torch.as_tensor(image_embedding).double().cpu()).ravel()
    b = np.asarray(torch.as_tensor(text_embedding).double().cpu()).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("clip_score needs nonzero embeddings")
    cos = float(a @ b / (na * nb))
    return (2.5 if legacy else 100.0) * max(cos, 0.0)
