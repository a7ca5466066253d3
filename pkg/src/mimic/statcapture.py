"""Reference statistics: encoder layer statistics from real images and the
verifier's stored BatchNorm running statistics, with JSON persistence."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .modelzoo import encode_image, module_hash

log = logging.getLogger(__name__)

MODES = ("average-then-stats", "stats-then-average")


class StatsFileError(ValueError):
    pass


@dataclass
class LayerStatistics:
    """Per-layer, per-channel token mean and standard deviation."""

    layer_ids: tuple[int, ...]
    mean: dict
    std: dict
    model_hash: str = ""
    image_count: int = 0
    mode: str = MODES[0]

    def __post_init__(self):
        self.layer_ids = tuple(sorted(int(i) for i in self.layer_ids))
        if not self.layer_ids:
            raise ValueError("layer statistics need at least one layer")
        for layer in self.layer_ids:
            if np.any(np.asarray(self.std[layer]) < 0):
                raise ValueError(f"negative std in layer {layer}")


@dataclass
class BNStatistics:
    """Running mean and variance per BN layer, in verifier order."""

    means: list
    variances: list
    model_hash: str = ""

    def pairs(self):
        return list(zip(self.means, self.variances))

    @property
    def layer_ids(self):
        return tuple(range(len(self.means)))


def _stats(z):
    return z.mean(axis=0), z.std(axis=0)


def capture_encoder_stats(encoder, images, layers, mode="average-then-stats") -> LayerStatistics:
    """Reference statistics over ``layers`` from a list (or batch) of images.

    average-then-stats: average the activations elementwise across images,
    then take per-channel mean/std over tokens. stats-then-average: take
    per-image statistics and average those.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    images = list(images)
    if not images:
        raise ValueError("capture_encoder_stats needs at least one image")
    shape = tuple(images[0].shape)
    if any(tuple(im.shape) != shape for im in images):
        raise ValueError("images must share one shape")
    layers = tuple(sorted(layers))
    per_layer = {l: [] for l in layers}
    with torch.no_grad():
        for im in images:
            _, acts = encode_image(encoder, im, layers=layers)
            for l in layers:
                per_layer[l].append(acts[l].double().cpu().numpy())
    mean, std = {}, {}
    for l in layers:
        stack = np.stack(per_layer[l])  # N × D × Ω
        if mode == "average-then-stats":
            mean[l], std[l] = _stats(stack.mean(axis=0))
        else:
            mus, sds = zip(*(_stats(z) for z in stack))
            mean[l], std[l] = np.mean(mus, axis=0), np.mean(sds, axis=0)
    return LayerStatistics(layers, mean, std, module_hash(encoder), len(images), mode)


def extract_bn_stats(verifier) -> BNStatistics:
    bns = [m for m in verifier.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not bns:
        raise ValueError("verifier has no BatchNorm layers")
    means = [bn.running_mean.detach().double().cpu().numpy().copy() for bn in bns]
    variances = [bn.running_var.detach().double().cpu().numpy().copy() for bn in bns]
    return BNStatistics(means, variances, module_hash(verifier))


# ---------------------------------------------------------------------------
# persistence


def _floats(values):
    return "[" + ", ".join(format(float(v), ".17g") for v in np.asarray(values).ravel()) + "]"


def save_stats(stats, path) -> None:
    if isinstance(stats, LayerStatistics):
        kind, ids = "encoder", stats.layer_ids
        rows = [(l, stats.mean[l], stats.std[l]) for l in ids]
        count, mode = stats.image_count, stats.mode
    elif isinstance(stats, BNStatistics):
        kind, ids = "bn", stats.layer_ids
        rows = [(i, m, v) for i, (m, v) in enumerate(stats.pairs())]
        count, mode = 0, "running"
    else:
        raise TypeError(f"cannot save {type(stats).__name__}")
    layers = ",\n    ".join(f'{{"id": {l}, "mean": {_floats(m)}, "std_or_var": {_floats(s)}}}' for l, m, s in rows)
    head = json.dumps({"kind": kind, "model_hash": stats.model_hash, "lambda": list(ids),
                       "image_count": count, "mode": mode})
    Path(path).write_text(head[:-1] + f', "layers": [\n    {layers}\n  ]}}\n')


def _field(doc, name, kind, where="document"):
    if name not in doc:
        raise StatsFileError(f"missing field {name!r} in {where}")
    value = doc[name]
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
    if not ok:
        raise StatsFileError(f"field {name!r} in {where} has type {type(value).__name__}")
    return value


def _vector(doc, name, where):
    values = _field(doc, name, list, where)
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in values):
        raise StatsFileError(f"field {name!r} in {where} must be a list of finite numbers")
    return np.asarray(values, dtype=np.float64)


def load_stats(path, expected_layers=None, expected_model_hash=None):
    """Load statistics; a different layer set is an error, a different model hash a warning."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise StatsFileError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise StatsFileError(f"{path}: top level must be an object")
    kind = _field(doc, "kind", str)
    if kind not in ("encoder", "bn"):
        raise StatsFileError(f"field 'kind' must be 'encoder' or 'bn', got {kind!r}")
    model_hash = _field(doc, "model_hash", str)
    lam = _field(doc, "lambda", list)
    count = _field(doc, "image_count", int)
    mode = _field(doc, "mode", str)
    entries = _field(doc, "layers", list)
    ids, means, spreads = [], {}, {}
    for i, entry in enumerate(entries):
        where = f"layers[{i}]"
        if not isinstance(entry, dict):
            raise StatsFileError(f"{where} must be an object")
        lid = _field(entry, "id", int, where)
        means[lid] = _vector(entry, "mean", where)
        spreads[lid] = _vector(entry, "std_or_var", where)
        if len(means[lid]) != len(spreads[lid]):
            raise StatsFileError(f"{where}: mean and std_or_var lengths differ")
        ids.append(lid)
    if sorted(ids) != sorted(lam):
        raise StatsFileError(f"field 'lambda' {lam} does not match layer ids {ids}")
    if expected_layers is not None and tuple(sorted(expected_layers)) != tuple(sorted(ids)):
        raise StatsFileError(f"{path}: layer set {sorted(ids)} does not match requested {sorted(expected_layers)}")
    if expected_model_hash is not None and expected_model_hash != model_hash:
        log.warning("%s: statistics were captured from a different model (%s..., expected %s...)",
                    path, model_hash[:12], expected_model_hash[:12])
    if kind == "encoder":
        if mode not in MODES:
            raise StatsFileError(f"field 'mode' must be one of {MODES}, got {mode!r}")
        return LayerStatistics(tuple(ids), means, spreads, model_hash, count, mode)
    order = sorted(ids)
    if order != list(range(len(order))):
        raise StatsFileError("bn layer ids must be 0..K-1")
    return BNStatistics([means[i] for i in order], [spreads[i] for i in order], model_hash)
