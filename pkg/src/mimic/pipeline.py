"""Glue between an ExperimentConfig and the model, data and statistics layers."""

from __future__ import annotations

import logging

import torch

from .config import DataConfig, ExperimentConfig, SuiteConfig
from .data import load_image_dir, make_blob_dataset, train_toy_suite
from .metrics import ReferenceSet
from .modelzoo import build_oracle_vlm, build_toy_suite, load_weights, module_hash
from .objective import ReferenceStats
from .statcapture import capture_encoder_stats, extract_bn_stats, load_stats

log = logging.getLogger(__name__)


def reference_data(cfg: DataConfig, image_size=32):
    """(images, labels) from an image directory (labels None) or the blob generator."""
    if cfg.image_dir:
        return load_image_dir(cfg.image_dir, image_size), None
    return make_blob_dataset(cfg.per_class, cfg.seed, image_size, noise=cfg.noise, amplitude=cfg.amplitude)


def build_suite(cfg: SuiteConfig, data: DataConfig | None = None):
    """Build (and optionally train) the configured model suite."""
    if cfg.source == "oracle":
        return build_oracle_vlm(cfg.image_size)
    if cfg.source == "file":
        return load_weights(cfg.path)
    suite = build_toy_suite(cfg.seed, cfg.image_size)
    if cfg.train is not None:
        images, labels = reference_data(data or DataConfig(), cfg.image_size)
        if labels is None:
            raise ValueError("training the toy suite needs labelled (synthetic) data")
        suite, accs = train_toy_suite(suite, images, labels, cfg.train.epochs, cfg.train.lr, cfg.train.seed)
        log.info("toy suite trained: %s", accs)
    return suite


def stats_encoder(suite, mode):
    if mode == "vit":
        if suite.classifier is None:
            raise ValueError("vit mode needs a suite with a classifier")
        return suite.classifier.backbone
    return suite.vision_encoder


def capture_reference_stats(exp: ExperimentConfig, suite, mode, label=None, layers=None, images=None, labels=None):
    """Encoder statistics for images of ``label`` (all images when None) plus verifier BN stats."""
    encoder = stats_encoder(suite, mode)
    if images is None:
        images, labels = reference_data(exp.data, suite.input_shape[-1])
    if label is not None and labels is not None:
        images = images[labels == label]
    if len(images) == 0:
        raise ValueError(f"no reference images for label {label}")
    layers = tuple(layers or exp.stats.layers or encoder.tap_ids)
    enc = capture_encoder_stats(encoder, list(images), layers, exp.stats.mode)
    bn = extract_bn_stats(suite.verifier) if suite.verifier is not None else None
    return ReferenceStats(enc, bn)


def reference_stats(exp: ExperimentConfig, suite, inv) -> ReferenceStats:
    """Load configured statistics files, or capture them when absent."""
    mode = inv.mode
    enc = bn = None
    if exp.stats.encoder_path:
        enc = load_stats(exp.stats.encoder_path, expected_layers=exp.stats.layers,
                         expected_model_hash=module_hash(stats_encoder(suite, mode)))
    if exp.stats.bn_path and suite.verifier is not None:
        bn = load_stats(exp.stats.bn_path, expected_model_hash=module_hash(suite.verifier))
    if enc is None:
        label = exp.stats.label if exp.stats.label is not None else (inv.target.class_label if inv.target else None)
        captured = capture_reference_stats(exp, suite, mode, label)
        enc = captured.encoder
        bn = bn or captured.bn
    elif bn is None and suite.verifier is not None:
        bn = extract_bn_stats(suite.verifier)
    return ReferenceStats(enc, bn)


def reference_set(exp: ExperimentConfig, suite) -> ReferenceSet:
    images, labels = reference_data(exp.data, suite.input_shape[-1])
    return ReferenceSet(images, labels)


def set_deterministic():
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
