"""Procedural reference images and toy-model training.

Class ``c`` of the blob dataset is a Gaussian blob raised in colour channel
``c`` (0 red, 1 green, 2 blue) on a Gaussian-noise background.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

DATASET_VERSION = "blobs-v1"
CONCEPTS = ("red", "green", "blue")


def make_blob_dataset(per_class=64, seed=0, image_size=32, num_classes=3, noise=0.3, amplitude=1.5):
    """Return (images N×3×H×W float32 tensor, labels N int64 tensor), class-major order."""
    rng = np.random.Generator(np.random.PCG64(seed))
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    images, labels = [], []
    for c in range(num_classes):
        for _ in range(per_class):
            img = rng.normal(0.0, noise, size=(3, image_size, image_size))
            cy, cx = rng.uniform(0.25, 0.75, size=2) * image_size
            sigma = rng.uniform(0.12, 0.3) * image_size
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            img[c % 3] += amplitude * blob
            images.append(img)
            labels.append(c)
    return torch.tensor(np.stack(images), dtype=torch.float32), torch.tensor(labels)


def load_image_dir(path, image_size=None):
    """Load every PNG/JPEG in a directory as a 3×H×W float tensor in [0, 1]."""
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory not found: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise FileNotFoundError(f"no images in {root}")
    out = []
    for f in files:
        im = Image.open(f).convert("RGB")
        if image_size is not None and im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        out.append(torch.tensor(np.asarray(im), dtype=torch.float32).permute(2, 0, 1) / 255.0)
    return torch.stack(out)


def train_classifier(model, images, labels, epochs=10, lr=3e-3, batch_size=32, seed=0):
    """Train a module in place with Adam + cross-entropy; returns train accuracy.

    BatchNorm running statistics update during training, as usual.
    """
    gen = torch.Generator().manual_seed(seed)
    model.requires_grad_(True)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = len(images)
    for epoch in range(epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out = model(images[idx])
            logits = out[0] if isinstance(out, tuple) else out
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.requires_grad_(False)
    model.eval()
    with torch.no_grad():
        out = model(images)
        logits = out[0] if isinstance(out, tuple) else out
        acc = float((logits.argmax(-1) == labels).float().mean())
    log.info("trained %s: train accuracy %.3f", type(model).__name__, acc)
    return acc


def train_toy_suite(suite, images, labels, epochs=10, lr=3e-3, seed=0):
    """Copy of ``suite`` with verifier and classifier trained independently.

    Returns (suite, {"verifier": acc, "classifier": acc}).
    """
    import copy

    ver = copy.deepcopy(suite.verifier)
    clf = copy.deepcopy(suite.classifier)
    accs = {
        "verifier": train_classifier(ver, images, labels, epochs, lr, seed=seed),
        "classifier": train_classifier(clf, images, labels, epochs, lr, seed=seed + 1),
    }
    return dataclasses.replace(suite, verifier=ver, classifier=clf), accs
