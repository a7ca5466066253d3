"""Run-level evaluation: every enabled metric in one report."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..modelzoo import ModelSuite, clip_embeddings
from .image import FeatureSet, MetricError, clip_score, fid, inception_score, lpips_like, score_infinity, top_k_hits
from .text import text_scores

log = logging.getLogger(__name__)

# leaderboard column order
COLUMNS = ("top1", "top5", "is_inf", "fid_inf", "is", "fid", "lpips", "clip_score")


@dataclass(frozen=True)
class MetricOptions:
    image_metrics: bool = True
    text_metrics: bool = True
    top_k_classifier: str = "verifier"
    is_classifier: str = "verifier"
    is_inf_classifiers: tuple[str, ...] = ("verifier", "classifier")
    n_grid: tuple[int, ...] | None = None   # default: {N//2, N} when N >= 4
    resamples: int = 5
    lpips_refs: int = 8
    clip_legacy: bool = False
    bleu_max_n: int = 1
    seed: int = 0


@dataclass
class ReferenceSet:
    images: torch.Tensor | None = None
    labels: torch.Tensor | None = None

    def select(self, labels):
        if self.images is None:
            return None
        if self.labels is None or labels is None:
            return self.images
        keep = torch.isin(self.labels, torch.as_tensor(sorted(set(np.atleast_1d(labels).tolist()))))
        return self.images[keep]


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __getattr__(self, name):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def to_json(self) -> dict:
        return {**{k: self.values[k] for k in sorted(self.values)}, "meta": self.meta}

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    def row(self) -> str:
        cells = []
        for col in COLUMNS:
            if col == "is_inf":
                keys = sorted(k for k in self.values if k.startswith("is_inf["))
                cells.extend(f"{self.values[k]:.4f}" for k in keys)
                continue
            v = self.values.get(col)
            cells.append("-" if v is None else f"{v:.4f}")
        return " | ".join(cells)


def classifiers_of(suite: ModelSuite) -> dict:
    out = {}
    if suite.verifier is not None:
        out["verifier"] = lambda x: suite.verifier(x)[0]
    if suite.classifier is not None:
        out["classifier"] = suite.classifier
    return out


def verifier_features(suite, images):
    with torch.no_grad():
        return suite.verifier(images.to(suite.dtype))[1].double().numpy()


def verifier_maps(suite):
    def extract(image):
        batch = image if image.dim() == 4 else image[None]
        return suite.verifier(batch.to(suite.dtype))[2]
    return extract


def default_grid(n):
    return (max(2, n // 2), n) if n >= 4 else None


def evaluate_images(images, suite: ModelSuite, references: ReferenceSet | None = None,
                    options: MetricOptions = MetricOptions(), labels=None, caption: str | None = None,
                    decoded=None, target_text: str | None = None) -> MetricReport:
    """Score a batch of synthesized images (and decoded answers).

    ``labels`` (one or per image) enables top-k; ``references`` enables FID
    and LPIPS; ``caption`` enables CLIPScore; ``decoded`` with
    ``target_text`` enables the text metrics. Unavailable metrics are
    omitted with a warning.
    """
    images = images.detach().float()
    n = len(images)
    values, meta = {}, {"n_images": n, "options": {k: getattr(options, k) for k in options.__dataclass_fields__}}
    clfs = classifiers_of(suite)
    with torch.no_grad():
        logits = {name: np.asarray(f(images.to(suite.dtype)).double()) for name, f in clfs.items()}

    if options.image_metrics:
        top = options.top_k_classifier
        if labels is not None and top in logits:
            k_cls = logits[top].shape[1]
            values["top1"] = float(top_k_hits(logits[top], labels, 1).mean())
            values["top5"] = float(top_k_hits(logits[top], labels, min(5, k_cls)).mean())
            meta["top5_k"] = min(5, k_cls)
            meta["top_k_classifier"] = top
        else:
            log.warning("top-k accuracy skipped: no labels or no %r classifier", top)

        def probs(name, idx=slice(None)):
            z = logits[name][idx]
            e = np.exp(z - z.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)

        if options.is_classifier in logits:
            values["is"] = inception_score(probs(options.is_classifier))
        grid = options.n_grid or default_grid(n)
        meta["n_grid"] = list(grid) if grid else None
        for name in options.is_inf_classifiers:
            if name not in logits:
                log.warning("IS_inf skipped for missing classifier %r", name)
                continue
            if grid is None:
                log.warning("IS_inf skipped: %d images is too few to extrapolate", n)
                break
            values[f"is_inf[{name}]"] = score_infinity(lambda idx, name=name: inception_score(probs(name, idx)),
                                                       np.arange(n), grid, options.resamples, options.seed)

        refs = references.select(labels) if references is not None else None
        if refs is None or len(refs) == 0:
            log.warning("no reference images: FID, FID_inf and LPIPS omitted")
        elif suite.verifier is None:
            log.warning("no feature extractor (verifier): FID, FID_inf and LPIPS omitted")
        else:
            ref_feats = FeatureSet(verifier_features(suite, refs), "verifier-gap")
            syn_feats = FeatureSet(verifier_features(suite, images), "verifier-gap")
            meta["fid_extractor"] = "verifier-gap"
            meta["n_references"] = len(refs)
            if n >= 2:
                values["fid"] = fid(syn_feats, ref_feats)
                fgrid = tuple(g for g in (grid or ()) if g >= 2)
                if len(set(fgrid)) >= 2:
                    values["fid_inf"] = score_infinity(lambda idx: fid(syn_feats.features[idx], ref_feats.features),
                                                       np.arange(n), fgrid, options.resamples, options.seed)
            else:
                log.warning("FID needs at least two synthesized images; got %d", n)
            extractor = verifier_maps(suite)
            pool = refs[: options.lpips_refs]
            values["lpips"] = float(np.mean([lpips_like(extractor, a, b) for a in images for b in pool]))

        if caption is not None:
            try:
                img_emb, txt_emb = clip_embeddings(suite, images, caption)
                values["clip_score"] = float(np.mean([clip_score(e, txt_emb, options.clip_legacy) for e in img_emb]))
            except (MetricError, ValueError) as e:
                log.warning("CLIPScore skipped: %s", e)

    if options.text_metrics and decoded and target_text:
        scores = [text_scores(d, target_text, options.bleu_max_n) for d in decoded]
        for key in ("bleu", "meteor", "rouge_l"):
            values[key] = float(np.mean([s[key] for s in scores]))
        meta["decoded"] = list(decoded)
        meta["target_text"] = target_text
    return MetricReport(values, meta)


def evaluate_run(run_result, suite: ModelSuite, references: ReferenceSet | None = None,
                 options: MetricOptions = MetricOptions(), run_dir=None) -> MetricReport:
    """Evaluate a finished run and write ``metrics.json`` into ``run_dir`` if given."""
    target = run_result.config.get("target") or {}
    mode = run_result.config.get("mode", "vlm")
    label = target.get("class_label")
    text = target.get("target_text")
    caption = text if mode == "vlm" else (_concept_name(label))
    report = evaluate_images(run_result.final_image, suite, references, options, labels=label, caption=caption,
                             decoded=run_result.decoded, target_text=text)
    report.meta["seed"] = run_result.seed
    if run_dir is not None:
        report.write(Path(run_dir) / "metrics.json")
    return report


def _concept_name(label):
    from ..data import CONCEPTS

    return CONCEPTS[label] if label is not None and 0 <= label < len(CONCEPTS) else None
