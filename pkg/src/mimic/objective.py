"""Losses and image regularizers of the inversion objective.

Every term is a differentiable function of the image. Image arguments may be
a single C×H×W image or a B×C×H×W batch; per-image terms are summed within an
image and averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F

from .modelzoo import (
    LayerActivations,
    LogitSequence,
    ModelSuite,
    PromptSpec,
    append_tokens,
    as_batch,
    build_sequence,
    classifier_forward,
    embed_text,
    encode_image,
    lm_forward,
    target_ids,
    verifier_forward,
)


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveWeights:
    alpha1: float = 0.0  # TV1
    alpha2: float = 0.0  # TV2
    alpha3: float = 0.0  # l2 penalty
    beta1: float = 0.0   # verifier BN statistics
    beta2: float = 0.0   # patch seams
    gamma1: float = 1.0  # sequence / class cross-entropy
    gamma2: float = 0.0  # base feature loss

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise ObjectiveError(f"weight {f.name} must be a finite nonnegative number, got {v!r}")

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TargetSpec:
    """What the inversion aims at.

    vlm mode: ``target_text`` (tokenized lazily) or explicit ``target_token_ids``;
    ``class_label`` optionally names the verifier class used for scoring.
    vit mode: ``class_label`` is the classifier target.
    """

    mode: str = "vlm"
    target_text: str | None = None
    target_token_ids: tuple[int, ...] = ()
    class_label: int | None = None
    base_variant: str = "l2"

    def __post_init__(self):
        if self.mode not in ("vlm", "vit"):
            raise ObjectiveError(f"mode must be 'vlm' or 'vit', got {self.mode!r}")
        if self.base_variant not in ("l2", "kl"):
            raise ObjectiveError(f"base_variant must be 'l2' or 'kl', got {self.base_variant!r}")
        if self.mode == "vlm" and not self.target_token_ids and not self.target_text:
            raise ObjectiveError("vlm mode needs target_text or target_token_ids")
        if self.mode == "vit" and (self.class_label is None or self.class_label < 0):
            raise ObjectiveError("vit mode needs a nonnegative class_label")

    def token_ids(self, suite):
        if self.target_token_ids:
            return tuple(self.target_token_ids)
        return target_ids(suite, self.target_text).ids


@dataclass(frozen=True)
class ObjectiveOptions:
    """Conventions the method leaves open, each with its default."""

    sigma: str = "std"            # base loss compares std ("std") or variance ("var")
    rv_space: str = "var"          # verifier term compares variance ("var") or std ("std")
    l2_normalize: bool = False     # l2 penalty as mean instead of sum
    selection: str = "max_logit"   # sce position rule: "max_logit" or "decoded_match"
    answer: str = "teacher"        # answer positions: teacher-forced target prefix

    def __post_init__(self):
        checks = {"sigma": ("std", "var"), "rv_space": ("var", "std"),
                  "selection": ("max_logit", "decoded_match"), "answer": ("teacher",)}
        for name, allowed in checks.items():
            if getattr(self, name) not in allowed:
                raise ObjectiveError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")


TERMS = ("l_sce", "l_base", "r_tv1", "r_tv2", "r_l2", "r_prior", "r_patch", "r_v", "total")


@dataclass
class LossBreakdown:
    l_sce: torch.Tensor
    l_base: torch.Tensor
    r_tv1: torch.Tensor
    r_tv2: torch.Tensor
    r_l2: torch.Tensor
    r_prior: torch.Tensor
    r_patch: torch.Tensor
    r_v: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) if torch.is_tensor(getattr(self, k)) else float(getattr(self, k)) for k in TERMS}


# ---------------------------------------------------------------------------
# task losses


def sce_loss(logits: LogitSequence, target_ids, selection="max_logit"):
    """Cross-entropy of each target token at its highest-logit output position.

    ``logits`` covers the output positions (P×V, or B×P×V). The position is
    chosen on detached raw logits, lowest index on ties; the log-probability
    there carries the gradient. Per-token losses are averaged.

    With ``selection="decoded_match"`` the loss instead averages over the
    positions whose detached argmax token equals the target; a target that is
    never decoded contributes zero.
    """
    target_ids = list(target_ids)
    if not target_ids:
        raise ObjectiveError("sce_loss needs at least one target token")
    raw = logits.raw_logits
    if raw.dim() == 2:
        raw = raw.unsqueeze(0)
    v = raw.shape[-1]
    if any(not 0 <= t < v for t in target_ids):
        raise ObjectiveError(f"target ids must lie in [0, {v})")
    if raw.shape[1] < len(target_ids):
        raise ObjectiveError(f"{raw.shape[1]} output positions for {len(target_ids)} target tokens")
    logp = raw.log_softmax(-1)
    sg = raw.detach()
    per_token = []
    for tau in target_ids:
        if selection == "max_logit":
            pos = torch.argmax(sg[..., tau], dim=1)
            per_token.append(-logp[torch.arange(raw.shape[0]), pos, tau])
        elif selection == "decoded_match":
            hit = (torch.argmax(sg, dim=-1) == tau).to(raw.dtype)
            n = hit.sum(dim=1).clamp_min(1.0)
            per_token.append(-(hit * logp[..., tau]).sum(dim=1) / n)
        else:
            raise ObjectiveError(f"unknown selection rule {selection!r}")
    return torch.stack(per_token).mean()


def ce_loss(class_logits, y: int):
    logits = class_logits if class_logits.dim() == 2 else class_logits.unsqueeze(0)
    k = logits.shape[-1]
    if not 0 <= y < k:
        raise ObjectiveError(f"class label {y} out of range for {k} classes")
    target = torch.full((logits.shape[0],), y, dtype=torch.long)
    return F.cross_entropy(logits, target)


# ---------------------------------------------------------------------------
# feature statistics


def _token_stats(z):
    mu = z.mean(dim=-2)
    var = z.var(dim=-2, unbiased=False)
    return mu, var


def _ref(arr, like):
    return torch.as_tensor(np.asarray(arr), dtype=like.dtype, device=like.device)


def _check_layers(acts, ref):
    if tuple(sorted(acts.layers)) != tuple(ref.layer_ids):
        raise ObjectiveError(f"layer sets differ: activations {sorted(acts.layers)} vs reference {list(ref.layer_ids)}")


def base_loss_l2(acts, ref, sigma="std"):
    """Squared distance between per-channel token mean/spread and the reference.

    Spread is standard deviation by default (``sigma="var"`` compares variances).
    """
    _check_layers(acts, ref)
    total = 0.0
    for layer in ref.layer_ids:
        z = acts[layer]
        mu, var = _token_stats(z)
        ref_mu = _ref(ref.mean[layer], z)
        ref_sd = _ref(ref.std[layer], z)
        if sigma == "std":
            spread, ref_spread = var.clamp_min(1e-24).sqrt(), ref_sd
        else:
            spread, ref_spread = var, ref_sd ** 2
        term = ((mu - ref_mu) ** 2).sum(-1) + ((spread - ref_spread) ** 2).sum(-1)
        total = total + term
    return total.mean() if torch.is_tensor(total) and total.dim() else total


def gaussian_kl(mu_p, var_p, mu_q, var_q):
    """KL(N(mu_p, var_p) || N(mu_q, var_q)), elementwise."""
    return 0.5 * torch.log(var_q / var_p) + (var_p + (mu_p - mu_q) ** 2) / (2 * var_q) - 0.5


def base_loss_kl(acts, ref):
    """Sum over layers and channels of the Gaussian KL from synthesis to reference."""
    _check_layers(acts, ref)
    total = 0.0
    for layer in ref.layer_ids:
        z = acts[layer]
        ref_var = _ref(ref.std[layer], z) ** 2
        if bool((ref_var <= 0).any()):
            raise ObjectiveError(f"reference variance is zero in layer {layer}: singular Gaussian")
        mu, var = _token_stats(z)
        total = total + gaussian_kl(mu, var.clamp_min(1e-24), _ref(ref.mean[layer], z), ref_var).sum(-1)
    return total.mean() if torch.is_tensor(total) and total.dim() else total


def verifier_regularizer(batch_stats, running_stats, space="var"):
    """Sum over BN layers of squared mean and variance gaps to the running stats."""
    if len(batch_stats) != len(running_stats):
        raise ObjectiveError(f"BN layer count differs: batch {len(batch_stats)} vs running {len(running_stats)}")
    total = 0.0
    for (mu, var), (rmu, rvar) in zip(batch_stats, running_stats):
        rmu, rvar = _ref(rmu, mu), _ref(rvar, mu)
        if mu.shape != rmu.shape:
            raise ObjectiveError(f"BN channel count differs: {tuple(mu.shape)} vs {tuple(rmu.shape)}")
        if space == "std":
            var, rvar = var.clamp_min(1e-24).sqrt(), rvar.sqrt()
        total = total + ((mu - rmu) ** 2).sum() + ((var - rvar) ** 2).sum()
    return total


# ---------------------------------------------------------------------------
# image priors


def _chw(image):
    if image.dim() == 2:
        return image.unsqueeze(0)
    return image


def _per_image(values):
    # values summed over C, H, W already; average any batch axis
    return values.mean() if values.dim() else values


def tv1(image):
    """Anisotropic total variation: sum of |neighbour differences|."""
    x = _chw(image)
    dh = (x[..., :, 1:] - x[..., :, :-1]).abs().sum(dim=(-3, -2, -1))
    dv = (x[..., 1:, :] - x[..., :-1, :]).abs().sum(dim=(-3, -2, -1))
    return _per_image(dh + dv)


def tv2(image):
    """Total variation with squared neighbour differences."""
    x = _chw(image)
    dh = ((x[..., :, 1:] - x[..., :, :-1]) ** 2).sum(dim=(-3, -2, -1))
    dv = ((x[..., 1:, :] - x[..., :-1, :]) ** 2).sum(dim=(-3, -2, -1))
    return _per_image(dh + dv)


def l2_penalty(image, normalize=False):
    x = _chw(image)
    sq = (x ** 2).sum(dim=(-3, -2, -1))
    if normalize:
        sq = sq / x.shape[-3:].numel()
    return _per_image(sq)


def prior_regularizer(image, alpha1, alpha2, alpha3, normalize_l2=False):
    return alpha1 * tv1(image) + alpha2 * tv2(image) + alpha3 * l2_penalty(image, normalize_l2)


def patch_regularizer(image, patch_size):
    """Squared differences across every internal patch seam.

    Pairs are columns (jP-1, jP) for j = 1..W/P-1 and rows (iP-1, iP) for
    i = 1..H/P-1, summed over channels.
    """
    x = _chw(image)
    h, w = x.shape[-2:]
    p = int(patch_size)
    if p < 1 or h % p or w % p:
        raise ObjectiveError(f"image {h}×{w} is not divisible by patch size {p}")
    cols = torch.arange(p, w, p)
    rows = torch.arange(p, h, p)
    dc = ((x[..., :, cols] - x[..., :, cols - 1]) ** 2).sum(dim=(-3, -2, -1))
    dr = ((x[..., rows, :] - x[..., rows - 1, :]) ** 2).sum(dim=(-3, -2, -1))
    return _per_image(dc + dr)


def aggregated_regularizer(image, batch_stats, running_stats, weights: ObjectiveWeights, patch_size,
                           options: ObjectiveOptions = ObjectiveOptions()):
    r = prior_regularizer(image, weights.alpha1, weights.alpha2, weights.alpha3, options.l2_normalize)
    r = r + weights.beta2 * patch_regularizer(image, patch_size)
    if weights.beta1:
        r = r + weights.beta1 * verifier_regularizer(batch_stats, running_stats, options.rv_space)
    return r


# ---------------------------------------------------------------------------
# full objective


@dataclass
class ReferenceStats:
    """Reference statistics consumed by the objective (either may be absent)."""

    encoder: object = None  # statcapture.LayerStatistics
    bn: object = None       # statcapture.BNStatistics


def _zero(like):
    return like.new_zeros(())


def _task_vlm(suite, batch, prompt, target, options, layers):
    tokens, acts = encode_image(suite.vision_encoder, batch, layers=layers)
    _, text_emb = embed_text(suite, prompt)
    ids = target.token_ids(suite)
    seq = append_tokens(suite, build_sequence(suite, text_emb, tokens), ids[:-1])
    out = lm_forward(suite, seq).positions(seq.answer_start)
    return sce_loss(out, ids, options.selection), acts


def _task_vit(suite, batch, target, layers):
    clf = suite.classifier
    if clf is None:
        raise ObjectiveError("vit mode needs a suite with a classifier")
    _, cls, acts = clf.backbone(batch, taps=layers)
    return ce_loss(clf.head(cls), target.class_label), LayerActivations(acts)


def total_objective(suite: ModelSuite, image, prompt: PromptSpec | None, target: TargetSpec,
                    ref_stats: ReferenceStats | None, weights: ObjectiveWeights,
                    options: ObjectiveOptions = ObjectiveOptions()) -> LossBreakdown:
    """gamma1 * task loss + gamma2 * base feature loss + aggregated regularizer.

    The task loss is the sequence cross-entropy through the language model
    (vlm mode) or the classifier cross-entropy (vit mode).
    """
    ref_stats = ref_stats or ReferenceStats()
    if weights.gamma2 > 0 and ref_stats.encoder is None:
        raise ObjectiveError("gamma2 > 0 needs reference encoder statistics")
    if weights.beta1 > 0 and ref_stats.bn is None:
        raise ObjectiveError("beta1 > 0 needs verifier BN statistics")
    if weights.beta1 > 0 and suite.verifier is None:
        raise ObjectiveError("beta1 > 0 needs a suite with a verifier")
    batch = as_batch(image)
    layers = tuple(ref_stats.encoder.layer_ids) if ref_stats.encoder is not None else ()

    if target.mode == "vlm":
        if prompt is None:
            raise ObjectiveError("vlm mode needs a prompt")
        l_task, acts = _task_vlm(suite, batch, prompt, target, options, layers)
    else:
        l_task, acts = _task_vit(suite, batch, target, layers)

    if ref_stats.encoder is not None:
        if target.base_variant == "kl":
            l_base = base_loss_kl(acts, ref_stats.encoder)
        else:
            l_base = base_loss_l2(acts, ref_stats.encoder, options.sigma)
    else:
        l_base = _zero(batch)

    if ref_stats.bn is not None and suite.verifier is not None:
        _, stats = verifier_forward(suite.verifier, batch)
        r_v = verifier_regularizer(stats, ref_stats.bn.pairs(), options.rv_space)
    else:
        r_v = _zero(batch)

    r_tv1, r_tv2 = tv1(batch), tv2(batch)
    r_l2 = l2_penalty(batch, options.l2_normalize)
    r_prior = weights.alpha1 * r_tv1 + weights.alpha2 * r_tv2 + weights.alpha3 * r_l2
    r_patch = patch_regularizer(batch, suite.patch_size)
    total = (weights.gamma1 * l_task + weights.gamma2 * l_base + weights.beta1 * r_v
             + weights.beta2 * r_patch + r_prior)
    return LossBreakdown(l_task, l_base, r_tv1, r_tv2, r_l2, r_prior, r_patch, r_v, total)
