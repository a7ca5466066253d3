import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import random_images, small_suite, toy_reference
from mimic.config import CLASSIFIER_WEIGHTS
from mimic.modelzoo import LayerActivations, LogitSequence, PromptSpec
from mimic.objective import (
    ObjectiveError,
    ObjectiveWeights,
    TargetSpec,
    aggregated_regularizer,
    base_loss_kl,
    base_loss_l2,
    ce_loss,
    l2_penalty,
    patch_regularizer,
    prior_regularizer,
    sce_loss,
    total_objective,
    tv1,
    tv2,
    verifier_regularizer,
)
from mimic.statcapture import LayerStatistics

HAND = torch.tensor([[0.0, 1.0], [2.0, 3.0]], dtype=torch.float64)

images = arrays(np.float64, (2, 4, 4), elements=st.floats(-3, 3, allow_nan=False, allow_infinity=False))


def logits_from_probs(p):
    return LogitSequence(torch.log(torch.tensor(p, dtype=torch.float64)))


def layer_stats(mean, std):
    return LayerStatistics(tuple(mean), {k: np.asarray(v, float) for k, v in mean.items()},
                           {k: np.asarray(v, float) for k, v in std.items()})


def acts_with(mu, sd):
    """Two-token activations with exactly the given per-channel mean and std."""
    mu, sd = torch.tensor(mu, dtype=torch.float64), torch.tensor(sd, dtype=torch.float64)
    return torch.stack([mu - sd, mu + sd])


# ---------------------------------------------------------------------------
# task losses


def test_sce_closed_forms():
    # one position, V = 4
    assert float(sce_loss(logits_from_probs([[1e-300, 1.0, 1e-300, 1e-300]]), [1])) == pytest.approx(0.0, abs=1e-12)
    assert float(sce_loss(logits_from_probs([[0.25] * 4]), [2])) == pytest.approx(math.log(4), abs=1e-9)
    assert float(sce_loss(logits_from_probs([[0.5, 0.2, 0.2, 0.1]]), [0])) == pytest.approx(math.log(2), abs=1e-9)


def test_sce_selects_highest_logit_position_lowest_index_on_ties():
    raw = torch.tensor([[0.0, 1.0, 0.0], [0.0, 3.0, 2.9], [0.0, 3.0, 0.0]], dtype=torch.float64)
    loss = sce_loss(LogitSequence(raw), [1])
    assert float(loss) == pytest.approx(-float(raw[1].log_softmax(-1)[1]))


def test_sce_multi_token_mean_and_errors():
    raw = torch.randn(4, 6, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    seq = LogitSequence(raw)
    both = sce_loss(seq, [1, 3])
    assert float(both) == pytest.approx(0.5 * (float(sce_loss(seq, [1])) + float(sce_loss(seq, [3]))))
    with pytest.raises(ObjectiveError):
        sce_loss(seq, [])
    with pytest.raises(ObjectiveError):
        sce_loss(seq, [6])


def test_sce_selection_is_stop_gradient():
    """Raising another position's target logit, short of overtaking, leaves the gradient unchanged."""
    base = torch.tensor([[0.0, 2.0, 0.0], [0.0, 0.5, 1.0]], dtype=torch.float64)
    grads = []
    for bump in (0.0, 1.0):
        raw = base.clone()
        raw[1, 1] += bump
        raw.requires_grad_(True)
        (g,) = torch.autograd.grad(sce_loss(LogitSequence(raw), [1]), raw)
        grads.append(g[0])
        assert torch.all(g[1] == 0)
    assert torch.equal(grads[0], grads[1])


def test_sce_decoded_match_variant():
    raw = torch.tensor([[0.0, 2.0, 0.0], [3.0, 0.0, 0.0]], dtype=torch.float64)
    assert float(sce_loss(LogitSequence(raw), [2], selection="decoded_match")) == 0.0
    hit = float(sce_loss(LogitSequence(raw), [1], selection="decoded_match"))
    assert hit == pytest.approx(-float(raw[0].log_softmax(-1)[1]))


def test_ce_closed_forms():
    assert float(ce_loss(torch.tensor([1e4, 0.0, 0.0]), 0)) == pytest.approx(0.0, abs=1e-12)
    assert float(ce_loss(torch.zeros(3, dtype=torch.float64), 1)) == pytest.approx(math.log(3), abs=1e-9)
    assert float(ce_loss(torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64), 0)) == \
        pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-6)
    with pytest.raises(ObjectiveError):
        ce_loss(torch.zeros(3), 3)


# ---------------------------------------------------------------------------
# feature statistics


def test_base_l2_closed_forms():
    ref = layer_stats({2: [0.0, 0.0]}, {2: [1.0, 1.0]})
    acts = LayerActivations({2: acts_with([1.0, 0.0], [1.0, 1.0])})
    assert float(base_loss_l2(acts, ref)) == pytest.approx(1.0, abs=1e-12)
    ref2 = layer_stats({2: [0.0, 0.0], 4: [0.0, 0.0]}, {2: [1.0, 1.0], 4: [1.0, 1.0]})
    acts2 = LayerActivations({2: acts_with([1.0, 0.0], [1.0, 1.0]), 4: acts_with([0.0, 1.0], [1.0, 1.0])})
    assert float(base_loss_l2(acts2, ref2)) == pytest.approx(2.0, abs=1e-12)


def test_base_kl_closed_forms():
    ref = layer_stats({0: [0.0]}, {0: [1.0]})
    assert float(base_loss_kl(LayerActivations({0: acts_with([1.0], [1.0])}), ref)) == pytest.approx(0.5, abs=1e-12)
    ref4 = layer_stats({0: [0.0]}, {0: [2.0]})
    expected = math.log(2) + 1 / 8 - 1 / 2
    assert float(base_loss_kl(LayerActivations({0: acts_with([0.0], [1.0])}), ref4)) == \
        pytest.approx(expected, abs=1e-9)
    with pytest.raises(ObjectiveError, match="zero"):
        base_loss_kl(LayerActivations({0: acts_with([0.0], [1.0])}), layer_stats({0: [0.0]}, {0: [0.0]}))


def test_base_loss_layer_mismatch():
    ref = layer_stats({1: [0.0]}, {1: [1.0]})
    with pytest.raises(ObjectiveError, match="layer sets"):
        base_loss_l2(LayerActivations({2: acts_with([0.0], [1.0])}), ref)


def test_verifier_regularizer_closed_forms():
    one = [(torch.tensor([1.0]), torch.tensor([2.0]))]
    assert float(verifier_regularizer(one, [(np.array([0.0]), np.array([2.0]))])) == 1.0
    two = one * 2
    assert float(verifier_regularizer(two, [(np.array([0.0]), np.array([2.0]))] * 2)) == 2.0
    with pytest.raises(ObjectiveError, match="count"):
        verifier_regularizer(two, [(np.array([0.0]), np.array([2.0]))])


# ---------------------------------------------------------------------------
# priors


def test_prior_closed_forms():
    assert tv1(HAND).item() == 6.0 and tv2(HAND).item() == 10.0
    assert l2_penalty(torch.ones(3, 2, 2)).item() == 12.0
    assert float(prior_regularizer(HAND, 0, 0, 0)) == 0.0
    assert float(prior_regularizer(HAND, 1, 0, 0)) == 6.0
    a = CLASSIFIER_WEIGHTS
    assert math.isfinite(float(prior_regularizer(random_images(1)[0], a["alpha1"], a["alpha2"], a["alpha3"])))


def test_patch_closed_forms():
    assert patch_regularizer(HAND, 1).item() == 10.0 == tv2(HAND).item()
    assert patch_regularizer(HAND, 2).item() == 0.0
    with pytest.raises(ObjectiveError, match="divisible"):
        patch_regularizer(torch.zeros(3, 6, 6), 4)


def test_patch_only_counts_seams():
    x = torch.zeros(1, 4, 4, dtype=torch.float64)
    x[0, :, 2:] = 1.0
    assert patch_regularizer(x, 2).item() == 4.0
    x = torch.zeros(1, 4, 4, dtype=torch.float64)
    x[0, :, 1:] = 1.0
    assert patch_regularizer(x, 2).item() == 0.0


def test_aggregated_regularizer_linearity():
    img = random_images(1)[0]
    stats = [(torch.tensor([1.0]), torch.tensor([1.0]))]
    running = [(np.array([0.0]), np.array([1.0]))]
    assert float(aggregated_regularizer(img, stats, running, ObjectiveWeights(gamma1=0.0), 4)) == 0.0
    w = ObjectiveWeights(gamma1=0.0, beta1=2.0)
    assert float(aggregated_regularizer(img, stats, running, w, 4)) == 2.0
    a = ObjectiveWeights(**CLASSIFIER_WEIGHTS)
    assert math.isfinite(float(aggregated_regularizer(img, stats, running, a, 4)))


@settings(max_examples=50, deadline=None)
@given(images, st.floats(-5, 5))
def test_tv_and_patch_translation_invariance(x, c):
    t = torch.from_numpy(x)
    for f in (tv1, tv2, lambda im: patch_regularizer(im, 2)):
        assert float(f(t + c)) == pytest.approx(float(f(t)), rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(images)
def test_regularizers_are_nonnegative(x):
    t = torch.from_numpy(x)
    for f in (tv1, tv2, l2_penalty, lambda im: patch_regularizer(im, 2)):
        assert float(f(t)) >= 0.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-4, 4)),
       arrays(np.float64, (3,), elements=st.floats(-2, 2)),
       arrays(np.float64, (3,), elements=st.floats(0.1, 3)))
def test_feature_losses_are_nonnegative(z, mu, sd):
    acts = LayerActivations({1: torch.from_numpy(z)})
    ref = layer_stats({1: mu}, {1: sd})
    assert float(base_loss_l2(acts, ref)) >= 0.0
    assert float(base_loss_kl(acts, ref)) >= -1e-12
    batch = [(torch.from_numpy(mu), torch.from_numpy(sd ** 2))]
    assert float(verifier_regularizer(batch, [(mu + 1, sd)])) >= 0.0


# ---------------------------------------------------------------------------
# total objective


@pytest.fixture(scope="module")
def suite():
    return small_suite(seed=2)


@pytest.fixture(scope="module")
def vit_case(suite):
    ref = toy_reference(suite, suite.classifier.backbone)
    return suite, ref, TargetSpec("vit", class_label=0), random_images(2, 16, seed=4)


def test_zero_weights_zero_total(vit_case):
    suite, ref, target, x = vit_case
    w = ObjectiveWeights(gamma1=0.0)
    assert float(total_objective(suite, x, None, target, ref, w).total) == 0.0


def test_breakdown_recombines(vit_case):
    suite, ref, target, x = vit_case
    w = ObjectiveWeights(alpha1=0.1, alpha2=0.2, alpha3=0.3, beta1=0.4, beta2=0.5, gamma1=0.6, gamma2=0.7)
    p = total_objective(suite, x, None, target, ref, w)
    parts = p.floats()
    recombined = (0.6 * parts["l_sce"] + 0.7 * parts["l_base"] + 0.4 * parts["r_v"] + 0.5 * parts["r_patch"]
                  + 0.1 * parts["r_tv1"] + 0.2 * parts["r_tv2"] + 0.3 * parts["r_l2"])
    assert parts["total"] == pytest.approx(recombined, rel=1e-12, abs=1e-9)
    assert parts["r_prior"] == pytest.approx(0.1 * parts["r_tv1"] + 0.2 * parts["r_tv2"] + 0.3 * parts["r_l2"])


def test_total_matches_term_by_term_oracle(suite):
    ref = toy_reference(suite, suite.vision_encoder)
    x = random_images(1, 16, seed=9)
    w = ObjectiveWeights(**CLASSIFIER_WEIGHTS)
    p = total_objective(suite, x, PromptSpec("red"), TargetSpec("vlm", "red"), ref, w)
    from mimic.modelzoo import append_tokens, build_sequence, embed_text, encode_image, lm_forward, verifier_forward

    tokens, acts = encode_image(suite.vision_encoder, x, layers=ref.encoder.layer_ids)
    _, emb = embed_text(suite, PromptSpec("red"))
    red = suite.vocab.id("red")
    seq = build_sequence(suite, emb, tokens)
    out = lm_forward(suite, seq).raw_logits[0, seq.answer_start:]
    pos = int(torch.argmax(out[:, red]))
    l_sce = -float(out[pos].log_softmax(-1)[red])
    l_base = float(base_loss_l2(acts, ref.encoder))
    _, stats = verifier_forward(suite.verifier, x)
    r_v = float(verifier_regularizer(stats, ref.bn.pairs()))
    expected = (0.3 * l_sce + 5e-5 * l_base + 1e-4 * r_v + 4e-3 * float(patch_regularizer(x, 4))
                + 3e-4 * float(tv1(x)) + 1e-4 * float(tv2(x)) + 1e-5 * float(l2_penalty(x)))
    assert float(p.total) == pytest.approx(expected, rel=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(["alpha1", "alpha2", "alpha3", "beta1", "beta2", "gamma1", "gamma2"]),
       st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_total_is_affine_in_each_weight(vit_case, name, a, b):
    suite, ref, target, x = vit_case
    base = dict(alpha1=0.1, alpha2=0.1, alpha3=0.1, beta1=0.1, beta2=0.1, gamma1=0.1, gamma2=0.1)
    f = lambda v: float(total_objective(suite, x, None, target, ref, ObjectiveWeights(**{**base, name: v})).total)  # noqa: E731
    f0, fa, fb = f(0.0), f(a), f(b)
    slope = f(1.0) - f0
    assert fa == pytest.approx(f0 + a * slope, rel=1e-9, abs=1e-9)
    assert fb == pytest.approx(f0 + b * slope, rel=1e-9, abs=1e-9)


def test_missing_statistics_are_errors(suite):
    x = random_images(1, 16)
    with pytest.raises(ObjectiveError, match="gamma2"):
        total_objective(suite, x, None, TargetSpec("vit", class_label=0), None, ObjectiveWeights(gamma2=1.0))
    with pytest.raises(ObjectiveError, match="beta1"):
        total_objective(suite, x, None, TargetSpec("vit", class_label=0), None, ObjectiveWeights(beta1=1.0))


def test_weights_validation():
    with pytest.raises(ValueError):
        ObjectiveWeights(alpha1=-1.0)
    with pytest.raises(ValueError):
        ObjectiveWeights(beta2=float("nan"))
