import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimic.config import (
    CLASSIFIER_WEIGHTS,
    BUILTIN_PRESETS,
    ABLATION_ORDER,
    ConfigError,
    deep_merge,
    parse_config,
    parse_config_dict,
)
from mimic.objective import ObjectiveWeights


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2) if not isinstance(doc, str) else doc)
    return path


def test_classifier_preset_file_parses(tmp_path):
    doc = {"inversion": {"mode": "vit", "iterations": 3000, "batch_size": 32, "schedule": "cosine",
                         "target": {"class_label": 1}, "weights": dict(CLASSIFIER_WEIGHTS)}}
    inv = parse_config(write(tmp_path, doc)).inversion_config()
    w = inv.weights
    assert (w.gamma1, w.gamma2, w.beta1, w.beta2, w.alpha1, w.alpha2, w.alpha3) == \
        (0.3, 5e-5, 1e-4, 4e-3, 3e-4, 1e-4, 1e-5)
    assert (inv.iterations, inv.batch_size) == (3000, 32)
    built_in = parse_config_dict({"inversion": {"target": {"class_label": 1}}, "preset": ["classifier"]})
    assert built_in.inversion_config().weights == w


def test_negative_iterations_named(tmp_path):
    with pytest.raises(ConfigError, match="inversion.*iterations"):
        parse_config(write(tmp_path, {"inversion": {"iterations": -5, "target": {"target_text": "red"}}}))


def test_invalid_weight_field_named():
    with pytest.raises(ConfigError, match=r"inversion\.weights"):
        parse_config_dict({"inversion": {"weights": {"alpha9": 1.0}, "target": {"target_text": "red"}}})
    with pytest.raises(ConfigError, match=r"inversion\.weights.*alpha1"):
        parse_config_dict({"inversion": {"weights": {"alpha1": "big"}, "target": {"target_text": "red"}}})


def test_defaults_echoed():
    inv = parse_config_dict({"inversion": {"target": {"target_text": "red"}}}).inversion_config()
    assert inv.echo()["betas"] == (0.9, 0.999)
    assert inv.prompt.target_text == "red"


def test_unknown_keys_and_json_errors(tmp_path):
    with pytest.raises(ConfigError, match=r"suite: unknown key\(s\) \['sead'\]"):
        parse_config_dict({"suite": {"sead": 1}})
    with pytest.raises(ConfigError, match=r"cfg\.json:3:"):
        parse_config(write(tmp_path, '{\n  "suite": {},\n  "data": {,}\n}'))
    with pytest.raises(ConfigError, match="unknown preset"):
        parse_config_dict({"preset": ["nope"]})


@pytest.mark.parametrize("name", sorted(BUILTIN_PRESETS))
def test_every_preset_resolves_to_complete_weights(name):
    cfg = parse_config_dict({"inversion": {"target": {"target_text": "red", "class_label": 0}}})
    frag = BUILTIN_PRESETS[name]
    mode = frag.get("mode", "vlm")
    inv = cfg.inversion_config((name,)) if mode == "vlm" else \
        parse_config_dict({"inversion": {"mode": "vit", "target": {"class_label": 0}}}).inversion_config((name,))
    assert isinstance(inv.weights, ObjectiveWeights)
    assert set(inv.weights.as_dict()) == {"alpha1", "alpha2", "alpha3", "beta1", "beta2", "gamma1", "gamma2"}


def test_partial_presets_are_cumulative():
    active = [{k for k, v in BUILTIN_PRESETS[p]["weights"].items() if v > 0} for p in ABLATION_ORDER]
    for a, b in zip(active, active[1:]):
        assert a <= b
    assert BUILTIN_PRESETS["aggregated"]["weights"] == CLASSIFIER_WEIGHTS


def test_full_protocol_grid_is_expressible():
    names = ["goldfish", "golden retriever", "tiger", "pretzel", "corn"]
    cfg = parse_config_dict({
        "inversion": {"mode": "vlm"},
        "ablation": {"presets": ["aggregated"], "concepts": [{"name": n} for n in names],
                     "seeds": list(range(24))},
    })
    assert len(cfg.ablation.concepts) * len(cfg.ablation.seeds) == 120


def test_ablation_rejects_duplicates():
    with pytest.raises(ConfigError):
        parse_config_dict({"ablation": {"presets": ["baseline", "baseline"], "concepts": [{"name": "red"}]}})


def test_length_variants_have_distinct_keys():
    cfg = parse_config_dict({"ablation": {"presets": ["baseline"], "concepts": [
        {"name": "goldfish", "target": "it is a goldfish"},
        {"name": "goldfish", "target": "it is an image of a goldfish"}]}})
    keys = [c.key for c in cfg.ablation.concepts]
    assert len(set(keys)) == 2


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.sampled_from("abc"), st.integers() | st.dictionaries(st.sampled_from("xy"), st.integers())),
       st.dictionaries(st.sampled_from("abc"), st.integers() | st.dictionaries(st.sampled_from("xy"), st.integers())))
def test_deep_merge_prefers_override(base, over):
    merged = deep_merge(base, over)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            assert merged[k] == {**base[k], **v}
        else:
            assert merged[k] == v
    for k in base.keys() - over.keys():
        assert merged[k] == base[k]
