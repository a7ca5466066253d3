"""Frozen-model adapters: the suite container and the forward operations the
objective consumes."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from .oracle import OracleEncoder, OracleLM
from .toy import ToyCausalLM, ToyClassifier, ToyVerifierCNN, ToyViT, gaussian_init_
from .vocab import BOS, EOS, PromptSpec, TokenSequence, Vocab

TOY_ARCH = {
    "kind": "toy",
    "image_size": 32,
    "patch_size": 4,
    "width": 64,
    "depth": 4,
    "heads": 4,
    "vocab_size": 512,
    "lm_width": 64,
    "lm_depth": 4,
    "verifier_widths": [16, 32, 32],
    "num_classes": 3,
}

ORACLE_ARCH = {"kind": "oracle", "image_size": 32, "patch_size": 4, "vocab_size": 512}


class ShapeError(ValueError):
    pass


@dataclass
class ModelSuite:
    """Frozen vision encoder, language model, verifier and classifier.

    ``verifier`` and ``classifier`` are ``None`` for the oracle VLM.
    """

    vision_encoder: nn.Module
    language_model: nn.Module
    verifier: nn.Module | None
    classifier: nn.Module | None
    vocab: Vocab
    arch: dict
    seed: int | None = None
    dtype: torch.dtype = field(default=torch.float32)

    @property
    def patch_size(self):
        return self.arch["patch_size"]

    @property
    def kind(self):
        return self.arch["kind"]

    @property
    def input_shape(self):
        return self.vision_encoder.input_shape

    def modules(self):
        named = [("encoder", self.vision_encoder), ("lm", self.language_model),
                 ("verifier", self.verifier), ("classifier", self.classifier)]
        return [(n, m) for n, m in named if m is not None]

    def to(self, dtype):
        """Copy of the suite with every floating tensor cast to ``dtype``."""
        mods = {n: copy.deepcopy(m).to(dtype) for n, m in self.modules()}
        return replace(self, vision_encoder=mods["encoder"], language_model=mods["lm"],
                       verifier=mods.get("verifier"), classifier=mods.get("classifier"), dtype=dtype)

    def checksum(self):
        h = hashlib.sha256()
        for name, m in self.modules():
            h.update(name.encode())
            h.update(module_hash(m).encode())
        return h.hexdigest()


def module_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        if not t.is_floating_point():
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4").tobytes())
    return h.hexdigest()


def freeze(module):
    if module is not None:
        module.requires_grad_(False)
        module.eval()
    return module


def build_from_arch(arch: dict, seed: int | None) -> ModelSuite:
    if arch["kind"] == "oracle":
        vocab = Vocab(size=arch["vocab_size"])
        enc = OracleEncoder(arch["image_size"], arch["patch_size"])
        lm = OracleLM([vocab.id("red"), vocab.id("green"), vocab.id("blue")], arch["vocab_size"])
        return ModelSuite(freeze(enc), freeze(lm), None, None, vocab, dict(arch), None)
    if arch["kind"] != "toy":
        raise ValueError(f"unknown suite kind {arch['kind']!r}")
    if seed is None or seed < 0:
        raise ValueError("toy suite needs a seed >= 0")
    gen = torch.Generator().manual_seed(int(seed))
    vit_kw = dict(image_size=arch["image_size"], patch_size=arch["patch_size"], width=arch["width"],
                  depth=arch["depth"], heads=arch["heads"])
    enc = gaussian_init_(ToyViT(**vit_kw), gen)
    lm = gaussian_init_(ToyCausalLM(arch["vocab_size"], arch["lm_width"], arch["lm_depth"], arch["heads"],
                                    vision_width=arch["width"]), gen)
    ver = gaussian_init_(ToyVerifierCNN(widths=tuple(arch["verifier_widths"]), num_classes=arch["num_classes"]), gen)
    clf = gaussian_init_(ToyClassifier(arch["num_classes"], **vit_kw), gen)
    return ModelSuite(freeze(enc), freeze(lm), freeze(ver), freeze(clf), Vocab(size=arch["vocab_size"]),
                      dict(arch), int(seed))


def build_toy_suite(seed: int, image_size: int = 32) -> ModelSuite:
    """Seeded toy suite: ViT encoder, causal LM, BN verifier CNN, ViT classifier."""
    if seed < 0:
        raise ValueError("seed must be >= 0")
    return build_from_arch({**TOY_ARCH, "image_size": image_size}, seed)


def build_oracle_vlm(image_size: int = 32) -> ModelSuite:
    """Hand-wired VLM whose answer names the dominant colour channel."""
    return build_from_arch({**ORACLE_ARCH, "image_size": image_size}, None)


# ---------------------------------------------------------------------------
# forward operations


@dataclass
class LayerActivations:
    layers: dict  # tap id -> (B, D, Ω) tensor

    @property
    def layer_ids(self):
        return tuple(sorted(self.layers))

    def __getitem__(self, layer):
        return self.layers[layer]


@dataclass
class MultimodalSequence:
    """Concatenated [text, image, answer] embeddings, batch-first (B, T, Ω)."""

    embeddings: torch.Tensor
    text_len: int
    image_len: int
    answer_len: int = 0

    def __post_init__(self):
        if self.embeddings.dim() == 2:
            self.embeddings = self.embeddings.unsqueeze(0)
        total = self.text_len + self.image_len + self.answer_len
        if self.embeddings.shape[1] != total:
            raise ShapeError(f"sequence has {self.embeddings.shape[1]} positions, expected {total}")

    @property
    def total_len(self):
        return self.embeddings.shape[1]

    @property
    def image_span(self):
        return (self.text_len, self.text_len + self.image_len)

    @property
    def answer_start(self):
        """Position whose output predicts the first answer token."""
        return self.text_len + self.image_len - 1


@dataclass
class LogitSequence:
    raw_logits: torch.Tensor  # (..., positions, V)

    @property
    def probs(self):
        return self.raw_logits.softmax(-1)

    @property
    def log_probs(self):
        return self.raw_logits.log_softmax(-1)

    def positions(self, start, stop=None):
        return LogitSequence(self.raw_logits[..., start:stop, :])


def as_batch(image: torch.Tensor) -> torch.Tensor:
    if image.dim() == 3:
        return image.unsqueeze(0)
    if image.dim() != 4:
        raise ShapeError(f"expected a C×H×W image or B×C×H×W batch, got shape {tuple(image.shape)}")
    return image


def check_input(model, image):
    batch = as_batch(image)
    expected = tuple(model.input_shape)
    if tuple(batch.shape[1:]) != expected:
        raise ShapeError(f"image shape mismatch: expected {expected}, received {tuple(batch.shape[1:])}")
    return batch


def encode_image(encoder, image, layers=None):
    """Encode an image (or batch) into patch tokens and tapped activations.

    Unbatched input gives unbatched outputs: tokens D×Ω, activations D×Ω.
    """
    batch = check_input(encoder, image)
    if layers is not None:
        unknown = set(layers) - set(encoder.tap_ids)
        if unknown:
            raise ValueError(f"encoder has no taps {sorted(unknown)}; available {list(encoder.tap_ids)}")
    tokens, _, acts = encoder(batch, taps=layers)
    if image.dim() == 3:
        tokens = tokens[0]
        acts = {k: v[0] for k, v in acts.items()}
    return tokens, LayerActivations(acts)


def embed_text(suite: ModelSuite, prompt: PromptSpec):
    """Tokenize the rendered prompt (BOS-prefixed) and embed it: (ids, L×Ω)."""
    ids = suite.vocab.tokenize(prompt.render())
    seq = TokenSequence((BOS,) + ids.ids, ids.vocab_size)
    emb = suite.language_model.embed_tokens(torch.tensor(seq.ids))
    return seq, emb.to(suite.dtype)


def target_ids(suite: ModelSuite, text: str) -> TokenSequence:
    return suite.vocab.tokenize(text)


def build_sequence(suite: ModelSuite, text_embeddings, image_tokens) -> MultimodalSequence:
    """x = [G(t), E(v)] with the image tokens projected to the LM width."""
    img = suite.language_model.project_image(image_tokens if image_tokens.dim() == 3 else image_tokens[None])
    txt = text_embeddings.to(img.dtype).unsqueeze(0).expand(img.shape[0], -1, -1)
    return MultimodalSequence(torch.cat([txt, img], dim=1), txt.shape[1], img.shape[1])


def append_tokens(suite: ModelSuite, seq: MultimodalSequence, ids) -> MultimodalSequence:
    if len(ids) == 0:
        return seq
    emb = suite.language_model.embed_tokens(torch.as_tensor(list(ids))).to(seq.embeddings.dtype)
    emb = emb.unsqueeze(0).expand(seq.embeddings.shape[0], -1, -1)
    return MultimodalSequence(torch.cat([seq.embeddings, emb], dim=1), seq.text_len, seq.image_len,
                              seq.answer_len + len(ids))


def lm_forward(suite: ModelSuite, seq: MultimodalSequence) -> LogitSequence:
    lm = suite.language_model
    if seq.embeddings.shape[-1] != lm.width:
        raise ShapeError(f"embedding width {seq.embeddings.shape[-1]} does not match LM width {lm.width}")
    return LogitSequence(lm(seq.embeddings, image_span=seq.image_span))


@torch.no_grad()
def greedy_decode(suite: ModelSuite, seq: MultimodalSequence, max_len: int) -> TokenSequence:
    """Argmax decoding of a single sequence; stops after EOS or ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if seq.embeddings.shape[0] != 1:
        raise ValueError("greedy_decode takes a single sequence; decode batches item by item")
    out = []
    while len(out) < max_len:
        logits = lm_forward(suite, seq).raw_logits[0, -1]
        nxt = int(torch.argmax(logits))  # first maximal index wins ties
        out.append(nxt)
        if nxt == EOS:
            break
        seq = append_tokens(suite, seq, [nxt])
    return TokenSequence(tuple(out), suite.vocab.size)


def decode_images(suite: ModelSuite, prompt: PromptSpec, images, max_len: int) -> list[str]:
    """Greedy answer text for each image of a batch."""
    batch = check_input(suite.vision_encoder, images)
    _, text_emb = embed_text(suite, prompt)
    texts = []
    with torch.no_grad():
        for img in batch:
            tokens, _ = encode_image(suite.vision_encoder, img.to(suite.dtype))
            seq = build_sequence(suite, text_emb, tokens)
            ids = greedy_decode(suite, seq, max_len).ids
            texts.append(suite.vocab.decode(i for i in ids if i != EOS))
    return texts


def verifier_forward(verifier, batch):
    """Class logits and per-BN-layer (mean, variance) of the batch.

    Statistics are taken over batch and spatial axes of each BN input with the
    population convention. Running statistics are not touched.
    """
    batch = as_batch(batch)
    if batch.shape[0] == 0:
        raise ValueError("verifier_forward needs a non-empty batch")
    if verifier.training:
        raise RuntimeError("verifier must be in inference mode")
    logits, _, _, stats = verifier(batch, with_stats=True)
    return logits, stats


def classifier_forward(classifier, image):
    batch = check_input(classifier.backbone, image)
    if batch.shape[0] == 0:
        raise ValueError("classifier_forward needs a non-empty batch")
    logits = classifier(batch)
    return logits[0] if image.dim() == 3 else logits


def clip_embeddings(suite: ModelSuite, images, text: str):
    """Toy image/text embedding pair in the LM width, for CLIPScore-style scoring.

    Image: mean-pooled projected patch tokens. Text: mean token embedding.
    """
    batch = check_input(suite.vision_encoder, images)
    with torch.no_grad():
        tokens, _ = encode_image(suite.vision_encoder, batch.to(suite.dtype))
        img = suite.language_model.project_image(tokens).mean(dim=1)
        ids = torch.tensor(suite.vocab.tokenize(text).ids)
        txt = suite.language_model.embed_tokens(ids).mean(dim=0)
    return img.double(), txt.double()
