from .core import (
    LayerActivations,
    LogitSequence,
    ModelSuite,
    MultimodalSequence,
    ShapeError,
    append_tokens,
    as_batch,
    build_oracle_vlm,
    build_sequence,
    build_toy_suite,
    classifier_forward,
    clip_embeddings,
    decode_images,
    embed_text,
    encode_image,
    greedy_decode,
    lm_forward,
    module_hash,
    target_ids,
    verifier_forward,
)
from .vocab import EOS, PromptSpec, TokenSequence, UnknownTokenError, Vocab
from .weights import WeightFileError, load_weights, save_weights
