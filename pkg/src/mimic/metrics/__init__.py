from .evaluate import MetricOptions, MetricReport, ReferenceSet, evaluate_images, evaluate_run
from .image import (
    FeatureSet,
    MetricError,
    clip_score,
    fid,
    inception_score,
    lpips_like,
    score_infinity,
    top_k_accuracy,
)
from .text import bleu, meteor, read_pairs_tsv, rouge_l, text_scores
