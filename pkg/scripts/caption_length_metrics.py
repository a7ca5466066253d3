"""BLEU-1, METEOR and ROUGE-L for the target-length caption pairs.

    python scripts/caption_length_metrics.py [pairs.tsv]
"""

import sys
from pathlib import Path

from mimic.metrics import read_pairs_tsv, text_scores

DEFAULT = Path(__file__).resolve().parent.parent / "configs" / "caption_pairs.tsv"


def main():
    path = Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT
    print(f"{'candidate':32s} {'BLEU':>6s} {'METEOR':>7s} {'ROUGE-L':>8s}")
    for cand, ref in read_pairs_tsv(path):
        s = text_scores(cand, ref, max_n=1)
        print(f"{cand:32s} {s['bleu']:6.3f} {s['meteor']:7.3f} {s['rouge_l']:8.3f}")


if __name__ == "__main__":
    main()
