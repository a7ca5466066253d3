"""Hand-wired differentiable VLM with a known answer.

The encoder turns each P×P patch into its mean RGB value. At every position
from the first image token on, the language model scores the colour words by
the running mean over the image tokens seen so far:

    logit(RED)   = w * (mean R - (mean G + mean B) / 2)

and symmetrically for GREEN and BLUE. Every other logit is zero, so greedy
decoding at the answer position names the dominant channel.
"""

from __future__ import annotations

import torch
import torch.nn as nn

ORACLE_WEIGHT = 10.0


def colour_matrix(w=ORACLE_WEIGHT):
    m = torch.full((3, 3), -0.5)
    m.fill_diagonal_(1.0)
    return w * m


class OracleEncoder(nn.Module):
    def __init__(self, image_size=32, patch_size=4, channels=3):
        super().__init__()
        self.image_size = image_size
        self.patch_size = patch_size
        self.channels = channels
        self.width = channels
        self.num_patches = (image_size // patch_size) ** 2

    @property
    def input_shape(self):
        return (self.channels, self.image_size, self.image_size)

    @property
    def tap_ids(self):
        return (0,)

    def forward(self, images, taps=None):
        p = self.patch_size
        pooled = nn.functional.avg_pool2d(images, p)
        tokens = pooled.flatten(2).transpose(1, 2)
        acts = {0: tokens} if taps is None or 0 in taps else {}
        return tokens, tokens.mean(dim=1), acts


class OracleLM(nn.Module):
    def __init__(self, colour_ids, vocab_size=512):
        super().__init__()
        self.vocab_size = vocab_size
        self.width = 3
        # one-hot rows place the three colour scores into the vocabulary
        placement = torch.zeros(vocab_size, 3)
        embed = torch.zeros(vocab_size, 3)
        m = colour_matrix()
        for row, idx in enumerate(colour_ids):
            placement[idx, row] = 1.0
            embed[idx] = m[row] / ORACLE_WEIGHT
        self.register_buffer("placement", placement)
        self.register_buffer("embed_table", embed)

    def embed_tokens(self, ids):
        return self.embed_table[ids]

    def project_image(self, tokens):
        return tokens

    def forward(self, embeddings, image_span=None):
        b, t, _ = embeddings.shape
        if image_span is None:
            raise ValueError("oracle LM needs the image span of the sequence")
        start, stop = image_span
        img = embeddings[:, start:stop]
        running = img.cumsum(dim=1) / torch.arange(1, stop - start + 1, dtype=img.dtype).view(1, -1, 1)
        pieces = [embeddings.new_zeros(b, start, 3), running]
        if t > stop:
            pieces.append(running[:, -1:].expand(b, t - stop, 3))
        pooled = torch.cat(pieces, dim=1)
        # c - (sum of the others)/2 == 1.5 (c - mean); this form keeps gray ties exact
        scores = 1.5 * ORACLE_WEIGHT * (pooled - pooled.mean(dim=-1, keepdim=True))
        return scores @ self.placement.T
