"""Word-level toy vocabulary and prompt templates."""

from __future__ import annotations

import re
from dataclasses import dataclass

VOCAB_SIZE = 512
NUM_SPECIAL = 16

PAD, BOS, EOS, UNK, IMG, SEP = range(6)
SPECIAL_NAMES = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", UNK: "<unk>", IMG: "<img>", SEP: "<sep>"}

# Registered words, in id order starting at NUM_SPECIAL. Append only: ids are
# part of the weight-file contract.
WORDS = (
    "red", "green", "blue",
    "what", "is", "shown", "in", "the", "picture", "a", "b", "or", "concept",
    "it", "an", "image", "of", "depicts", "name", "object", "this", "format",
    "describe", "content", "shows", "features", "with", "and",
    "goldfish", "fishfish", "golden", "retriever", "tiger", "pretzel", "corn", "dog",
    "color", "colour", "main", "answer", "one", "word", "photo", "which",
    ":", ".", ",", "?", "<", ">",
)

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class UnknownTokenError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        if len(self.ids) < 1:
            raise ValueError("token sequence must contain at least one id")
        bad = [i for i in self.ids if not 0 <= i < self.vocab_size]
        if bad:
            raise ValueError(f"token ids out of range [0, {self.vocab_size}): {bad}")

    def __len__(self):
        return len(self.ids)


class Vocab:
    """Fixed word <-> id table shared by every toy model."""

    def __init__(self, words=WORDS, size=VOCAB_SIZE):
        if NUM_SPECIAL + len(words) > size:
            raise ValueError("vocabulary does not fit")
        self.size = size
        self._ids = {w: NUM_SPECIAL + i for i, w in enumerate(words)}
        self._words = {i: w for w, i in self._ids.items()}
        self._words.update(SPECIAL_NAMES)

    def id(self, word: str) -> int:
        try:
            return self._ids[word.lower()]
        except KeyError:
            raise UnknownTokenError(f"unknown token: {word!r}") from None

    def word(self, idx: int) -> str:
        return self._words.get(idx, f"<{idx}>")

    def tokenize(self, text: str) -> TokenSequence:
        words = _TOKEN_RE.findall(text.lower())
        unknown = [w for w in words if w not in self._ids]
        if unknown:
            raise UnknownTokenError(f"unknown tokens in toy vocabulary: {sorted(set(unknown))}")
        return TokenSequence(tuple(self._ids[w] for w in words), self.size)

    def decode(self, ids) -> str:
        return " ".join(self.word(int(i)) for i in ids)

    def __contains__(self, word):
        return word.lower() in self._ids


DEFAULT_TEMPLATE = "what is shown in the picture : a . [target] concept{ , or b . [negative] concept}"


@dataclass(frozen=True)
class PromptSpec:
    """Prompt template with a required ``[target]`` slot.

    The optional clause in braces is rendered only when a negative concept
    is given; it must contain the ``[negative]`` slot.
    """

    target_text: str
    template: str = DEFAULT_TEMPLATE
    negative_text: str | None = None

    def __post_init__(self):
        if "[target]" not in self.template:
            raise ValueError("prompt template needs a [target] slot")
        if not self.target_text.strip():
            raise ValueError("target_text is empty")

    def render(self) -> str:
        text = self.template
        m = re.search(r"\{([^{}]*)\}", text)
        if m:
            clause = m.group(1).replace("[negative]", self.negative_text) if self.negative_text else ""
            text = text[: m.start()] + clause + text[m.end():]
        elif "[negative]" in text:
            if not self.negative_text:
                raise ValueError("template has a [negative] slot but no negative_text")
            text = text.replace("[negative]", self.negative_text)
        text = text.replace("[target]", self.target_text)
        if "[" in text and re.search(r"\[(target|negative)\]", text):
            raise ValueError(f"unfilled slot in rendered prompt: {text!r}")
        return " ".join(text.split())
