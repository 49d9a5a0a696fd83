"""Closed-vocabulary tokenizer, noun extraction and prompt templating."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD, START, END = 0, 1, 2
RESERVED = ("<pad>", "<start>", "<end>")

# CLIP prompt ensemble; "()" is replaced by the class name.
PROMPTS: tuple[str, ...] = (
    "itap of a ().",
    "a bad photo of the ().",
    "a origami ().",
    "a photo of the large ().",
    "a () in a video game.",
    "art of the ()",
    "a photo of the small ()",
)

_WORD = re.compile(r"[a-z0-9]+")


class UnknownTokenError(KeyError):
    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        super().__init__(f"words not in vocabulary: {', '.join(self.words)}")

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return self.args[0]


def split_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass
class Vocab:
    words: list[str] = field(default_factory=lambda: list(RESERVED))

    def __post_init__(self):
        if tuple(self.words[:3]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved pad/start/end tokens")
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("vocabulary words must be unique")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def missing(self, text: str) -> list[str]:
        return [w for w in split_words(text) if w not in self.index]

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        seen: dict[str, None] = {}
        for t in texts:
            for w in split_words(t):
                seen.setdefault(w, None)
        return cls(list(RESERVED) + sorted(seen))


def tokenize(text: str, vocab: Vocab, length: int = 16) -> list[int]:
    """Map text to ``length`` ids: start, words..., end, pad...

    Long inputs are truncated so that the end token still sits at ``length - 1``.
    """
    if length < 2:
        raise ValueError("context length must be at least 2")
    words = split_words(text)
    unknown = [w for w in words if w not in vocab.index]
    if unknown:
        raise UnknownTokenError(unknown)
    ids = [vocab.index[w] for w in words][: length - 2]
    ids = [START, *ids, END]
    return ids + [PAD] * (length - len(ids))


def fill_prompt(template: str, name: str) -> str:
    if "()" not in template:
        raise ValueError(f"prompt template {template!r} has no () placeholder")
    return template.replace("()", name)


def extract_nouns(caption: str, lexicon: Iterable[str]) -> list[str]:
    """Caption words found in ``lexicon``, in order of first appearance."""
    lex = set(lexicon)
    out: list[str] = []
    for w in split_words(caption):
        if w in lex and w not in out:
            out.append(w)
    return out
