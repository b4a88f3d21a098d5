"""Toy word-level vocabulary, caption/QA templates, and token sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .scene import COLORS, SHAPES, TEXT_WORDS, SceneSpec

EOS = 0
BOS = 1

_WORDS = (
    "<eos>", "<bos>",
    "a", "picture", "of", "on", "background", "and", "the", "is",
    "what", "color", "shape", "object", "objects", "closest",
    "how", "many", "are", "there", "text", "does", "say", "gray",
) + COLORS + SHAPES + ("one", "two", "three", "four") + TEXT_WORDS

COUNT_WORDS = ("one", "two", "three", "four")


class Vocab:
    """Fixed word list; id 0 is end-of-sequence, id 1 begin-of-sequence."""

    def __init__(self, words=_WORDS):
        self.words = tuple(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if self.index["<eos>"] != EOS or self.index["<bos>"] != BOS:
            raise ValueError("vocabulary must reserve ids 0/1 for eos/bos")

    def __len__(self):
        return len(self.words)

    def encode(self, text: str) -> np.ndarray:
        try:
            return np.array([self.index[w] for w in text.split()], dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"word not in vocabulary: {exc.args[0]!r}") from exc

    def decode(self, ids) -> str:
        out = []
        for i in np.asarray(ids, dtype=np.int64):
            if i == EOS:
                break
            if i == BOS:
                continue
            out.append(self.words[i])
        return " ".join(out)


DEFAULT_VOCAB = Vocab()

CAPTION_PROMPT = "a picture of"


@dataclass
class TokenSequence:
    """Token ids with a prefix boundary for prefix language modelling.

    The first ``prefix_len`` ids are conditioned on but never predicted.
    """

    ids: np.ndarray
    prefix_len: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1:
            raise ContractError(f"token ids must be 1-D, got shape {self.ids.shape}")
        if not 0 <= self.prefix_len <= len(self.ids):
            raise ContractError(
                f"prefix length {self.prefix_len} outside [0, {len(self.ids)}]")

    def __len__(self):
        return len(self.ids)


def _object_phrase(obj) -> str:
    return f"a {obj.color} {obj.shape}"


def caption_text(scene: SceneSpec) -> str:
    """Template caption listing objects left to right."""
    ordered = sorted(scene.objects, key=lambda o: (o.region[1], o.region[0]))
    phrases = " and ".join(_object_phrase(o) for o in ordered)
    return f"{phrases} on a gray background"


def _distractors(answer: str, pool) -> list:
    return [w for w in pool if w != answer][:3]


def build_caption_and_qa(scene: SceneSpec, vocab: Vocab = DEFAULT_VOCAB):
    """Caption tokens plus (question, answer, distractors) token triples.

    Every answer is unique among its distractors and recoverable from the
    scene by template inspection alone.
    """
    caption = vocab.encode(caption_text(scene))
    qa = []

    def push(question: str, answer: str, pool):
        wrong = _distractors(answer, pool)
        qa.append((vocab.encode(question), vocab.encode(answer),
                   [vocab.encode(w) for w in wrong]))

    for obj in scene.objects:
        push(f"what color is the {obj.shape}", obj.color, COLORS)
        push(f"what shape is the {obj.color} object", obj.shape, SHAPES)

    if len(scene.objects) >= 2:
        count = COUNT_WORDS[len(scene.objects) - 1]
        push("how many objects are there", count, COUNT_WORDS)
        nearest = min(scene.objects, key=lambda o: o.depth)
        push("what shape is the closest object", nearest.shape, SHAPES)

    if scene.text_item is not None:
        push("what does the text say", scene.text_item[0], TEXT_WORDS)

    return caption, qa
