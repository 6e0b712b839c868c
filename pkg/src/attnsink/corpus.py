"""Synthetic grounded scenes, their renders and captions, and a closed-world hallucination rule.

A scene places up to four distinct objects on a 4x4 grid of 4x4-pixel cells.
Each object is drawn as a solid block of its color anchored at the top-left
corner of its cell; the block's (height, width) in pixels identifies the
object word, so the render determines the scene exactly. Reference captions
use one sentence per object, ``there is a <color> <object> .``, in row-major
cell order, followed by EOS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import VisualInput

SPECIALS = ["<pad>", "<bos>", "<eos>"]
PUNCTUATION = [".", "!", "?", ","]
OBJECTS = ["cat", "dog", "bird", "car", "tree", "house", "ball", "cup",
           "book", "chair", "boat", "fish", "hat", "lamp", "clock", "shoe"]
COLORS = ["red", "green", "blue", "yellow", "purple", "orange", "white", "black"]
FUNCTION_WORDS = [
    "there", "is", "a", "an", "the", "and", "describe", "image", "in", "on",
    "with", "of", "this", "it", "also", "some", "near", "next", "to", "left",
    "right", "top", "bottom", "middle", "picture", "shows", "scene", "we",
    "see", "are", "what", "color", "small",
]
VOCAB: list[str] = SPECIALS + PUNCTUATION + OBJECTS + COLORS + FUNCTION_WORDS
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

PAD, BOS, EOS = (TOKEN_ID[s] for s in SPECIALS)
TERMINATORS = frozenset(TOKEN_ID[p] for p in (".", "!", "?"))
PUNCT_IDS = frozenset(TOKEN_ID[p] for p in PUNCTUATION)
SPECIAL_IDS = frozenset((PAD, BOS, EOS))
OBJECT_IDS = frozenset(TOKEN_ID[o] for o in OBJECTS)
COLOR_IDS = frozenset(TOKEN_ID[c] for c in COLORS)

PROMPT = ["<bos>", "describe", "the", "image"]
CORPUS_VERSION = 1

GRID = 4
CELL = 4
BACKGROUND = (0.5, 0.5, 0.5)
COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (0.6, 0.0, 0.8),
    "orange": (1.0, 0.55, 0.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
# object k is a (1 + k // 4) x (1 + k % 4) block
OBJECT_BLOCK = {o: (1 + k // 4, 1 + k % 4) for k, o in enumerate(OBJECTS)}

assert len(VOCAB) == 64, len(VOCAB)


def encode(words: str | Sequence[str]) -> list[int]:
    if isinstance(words, str):
        words = words.split()
    try:
        return [TOKEN_ID[w] for w in words]
    except KeyError as exc:
        raise ValueError(f"word {exc.args[0]!r} is not in the vocabulary") from None


def decode(ids: Sequence[int]) -> str:
    return " ".join(VOCAB[i] if 0 <= i < len(VOCAB) else f"<oov:{i}>" for i in ids)


def prompt_ids() -> list[int]:
    return encode(PROMPT)


def is_word(tok: int) -> bool:
    """Counted as a word: in-vocabulary, not punctuation, not a special token."""
    return 0 <= tok < len(VOCAB) and tok not in PUNCT_IDS and tok not in SPECIAL_IDS


@dataclass(frozen=True)
class SceneObject:
    word: str
    color: str
    row: int
    col: int


@dataclass
class Scene:
    id: int
    grid: tuple[int, int]
    objects: list[SceneObject]
    caption: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "grid": list(self.grid),
            "objects": [{"word": o.word, "color": o.color, "row": o.row, "col": o.col}
                        for o in self.objects],
            "caption": list(self.caption),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(int(d["id"]), tuple(d["grid"]),
                   [SceneObject(o["word"], o["color"], int(o["row"]), int(o["col"]))
                    for o in d["objects"]],
                   [int(t) for t in d["caption"]])


def reference_caption(objects: Sequence[SceneObject]) -> list[int]:
    ids: list[int] = []
    for o in sorted(objects, key=lambda o: (o.row, o.col)):
        ids += encode(["there", "is", "a", o.color, o.word, "."])
    return ids + [EOS]


def make_scene(scene_id: int, objects: Sequence[SceneObject], grid=(GRID, GRID)) -> Scene:
    cells = [(o.row, o.col) for o in objects]
    if len(set(cells)) != len(cells):
        raise ValueError("scene objects must occupy distinct cells")
    for o in objects:
        if o.word not in OBJECT_BLOCK or o.color not in COLOR_RGB:
            raise ValueError(f"unknown object or color: {o}")
        if not (0 <= o.row < grid[0] and 0 <= o.col < grid[1]):
            raise ValueError(f"object {o} outside the {grid} grid")
    objs = sorted(objects, key=lambda o: (o.row, o.col))
    return Scene(scene_id, tuple(grid), objs, reference_caption(objs))


def generate_corpus(seed: int, count: int, grid: tuple[int, int] = (GRID, GRID),
                    n_objects: int = len(OBJECTS), max_objects: int = 4) -> list[Scene]:
    """Seeded scenes with 1..max_objects distinct objects on distinct cells.

    Each scene draws from its own Philox stream keyed by (seed, scene id), so
    scene k is the same whatever ``count`` is.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if n_objects > len(OBJECTS):
        raise ValueError(f"at most {len(OBJECTS)} object words exist")
    if n_objects < max_objects or grid[0] * grid[1] < max_objects:
        raise ValueError(f"vocabulary of {n_objects} objects / grid {grid} too small for "
                         f"{max_objects} distinct objects")
    scenes = []
    for k in range(count):
        rng = np.random.Generator(np.random.Philox(key=[int(seed), k]))
        n = int(rng.integers(1, max_objects + 1))
        words = rng.choice(n_objects, size=n, replace=False)
        cells = rng.choice(grid[0] * grid[1], size=n, replace=False)
        colors = rng.integers(0, len(COLORS), size=n)
        objs = [SceneObject(OBJECTS[w], COLORS[c], int(cell) // grid[1], int(cell) % grid[1])
                for w, c, cell in zip(words, colors, cells)]
        scenes.append(make_scene(k, objs, grid))
    return scenes


def render_scene(scene: Scene) -> VisualInput:
    h, w = scene.grid[0] * CELL, scene.grid[1] * CELL
    px = np.empty((h, w, 3))
    px[:] = BACKGROUND
    for o in scene.objects:
        bh, bw = OBJECT_BLOCK[o.word]
        r0, c0 = o.row * CELL, o.col * CELL
        px[r0:r0 + bh, c0:c0 + bw] = COLOR_RGB[o.color]
    return VisualInput(px)


def corpus_to_json(scenes: Sequence[Scene]) -> str:
    doc = {"version": CORPUS_VERSION, "vocab": VOCAB, "scenes": [s.to_dict() for s in scenes]}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def corpus_from_json(text: str) -> list[Scene]:
    doc = json.loads(text)
    if doc.get("version") != CORPUS_VERSION:
        raise ValueError(f"unsupported corpus version {doc.get('version')!r}")
    if doc.get("vocab") != VOCAB:
        raise ValueError("corpus vocabulary does not match this package's vocabulary")
    return [Scene.from_dict(s) for s in doc["scenes"]]


# ------------------------------------------------------------ annotation


def sentence_spans(tokens: Sequence[int]) -> list[tuple[int, int]]:
    """Half-open spans that partition ``tokens`` into sentences.

    A sentence ends at a terminator. Trailing tokens form a last sentence,
    except a lone trailing EOS, which joins the previous sentence.
    """
    spans, start = [], 0
    for i, t in enumerate(tokens):
        if t in TERMINATORS:
            spans.append((start, i + 1))
            start = i + 1
    n = len(tokens)
    if start < n:
        if spans and all(t == EOS for t in tokens[start:]):
            spans[-1] = (spans[-1][0], n)
        else:
            spans.append((start, n))
    return spans


@dataclass
class AnnotatedResponse:
    tokens: list[int]
    spans: list[tuple[int, int]]
    hallucinated: list[bool]
    hallucinated_words: list[int]
    word_counts: list[int]
    offending: list[int] = field(default_factory=list)

    @property
    def n_sentences(self) -> int:
        return len(self.spans)


def _sentence_offenders(sent: Sequence[int], start: int, truth: dict[int, int]) -> list[int]:
    bad = []
    for j, tok in enumerate(sent):
        if tok in OBJECT_IDS and tok not in truth:
            bad.append(start + j)
        elif tok in COLOR_IDS and j + 1 < len(sent):
            nxt = sent[j + 1]
            if nxt in truth and truth[nxt] != tok:
                bad.append(start + j)
    return bad


def oracle_annotate(response: Sequence[int], scene: Scene) -> AnnotatedResponse:
    """Judge each sentence against the scene.

    A sentence is hallucinated when it names an object absent from the scene
    or puts a color directly before a scene object of a different color. The
    offending tokens are the absent object words and the wrong color words.
    Relations are not judged.
    """
    tokens = [int(t) for t in response]
    truth = {TOKEN_ID[o.word]: TOKEN_ID[o.color] for o in scene.objects}
    spans = sentence_spans(tokens)
    flags, counts, words, offending = [], [], [], []
    for s, e in spans:
        bad = _sentence_offenders(tokens[s:e], s, truth)
        flags.append(bool(bad))
        counts.append(len(bad))
        words.append(sum(1 for t in tokens[s:e] if is_word(t)))
        offending += bad
    return AnnotatedResponse(tokens, spans, flags, counts, words, offending)


@dataclass
class VQAItem:
    scene_id: int
    question: list[int]
    answers: list[list[int]]

    def __post_init__(self):
        if not self.answers:
            raise ValueError("a VQA item needs at least one gold answer")


def color_question(scene: Scene, obj: SceneObject, n_answers: int = 5) -> VQAItem:
    """``what color is the <object> ?`` with the object's color as every gold answer."""
    q = encode(["what", "color", "is", "the", obj.word, "?"])
    return VQAItem(scene.id, q, [encode([obj.color])] * n_answers)
