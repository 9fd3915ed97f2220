"""Toy vocabulary, prompt generation, and geometric relation labeling.

Prompts follow a fixed recipe: pick three objects from a scene, emit one
counts sentence ("the room has two chairs and a table"), then append zero
to two relation sentences for object pairs whose centers lie within 1.5 m
of each other. Relation labels come from a 9-way pool decided by pair
geometry with the fixed precedence on > above > inside > surrounding >
left > right > front > behind > next-to:

  on          vertical contact within 0.05 m
  above       vertical gap > 0.3 m and 2D centers within the larger
              footprint radius
  inside      subject footprint contained in the object footprint
  surrounding subject footprint contains the object footprint
  left/right/front/behind
              subject direction in the object's local frame within 45
              degrees of the +y / -y / +x / -x axis (object faces +x)
  next to     2D boundary gap < 0.3 m when no directional cone matched
              (only possible exactly on a cone boundary)

Sentences are lowercase and unpunctuated so tokenize/detokenize round-trip
exactly; multi-sentence token streams join the sentences with a '.' token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import DataError
from .scene import SceneSet

PAIR_DISTANCE_MAX = 1.5   # meters, valid-pair gate
MAX_TOKENS = 48

_NUMBER_WORDS = {1: "a", 2: "two", 3: "three"}

RELATION_PHRASES = {
    "on": ("is", "on"),
    "above": ("is", "above"),
    "inside": ("is", "inside"),
    "surrounding": ("is", "surrounding"),
    "left": ("is", "left", "of"),
    "right": ("is", "right", "of"),
    "front": ("is", "in", "front", "of"),
    "behind": ("is", "behind"),
    "next_to": ("is", "next", "to"),
}

_FUNCTION_WORDS = (
    ".", "the", "room", "has", "a", "and", "is", "of", "to", "in",
    "two", "three", "on", "above", "inside", "surrounding", "left",
    "right", "front", "behind", "next",
)


@dataclass
class Vocabulary:
    """Token table over class names (singular + plural) and function words;
    id 0 is reserved for padding."""

    words: list

    @classmethod
    def for_classes(cls, class_names) -> "Vocabulary":
        words = ["<pad>"] + list(_FUNCTION_WORDS)
        for name in class_names:
            if name == "empty":
                continue
            for form in (name, name + "s"):
                if form not in words:
                    words.append(form)
        return cls(words)

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def tokenize(self, sentence: str) -> list:
        ids = []
        for word in sentence.lower().replace(".", " . ").split():
            if word not in self.index:
                raise DataError(f"unknown token '{word}'")
            ids.append(self.index[word])
        return ids

    def detokenize(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids)

    def encode_prompt(self, sentences) -> np.ndarray:
        """Join sentences with '.' separators into one id sequence."""
        ids = []
        for k, sentence in enumerate(sentences):
            if k > 0:
                ids.append(self.index["."])
            ids.extend(self.tokenize(sentence))
        if len(ids) > MAX_TOKENS:
            raise DataError(
                f"prompt has {len(ids)} tokens, cap is {MAX_TOKENS}")
        return np.array(ids, dtype=np.int64)

    def encode_text(self, text: str) -> np.ndarray:
        sentences = [s.strip() for s in text.split(".") if s.strip()]
        return self.encode_prompt(sentences)


@dataclass
class PromptSpec:
    sentences: list
    token_ids: np.ndarray
    relations: list = field(default_factory=list)  # (subject, label, object)


def _footprint_radius(obj) -> float:
    return math.hypot(obj.size[0], obj.size[1])


def relation_label(subject, obj):
    """Deterministic relation of an ordered object pair, or None."""
    bottom_s = subject.location[2] - subject.size[2]
    top_o = obj.location[2] + obj.size[2]
    if abs(bottom_s - top_o) < 0.05:
        return "on"
    delta = subject.location[:2] - obj.location[:2]
    dist2d = math.hypot(*delta)
    if (bottom_s - top_o > 0.3
            and dist2d < max(_footprint_radius(subject), _footprint_radius(obj))):
        return "above"
    if geometry.rect_contains_rect(obj.location[:2], obj.size[:2], obj.theta,
                                   subject.location[:2], subject.size[:2],
                                   subject.theta):
        return "inside"
    if geometry.rect_contains_rect(subject.location[:2], subject.size[:2],
                                   subject.theta, obj.location[:2],
                                   obj.size[:2], obj.theta):
        return "surrounding"
    if dist2d > 1e-9:
        # subject bearing in the object's frame; the object faces local +x
        c, s = math.cos(obj.theta), math.sin(obj.theta)
        lx = c * delta[0] + s * delta[1]
        ly = -s * delta[0] + c * delta[1]
        bearing = math.atan2(ly, lx)
        cones = (("front", 0.0), ("left", 0.5 * math.pi),
                 ("behind", math.pi), ("right", -0.5 * math.pi))
        for name, axis in cones:
            gap = math.atan2(math.sin(bearing - axis), math.cos(bearing - axis))
            if abs(gap) < 0.25 * math.pi:
                return name
    gap2d = dist2d - (_footprint_radius(subject) + _footprint_radius(obj))
    if gap2d < 0.3:
        return "next_to"
    return None


def counts_sentence(class_names) -> str:
    """'the room has two chairs and a table' for the selected objects,
    grouped by first appearance."""
    order = []
    counts = {}
    for name in class_names:
        if name not in counts:
            order.append(name)
            counts[name] = 0
        counts[name] += 1
    groups = []
    for name in order:
        n = counts[name]
        word = _NUMBER_WORDS[n]
        groups.append(f"{word} {name}{'s' if n > 1 else ''}")
    return "the room has " + " and ".join(groups)


def generate_prompt(scene: SceneSet, rng, class_names,
                    vocab: Vocabulary) -> PromptSpec:
    """Sample a 1-3 sentence prompt describing part of the scene."""
    real = scene.real_objects
    if len(real) < 3:
        raise DataError(f"prompt needs >= 3 objects, scene has {len(real)}")
    picks = rng.choice(len(real), size=3, replace=False)
    chosen = [real[int(i)] for i in picks]
    names = [class_names[o.class_index] for o in chosen]
    sentences = [counts_sentence(names)]

    candidates = []
    for a in range(3):
        for b in range(a + 1, 3):
            oa, ob = chosen[a], chosen[b]
            if np.linalg.norm(oa.location - ob.location) >= PAIR_DISTANCE_MAX:
                continue
            label = relation_label(oa, ob)
            subj, other = names[a], names[b]
            if label is None:
                label = relation_label(ob, oa)
                subj, other = names[b], names[a]
            if label is None:
                continue
            phrase = " ".join(RELATION_PHRASES[label])
            candidates.append(
                (f"the {subj} {phrase} the {other}", (subj, label, other)))

    relations = []
    want = int(rng.integers(0, 3))
    take = min(want, len(candidates))
    if take > 0:
        which = sorted(rng.choice(len(candidates), size=take, replace=False))
        for i in which:
            sentences.append(candidates[int(i)][0])
            relations.append(candidates[int(i)][1])
    return PromptSpec(sentences, vocab.encode_prompt(sentences), relations)
