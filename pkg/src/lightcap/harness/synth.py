"""Synthetic two-object scenes with templated captions.

Each scene is a pair of objects (count, colour, shape) joined by a spatial
relation. Image features are a fixed random linear projection of the
scene's one-hot attribute code plus a little Gaussian noise, so the
attributes stay linearly recoverable from the features.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..numerics import make_rng

COUNTS = (1, 2, 3)
COLORS = ("red", "blue", "green", "yellow")
SHAPES = ("square", "circle", "triangle", "star")
RELATIONS = ("left of", "above", "next to")

# first entry is the canonical wording, second its synonym
COUNT_WORDS = {1: ("one", "a"), 2: ("two", "two"), 3: ("three", "three")}
RELATION_WORDS = {
    "left of": ("left of", "to the left of"),
    "above": ("above", "on top of"),
    "next to": ("next to", "beside"),
}

CODE_DIM = 2 * (len(COUNTS) + len(COLORS) + len(SHAPES)) + len(RELATIONS)
NOISE_STD = 0.01
# chance that the second reference swaps in the synonym, drawn per slot
VARIANT_RATE = 0.3


@dataclass(frozen=True)
class SceneSpec:
    first: tuple    # (count, color, shape)
    relation: str
    second: tuple

    def one_hot(self) -> np.ndarray:
        code = np.zeros(CODE_DIM)
        offset = 0
        for count, color, shape in (self.first, self.second):
            code[offset + COUNTS.index(count)] = 1
            offset += len(COUNTS)
            code[offset + COLORS.index(color)] = 1
            offset += len(COLORS)
            code[offset + SHAPES.index(shape)] = 1
            offset += len(SHAPES)
        code[offset + RELATIONS.index(self.relation)] = 1
        return code

    def caption(self, count_variant: int = 0, relation_variant: int | None = None) -> str:
        """Template realization. Variant 0 is canonical, 1 the synonym; the
        relation follows ``count_variant`` unless given separately."""
        if relation_variant is None:
            relation_variant = count_variant

        def obj(count, color, shape):
            noun = shape if count == 1 else shape + "s"
            return f"{COUNT_WORDS[count][count_variant]} {color} {noun}"
        rel = RELATION_WORDS[self.relation][relation_variant]
        return f"{obj(*self.first)} {rel} {obj(*self.second)}"


def all_scenes() -> list:
    objects = list(itertools.product(COUNTS, COLORS, SHAPES))
    return [SceneSpec(a, rel, b) for a in objects for rel in RELATIONS for b in objects]


@dataclass
class Example:
    id: str
    features: np.ndarray
    captions: list


def projection_matrix(v_dim: int, seed: int) -> np.ndarray:
    rng = make_rng(seed)
    # five active code entries per scene, so rows scaled to keep features near unit variance
    return rng.normal(size=(CODE_DIM, v_dim)) / np.sqrt(5.0)


def synth_generate(n: int, v_dim: int = 64, seed: int = 0, noise: float = NOISE_STD):
    """Return ``{"train", "val", "test"}`` example lists split 80/10/10.

    Scenes are drawn without replacement, so no scene appears in two
    splits. Every example gets the canonical caption plus a second one in
    which the count word and the relation phrase each switch to their
    synonym with probability ``VARIANT_RATE``.
    """
    scenes = all_scenes()
    if n < 10:
        raise ValueError("synthetic dataset needs n >= 10")
    if n > len(scenes):
        raise ValueError(f"at most {len(scenes)} distinct scenes are available")
    if v_dim < 1:
        raise ValueError("v_dim must be positive")
    proj = projection_matrix(v_dim, seed)
    rng = make_rng(seed + 1)
    word_rng = make_rng(seed + 2)
    chosen = rng.choice(len(scenes), size=n, replace=False)
    examples = []
    for k, idx in enumerate(chosen):
        scene = scenes[int(idx)]
        feats = scene.one_hot() @ proj + noise * rng.normal(size=v_dim)
        count_v, rel_v = (word_rng.random(2) < VARIANT_RATE).astype(int)
        captions = [scene.caption(0), scene.caption(int(count_v), int(rel_v))]
        examples.append(Example(f"img{k:05d}", feats, captions))
    n_train, n_val = int(0.8 * n), int(0.1 * n)
    return {
        "train": examples[:n_train],
        "val": examples[n_train:n_train + n_val],
        "test": examples[n_train + n_val:],
    }


def synth_grid(features: np.ndarray, regions: int, feat_dim: int, seed: int = 0) -> np.ndarray:
    """Spatial feature grids ``(B, regions, feat_dim)`` derived from pooled
    vectors through a fixed random projection."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    rng = make_rng(seed + 7)
    proj = rng.normal(size=(features.shape[1], regions * feat_dim)) / np.sqrt(features.shape[1])
    return np.tanh(features @ proj).reshape(features.shape[0], regions, feat_dim)
