"""Prototype bank, patch cosine similarity, focal similarity, class scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

CLASS_NAMES = ("circumscribed", "indistinct", "spiculated", "negative")
NUM_CLASSES = len(CLASS_NAMES)
NORM_EPS = 1e-12


@dataclass
class PrototypeEntry:
    cls: int
    level: int
    index: int


@dataclass
class PrototypeConfig:
    # (class, level) pairs with a count each; expanded to dense entries
    per_class_per_level: int = 2
    levels: tuple = (2, 3, 5)
    top_k: int = 3
    negative_prototypes: bool = True

    def entries(self) -> list:
        out = []
        idx = 0
        classes = range(NUM_CLASSES) if self.negative_prototypes else range(NUM_CLASSES - 1)
        for cls in classes:
            for level in self.levels:
                for _ in range(self.per_class_per_level):
                    out.append(PrototypeEntry(cls, level, idx))
                    idx += 1
        return out

    def validate(self, emitted_levels) -> None:
        if self.per_class_per_level < 1:
            raise ValueError("prototypes.per_class_per_level: must be >= 1")
        if self.top_k < 1:
            raise ValueError("prototypes.top_k: must be >= 1")
        missing = [l for l in self.levels if l not in emitted_levels]
        if missing:
            raise ValueError(
                f"prototypes.levels: levels {missing} not emitted by the backbone"
            )
        entries = self.entries()
        classes = {e.cls for e in entries}
        expected = set(range(NUM_CLASSES)) if self.negative_prototypes else set(range(NUM_CLASSES - 1))
        if classes != expected:
            raise ValueError("prototypes: every class must own at least one prototype")
        if [e.index for e in entries] != list(range(len(entries))):
            raise ValueError("prototypes: indices must be dense")


def init_prototype(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Uniform direction on the unit sphere."""
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def init_head_weights(entries, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Class-connected init: +1 to the prototype's own class, -0.5 elsewhere."""
    w = np.full((num_classes, len(entries)), -0.5)
    for e in entries:
        w[e.cls, e.index] = 1.0
    return w


def patch_cosine_similarity(z: ad.Tensor, p: ad.Tensor) -> ad.Tensor:
    """Cosine between every 1x1xd patch of z (B, d, eta, eta) and vector p (d,).

    Patch norms are clamped at a small epsilon; a zero-norm prototype is a
    configuration error and is rejected.
    """
    if float(np.linalg.norm(p.data)) <= NORM_EPS:
        raise ValueError("patch_cosine_similarity: prototype has zero norm")
    zn = ad.l2_normalize(z, axis=1, eps=NORM_EPS)
    pn = ad.l2_normalize(ad.reshape(p, (1, -1, 1, 1)), axis=1, eps=NORM_EPS)
    return ad.tsum(zn * pn, axis=1)


def focal_similarity(sim_map: ad.Tensor, k: int) -> ad.Tensor:
    """Mean of the k largest entries minus the mean of all entries.

    sim_map: (B, eta, eta) -> (B,).
    """
    b = sim_map.shape[0]
    n = int(np.prod(sim_map.shape[1:]))
    if not 1 <= k <= n:
        raise ValueError(f"focal_similarity: k={k} out of range for {n} patches")
    flat = ad.reshape(sim_map, (b, n))
    return ad.tmean(ad.topk_lastdim(flat, k), axis=1) - ad.tmean(flat, axis=1)


def score_classes(g: ad.Tensor, w: ad.Tensor) -> ad.Tensor:
    """Similarity vector (B, m) x head weights (C, m) -> logits (B, C)."""
    return ad.linear(g, w)


class PrototypeLayer:
    """Bank of 1x1xd prototype vectors plus the scoring head."""

    def __init__(self, cfg: PrototypeConfig, feature_dim: int, rng: np.random.Generator,
                 emitted_levels=None):
        if emitted_levels is not None:
            cfg.validate(emitted_levels)
        self.cfg = cfg
        self.entries = cfg.entries()
        self.params: dict[str, ad.Tensor] = {}
        for e in self.entries:
            self.params[f"prototypes.{e.index}"] = ad.Tensor(
                init_prototype(rng, feature_dim), requires_grad=True
            )
        self.params["head.w"] = ad.Tensor(init_head_weights(self.entries), requires_grad=True)
        # index -> {"image_id", "row", "col", "level"} once projected
        self.provenance: dict[int, dict] = {}

    @property
    def m(self) -> int:
        return len(self.entries)

    def vector(self, index: int) -> ad.Tensor:
        return self.params[f"prototypes.{index}"]

    def similarity_maps(self, pyramid: dict) -> dict:
        """Per-prototype cosine maps {index: (B, eta_l, eta_l)}."""
        normed = {l: ad.l2_normalize(z, axis=1, eps=NORM_EPS) for l, z in pyramid.items()}
        maps = {}
        for e in self.entries:
            p = self.vector(e.index)
            if float(np.linalg.norm(p.data)) <= NORM_EPS:
                raise ValueError(f"prototype {e.index} has zero norm")
            pn = ad.l2_normalize(ad.reshape(p, (1, -1, 1, 1)), axis=1, eps=NORM_EPS)
            maps[e.index] = ad.tsum(normed[e.level] * pn, axis=1)
        return maps

    def focal_similarities(self, maps: dict) -> ad.Tensor:
        """(B, m) focal similarity matrix from per-prototype maps."""
        cols = [focal_similarity(maps[e.index], self.cfg.top_k) for e in self.entries]
        return ad.stack(cols, axis=1)

    def logits(self, g: ad.Tensor) -> ad.Tensor:
        return score_classes(g, self.params["head.w"])
