"""Composite training objective.

Total = CE + l1*cluster + l2*separation + l3*orthogonality + l4*fine-annotation.
Cluster pulls each image toward its best own-class prototype, separation
pushes away the best other-class prototype, orthogonality spreads each
class's prototypes apart, and the fine-annotation term penalizes prototype
activation relative to the annotated region, weighted per (sample class,
prototype class) by two coefficient matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .prototypes import NUM_CLASSES

_NEG_BIG = 1e9


@dataclass
class LossWeights:
    cluster: float = 0.8
    separation: float = 0.08
    orthogonality: float = 0.01
    # the fine term is an unnormalized sum over images x prototypes and
    # dwarfs the others at its raw scale; its weight must stay small
    fine_annotation: float = 1e-4

    def validate(self) -> None:
        for name in ("cluster", "separation", "orthogonality", "fine_annotation"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss_weights.{name}: must be finite and >= 0")


def _default_masked():
    m = np.ones((NUM_CLASSES, NUM_CLASSES))
    m[3, :] = 0.0
    return m.tolist()


def _default_full():
    m = np.zeros((NUM_CLASSES, NUM_CLASSES))
    m[0, 3] = 1.0
    m[1, 3] = 1.0
    m[2, :] = [1.0, 1.0, 0.0, 1.0]
    return m.tolist()


@dataclass
class FineAnnotationCoeffs:
    """Rows index the sample's class, columns the prototype's class.

    ``masked`` scales the term restricted outside the annotation
    (mask value 1 outside the annotated band), ``full`` scales the
    whole-map term.
    """

    masked: list = field(default_factory=_default_masked)
    full: list = field(default_factory=_default_full)

    def validate(self) -> None:
        for name in ("masked", "full"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (NUM_CLASSES, NUM_CLASSES):
                raise ValueError(f"fine_annotation.{name}: must be {NUM_CLASSES}x{NUM_CLASSES}")
            if not np.isfinite(m).all() or (m < 0).any():
                raise ValueError(f"fine_annotation.{name}: entries must be finite and >= 0")
        if np.asarray(self.masked, dtype=float)[3].any():
            raise ValueError("fine_annotation.masked: negative-sample row must be zero")

    def masked_array(self) -> np.ndarray:
        return np.asarray(self.masked, dtype=float)

    def full_array(self) -> np.ndarray:
        return np.asarray(self.full, dtype=float)


def cross_entropy(logits, labels) -> ad.Tensor:
    return ad.cross_entropy(logits, labels)


def cluster_and_separation(g: ad.Tensor, labels, entries):
    """(-mean best own-class similarity, +mean best other-class similarity)."""
    labels = np.asarray(labels)
    m = g.shape[1]
    own = np.zeros((NUM_CLASSES, m))
    for e in entries:
        own[e.cls, e.index] = 1.0
    own_mask = own[labels]                       # (B, m)
    if (own_mask.sum(axis=1) == 0).any():
        bad = labels[own_mask.sum(axis=1) == 0][0]
        raise ValueError(f"cluster loss: class {bad} owns no prototypes")
    other_mask = 1.0 - own_mask
    dtype = g.data.dtype
    own_best = ad.tmax(g * own_mask.astype(dtype) - (other_mask * _NEG_BIG).astype(dtype), axis=1)
    clust = -ad.tmean(own_best)
    if (other_mask.sum(axis=1) == 0).any():
        sep = ad.Tensor(0.0)
    else:
        other_best = ad.tmax(g * other_mask.astype(dtype) - (own_mask * _NEG_BIG).astype(dtype), axis=1)
        sep = ad.tmean(other_best)
    return clust, sep


def orthogonality_loss(layer) -> ad.Tensor:
    """Sum over classes of ||P_hat P_hat^T - I||_F^2 with unit-normalized rows."""
    total = ad.Tensor(0.0)
    by_class: dict[int, list] = {}
    for e in layer.entries:
        by_class.setdefault(e.cls, []).append(e.index)
    for cls in sorted(by_class):
        vecs = ad.stack([layer.vector(j) for j in by_class[cls]], axis=0)
        rows = ad.l2_normalize(vecs, axis=1)
        gram = ad.matmul(rows, ad.transpose2d(rows))
        eye = np.eye(gram.shape[0], dtype=gram.data.dtype)
        total = total + ad.tsum(ad.power(gram - ad.Tensor(eye), 2))
    return total


def _check_masks(masks: np.ndarray, input_size: int) -> np.ndarray:
    masks = np.asarray(masks)
    if masks.shape[-1] != input_size or masks.shape[-2] != input_size:
        raise ValueError(
            f"fine annotation: mask resolution {masks.shape[-2:]} does not match "
            f"input size {input_size}"
        )
    if not np.isin(masks, (0, 1)).all():
        raise ValueError("fine annotation: masks must be binary")
    return masks.astype(float)


def fine_annotation_loss(sim_maps: dict, masks, labels, coeffs: FineAnnotationCoeffs,
                         entries, input_size: int) -> ad.Tensor:
    """Sum over images and prototypes of the L2 norm of the weighted activation map.

    For image i and prototype j of class c the contribution is
    ``|| masked[y_i, c] * (m_i * PAM_ij) + full[y_i, c] * PAM_ij ||_2`` where
    PAM is the similarity map bilinearly upsampled to the mask resolution and
    m_i is 1 outside the annotated band. Pairs with both coefficients zero
    contribute exactly 0 and are skipped.
    """
    labels = np.asarray(labels)
    masks = _check_masks(masks, input_size)
    lam_in = coeffs.masked_array()
    lam_full = coeffs.full_array()
    total = ad.Tensor(0.0)
    for e in entries:
        li = lam_in[labels, e.cls]
        lf = lam_full[labels, e.cls]
        rows = np.nonzero((li != 0) | (lf != 0))[0]
        if rows.size == 0:
            continue
        smap = sim_maps[e.index]
        b, eta = smap.shape[0], smap.shape[1]
        factor = input_size // eta
        if factor * eta != input_size:
            raise ValueError(
                f"fine annotation: map extent {eta} does not divide input {input_size}"
            )
        pam = ad.upsample(ad.reshape(smap, (b, 1, eta, eta)), factor, "bilinear")
        pam = ad.reshape(ad.take_rows(pam, rows), (rows.size, input_size, input_size))
        weight = li[rows, None, None] * masks[rows] + lf[rows, None, None]
        sq = ad.tsum(ad.reshape(ad.power(pam * weight.astype(pam.data.dtype), 2),
                                (rows.size, input_size * input_size)), axis=1)
        total = total + ad.tsum(ad.sqrt(sq))
    return total


def total_loss(logits, g, sim_maps, layer, labels, masks, weights: LossWeights,
               coeffs: FineAnnotationCoeffs, input_size: int) -> dict:
    """All loss terms plus their weighted sum, keyed for logging."""
    ce = cross_entropy(logits, labels)
    clust, sep = cluster_and_separation(g, labels, layer.entries)
    ortho = orthogonality_loss(layer)
    fine = fine_annotation_loss(sim_maps, masks, labels, coeffs, layer.entries, input_size)
    total = (
        ce
        + weights.cluster * clust
        + weights.separation * sep
        + weights.orthogonality * ortho
        + weights.fine_annotation * fine
    )
    return {
        "cross_entropy": ce,
        "cluster": clust,
        "separation": sep,
        "orthogonality": ortho,
        "fine_annotation": fine,
        "total": total,
    }
