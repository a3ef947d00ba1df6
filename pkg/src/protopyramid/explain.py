"""Case-based explanations: which prototypes fired where, and how much each
contributed to the predicted class."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .prototypes import CLASS_NAMES


@dataclass
class PrototypeEvidence:
    index: int
    cls: int
    level: int
    similarity: float                 # focal similarity on this image
    contributions: list               # per-class contribution w[c,j] * g_j
    activation_map: np.ndarray        # (H, H) bilinear upsample of the cosine map
    top_patch_box: tuple              # (row, col, size) in input pixels
    source: dict | None               # provenance record, None if unprojected


@dataclass
class Explanation:
    logits: np.ndarray
    probabilities: np.ndarray
    predicted_class: int
    evidence: list                    # top-n PrototypeEvidence by contribution
    contribution_matrix: np.ndarray   # (num_classes, m), sums to logits per class
    projected: bool
    meta: dict = field(default_factory=dict)


def explain(model, image: np.ndarray, top_n: int = 3) -> Explanation:
    """Build the explanation for one image (shape (H, H) or (1, H, H))."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    x = image[None]  # batch of one
    size = model.backbone_cfg.input_size
    projected = all(e.index in model.layer.provenance for e in model.layer.entries)
    if not projected:
        warnings.warn("explaining with unprojected prototypes: source patches unavailable")
    with ad.no_grad():
        out = model.forward(x)
        g = out.g.data[0]
        logits = out.logits.data[0]
        w = model.layer.params["head.w"].data
        contrib = w * g[None, :]
        probs = ad.softmax(ad.Tensor(logits[None]), axis=1).data[0]
        pred = int(logits.argmax())
        evidence = []
        for e in model.layer.entries:
            smap = out.sim_maps[e.index].data[0]
            eta = smap.shape[0]
            factor = size // eta
            up = ad.upsample(ad.Tensor(smap[None, None]), factor, "bilinear").data[0, 0]
            at = int(smap.argmax())
            evidence.append(PrototypeEvidence(
                index=e.index,
                cls=e.cls,
                level=e.level,
                similarity=float(g[e.index]),
                contributions=[float(c) for c in contrib[:, e.index]],
                activation_map=up,
                top_patch_box=((at // eta) * factor, (at % eta) * factor, factor),
                source=model.layer.provenance.get(e.index),
            ))
    evidence = [ev for ev in evidence if ev.contributions[pred] != 0.0]
    evidence.sort(key=lambda ev: (-ev.contributions[pred], ev.index))
    return Explanation(
        logits=logits,
        probabilities=probs,
        predicted_class=pred,
        evidence=evidence[:top_n],
        contribution_matrix=contrib,
        projected=projected,
        meta={"top_n": top_n, "overlay_normalization": "per-map min-max"},
    )


# -- rendering ----------------------------------------------------------------

def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary portable graymap from a [0,1] float image."""
    u8 = _to_u8(img)
    with open(path, "wb") as f:
        f.write(f"P5\n{u8.shape[1]} {u8.shape[0]}\n255\n".encode())
        f.write(u8.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary portable pixmap from a (H, W, 3) [0,1] float image."""
    u8 = _to_u8(rgb)
    with open(path, "wb") as f:
        f.write(f"P6\n{u8.shape[1]} {u8.shape[0]}\n255\n".encode())
        f.write(u8.tobytes())


def _overlay(image: np.ndarray, amap: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    lo, hi = amap.min(), amap.max()
    norm = (amap - lo) / (hi - lo) if hi > lo else np.zeros_like(amap)
    rgb = np.repeat(image[..., None], 3, axis=-1)
    heat = np.stack([norm, np.zeros_like(norm), 1.0 - norm], axis=-1)
    return (1 - alpha) * rgb + alpha * heat


def render(explanation: Explanation, image: np.ndarray, out_dir, dataset=None) -> list:
    """Write the explanation as graymap/pixmap panels plus a JSON table.

    ``dataset`` (optional) supplies prototype source images for the
    provenance panels. Returns the list of files written. Output bytes are
    deterministic for a fixed explanation.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[0]
    written = []

    def emit(name, writer, arr):
        path = out / name
        writer(path, arr)
        written.append(str(path))

    emit("input.pgm", write_pgm, image)
    table = {
        "predicted_class": CLASS_NAMES[explanation.predicted_class],
        "logits": {CLASS_NAMES[i]: float(v) for i, v in enumerate(explanation.logits)},
        "probabilities": {CLASS_NAMES[i]: float(v) for i, v in enumerate(explanation.probabilities)},
        "projected": explanation.projected,
        "overlay_normalization": explanation.meta.get("overlay_normalization"),
        "evidence": [],
    }
    for rank, ev in enumerate(explanation.evidence):
        stem = f"rank{rank}_proto{ev.index}"
        emit(f"{stem}_activation.ppm", write_ppm, _overlay(image, ev.activation_map))
        r, c, s = ev.top_patch_box
        emit(f"{stem}_top_patch.pgm", write_pgm, image[r : r + s, c : c + s])
        if ev.source is not None and dataset is not None:
            src = dataset.by_id(ev.source["image_id"])
            src_img = src.image[0]
            rr, cc = ev.source["row"] * s, ev.source["col"] * s
            emit(f"{stem}_source.pgm", write_pgm, src_img)
            emit(f"{stem}_source_patch.pgm", write_pgm, src_img[rr : rr + s, cc : cc + s])
        table["evidence"].append({
            "rank": rank,
            "prototype": ev.index,
            "class": CLASS_NAMES[ev.cls],
            "level": ev.level,
            "focal_similarity": ev.similarity,
            "contribution_to_prediction": ev.contributions[explanation.predicted_class],
            "contributions": {CLASS_NAMES[i]: v for i, v in enumerate(ev.contributions)},
            "top_patch_box": list(ev.top_patch_box),
            "source": ev.source,
        })
    path = out / "contributions.json"
    with open(path, "w") as fjson:
        json.dump(table, fjson, sort_keys=True, indent=1)
        fjson.write("\n")
    written.append(str(path))
    return written
