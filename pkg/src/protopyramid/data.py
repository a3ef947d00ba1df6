"""Synthetic mass-margin dataset.

Renders bright elliptical lesions on textured backgrounds, one margin style
per class: hard boundary (circumscribed), heavily blurred boundary
(indistinct), boundary with radial spikes (spiculated). Each lesion sample
carries a binary fine-annotation mask that is 0 on a ring around the lesion
boundary and 1 everywhere else. Negative samples are lesion-free crops of
the same background texture with an all-ones mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import container
from .prototypes import CLASS_NAMES

FORMAT_VERSION = 1
BAND_HALF_WIDTH = 2  # dilation/erosion iterations -> ~4 px annotation band


@dataclass
class DataConfig:
    image_size: int = 64
    train_per_class: int = 400
    eval_per_class: int = 100
    negatives_train: int = 500
    negatives_eval: int = 100
    seed: int = 7

    def validate(self) -> None:
        if self.image_size < 16:
            raise ValueError("data.image_size: must be >= 16")
        for name in ("train_per_class", "eval_per_class", "negatives_train", "negatives_eval"):
            if getattr(self, name) < 0:
                raise ValueError(f"data.{name}: must be >= 0")
        if self.train_per_class == 0 or self.eval_per_class == 0:
            raise ValueError("data: train and eval splits need every lesion class")


@dataclass
class Sample:
    image: np.ndarray       # (1, H, H) float in [0, 1]
    label: int
    mask: np.ndarray        # (H, H) uint8, 1 outside the annotation band
    sample_id: str
    meta: dict = field(default_factory=dict)


def _sample_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = rng.normal(0.0, 1.0, size=(size, size))
    tex = ndimage.gaussian_filter(noise, sigma=2.5)
    tex = (tex - tex.mean()) / (tex.std() + 1e-9)
    return np.clip(0.35 + 0.07 * tex + 0.02 * rng.normal(size=(size, size)), 0.0, 1.0)


def _lesion_geometry(rng: np.random.Generator, size: int):
    scale = size / 64.0
    cy, cx = (size / 2 + rng.uniform(-6, 6, size=2) * scale)
    ry = rng.uniform(9, 15) * scale
    rx = rng.uniform(9, 15) * scale
    theta = rng.uniform(0, np.pi)
    return cy, cx, ry, rx, theta


def _radial_field(size, cy, cx, ry, rx, theta):
    """Normalized elliptical radius (1.0 on the nominal boundary) and angle."""
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    rho = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    ang = np.arctan2(v, u)
    return rho, ang


def generate_lesion(cls: int, rng: np.random.Generator, size: int) -> tuple:
    """Render one lesion image; returns (image (H,H), mask (H,H), meta)."""
    if cls not in (0, 1, 2):
        raise ValueError(f"generate_lesion: class {cls} is not a lesion class")
    bg = _background(rng, size)
    cy, cx, ry, rx, theta = _lesion_geometry(rng, size)
    rho, ang = _radial_field(size, cy, cx, ry, rx, theta)
    meta = {"cy": cy, "cx": cx, "ry": ry, "rx": rx, "theta": theta}
    if cls == 2:
        n_spikes = int(rng.integers(8, 17))
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.35, 0.55)
        boundary = 1.0 + amp * np.maximum(0.0, np.cos(n_spikes * ang + phase)) ** 3
        meta.update({"spikes": n_spikes, "phase": phase, "amp": amp})
    else:
        boundary = np.ones_like(rho)
    support = rho < boundary
    amp = rng.uniform(0.35, 0.45)
    lesion = amp * support.astype(float)
    if cls == 1:
        sigma = rng.uniform(3.0, 6.0)
        lesion = ndimage.gaussian_filter(lesion, sigma=sigma)
        meta["blur_sigma"] = sigma
    else:
        lesion = ndimage.gaussian_filter(lesion, sigma=0.5)
    image = np.clip(bg + lesion, 0.0, 1.0)
    band = ndimage.binary_dilation(support, iterations=BAND_HALF_WIDTH) & ~ndimage.binary_erosion(
        support, iterations=BAND_HALF_WIDTH
    )
    mask = (~band).astype(np.uint8)
    return image, mask, meta


def sample_negative_patches(n: int, rng_seed: int, size: int, split_key: int) -> list:
    """Lesion-free crops of freshly generated background textures."""
    out = []
    for i in range(n):
        rng = _sample_rng(rng_seed, split_key, 1000000 + i)
        big = _background(rng, size * 2)
        oy, ox = rng.integers(0, size, size=2)
        image = big[oy : oy + size, ox : ox + size]
        out.append((image.copy(), np.ones((size, size), dtype=np.uint8)))
    return out


def generate_split(cfg: DataConfig, split: str) -> list:
    """Deterministic list of samples for 'train' or 'eval'."""
    split_key = {"train": 0, "eval": 1}[split]
    per_class = cfg.train_per_class if split == "train" else cfg.eval_per_class
    n_neg = cfg.negatives_train if split == "train" else cfg.negatives_eval
    samples = []
    idx = 0
    for cls in (0, 1, 2):
        for i in range(per_class):
            rng = _sample_rng(cfg.seed, split_key, cls * 100000 + i)
            image, mask, meta = generate_lesion(cls, rng, cfg.image_size)
            samples.append(Sample(
                image=image[None].astype(np.float64),
                label=cls,
                mask=mask,
                sample_id=f"{split}-{idx:05d}",
                meta=meta,
            ))
            idx += 1
    for image, mask in sample_negative_patches(n_neg, cfg.seed, cfg.image_size, split_key):
        samples.append(Sample(
            image=image[None].astype(np.float64),
            label=3,
            mask=mask,
            sample_id=f"{split}-{idx:05d}",
            meta={},
        ))
        idx += 1
    return samples


@dataclass
class Dataset:
    config: DataConfig
    splits: dict  # split -> list[Sample]

    def arrays(self, split: str):
        """(images (N,1,H,H), labels (N,), masks (N,H,H), ids)."""
        ss = self.splits[split]
        images = np.stack([s.image for s in ss])
        labels = np.array([s.label for s in ss], dtype=np.int64)
        masks = np.stack([s.mask for s in ss])
        ids = [s.sample_id for s in ss]
        return images, labels, masks, ids

    def by_id(self, sample_id: str) -> Sample:
        for ss in self.splits.values():
            for s in ss:
                if s.sample_id == sample_id:
                    return s
        raise KeyError(f"sample id {sample_id!r} not in dataset")


def generate_dataset(cfg: DataConfig) -> Dataset:
    cfg.validate()
    return Dataset(config=cfg, splits={
        "train": generate_split(cfg, "train"),
        "eval": generate_split(cfg, "eval"),
    })


# -- disk layout: manifest.json + one container per split ---------------------

def write_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "class_names": list(CLASS_NAMES),
        "config": vars(ds.config),
        "splits": {},
    }
    for split, samples in sorted(ds.splits.items()):
        images = np.stack([s.image for s in samples])
        labels = np.array([s.label for s in samples], dtype=np.int64)
        masks = np.stack([s.mask for s in samples])
        container.save(out / f"{split}.bin",
                       {"images": images, "labels": labels, "masks": masks},
                       meta={"split": split})
        manifest["splits"][split] = {
            "file": f"{split}.bin",
            "ids": [s.sample_id for s in samples],
            "class_counts": {
                CLASS_NAMES[c]: int((labels == c).sum()) for c in range(len(CLASS_NAMES))
            },
        }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")


def read_dataset(path) -> Dataset:
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"{path}: no manifest.json; not a dataset directory")
    with open(mf) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset format version")
    cfg = DataConfig(**manifest["config"])
    splits = {}
    for split, info in manifest["splits"].items():
        tensors, _ = container.load(root / info["file"])
        samples = []
        for i, sid in enumerate(info["ids"]):
            samples.append(Sample(
                image=tensors["images"][i],
                label=int(tensors["labels"][i]),
                mask=tensors["masks"][i],
                sample_id=sid,
            ))
        splits[split] = samples
    return Dataset(config=cfg, splits=splits)
