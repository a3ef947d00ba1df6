"""Full classifier: pyramid backbone + prototype layer + scoring head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backbone import BackboneConfig, FeaturePyramidNet
from .prototypes import PrototypeConfig, PrototypeLayer


@dataclass
class ModelOutput:
    pyramid: dict        # level -> (B, d, eta, eta)
    sim_maps: dict       # prototype index -> (B, eta, eta)
    g: ad.Tensor         # (B, m) focal similarities
    logits: ad.Tensor    # (B, num_classes)


class Model:
    def __init__(self, backbone_cfg: BackboneConfig, proto_cfg: PrototypeConfig, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.net = FeaturePyramidNet(backbone_cfg, rng)
        proto_cfg.validate(backbone_cfg.levels)
        self.layer = PrototypeLayer(proto_cfg, backbone_cfg.feature_dim, rng)
        self.backbone_cfg = backbone_cfg
        self.proto_cfg = proto_cfg

    @property
    def params(self) -> dict:
        return {**self.net.params, **self.layer.params}

    def parameter_groups(self) -> dict:
        groups = {"backbone": {}, "pyramid": {}, "head": {}}
        for name, p in self.params.items():
            if name.startswith("backbone."):
                groups["backbone"][name] = p
            elif name.startswith("head."):
                groups["head"][name] = p
            else:
                groups["pyramid"][name] = p
        return groups

    def forward(self, x) -> ModelOutput:
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(x)
        pyramid = self.net.forward(x)
        sim_maps = self.layer.similarity_maps(pyramid)
        g = self.layer.focal_similarities(sim_maps)
        logits = self.layer.logits(g)
        return ModelOutput(pyramid=pyramid, sim_maps=sim_maps, g=g, logits=logits)

    def predict_logits(self, x) -> np.ndarray:
        with ad.no_grad():
            return self.forward(x).logits.data

    # -- prototype projection ------------------------------------------------
    def project_prototypes(self, images: np.ndarray, labels: np.ndarray,
                           image_ids=None, batch_size: int = 32) -> dict:
        """Replace each prototype with its most-similar training patch.

        images: (N, 1, H, H) of the training split, labels: (N,). Every
        prototype's class must be present. Returns the provenance table
        (also stored on the layer). Deterministic: images are scanned in
        order, patches row-major, first maximum wins.
        """
        labels = np.asarray(labels)
        if image_ids is None:
            image_ids = list(range(len(images)))
        for e in self.layer.entries:
            if not (labels == e.cls).any():
                raise ValueError(
                    f"project_prototypes: no images of class {e.cls} for prototype {e.index}"
                )

        levels = sorted({e.level for e in self.layer.entries})
        best = {e.index: (-np.inf, None, None) for e in self.layer.entries}
        p_norm = {
            e.index: self.layer.vector(e.index).data
            / np.linalg.norm(self.layer.vector(e.index).data)
            for e in self.layer.entries
        }
        with ad.no_grad():
            for start in range(0, len(images), batch_size):
                batch = images[start : start + batch_size]
                batch_labels = labels[start : start + batch_size]
                pyramid = self.net.forward(ad.Tensor(batch))
                feats = {l: pyramid[l].data for l in levels}
                for e in self.layer.entries:
                    rows = np.nonzero(batch_labels == e.cls)[0]
                    if rows.size == 0:
                        continue
                    z = feats[e.level][rows]                      # (n, d, eta, eta)
                    n, d, eta, _ = z.shape
                    patches = z.transpose(0, 2, 3, 1).reshape(n, eta * eta, d)
                    raw_norms = np.linalg.norm(patches, axis=2)
                    norms = np.maximum(raw_norms, 1e-12)
                    sims = patches @ p_norm[e.index] / norms       # (n, eta*eta)
                    # a zero patch has no direction; never select one
                    sims[raw_norms <= 1e-12] = -np.inf
                    flat = sims.reshape(-1)
                    at = int(flat.argmax())
                    val = float(flat[at])
                    if val > best[e.index][0]:
                        img_row = rows[at // (eta * eta)]
                        patch_at = at % (eta * eta)
                        vec = patches[at // (eta * eta), patch_at].copy()
                        best[e.index] = (
                            val,
                            vec,
                            {
                                "image_id": image_ids[start + img_row],
                                "row": patch_at // eta,
                                "col": patch_at % eta,
                                "level": e.level,
                            },
                        )
        for e in self.layer.entries:
            _, vec, record = best[e.index]
            if vec is None:
                raise ValueError(
                    f"project_prototypes: class {e.cls} level {e.level} produced "
                    f"no usable (nonzero) patches"
                )
            self.layer.vector(e.index).data = vec.astype(
                self.layer.vector(e.index).data.dtype
            )
            self.layer.provenance[e.index] = record
        return self.layer.provenance
