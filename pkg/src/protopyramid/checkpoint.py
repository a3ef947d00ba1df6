"""Checkpoint save/load on top of the tensor container."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import container
from .backbone import BackboneConfig
from .model import Model
from .prototypes import PrototypeConfig

CHECKPOINT_KIND = "protopyramid-checkpoint"


def save_checkpoint(path, model: Model, optimizer=None, config_hash: str = "",
                    stage: str = "", history=None) -> None:
    tensors = {f"param.{name}": p.data for name, p in model.params.items()}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    meta = {
        "kind": CHECKPOINT_KIND,
        "config_hash": config_hash,
        "stage": stage,
        "dtype": np.dtype(ad.get_default_dtype()).name,
        "backbone": vars(model.backbone_cfg) | {"levels": list(model.backbone_cfg.levels)},
        "prototypes": vars(model.proto_cfg) | {"levels": list(model.proto_cfg.levels)},
        "provenance": {str(k): v for k, v in model.layer.provenance.items()},
        "history": history or [],
    }
    container.save(path, tensors, meta)


def load_checkpoint(path):
    """Returns (model, optimizer_state_tensors, meta). Sets the default dtype
    to the checkpoint's dtype so forwards reproduce bit-exactly."""
    tensors, meta = container.load(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise container.ContainerError(f"{path}: not a checkpoint file")
    ad.set_default_dtype(meta["dtype"])
    bc = BackboneConfig(**{**meta["backbone"], "levels": tuple(meta["backbone"]["levels"])})
    pc = PrototypeConfig(**{**meta["prototypes"], "levels": tuple(meta["prototypes"]["levels"])})
    model = Model(bc, pc, seed=0)
    for name, p in model.params.items():
        stored = tensors[f"param.{name}"]
        if tuple(stored.shape) != tuple(p.data.shape):
            raise container.ContainerError(
                f"{path}: shape mismatch for {name}: {stored.shape} vs {p.data.shape}"
            )
        p.data = stored.copy()
    model.layer.provenance = {int(k): v for k, v in meta.get("provenance", {}).items()}
    opt_state = {k: v for k, v in tensors.items() if k.startswith("optim.")}
    return model, opt_state, meta
