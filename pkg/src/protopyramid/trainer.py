"""Three-stage training schedule: warmup with a frozen backbone, prototype
projection, then full fine-tuning with periodic re-projection."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import metrics
from .checkpoint import save_checkpoint
from .model import Model
from .optim import Adam


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage_a_epochs: int = 2
    stage_c_epochs: int = 6
    batch_size: int = 32
    seed: int = 0
    lr_warm: float = 1e-3
    lr_backbone: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    projection_every: int = 5
    negatives_per_epoch: int = 200
    dtype: str = "float32"

    def validate(self) -> None:
        if self.stage_a_epochs < 0 or self.stage_c_epochs < 0:
            raise ValueError("train: epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("train.batch_size: must be >= 1")
        for name in ("lr_warm", "lr_backbone"):
            if getattr(self, name) < 0:
                raise ValueError(f"train.{name}: must be >= 0")
        if self.projection_every < 1:
            raise ValueError("train.projection_every: must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("train.dtype: must be float32 or float64")


def _set_requires_grad(params: dict, flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag


class Trainer:
    """Owns one model exclusively; deterministic given (config, seed, data)."""

    def __init__(self, model: Model, dataset, cfg: TrainConfig,
                 weights: L.LossWeights | None = None,
                 coeffs: L.FineAnnotationCoeffs | None = None,
                 config_hash: str = ""):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.weights = weights or L.LossWeights()
        self.coeffs = coeffs or L.FineAnnotationCoeffs()
        self.config_hash = config_hash
        self.history: list[dict] = []

        images, labels, masks, ids = dataset.arrays("train")
        self.train_images = images
        self.train_labels = labels
        self.train_masks = masks
        self.train_ids = ids
        if dataset.splits.get("eval"):
            self.eval_images, self.eval_labels, _, _ = dataset.arrays("eval")
        else:
            self.eval_images = self.eval_labels = None
        for cls in {e.cls for e in model.layer.entries}:
            if not (labels == cls).any():
                raise TrainingError(f"training split lacks class {cls} needed by prototypes")

        self.optimizer = Adam(
            model.parameter_groups(),
            lrs={"backbone": cfg.lr_backbone, "pyramid": cfg.lr_warm, "head": cfg.lr_warm},
            beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps,
        )

    # -- epoch mechanics -----------------------------------------------------
    def _epoch_indices(self, epoch_key: int) -> np.ndarray:
        """Lesion samples plus a per-epoch negative subsample, shuffled."""
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 7700 + epoch_key]))
        lesion = np.nonzero(self.train_labels != 3)[0]
        neg = np.nonzero(self.train_labels == 3)[0]
        if neg.size > self.cfg.negatives_per_epoch:
            neg = rng.choice(neg, size=self.cfg.negatives_per_epoch, replace=False)
        idx = np.concatenate([lesion, neg])
        rng.shuffle(idx)
        return idx

    def _run_epoch(self, epoch_key: int) -> dict:
        idx = self._epoch_indices(epoch_key)
        sums = {}
        n_batches = 0
        for start in range(0, len(idx), self.cfg.batch_size):
            rows = idx[start : start + self.cfg.batch_size]
            out = self.model.forward(self.train_images[rows])
            terms = L.total_loss(
                out.logits, out.g, out.sim_maps, self.model.layer,
                self.train_labels[rows], self.train_masks[rows],
                self.weights, self.coeffs, self.model.backbone_cfg.input_size,
            )
            loss = terms["total"]
            if not np.isfinite(loss.item()):
                snap = Path("protopyramid-diagnostic.ckpt")
                save_checkpoint(snap, self.model, self.optimizer,
                                self.config_hash, "diagnostic", self.history)
                raise TrainingError(
                    f"non-finite loss at epoch key {epoch_key}; snapshot in {snap}"
                )
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            for k, t in terms.items():
                sums[k] = sums.get(k, 0.0) + t.item()
            n_batches += 1
        return {k: v / max(n_batches, 1) for k, v in sums.items()}

    def _record(self, stage: str, epoch: int, losses: dict) -> dict:
        entry = {"stage": stage, "epoch": epoch}
        entry.update({f"loss_{k}": round(v, 10) for k, v in losses.items()})
        if self.eval_images is not None:
            report = metrics.evaluate(self.model, self.eval_images, self.eval_labels)
            entry["val_macro_auroc"] = round(report.macro_auroc_lesion, 10)
        self.history.append(entry)
        return entry

    # -- stages --------------------------------------------------------------
    def stage_a_warmup(self, epochs: int | None = None) -> None:
        epochs = self.cfg.stage_a_epochs if epochs is None else epochs
        _set_requires_grad(self.model.parameter_groups()["backbone"], False)
        for ep in range(epochs):
            losses = self._run_epoch(ep)
            self._record("A", ep, losses)
        _set_requires_grad(self.model.parameter_groups()["backbone"], True)

    def stage_b_project(self) -> None:
        self.model.project_prototypes(self.train_images, self.train_labels,
                                      image_ids=self.train_ids,
                                      batch_size=self.cfg.batch_size)
        self._record("B", 0, {})

    def stage_c_finetune(self, epochs: int | None = None) -> None:
        epochs = self.cfg.stage_c_epochs if epochs is None else epochs
        for ep in range(epochs):
            losses = self._run_epoch(1000 + ep)
            self._record("C", ep, losses)
            if (ep + 1) % self.cfg.projection_every == 0 and ep + 1 < epochs:
                self.stage_b_project()

    # -- full pipeline -------------------------------------------------------
    def train(self, out_path=None) -> dict:
        """A -> B -> C with periodic projection, final projection, final eval.

        Keeps the epoch whose validation AUROC was best, re-projects it so
        shipped prototypes are real training patches, and (optionally)
        writes the checkpoint. Returns the final history entry.
        """
        if self.cfg.stage_a_epochs == 0 and self.cfg.stage_c_epochs == 0:
            # nothing trained: emit the initialization untouched
            entry = self._record("final", 0, {})
            if out_path is not None:
                save_checkpoint(out_path, self.model, self.optimizer,
                                self.config_hash, "final", self.history)
            return entry
        self.stage_a_warmup()
        self.stage_b_project()
        best = None
        best_auroc = -np.inf

        epochs = self.cfg.stage_c_epochs
        for ep in range(epochs):
            losses = self._run_epoch(1000 + ep)
            entry = self._record("C", ep, losses)
            auroc = entry.get("val_macro_auroc", -np.inf)
            if auroc > best_auroc:
                best_auroc = auroc
                best = {n: p.data.copy() for n, p in self.model.params.items()}
            if (ep + 1) % self.cfg.projection_every == 0 and ep + 1 < epochs:
                self.stage_b_project()
        if best is not None:
            for n, p in self.model.params.items():
                p.data = best[n]
        self.stage_b_project()
        final_losses = {}
        entry = self._record("final", 0, final_losses)
        if out_path is not None:
            save_checkpoint(out_path, self.model, self.optimizer,
                            self.config_hash, "final", self.history)
        return entry
