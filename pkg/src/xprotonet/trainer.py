"""Staged training: warm-up, then repeated (joint -> projection -> head) cycles,
then pruning of negatively weighted prototypes."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import shutil
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import LossConfig, TrainConfig
from .data import ImageSet, grid_masks_from_pixels
from .exceptions import ConfigError, ProjectionError
from .explain import evaluate
from .model import PrototypeNet, calibrate_batch_norm, project_prototypes, prune_prototypes
from .objectives import compute_batch_loss
from .transforms import augment, sample_affine, sample_augmentation

logger = logging.getLogger(__name__)

JOINT_BEST = "joint_best"  # checkpoint subdirectory holding the best joint-stage weights
STAGES = ("warmup", "joint", "project", "head", "done")
_STAGE_CODE = {name: i for i, name in enumerate(STAGES)}


class EarlyStopping:
    """Signal a stop once the score fails to improve ``patience`` times in a row."""

    def __init__(self, patience: int, best: float | None = None, bad_epochs: int = 0):
        self.patience = patience
        self.best = best
        self.bad_epochs = bad_epochs

    def update(self, score: float | None) -> bool:
        if score is not None and (self.best is None or score > self.best):
            self.best = score
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainState:
    cycle: int = 0
    stage: str = "warmup"
    epoch: int = 0
    best_val_auc: float | None = None
    cycle_start_best: float | None = None
    stage_best: float | None = None
    epochs_since_improvement: int = 0
    history: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(**d)


def _param_hash(params) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Runs the stage machine over a model, resumable at any epoch boundary.

    ``evaluator`` maps the model to a validation mean AUC; by default it is
    computed on ``val``. All randomness is derived from
    ``(seed, cycle, stage, epoch, batch)`` so a resumed run repeats exactly.
    """

    def __init__(
        self,
        model: PrototypeNet,
        train: ImageSet,
        val: ImageSet,
        train_config: TrainConfig,
        loss_config: LossConfig,
        evaluator: Callable[[PrototypeNet], float | None] | None = None,
        log_path: str | Path | None = None,
        checkpoint_dir: str | Path | None = None,
        state: TrainState | None = None,
    ):
        if len(val) == 0 and evaluator is None:
            raise ConfigError("validation split is empty")
        if len(train) == 0:
            raise ConfigError("training split is empty")
        self.model = model
        self.train_set = train
        self.val_set = val
        self.cfg = train_config
        self.loss_cfg = loss_config
        self.evaluator = evaluator or (lambda m: evaluate(m, val.images, val.labels.numpy()).mean_auc)
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.state = state or TrainState()
        self.optimizer: torch.optim.Optimizer | None = None
        self.stopper: EarlyStopping | None = None
        self.grid = model.config.feature_grid
        self.prior = bool(train_config.prior_condition)
        if self.prior and not model.has_occurrence:
            raise ConfigError("prior-condition training requires the xprotonet variant")
        self.joint_best: dict | None = None
        self.class_mask = self._positive_classes()
        self._check_prior_pool()
        calibrate_batch_norm(model, train.images, max(train_config.batch_size, 64))

    # -- setup helpers
    def _positive_classes(self) -> torch.Tensor:
        positive = self.train_set.labels.sum(0) > 0
        for c in torch.nonzero(~positive).flatten().tolist():
            warnings.warn(f"class {self.model.class_names[c]!r} is never positive in training; "
                          "it is excluded from the cluster/separation terms", stacklevel=3)
        return positive

    def _annotated_grid_masks(self, ds: ImageSet) -> torch.Tensor | None:
        masks = ds.grid_masks(self.grid)
        if masks is None:
            return None
        return masks & ds.annotated.view(-1, 1, 1, 1)

    def _check_prior_pool(self) -> None:
        if not self.prior:
            return
        if self.train_set.pixel_masks is None:
            raise ConfigError("prior-condition training needs box masks")
        if not bool(self.train_set.annotated.any()):
            warnings.warn("prior-condition run without any box-annotated sample; "
                          "training proceeds unconstrained", stacklevel=3)
            return
        masks = self._annotated_grid_masks(self.train_set)
        has = (masks.flatten(2).any(-1) & self.train_set.labels.bool()).any(0)
        missing = [self.model.class_names[c] for c in range(len(has)) if self.class_mask[c] and not has[c]]
        if missing:
            raise ProjectionError(f"no box-annotated positive sample for class(es): {', '.join(missing)}")

    def parameter_groups(self, stage: str) -> list[dict]:
        # weight decay applies to convolutional weights only, never to prototypes or the head
        m, c = self.model, self.cfg
        wd = c.weight_decay
        if stage == "warmup":
            groups = [{"params": m.module_parameters(), "lr": c.lr_modules, "weight_decay": wd},
                      {"params": [m.prototypes], "lr": c.lr_prototypes, "weight_decay": 0.0}]
        elif stage == "joint":
            groups = [{"params": m.backbone_parameters(), "lr": c.lr_backbone, "weight_decay": wd},
                      {"params": m.module_parameters(), "lr": c.lr_modules, "weight_decay": wd},
                      {"params": [m.prototypes], "lr": c.lr_prototypes, "weight_decay": 0.0}]
        elif stage == "head":
            groups = [{"params": [m.head], "lr": c.lr_head, "weight_decay": 0.0}]
        else:
            raise ValueError(stage)
        return groups

    def _set_trainable(self, stage: str) -> None:
        trainable = {id(p) for g in self.parameter_groups(stage) for p in g["params"]}
        for p in self.model.parameters():
            p.requires_grad_(id(p) in trainable)

    def _make_optimizer(self, stage: str) -> torch.optim.Optimizer:
        self._set_trainable(stage)
        groups = self.parameter_groups(stage)
        if self.cfg.optimizer == "sgd":
            return torch.optim.SGD(groups, momentum=0.9)
        return torch.optim.Adam(groups)

    # -- epochs
    def _rng(self, *extra) -> np.random.Generator:
        s = self.state
        return np.random.default_rng([self.cfg.seed, s.cycle, _STAGE_CODE[s.stage], s.epoch, *extra])

    def _batches(self):
        n = len(self.train_set)
        order = self._rng().permutation(n)
        bs = self.cfg.batch_size
        for b, start in enumerate(range(0, n, bs)):
            yield b, order[start:start + bs]

    def train_epoch(self) -> dict:
        stage = self.state.stage
        head_only = stage == "head"
        self.model.train()
        if stage != "joint":
            self.model.backbone.eval()  # a frozen backbone keeps its normalization statistics
        sums: dict[str, float] = {}
        count = 0
        ds = self.train_set
        for b, idx in self._batches():
            rng = self._rng(b)
            x = ds.images[idx]
            y = ds.labels[idx]
            pixel_masks = ds.pixel_masks[idx] if (self.prior and ds.pixel_masks is not None) else None
            if self.cfg.augment:
                angles, scales = sample_augmentation(rng, len(idx))
                if pixel_masks is not None:
                    x, pixel_masks = augment(x, angles, scales, pixel_masks)
                else:
                    x = augment(x, angles, scales)
                x = x.to(ds.images.dtype)
            affine = None if head_only or not self.model.has_occurrence else sample_affine(rng, self.loss_cfg.affine_ratios)
            grid_masks = None
            annotated = None
            if pixel_masks is not None:
                grid_masks = grid_masks_from_pixels(pixel_masks, self.grid)
                annotated = ds.annotated[idx]
            self.optimizer.zero_grad(set_to_none=True)
            losses = compute_batch_loss(
                self.model, x, y, self.loss_cfg, affine=affine, bbox_masks=grid_masks,
                annotated=annotated, class_mask=self.class_mask, head_only=head_only,
            )
            losses.total.backward()
            self.optimizer.step()
            rec = losses.record()
            rec.pop("per_class_cls")
            for k, v in rec.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            count += len(idx)
        if stage == "joint":
            calibrate_batch_norm(self.model, ds.images, max(self.cfg.batch_size, 64), refresh=True)
        return {k: v / count for k, v in sums.items()}

    def _log(self, record: dict) -> None:
        self.state.history.append(record)
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _validate(self) -> float | None:
        score = self.evaluator(self.model)
        if score is not None and (self.state.best_val_auc is None or score > self.state.best_val_auc):
            self.state.best_val_auc = score
        return score

    def project(self) -> None:
        ds = self.train_set
        masks = None
        candidates = ds
        if self.prior and bool(ds.annotated.any()):
            keep = torch.nonzero(ds.annotated).flatten().numpy()
            candidates = ds.subset(keep)
            masks = self._annotated_grid_masks(candidates)
        project_prototypes(
            self.model, candidates.images, candidates.labels.numpy(), candidates.ids,
            bbox_masks=masks, batch_size=max(self.cfg.batch_size, 64),
            require_all_classes=masks is not None,
        )

    # -- stage machine
    def _enter(self, stage: str) -> None:
        s = self.state
        s.stage, s.epoch = stage, 0
        s.stage_best, s.epochs_since_improvement = None, 0
        self.joint_best = None
        self.optimizer = self._make_optimizer(stage) if stage in ("warmup", "joint", "head") else None

    def _save(self) -> None:
        if self.checkpoint_dir is None:
            return
        save_checkpoint(
            self.checkpoint_dir, self.model, train_state=self.state.to_dict(),
            optimizer_state=None if self.optimizer is None else self.optimizer.state_dict(),
            hyperparameters={"train": dataclasses.asdict(self.cfg), "loss": dataclasses.asdict(self.loss_cfg)},
        )
        best_dir = self.checkpoint_dir / JOINT_BEST
        if self.joint_best is None:
            shutil.rmtree(best_dir, ignore_errors=True)
        else:
            snapshot = copy.deepcopy(self.model)
            snapshot.load_state_dict(self.joint_best)
            save_checkpoint(best_dir, snapshot)

    def step(self) -> bool:
        """Advance by one epoch (or one projection). Returns False once finished."""
        s, c = self.state, self.cfg
        if s.stage == "done":
            return False
        if self.optimizer is None and s.stage in ("warmup", "joint", "head"):
            self.optimizer = self._make_optimizer(s.stage)
        if s.stage == "warmup" and c.warmup_epochs == 0:
            s.cycle_start_best = s.best_val_auc
            self._enter("joint")
        if s.stage == "warmup":
            losses = self.train_epoch()
            auc = self._validate()
            self._log({"cycle": s.cycle, "stage": "warmup", "epoch": s.epoch, **losses, "val_mean_auc": auc})
            s.epoch += 1
            if s.epoch >= c.warmup_epochs:
                s.cycle_start_best = s.best_val_auc
                self._enter("joint")
        elif s.stage == "joint":
            losses = self.train_epoch()
            auc = self._validate()
            self._log({"cycle": s.cycle, "stage": "joint", "epoch": s.epoch, **losses, "val_mean_auc": auc})
            stopper = EarlyStopping(c.early_stop_patience, s.stage_best, s.epochs_since_improvement)
            stop = stopper.update(auc)
            s.stage_best, s.epochs_since_improvement = stopper.best, stopper.bad_epochs
            if stopper.bad_epochs == 0:
                self.joint_best = {k: v.clone() for k, v in self.model.state_dict().items()}
            s.epoch += 1
            if stop or s.epoch >= c.max_joint_epochs:
                # leave the stage with the weights of its best validation epoch
                if self.joint_best is not None:
                    self.model.load_state_dict(self.joint_best)
                self._enter("project")
        elif s.stage == "project":
            self.project()
            auc = self._validate()
            self._log({"cycle": s.cycle, "stage": "project", "epoch": 0, "val_mean_auc": auc})
            self._enter("head")
        elif s.stage == "head":
            losses = self.train_epoch()
            auc = self._validate()
            self._log({"cycle": s.cycle, "stage": "head", "epoch": s.epoch, **losses, "val_mean_auc": auc})
            s.epoch += 1
            if s.epoch >= c.head_epochs:
                self._end_cycle()
        self._save()
        return s.stage != "done"

    def _end_cycle(self) -> None:
        s, c = self.state, self.cfg
        before = -np.inf if s.cycle_start_best is None else s.cycle_start_best
        after = -np.inf if s.best_val_auc is None else s.best_val_auc
        improved = after - before
        finished = s.cycle + 1 >= c.max_cycles or (s.cycle + 1 >= c.min_cycles and improved < c.convergence_tol)
        if finished:
            prune_prototypes(self.model)
            s.stage, s.epoch = "done", 0
            auc = self._validate()
            self._log({"cycle": s.cycle, "stage": "prune", "epoch": 0, "val_mean_auc": auc,
                       "active": int(self.model.active.sum())})
            self.optimizer = None
            for p in self.model.parameters():
                p.requires_grad_(True)
        else:
            s.cycle += 1
            s.cycle_start_best = s.best_val_auc
            self._enter("joint")

    def run(self, max_steps: int | None = None) -> tuple[PrototypeNet, TrainState]:
        steps = 0
        while self.step():
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        return self.model, self.state

    @classmethod
    def resume(cls, checkpoint_dir, train: ImageSet, val: ImageSet, train_config: TrainConfig,
               loss_config: LossConfig, **kwargs) -> "Trainer":
        model, state, optim, _ = load_checkpoint(checkpoint_dir)
        trainer = cls(model, train, val, train_config, loss_config, state=TrainState.from_dict(state),
                      checkpoint_dir=checkpoint_dir, **kwargs)
        best_dir = Path(checkpoint_dir) / JOINT_BEST
        if trainer.state.stage == "joint" and best_dir.is_dir():
            trainer.joint_best = load_checkpoint(best_dir)[0].state_dict()
        if trainer.state.stage in ("warmup", "joint", "head"):
            trainer.optimizer = trainer._make_optimizer(trainer.state.stage)
            if optim is not None and optim["state"]:
                trainer.optimizer.load_state_dict(optim)
        return trainer


def run_training(model, train: ImageSet, val: ImageSet, train_config: TrainConfig, loss_config: LossConfig,
                 **kwargs) -> tuple[PrototypeNet, TrainState]:
    if train_config.prior_condition:
        train_config = dataclasses.replace(train_config, prior_condition=False)
    return Trainer(model, train, val, train_config, loss_config, **kwargs).run()


def run_training_prior_condition(model, train: ImageSet, val: ImageSet, train_config: TrainConfig,
                                 loss_config: LossConfig, **kwargs) -> tuple[PrototypeNet, TrainState]:
    cfg = dataclasses.replace(train_config, prior_condition=True)
    return Trainer(model, train, val, cfg, loss_config, **kwargs).run()


def stage_parameter_hash(model: PrototypeNet, which: str) -> str:
    """Hash of a parameter group (``backbone``, ``modules``, ``prototypes``, ``head``)."""
    params = {
        "backbone": model.backbone_parameters,
        "modules": model.module_parameters,
        "prototypes": lambda: [model.prototypes],
        "head": lambda: [model.head],
    }[which]()
    return _param_hash(params)
