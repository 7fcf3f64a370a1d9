"""Training loop: Adam with a two-phase step-decay learning rate, seeded
shuffling and per-step anchor resampling, JSONL metrics logging, periodic
checkpoints, and a NaN divergence guard that aborts with the last good
checkpoint. continue_train resumes parameters (not optimizer state) from a
checkpoint on a new dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, CroplandWSError
from .model import InferenceModel, ModelConfig, UTAE, build_model, load_checkpoint, prepare_input, save_checkpoint
from .sits import PatchSample, channel_stats
from .weak_supervision import LossWeights, total_loss


class TrainingDivergedError(CroplandWSError):
    """Loss became non-finite; the last good checkpoint path is attached."""

    def __init__(self, message: str, checkpoint: Path):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainingConfig:
    """Optimization schedule and sampling parameters."""

    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_decay_epoch: int = 50  # epochs >= this use the decayed rate
    learning_rate_decayed: float = 1e-4
    seed: int = 0
    anchors_per_patch: int = 256
    pool_size: int = 2048
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0 = final only
    val_every: int = 0  # epochs between validation callbacks; 0 = off

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainResult:
    checkpoint: Path
    history: list[dict]
    model: UTAE
    norm_mean: np.ndarray
    norm_std: np.ndarray

    def inference_model(self) -> InferenceModel:
        return InferenceModel(self.model, self.norm_mean, self.norm_std)


def _patch_tensors(patches: Sequence[PatchSample], mean: np.ndarray, std: np.ndarray):
    """Pre-assemble model inputs once; training then only stacks slices."""
    frames, valids, labels, masks = [], [], [], []
    for p in patches:
        ft, vt = prepare_input(p.cube, mean, std)
        frames.append(ft[0])
        valids.append(vt[0])
        labels.append(np.asarray(p.labels))
        masks.append(np.asarray(p.quality_mask))
    return frames, valids, labels, masks


def _run_epochs(
    model: UTAE,
    dataset: Sequence[PatchSample],
    weights: LossWeights,
    cfg: TrainingConfig,
    out_dir: Path,
    norm_mean: np.ndarray,
    norm_std: np.ndarray,
    val_fn: Callable[[InferenceModel], dict] | None,
) -> TrainResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    ckpt_path = out_dir / "checkpoint.pt"
    period_labels = dataset[0].cube.period_labels

    frames, valids, labels, masks = _patch_tensors(dataset, norm_mean, norm_std)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    shuffle_rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    good_state = {k: v.clone() for k, v in model.state_dict().items()}

    with open(log_path, "w") as log:
        for epoch in range(cfg.epochs):
            lr = cfg.learning_rate if epoch < cfg.lr_decay_epoch else cfg.learning_rate_decayed
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = shuffle_rng.permutation(len(dataset))
            for step, start in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[start : start + cfg.batch_size]
                bf = torch.stack([frames[i] for i in idx])
                bv = torch.stack([valids[i] for i in idx])
                model.train()
                probs, maps = model(bf, bv, period_labels)
                losses, diag_sum = [], None
                for j, i in enumerate(idx):
                    rng = np.random.default_rng(
                        np.random.SeedSequence([cfg.seed, epoch, step, int(i)])
                    )
                    loss_j, diag = total_loss(
                        probs[j],
                        [m[j] for m in maps],
                        labels[i],
                        masks[i],
                        weights,
                        rng,
                        anchors_per_patch=cfg.anchors_per_patch,
                        pool_size=cfg.pool_size,
                    )
                    losses.append(loss_j)
                    diag_sum = diag if diag_sum is None else {
                        k: diag_sum[k] + v for k, v in diag.items()
                    }
                loss = torch.stack(losses).mean()
                if not torch.isfinite(loss):
                    save_checkpoint(ckpt_path, _restored(model, good_state), norm_mean, norm_std)
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} step {step}", ckpt_path
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                record = {
                    "epoch": epoch,
                    "step": step,
                    "lr": lr,
                    "loss": float(loss.detach()),
                }
                record.update({k: v / len(idx) for k, v in diag_sum.items()})
                history.append(record)
                log.write(json.dumps(record) + "\n")
            good_state = {k: v.clone() for k, v in model.state_dict().items()}
            if cfg.val_every and val_fn is not None and (epoch + 1) % cfg.val_every == 0:
                model.eval()
                val = val_fn(InferenceModel(model, norm_mean, norm_std))
                rec = {"epoch": epoch, "validation": val}
                history.append(rec)
                log.write(json.dumps(rec) + "\n")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1}.pt", model, norm_mean, norm_std)

    model.eval()
    save_checkpoint(ckpt_path, model, norm_mean, norm_std)
    return TrainResult(ckpt_path, history, model, norm_mean, norm_std)


def _restored(model: UTAE, state: dict) -> UTAE:
    model.load_state_dict(state)
    return model


def train(
    dataset: Sequence[PatchSample],
    model_cfg: ModelConfig,
    weights: LossWeights,
    cfg: TrainingConfig,
    out_dir: str | Path,
    norm_stats: tuple[np.ndarray, np.ndarray] | None = None,
    val_fn: Callable[[InferenceModel], dict] | None = None,
) -> TrainResult:
    """Train from scratch on a patch dataset.

    Normalization statistics default to the dataset's own channel statistics
    and are frozen into every checkpoint. Fixing cfg.seed makes the loss
    trajectory bitwise reproducible on the same hardware and precision.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    c = dataset[0].cube.frames.shape[1]
    if c != model_cfg.input_channels:
        raise ConfigError(
            f"dataset has {c} channels but model expects {model_cfg.input_channels}"
        )
    mean, std = norm_stats if norm_stats is not None else channel_stats(dataset)
    model = build_model(model_cfg, seed=cfg.seed)
    return _run_epochs(model, dataset, weights, cfg, Path(out_dir), mean, std, val_fn)


def continue_train(
    checkpoint: str | Path,
    dataset: Sequence[PatchSample],
    weights: LossWeights,
    cfg: TrainingConfig,
    out_dir: str | Path,
    val_fn: Callable[[InferenceModel], dict] | None = None,
) -> TrainResult:
    """Resume a trained model's parameters (not its optimizer state) and keep
    optimizing on a new dataset; normalization statistics travel with the
    checkpoint so features keep their meaning across periods."""
    if not dataset:
        raise ConfigError("continue-training dataset is empty")
    model, mean, std, _ = load_checkpoint(checkpoint)
    c = dataset[0].cube.frames.shape[1]
    if c != model.cfg.input_channels:
        raise ConfigError(
            f"dataset has {c} channels but checkpoint expects {model.cfg.input_channels}"
        )
    torch.manual_seed(cfg.seed)
    return _run_epochs(model, dataset, weights, cfg, Path(out_dir), mean, std, val_fn)
