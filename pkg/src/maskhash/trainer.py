"""The optimization loop: two-view batching, loss assembly, lr schedule.

Each step draws a fresh mask plan per video, encodes both views, pools one
code per view into a 2N x k matrix (rows 2v and 2v+1 belong to video v),
decodes each view separately, and applies one Adam update. Randomness comes
from per-epoch, per-purpose streams so identical (seed, config, data) runs
reproduce the same loss trajectory.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from maskhash.data import FeatureDataset
from maskhash.errors import ArgumentError, NumericalError
from maskhash.losses import ContrastiveConfig, contrastive_loss, recon_loss, total_loss
from maskhash.masking import STRATEGIES, keep_count, make_mask_plan
from maskhash.model import ModelConfig, VideoHashModel, save_checkpoint

ABLATIONS = ("full", "no_contrastive", "no_recon", "no_mask")

# Purpose tags for the per-epoch rng streams.
_SHUFFLE, _MASK = 1, 2


@dataclass
class TrainConfig:
    batch_videos: int = 64
    mask_ratio: float = 0.75
    sampling_strategy: str = "non_overlapped"
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    epochs: int = 50
    base_lr: float = 1e-4
    lr_decay: float = 0.9
    decay_every: int = 20
    min_lr: float = 1e-5
    seed: int = 0
    ablation: str = "full"

    def __post_init__(self):
        if not 0 < self.lr_decay <= 1:
            raise ArgumentError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.min_lr > self.base_lr:
            raise ArgumentError(
                f"min_lr {self.min_lr} must not exceed base_lr {self.base_lr}"
            )
        if self.epochs < 0:
            raise ArgumentError(f"epochs must be non-negative, got {self.epochs}")
        if self.decay_every < 1:
            raise ArgumentError(f"decay_every must be positive, got {self.decay_every}")
        if self.sampling_strategy not in STRATEGIES:
            raise ArgumentError(
                f"unknown sampling strategy {self.sampling_strategy!r}, "
                f"expected one of {STRATEGIES}"
            )
        if self.ablation not in ABLATIONS:
            raise ArgumentError(
                f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}"
            )
        if self.contrastive_active and self.batch_videos < 2:
            raise ArgumentError("batch_videos must be >= 2 when the contrastive loss is active")

    @property
    def contrastive_active(self) -> bool:
        return self.ablation in ("full", "no_recon")

    @property
    def recon_active(self) -> bool:
        return self.ablation in ("full", "no_contrastive", "no_mask")


@dataclass
class EpochRecord:
    epoch: int
    recon: float
    contra: float
    total: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "recon", "contra", "total", "lr", "seconds"])
            for r in self.records:
                writer.writerow(
                    [r.epoch, repr(float(r.recon)), repr(float(r.contra)),
                     repr(float(r.total)), repr(float(r.lr)), f"{r.seconds:.3f}"]
                )


@dataclass
class StepLosses:
    recon: float
    contra: float
    total: float
    masked_frames_per_video: int


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Stepwise-decayed learning rate, floored at min_lr."""
    if epoch < 0:
        raise ArgumentError(f"epoch must be non-negative, got {epoch}")
    return max(cfg.min_lr, cfg.base_lr * cfg.lr_decay ** (epoch // cfg.decay_every))


def _epoch_rng(seed: int, epoch: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, purpose]))


def check_train_feasible(M: int, cfg: TrainConfig) -> int:
    """Validate the masking setup against a dataset's frame count."""
    keep = keep_count(M, cfg.mask_ratio)
    if cfg.ablation != "no_mask" and cfg.sampling_strategy == "non_overlapped":
        if 2 * keep > M:
            raise ArgumentError(
                f"non_overlapped sampling needs 2*keep <= M, got keep={keep} for M={M}; "
                f"use the overlapped strategy or a higher masking ratio"
            )
    return keep


def train_step(
    batch: np.ndarray,
    model: VideoHashModel,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> StepLosses:
    """One gradient update on a (N, M, d) batch of videos."""
    n, m, _ = batch.shape
    if cfg.contrastive_active and n < 2:
        raise ArgumentError("contrastive training needs at least 2 videos per batch")

    if cfg.ablation == "no_mask":
        # Single full view, reconstruct every frame, no contrastive term.
        positions = np.tile(np.arange(m), (n, 1))
        out = model.encode(batch, positions, mode="train")
        recons = model.decode(out.hash_tokens, positions)
        masked_sets = [np.arange(m)] * n
        rec = recon_loss(batch, recons, masked_sets)
        contra = torch.zeros((), dtype=torch.float64)
        total = rec
    else:
        plans = [make_mask_plan(m, cfg.mask_ratio, cfg.sampling_strategy, rng) for _ in range(n)]
        pos_a = np.array([p.view_a for p in plans])
        pos_b = np.array([p.view_b for p in plans])
        keep = plans[0].keep
        frames_a = np.take_along_axis(batch, pos_a[:, :, None], axis=1)[:, :keep]
        frames_b = np.take_along_axis(batch, pos_b[:, :, None], axis=1)[:, :keep]
        out_a = model.encode(frames_a, pos_a, mode="train")
        out_b = model.encode(frames_b, pos_b, mode="train")

        if cfg.recon_active:
            recon_a = model.decode(out_a.hash_tokens, pos_a)
            recon_b = model.decode(out_b.hash_tokens, pos_b)
            rec_a = recon_loss(batch, recon_a, [p.masked_a for p in plans])
            rec_b = recon_loss(batch, recon_b, [p.masked_b for p in plans])
            rec = 0.5 * (rec_a + rec_b)
        else:
            rec = torch.zeros((), dtype=torch.float64)

        if cfg.contrastive_active:
            codes = torch.stack([out_a.video_code, out_b.video_code], dim=1)
            codes = codes.reshape(2 * n, model.cfg.code_length)
            contra = contrastive_loss(codes, cfg.contrastive)
        else:
            contra = torch.zeros((), dtype=torch.float64)

        total = total_loss(rec, contra, cfg.contrastive.alpha)

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    masked = m if cfg.ablation == "no_mask" else m - plans[0].keep
    return StepLosses(
        recon=float(rec.detach()),
        contra=float(contra.detach()),
        total=float(total.detach()),
        masked_frames_per_video=masked,
    )


def fit(
    train_set: FeatureDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    checkpoint_path: str | Path | None = None,
    quiet: bool = True,
) -> tuple[VideoHashModel, TrainLog]:
    """Train a fresh model on a dataset and optionally write a checkpoint."""
    if len(train_set) == 0:
        raise ArgumentError("training set is empty")
    if train_set.d != model_cfg.feature_dim:
        raise ArgumentError(
            f"dataset dim {train_set.d} does not match model feature_dim "
            f"{model_cfg.feature_dim}"
        )
    if train_set.M > model_cfg.max_frames:
        raise ArgumentError(
            f"dataset M {train_set.M} exceeds model max_frames {model_cfg.max_frames}"
        )
    check_train_feasible(train_set.M, train_cfg)

    model = VideoHashModel(model_cfg, seed=train_cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.base_lr, betas=(0.9, 0.999))
    frames = train_set.frames_array()
    n = frames.shape[0]
    log = TrainLog()

    for epoch in range(train_cfg.epochs):
        start = time.perf_counter()
        lr = lr_at(epoch, train_cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr

        order = _epoch_rng(train_cfg.seed, epoch, _SHUFFLE).permutation(n)
        mask_rng = _epoch_rng(train_cfg.seed, epoch, _MASK)

        sums = np.zeros(3)
        steps = 0
        for lo in range(0, n, train_cfg.batch_videos):
            idx = order[lo : lo + train_cfg.batch_videos]
            if len(idx) < 2 and train_cfg.contrastive_active:
                continue
            losses = train_step(frames[idx], model, optimizer, train_cfg, mask_rng)
            sums += (losses.recon, losses.contra, losses.total)
            steps += 1
        if steps == 0:
            raise ArgumentError(
                "no usable batches: dataset smaller than the contrastive minimum"
            )

        for name, param in model.named_parameters():
            if not torch.isfinite(param).all():
                raise NumericalError(f"parameter {name} became non-finite at epoch {epoch}")

        rec, contra, total = sums / steps
        record = EpochRecord(
            epoch=epoch, recon=rec, contra=contra, total=total, lr=lr,
            seconds=time.perf_counter() - start,
        )
        log.records.append(record)
        if not quiet:
            print(
                f"epoch {epoch:4d}  recon {rec:.6f}  contra {contra:.6f}  "
                f"total {total:.6f}  lr {lr:.2e}  {record.seconds:.1f}s"
            )

    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model, log
