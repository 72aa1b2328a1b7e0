"""Reconstruction, debiased contrastive, and combined training objectives.

All reductions run in float64 regardless of input precision so that oracle
comparisons hold to 1e-6. The contrastive denominator corrects for the
probability rho that a random negative shares the anchor's class, clamping
the corrected negative mass at exp(-1/tau) from below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from maskhash.errors import ArgumentError


@dataclass
class ContrastiveConfig:
    tau: float = 0.5
    rho: float = 0.1
    alpha: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ArgumentError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.rho < 1.0:
            raise ArgumentError(f"rho must be in [0, 1), got {self.rho}")
        if self.alpha < 0:
            raise ArgumentError(f"alpha must be non-negative, got {self.alpha}")


def _as_double(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.double()
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def recon_loss(originals, reconstructions, masked_sets) -> torch.Tensor:
    """Masked-frame MSE: total squared error over masked frames divided by
    d times the number of masked frames summed over videos."""
    orig = _as_double(originals)
    recon = _as_double(reconstructions)
    if orig.shape != recon.shape:
        raise ArgumentError(
            f"originals shape {tuple(orig.shape)} != reconstructions {tuple(recon.shape)}"
        )
    if orig.dim() == 2:
        orig = orig.unsqueeze(0)
        recon = recon.unsqueeze(0)
        masked_sets = [masked_sets]
    n, m, d = orig.shape
    if len(masked_sets) != n:
        raise ArgumentError(f"got {len(masked_sets)} masked sets for {n} videos")

    total = orig.new_zeros(())
    total_masked = 0
    for i, masked in enumerate(masked_sets):
        idx = torch.as_tensor(np.asarray(masked), dtype=torch.long)
        if idx.numel() == 0:
            raise ArgumentError(f"video {i} has an empty masked set")
        if idx.min() < 0 or idx.max() >= m:
            raise ArgumentError(f"video {i} masked indices out of range [0, {m})")
        diff = orig[i, idx] - recon[i, idx]
        total = total + (diff * diff).sum()
        total_masked += idx.numel()
    return total / (d * total_masked)


def similarity(x, y) -> float:
    """Cosine similarity between two code vectors."""
    xv = _as_double(x).flatten()
    yv = _as_double(y).flatten()
    if xv.shape != yv.shape:
        raise ArgumentError(f"length mismatch: {xv.numel()} vs {yv.numel()}")
    nx = xv.norm()
    ny = yv.norm()
    if nx == 0 or ny == 0:
        raise ArgumentError("similarity is undefined for an all-zero vector")
    return float((xv @ yv) / (nx * ny))


def _cosine_exp_matrix(codes: torch.Tensor, tau: float) -> torch.Tensor:
    """exp(cosine / tau) for all row pairs of a (2N, k) code matrix."""
    X = codes.double()
    norms = X.norm(dim=1)
    if (norms == 0).any():
        raise ArgumentError("codes contain an all-zero row")
    S = (X @ X.T) / (norms[:, None] * norms[None, :])
    return torch.exp(S / tau)


def _pair_terms(E: torch.Tensor, i: int, j: int, cfg: ContrastiveConfig):
    """Loss for anchor i with positive j, plus the debiased negative mass."""
    n2 = E.shape[0]
    pos = E[i, j]
    neg_sum = E[i].sum() - E[i, i] - pos
    ng = neg_sum / (n2 - 2) - cfg.rho * pos
    floor = math.exp(-1.0 / cfg.tau)
    ng_de = torch.clamp(ng / (1.0 - cfg.rho), min=floor)
    loss = torch.log(pos + (n2 - 2) * ng_de) - torch.log(pos)
    return loss, ng, ng_de, bool(ng / (1.0 - cfg.rho) < floor)


def debiased_pair_loss(i: int, j: int, codes, cfg: ContrastiveConfig) -> torch.Tensor:
    """Debiased contrastive loss for one ordered (anchor, positive) pair."""
    codes = _as_double(codes)
    n2 = codes.shape[0]
    if n2 < 4:
        raise ArgumentError(f"need at least 4 code rows (2 videos), got {n2}")
    if i == j:
        raise ArgumentError("anchor and positive must differ")
    if not (0 <= i < n2 and 0 <= j < n2):
        raise ArgumentError(f"pair indices ({i}, {j}) out of range for {n2} rows")
    E = _cosine_exp_matrix(codes, cfg.tau)
    loss, _, _, _ = _pair_terms(E, i, j, cfg)
    return loss


def pair_loss_terms(i: int, j: int, codes, cfg: ContrastiveConfig):
    """Like :func:`debiased_pair_loss` but also reports whether the
    exp(-1/tau) clamp was the active branch."""
    E = _cosine_exp_matrix(_as_double(codes), cfg.tau)
    loss, ng, ng_de, clamped = _pair_terms(E, i, j, cfg)
    return loss, ng, ng_de, clamped


def contrastive_loss(codes, cfg: ContrastiveConfig) -> torch.Tensor:
    """Average debiased pair loss over both orderings of every view pair.

    Rows 2v and 2v+1 must hold the two views of video v.
    """
    codes = _as_double(codes) if not isinstance(codes, torch.Tensor) else codes
    n2 = codes.shape[0]
    if n2 % 2:
        raise ArgumentError(f"code matrix must have an even row count, got {n2}")
    if n2 < 4:
        raise ArgumentError(f"need at least 4 code rows (2 videos), got {n2}")
    E = _cosine_exp_matrix(codes, cfg.tau)

    idx = torch.arange(n2)
    partner = idx ^ 1
    pos = E[idx, partner]
    neg_sum = E.sum(dim=1) - E.diagonal() - pos
    ng = neg_sum / (n2 - 2) - cfg.rho * pos
    floor = math.exp(-1.0 / cfg.tau)
    ng_de = torch.clamp(ng / (1.0 - cfg.rho), min=floor)
    losses = torch.log(pos + (n2 - 2) * ng_de) - torch.log(pos)
    return losses.sum() / n2


def total_loss(recon, contra, alpha: float):
    """Combined objective: recon + alpha * contra."""
    if alpha < 0:
        raise ArgumentError(f"alpha must be non-negative, got {alpha}")
    return _as_double(recon) + alpha * _as_double(contra)
