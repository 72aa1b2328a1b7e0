"""Two-view temporal mask plans.

Each training video is represented by two small frame subsets; the kept
frames feed the encoder and the complements are the reconstruction targets.
Under the non-overlapped strategy the two views are disjoint, which is what
the default contrastive pairing relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from maskhash.errors import ArgumentError

STRATEGIES = ("non_overlapped", "overlapped")

# Tolerance for ratios like 0.9 where (1 - ratio) * M lands a hair below an
# integer in binary floating point.
_FLOOR_EPS = 1e-9


@dataclass(frozen=True)
class MaskPlan:
    """Kept and masked frame indices for the two views of one video."""

    view_a: tuple[int, ...]
    view_b: tuple[int, ...]
    masked_a: tuple[int, ...]
    masked_b: tuple[int, ...]
    M: int
    keep: int


def keep_count(M: int, ratio: float) -> int:
    """Per-view kept frame count: floor((1 - ratio) * M)."""
    if M < 1:
        raise ArgumentError(f"M must be positive, got {M}")
    if not 0.0 <= ratio < 1.0:
        raise ArgumentError(f"masking ratio must be in [0, 1), got {ratio}")
    keep = int(math.floor((1.0 - ratio) * M + _FLOOR_EPS))
    if keep < 1:
        raise ArgumentError(f"masking ratio too high for M: ratio={ratio}, M={M}")
    return keep


def make_mask_plan(
    M: int, ratio: float, strategy: str, rng: np.random.Generator
) -> MaskPlan:
    """Draw the two kept-frame subsets for one video.

    non_overlapped: one uniform permutation of [0, M); the first keep indices
    become view_a and the next keep become view_b, so the views are disjoint.
    overlapped: two independent uniform keep-subsets that may intersect.
    """
    if strategy not in STRATEGIES:
        raise ArgumentError(f"unknown sampling strategy {strategy!r}, expected one of {STRATEGIES}")
    keep = keep_count(M, ratio)
    if strategy == "non_overlapped":
        if 2 * keep > M:
            raise ArgumentError(
                f"non_overlapped needs 2*keep <= M, got keep={keep} for M={M} ratio={ratio}"
            )
        perm = rng.permutation(M)
        view_a = np.sort(perm[:keep])
        view_b = np.sort(perm[keep : 2 * keep])
    else:
        view_a = np.sort(rng.choice(M, size=keep, replace=False))
        view_b = np.sort(rng.choice(M, size=keep, replace=False))

    all_idx = np.arange(M)
    masked_a = np.setdiff1d(all_idx, view_a)
    masked_b = np.setdiff1d(all_idx, view_b)
    return MaskPlan(
        view_a=tuple(int(i) for i in view_a),
        view_b=tuple(int(i) for i in view_b),
        masked_a=tuple(int(i) for i in masked_a),
        masked_b=tuple(int(i) for i in masked_b),
        M=M,
        keep=keep,
    )
