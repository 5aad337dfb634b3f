"""Bi-directional feature distillation loss with exact stop-gradient semantics.

Both training stages share one loss formula, mean_i ||sg[a_i] - s_i||_2 over
l2-normalized rows; only which side is the detached anchor changes between
stages. The per-pair norm carries a smooth guard sqrt(sum x^2 + eps^2) so the
gradient is defined at exact-match pairs.
"""

import enum
from dataclasses import dataclass

import torch

from .errors import EmptyBatchError

NORM_EPS = 1e-8     # clamp on the row norm before division
PAIR_EPS = 1e-12    # smooth guard inside the per-pair distance


class Stage(enum.Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"


@dataclass
class MatchedFeatures:
    """Paired pixel features G and point features F, each M x D."""

    G: torch.Tensor
    F: torch.Tensor

    def __post_init__(self):
        if self.G.shape != self.F.shape:
            raise ValueError(f"G {tuple(self.G.shape)} and F {tuple(self.F.shape)} must match")


def l2_normalize(v: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """v / max(||v||_2, eps) along the last axis; zero vectors map to zero."""
    # sqrt(clamp(|v|^2, eps^2)) == max(|v|, eps) and keeps backward NaN-free
    # where the clamp is active.
    norm = torch.sqrt(torch.clamp((v * v).sum(dim=-1, keepdim=True), min=eps * eps))
    return v / norm


def distill_loss(anchor: torch.Tensor, student: torch.Tensor) -> torch.Tensor:
    """mean_i || sg[anchor_i] - student_i ||_2 over l2-normalized rows.

    Gradient flows only into `student`; the anchor side is detached, so its
    parameter gradients are identically zero, not merely small.
    """
    if anchor.shape[0] == 0:
        raise EmptyBatchError("distill_loss over zero matched pairs")
    a = l2_normalize(anchor).detach()
    s = l2_normalize(student)
    diff = a - s
    per_pair = torch.sqrt((diff * diff).sum(dim=-1) + PAIR_EPS * PAIR_EPS)
    return per_pair.mean()


def stage_loss(stage: Stage, mf: MatchedFeatures) -> torch.Tensor:
    """Stage 1 anchors the pixel side (trains 3D); stage 2 swaps the roles."""
    if stage == Stage.STAGE1:
        return distill_loss(anchor=mf.G, student=mf.F)
    if stage == Stage.STAGE2:
        return distill_loss(anchor=mf.F, student=mf.G)
    raise ValueError(f"unknown stage {stage!r}")


def joint_loss(mf: MatchedFeatures) -> torch.Tensor:
    """The same distance without any stop-gradient (collapse ablation only)."""
    if mf.G.shape[0] == 0:
        raise EmptyBatchError("joint_loss over zero matched pairs")
    g = l2_normalize(mf.G)
    f = l2_normalize(mf.F)
    diff = g - f
    per_pair = torch.sqrt((diff * diff).sum(dim=-1) + PAIR_EPS * PAIR_EPS)
    return per_pair.mean()
