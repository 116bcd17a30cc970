"""Soft Dice, binary cross-entropy and the joint two-branch loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

DICE_EPS = 1e-5
CE_CLAMP = 1e-7


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def dice_score_soft(pred: torch.Tensor, target: torch.Tensor, epsilon: float = DICE_EPS) -> torch.Tensor:
    """(2 sum(p t) + eps) / (sum p + sum t + eps), pooled over every voxel of the batch."""
    _check_shapes(pred, target)
    target = target.to(pred.dtype)
    inter = (pred * target).sum()
    return (2 * inter + epsilon) / (pred.sum() + target.sum() + epsilon)


def cross_entropy(pred: torch.Tensor, target: torch.Tensor, clamp: float = CE_CLAMP) -> torch.Tensor:
    """Voxel-mean binary cross-entropy on probabilities clamped to [clamp, 1 - clamp]."""
    _check_shapes(pred, target)
    target = target.to(pred.dtype)
    p = pred.clamp(clamp, 1 - clamp)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


@dataclass
class LossBreakdown:
    dcs_scar: torch.Tensor
    ce_scar: torch.Tensor
    dcs_la: torch.Tensor
    ce_la: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("dcs_scar", "ce_scar", "dcs_la", "ce_la", "total")}


def total_loss(
    scar_out,
    scar_gt: torch.Tensor,
    la_out=None,
    la_gt: Optional[torch.Tensor] = None,
    deep_supervision: bool = False,
    dice_form: str = "signed",
) -> LossBreakdown:
    """-DCS + CE on the fused scar map plus the same for the fused LA map.

    ``la_out`` may be None (scar-only network); the LA terms are then zero.
    ``dice_form="complement"`` uses (1 - DCS) instead of -DCS, which shifts the
    value by a constant and leaves gradients unchanged. With
    ``deep_supervision`` the per-depth maps get the same terms, averaged, on
    top of the fused ones.
    """
    if dice_form not in ("signed", "complement"):
        raise ValueError(f"unknown dice_form {dice_form!r}")
    one = 1.0 if dice_form == "complement" else 0.0

    def terms(out, gt):
        dcs, ce = dice_score_soft(out.fused, gt), cross_entropy(out.fused, gt)
        extra = 0.0
        if deep_supervision:
            extra = sum(one - dice_score_soft(p, gt) + cross_entropy(p, gt) for p in out.per_depth) / len(out.per_depth)
        return dcs, ce, extra

    dcs_s, ce_s, extra_s = terms(scar_out, scar_gt)
    total = one - dcs_s + ce_s + extra_s
    if la_out is not None:
        if la_gt is None:
            raise ValueError("la_gt is required when la_out is given")
        dcs_l, ce_l, extra_l = terms(la_out, la_gt)
        total = total + one - dcs_l + ce_l + extra_l
    else:
        dcs_l = ce_l = torch.zeros((), dtype=dcs_s.dtype, device=dcs_s.device)
    return LossBreakdown(dcs_s, ce_s, dcs_l, ce_l, total)
