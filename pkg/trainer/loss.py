"""
Multi-task training objective:
    total = landmark_loss(I1) + landmark_loss(I2) + descriptor_matching_loss
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import torch

from common.errors import NumericError
from common.network import descriptor_distances
from trainer.sampling import GroundTruth

logger = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class DescriptorLossTerms:
    hinge_pos: torch.Tensor
    hinge_neg: torch.Tensor
    weighted_ce: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.hinge_pos + self.hinge_neg + self.weighted_ce


@dataclass
class LossBreakdown:
    landmark_loss_I1: torch.Tensor
    landmark_loss_I2: torch.Tensor
    descriptor_loss: torch.Tensor
    total: torch.Tensor
    hinge_pos: Optional[torch.Tensor] = None
    hinge_neg: Optional[torch.Tensor] = None
    weighted_ce: Optional[torch.Tensor] = None

    def to_log_dict(self) -> Dict[str, float]:
        record = {
            "landmark_loss_I1": float(self.landmark_loss_I1),
            "landmark_loss_I2": float(self.landmark_loss_I2),
            "descriptor_loss": float(self.descriptor_loss),
            "total": float(self.total)
        }
        for name in ("hinge_pos", "hinge_neg", "weighted_ce"):
            value = getattr(self, name)
            if value is not None:
                record[name] = float(value)
        return record


def _cross_entropy(p_hat: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    p_hat = p_hat.clamp(EPS, 1.0 - EPS)
    return -(p * torch.log(p_hat) + (1.0 - p) * torch.log(1.0 - p_hat))


def landmark_probability_loss(p_hat: torch.Tensor, p) -> torch.Tensor:
    """(1/K) sum((1 - p_hat) + CE(p_hat, p)); 0 for an empty set"""
    p = torch.as_tensor(p, dtype=p_hat.dtype, device=p_hat.device).reshape(-1)
    p_hat = p_hat.reshape(-1)
    if p_hat.shape != p.shape:
        raise ValueError(f"p_hat {tuple(p_hat.shape)} and p {tuple(p.shape)} are not aligned")
    if p_hat.numel() == 0:
        return p_hat.new_zeros(())
    clamped = p_hat.clamp(EPS, 1.0 - EPS)
    return ((1.0 - clamped) + _cross_entropy(p_hat, p)).mean()


def matching_loss_terms(d2: torch.Tensor, c_hat: torch.Tensor, c, m_pos: float, m_neg: float) -> DescriptorLossTerms:
    """Hinge terms on squared descriptor distances plus class-frequency weighted CE"""
    if not 0 <= m_pos < m_neg:
        raise ValueError(f"Margins must satisfy 0 <= m_pos < m_neg, got {m_pos}, {m_neg}")
    c = torch.as_tensor(c, dtype=d2.dtype, device=d2.device)
    if d2.shape != c_hat.shape or d2.shape != c.shape:
        raise ValueError(
            f"Shape mismatch: d2 {tuple(d2.shape)}, c_hat {tuple(c_hat.shape)}, c {tuple(c.shape)}"
        )

    zero = d2.new_zeros(())
    k_pos = float(c.sum())
    k_neg = float(c.numel()) - k_pos
    total = k_pos + k_neg

    hinge_pos = (c * torch.relu(d2 - m_pos)).sum() / k_pos if k_pos > 0 else zero
    hinge_neg = ((1.0 - c) * torch.relu(m_neg - d2)).sum() / k_neg if k_neg > 0 else zero

    if total > 0:
        c_hat = c_hat.clamp(EPS, 1.0 - EPS)
        # positives weighted by the negative frequency and vice versa
        pos_term = -(k_neg / total) * c * torch.log(c_hat)
        neg_term = -(k_pos / total) * (1.0 - c) * torch.log(1.0 - c_hat)
        weighted_ce = (pos_term + neg_term).sum() / total
    else:
        weighted_ce = zero

    return DescriptorLossTerms(hinge_pos, hinge_neg, weighted_ce)


def descriptor_matching_loss(F1: torch.Tensor, F2: torch.Tensor, c_hat: torch.Tensor, gt: GroundTruth,
                             m_pos: float, m_neg: float) -> DescriptorLossTerms:
    if F1.shape[-1] != F2.shape[-1]:
        raise ValueError(f"Descriptor dimensions differ: {F1.shape[-1]} vs {F2.shape[-1]}")
    return matching_loss_terms(descriptor_distances(F1, F2), c_hat, gt.c, m_pos, m_neg)


def total_loss(landmark_loss_I1: torch.Tensor, landmark_loss_I2: torch.Tensor,
               descriptor_terms: DescriptorLossTerms) -> LossBreakdown:
    """Unit-weighted sum; any non-finite component raises NumericError naming it"""
    components = {
        "landmark_loss_I1": landmark_loss_I1,
        "landmark_loss_I2": landmark_loss_I2,
        "hinge_pos": descriptor_terms.hinge_pos,
        "hinge_neg": descriptor_terms.hinge_neg,
        "weighted_ce": descriptor_terms.weighted_ce
    }
    for name, value in components.items():
        if not bool(torch.isfinite(value).all()):
            raise NumericError(f"Non-finite loss component '{name}': {float(value)}", component=name)

    descriptor_loss = descriptor_terms.total
    return LossBreakdown(
        landmark_loss_I1=landmark_loss_I1,
        landmark_loss_I2=landmark_loss_I2,
        descriptor_loss=descriptor_loss,
        total=landmark_loss_I1 + landmark_loss_I2 + descriptor_loss,
        hinge_pos=descriptor_terms.hinge_pos,
        hinge_neg=descriptor_terms.hinge_neg,
        weighted_ce=descriptor_terms.weighted_ce
    )
