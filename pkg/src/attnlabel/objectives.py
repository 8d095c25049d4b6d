"""Training losses.

All batch losses sum over sentences by default (``reduction="sum"``);
``reduction="mean"`` divides by the number of sentences instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

DEFAULT_GAMMA = 0.01
PROB_FLOOR = 1e-12


def _reduce(per_sentence: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return per_sentence.sum()
    if reduction == "mean":
        return per_sentence.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def loss_l1(y: torch.Tensor, y_gold: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Squared error between sentence scores and gold sentence labels."""
    y_gold = torch.as_tensor(y_gold, dtype=y.dtype)
    if y.shape != y_gold.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_gold.shape)}")
    return _reduce((y - y_gold) ** 2, reduction)


def _masked_min(a_tilde, mask):
    return a_tilde.masked_fill(mask <= 0, float("inf")).min(dim=-1).values


def _masked_max(a_tilde, mask):
    return a_tilde.masked_fill(mask <= 0, float("-inf")).max(dim=-1).values


def loss_l2(a_tilde: torch.Tensor, mask: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Pushes the smallest unnormalized attention weight of each sentence to 0."""
    return _reduce(_masked_min(a_tilde, mask) ** 2, reduction)


def loss_l3(a_tilde: torch.Tensor, y_gold: torch.Tensor, mask: torch.Tensor,
            reduction: str = "sum") -> torch.Tensor:
    """Pushes the largest unnormalized attention weight to the sentence label."""
    y_gold = torch.as_tensor(y_gold, dtype=a_tilde.dtype)
    return _reduce((_masked_max(a_tilde, mask) - y_gold) ** 2, reduction)


@dataclass
class LossBreakdown:
    l1: torch.Tensor
    l2: torch.Tensor
    l3: torch.Tensor
    gamma: float
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {"l1": float(self.l1), "l2": float(self.l2), "l3": float(self.l3),
                "gamma": self.gamma, "total": float(self.total)}


def combined_loss(trace, y_gold, gamma: float = DEFAULT_GAMMA,
                  reduction: str = "sum") -> LossBreakdown:
    """L1 + gamma * (L2 + L3). Without logistic attention only L1 applies."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    y_gold = torch.as_tensor(y_gold, dtype=trace.y.dtype)
    l1 = loss_l1(trace.y, y_gold, reduction)
    if trace.a_tilde is None:
        zero = l1.new_zeros(())
        return LossBreakdown(l1, zero, zero, gamma, l1)
    l2 = loss_l2(trace.a_tilde, trace.mask, reduction)
    l3 = loss_l3(trace.a_tilde, y_gold, trace.mask, reduction)
    return LossBreakdown(l1, l2, l3, gamma, l1 + gamma * (l2 + l3))


def token_cross_entropy(probs: torch.Tensor, gold: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the gold label over real tokens.

    probs: [B, T, 2]; gold: [B, T] (anything on padding); mask: [B, T].
    """
    gold = torch.as_tensor(gold).clamp(min=0).long()
    p_gold = probs.gather(-1, gold.unsqueeze(-1)).squeeze(-1).clamp(min=PROB_FLOOR)
    nll = -torch.log(p_gold) * mask
    return nll.sum() / mask.sum()
