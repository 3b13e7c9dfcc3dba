"""Weighted structural loss: class-balanced BCE + semantic content + smooth L1.

All pixel-wise terms are averaged over pixels and over the batch. Predictions
are foreground probabilities shaped N x H x W (or H x W); ground truth is a
binary mask of the same shape.
"""
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

P_MIN = 1e-7
BETA_CONVENTIONS = ("complement", "paper_literal")


@dataclass
class LossWeights:
    mu: float = 0.01
    gamma: float = 20.0
    epsilon: float = 0.5
    lambdas: Tuple[float, ...] = (1.0, 1.0, 1.0)
    beta_convention: str = "complement"
    # False selects plain BCE in place of the class-balanced term
    weighted: bool = True
    sc_squared: bool = False
    featnet_seed: int = 0

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if self.mu < 0 or self.gamma < 0:
            raise ValueError("mu and gamma must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if any(v < 0 for v in self.lambdas):
            raise ValueError("lambda weights must be non-negative")
        if self.beta_convention not in BETA_CONVENTIONS:
            raise ValueError(f"beta_convention must be one of {BETA_CONVENTIONS}")


class FeatureNet(nn.Module):
    """Frozen, seeded conv stack standing in for a pretrained perceptual network.

    Each layer is a stride-2 3x3 conv followed by ReLU; the post-ReLU outputs
    are the feature taps.
    """

    def __init__(self, channels: Sequence[int] = (8, 16, 16), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        layers, prev = [], 1
        for c in channels:
            conv = nn.Conv2d(prev, c, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, math.sqrt(2.0 / (prev * 9)), generator=gen)
                conv.bias.normal_(0.0, 0.1, generator=gen)
            layers.append(conv)
            prev = c
        self.layers = nn.ModuleList(layers)
        self.seed = seed
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"FeatureNet expects single-channel maps, got shape {tuple(x.shape)}")
        feats = []
        for conv in self.layers:
            w, b = conv.weight.to(x.dtype), conv.bias.to(x.dtype)
            x = F.relu(F.conv2d(x, w, b, stride=2, padding=1))
            feats.append(x)
        return feats


def _batched(pred: torch.Tensor, gt: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != ground truth {tuple(gt.shape)}")
    if pred.dim() == 2:
        pred, gt = pred.unsqueeze(0), gt.unsqueeze(0)
    if pred.dim() != 3:
        raise ValueError(f"expected H x W or N x H x W maps, got shape {tuple(pred.shape)}")
    return pred, gt.to(pred.dtype)


def _ce_terms(pred, gt):
    """Per-image sums of -log p over foreground and -log(1-p) over background."""
    p = pred.clamp(P_MIN, 1.0 - P_MIN)
    pos = -(gt * torch.log(p)).flatten(1).sum(1)
    neg = -((1.0 - gt) * torch.log(1.0 - p)).flatten(1).sum(1)
    return pos, neg


def bce_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    pred, gt = _batched(pred, gt)
    pos, neg = _ce_terms(pred, gt)
    n_pixels = pred.shape[1] * pred.shape[2]
    return ((pos + neg) / n_pixels).mean()


def class_balance(gt: torch.Tensor, convention: str = "complement") -> torch.Tensor:
    """Per-image weight on the foreground term."""
    if convention not in BETA_CONVENTIONS:
        raise ValueError(f"beta_convention must be one of {BETA_CONVENTIONS}")
    fg_fraction = gt.flatten(1).mean(1)
    return fg_fraction if convention == "paper_literal" else 1.0 - fg_fraction


def weighted_bce_loss(pred: torch.Tensor, gt: torch.Tensor, convention: str = "complement") -> torch.Tensor:
    """beta * (foreground term) + (1 - beta) * (background term), averaged over pixels.

    Images whose mask is all foreground or all background fall back to plain BCE.
    """
    pred, gt = _batched(pred, gt)
    pos, neg = _ce_terms(pred, gt)
    beta = class_balance(gt, convention)
    n_pixels = pred.shape[1] * pred.shape[2]
    weighted = beta * pos + (1.0 - beta) * neg
    degenerate = (gt.flatten(1).amin(1) == gt.flatten(1).amax(1))
    if degenerate.any():
        warnings.warn("single-class ground truth; using unweighted BCE for those images", stacklevel=2)
        weighted = torch.where(degenerate, pos + neg, weighted)
    return (weighted / n_pixels).mean()


def sc_loss(pred: torch.Tensor, gt: torch.Tensor, featnet: Callable[[torch.Tensor], List[torch.Tensor]],
            lambdas: Sequence[float] = (1.0, 1.0, 1.0), squared: bool = False) -> torch.Tensor:
    """Sum over feature layers of lambda_l * ||phi_l(gt) - phi_l(pred)||_2, batch-averaged."""
    pred, gt = _batched(pred, gt)
    feats_gt = featnet(gt.unsqueeze(1))
    feats_pred = featnet(pred.unsqueeze(1))
    if len(feats_gt) != len(lambdas):
        raise ValueError(f"{len(lambdas)} lambda weights for {len(feats_gt)} feature layers")
    total = pred.new_zeros(pred.shape[0])
    for lam, a, b in zip(lambdas, feats_gt, feats_pred):
        if lam == 0:
            continue
        sq = (a - b).flatten(1).pow(2).sum(1)
        total = total + lam * (sq if squared else _safe_sqrt(sq))
    return total.mean()


def _safe_sqrt(x):
    # norm of an exactly zero difference: value 0, gradient 0
    zero = x == 0
    return torch.where(zero, torch.zeros_like(x), torch.sqrt(torch.where(zero, torch.ones_like(x), x)))


def smooth_l1_loss(pred: torch.Tensor, gt: torch.Tensor, epsilon: float = 0.5) -> torch.Tensor:
    """Per-pixel 0.5 d^2 if |d| < eps else eps |d| - 0.5 eps^2, averaged."""
    pred, gt = _batched(pred, gt)
    d = (gt - pred).abs()
    per_pixel = torch.where(d < epsilon, 0.5 * d * d, epsilon * d - 0.5 * epsilon ** 2)
    return per_pixel.mean()


def total_loss(pred: torch.Tensor, gt: torch.Tensor, weights: LossWeights,
               featnet: Callable = None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """wbce + mu * sc + gamma * s1; returns the total and the three unweighted terms."""
    if weights.weighted:
        ce = weighted_bce_loss(pred, gt, weights.beta_convention)
    else:
        ce = bce_loss(pred, gt)
    zero = ce.new_zeros(())
    if weights.mu > 0:
        if featnet is None:
            raise ValueError("semantic content term needs a FeatureNet")
        sc = sc_loss(pred, gt, featnet, weights.lambdas, weights.sc_squared)
    else:
        sc = zero
    s1 = smooth_l1_loss(pred, gt, weights.epsilon) if weights.gamma > 0 else zero
    total = ce + weights.mu * sc + weights.gamma * s1
    return total, {"wbce": ce, "sc": sc, "s1": s1}
