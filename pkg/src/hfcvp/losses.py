"""Scalar training objectives in both regimes (MSE and KL).

All functions take torch tensors (single vectors or batches with a leading
batch dimension) and return a differentiable scalar tensor. Batched inputs
are averaged over the batch. Logarithms clamp their argument to EPS so a
zero finder probability never produces an infinite loss.
"""

from __future__ import annotations

import torch

from .core import DimensionError

EPS = 1e-8


def _pair(f, other, name) -> tuple[torch.Tensor, torch.Tensor]:
    f = torch.as_tensor(f)
    other = torch.as_tensor(other)
    if f.shape[-1] != other.shape[-1]:
        raise DimensionError(
            f"{name}: class dimension mismatch ({f.shape[-1]} vs {other.shape[-1]})"
        )
    return f, other


def leakage_mse(f, prior) -> torch.Tensor:
    """Mean squared divergence between the finder output and the class prior."""
    f, prior = _pair(f, prior, "leakage_mse")
    return ((f - prior) ** 2).mean(dim=-1).mean()


def finder_mse(f, truth) -> torch.Tensor:
    """Mean squared divergence between the finder output and the one-hot truth."""
    f, truth = _pair(f, truth, "finder_mse")
    if f.shape != truth.shape:
        raise DimensionError(f"finder_mse: shape mismatch ({f.shape} vs {truth.shape})")
    return ((f - truth) ** 2).mean(dim=-1).mean()


def finder_kl(f, true_class) -> torch.Tensor:
    """Negative log probability the finder assigns to the true class."""
    f = torch.as_tensor(f)
    if f.dim() == 1:
        f = f.unsqueeze(0)
    idx = torch.as_tensor(true_class, dtype=torch.long).reshape(-1)
    picked = f[torch.arange(f.shape[0]), idx]
    return -torch.log(picked.clamp(min=EPS)).mean()


def leakage_kl(f, prior) -> torch.Tensor:
    """Cross-entropy of the finder output under the class prior."""
    f, prior = _pair(f, prior, "leakage_kl")
    ce = -(prior * torch.log(f.clamp(min=EPS))).sum(dim=-1)
    return ce.mean()


def reconstruction_mse(pred, target, mask=None) -> torch.Tensor:
    """MSE over valid frame-feature cells only; mask marks true frames per sequence."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(
            f"reconstruction_mse: shape mismatch ({tuple(pred.shape)} vs {tuple(target.shape)})"
        )
    if mask is None:
        return ((pred - target) ** 2).mean()
    mask = torch.as_tensor(mask, dtype=pred.dtype)
    if mask.shape != pred.shape[:-1]:
        raise DimensionError(
            f"reconstruction_mse: mask shape {tuple(mask.shape)} does not match "
            f"frame dims {tuple(pred.shape[:-1])}"
        )
    valid = mask.sum()
    if valid.item() == 0:
        raise ValueError("reconstruction_mse: mask selects zero valid frames")
    sq = ((pred - target) ** 2).sum(dim=-1) * mask
    return sq.sum() / (valid * pred.shape[-1])


def generator_total(recon, leakage, beta: float) -> torch.Tensor:
    """Combined generator objective: reconstruction plus beta times leakage."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return torch.as_tensor(recon) + beta * torch.as_tensor(leakage)
