"""Training losses: photometric, per-point regression consistency, latent.

All reductions are means, so weights keep their meaning when image sizes or
point counts change. Images are (H, W, 3) tensors in [0, 1].
"""

from __future__ import annotations

import dataclasses
import math
from typing import Protocol

import torch
import torch.nn.functional as F


class LossError(RuntimeError):
    """Raised for shape mismatches and out-of-contract loss inputs."""


class FeatureProvider(Protocol):
    """Anything that turns an image into multi-level feature maps."""

    def feature_maps(self, image: torch.Tensor) -> list[torch.Tensor]: ...

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor: ...


@dataclasses.dataclass
class LossWeights:
    """Scalar weights of every loss term; defaults are the training values."""

    l1: float = 0.8
    ssim: float = 0.2
    perceptual: float = 0.1
    recon: float = 1.0
    expr: float = 1.0
    pose: float = 1.0
    skin: float = 1.0
    flame: float = 1.0
    latent: float = 1e-3


def _check_images(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape or a.dim() != 3 or a.shape[-1] != 3:
        raise LossError(f"image shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    data_range: float = 1.0,
    window_size: int = 11,
    sigma: float = 1.5,
) -> torch.Tensor:
    """Mean structural similarity with a gaussian window, valid padding."""
    _check_images(a, b)
    if a.shape[0] < window_size or a.shape[1] < window_size:
        raise LossError(f"image smaller than the {window_size}px ssim window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = gaussian_window(window_size, sigma, a.dtype).expand(3, 1, window_size, window_size)

    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    mu_x = F.conv2d(x, win, groups=3)
    mu_y = F.conv2d(y, win, groups=3)
    xx = F.conv2d(x * x, win, groups=3) - mu_x**2
    yy = F.conv2d(y * y, win, groups=3) - mu_y**2
    xy = F.conv2d(x * y, win, groups=3) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return (num / den).mean()


def recon_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    provider: FeatureProvider | None = None,
    weights: LossWeights | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Photometric reconstruction: weighted L1 + structural dissimilarity
    + optional perceptual distance."""
    w = weights or LossWeights()
    _check_images(pred, target)
    parts = {"l1": l1_loss(pred, target), "ssim": 1.0 - ssim(pred, target)}
    total = w.l1 * parts["l1"] + w.ssim * parts["ssim"]
    if provider is not None and w.perceptual != 0.0:
        parts["perceptual"] = provider.distance(pred, target)
        total = total + w.perceptual * parts["perceptual"]
    return total, parts


def masked_recon_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    mask: torch.Tensor,
    provider: FeatureProvider | None = None,
    weights: LossWeights | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Reconstruction restricted to a (H, W) mask.

    Pixels outside the mask are replaced by the target before comparison, so
    they contribute exactly zero error and zero gradient.
    """
    if mask.shape != pred.shape[:2]:
        raise LossError(f"mask shape {tuple(mask.shape)} does not match image")
    m = mask.to(pred.dtype)[..., None]
    blended = pred * m + target * (1.0 - m)
    return recon_loss(blended, target, provider, weights)


def flame_consistency_loss(
    pred_expr: torch.Tensor,
    pred_pose: torch.Tensor,
    pred_skin: torch.Tensor,
    tgt_expr: torch.Tensor,
    tgt_pose: torch.Tensor,
    tgt_skin: torch.Tensor,
    weights: LossWeights | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Keep per-point predicted bases near their template interpolants.

    Each point contributes the L2 norm of its flattened residual per group
    (expression, pose-corrective, skinning), averaged over points.
    """
    w = weights or LossWeights()
    parts = {}
    for name, pred, tgt in (
        ("expr", pred_expr, tgt_expr),
        ("pose", pred_pose, tgt_pose),
        ("skin", pred_skin, tgt_skin),
    ):
        if pred.shape != tgt.shape:
            raise LossError(f"{name}: shape mismatch {tuple(pred.shape)} vs {tuple(tgt.shape)}")
        parts[name] = (pred - tgt).reshape(pred.shape[0], -1).norm(dim=-1).mean()
    total = w.expr * parts["expr"] + w.pose * parts["pose"] + w.skin * parts["skin"]
    return total, parts


def latent_magnitude_loss(z: torch.Tensor) -> torch.Tensor:
    """Mean squared row norm of a latent matrix (rows, dim)."""
    return z.pow(2).sum(dim=-1).mean()


def training_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    flame_pred: dict[str, torch.Tensor] | None,
    flame_tgt: dict[str, torch.Tensor] | None,
    z: torch.Tensor | None,
    provider: FeatureProvider | None = None,
    weights: LossWeights | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Full objective: reconstruction + basis consistency + latent magnitude."""
    w = weights or LossWeights()
    recon, parts = recon_loss(pred, target, provider, w)
    total = w.recon * recon
    logged = {f"recon.{k}": float(v.detach()) for k, v in parts.items()}
    logged["recon"] = float(recon.detach())
    if flame_pred is not None:
        flame, fparts = flame_consistency_loss(
            flame_pred["expr"], flame_pred["pose"], flame_pred["skin"],
            flame_tgt["expr"], flame_tgt["pose"], flame_tgt["skin"], w,
        )
        total = total + w.flame * flame
        logged.update({f"flame.{k}": float(v.detach()) for k, v in fparts.items()})
        logged["flame"] = float(flame.detach())
    if z is not None:
        lz = latent_magnitude_loss(z)
        total = total + w.latent * lz
        logged["latent"] = float(lz.detach())
    logged["total"] = float(total.detach())
    return total, logged


LORA_ATTRS = ("x", "r", "o", "s", "c")


def lora_3d_loss(
    base: dict[str, torch.Tensor], adapted: dict[str, torch.Tensor]
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """L1 distance between two composed Gaussian sets, attribute by attribute.

    Zero exactly when the adapted branch reproduces the base branch, which is
    what a fresh zero-initialized adapter must do.
    """
    missing = [k for k in LORA_ATTRS if k not in base or k not in adapted]
    if missing:
        raise LossError(f"missing attributes {missing}; need {LORA_ATTRS}")
    parts = {k: l1_loss(adapted[k], base[k]) for k in LORA_ATTRS}
    total = parts["x"] + parts["r"] + parts["o"] + parts["s"] + parts["c"]
    return total, parts
