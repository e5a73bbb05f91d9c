"""Evaluation metrics and the interpolation evaluation plan.

Distribution metrics (FID, KID) operate on feature vectors from a pluggable
provider; the default provider is a fixed-seed random convolutional pyramid,
and a learned one can be loaded from a weights container with the same layout.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .container import load_container, save_container
from .losses import ssim  # re-exported: ssim doubles as a metric

__all__ = [
    "ConvFeatures",
    "MetricError",
    "PlanEntry",
    "alpha_grid",
    "fid",
    "identity_cosine",
    "identity_embedding",
    "interpolation_plan",
    "kid",
    "mean_abs_outside",
    "path_length",
    "population_std",
    "psnr",
    "ssim",
]

PSNR_CAP = 99.0


class MetricError(RuntimeError):
    """Raised for degenerate metric inputs (too few samples, bad shapes)."""


def psnr(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for identical images."""
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


class ConvFeatures:
    """Strided random-convolution pyramid used as the perceptual feature space.

    Three conv+relu stages at halving resolution; ``feature_maps`` returns the
    per-stage activations, ``distance`` is the channel-normalized squared
    feature difference summed over stages, ``embed`` global-average-pools each
    stage into one vector for distribution metrics.
    """

    def __init__(self, weights: list[tuple[torch.Tensor, torch.Tensor]]):
        self.weights = [(w.detach(), b.detach()) for w, b in weights]

    @classmethod
    def random(cls, seed: int = 0, channels: tuple[int, ...] = (16, 32, 64)) -> "ConvFeatures":
        gen = torch.Generator().manual_seed(seed)
        weights = []
        c_in = 3
        for c_out in channels:
            w = torch.randn(c_out, c_in, 3, 3, generator=gen, dtype=torch.float64)
            w = w / math.sqrt(c_in * 9)
            b = 0.1 * torch.randn(c_out, generator=gen, dtype=torch.float64)
            weights.append((w, b))
            c_in = c_out
        return cls(weights)

    def save(self, path: str | Path) -> None:
        tensors = {}
        for i, (w, b) in enumerate(self.weights):
            tensors[f"conv{i}.weight"] = w.numpy()
            tensors[f"conv{i}.bias"] = b.numpy()
        save_container(path, tensors, {"kind": "conv_features", "levels": len(self.weights)})

    @classmethod
    def load(cls, path: str | Path) -> "ConvFeatures":
        tensors, meta = load_container(path)
        if meta.get("kind") != "conv_features":
            raise MetricError(f"{path}: not a feature-provider container")
        weights = []
        for i in range(int(meta["levels"])):
            weights.append(
                (
                    torch.as_tensor(tensors[f"conv{i}.weight"]),
                    torch.as_tensor(tensors[f"conv{i}.bias"]),
                )
            )
        return cls(weights)

    def feature_maps(self, image: torch.Tensor) -> list[torch.Tensor]:
        if image.dim() != 3 or image.shape[-1] != 3:
            raise MetricError(f"expected (H, W, 3) image, got {tuple(image.shape)}")
        x = (image.permute(2, 0, 1)[None] - 0.5) / 0.5
        maps = []
        for w, b in self.weights:
            x = F.conv2d(x, w.to(x.dtype), b.to(x.dtype), stride=2, padding=1)
            x = F.relu(x)
            maps.append(x[0])
        return maps

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        total = None
        for fa, fb in zip(self.feature_maps(a), self.feature_maps(b)):
            na = fa / (fa.norm(dim=0, keepdim=True) + 1e-10)
            nb = fb / (fb.norm(dim=0, keepdim=True) + 1e-10)
            term = ((na - nb) ** 2).sum(dim=0).mean()
            total = term if total is None else total + term
        return total

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        return torch.cat([m.mean(dim=(-2, -1)) for m in self.feature_maps(image)])


def identity_embedding(
    image: torch.Tensor, mask: torch.Tensor | None = None, grid: int = 16
) -> torch.Tensor:
    """Masked low-resolution appearance signature, unit L2 norm."""
    x = image
    if mask is not None:
        if mask.shape != image.shape[:2]:
            raise MetricError(f"mask shape {tuple(mask.shape)} does not match image")
        x = x * mask.to(x.dtype)[..., None]
    pooled = F.adaptive_avg_pool2d(x.permute(2, 0, 1)[None], (grid, grid))[0]
    flat = pooled.reshape(-1)
    return flat / flat.norm().clamp_min(1e-12)


def identity_cosine(
    a: torch.Tensor,
    b: torch.Tensor,
    mask_a: torch.Tensor | None = None,
    mask_b: torch.Tensor | None = None,
    embedder=None,
) -> float:
    """Cosine similarity of identity embeddings (pluggable embedder)."""
    fn = embedder or identity_embedding
    ea, eb = fn(a, mask_a), fn(b, mask_b)
    return float((ea * eb).sum())


def mean_abs_outside(a: torch.Tensor, b: torch.Tensor, region: torch.Tensor) -> float:
    """Mean absolute pixel difference over the complement of ``region``."""
    if region.shape != a.shape[:2]:
        raise MetricError(f"region shape {tuple(region.shape)} does not match image")
    outside = (~region.bool()).to(a.dtype)[..., None]
    denom = float(outside.sum()) * a.shape[-1]
    if denom == 0:
        return 0.0
    return float(((a - b).abs() * outside).sum() / denom)


# ---------------------------------------------------------------------------
# distribution metrics


def _moments(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise MetricError(f"need (n>=2, d) features, got {feats.shape}")
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False, ddof=1)
    return mu, np.atleast_2d(cov)


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(feats_a: np.ndarray, feats_b: np.ndarray, neg_eig_tol: float = -1e-6) -> float:
    """Frechet distance between gaussian fits of two feature sets.

    The matrix square root of the covariance product is taken through the
    symmetric form A^{1/2} B A^{1/2}, whose spectrum is real; eigenvalues
    below ``neg_eig_tol`` indicate numerically invalid inputs and raise.
    """
    mu_a, cov_a = _moments(feats_a)
    mu_b, cov_b = _moments(feats_b)
    if mu_a.shape != mu_b.shape:
        raise MetricError("feature dimensions differ")
    a_half = _sqrtm_psd(cov_a)
    sym = a_half @ cov_b @ a_half
    eigs = np.linalg.eigvalsh((sym + sym.T) / 2.0)
    if eigs.min() < neg_eig_tol:
        raise MetricError(f"covariance product has eigenvalue {eigs.min():.3e}")
    tr_sqrt = np.sqrt(np.clip(eigs, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def _poly_kernel(x: np.ndarray, y: np.ndarray, degree: int, coef: float) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + coef) ** degree


def kid(
    feats_a: np.ndarray, feats_b: np.ndarray, degree: int = 3, coef: float = 1.0
) -> float:
    """Squared maximum mean discrepancy under a polynomial kernel.

    U-statistic estimator: self terms always exclude the diagonal, and for
    equally sized sets the cross term excludes index-matched pairs too, so
    comparing a feature set against itself yields exactly zero.
    """
    x = np.asarray(feats_a, dtype=np.float64)
    y = np.asarray(feats_b, dtype=np.float64)
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise MetricError("need at least two samples per set")
    if x.shape[1] != y.shape[1]:
        raise MetricError("feature dimensions differ")
    kxx = _poly_kernel(x, x, degree, coef)
    kyy = _poly_kernel(y, y, degree, coef)
    kxy = _poly_kernel(x, y, degree, coef)
    term_x = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    if n == m:
        cross = (kxy.sum() - np.trace(kxy)) / (n * (n - 1))
    else:
        cross = kxy.sum() / (n * m)
    return float(term_x + term_y - 2.0 * cross)


# ---------------------------------------------------------------------------
# interpolation protocol


def alpha_grid(n: int) -> list[float]:
    """Interior blend weights i/(n+1), i = 1..n."""
    return [i / (n + 1) for i in range(1, n + 1)]


def path_length(frames: list[torch.Tensor], provider) -> float:
    """Sum of perceptual distances between consecutive frames."""
    if len(frames) < 2:
        raise MetricError("a path needs at least two frames")
    return float(
        sum(provider.distance(frames[i], frames[i + 1]) for i in range(len(frames) - 1))
    )


def population_std(values) -> float:
    return float(np.std(np.asarray(values, dtype=np.float64), ddof=0))


@dataclasses.dataclass(frozen=True)
class PlanEntry:
    category: str
    subject_a: str
    subject_b: str
    pair_index: int
    alpha: float


def interpolation_plan(
    subjects_by_category: dict[str, list[str]],
    n_pairs: int = 200,
    n_alphas: int = 5,
    seed: int = 0,
) -> list[PlanEntry]:
    """Seeded evaluation plan: per category, ``n_pairs`` random subject pairs,
    each swept over the interior alpha grid.

    Total entries = categories x n_pairs x n_alphas.
    """
    rng = np.random.default_rng(seed)
    grid = alpha_grid(n_alphas)
    plan: list[PlanEntry] = []
    for category in sorted(subjects_by_category):
        subjects = sorted(subjects_by_category[category])
        if len(subjects) < 2:
            raise MetricError(f"category {category!r} needs at least two subjects")
        for p in range(n_pairs):
            i, j = rng.choice(len(subjects), size=2, replace=False)
            for alpha in grid:
                plan.append(
                    PlanEntry(
                        category=category,
                        subject_a=subjects[int(i)],
                        subject_b=subjects[int(j)],
                        pair_index=p,
                        alpha=alpha,
                    )
                )
    return plan
