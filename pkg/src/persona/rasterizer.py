"""Differentiable tile-based rasterizer for anisotropic 3D Gaussians.

Projection follows the EWA splatting approximation: each Gaussian's world
covariance R diag(s)^2 R^T is pushed through the camera rotation and the
perspective Jacobian to a 2D covariance, dilated by +0.3 px^2 on the
diagonal. Splats are binned into 16x16 pixel tiles by their 3-sigma radius
and composited front to back per pixel:

    C = sum_i c_i a_i T_i,  T_{i+1} = T_i (1 - a_i),  a_i = o_i exp(-0.5 d^T S^-1 d)

A splat is dropped, and the pixel's accumulation stops, as soon as including
it would push transmittance below 1e-4. Depth ties are broken by splat index.
Everything is dtype-generic and differentiable end to end; the tile loop only
partitions pixels, so the result is identical to a single global sort.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Any

import numpy as np
import torch

from .headmodel import quat_to_matrix

TILE = 16
T_STOP = 1e-4
DILATION = 0.3


class RasterError(RuntimeError):
    """Raised for malformed rasterizer inputs."""


@dataclasses.dataclass
class Camera:
    """Pinhole camera, OpenCV convention (x right, y down, z forward).

    ``rotation``/``translation`` map world to camera: x_cam = R x + t.
    Pixel centers sit at integer coordinates.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    near: float = 0.05
    far: float = 2.0

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.width <= 0 or self.height <= 0:
            raise RasterError("image dimensions must be positive")
        if not (0 < self.near < self.far):
            raise RasterError(f"bad clip range ({self.near}, {self.far})")

    def rt(self, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
        return (
            torch.as_tensor(self.rotation, dtype=dtype),
            torch.as_tensor(self.translation, dtype=dtype),
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "Camera":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64),
            translation=np.asarray(d["translation"], dtype=np.float64),
            near=float(d.get("near", 0.05)),
            far=float(d.get("far", 2.0)),
        )

    @classmethod
    def front_facing(cls, size: int, distance: float = 0.45, focal_scale: float = 1.5) -> "Camera":
        """Camera on +z looking back at the origin, y up in world space."""
        return cls(
            width=size,
            height=size,
            fx=focal_scale * size,
            fy=focal_scale * size,
            cx=size / 2 - 0.5,
            cy=size / 2 - 0.5,
            rotation=np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]),
            translation=np.array([0.0, 0.0, distance]),
        )


@dataclasses.dataclass
class RenderOutput:
    image: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W) alpha-weighted expected depth
    n_contrib: torch.Tensor  # (H, W) int, splats composited per pixel
    radii: torch.Tensor  # (N,) int, 0 for culled splats
    means2d: torch.Tensor  # (N, 2) screen positions (culled rows are stale)
    visible: torch.Tensor  # (N,) bool


def covariance_from_rs(quats: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
    """World covariance R diag(s)^2 R^T of (N,) Gaussians."""
    r = quat_to_matrix(quats)
    m = r * scales[:, None, :]  # R @ diag(s)
    return m @ m.transpose(-1, -2)


def _validate(means, quats, scales, opacities, colors) -> int:
    n = means.shape[0]
    specs = [
        ("means", means, (n, 3)),
        ("quats", quats, (n, 4)),
        ("scales", scales, (n, 3)),
        ("opacities", opacities, (n,)),
        ("colors", colors, (n, 3)),
    ]
    for name, t, want in specs:
        if tuple(t.shape) != want:
            raise RasterError(f"{name}: expected shape {want}, got {tuple(t.shape)}")
        if not torch.isfinite(t.detach()).all():
            raise RasterError(f"{name}: non-finite values")
    return n


def project(
    means: torch.Tensor,
    quats: torch.Tensor,
    scales: torch.Tensor,
    camera: Camera,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Project Gaussians to screen space.

    Returns (means2d (N,2), cov2d (N,2,2), depth (N,), radius (N,) int,
    in_frustum (N,) bool). Rows failing the depth test carry unusable values;
    callers must mask by ``in_frustum``.
    """
    dtype = means.dtype
    rot, trans = camera.rt(dtype)
    cam = means @ rot.T + trans
    depth = cam[:, 2]
    in_frustum = (depth > camera.near) & (depth < camera.far)

    z = torch.where(in_frustum, depth, torch.ones_like(depth))
    u = camera.fx * cam[:, 0] / z + camera.cx
    v = camera.fy * cam[:, 1] / z + camera.cy
    means2d = torch.stack([u, v], dim=-1)

    zero = torch.zeros_like(z)
    jrow0 = torch.stack([camera.fx / z, zero, -camera.fx * cam[:, 0] / z**2], dim=-1)
    jrow1 = torch.stack([zero, camera.fy / z, -camera.fy * cam[:, 1] / z**2], dim=-1)
    j = torch.stack([jrow0, jrow1], dim=-2)  # (N, 2, 3)

    cov3d = covariance_from_rs(quats, scales)
    jw = j @ rot
    cov2d = jw @ cov3d @ jw.transpose(-1, -2)
    eye2 = torch.eye(2, dtype=dtype)
    cov2d = cov2d + DILATION * eye2

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = (mid**2 - (a * c - b**2)).clamp_min(0.0)
    lam_max = mid + disc.sqrt()
    radius = torch.ceil(3.0 * lam_max.detach().sqrt()).long()
    radius = torch.where(in_frustum, radius, torch.zeros_like(radius))
    return means2d, cov2d, depth, radius, in_frustum


def render(
    means: torch.Tensor,
    quats: torch.Tensor,
    scales: torch.Tensor,
    opacities: torch.Tensor,
    colors: torch.Tensor,
    camera: Camera,
    background: torch.Tensor | None = None,
) -> RenderOutput:
    """Render Gaussians to an (H, W, 3) image over a constant background."""
    n = _validate(means, quats, scales, opacities, colors)
    dtype = means.dtype
    h, w = camera.height, camera.width
    if background is None:
        background = torch.zeros(3, dtype=dtype)
    background = torch.as_tensor(background, dtype=dtype).reshape(3)

    image = background.expand(h, w, 3).clone()
    alpha_map = torch.zeros(h, w, dtype=dtype)
    depth_map = torch.zeros(h, w, dtype=dtype)
    n_contrib = torch.zeros(h, w, dtype=torch.long)
    if n == 0:
        return RenderOutput(
            image, alpha_map, depth_map, n_contrib,
            radii=torch.zeros(0, dtype=torch.long),
            means2d=torch.zeros(0, 2, dtype=dtype),
            visible=torch.zeros(0, dtype=torch.bool),
        )

    means2d, cov2d, depth, radius, in_frustum = project(means, quats, scales, camera)

    tw, th = (w + TILE - 1) // TILE, (h + TILE - 1) // TILE
    px = means2d[:, 0].detach()
    py = means2d[:, 1].detach()
    r = radius.to(dtype)
    tx0 = torch.floor((px - r) / TILE).clamp(0, tw).long()
    tx1 = (torch.floor((px + r) / TILE) + 1).clamp(0, tw).long()
    ty0 = torch.floor((py - r) / TILE).clamp(0, th).long()
    ty1 = (torch.floor((py + r) / TILE) + 1).clamp(0, th).long()
    visible = in_frustum & (radius > 0) & (tx1 > tx0) & (ty1 > ty0)
    radius = torch.where(visible, radius, torch.zeros_like(radius))

    nx = torch.where(visible, tx1 - tx0, torch.zeros_like(tx0))
    ny = torch.where(visible, ty1 - ty0, torch.zeros_like(ty0))
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return RenderOutput(image, alpha_map, depth_map, n_contrib, radius, means2d, visible)

    splat_id = torch.repeat_interleave(torch.arange(n), counts)
    starts = torch.cumsum(counts, 0) - counts
    local = torch.arange(total) - starts[splat_id]
    nx_rep = nx[splat_id]
    tile_x = tx0[splat_id] + local % nx_rep
    tile_y = ty0[splat_id] + local // nx_rep
    tile_id = tile_y * tw + tile_x

    # one global stable sort by (tile, depth rank); rank breaks ties by index
    order = torch.argsort(depth.detach(), stable=True)
    rank = torch.empty(n, dtype=torch.long)
    rank[order] = torch.arange(n)
    key = tile_id * n + rank[splat_id]
    perm = torch.argsort(key, stable=True)
    tile_sorted = tile_id[perm]
    splat_sorted = splat_id[perm]

    # conic (inverse 2D covariance), computed once for all splats
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)

    uniq, tile_counts = torch.unique_consecutive(tile_sorted, return_counts=True)
    tile_starts = torch.cumsum(tile_counts, 0) - tile_counts

    ys = torch.arange(h, dtype=dtype)
    xs = torch.arange(w, dtype=dtype)

    # tiles are independent pixel sets; composite each with its splat list
    out_img = image.reshape(h * w, 3)
    out_alpha = alpha_map.reshape(h * w)
    out_depth = depth_map.reshape(h * w)
    out_cnt = n_contrib.reshape(h * w)
    img_parts: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]] = []
    for t_idx in range(uniq.shape[0]):
        t = int(uniq[t_idx])
        s0 = int(tile_starts[t_idx])
        cnt = int(tile_counts[t_idx])
        ids = splat_sorted[s0 : s0 + cnt]

        tyy, txx = divmod(t, tw)
        y0, x0 = tyy * TILE, txx * TILE
        yy = ys[y0 : y0 + TILE]
        xx = xs[x0 : x0 + TILE]
        pix = torch.stack(
            [xx[None, :].expand(yy.shape[0], -1), yy[:, None].expand(-1, xx.shape[0])], dim=-1
        ).reshape(-1, 2)  # (P, 2) in (x, y)

        d = pix[:, None, :] - means2d[ids][None, :, :]  # (P, S, 2)
        co = conic[ids]
        power = -0.5 * (
            co[None, :, 0] * d[..., 0] ** 2
            + 2.0 * co[None, :, 1] * d[..., 0] * d[..., 1]
            + co[None, :, 2] * d[..., 1] ** 2
        )
        alpha = opacities[ids][None, :] * torch.exp(power)  # (P, S)

        trans_incl = torch.cumprod(1.0 - alpha, dim=1)
        keep = (trans_incl >= T_STOP).to(dtype)  # prefix mask per pixel
        alpha_eff = alpha * keep
        trans = torch.cumprod(1.0 - alpha_eff, dim=1)
        trans_excl = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
        contrib = alpha_eff * trans_excl  # (P, S)

        tile_img = contrib @ colors[ids] + trans[:, -1:] * background[None, :]
        tile_alpha = contrib.sum(dim=1)
        tile_depth = contrib @ depth[ids]
        tile_cnt = ((alpha_eff > 0) & (keep > 0)).sum(dim=1)

        rows = pix[:, 1].long() * w + pix[:, 0].long()
        img_parts.append((rows, tile_img, tile_alpha, tile_depth, tile_cnt))

    rows = torch.cat([p[0] for p in img_parts])
    out_img = out_img.index_put((rows,), torch.cat([p[1] for p in img_parts]))
    out_alpha = out_alpha.index_put((rows,), torch.cat([p[2] for p in img_parts]))
    out_depth = out_depth.index_put((rows,), torch.cat([p[3] for p in img_parts]))
    out_cnt = out_cnt.index_put((rows,), torch.cat([p[4] for p in img_parts]))

    return RenderOutput(
        image=out_img.reshape(h, w, 3),
        alpha=out_alpha.reshape(h, w),
        depth=out_depth.reshape(h, w),
        n_contrib=out_cnt.reshape(h, w),
        radii=radius,
        means2d=means2d,
        visible=visible,
    )


def render_backward(
    grad_image: torch.Tensor,
    means: torch.Tensor,
    quats: torch.Tensor,
    scales: torch.Tensor,
    opacities: torch.Tensor,
    colors: torch.Tensor,
    camera: Camera,
    background: torch.Tensor | None = None,
    grad_alpha: torch.Tensor | None = None,
) -> dict[str, torch.Tensor]:
    """Input gradients for given upstream image (and optional alpha) grads.

    Self-contained: re-runs the forward pass on leaf copies, so callers can
    drive the rasterizer without holding their own graph.
    """
    if tuple(grad_image.shape) != (camera.height, camera.width, 3):
        raise RasterError(
            f"grad_image: expected {(camera.height, camera.width, 3)}, got {tuple(grad_image.shape)}"
        )
    if grad_alpha is not None and tuple(grad_alpha.shape) != (camera.height, camera.width):
        raise RasterError(
            f"grad_alpha: expected {(camera.height, camera.width)}, got {tuple(grad_alpha.shape)}"
        )
    leaves = {
        "means": means.detach().clone().requires_grad_(True),
        "quats": quats.detach().clone().requires_grad_(True),
        "scales": scales.detach().clone().requires_grad_(True),
        "opacities": opacities.detach().clone().requires_grad_(True),
        "colors": colors.detach().clone().requires_grad_(True),
    }
    out = render(
        leaves["means"], leaves["quats"], leaves["scales"],
        leaves["opacities"], leaves["colors"], camera, background,
    )
    total = (out.image * grad_image).sum()
    if grad_alpha is not None:
        total = total + (out.alpha * grad_alpha).sum()
    grads = torch.autograd.grad(total, list(leaves.values()), allow_unused=True)
    return {
        name: (torch.zeros_like(leaf) if g is None else g)
        for (name, leaf), g in zip(leaves.items(), grads)
    }
