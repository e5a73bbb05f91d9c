"""Articulated head template: blendshapes, linear blend skinning, rotations.

The template carries a rest-pose point cloud, a kinematic tree, a joint
regressor, smooth skinning weights and linear shape/pose/expression bases.
All deformation here is differentiable and dtype-generic; float64 is used by
the gradient checks, float32 by training.

Conventions: quaternions are (w, x, y, z) with nonnegative w after
canonicalization; pose vectors are per-joint axis-angle, root first; the pose
feature is the flattened ``R_k - I`` over non-root joints.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .container import load_container, save_container


class DeformError(RuntimeError):
    """Raised for degenerate blends and malformed deformation inputs."""


# ---------------------------------------------------------------------------
# rotations


def skew(v: torch.Tensor) -> torch.Tensor:
    """Cross-product matrix of (..., 3) vectors."""
    zero = torch.zeros_like(v[..., 0])
    rows = [
        torch.stack([zero, -v[..., 2], v[..., 1]], dim=-1),
        torch.stack([v[..., 2], zero, -v[..., 0]], dim=-1),
        torch.stack([-v[..., 1], v[..., 0], zero], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def rodrigues(axis_angle: torch.Tensor) -> torch.Tensor:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3).

    Guarded so the map and its gradient stay finite at zero angle: the
    division never sees a small angle, the Taylor branch takes over there.
    """
    theta2 = (axis_angle**2).sum(dim=-1)
    small = theta2 < 1e-16
    safe_theta2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = safe_theta2.sqrt()
    sin_f = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    cos_f = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe_theta2)
    k = skew(axis_angle)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    eye = eye.expand(k.shape)
    return eye + sin_f[..., None, None] * k + cos_f[..., None, None] * (k @ k)


def quat_normalize(q: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True).clamp_min(eps)


def quat_canonical(q: torch.Tensor) -> torch.Tensor:
    """Flip sign so the scalar part is nonnegative."""
    return torch.where(q[..., :1] < 0, -q, q)


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product of (..., 4) quaternions, (w, x, y, z) order."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternion (..., 4) to rotation matrix (..., 3, 3)."""
    w, x, y, z = quat_normalize(q).unbind(-1)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        torch.stack([1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)], dim=-1),
        torch.stack([2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)], dim=-1),
        torch.stack([2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def _sqrt_positive(x: torch.Tensor) -> torch.Tensor:
    # sqrt clamped at zero with a zero (not NaN) gradient on the flat side
    out = torch.zeros_like(x)
    mask = x > 0
    out[mask] = torch.sqrt(x[mask])
    return out


def matrix_to_quat(m: torch.Tensor) -> torch.Tensor:
    """Rotation matrix (..., 3, 3) to canonical unit quaternion (..., 4).

    All four Shepperd candidates are formed with guarded square roots and the
    best-conditioned one is selected per matrix, so the map is stable for
    every orientation.
    """
    m00, m01, m02 = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    m10, m11, m12 = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    m20, m21, m22 = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    q_abs = _sqrt_positive(
        torch.stack(
            [
                1.0 + m00 + m11 + m22,
                1.0 + m00 - m11 - m22,
                1.0 - m00 + m11 - m22,
                1.0 - m00 - m11 + m22,
            ],
            dim=-1,
        )
    )
    quat_by_w = torch.stack([q_abs[..., 0] ** 2, m21 - m12, m02 - m20, m10 - m01], dim=-1)
    quat_by_x = torch.stack([m21 - m12, q_abs[..., 1] ** 2, m01 + m10, m02 + m20], dim=-1)
    quat_by_y = torch.stack([m02 - m20, m01 + m10, q_abs[..., 2] ** 2, m12 + m21], dim=-1)
    quat_by_z = torch.stack([m10 - m01, m02 + m20, m12 + m21, q_abs[..., 3] ** 2], dim=-1)
    candidates = torch.stack([quat_by_w, quat_by_x, quat_by_y, quat_by_z], dim=-2)
    denom = 2.0 * q_abs[..., None].clamp_min(0.1)
    candidates = candidates / denom
    best = q_abs.argmax(dim=-1)
    one_hot = torch.nn.functional.one_hot(best, num_classes=4).to(dtype=torch.bool)
    q = candidates[one_hot.unsqueeze(-1).expand(candidates.shape)].reshape(m.shape[:-2] + (4,))
    return quat_canonical(quat_normalize(q))


def polar_rotation(a: torch.Tensor, iters: int = 15, det_eps: float = 1e-9) -> torch.Tensor:
    """Nearest rotation factor of (..., 3, 3) linear maps.

    Newton iteration ``X <- (X + X^{-T}) / 2``; converges quadratically for
    any nonsingular input and keeps a usable gradient at the identity, where
    an SVD factorization does not. Maps that are singular or orientation
    reversing have no meaningful rotation part and are rejected.
    """
    det = torch.linalg.det(a)
    if bool((det <= det_eps).any()):
        raise DeformError(
            f"degenerate blend: det in [{float(det.min()):.3e}, {float(det.max()):.3e}]"
        )
    x = a
    for _ in range(iters):
        x = 0.5 * (x + torch.linalg.inv(x).transpose(-1, -2))
    return x


# ---------------------------------------------------------------------------
# template


@dataclasses.dataclass
class HeadTemplate:
    """Rest-pose geometry plus the linear machinery that animates it."""

    vertices: torch.Tensor  # (V, 3)
    parents: torch.Tensor  # (K,) long, -1 marks the root
    joint_regressor: torch.Tensor  # (K, V), rows on the simplex
    lbs_weights: torch.Tensor  # (V, K), rows on the simplex
    shape_basis: torch.Tensor  # (V, 3, n_shape)
    pose_basis: torch.Tensor  # (V, 3, 9 * (K - 1))
    expr_basis: torch.Tensor  # (V, 3, n_expr)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[-1]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[-1]

    @property
    def n_pose_feat(self) -> int:
        return 9 * (self.n_joints - 1)

    @property
    def dtype(self) -> torch.dtype:
        return self.vertices.dtype

    def to(self, dtype: torch.dtype) -> "HeadTemplate":
        cast = lambda t: t.to(dtype) if t.is_floating_point() else t
        return HeadTemplate(**{f.name: cast(getattr(self, f.name)) for f in dataclasses.fields(self)})

    def validate(self) -> None:
        v, k = self.n_vertices, self.n_joints
        checks = [
            (self.vertices.shape, (v, 3)),
            (self.parents.shape, (k,)),
            (self.joint_regressor.shape, (k, v)),
            (self.lbs_weights.shape, (v, k)),
            (self.pose_basis.shape, (v, 3, 9 * (k - 1))),
        ]
        for got, want in checks:
            if tuple(got) != want:
                raise DeformError(f"template shape mismatch: {tuple(got)} != {want}")
        if int(self.parents[0]) != -1 or bool((self.parents[1:] >= torch.arange(1, k)).any()):
            raise DeformError("parents must be topologically sorted with root first")

    def save(self, path: str | Path, extra_meta: dict[str, Any] | None = None) -> None:
        tensors = {f.name: getattr(self, f.name).detach().cpu().numpy() for f in dataclasses.fields(self)}
        meta = {"kind": "head_template", "n_joints": self.n_joints}
        if extra_meta:
            meta.update(extra_meta)
        save_container(path, tensors, meta)

    @classmethod
    def load(cls, path: str | Path, dtype: torch.dtype = torch.float32) -> "HeadTemplate":
        tensors, meta = load_container(path)
        if meta.get("kind") != "head_template":
            raise DeformError(f"{path}: not a head template (kind={meta.get('kind')!r})")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in tensors:
                raise DeformError(f"{path}: template missing tensor {f.name!r}")
            t = torch.as_tensor(tensors[f.name])
            kwargs[f.name] = t.to(dtype) if t.is_floating_point() else t.long()
        tmpl = cls(**kwargs)
        tmpl.validate()
        return tmpl


# ---------------------------------------------------------------------------
# deformation


def blend_shapes(coeffs: torch.Tensor, basis: torch.Tensor) -> torch.Tensor:
    """Linear blendshape offsets: (n,) coeffs x (P, 3, n) basis -> (P, 3)."""
    if coeffs.shape[-1] != basis.shape[-1]:
        raise DeformError(f"coeff/basis mismatch: {coeffs.shape[-1]} != {basis.shape[-1]}")
    return torch.einsum("n,pin->pi", coeffs, basis)


def pose_feature(rotmats: torch.Tensor) -> torch.Tensor:
    """Flattened ``R_k - I`` over non-root joints: (K, 3, 3) -> (9 (K-1),)."""
    eye = torch.eye(3, dtype=rotmats.dtype, device=rotmats.device)
    return (rotmats[1:] - eye).reshape(-1)


def compute_joints(template: HeadTemplate, beta: torch.Tensor) -> torch.Tensor:
    """Joint locations of the shaped (but unposed) template: (K, 3)."""
    shaped = template.vertices + blend_shapes(beta, template.shape_basis)
    return template.joint_regressor @ shaped


def relative_to_absolute(
    rotmats: torch.Tensor, joints: torch.Tensor, parents: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Accumulate per-joint local rotations along the tree.

    Returns world rotations (K, 3, 3) and skinning translations (K, 3) such
    that joint k maps a rest point as ``x -> R_k x + t_k``. Translations are
    carried as posed-joint offsets ``d_k = d_p + (R_p - I)(j_k - j_p)``, which
    vanish identically at the rest pose instead of accumulating rounding from
    a chain of 4x4 products.
    """
    k = parents.shape[0]
    abs_rot: list[torch.Tensor] = [rotmats[0]]
    offset: list[torch.Tensor] = [torch.zeros_like(joints[0])]
    eye = torch.eye(3, dtype=rotmats.dtype, device=rotmats.device)
    for j in range(1, k):
        p = int(parents[j])
        abs_rot.append(abs_rot[p] @ rotmats[j])
        offset.append(offset[p] + (abs_rot[p] - eye) @ (joints[j] - joints[p]))
    rot = torch.stack(abs_rot)
    disp = torch.stack(offset)
    trans = joints + disp - torch.einsum("kij,kj->ki", rot, joints)
    return rot, trans


def lbs(
    points: torch.Tensor,
    weights: torch.Tensor,
    rot: torch.Tensor,
    trans: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Linear blend skinning of (P, 3) points with (P, K) weights.

    Returns posed points (P, 3) and the per-point blended linear map
    A_i = sum_k W_ik R_k, shape (P, 3, 3), whose rotation part orients any
    frame attached to the point.
    """
    if points.shape[0] != weights.shape[0]:
        raise DeformError(f"point/weight count mismatch: {points.shape[0]} != {weights.shape[0]}")
    a = torch.einsum("pk,kij->pij", weights, rot)
    b = weights @ trans
    posed = torch.einsum("pij,pj->pi", a, points) + b
    return posed, a


def lbs_rotation(a: torch.Tensor) -> torch.Tensor:
    """Canonical quaternion of the rotation part of blended maps (P, 3, 3)."""
    return matrix_to_quat(polar_rotation(a))


def pose_to_rotmats(theta: torch.Tensor, n_joints: int) -> torch.Tensor:
    """Per-joint axis-angle (K*3,) or (K, 3) to rotation matrices (K, 3, 3)."""
    theta = theta.reshape(n_joints, 3)
    return rodrigues(theta)


def pose_template(
    template: HeadTemplate,
    beta: torch.Tensor,
    theta: torch.Tensor,
    psi: torch.Tensor,
) -> torch.Tensor:
    """Fully pose the template's own vertices (shape, expression, pose, LBS)."""
    rotmats = pose_to_rotmats(theta, template.n_joints)
    rest = (
        template.vertices
        + blend_shapes(beta, template.shape_basis)
        + blend_shapes(pose_feature(rotmats), template.pose_basis)
        + blend_shapes(psi, template.expr_basis)
    )
    joints = compute_joints(template, beta)
    rot, trans = relative_to_absolute(rotmats, joints, template.parents)
    posed, _ = lbs(rest, template.lbs_weights, rot, trans)
    return posed


def knn_inverse_distance(
    queries: torch.Tensor,
    refs: torch.Tensor,
    values: torch.Tensor,
    k: int = 3,
    eps: float = 1e-8,
) -> torch.Tensor:
    """Inverse-distance interpolation of per-reference values at query points.

    ``values`` is (V, ...) with arbitrary trailing shape; the result is
    (N, ...). Differentiable in the queries through the distances (the
    neighbor selection itself only switches on a measure-zero set).
    """
    d = torch.cdist(queries, refs)  # (N, V)
    dist, idx = torch.topk(d, k=k, dim=-1, largest=False)
    w = 1.0 / (dist + eps)
    w = w / w.sum(dim=-1, keepdim=True)
    gathered = values[idx]  # (N, k, ...)
    w = w.reshape(w.shape + (1,) * (gathered.dim() - 2))
    return (w * gathered).sum(dim=1)


# ---------------------------------------------------------------------------
# toy template


def make_toy_template(
    n_vertices: int = 400,
    n_shape: int = 4,
    n_expr: int = 4,
    seed: int = 0,
    dtype: torch.dtype = torch.float64,
) -> HeadTemplate:
    """Procedural head-like template for synthetic data and tests.

    An ellipsoidal Fibonacci-sphere point cloud with a four-joint chain
    (root, neck, jaw, crown), smooth softmax skinning weights and smooth
    random orthogonalized blendshape bases. Metrically plausible: the head is
    roughly 0.2 m tall, blendshape offsets are ~1 cm, pose correctives ~2 mm.
    """
    rng = np.random.default_rng(seed)

    i = np.arange(n_vertices, dtype=np.float64) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n_vertices)
    golden = np.pi * (1.0 + np.sqrt(5.0))
    theta = golden * i
    unit = np.stack(
        [np.sin(phi) * np.cos(theta), np.cos(phi), np.sin(phi) * np.sin(theta)], axis=1
    )
    verts = unit * np.array([0.095, 0.115, 0.100])

    anchors = np.array(
        [
            [0.0, -0.10, 0.00],  # root at the neck base
            [0.0, -0.02, 0.00],  # neck
            [0.0, -0.05, 0.07],  # jaw
            [0.0, 0.06, 0.05],  # crown
        ]
    )
    parents = np.array([-1, 0, 1, 1], dtype=np.int64)
    k = anchors.shape[0]

    d2 = ((verts[None, :, :] - anchors[:, None, :]) ** 2).sum(-1)  # (K, V)
    reg = np.exp(-d2 / (2 * 0.03**2))
    reg /= reg.sum(axis=1, keepdims=True)

    wd2 = d2.T / (2 * 0.05**2)  # (V, K)
    weights = np.exp(-(wd2 - wd2.min(axis=1, keepdims=True)))
    weights /= weights.sum(axis=1, keepdims=True)

    feats = _poly_features(verts / 0.1)  # (V, F)

    def smooth_basis(n_cols: int, amplitude: float) -> np.ndarray:
        coeff = rng.standard_normal((feats.shape[1], 3, n_cols))
        raw = np.einsum("vf,fan->van", feats, coeff).reshape(n_vertices * 3, n_cols)
        q, _ = np.linalg.qr(raw)
        q = q / np.abs(q).max(axis=0, keepdims=True)
        return (q * amplitude).reshape(n_vertices, 3, n_cols)

    template = HeadTemplate(
        vertices=torch.as_tensor(verts, dtype=dtype),
        parents=torch.as_tensor(parents),
        joint_regressor=torch.as_tensor(reg, dtype=dtype),
        lbs_weights=torch.as_tensor(weights, dtype=dtype),
        shape_basis=torch.as_tensor(smooth_basis(n_shape, 0.012), dtype=dtype),
        pose_basis=torch.as_tensor(smooth_basis(9 * (k - 1), 0.002), dtype=dtype),
        expr_basis=torch.as_tensor(smooth_basis(n_expr, 0.010), dtype=dtype),
    )
    template.validate()
    return template


def _poly_features(x: np.ndarray) -> np.ndarray:
    """Degree-2 monomial features of (V, 3) points, constant column first."""
    cols = [np.ones(x.shape[0])]
    cols += [x[:, a] for a in range(3)]
    cols += [x[:, a] * x[:, b] for a in range(3) for b in range(a, 3)]
    return np.stack(cols, axis=1)
