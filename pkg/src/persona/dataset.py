"""Synthetic portrait dataset with switchable attributes.

Each subject shares one identity (the same head geometry and skin colors)
and differs only in a single attachable attribute (hat, beard, ...). Ground
truth is itself a Gaussian scene posed by the same articulation machinery
the model learns, so a trained model can in principle reproduce the data
exactly; frames are stored as 8-bit PNGs and the stored bytes equal the
re-rendered, re-quantized scene bit for bit.

Layout on disk:

    root/meta.json                     sizes, categories, camera, subjects
    root/template.bin                  articulated template
    root/subjects/<id>/scene.bin       ground-truth Gaussians + feature vecs
    root/subjects/<id>/flame.jsonl     per-frame pose coefficients
    root/subjects/<id>/frames/%05d.png rendered frames
    root/subjects/<id>/masks/<category>/%05d.png  attribute-region masks
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .avatar import CATEGORIES, FramePose, SubjectMeta
from .container import load_container, save_container
from .headmodel import (
    HeadTemplate,
    blend_shapes,
    compute_joints,
    knn_inverse_distance,
    lbs,
    lbs_rotation,
    make_toy_template,
    pose_feature,
    pose_to_rotmats,
    quat_multiply,
    quat_normalize,
    relative_to_absolute,
)
from .rasterizer import Camera, RenderOutput, render


class DatasetError(RuntimeError):
    """Raised for malformed dataset directories and unknown subjects."""


# -- image I/O ----------------------------------------------------------------


def quantize_u8(img: torch.Tensor) -> np.ndarray:
    """Float image in [0, 1] to the stored 8-bit representation."""
    arr = img.detach().cpu().numpy()
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def save_png(path: str | Path, img: torch.Tensor) -> None:
    u8 = quantize_u8(img)
    mode = "RGB" if u8.ndim == 3 else "L"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8, mode).save(path)


def load_png(path: str | Path, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    arr = np.asarray(Image.open(path))
    return torch.as_tensor(arr.astype(np.float64) / 255.0).to(dtype)


# -- ground-truth scenes --------------------------------------------------------


@dataclasses.dataclass
class ToyScene:
    """Rest-pose Gaussians with per-point articulation fields."""

    points: torch.Tensor       # (N, 3)
    quats: torch.Tensor        # (N, 4)
    scales: torch.Tensor       # (N, 3)
    opacities: torch.Tensor    # (N,)
    colors: torch.Tensor       # (N, 3)
    skin_w: torch.Tensor       # (N, K)
    shape_basis: torch.Tensor  # (N, 3, n_shape)
    pose_basis: torch.Tensor   # (N, 3, n_pose_feat)
    expr_basis: torch.Tensor   # (N, 3, n_expr)
    attr_mask: torch.Tensor    # (N,) bool, True on attribute points
    f_img: np.ndarray
    f_txt: np.ndarray
    subject_id: str
    category: str
    prompt: str

    def to(self, dtype: torch.dtype) -> "ToyScene":
        out = dataclasses.replace(self)
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, torch.Tensor) and v.is_floating_point():
                setattr(out, f.name, v.to(dtype))
        return out

    def save(self, path: str | Path) -> None:
        tensors: dict[str, np.ndarray] = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, torch.Tensor):
                tensors[f.name] = v.detach().cpu().numpy()
        tensors["f_img"] = np.asarray(self.f_img, dtype=np.float32)
        tensors["f_txt"] = np.asarray(self.f_txt, dtype=np.float32)
        meta = {
            "kind": "toy_scene",
            "subject": self.subject_id,
            "category": self.category,
            "prompt": self.prompt,
        }
        save_container(path, tensors, meta)

    @classmethod
    def load(cls, path: str | Path, dtype: torch.dtype = torch.float64) -> "ToyScene":
        tensors, meta = load_container(path)
        if meta.get("kind") != "toy_scene":
            raise DatasetError(f"{path}: not a scene container")
        kw: dict[str, Any] = {}
        for f in dataclasses.fields(cls):
            if f.name in ("f_img", "f_txt", "subject_id", "category", "prompt"):
                continue
            t = torch.as_tensor(tensors[f.name])
            kw[f.name] = t.to(dtype) if t.is_floating_point() else t.bool()
        return cls(
            **kw,
            f_img=tensors["f_img"],
            f_txt=tensors["f_txt"],
            subject_id=meta["subject"],
            category=meta["category"],
            prompt=meta["prompt"],
        )

    def subject_meta(self) -> SubjectMeta:
        return SubjectMeta(
            subject_id=self.subject_id,
            category=self.category,
            prompt=self.prompt,
            f_img=self.f_img,
            f_txt=self.f_txt,
        )


def pose_scene(scene: ToyScene, template: HeadTemplate, pose: FramePose) -> dict[str, torch.Tensor]:
    """Articulate a rest scene: blendshapes then skinning, rotations composed."""
    dtype = scene.points.dtype
    pose = pose.to(dtype)
    tmpl = template.to(dtype)
    rotmats = pose_to_rotmats(pose.theta, tmpl.n_joints)
    x = (
        scene.points
        + blend_shapes(pose.beta, scene.shape_basis)
        + blend_shapes(pose_feature(rotmats), scene.pose_basis)
        + blend_shapes(pose.psi, scene.expr_basis)
    )
    joints = compute_joints(tmpl, pose.beta)
    rot, trans = relative_to_absolute(rotmats, joints, tmpl.parents)
    x_posed, amat = lbs(x, scene.skin_w, rot, trans)
    r_posed = quat_normalize(quat_multiply(lbs_rotation(amat), scene.quats))
    return {
        "x": x_posed,
        "r": r_posed,
        "s": scene.scales,
        "o": scene.opacities,
        "c": scene.colors,
    }


def render_scene(
    scene: ToyScene,
    template: HeadTemplate,
    pose: FramePose,
    camera: Camera,
    subset: torch.Tensor | None = None,
) -> RenderOutput:
    attrs = pose_scene(scene, template, pose)
    if subset is not None:
        attrs = {k: v[subset] for k, v in attrs.items()}
    return render(attrs["x"], attrs["r"], attrs["s"], attrs["o"], attrs["c"], camera)


# -- synthesis -------------------------------------------------------------------


def subject_features(subject_id: str, dim: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic unit feature vectors derived from the subject id."""

    def vec(tag: str) -> np.ndarray:
        digest = hashlib.sha256(f"{subject_id}/{tag}".encode()).digest()
        g = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = g.standard_normal(dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    return vec("img"), vec("txt")


def _attribute_region(category: str, pts: np.ndarray) -> np.ndarray:
    """Boolean selector over template vertices for one attribute category."""
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    unit = pts / np.linalg.norm(pts, axis=-1, keepdims=True)
    uy = unit[:, 1]
    if category == "hat":
        return uy > math.cos(math.radians(45.0))
    if category == "hair":
        return (uy > math.cos(math.radians(60.0))) | ((z < -0.03) & (y > 0.0))
    if category == "beard":
        return (y < -0.03) & (z > 0.015)
    if category == "clothes":
        return y < -0.085
    if category == "earrings":
        return (np.abs(x) > 0.075) & (np.abs(y) < 0.02) & (z < 0.0)
    if category == "eyebrows":
        return (y > 0.02) & (y < 0.045) & (z > 0.06)
    if category == "headphones":
        return (np.abs(x) > 0.07) & (np.abs(y) < 0.03)
    if category == "mouth":
        return (np.abs(y + 0.035) < 0.015) & (z > 0.07)
    if category == "nose":
        return (np.abs(x) < 0.02) & (y > -0.01) & (y < 0.02) & (z > 0.08)
    raise DatasetError(f"no region rule for category {category!r}")


_PALETTE = np.array(
    [
        [0.85, 0.25, 0.20],
        [0.20, 0.45, 0.85],
        [0.25, 0.70, 0.30],
        [0.85, 0.65, 0.15],
        [0.60, 0.30, 0.75],
        [0.20, 0.70, 0.70],
        [0.80, 0.40, 0.60],
        [0.55, 0.55, 0.25],
    ]
)


def _head_colors(pts: torch.Tensor) -> torch.Tensor:
    """Smooth skin-like color field shared by every subject."""
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    r = 0.65 + 0.18 * torch.sin(9.0 * x + 1.0) * torch.cos(7.0 * y)
    g = 0.48 + 0.16 * torch.sin(8.0 * y + 2.0) * torch.cos(6.0 * z)
    b = 0.40 + 0.14 * torch.sin(10.0 * z + 3.0)
    return torch.stack([r, g, b], dim=-1).clamp(0.05, 0.95)


def make_toy_scene(
    template: HeadTemplate,
    subject_id: str,
    category: str,
    variant: int,
    prompt: str | None = None,
) -> ToyScene:
    """Shared head plus one subject-specific attribute shell."""
    tmpl = template.to(torch.float64)
    pts = tmpl.vertices
    v = pts.shape[0]
    rng = np.random.default_rng(100 + variant)

    region = _attribute_region(category, pts.numpy())
    if not region.any():
        raise DatasetError(f"category {category!r} selects no template vertices")
    base = pts[torch.as_tensor(region)]
    direction = base / base.norm(dim=-1, keepdim=True)
    # radial shell with a subject-specific thickness and a mild height taper
    height = (base[:, 1] - base[:, 1].min()) / (base[:, 1].max() - base[:, 1].min() + 1e-9)
    push = 0.012 + 0.010 * float(rng.random()) + 0.006 * float(rng.random()) * height
    attr_pts = base + direction * push[:, None]

    color = _PALETTE[variant % len(_PALETTE)]
    if category in ("beard", "hair", "eyebrows"):
        color = color * 0.3 + 0.05
    jitter = rng.uniform(-0.05, 0.05, size=3)
    attr_color = torch.as_tensor(np.clip(color + jitter, 0.03, 0.97), dtype=torch.float64)

    n_attr = attr_pts.shape[0]
    points = torch.cat([pts, attr_pts])
    quats = torch.zeros(v + n_attr, 4, dtype=torch.float64)
    quats[:, 0] = 1.0
    scales = torch.full((v + n_attr, 3), 0.009, dtype=torch.float64)
    scales[v:] = 0.011
    opacities = torch.full((v + n_attr,), 0.95, dtype=torch.float64)
    colors = torch.cat([_head_colors(pts), attr_color[None].expand(n_attr, -1)])

    # articulation fields: template values on the head, interpolated on the shell
    fields = torch.cat(
        [
            tmpl.lbs_weights,
            tmpl.shape_basis.reshape(v, -1),
            tmpl.pose_basis.reshape(v, -1),
            tmpl.expr_basis.reshape(v, -1),
        ],
        dim=-1,
    )
    attr_fields = knn_inverse_distance(attr_pts, pts, fields)
    all_fields = torch.cat([fields, attr_fields])
    k = tmpl.n_joints
    n_s, n_p, n_e = tmpl.n_shape, tmpl.n_pose_feat, tmpl.n_expr
    skin_w, shape_f, pose_f, expr_f = torch.split(
        all_fields, [k, 3 * n_s, 3 * n_p, 3 * n_e], dim=-1
    )
    skin_w = skin_w / skin_w.sum(dim=-1, keepdim=True)

    n = v + n_attr
    f_img, f_txt = subject_features(subject_id)
    return ToyScene(
        points=points,
        quats=quats,
        scales=scales,
        opacities=opacities,
        colors=colors,
        skin_w=skin_w,
        shape_basis=shape_f.reshape(n, 3, n_s),
        pose_basis=pose_f.reshape(n, 3, n_p),
        expr_basis=expr_f.reshape(n, 3, n_e),
        attr_mask=torch.cat([torch.zeros(v, dtype=torch.bool), torch.ones(n_attr, dtype=torch.bool)]),
        f_img=f_img,
        f_txt=f_txt,
        subject_id=subject_id,
        category=category,
        prompt=prompt or f"portrait wearing {category} variant {variant}",
    )


def make_trajectory(template: HeadTemplate, n_frames: int) -> list[FramePose]:
    """Smooth deterministic head motion: neck yaw/pitch, jaw, expression."""
    poses = []
    k, n_e, n_s = template.n_joints, template.n_expr, template.n_shape
    for i in range(n_frames):
        t = i / float(max(n_frames, 1))
        theta = torch.zeros(k, 3, dtype=torch.float64)
        theta[1, 1] = 0.35 * math.sin(2.0 * math.pi * t)            # neck yaw
        theta[1, 0] = 0.20 * math.sin(4.0 * math.pi * t + 0.7)      # neck pitch
        theta[2, 0] = 0.15 * (0.5 + 0.5 * math.sin(4.0 * math.pi * t + 1.3))  # jaw
        psi = torch.zeros(n_e, dtype=torch.float64)
        psi[0] = 0.8 * math.sin(2.0 * math.pi * t + 0.4)
        if n_e > 1:
            psi[1] = 0.6 * math.sin(6.0 * math.pi * t + 2.0)
        poses.append(
            FramePose(
                beta=torch.zeros(n_s, dtype=torch.float64),
                theta=theta.reshape(-1),
                psi=psi,
            )
        )
    return poses


def pose_to_json(pose: FramePose) -> dict[str, list[float]]:
    return {
        "beta": pose.beta.tolist(),
        "theta": pose.theta.tolist(),
        "psi": pose.psi.tolist(),
    }


def pose_from_json(d: dict[str, Any], dtype: torch.dtype = torch.float32) -> FramePose:
    return FramePose(
        beta=torch.tensor(d["beta"], dtype=dtype),
        theta=torch.tensor(d["theta"], dtype=dtype),
        psi=torch.tensor(d["psi"], dtype=dtype),
    )


def synth_toy_dataset(
    root: str | Path,
    n_subjects: int = 4,
    n_frames: int = 20,
    size: int = 128,
    n_vertices: int = 400,
    categories: tuple[str, ...] = ("hat", "beard"),
    seed: int = 0,
) -> "ToyDataset":
    """Generate a complete dataset directory and return its loader."""
    for c in categories:
        if c not in CATEGORIES:
            raise DatasetError(f"unknown category {c!r}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    template = make_toy_template(n_vertices=n_vertices, seed=seed, dtype=torch.float64)
    template.save(root / "template.bin")
    camera = Camera.front_facing(size)
    poses = make_trajectory(template, n_frames)

    subject_rows = []
    for idx in range(n_subjects):
        sid = f"s{idx:03d}"
        category = categories[idx % len(categories)]
        scene = make_toy_scene(template, sid, category, variant=idx)
        sdir = root / "subjects" / sid
        (sdir / "frames").mkdir(parents=True, exist_ok=True)
        (sdir / "masks" / category).mkdir(parents=True, exist_ok=True)
        scene.save(sdir / "scene.bin")
        with open(sdir / "flame.jsonl", "w") as fh:
            for pose in poses:
                fh.write(json.dumps(pose_to_json(pose)) + "\n")
        for i, pose in enumerate(poses):
            out = render_scene(scene, template, pose, camera)
            save_png(sdir / "frames" / f"{i:05d}.png", out.image)
            attr_only = render_scene(scene, template, pose, camera, subset=scene.attr_mask)
            mask = (attr_only.alpha > 0.5).to(torch.float64)
            save_png(sdir / "masks" / category / f"{i:05d}.png", mask)
        subject_rows.append({"id": sid, "category": category, "prompt": scene.prompt})

    meta = {
        "format": 1,
        "kind": "toy_dataset",
        "size": size,
        "n_frames": n_frames,
        "n_vertices": n_vertices,
        "seed": seed,
        "categories": sorted(set(r["category"] for r in subject_rows)),
        "camera": camera.to_json(),
        "subjects": subject_rows,
    }
    with open(root / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    return ToyDataset(root)


# -- loading -----------------------------------------------------------------------


class ToyDataset:
    """Reader for a dataset directory; tensors come out ready for training."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        meta_path = self.root / "meta.json"
        if not meta_path.exists():
            raise DatasetError(f"{self.root}: no meta.json (not a dataset directory)")
        with open(meta_path) as fh:
            self.meta = json.load(fh)
        if self.meta.get("kind") != "toy_dataset":
            raise DatasetError(f"{self.root}: meta.json is not a dataset manifest")
        self.size: int = self.meta["size"]
        self.n_frames: int = self.meta["n_frames"]
        self.camera = Camera.from_json(self.meta["camera"])
        self.subjects: dict[str, dict[str, str]] = {
            row["id"]: row for row in self.meta["subjects"]
        }
        self._poses: dict[str, list[FramePose]] = {}

    @property
    def subject_ids(self) -> list[str]:
        return sorted(self.subjects)

    def category_of(self, subject_id: str) -> str:
        return self._row(subject_id)["category"]

    def subjects_by_category(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for sid in self.subject_ids:
            out.setdefault(self.category_of(sid), []).append(sid)
        return out

    def _row(self, subject_id: str) -> dict[str, str]:
        if subject_id not in self.subjects:
            raise DatasetError(f"unknown subject {subject_id!r}")
        return self.subjects[subject_id]

    def _subject_dir(self, subject_id: str) -> Path:
        return self.root / "subjects" / self._row(subject_id)["id"]

    def template(self, dtype: torch.dtype = torch.float32) -> HeadTemplate:
        return HeadTemplate.load(self.root / "template.bin", dtype=dtype)

    def scene(self, subject_id: str, dtype: torch.dtype = torch.float64) -> ToyScene:
        return ToyScene.load(self._subject_dir(subject_id) / "scene.bin", dtype=dtype)

    def subject_meta(self, subject_id: str) -> SubjectMeta:
        row = self._row(subject_id)
        f_img, f_txt = subject_features(subject_id)
        return SubjectMeta(
            subject_id=subject_id,
            category=row["category"],
            prompt=row.get("prompt", ""),
            f_img=f_img,
            f_txt=f_txt,
        )

    def frame_image(self, subject_id: str, index: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        self._check_index(index)
        return load_png(self._subject_dir(subject_id) / "frames" / f"{index:05d}.png", dtype)

    def frame_mask(self, subject_id: str, index: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        self._check_index(index)
        cat = self.category_of(subject_id)
        return load_png(self._subject_dir(subject_id) / "masks" / cat / f"{index:05d}.png", dtype)

    def frame_pose(self, subject_id: str, index: int, dtype: torch.dtype = torch.float32) -> FramePose:
        self._check_index(index)
        if subject_id not in self._poses:
            rows = []
            with open(self._subject_dir(subject_id) / "flame.jsonl") as fh:
                for line in fh:
                    rows.append(pose_from_json(json.loads(line), dtype=torch.float64))
            if len(rows) != self.n_frames:
                raise DatasetError(
                    f"{subject_id}: flame.jsonl has {len(rows)} rows, expected {self.n_frames}"
                )
            self._poses[subject_id] = rows
        return self._poses[subject_id][index].to(dtype)

    def _check_index(self, index: int) -> None:
        if not 0 <= index < self.n_frames:
            raise DatasetError(f"frame index {index} outside [0, {self.n_frames})")


# -- morph pseudo ground truth -------------------------------------------------------


def dilate_mask(mask: torch.Tensor, px: int) -> torch.Tensor:
    """Binary dilation of an (H, W) mask by a square neighborhood."""
    if px <= 0:
        return (mask > 0.5).to(mask.dtype)
    m = (mask > 0.5).to(torch.float32)[None, None]
    m = F.max_pool2d(m, kernel_size=2 * px + 1, stride=1, padding=px)
    return (m[0, 0] > 0.5).to(mask.dtype)


def morph_pseudo_gt(
    img_a: torch.Tensor,
    img_b: torch.Tensor,
    mask_a: torch.Tensor,
    mask_b: torch.Tensor,
    alpha: float,
    dilate_px: int = 3,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-dissolve inside the dilated union of attribute regions.

    Outside the region the first image passes through untouched, so a
    supervision target built this way never teaches edits beyond the
    attribute's reach. Returns (target, region mask).
    """
    if img_a.shape != img_b.shape:
        raise DatasetError("morph inputs must share a shape")
    region = dilate_mask(
        ((mask_a > 0.5) | (mask_b > 0.5)).to(img_a.dtype), dilate_px
    ).to(img_a.dtype)
    blend = (1.0 - alpha) * img_a + alpha * img_b
    target = region[..., None] * blend + (1.0 - region[..., None]) * img_a
    return target, region
