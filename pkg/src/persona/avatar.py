"""Latent-conditioned Gaussian head avatar.

A single model renders one identity under a bank of switchable attributes
(hair, hat, beard, ...). The latent state is a matrix with one identity row
plus one row per attribute category; an "absent" attribute is the shared
learned empty row. Subject feature vectors (one image-derived, one
text-derived) are mapped into attribute rows by a small encoder, so every
training subject is addressed by its features rather than by a free latent.

Geometry: trainable generic points are offset into a styled canonical space
and a face-canonical space, per-point expression/pose-corrective bases and
skinning weights are predicted there, the articulated template machinery
poses the points, and a pose-conditioned head adds final attribute deltas:

    x^gc -> (+O1) x^sc -> (+O2) x^fc -> blendshapes + LBS -> x^d
    o/r/s/c from the styled canonical space, deltas from (x^d - x^fc)

The rotation delta composes with the skinning rotation extracted from the
blended linear map.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .container import load_container, save_container
from .gradcore import GradError, ParamStore
from .headmodel import (
    HeadTemplate,
    blend_shapes,
    compute_joints,
    knn_inverse_distance,
    lbs,
    lbs_rotation,
    pose_feature,
    pose_to_rotmats,
    quat_multiply,
    quat_normalize,
    relative_to_absolute,
)
from .rasterizer import Camera, RenderOutput, render


class AvatarError(RuntimeError):
    """Raised for unknown subjects/categories and malformed latent specs."""


CATEGORIES = (
    "beard",
    "clothes",
    "earrings",
    "eyebrows",
    "hair",
    "hat",
    "headphones",
    "mouth",
    "nose",
)


@dataclasses.dataclass
class ModelConfig:
    categories: tuple[str, ...] = CATEGORIES
    latent_dim: int = 64
    feature_dim: int = 512
    pe_bands: int = 6
    pe_scale: float = 10.0
    pe_delta_scale: float = 50.0
    pe_delta_bands: int = 4
    mlp_d: tuple[int, int] = (6, 256)  # (linear layers, width)
    mlp_c: tuple[int, int] = (4, 256)
    mlp_pose: tuple[int, int] = (3, 128)
    mlp_z: tuple[int, int] = (2, 256)
    scale_base: float = 0.004
    opacity_bias: float = 0.0  # pre-sigmoid shift; >0 starts splats mostly opaque
    delta_r: float = 0.05
    delta_s: float = 0.002
    delta_o: float = 0.1
    delta_c: float = 0.1
    lora_rank: int = 8
    seed: int = 0

    @classmethod
    def desk(
        cls, categories: tuple[str, ...] = CATEGORIES, seed: int = 0, **overrides: Any
    ) -> "ModelConfig":
        """Small preset that trains in CPU-minutes; used by tests."""
        cfg = cls(
            categories=tuple(categories),
            latent_dim=16,
            pe_bands=4,
            pe_delta_bands=3,
            mlp_d=(4, 128),
            mlp_c=(3, 96),
            mlp_pose=(2, 64),
            mlp_z=(2, 64),
            seed=seed,
        )
        return dataclasses.replace(cfg, **overrides)

    @property
    def n_rows(self) -> int:
        return len(self.categories) + 1

    def to_json(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["categories"] = list(self.categories)
        for k in ("mlp_d", "mlp_c", "mlp_pose", "mlp_z"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "ModelConfig":
        kw = dict(d)
        kw["categories"] = tuple(kw["categories"])
        for k in ("mlp_d", "mlp_c", "mlp_pose", "mlp_z"):
            kw[k] = tuple(kw[k])
        return cls(**kw)


@dataclasses.dataclass
class SubjectMeta:
    subject_id: str
    category: str
    prompt: str
    f_img: np.ndarray  # (feature_dim,)
    f_txt: np.ndarray  # (feature_dim,)


@dataclasses.dataclass
class FramePose:
    beta: torch.Tensor
    theta: torch.Tensor
    psi: torch.Tensor

    def to(self, dtype: torch.dtype) -> "FramePose":
        return FramePose(self.beta.to(dtype), self.theta.to(dtype), self.psi.to(dtype))

    @classmethod
    def rest(cls, template: HeadTemplate, dtype: torch.dtype) -> "FramePose":
        return cls(
            beta=torch.zeros(template.n_shape, dtype=dtype),
            theta=torch.zeros(template.n_joints * 3, dtype=dtype),
            psi=torch.zeros(template.n_expr, dtype=dtype),
        )


def positional_encoding(x: torch.Tensor, bands: int, scale: float) -> torch.Tensor:
    """[x, sin(2^l pi s x), cos(2^l pi s x)] for l = 0..bands-1."""
    parts = [x]
    for l in range(bands):
        arg = (2.0**l) * math.pi * scale * x
        parts.append(torch.sin(arg))
        parts.append(torch.cos(arg))
    return torch.cat(parts, dim=-1)


def pe_dim(bands: int) -> int:
    return 3 * (1 + 2 * bands)


class AvatarModel:
    """Parameter owner plus the full differentiable forward chain."""

    def __init__(
        self,
        config: ModelConfig,
        template: HeadTemplate,
        dtype: torch.dtype = torch.float32,
        point_cap: int | None = None,
    ) -> None:
        self.config = config
        self.dtype = dtype
        self.template = template.to(dtype)
        t = self.template
        # stacked per-vertex fields, interpolated once per forward at x_fc
        self._tmpl_fields = torch.cat(
            [
                t.shape_basis.reshape(t.n_vertices, -1),
                t.expr_basis.reshape(t.n_vertices, -1),
                t.pose_basis.reshape(t.n_vertices, -1),
                t.lbs_weights,
            ],
            dim=-1,
        )
        self.store = ParamStore()
        self.subjects: dict[str, SubjectMeta] = {}
        self._gen = torch.Generator().manual_seed(config.seed)
        self._mlp_layers: dict[str, int] = {}
        self._build_params(point_cap)

    # -- construction --------------------------------------------------

    def _build_params(self, point_cap: int | None) -> None:
        cfg = self.config
        pts = self.template.vertices.clone()
        if point_cap is not None and pts.shape[0] > point_cap:
            pts = pts[:point_cap]
        self.store.register("points", pts)
        self.store.register("scale_gain", torch.ones(pts.shape[0], dtype=self.dtype), trainable=False)
        self.store.register("z_id", 0.01 * self._randn((cfg.latent_dim,)))
        self.store.register("z_zero", torch.zeros(cfg.latent_dim, dtype=self.dtype))

        z_in = cfg.n_rows * cfg.latent_dim
        n_expr, n_posef, n_joints = self.template.n_expr, self.template.n_pose_feat, self.template.n_joints
        d_out = 3 + 3 + 3 * n_expr + 3 * n_posef + n_joints
        self._init_mlp("mlp_d", pe_dim(cfg.pe_bands) + z_in, cfg.mlp_d, d_out, zero_last=True)
        self._init_mlp("mlp_c", pe_dim(cfg.pe_bands) + z_in, cfg.mlp_c, 1 + 4 + 3 + 3, zero_last=True)
        pose_in = 3 * (1 + 2 * cfg.pe_delta_bands) + z_in
        self._init_mlp("mlp_pose", pose_in, cfg.mlp_pose, 4 + 3 + 1 + 3, zero_last=True)
        self._init_mlp("mlp_z", 2 * cfg.feature_dim, cfg.mlp_z, cfg.latent_dim, last_scale=0.01)

    def _randn(self, shape: tuple[int, ...]) -> torch.Tensor:
        return torch.randn(shape, generator=self._gen, dtype=torch.float64).to(self.dtype)

    def _init_mlp(
        self, name: str, n_in: int, spec: tuple[int, int], n_out: int,
        zero_last: bool = False, last_scale: float = 1.0,
    ) -> None:
        layers, width = spec
        dims = [n_in] + [width] * (layers - 1) + [n_out]
        for i in range(layers):
            fan_in = dims[i]
            w = self._randn((dims[i + 1], fan_in)) * math.sqrt(2.0 / fan_in)
            if i == layers - 1:
                w = torch.zeros_like(w) if zero_last else w * last_scale
            self.store.register(f"{name}.{i}.w", w)
            self.store.register(f"{name}.{i}.b", torch.zeros(dims[i + 1], dtype=self.dtype))
        self._mlp_layers[name] = layers

    def _mlp(self, name: str, x: torch.Tensor, use_lora: bool = False) -> torch.Tensor:
        layers = self._mlp_layers[name]
        for i in range(layers):
            w = self.store[f"{name}.{i}.w"]
            b = self.store[f"{name}.{i}.b"]
            y = x @ w.T + b
            down_name = f"lora.{name}.{i}.down"
            if use_lora and down_name in self.store:
                down = self.store[down_name]
                up = self.store[f"lora.{name}.{i}.up"]
                y = y + (x @ down.T) @ up.T * (1.0 / self.config.lora_rank)
            x = F.relu(y) if i < layers - 1 else y
        return x

    @property
    def n_points(self) -> int:
        return self.store["points"].shape[0]

    # -- latent codes ----------------------------------------------------

    def add_subject(self, meta: SubjectMeta) -> None:
        if meta.category not in self.config.categories:
            raise AvatarError(f"unknown category {meta.category!r}")
        want = self.config.feature_dim
        for kind, feat in (("image", meta.f_img), ("text", meta.f_txt)):
            got = np.asarray(feat).size
            if got != want:
                raise AvatarError(
                    f"{meta.subject_id}: {kind} feature has {got} values, "
                    f"model expects {want}"
                )
        self.subjects[meta.subject_id] = meta

    def category_row(self, category: str) -> int:
        try:
            return 1 + self.config.categories.index(category)
        except ValueError:
            raise AvatarError(f"unknown category {category!r}") from None

    def subject_latent(self, subject_id: str, use_lora: bool = False) -> torch.Tensor:
        """Attribute row of one subject, through the feature encoder."""
        meta = self._subject(subject_id)
        feats = torch.cat(
            [
                torch.as_tensor(meta.f_img, dtype=self.dtype),
                torch.as_tensor(meta.f_txt, dtype=self.dtype),
            ]
        )
        return self._mlp("mlp_z", feats[None], use_lora=use_lora)[0]

    def reference_code(self) -> torch.Tensor:
        """Identity with every attribute slot empty."""
        rows = [self.store["z_id"]] + [self.store["z_zero"]] * len(self.config.categories)
        return torch.stack(rows)

    def subject_code(self, subject_id: str, use_lora: bool = False) -> torch.Tensor:
        meta = self._subject(subject_id)
        code = self.reference_code()
        row = self.category_row(meta.category)
        z_k = self.subject_latent(subject_id, use_lora=use_lora)
        return torch.cat([code[:row], z_k[None], code[row + 1 :]], dim=0)

    def swap_code(self, code: torch.Tensor, category: str, row_value: torch.Tensor) -> torch.Tensor:
        row = self.category_row(category)
        return torch.cat([code[:row], row_value[None], code[row + 1 :]], dim=0)

    @staticmethod
    def interpolate_codes(a: torch.Tensor, b: torch.Tensor, alpha: float) -> torch.Tensor:
        return (1.0 - alpha) * a + alpha * b

    def resolve_latent(self, spec: str) -> torch.Tensor:
        """Parse a latent spec string into a code matrix.

        Forms: ``subject:<id>``, ``swap:<id>:<category>=<id|zero>``,
        ``lerp:<id>:<id>:<alpha>``.
        """
        parts = spec.split(":")
        if parts[0] == "subject" and len(parts) == 2:
            return self.subject_code(parts[1])
        if parts[0] == "swap" and len(parts) == 3 and "=" in parts[2]:
            category, target = parts[2].split("=", 1)
            base = self.subject_code(parts[1])
            if target == "zero":
                return self.swap_code(base, category, self.store["z_zero"])
            tgt_meta = self._subject(target)
            if tgt_meta.category != category:
                raise AvatarError(
                    f"subject {target!r} holds {tgt_meta.category!r}, not {category!r}"
                )
            return self.swap_code(base, category, self.subject_latent(target))
        if parts[0] == "lerp" and len(parts) == 4:
            try:
                alpha = float(parts[3])
            except ValueError:
                raise AvatarError(f"bad alpha {parts[3]!r}") from None
            if not 0.0 <= alpha <= 1.0:
                raise AvatarError(f"alpha {alpha} outside [0, 1]")
            return self.interpolate_codes(
                self.subject_code(parts[1]), self.subject_code(parts[2]), alpha
            )
        raise AvatarError(f"cannot parse latent spec {spec!r}")

    def _subject(self, subject_id: str) -> SubjectMeta:
        if subject_id not in self.subjects:
            raise AvatarError(f"unknown subject {subject_id!r}")
        return self.subjects[subject_id]

    # -- forward ---------------------------------------------------------

    def forward(
        self,
        code: torch.Tensor,
        pose: FramePose,
        warm_up: bool = False,
        use_lora: bool = False,
    ) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
        """Compose the final Gaussian set for one latent code and pose.

        Returns (attrs, aux): attrs has x (N,3), r (N,4), o (N,), s (N,3),
        c (N,3); aux carries the intermediate spaces and per-point bases for
        regularization. ``warm_up`` bypasses the pose-delta head entirely.
        """
        cfg = self.config
        if tuple(code.shape) != (cfg.n_rows, cfg.latent_dim):
            raise AvatarError(
                f"latent code must be {(cfg.n_rows, cfg.latent_dim)}, got {tuple(code.shape)}"
            )
        tmpl = self.template
        pose = pose.to(self.dtype)
        x_gc = self.store["points"]
        n = x_gc.shape[0]
        z_flat = code.reshape(-1)[None].expand(n, -1)

        pe_gc = positional_encoding(x_gc, cfg.pe_bands, cfg.pe_scale)
        d_out = self._mlp("mlp_d", torch.cat([pe_gc, z_flat], dim=-1), use_lora)
        n_e, n_p, n_j = tmpl.n_expr, tmpl.n_pose_feat, tmpl.n_joints
        o1, o2, e_flat, p_flat, w_logits = torch.split(
            d_out, [3, 3, 3 * n_e, 3 * n_p, n_j], dim=-1
        )

        x_sc = x_gc + o1
        x_fc = x_sc + o2

        # deformation fields are residuals on template interpolants, so the
        # articulation chain is template-consistent from the first step and
        # the heads only learn deviations (differentiable through the knn)
        fields = knn_inverse_distance(x_fc, tmpl.vertices, self._tmpl_fields)
        n_s = tmpl.n_shape
        shape_f, expr_f, pose_f, skin_f = torch.split(
            fields, [3 * n_s, 3 * n_e, 3 * n_p, n_j], dim=-1
        )
        shape_basis = shape_f.reshape(n, 3, n_s)
        expr_basis = e_flat.reshape(n, 3, n_e) + expr_f.reshape(n, 3, n_e)
        pose_basis = p_flat.reshape(n, 3, n_p) + pose_f.reshape(n, 3, n_p)
        skin_w = F.softmax(w_logits + torch.log(skin_f.clamp_min(1e-8)), dim=-1)

        pe_sc = positional_encoding(x_sc, cfg.pe_bands, cfg.pe_scale)
        c_out = self._mlp("mlp_c", torch.cat([pe_sc, z_flat], dim=-1), use_lora)
        o_raw, r_raw, s_raw, c_raw = torch.split(c_out, [1, 4, 3, 3], dim=-1)
        e0 = torch.cat([torch.ones(1, dtype=self.dtype), torch.zeros(3, dtype=self.dtype)])
        o_sc = torch.sigmoid(o_raw + cfg.opacity_bias)[:, 0]
        r_sc = quat_normalize(r_raw + e0)
        s_sc = cfg.scale_base * torch.exp(s_raw) * self.store["scale_gain"][:, None]
        c_sc = torch.sigmoid(c_raw)

        rotmats = pose_to_rotmats(pose.theta, n_j)
        feat = pose_feature(rotmats)
        x_dm = (
            x_fc
            + blend_shapes(pose.beta, shape_basis)
            + blend_shapes(feat, pose_basis)
            + blend_shapes(pose.psi, expr_basis)
        )
        joints = compute_joints(tmpl, pose.beta)
        rot, trans = relative_to_absolute(rotmats, joints, tmpl.parents)
        x_d, amat = lbs(x_dm, skin_w, rot, trans)
        r_skin = lbs_rotation(amat)

        if warm_up:
            d_r = torch.zeros(n, 4, dtype=self.dtype)
            d_s = torch.zeros(n, 3, dtype=self.dtype)
            d_o = torch.zeros(n, dtype=self.dtype)
            d_c = torch.zeros(n, 3, dtype=self.dtype)
        else:
            pe_delta = positional_encoding(
                x_d - x_fc, cfg.pe_delta_bands, cfg.pe_delta_scale
            )
            p_out = self._mlp("mlp_pose", torch.cat([pe_delta, z_flat], dim=-1), use_lora)
            dr_raw, ds_raw, do_raw, dc_raw = torch.split(p_out, [4, 3, 1, 3], dim=-1)
            d_r = cfg.delta_r * torch.tanh(dr_raw)
            d_s = cfg.delta_s * torch.tanh(ds_raw)
            d_o = cfg.delta_o * torch.tanh(do_raw)[:, 0]
            d_c = cfg.delta_c * torch.tanh(dc_raw)

        attrs = {
            "x": x_d,
            "r": quat_normalize(d_r + quat_multiply(r_skin, r_sc)),
            "o": (d_o + o_sc).clamp(0.0, 1.0),
            "s": (d_s + s_sc).clamp_min(1e-6),
            "c": (d_c + c_sc).clamp(0.0, 1.0),
        }
        aux = {
            "x_gc": x_gc, "x_sc": x_sc, "x_fc": x_fc,
            "expr_basis": expr_basis, "pose_basis": pose_basis, "skin_w": skin_w,
            "o_sc": o_sc, "r_sc": r_sc, "s_sc": s_sc, "c_sc": c_sc, "amat": amat,
        }
        return attrs, aux

    def flame_targets(self, x_fc: torch.Tensor) -> dict[str, torch.Tensor]:
        """Template-interpolated per-point targets; constants w.r.t. the graph."""
        tmpl = self.template
        v = tmpl.n_vertices
        stacked = torch.cat(
            [
                tmpl.expr_basis.reshape(v, -1),
                tmpl.pose_basis.reshape(v, -1),
                tmpl.lbs_weights,
            ],
            dim=-1,
        )
        out = knn_inverse_distance(x_fc.detach(), tmpl.vertices, stacked)
        n = out.shape[0]
        n_e, n_p = 3 * tmpl.n_expr, 3 * tmpl.n_pose_feat
        expr, pose, skin = torch.split(out, [n_e, n_p, tmpl.n_joints], dim=-1)
        return {
            "expr": expr.reshape(n, 3, tmpl.n_expr),
            "pose": pose.reshape(n, 3, tmpl.n_pose_feat),
            "skin": skin,
        }

    def render(
        self,
        code: torch.Tensor,
        pose: FramePose,
        camera: Camera,
        background: torch.Tensor | None = None,
        warm_up: bool = False,
        use_lora: bool = False,
    ) -> tuple[RenderOutput, dict[str, torch.Tensor], dict[str, torch.Tensor]]:
        attrs, aux = self.forward(code, pose, warm_up=warm_up, use_lora=use_lora)
        out = render(
            attrs["x"], attrs["r"], attrs["s"], attrs["o"], attrs["c"], camera, background
        )
        return out, attrs, aux

    # -- adapters ----------------------------------------------------------

    LORA_TARGETS = ("mlp_d", "mlp_c")

    def add_lora(self, seed: int = 0) -> list[str]:
        """Attach zero-initialized low-rank adapters to the geometry heads."""
        gen = torch.Generator().manual_seed(seed)
        rank = self.config.lora_rank
        names: list[str] = []
        for mlp in self.LORA_TARGETS:
            for i in range(self._mlp_layers[mlp]):
                w = self.store[f"{mlp}.{i}.w"]
                n_out, n_in = w.shape
                down = torch.randn(rank, n_in, generator=gen, dtype=torch.float64)
                down = (down / math.sqrt(n_in)).to(self.dtype)
                self.store.register(f"lora.{mlp}.{i}.down", down)
                self.store.register(f"lora.{mlp}.{i}.up", torch.zeros(n_out, rank, dtype=self.dtype))
                names += [f"lora.{mlp}.{i}.down", f"lora.{mlp}.{i}.up"]
        return names

    def lora_names(self) -> list[str]:
        return [n for n in self.store.names() if n.startswith("lora.")]

    def base_names(self) -> list[str]:
        return [n for n in self.store.names() if not n.startswith("lora.")]

    def freeze_base(self) -> None:
        for n in self.base_names():
            if self.store[n].is_floating_point():
                self.store.set_trainable(n, False)

    # -- point-set surgery -------------------------------------------------

    def replace_points(self, new_points: torch.Tensor, new_gain: torch.Tensor) -> None:
        if new_points.shape[0] != new_gain.shape[0]:
            raise AvatarError("points/gain length mismatch")
        self.store.replace("points", new_points.to(self.dtype))
        self.store.replace("scale_gain", new_gain.to(self.dtype), trainable=False)

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path, extra_meta: dict[str, Any] | None = None,
             extra_tensors: dict[str, np.ndarray] | None = None) -> None:
        tensors = {f"param.{k}": v for k, v in self.store.export().items()}
        for f in dataclasses.fields(self.template):
            tensors[f"template.{f.name}"] = getattr(self.template, f.name).detach().cpu().numpy()
        subject_rows = []
        for sid, meta in sorted(self.subjects.items()):
            tensors[f"feat.img.{sid}"] = np.asarray(meta.f_img, dtype=np.float32)
            tensors[f"feat.txt.{sid}"] = np.asarray(meta.f_txt, dtype=np.float32)
            subject_rows.append(
                {"id": sid, "category": meta.category, "prompt": meta.prompt}
            )
        if extra_tensors:
            tensors.update(extra_tensors)
        meta = {
            "kind": "avatar_model",
            "config": self.config.to_json(),
            "subjects": subject_rows,
            "trainable": self.store.trainable_names(),
            "dtype": "f64" if self.dtype == torch.float64 else "f32",
        }
        if extra_meta:
            meta.update(extra_meta)
        save_container(path, tensors, meta)

    @classmethod
    def load(cls, path: str | Path) -> tuple["AvatarModel", dict[str, np.ndarray], dict[str, Any]]:
        """Rebuild a model; returns (model, non-model tensors, meta)."""
        tensors, meta = load_container(path)
        if meta.get("kind") != "avatar_model":
            raise AvatarError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
        config = ModelConfig.from_json(meta["config"])
        dtype = torch.float64 if meta.get("dtype") == "f64" else torch.float32
        tmpl_kwargs = {}
        for f in dataclasses.fields(HeadTemplate):
            t = torch.as_tensor(tensors.pop(f"template.{f.name}"))
            tmpl_kwargs[f.name] = t.to(dtype) if t.is_floating_point() else t.long()
        template = HeadTemplate(**tmpl_kwargs)
        model = cls(config, template, dtype=dtype)

        params = {}
        for key in list(tensors):
            if key.startswith("param."):
                params[key[len("param.") :]] = tensors.pop(key)
        lora_names = [n for n in params if n.startswith("lora.")]
        if lora_names and not model.lora_names():
            model.add_lora(seed=config.seed)
        model.store.load(params)
        trainable = set(meta.get("trainable", []))
        for n in model.store.names():
            if model.store[n].is_floating_point():
                model.store.set_trainable(n, n in trainable)

        for row in meta.get("subjects", []):
            sid = row["id"]
            model.add_subject(
                SubjectMeta(
                    subject_id=sid,
                    category=row["category"],
                    prompt=row.get("prompt", ""),
                    f_img=tensors.pop(f"feat.img.{sid}"),
                    f_txt=tensors.pop(f"feat.txt.{sid}"),
                )
            )
        return model, tensors, meta
