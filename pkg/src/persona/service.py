"""Read-only HTTP render service for the interactive editor.

Versioned JSON API under ``/api/v1``: a manifest describing the loaded model,
plus render/interpolate/swap endpoints that evaluate the model for a latent
spec and pose. The snapshot is immutable while served; identical requests
produce bitwise-identical PNGs (and hit an LRU cache).
"""

from __future__ import annotations

import base64
import io
import json
import os
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel, Field

from .avatar import AvatarError, AvatarModel, FramePose
from .dataset import ToyDataset, pose_from_json, quantize_u8
from .rasterizer import Camera

DEFAULT_BIND = "127.0.0.1:8000"


def resolve_bind(bind: str | None) -> tuple[str, int]:
    raw = bind or os.environ.get("PERSONA_BIND") or DEFAULT_BIND
    host, sep, port = raw.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"bind address must be host:port, got {raw!r}")
    return host or "127.0.0.1", int(port)


def scale_camera(cam: Camera, size: int) -> Camera:
    """Resize a camera to a square output, preserving the field of view."""
    if size == cam.width and size == cam.height:
        return cam
    sx, sy = size / cam.width, size / cam.height
    return Camera(
        width=size,
        height=size,
        fx=cam.fx * sx,
        fy=cam.fy * sy,
        cx=(cam.cx + 0.5) * sx - 0.5,
        cy=(cam.cy + 0.5) * sy - 0.5,
        rotation=cam.rotation,
        translation=cam.translation,
        near=cam.near,
        far=cam.far,
    )


def png_bytes(image: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(quantize_u8(image), "RGB").save(buf, format="PNG")
    return buf.getvalue()


# -- request schemas -----------------------------------------------------------


class RenderRequest(BaseModel):
    latent: str
    pose: dict[str, Any] | str | None = None
    camera: dict[str, Any] | None = None
    size: int | None = Field(default=None, ge=1)


class InterpolateRequest(BaseModel):
    a: str
    b: str
    alphas: list[float]
    pose: dict[str, Any] | str | None = None
    size: int | None = Field(default=None, ge=1)


class SwapRequest(BaseModel):
    ref: str
    part: str
    target: str
    pose: dict[str, Any] | str | None = None
    size: int | None = Field(default=None, ge=1)


# -- snapshot --------------------------------------------------------------------


@dataclass
class PosePreset:
    name: str
    pose: FramePose


class ModelSnapshot:
    """Immutable trained model plus the pose/camera presets it serves."""

    def __init__(
        self,
        model: AvatarModel,
        poses: list[PosePreset],
        camera: Camera,
        max_size: int = 512,
        cache_size: int = 64,
    ) -> None:
        torch.set_num_threads(1)
        self.model = model
        self.poses = {p.name: p.pose for p in poses}
        self.pose_names = [p.name for p in poses]
        self.camera = camera
        self.max_size = max_size
        self._cache: OrderedDict[str, bytes] = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()

    # -- request resolution ----------------------------------------------------

    def check_subject(self, subject_id: str) -> None:
        if subject_id not in self.model.subjects:
            raise HTTPException(404, f"unknown subject {subject_id!r}")

    def validate_spec(self, spec: str) -> None:
        """Classify latent-spec failures before evaluation.

        Grammar errors are 400, unknown subjects/parts 404, out-of-range
        interpolation weights 422.
        """
        head, _, rest = spec.partition(":")
        if head == "subject":
            self.check_subject(rest)
        elif head == "swap":
            ref, sep, assign = rest.partition(":")
            if not sep or "=" not in assign:
                raise HTTPException(400, f"malformed latent spec {spec!r}")
            part, target = assign.split("=", 1)
            self.check_subject(ref)
            if part not in self.model.config.categories:
                raise HTTPException(404, f"unknown part {part!r}")
            if target != "zero":
                self.check_subject(target)
        elif head == "lerp":
            parts = rest.split(":")
            if len(parts) != 3:
                raise HTTPException(400, f"malformed latent spec {spec!r}")
            a, b, alpha_raw = parts
            try:
                alpha = float(alpha_raw)
            except ValueError:
                raise HTTPException(400, f"interpolation weight {alpha_raw!r} is not a number")
            self.check_subject(a)
            self.check_subject(b)
            if not 0.0 <= alpha <= 1.0:
                raise HTTPException(422, f"interpolation weight {alpha} outside [0, 1]")
        else:
            raise HTTPException(400, f"malformed latent spec {spec!r}")

    def resolve_pose(self, pose: dict[str, Any] | str | None) -> tuple[str, FramePose]:
        """Pose selector: preset name, {'preset': name}, or explicit fields."""
        if pose is None:
            pose = "rest"
        if isinstance(pose, str):
            pose = {"preset": pose}
        if "preset" in pose:
            name = pose["preset"]
            if name not in self.poses:
                raise HTTPException(404, f"unknown pose preset {name!r}")
            return name, self.poses[name]
        if not {"beta", "theta", "psi"} <= set(pose):
            raise HTTPException(422, "pose needs a preset or beta/theta/psi arrays")
        t = self.model.template
        dims = {"beta": t.n_shape, "theta": t.n_joints * 3, "psi": t.n_expr}
        for key, want in dims.items():
            got = len(pose[key])
            if got != want:
                raise HTTPException(422, f"pose.{key} needs {want} values, got {got}")
        fp = pose_from_json(pose, dtype=self.model.dtype)
        key = json.dumps({k: pose[k] for k in ("beta", "theta", "psi")}, sort_keys=True)
        return key, fp

    def resolve_camera(self, camera: dict[str, Any] | None, size: int | None) -> tuple[str, Camera]:
        if camera is not None:
            cam = Camera.from_json(camera)
            if size is not None:
                cam = scale_camera(cam, size)
        else:
            cam = scale_camera(self.camera, size) if size is not None else self.camera
        if cam.width > self.max_size or cam.height > self.max_size:
            raise HTTPException(413, f"image size {cam.width}x{cam.height} exceeds max {self.max_size}")
        return json.dumps(cam.to_json(), sort_keys=True), cam

    # -- rendering ----------------------------------------------------------------

    def render_png(self, spec: str, pose_sel: dict[str, Any] | str | None, camera_sel: dict[str, Any] | None, size: int | None) -> bytes:
        self.validate_spec(spec)
        pose_key, pose = self.resolve_pose(pose_sel)
        cam_key, cam = self.resolve_camera(camera_sel, size)
        cache_key = f"{spec}|{pose_key}|{cam_key}"
        with self._lock:
            if cache_key in self._cache:
                self._cache.move_to_end(cache_key)
                return self._cache[cache_key]
        try:
            code = self.model.resolve_latent(spec)
        except AvatarError as exc:
            raise HTTPException(400, str(exc))
        with torch.no_grad():
            out, _, _ = self.model.render(code, pose, cam)
        data = png_bytes(out.image)
        with self._lock:
            self._cache[cache_key] = data
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return data

    def manifest(self) -> dict[str, Any]:
        subjects = [
            {"id": sid, "category": meta.category, "prompt": meta.prompt}
            for sid, meta in sorted(self.model.subjects.items())
        ]
        return {
            "schema": "persona/1",
            "subjects": subjects,
            "parts": list(self.model.config.categories),
            "latent_dim": self.model.config.latent_dim,
            "latent_rows": self.model.config.n_rows,
            "poses": self.pose_names,
            "n_points": self.model.n_points,
            "default_size": self.camera.width,
            "max_size": self.max_size,
        }


# -- app ------------------------------------------------------------------------------


def load_snapshot(
    checkpoint: str | Path,
    data_root: str | Path | None = None,
    max_size: int = 512,
    cache_size: int = 64,
) -> ModelSnapshot:
    model, _, _ = AvatarModel.load(checkpoint)
    poses = [PosePreset("rest", FramePose.rest(model.template, model.dtype))]
    if data_root is not None:
        ds = ToyDataset(data_root)
        for sid in ds.subject_ids:
            if sid not in model.subjects:
                model.add_subject(ds.subject_meta(sid))
        camera = ds.camera
        ref = ds.subject_ids[0]
        poses += [
            PosePreset(f"frame:{i}", ds.frame_pose(ref, i, model.dtype))
            for i in range(ds.n_frames)
        ]
    else:
        camera = Camera.front_facing(128)
    return ModelSnapshot(model, poses, camera, max_size=max_size, cache_size=cache_size)


def build_app(
    checkpoint: str | Path,
    data_root: str | Path | None = None,
    max_size: int = 512,
    cache_size: int = 64,
    static_dir: str | Path | None = None,
) -> FastAPI:
    snap = load_snapshot(checkpoint, data_root, max_size=max_size, cache_size=cache_size)
    app = FastAPI(title="persona render service", version="1")
    app.state.snapshot = snap

    @app.exception_handler(AvatarError)
    async def avatar_error(_req: Request, exc: AvatarError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    def png_response(data: bytes, started: float) -> Response:
        return Response(
            content=data,
            media_type="image/png",
            headers={"render-time-ms": f"{(time.perf_counter() - started) * 1000:.1f}"},
        )

    @app.get("/api/v1/manifest")
    def manifest() -> dict[str, Any]:
        return snap.manifest()

    @app.post("/api/v1/render")
    def render(req: RenderRequest) -> Response:
        t0 = time.perf_counter()
        data = snap.render_png(req.latent, req.pose, req.camera, req.size)
        return png_response(data, t0)

    @app.post("/api/v1/interpolate")
    def interpolate(req: InterpolateRequest) -> dict[str, Any]:
        snap.check_subject(req.a)
        snap.check_subject(req.b)
        for alpha in req.alphas:
            if not 0.0 <= alpha <= 1.0:
                raise HTTPException(422, f"interpolation weight {alpha} outside [0, 1]")
        frames = []
        for alpha in req.alphas:
            if alpha == 0.0:
                spec = f"subject:{req.a}"
            elif alpha == 1.0:
                spec = f"subject:{req.b}"
            else:
                spec = f"lerp:{req.a}:{req.b}:{alpha!r}"
            data = snap.render_png(spec, req.pose, None, req.size)
            frames.append(base64.b64encode(data).decode("ascii"))
        return {"frames": frames, "alphas": req.alphas}

    @app.post("/api/v1/swap")
    def swap(req: SwapRequest) -> Response:
        t0 = time.perf_counter()
        spec = f"swap:{req.ref}:{req.part}={req.target}"
        data = snap.render_png(spec, req.pose, None, req.size)
        return png_response(data, t0)

    if static_dir is not None:
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="viewer")

    return app
