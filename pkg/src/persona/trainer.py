"""Training loop for the latent avatar.

Single-frame steps over (subject, frame) pairs with Adam, a warm-up phase
that disables pose-conditioned deltas, and a periodic point-schedule event:
shrink every canonical scale by a fixed factor, prune points whose composed
opacity stays low for every training subject, then refill to the point cap
with jittered copies of survivors. All stochasticity (step order, refill
choices) flows through one numpy generator whose state is checkpointed, so
a resumed run reproduces an uninterrupted one bit for bit.
"""

from __future__ import annotations

import dataclasses
import time
from itertools import combinations
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from .avatar import AvatarModel, FramePose, ModelConfig
from .dataset import ToyDataset, morph_pseudo_gt
from .gradcore import Adam, backward
from .losses import LossWeights, lora_3d_loss, masked_recon_loss, recon_loss, training_loss
from .metrics import ConvFeatures, alpha_grid, psnr


class TrainError(RuntimeError):
    """Raised for inconsistent trainer state and bad resume data."""


@dataclasses.dataclass
class TrainConfig:
    preset: str = "desk"
    epochs: int = 10
    warm_up_epochs: int = 1
    point_cap: int = 2000
    densify_every: int = 5
    prune_opacity: float = 0.5
    shrink_factor: float = 0.75
    refill_radius: float = 0.004
    lr_model: float = 5e-4
    lr_latent: float = 5e-4
    lr_points: float = 1e-4
    lr_lora: float = 1e-4
    lr_decay: float = 0.5
    lr_milestones: tuple[float, float] = (0.6, 0.85)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    holdout_stride: int = 5
    perceptual_seed: int = 0
    seed: int = 0
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)

    @classmethod
    def desk(cls, **overrides: Any) -> "TrainConfig":
        return cls(preset="desk", **overrides)

    @classmethod
    def paper(cls, **overrides: Any) -> "TrainConfig":
        base = dict(preset="paper", epochs=60, point_cap=130_000, densify_every=5)
        base.update(overrides)
        return cls(**base)

    def to_json(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["adam_betas"] = list(self.adam_betas)
        d["weights"] = dataclasses.asdict(self.weights)
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "TrainConfig":
        kw = dict(d)
        kw["lr_milestones"] = tuple(kw["lr_milestones"])
        if "adam_betas" in kw:
            kw["adam_betas"] = tuple(kw["adam_betas"])
        kw["weights"] = LossWeights(**kw["weights"])
        return cls(**kw)


class Trainer:
    def __init__(
        self,
        model: AvatarModel,
        dataset: ToyDataset,
        config: TrainConfig,
        provider: ConvFeatures | None = None,
    ) -> None:
        torch.set_num_threads(1)
        self.model = model
        self.ds = dataset
        self.cfg = config
        self.provider = provider or ConvFeatures.random(config.perceptual_seed)
        self.rng = np.random.default_rng(config.seed)
        for sid in dataset.subject_ids:
            if sid not in model.subjects:
                model.add_subject(dataset.subject_meta(sid))
        lr_table = {n: self._group_lr(n) for n in model.store.trainable_names()}
        self.opt = Adam(model.store, lr=lr_table, betas=config.adam_betas)
        self.epoch = 0
        self.global_step = 0
        self.history: list[dict[str, float]] = []
        self.events: list[dict[str, Any]] = []

    def _group_lr(self, name: str) -> float:
        if name == "points":
            return self.cfg.lr_points
        if name.startswith("lora."):
            return self.cfg.lr_lora
        if name.startswith(("z_id", "z_zero", "mlp_z")):
            return self.cfg.lr_latent
        return self.cfg.lr_model

    # -- frame splits ------------------------------------------------------

    @property
    def holdout_frames(self) -> list[int]:
        s = self.cfg.holdout_stride
        if s <= 1:
            return []
        return [i for i in range(self.ds.n_frames) if i % s == s // 2]

    @property
    def train_frames(self) -> list[int]:
        hold = set(self.holdout_frames)
        return [i for i in range(self.ds.n_frames) if i not in hold]

    # -- steps -------------------------------------------------------------

    def training_step(self, subject_id: str, frame: int, warm_up: bool) -> dict[str, float]:
        model = self.model
        code = model.subject_code(subject_id)
        target = self.ds.frame_image(subject_id, frame, model.dtype)
        pose = self.ds.frame_pose(subject_id, frame, model.dtype)
        out, _, aux = model.render(code, pose, self.ds.camera, warm_up=warm_up)
        flame_pred = {
            "expr": aux["expr_basis"],
            "pose": aux["pose_basis"],
            "skin": aux["skin_w"],
        }
        flame_tgt = model.flame_targets(aux["x_fc"])
        total, logs = training_loss(
            out.image, target, flame_pred, flame_tgt, code, self.provider, self.cfg.weights
        )
        grads = backward(total, model.store)
        self.opt.step(grads)
        self.global_step += 1
        return logs

    def train_epoch(self, on_step: Callable[[int, dict[str, float]], None] | None = None) -> dict[str, float]:
        warm = self.epoch < self.cfg.warm_up_epochs
        pairs = [(sid, f) for sid in self.ds.subject_ids for f in self.train_frames]
        order = self.rng.permutation(len(pairs))
        sums: dict[str, float] = {}
        t0 = time.time()
        for n, i in enumerate(order):
            sid, frame = pairs[int(i)]
            logs = self.training_step(sid, frame, warm)
            for k, v in logs.items():
                sums[k] = sums.get(k, 0.0) + v
            if on_step is not None:
                on_step(n, logs)
        self.epoch += 1

        milestones = {max(1, int(round(m * self.cfg.epochs))) for m in self.cfg.lr_milestones}
        if self.epoch in milestones:
            self.opt.lr_scale *= self.cfg.lr_decay

        if (
            self.cfg.densify_every > 0
            and self.epoch % self.cfg.densify_every == 0
            and self.epoch < self.cfg.epochs
        ):
            self.densify()

        entry = {k: v / max(len(order), 1) for k, v in sums.items()}
        entry.update(
            epoch=float(self.epoch),
            seconds=time.time() - t0,
            n_points=float(self.model.n_points),
            lr_scale=self.opt.lr_scale,
            warm_up=float(warm),
        )
        self.history.append(entry)
        return entry

    def fit(
        self,
        epochs: int | None = None,
        on_epoch: Callable[[dict[str, float]], None] | None = None,
    ) -> list[dict[str, float]]:
        target = self.cfg.epochs if epochs is None else self.epoch + epochs
        while self.epoch < target:
            entry = self.train_epoch()
            if on_epoch is not None:
                on_epoch(entry)
        return self.history

    # -- point schedule ------------------------------------------------------

    def max_subject_opacity(self) -> torch.Tensor:
        """Composed rest-pose opacity, maximized over training subjects."""
        model = self.model
        pose = FramePose.rest(model.template, model.dtype)
        o_max: torch.Tensor | None = None
        with torch.no_grad():
            for sid in self.ds.subject_ids:
                attrs, _ = model.forward(model.subject_code(sid), pose, warm_up=True)
                o = attrs["o"]
                o_max = o if o_max is None else torch.maximum(o_max, o)
        if o_max is None:
            raise TrainError("dataset has no subjects")
        return o_max

    def densify(self) -> dict[str, Any]:
        """Shrink scales, drop low-opacity points, refill to the cap."""
        model, cfg = self.model, self.cfg
        with torch.no_grad():
            gain = model.store["scale_gain"] * cfg.shrink_factor
            keep = self.max_subject_opacity() >= cfg.prune_opacity
            if not bool(keep.any()):
                keep = torch.ones_like(keep)  # never empty the model
            survivors = torch.nonzero(keep, as_tuple=False).reshape(-1)
            pts = model.store["points"][survivors].clone()
            gain = gain[survivors].clone()
            n_add = cfg.point_cap - pts.shape[0]
            if n_add > 0:
                parent = torch.as_tensor(
                    self.rng.integers(0, pts.shape[0], size=n_add), dtype=torch.long
                )
                jitter = torch.as_tensor(
                    self.rng.standard_normal((n_add, 3)) * cfg.refill_radius,
                    dtype=model.dtype,
                )
                pts = torch.cat([pts, pts[parent] + jitter])
                gain = torch.cat([gain, gain[parent]])
            model.replace_points(pts, gain)
            self.opt.remap("points", survivors.numpy(), pts.shape[0])
        event = {
            "epoch": self.epoch,
            "survivors": int(survivors.numel()),
            "pruned": int((~keep).sum()),
            "n_points": int(pts.shape[0]),
        }
        self.events.append(event)
        return event

    # -- evaluation ------------------------------------------------------------

    def evaluate(
        self,
        frames: list[int] | None = None,
        subjects: list[str] | None = None,
    ) -> dict[str, Any]:
        """Mean reconstruction PSNR over subjects x frames."""
        frames = self.holdout_frames if frames is None else frames
        subjects = self.ds.subject_ids if subjects is None else subjects
        per_subject: dict[str, float] = {}
        with torch.no_grad():
            for sid in subjects:
                code = self.model.subject_code(sid)
                vals = []
                for f in frames:
                    pose = self.ds.frame_pose(sid, f, self.model.dtype)
                    out, _, _ = self.model.render(code, pose, self.ds.camera)
                    target = self.ds.frame_image(sid, f, self.model.dtype)
                    vals.append(psnr(out.image, target))
                per_subject[sid] = float(np.mean(vals))
        return {
            "psnr": float(np.mean(list(per_subject.values()))),
            "per_subject": per_subject,
            "frames": list(frames),
        }

    # -- interpolation fine-tune -------------------------------------------------

    def interpolation_pairs(self) -> list[tuple[str, str]]:
        pairs = []
        for cat, subs in sorted(self.ds.subjects_by_category().items()):
            pairs.extend(combinations(subs, 2))
        return pairs

    def _morph_batch(
        self, a: str, b: str, frame: int, alpha: float
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, FramePose]:
        dtype = self.model.dtype
        img_a = self.ds.frame_image(a, frame, dtype)
        img_b = self.ds.frame_image(b, frame, dtype)
        mask_a = self.ds.frame_mask(a, frame, dtype)
        mask_b = self.ds.frame_mask(b, frame, dtype)
        target, region = morph_pseudo_gt(img_a, img_b, mask_a, mask_b, alpha)
        code = self.model.interpolate_codes(
            self.model.subject_code(a), self.model.subject_code(b), alpha
        )
        return code, target, region, self.ds.frame_pose(a, frame, dtype)

    def eval_interpolation(
        self,
        pairs: list[tuple[str, str]] | None = None,
        alphas: list[float] | None = None,
        frames: list[int] | None = None,
    ) -> float:
        """Mean in-region reconstruction loss against morph pseudo targets."""
        pairs = pairs or self.interpolation_pairs()
        alphas = alphas or alpha_grid(5)
        frames = frames if frames is not None else self.train_frames[:4]
        losses = []
        with torch.no_grad():
            for a, b in pairs:
                for alpha in alphas:
                    for f in frames:
                        code, target, region, pose = self._morph_batch(a, b, f, alpha)
                        out, _, _ = self.model.render(code, pose, self.ds.camera)
                        loss, _ = masked_recon_loss(out.image, target, region)
                        losses.append(float(loss))
        return float(np.mean(losses))

    def finetune_interpolation(
        self, epochs: int = 2, pivot_every: int = 2
    ) -> list[dict[str, float]]:
        """Teach intermediate latent codes to land on morph pseudo targets.

        Every ``pivot_every``-th step trains a real endpoint frame instead,
        anchoring the pivots so the blend does not drift.
        """
        pairs = self.interpolation_pairs()
        if not pairs:
            raise TrainError("interpolation fine-tune needs two subjects in one category")
        alphas = alpha_grid(5)
        logs_out = []
        for _ in range(epochs):
            steps = [(a, b, f) for a, b in pairs for f in self.train_frames]
            order = self.rng.permutation(len(steps))
            sums: dict[str, float] = {}
            for n, i in enumerate(order):
                a, b, frame = steps[int(i)]
                if pivot_every > 0 and n % pivot_every == 0:
                    sid = a if bool(self.rng.integers(0, 2)) else b
                    logs = self.training_step(sid, frame, warm_up=False)
                else:
                    alpha = float(alphas[int(self.rng.integers(0, len(alphas)))])
                    code, target, region, pose = self._morph_batch(a, b, frame, alpha)
                    out, _, _ = self.model.render(code, pose, self.ds.camera)
                    loss, parts = masked_recon_loss(
                        out.image, target, region, self.provider, self.cfg.weights
                    )
                    grads = backward(loss, self.model.store)
                    self.opt.step(grads)
                    self.global_step += 1
                    logs = {f"interp.{k}": float(v.detach()) for k, v in parts.items()}
                for k, v in logs.items():
                    sums[k] = sums.get(k, 0.0) + v
            logs_out.append({k: v / len(order) for k, v in sums.items()})
        return logs_out

    # -- attribute transfer --------------------------------------------------------

    def fit_lora(
        self,
        subject_id: str,
        epochs: int = 5,
        anchor_weight: float = 1.0,
    ) -> list[dict[str, float]]:
        """Adapt the geometry heads to one new subject with the base frozen.

        Low-rank adapters train on the target subject's frames; an anchor
        term ties the adapted composed Gaussians of the original subjects to
        the frozen base outputs so the transfer does not disturb them.
        """
        model = self.model
        if subject_id not in model.subjects:
            model.add_subject(self.ds.subject_meta(subject_id))
        if not model.lora_names():
            model.add_lora(seed=self.cfg.seed)
        model.freeze_base()
        lora_lr = {n: self.cfg.lr_lora for n in model.lora_names()}
        opt = Adam(model.store, lr=lora_lr, betas=self.cfg.adam_betas)
        sources = [s for s in self.ds.subject_ids if s != subject_id]
        logs_out = []
        for _ in range(epochs):
            order = self.rng.permutation(len(self.train_frames))
            sums: dict[str, float] = {}
            for i in order:
                frame = self.train_frames[int(i)]
                pose = self.ds.frame_pose(subject_id, frame, model.dtype)
                code = model.subject_code(subject_id)
                out, _, _ = model.render(code, pose, self.ds.camera, use_lora=True)
                target = self.ds.frame_image(subject_id, frame, model.dtype)
                total, parts = recon_loss(out.image, target, self.provider, self.cfg.weights)
                logs = {f"lora.{k}": float(v.detach()) for k, v in parts.items()}
                if sources and anchor_weight > 0.0:
                    src = sources[int(self.rng.integers(0, len(sources)))]
                    src_code = model.subject_code(src)
                    src_pose = self.ds.frame_pose(src, frame, model.dtype)
                    adapted, _ = model.forward(src_code, src_pose, use_lora=True)
                    with torch.no_grad():
                        base, _ = model.forward(src_code, src_pose, use_lora=False)
                    anchor, _ = lora_3d_loss(base, adapted)
                    total = total + anchor_weight * anchor
                    logs["lora.anchor"] = float(anchor.detach())
                grads = backward(total, model.store)
                opt.step(grads)
                self.global_step += 1
                for k, v in logs.items():
                    sums[k] = sums.get(k, 0.0) + v
            logs_out.append({k: v / len(order) for k, v in sums.items()})
        return logs_out

    # -- persistence -----------------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        adam_tensors, adam_steps = self.opt.export()
        rng_state = self.rng.bit_generator.state
        trainer_meta = {
            "config": self.cfg.to_json(),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "lr_scale": self.opt.lr_scale,
            "adam_steps": adam_steps,
            "rng_state": {
                "state": str(rng_state["state"]["state"]),
                "inc": str(rng_state["state"]["inc"]),
                "has_uint32": rng_state["has_uint32"],
                "uinteger": rng_state["uinteger"],
            },
            "history": self.history,
            "events": self.events,
        }
        self.model.save(path, extra_meta={"trainer": trainer_meta}, extra_tensors=adam_tensors)

    @classmethod
    def load_checkpoint(
        cls,
        path: str | Path,
        dataset: ToyDataset,
        provider: ConvFeatures | None = None,
    ) -> "Trainer":
        model, extra, meta = AvatarModel.load(path)
        if "trainer" not in meta:
            raise TrainError(f"{path}: checkpoint has no trainer state")
        t = meta["trainer"]
        cfg = TrainConfig.from_json(t["config"])
        trainer = cls(model, dataset, cfg, provider)
        adam_tensors = {k: v for k, v in extra.items() if k.startswith("adam.")}
        trainer.opt.load(adam_tensors, t["adam_steps"])
        trainer.opt.lr_scale = float(t["lr_scale"])
        rs = t["rng_state"]
        trainer.rng.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(rs["state"]), "inc": int(rs["inc"])},
            "has_uint32": int(rs["has_uint32"]),
            "uinteger": int(rs["uinteger"]),
        }
        trainer.epoch = int(t["epoch"])
        trainer.global_step = int(t["global_step"])
        trainer.history = list(t.get("history", []))
        trainer.events = list(t.get("events", []))
        return trainer


def new_trainer(
    dataset: ToyDataset,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
) -> Trainer:
    """Fresh model sized to the dataset, wired to a trainer.

    Starts at the full point budget: template vertices plus jittered copies
    up to the cap, so early epochs train at full capacity instead of waiting
    for the first refill.
    """
    cfg = train_config or TrainConfig.desk()
    mcfg = model_config or ModelConfig.desk()
    template = dataset.template(torch.float32)
    model = AvatarModel(mcfg, template, dtype=torch.float32, point_cap=cfg.point_cap)
    n_add = cfg.point_cap - model.n_points
    if n_add > 0:
        rng = np.random.default_rng(cfg.seed)
        base = model.store["points"].detach()
        parents = torch.as_tensor(rng.integers(0, base.shape[0], size=n_add))
        jitter = torch.as_tensor(
            rng.standard_normal((n_add, 3)) * cfg.refill_radius, dtype=base.dtype
        )
        points = torch.cat([base, base[parents] + jitter], dim=0)
        gain = torch.cat(
            [model.store["scale_gain"].detach(), torch.ones(n_add, dtype=base.dtype)]
        )
        model.replace_points(points, gain)
    return Trainer(model, dataset, cfg)
