"""Evaluation protocol: reconstruction, edits, interpolation, distributions.

Produces a JSON document, a flat CSV of every scalar, and a set of PNG
figures (loss curve, per-subject quality bars, interpolation strips, swap
panels). All rendering here is deterministic given the checkpoint and the
dataset directory.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .avatar import AvatarModel
from .dataset import ToyDataset, dilate_mask, morph_pseudo_gt, quantize_u8
from .losses import masked_recon_loss, ssim
from .metrics import (
    ConvFeatures,
    alpha_grid,
    fid,
    interpolation_plan,
    kid,
    mean_abs_outside,
    population_std,
    psnr,
)


def holdout_split(n_frames: int, stride: int) -> tuple[list[int], list[int]]:
    if stride <= 1:
        return list(range(n_frames)), []
    hold = [i for i in range(n_frames) if i % stride == stride // 2]
    train = [i for i in range(n_frames) if i % stride != stride // 2]
    return train, hold


class ReportBuilder:
    def __init__(
        self,
        model: AvatarModel,
        dataset: ToyDataset,
        provider: ConvFeatures | None = None,
        holdout_stride: int = 5,
        trainer_meta: dict[str, Any] | None = None,
    ) -> None:
        torch.set_num_threads(1)
        self.model = model
        self.ds = dataset
        self.provider = provider or ConvFeatures.random(0)
        self.trainer_meta = trainer_meta or {}
        for sid in dataset.subject_ids:
            if sid not in model.subjects:
                model.add_subject(dataset.subject_meta(sid))
        self.train_frames, self.holdout_frames = holdout_split(
            dataset.n_frames, holdout_stride
        )

    # -- rendering helpers ---------------------------------------------------

    def render_spec(self, spec: str, frame: int) -> torch.Tensor:
        code = self.model.resolve_latent(spec)
        pose = self.ds.frame_pose(self.ds.subject_ids[0], frame, self.model.dtype)
        out, _, _ = self.model.render(code, pose, self.ds.camera)
        return out.image

    # -- sections --------------------------------------------------------------

    def reconstruction(self) -> dict[str, Any]:
        rows = {}
        with torch.no_grad():
            for sid in self.ds.subject_ids:
                code = self.model.subject_code(sid)
                entry = {}
                for split, frames in (
                    ("train", self.train_frames),
                    ("holdout", self.holdout_frames),
                ):
                    if not frames:
                        continue
                    ps, ss = [], []
                    for f in frames:
                        pose = self.ds.frame_pose(sid, f, self.model.dtype)
                        out, _, _ = self.model.render(code, pose, self.ds.camera)
                        gt = self.ds.frame_image(sid, f, self.model.dtype)
                        ps.append(psnr(out.image, gt))
                        ss.append(float(ssim(out.image, gt)))
                    entry[split] = {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}
                rows[sid] = entry
        summary = {
            split: {
                "psnr": float(np.mean([rows[s][split]["psnr"] for s in rows if split in rows[s]])),
                "ssim": float(np.mean([rows[s][split]["ssim"] for s in rows if split in rows[s]])),
            }
            for split in ("train", "holdout")
            if any(split in rows[s] for s in rows)
        }
        return {"per_subject": rows, "summary": summary}

    def swaps(self, frame: int = 0) -> dict[str, Any]:
        """Localization of attribute edits: pixels outside the combined
        attribute region must stay put when the attribute row changes."""
        rows = []
        with torch.no_grad():
            for cat, subs in sorted(self.ds.subjects_by_category().items()):
                targets = ["zero"] + subs
                for a in subs:
                    base = self.render_spec(f"subject:{a}", frame)
                    mask_a = self.ds.frame_mask(a, frame, self.model.dtype)
                    for tgt in targets:
                        if tgt == a:
                            continue
                        swapped = self.render_spec(f"swap:{a}:{cat}={tgt}", frame)
                        if tgt == "zero":
                            region = dilate_mask(mask_a, 3)
                        else:
                            mask_b = self.ds.frame_mask(tgt, frame, self.model.dtype)
                            region = dilate_mask(
                                ((mask_a > 0.5) | (mask_b > 0.5)).to(mask_a.dtype), 3
                            )
                        outside = mean_abs_outside(swapped, base, region)
                        rows.append(
                            {
                                "category": cat,
                                "subject": a,
                                "target": tgt,
                                "outside_mean_abs": outside,
                                "outside_mean_abs_255": outside * 255.0,
                            }
                        )
        worst = max((r["outside_mean_abs"] for r in rows), default=0.0)
        return {"pairs": rows, "worst_outside_mean_abs": worst, "frame": frame}

    def interpolation(
        self, n_alphas: int = 5, frames: list[int] | None = None
    ) -> dict[str, Any]:
        alphas = alpha_grid(n_alphas)
        frames = frames if frames is not None else self.train_frames[:2]
        pairs = []
        for cat, subs in sorted(self.ds.subjects_by_category().items()):
            for i in range(len(subs)):
                for j in range(i + 1, len(subs)):
                    pairs.append((cat, subs[i], subs[j]))
        rows = []
        with torch.no_grad():
            for cat, a, b in pairs:
                for f in frames:
                    imgs = [self.render_spec(f"subject:{a}", f)]
                    for al in alphas:
                        imgs.append(self.render_spec(f"lerp:{a}:{b}:{al}", f))
                    imgs.append(self.render_spec(f"subject:{b}", f))
                    steps = [
                        float(self.provider.distance(imgs[i], imgs[i + 1]))
                        for i in range(len(imgs) - 1)
                    ]
                    ppl = float(sum(steps))
                    pdv = population_std(steps) * 100.0
                    # masked loss against the cross-dissolve pseudo target
                    img_a = self.ds.frame_image(a, f, self.model.dtype)
                    img_b = self.ds.frame_image(b, f, self.model.dtype)
                    mask_a = self.ds.frame_mask(a, f, self.model.dtype)
                    mask_b = self.ds.frame_mask(b, f, self.model.dtype)
                    losses = []
                    for al, im in zip(alphas, imgs[1:-1]):
                        target, region = morph_pseudo_gt(img_a, img_b, mask_a, mask_b, al)
                        loss, _ = masked_recon_loss(im, target, region)
                        losses.append(float(loss))
                    rows.append(
                        {
                            "category": cat,
                            "a": a,
                            "b": b,
                            "frame": f,
                            "ppl": ppl,
                            "pdv": pdv,
                            "masked_loss": float(np.mean(losses)),
                        }
                    )
        plan = None
        by_cat = {
            cat: subs
            for cat, subs in self.ds.subjects_by_category().items()
            if len(subs) >= 2
        }
        if by_cat:
            entries = interpolation_plan(by_cat, n_pairs=len(pairs), n_alphas=n_alphas)
            plan = {
                "n_entries": len(entries),
                "n_categories": len(by_cat),
                "n_alphas": n_alphas,
            }
        return {
            "alphas": alphas,
            "pairs": rows,
            "summary": {
                "ppl": float(np.mean([r["ppl"] for r in rows])) if rows else 0.0,
                "pdv": float(np.mean([r["pdv"] for r in rows])) if rows else 0.0,
                "masked_loss": float(np.mean([r["masked_loss"] for r in rows])) if rows else 0.0,
            },
            "plan": plan,
        }

    def distributions(self, frames: list[int] | None = None) -> dict[str, Any]:
        """Feature-space distance between rendered and ground-truth frame sets."""
        frames = frames if frames is not None else list(range(self.ds.n_frames))
        real, fake = [], []
        with torch.no_grad():
            for sid in self.ds.subject_ids:
                code = self.model.subject_code(sid)
                for f in frames:
                    gt = self.ds.frame_image(sid, f, self.model.dtype)
                    pose = self.ds.frame_pose(sid, f, self.model.dtype)
                    out, _, _ = self.model.render(code, pose, self.ds.camera)
                    real.append(self.provider.embed(gt).numpy())
                    fake.append(self.provider.embed(out.image).numpy())
        real_np = np.stack(real)
        fake_np = np.stack(fake)
        return {
            "n_samples": len(real),
            "fid": fid(real_np, fake_np),
            "kid": kid(real_np, fake_np),
        }

    # -- figures --------------------------------------------------------------------

    def figure_history(self, path: Path) -> bool:
        history = self.trainer_meta.get("history", [])
        if not history:
            return False
        epochs = [h["epoch"] for h in history]
        fig, ax = plt.subplots(1, 2, figsize=(9, 3.2))
        ax[0].plot(epochs, [h["total"] for h in history], marker="o", ms=3)
        ax[0].set_xlabel("epoch")
        ax[0].set_ylabel("training loss")
        ax[0].set_title("loss")
        ax[1].plot(epochs, [h["n_points"] for h in history], marker="o", ms=3)
        ax[1].set_xlabel("epoch")
        ax[1].set_ylabel("points")
        ax[1].set_title("point budget")
        fig.tight_layout()
        fig.savefig(path, dpi=110)
        plt.close(fig)
        return True

    def figure_quality(self, recon: dict[str, Any], path: Path) -> None:
        subjects = sorted(recon["per_subject"])
        splits = [s for s in ("train", "holdout") if any(s in recon["per_subject"][x] for x in subjects)]
        fig, ax = plt.subplots(figsize=(1.6 * len(subjects) + 2, 3.2))
        width = 0.8 / max(len(splits), 1)
        xs = np.arange(len(subjects))
        for i, split in enumerate(splits):
            vals = [recon["per_subject"][s].get(split, {}).get("psnr", np.nan) for s in subjects]
            ax.bar(xs + i * width, vals, width=width, label=split)
        ax.set_xticks(xs + width * (len(splits) - 1) / 2)
        ax.set_xticklabels(subjects)
        ax.set_ylabel("PSNR (dB)")
        ax.legend()
        ax.set_title("reconstruction quality")
        fig.tight_layout()
        fig.savefig(path, dpi=110)
        plt.close(fig)

    def figure_interp_strip(self, a: str, b: str, frame: int, n_alphas: int, path: Path) -> None:
        with torch.no_grad():
            imgs = [self.render_spec(f"subject:{a}", frame)]
            for al in alpha_grid(n_alphas):
                imgs.append(self.render_spec(f"lerp:{a}:{b}:{al}", frame))
            imgs.append(self.render_spec(f"subject:{b}", frame))
        strip = np.concatenate([quantize_u8(im) for im in imgs], axis=1)
        fig, ax = plt.subplots(figsize=(1.4 * len(imgs), 1.8))
        ax.imshow(strip)
        ax.set_axis_off()
        ax.set_title(f"{a} -> {b}", fontsize=9)
        fig.tight_layout()
        fig.savefig(path, dpi=130)
        plt.close(fig)

    def figure_swap_panel(self, subject: str, frame: int, path: Path) -> None:
        cat = self.ds.category_of(subject)
        others = [s for s in self.ds.subjects_by_category().get(cat, []) if s != subject]
        specs = [("original", f"subject:{subject}"), ("removed", f"swap:{subject}:{cat}=zero")]
        specs += [(f"from {o}", f"swap:{subject}:{cat}={o}") for o in others]
        with torch.no_grad():
            imgs = [(label, quantize_u8(self.render_spec(s, frame))) for label, s in specs]
        fig, axes = plt.subplots(1, len(imgs), figsize=(2.2 * len(imgs), 2.6))
        if len(imgs) == 1:
            axes = [axes]
        for ax, (label, im) in zip(axes, imgs):
            ax.imshow(im)
            ax.set_title(label, fontsize=8)
            ax.set_axis_off()
        fig.suptitle(f"{subject}: {cat} edits", fontsize=10)
        fig.tight_layout()
        fig.savefig(path, dpi=130)
        plt.close(fig)

    # -- assembly ----------------------------------------------------------------------

    def build(self, out_dir: str | Path, n_alphas: int = 5) -> dict[str, Any]:
        out = Path(out_dir)
        figures = out / "figures"
        figures.mkdir(parents=True, exist_ok=True)

        recon = self.reconstruction()
        swaps = self.swaps()
        interp = self.interpolation(n_alphas=n_alphas)
        dist = self.distributions()

        report = {
            "dataset": {
                "root": str(self.ds.root),
                "subjects": self.ds.subject_ids,
                "categories": sorted(self.ds.subjects_by_category()),
                "n_frames": self.ds.n_frames,
                "size": self.ds.size,
                "train_frames": self.train_frames,
                "holdout_frames": self.holdout_frames,
            },
            "model": {
                "n_points": self.model.n_points,
                "latent_dim": self.model.config.latent_dim,
                "categories": list(self.model.config.categories),
                "has_lora": bool(self.model.lora_names()),
            },
            "reconstruction": recon,
            "swaps": swaps,
            "interpolation": interp,
            "distributions": dist,
        }

        figure_paths = []
        if self.figure_history(figures / "history.png"):
            figure_paths.append("figures/history.png")
        self.figure_quality(recon, figures / "quality.png")
        figure_paths.append("figures/quality.png")
        for cat, subs in sorted(self.ds.subjects_by_category().items()):
            if len(subs) >= 2:
                name = f"interp_{cat}_{subs[0]}_{subs[1]}.png"
                self.figure_interp_strip(subs[0], subs[1], self.train_frames[0], n_alphas, figures / name)
                figure_paths.append(f"figures/{name}")
            self.figure_swap_panel(subs[0], self.train_frames[0], figures / f"swap_{subs[0]}.png")
            figure_paths.append(f"figures/swap_{subs[0]}.png")
        report["figures"] = figure_paths

        with open(out / "report.json", "w") as fh:
            json.dump(report, fh, indent=2)
        write_csv(report, out / "report.csv")
        return report


def write_csv(report: dict[str, Any], path: str | Path) -> None:
    """Flatten every scalar metric into (section, key, metric, value) rows."""
    rows: list[tuple[str, str, str, float]] = []
    recon = report["reconstruction"]
    for sid, entry in sorted(recon["per_subject"].items()):
        for split, metrics in entry.items():
            for m, v in metrics.items():
                rows.append(("reconstruction", f"{sid}/{split}", m, v))
    for split, metrics in recon["summary"].items():
        for m, v in metrics.items():
            rows.append(("reconstruction", f"summary/{split}", m, v))
    for r in report["swaps"]["pairs"]:
        key = f"{r['subject']}->{r['target']}"
        rows.append(("swap", key, "outside_mean_abs_255", r["outside_mean_abs_255"]))
    rows.append(("swap", "worst", "outside_mean_abs", report["swaps"]["worst_outside_mean_abs"]))
    for r in report["interpolation"]["pairs"]:
        key = f"{r['a']}~{r['b']}/f{r['frame']}"
        for m in ("ppl", "pdv", "masked_loss"):
            rows.append(("interpolation", key, m, r[m]))
    for m, v in report["interpolation"]["summary"].items():
        rows.append(("interpolation", "summary", m, v))
    for m in ("fid", "kid"):
        rows.append(("distributions", "all", m, report["distributions"][m]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["section", "item", "metric", "value"])
        for row in rows:
            w.writerow([row[0], row[1], row[2], f"{row[3]:.8g}"])


def build_report(
    checkpoint: str | Path,
    data_root: str | Path,
    out_dir: str | Path,
    n_alphas: int = 5,
) -> dict[str, Any]:
    model, _, meta = AvatarModel.load(checkpoint)
    ds = ToyDataset(data_root)
    trainer_meta = meta.get("trainer", {})
    stride = trainer_meta.get("config", {}).get("holdout_stride", 5)
    builder = ReportBuilder(
        model, ds, holdout_stride=stride, trainer_meta=trainer_meta
    )
    return builder.build(out_dir, n_alphas=n_alphas)
