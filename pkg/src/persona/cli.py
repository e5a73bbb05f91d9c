"""Operator entry points: dataset synthesis, training, rendering, reports, serving.

One global ``--config`` YAML plus dotted ``--set`` overrides feed every
subcommand; ``--json`` switches stdout to a single machine-readable summary
(schema ``persona/1``) with progress diverted to stderr.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time
from pathlib import Path
from typing import Any

import click
import torch
import yaml

from .avatar import AvatarError, AvatarModel, ModelConfig
from .dataset import (
    DatasetError,
    ToyDataset,
    save_png,
    synth_toy_dataset,
)
from .losses import LossError, LossWeights
from .metrics import MetricError, psnr
from .rasterizer import Camera
from .trainer import TrainConfig, Trainer, TrainError, new_trainer

SCHEMA = "persona/1"
DOMAIN_ERRORS = (AvatarError, DatasetError, TrainError, MetricError, LossError)


# -- config plumbing ---------------------------------------------------------


def load_config_file(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise click.ClickException(f"{path}: config root must be a mapping")
    return data


def apply_dotted(cfg: dict[str, Any], sets: tuple[str, ...]) -> dict[str, Any]:
    for item in sets:
        if "=" not in item:
            raise click.ClickException(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        if isinstance(value, str):
            try:  # YAML leaves bare exponents like 1e-3 as strings
                value = float(value)
            except ValueError:
                pass
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise click.ClickException(f"--set {key}: {p} is not a mapping")
        node[parts[-1]] = value
    return cfg


def _apply_overrides(obj: Any, overrides: dict[str, Any], section: str) -> None:
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in overrides.items():
        if key not in fields:
            raise click.ClickException(f"unknown {section} option {key!r}")
        current = getattr(obj, key)
        if key == "weights":
            value = LossWeights(**value)
        elif isinstance(current, tuple):
            value = tuple(value)
        setattr(obj, key, value)


def build_configs(
    ctx_cfg: dict[str, Any], preset: str, **train_overrides: Any
) -> tuple[ModelConfig, TrainConfig]:
    if preset == "desk":
        mcfg, tcfg = ModelConfig.desk(), TrainConfig.desk()
    elif preset == "paper":
        mcfg, tcfg = ModelConfig(), TrainConfig.paper()
    else:
        raise click.ClickException(f"unknown preset {preset!r}")
    _apply_overrides(mcfg, ctx_cfg.get("model", {}), "model")
    _apply_overrides(tcfg, ctx_cfg.get("train", {}), "train")
    for key, value in train_overrides.items():
        if value is not None:
            setattr(tcfg, key, value)
    return mcfg, tcfg


def emit(ctx: click.Context, summary: dict[str, Any], text: str) -> None:
    if ctx.obj["json"]:
        click.echo(json.dumps({"schema": SCHEMA, **summary}))
    else:
        click.echo(text)


def progress(ctx: click.Context, text: str) -> None:
    click.echo(text, err=ctx.obj["json"])


def run_guarded(fn):
    """Map domain errors to exit code 1 with the message on stderr."""

    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return fn(*args, **kwargs)
        except DOMAIN_ERRORS as exc:
            raise click.ClickException(str(exc)) from exc

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None, help="YAML config file (model./train. sections).")
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Dotted-key override, e.g. --set train.lr_model=1e-3.")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable JSON summary on stdout.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, sets: tuple[str, ...], as_json: bool) -> None:
    """Latent-conditioned Gaussian head avatars: synthesis, training, editing."""
    torch.set_num_threads(1)
    ctx.ensure_object(dict)
    ctx.obj["cfg"] = apply_dotted(load_config_file(config_path), sets)
    ctx.obj["json"] = as_json


# -- synth ---------------------------------------------------------------------


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--subjects", default=4, show_default=True)
@click.option("--frames", default=20, show_default=True)
@click.option("--size", default=128, show_default=True)
@click.option("--vertices", default=400, show_default=True)
@click.option("--categories", default="hat,beard", show_default=True, help="Comma-separated attribute categories to cycle through.")
@click.option("--seed", default=0, show_default=True)
@click.pass_context
@run_guarded
def synth(ctx: click.Context, out_dir: str, subjects: int, frames: int, size: int, vertices: int, categories: str, seed: int) -> None:
    """Generate a self-consistent toy dataset."""
    cats = tuple(c.strip() for c in categories.split(",") if c.strip())
    ds = synth_toy_dataset(
        out_dir,
        n_subjects=subjects,
        n_frames=frames,
        size=size,
        n_vertices=vertices,
        categories=cats,
        seed=seed,
    )
    emit(
        ctx,
        {"out": str(out_dir), "subjects": ds.subject_ids, "frames": frames, "size": size, "seed": seed},
        f"wrote {len(ds.subject_ids)} subjects x {frames} frames ({size}x{size}) to {out_dir}",
    )


# -- train ----------------------------------------------------------------------


@main.command()
@click.option("--data", "data_root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--preset", default="desk", show_default=True, type=click.Choice(["desk", "paper"]))
@click.option("--epochs", default=None, type=int, help="Total epoch budget (overrides preset/config).")
@click.option("--seed", default=None, type=int, help="Training seed (overrides preset/config).")
@click.option("--resume", is_flag=True, help="Continue from OUT/model.bin if present.")
@click.pass_context
@run_guarded
def train(ctx: click.Context, data_root: str, out_dir: str, preset: str, epochs: int | None, seed: int | None, resume: bool) -> None:
    """Fit the avatar model on a dataset; writes OUT/model.bin and history.json."""
    ds = ToyDataset(data_root)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = out / "model.bin"

    if resume and checkpoint.exists():
        trainer = Trainer.load_checkpoint(checkpoint, ds)
        if epochs is not None:
            trainer.cfg.epochs = epochs
        progress(ctx, f"resumed at epoch {trainer.epoch} from {checkpoint}")
    else:
        mcfg, tcfg = build_configs(ctx.obj["cfg"], preset, epochs=epochs, seed=seed)
        trainer = new_trainer(ds, mcfg, tcfg)

    t0 = time.time()
    trainer.fit(
        on_epoch=lambda e: progress(
            ctx,
            f"epoch {int(e['epoch']):>3}/{trainer.cfg.epochs} loss {e['total']:.4f} "
            f"points {int(e['n_points'])} lr x{e['lr_scale']:.3f} ({e['seconds']:.1f}s)",
        )
    )
    trainer.save_checkpoint(checkpoint)
    with open(out / "history.json", "w") as fh:
        json.dump(trainer.history, fh, indent=2)

    final_train = trainer.evaluate(trainer.train_frames)
    final_hold = trainer.evaluate() if trainer.holdout_frames else {"psnr": None}
    summary = {
        "checkpoint": str(checkpoint),
        "epochs": trainer.epoch,
        "n_points": trainer.model.n_points,
        "train_psnr": final_train["psnr"],
        "holdout_psnr": final_hold["psnr"],
        "seconds": round(time.time() - t0, 2),
    }
    hold_txt = f"{final_hold['psnr']:.2f}" if final_hold["psnr"] is not None else "n/a"
    emit(
        ctx,
        summary,
        f"done: train PSNR {final_train['psnr']:.2f} dB, holdout {hold_txt} dB, "
        f"{trainer.model.n_points} points -> {checkpoint}",
    )


# -- interpolation fine-tune -------------------------------------------------------


@main.command("finetune-interp")
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(), help="Output checkpoint (default: overwrite input).")
@click.option("--epochs", default=2, show_default=True)
@click.option("--pivot-every", default=2, show_default=True)
@click.pass_context
@run_guarded
def finetune_interp(ctx: click.Context, ckpt: str, data_root: str, out_path: str | None, epochs: int, pivot_every: int) -> None:
    """Smooth latent interpolation paths while anchoring the trained subjects."""
    ds = ToyDataset(data_root)
    trainer = Trainer.load_checkpoint(ckpt, ds)
    pairs = trainer.interpolation_pairs()
    before = trainer.eval_interpolation(pairs)
    pivot_before = trainer.evaluate(trainer.train_frames)["psnr"]
    trainer.finetune_interpolation(epochs=epochs, pivot_every=pivot_every)
    after = trainer.eval_interpolation(pairs)
    pivot_after = trainer.evaluate(trainer.train_frames)["psnr"]
    dest = Path(out_path or ckpt)
    trainer.save_checkpoint(dest)
    summary = {
        "checkpoint": str(dest),
        "pairs": [list(p) for p in pairs],
        "masked_loss_before": before,
        "masked_loss_after": after,
        "pivot_psnr_before": pivot_before,
        "pivot_psnr_after": pivot_after,
    }
    emit(
        ctx,
        summary,
        f"interpolation loss {before:.5f} -> {after:.5f}; "
        f"pivot PSNR {pivot_before:.2f} -> {pivot_after:.2f} dB -> {dest}",
    )


# -- attribute transfer -----------------------------------------------------------


@main.command()
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_root", required=True, type=click.Path(exists=True, file_okay=False), help="Dataset containing the new subject's frames.")
@click.option("--subject", "subject_id", required=True)
@click.option("--epochs", default=5, show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path(), help="Output checkpoint (default: overwrite input).")
@click.pass_context
@run_guarded
def transfer(ctx: click.Context, ckpt: str, data_root: str, subject_id: str, epochs: int, out_path: str | None) -> None:
    """Adapt a trained model to one new subject through low-rank updates only."""
    ds = ToyDataset(data_root)
    trainer = Trainer.load_checkpoint(ckpt, ds)
    logs = trainer.fit_lora(subject_id, epochs=epochs)
    dest = Path(out_path or ckpt)
    trainer.save_checkpoint(dest)
    summary = {
        "checkpoint": str(dest),
        "subject": subject_id,
        "epochs": epochs,
        "final_loss": logs[-1]["total"] if logs else None,
        "lora_params": trainer.model.lora_names(),
    }
    emit(
        ctx,
        summary,
        f"adapted to {subject_id} in {epochs} epochs "
        f"({len(trainer.model.lora_names())} low-rank tensors) -> {dest}",
    )


# -- render ------------------------------------------------------------------------


@main.command()
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--latent", "spec", required=True, help="subject:<id> | swap:<id>:<cat>=<id|zero> | lerp:<a>:<b>:<alpha>")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--data", "data_root", default=None, type=click.Path(exists=True, file_okay=False), help="Dataset supplying pose trajectory and camera.")
@click.option("--frame", default=None, type=int, help="Trajectory frame index (requires --data).")
@click.option("--size", default=128, show_default=True, help="Image size when no dataset camera is given.")
@click.pass_context
@run_guarded
def render(ctx: click.Context, ckpt: str, spec: str, out_path: str, data_root: str | None, frame: int | None, size: int) -> None:
    """Render one frame for a latent spec; optionally compare against ground truth."""
    from .avatar import FramePose

    model, _, _ = AvatarModel.load(ckpt)
    gt = None
    if data_root is not None:
        ds = ToyDataset(data_root)
        for sid in ds.subject_ids:
            if sid not in model.subjects:
                model.add_subject(ds.subject_meta(sid))
        camera = ds.camera
        idx = 0 if frame is None else frame
        pose = ds.frame_pose(ds.subject_ids[0], idx, model.dtype)
        if spec.startswith("subject:"):
            sid = spec.split(":", 1)[1]
            if sid in ds.subjects:
                gt = ds.frame_image(sid, idx, model.dtype)
    else:
        if frame is not None:
            raise click.ClickException("--frame requires --data")
        camera = Camera.front_facing(size)
        pose = FramePose.rest(model.template, model.dtype)

    code = model.resolve_latent(spec)
    with torch.no_grad():
        out, _, _ = model.render(code, pose, camera)
    save_png(out_path, out.image)
    summary: dict[str, Any] = {"out": str(out_path), "latent": spec, "frame": frame}
    text = f"rendered {spec} -> {out_path}"
    if gt is not None:
        summary["psnr"] = psnr(out.image, gt)
        text += f" (PSNR vs ground truth: {summary['psnr']:.2f} dB)"
    emit(ctx, summary, text)


# -- report ---------------------------------------------------------------------------


@main.command()
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--alphas", default=5, show_default=True, help="Interior interpolation weights per pair.")
@click.pass_context
@run_guarded
def report(ctx: click.Context, ckpt: str, data_root: str, out_dir: str, alphas: int) -> None:
    """Full evaluation protocol: JSON + CSV tables and PNG figures."""
    from .reports import build_report

    doc = build_report(ckpt, data_root, out_dir, n_alphas=alphas)
    recon = doc["reconstruction"]["summary"]
    lines = [f"report written to {out_dir} (report.json, report.csv, figures/)"]
    for split in ("train", "holdout"):
        if split in recon:
            lines.append(f"  {split}: PSNR {recon[split]['psnr']:.2f} dB, SSIM {recon[split]['ssim']:.4f}")
    lines.append(f"  swap leakage (worst outside-region delta): {doc['swaps']['worst_outside_mean_abs'] * 255:.3f}/255")
    lines.append(f"  distribution: FID {doc['distributions']['fid']:.4f}, KID {doc['distributions']['kid']:.6f}")
    emit(ctx, {"out": str(out_dir), "report": doc}, "\n".join(lines))


main.add_command(report, name="eval")


# -- serve -----------------------------------------------------------------------------


@main.command()
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_root", default=None, type=click.Path(exists=True, file_okay=False), help="Dataset supplying the pose trajectory presets.")
@click.option("--bind", default=None, help="host:port (default: $PERSONA_BIND or 127.0.0.1:8000).")
@click.option("--max-size", default=512, show_default=True)
@click.option("--cache", "cache_size", default=64, show_default=True)
@click.option("--static", "static_dir", default=None, type=click.Path(exists=True, file_okay=False), help="Directory with the viewer bundle to serve at /.")
@click.pass_context
@run_guarded
def serve(ctx: click.Context, ckpt: str, data_root: str | None, bind: str | None, max_size: int, cache_size: int, static_dir: str | None) -> None:
    """Serve the trained model over HTTP for the interactive editor."""
    import uvicorn

    from .service import build_app, resolve_bind

    host, port = resolve_bind(bind)
    app = build_app(ckpt, data_root=data_root, max_size=max_size, cache_size=cache_size, static_dir=static_dir)
    progress(ctx, f"serving {ckpt} on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
