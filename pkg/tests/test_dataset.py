"""Toy dataset: synthesis, self-consistency, masks, morph targets."""

import json

import numpy as np
import pytest
import torch

from persona.avatar import CATEGORIES
from persona.dataset import (
    DatasetError,
    ToyDataset,
    ToyScene,
    _attribute_region,
    dilate_mask,
    load_png,
    make_toy_scene,
    make_trajectory,
    morph_pseudo_gt,
    pose_from_json,
    pose_to_json,
    quantize_u8,
    render_scene,
    save_png,
    subject_features,
    synth_toy_dataset,
)
from persona.headmodel import make_toy_template

torch.set_num_threads(1)


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    synth_toy_dataset(root, n_subjects=4, n_frames=5, size=48, n_vertices=150, seed=3)
    return root


@pytest.fixture(scope="module")
def ds(toy_root):
    return ToyDataset(toy_root)


def test_layout_and_manifest(ds):
    assert ds.subject_ids == ["s000", "s001", "s002", "s003"]
    assert ds.category_of("s000") == "hat"
    assert ds.category_of("s001") == "beard"
    assert ds.subjects_by_category() == {"hat": ["s000", "s002"], "beard": ["s001", "s003"]}
    assert ds.n_frames == 5
    assert ds.camera.width == 48
    img = ds.frame_image("s000", 0)
    assert img.shape == (48, 48, 3) and img.dtype == torch.float32
    mask = ds.frame_mask("s000", 0)
    assert mask.shape == (48, 48)
    assert set(torch.unique(mask).tolist()) <= {0.0, 1.0}


def test_stored_frames_equal_requantized_rerender(ds):
    """The dataset is realizable by construction: stored bytes == render."""
    template = ds.template(torch.float64)
    for sid in ("s000", "s001"):
        scene = ds.scene(sid)
        for f in (0, 3):
            pose = ds.frame_pose(sid, f, torch.float64)
            out = render_scene(scene, template, pose, ds.camera)
            stored = quantize_u8(ds.frame_image(sid, f, torch.float64))
            assert np.array_equal(stored, quantize_u8(out.image)), (sid, f)


def test_mask_is_attribute_alpha_threshold(ds):
    template = ds.template(torch.float64)
    scene = ds.scene("s002")
    pose = ds.frame_pose("s002", 1, torch.float64)
    attr_only = render_scene(scene, template, pose, ds.camera, subset=scene.attr_mask)
    want = (attr_only.alpha > 0.5).to(torch.float64)
    got = ds.frame_mask("s002", 1, torch.float64)
    assert torch.equal(got, want)


def test_subjects_share_identity_outside_attributes(ds):
    a = ds.scene("s000")
    b = ds.scene("s002")  # both hat subjects, different hats
    head_a = a.points[~a.attr_mask]
    head_b = b.points[~b.attr_mask]
    assert torch.equal(head_a, head_b)
    assert torch.equal(a.colors[~a.attr_mask], b.colors[~b.attr_mask])
    assert not torch.equal(a.points[a.attr_mask], b.points[b.attr_mask])


def test_scene_container_roundtrip(ds, tmp_path):
    scene = ds.scene("s001")
    p = tmp_path / "scene.bin"
    scene.save(p)
    again = ToyScene.load(p)
    for f in ("points", "quats", "scales", "opacities", "colors", "skin_w", "attr_mask"):
        assert torch.equal(getattr(scene, f), getattr(again, f)), f
    assert again.subject_id == "s001" and again.category == "beard"
    assert np.array_equal(scene.f_img, again.f_img)


def test_every_category_has_a_region():
    template = make_toy_template(n_vertices=400, seed=0, dtype=torch.float64)
    pts = template.vertices.numpy()
    for cat in CATEGORIES:
        region = _attribute_region(cat, pts)
        assert region.sum() >= 3, cat
        scene = make_toy_scene(template, f"x-{cat}", cat, variant=1)
        assert int(scene.attr_mask.sum()) == int(region.sum())


def test_features_deterministic_unit_norm():
    f1, t1 = subject_features("s042")
    f2, t2 = subject_features("s042")
    assert np.array_equal(f1, f2) and np.array_equal(t1, t2)
    assert f1.shape == (512,)
    assert abs(np.linalg.norm(f1) - 1.0) < 1e-5
    assert not np.array_equal(f1, t1)
    g1, _ = subject_features("s043")
    assert not np.array_equal(f1, g1)


def test_trajectory_smooth_and_deterministic():
    template = make_toy_template(n_vertices=60, seed=0, dtype=torch.float64)
    a = make_trajectory(template, 8)
    b = make_trajectory(template, 8)
    assert len(a) == 8
    for pa, pb in zip(a, b):
        assert torch.equal(pa.theta, pb.theta)
        assert torch.equal(pa.psi, pb.psi)
    # distinct frames actually move
    assert not torch.equal(a[0].theta, a[3].theta)
    # start frame has zero yaw but a nonzero phase elsewhere
    assert a[0].theta.reshape(-1, 3)[1, 1] == 0.0


def test_pose_json_roundtrip():
    template = make_toy_template(n_vertices=60, seed=0, dtype=torch.float64)
    pose = make_trajectory(template, 3)[2]
    again = pose_from_json(json.loads(json.dumps(pose_to_json(pose))), dtype=torch.float64)
    assert torch.equal(pose.beta, again.beta)
    assert torch.equal(pose.theta, again.theta)
    assert torch.equal(pose.psi, again.psi)


def test_png_roundtrip_exact(tmp_path):
    img = torch.rand(17, 23, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    p = tmp_path / "x.png"
    save_png(p, img)
    again = load_png(p, torch.float64)
    assert torch.equal(again, torch.as_tensor(quantize_u8(img).astype(np.float64) / 255.0))


def test_dilate_mask_square_growth():
    m = torch.zeros(7, 7)
    m[3, 3] = 1.0
    d1 = dilate_mask(m, 1)
    assert d1.sum() == 9.0
    assert torch.equal(d1[2:5, 2:5], torch.ones(3, 3))
    assert torch.equal(dilate_mask(m, 0), m)
    d2 = dilate_mask(m, 2)
    assert d2.sum() == 25.0


def test_morph_pseudo_gt_contract(ds):
    a = ds.frame_image("s000", 0)
    b = ds.frame_image("s002", 0)
    ma = ds.frame_mask("s000", 0)
    mb = ds.frame_mask("s002", 0)
    tgt, region = morph_pseudo_gt(a, b, ma, mb, alpha=0.5, dilate_px=2)
    outside = (1.0 - region)[..., None]
    assert torch.equal(tgt * outside, a * outside)
    inside = region[..., None]
    assert torch.allclose(tgt * inside, (0.5 * a + 0.5 * b) * inside, atol=1e-7)
    # endpoints collapse to the originals inside the region too
    t0, _ = morph_pseudo_gt(a, b, ma, mb, alpha=0.0)
    assert torch.equal(t0, a)
    t1, r1 = morph_pseudo_gt(a, b, ma, mb, alpha=1.0)
    assert torch.equal(t1 * r1[..., None], b * r1[..., None])
    with pytest.raises(DatasetError):
        morph_pseudo_gt(a, b[:10], ma, mb, 0.5)


def test_loader_rejects_bad_access(ds, tmp_path):
    with pytest.raises(DatasetError):
        ds.frame_image("nope", 0)
    with pytest.raises(DatasetError):
        ds.frame_image("s000", 99)
    with pytest.raises(DatasetError):
        ToyDataset(tmp_path / "missing")


def test_synth_rejects_unknown_category(tmp_path):
    with pytest.raises(DatasetError):
        synth_toy_dataset(tmp_path / "x", categories=("wig",), n_subjects=1, n_frames=1, size=32)
