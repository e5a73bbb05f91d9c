import numpy as np
import pytest
import torch

from persona.container import ContainerError, load_container, save_container
from persona.gradcore import Adam, GradError, ParamStore, backward, grad_check


def test_container_roundtrip(tmp_path):
    path = tmp_path / "blob.bin"
    tensors = {
        "a": np.arange(12, dtype=np.float32).reshape(3, 4),
        "b": np.array([[1.5, -2.5]], dtype=np.float64),
        "c": np.array([1, 2, 3], dtype=np.int64),
        "img": np.zeros((2, 2, 3), dtype=np.uint8),
        "flag": np.array(True),
        "scalar": np.float64(3.25),
    }
    meta = {"kind": "test", "nested": {"x": [1, 2]}}
    save_container(path, tensors, meta)
    loaded, got_meta = load_container(path)
    assert got_meta == meta
    assert set(loaded) == set(tensors)
    for name in tensors:
        ref = np.asarray(tensors[name])
        assert loaded[name].shape == ref.shape
        assert loaded[name].dtype == ref.dtype
        np.testing.assert_array_equal(loaded[name], ref)


def test_container_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x10\x00\x00\x00\x00\x00\x00\x00not json at all!")
    with pytest.raises(ContainerError):
        load_container(path)
    path.write_bytes(b"\x04")
    with pytest.raises(ContainerError):
        load_container(path)


def test_container_detects_truncated_payload(tmp_path):
    path = tmp_path / "trunc.bin"
    save_container(path, {"a": np.ones(100, dtype=np.float64)})
    data = path.read_bytes()
    path.write_bytes(data[:-40])
    with pytest.raises(ContainerError):
        load_container(path)


def test_store_register_and_flags():
    store = ParamStore()
    w = store.register("w", torch.zeros(3, 2))
    assert w.requires_grad
    store.register("idx", torch.arange(3), trainable=False)
    with pytest.raises(GradError):
        store.register("w", torch.zeros(1))
    with pytest.raises(GradError):
        store.register("bad", torch.arange(3), trainable=True)
    assert store.trainable_names() == ["w"]
    store.set_trainable("w", False)
    assert store.trainable_names() == []


def test_store_replace_changes_shape():
    store = ParamStore()
    store.register("pts", torch.zeros(4, 3))
    store.replace("pts", torch.zeros(7, 3))
    assert store["pts"].shape == (7, 3)
    assert store["pts"].requires_grad


def test_backward_validates_before_writing():
    store = ParamStore()
    w = store.register("w", torch.tensor([2.0, 3.0], dtype=torch.float64))
    loss = (w**2).sum()
    grads = backward(loss, store)
    np.testing.assert_allclose(grads["w"].numpy(), [4.0, 6.0])

    bad = (w / 0.0).sum()
    with pytest.raises(GradError, match="non-finite"):
        backward(bad, store)
    with pytest.raises(GradError, match="scalar"):
        backward(w, store)


def test_backward_zero_for_unused_params():
    store = ParamStore()
    a = store.register("a", torch.ones(2, dtype=torch.float64))
    store.register("b", torch.ones(3, dtype=torch.float64))
    grads = backward(a.sum(), store)
    assert torch.all(grads["b"] == 0)


def test_grad_check_catches_wrong_gradient():
    store = ParamStore()
    w = store.register("w", torch.tensor([0.3, -0.7], dtype=torch.float64))

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x**2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3.0 * x  # should be 2x

        generate_vmap_rule = False

    report = grad_check(lambda: Wrong.apply(w), store)
    assert not report.ok(rtol=1e-4)

    good = grad_check(lambda: (w**2).sum(), store)
    assert good.ok(rtol=1e-6)


def test_grad_check_requires_determinism():
    store = ParamStore()
    w = store.register("w", torch.ones(2, dtype=torch.float64))
    state = {"n": 0.0}

    def noisy():
        state["n"] += 1.0
        return (w * state["n"]).sum()

    with pytest.raises(GradError, match="deterministic"):
        grad_check(noisy, store)


def test_grad_check_samples_large_tensors():
    store = ParamStore()
    w = store.register("w", torch.randn(400, dtype=torch.float64, generator=torch.Generator().manual_seed(0)))
    report = grad_check(
        lambda: (w**3).sum(), store, max_entries_per_param=10, rng=np.random.default_rng(1)
    )
    assert len(report.entries) == 10
    assert report.ok(rtol=1e-5)


def test_adam_matches_torch_reference():
    torch.manual_seed(0)
    init = torch.randn(5, 3, dtype=torch.float64)
    store = ParamStore()
    p = store.register("p", init)
    opt = Adam(store, lr=1e-2)

    ref = init.detach().clone().requires_grad_(True)
    torch_opt = torch.optim.Adam([ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)

    target = torch.randn(5, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(7))
    for _ in range(25):
        grads = backward(((p - target) ** 2).sum(), store)
        opt.step(grads)

        torch_opt.zero_grad()
        ((ref - target) ** 2).sum().backward()
        torch_opt.step()

    np.testing.assert_allclose(p.detach().numpy(), ref.detach().numpy(), rtol=1e-12, atol=1e-12)


def test_adam_remap_preserves_survivor_moments():
    store = ParamStore()
    p = store.register("pts", torch.zeros(4, 3, dtype=torch.float64))
    opt = Adam(store, lr=1e-2)
    g = torch.arange(12, dtype=torch.float64).reshape(4, 3)
    opt.step({"pts": g})
    m_before = opt.state["pts"]["m"].clone()

    survivors = torch.tensor([0, 2])
    store.replace("pts", torch.zeros(5, 3, dtype=torch.float64))
    opt.remap("pts", survivors, new_count=5)

    m_after = opt.state["pts"]["m"]
    assert m_after.shape == (5, 3)
    np.testing.assert_array_equal(m_after[:2].numpy(), m_before[[0, 2]].numpy())
    assert torch.all(m_after[2:] == 0)


def test_adam_skips_frozen_params():
    store = ParamStore()
    p = store.register("p", torch.ones(2, dtype=torch.float64))
    opt = Adam(store, lr=0.1)
    store.set_trainable("p", False)
    opt.step({"p": torch.ones(2, dtype=torch.float64)})
    np.testing.assert_array_equal(p.detach().numpy(), [1.0, 1.0])


def test_adam_export_load_roundtrip():
    store = ParamStore()
    p = store.register("p", torch.randn(3, dtype=torch.float64, generator=torch.Generator().manual_seed(3)))
    opt = Adam(store, lr=1e-2)
    for _ in range(3):
        opt.step(backward((p**4).sum(), store))
    tensors, steps = opt.export()

    opt2 = Adam(store, lr=1e-2)
    opt2.load(tensors, steps)
    assert opt2.state["p"]["t"] == 3
    np.testing.assert_array_equal(opt2.state["p"]["m"].numpy(), opt.state["p"]["m"].numpy())

    # continued updates agree bitwise
    g = torch.full((3,), 0.25, dtype=torch.float64)
    p_ref = p.detach().clone()
    opt.step({"p": g})
    after_a = p.detach().clone()
    with torch.no_grad():
        p.copy_(p_ref)
    opt2.step({"p": g})
    np.testing.assert_array_equal(p.detach().numpy(), after_a.numpy())


def test_store_export_load_roundtrip(tmp_path):
    store = ParamStore()
    store.register("w", torch.randn(4, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(5)))
    store.register("ids", torch.arange(4), trainable=False)
    snap = store.export()
    save_container(tmp_path / "s.bin", snap, {"trainable": store.trainable_names()})
    loaded, meta = load_container(tmp_path / "s.bin")

    store2 = ParamStore()
    store2.register("w", torch.zeros(4, 2, dtype=torch.float64))
    store2.register("ids", torch.zeros(4, dtype=torch.int64), trainable=False)
    store2.load(loaded)
    np.testing.assert_array_equal(store2["w"].detach().numpy(), snap["w"])
    assert meta["trainable"] == ["w"]
