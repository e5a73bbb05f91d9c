import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from persona.gradcore import ParamStore, grad_check
from persona.headmodel import (
    DeformError,
    HeadTemplate,
    blend_shapes,
    compute_joints,
    knn_inverse_distance,
    lbs,
    lbs_rotation,
    make_toy_template,
    matrix_to_quat,
    polar_rotation,
    pose_feature,
    pose_template,
    pose_to_rotmats,
    quat_canonical,
    quat_multiply,
    quat_to_matrix,
    relative_to_absolute,
    rodrigues,
)

RNG = np.random.default_rng(42)


def rand_axis_angle(n):
    v = RNG.standard_normal((n, 3))
    v *= RNG.uniform(0, np.pi, (n, 1)) / np.linalg.norm(v, axis=1, keepdims=True)
    return torch.as_tensor(v, dtype=torch.float64)


def test_rodrigues_matches_scipy():
    aa = rand_axis_angle(50)
    ours = rodrigues(aa).numpy()
    ref = Rotation.from_rotvec(aa.numpy()).as_matrix()
    np.testing.assert_allclose(ours, ref, atol=1e-12)


def test_rodrigues_zero_angle_is_identity_with_finite_grad():
    aa = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    r = rodrigues(aa)
    np.testing.assert_array_equal(r.detach().numpy(), np.eye(3))
    r.sum().backward()
    assert torch.isfinite(aa.grad).all()

    store = ParamStore()
    w = store.register("aa", torch.tensor([1e-5, -2e-5, 3e-6], dtype=torch.float64))
    report = grad_check(lambda: (rodrigues(w) * torch.arange(9.0, dtype=torch.float64).reshape(3, 3)).sum(), store)
    assert report.ok(rtol=1e-6)


def test_quat_multiply_matches_scipy():
    qa = Rotation.random(20, random_state=1)
    qb = Rotation.random(20, random_state=2)
    # scipy uses (x, y, z, w); ours is (w, x, y, z)
    to_ours = lambda r: torch.as_tensor(np.roll(r.as_quat(), 1, axis=-1), dtype=torch.float64)
    ours = quat_multiply(to_ours(qa), to_ours(qb)).numpy()
    ref = np.roll((qa * qb).as_quat(), 1, axis=-1)
    sign = np.sign(np.sum(ours * ref, axis=-1, keepdims=True))
    np.testing.assert_allclose(ours, ref * sign, atol=1e-12)


def test_quat_matrix_roundtrip():
    r = Rotation.random(100, random_state=3)
    q = torch.as_tensor(np.roll(r.as_quat(), 1, axis=-1), dtype=torch.float64)
    q = quat_canonical(q)
    m = quat_to_matrix(q)
    np.testing.assert_allclose(m.numpy(), r.as_matrix(), atol=1e-12)
    q2 = matrix_to_quat(m)
    np.testing.assert_allclose(q2.numpy(), q.numpy(), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-np.pi, np.pi), min_size=3, max_size=3))
def test_rodrigues_is_rotation(aa):
    r = rodrigues(torch.tensor(aa, dtype=torch.float64))
    eye = torch.eye(3, dtype=torch.float64)
    assert torch.allclose(r @ r.mT, eye, atol=1e-10)
    assert abs(float(torch.linalg.det(r)) - 1.0) < 1e-10


def svd_rotation(a: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(a)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def test_polar_rotation_matches_svd_oracle():
    rots = Rotation.random(30, random_state=5).as_matrix()
    w = RNG.dirichlet(np.ones(3), size=10)
    blends = np.einsum("bk,kij->bij", w, rots[:3])  # blends of rotations
    stretched = rots[3:13] * RNG.uniform(0.5, 2.0, (10, 1, 1))
    for a in np.concatenate([blends, stretched]):
        ours = polar_rotation(torch.as_tensor(a, dtype=torch.float64)).numpy()
        np.testing.assert_allclose(ours, svd_rotation(a), atol=1e-10)


def test_polar_rotation_at_identity_has_grad():
    store = ParamStore()
    a = store.register("a", torch.eye(3, dtype=torch.float64) + 1e-4 * torch.ones(3, 3, dtype=torch.float64))
    weights = torch.as_tensor(RNG.standard_normal((3, 3)), dtype=torch.float64)
    report = grad_check(lambda: (polar_rotation(store["a"]) * weights).sum(), store)
    assert report.ok(rtol=1e-5)


def test_polar_rotation_rejects_degenerate():
    flat = torch.diag(torch.tensor([1.0, 1.0, 0.0], dtype=torch.float64))
    with pytest.raises(DeformError, match="degenerate"):
        polar_rotation(flat)
    reflection = torch.diag(torch.tensor([1.0, 1.0, -1.0], dtype=torch.float64))
    with pytest.raises(DeformError):
        polar_rotation(reflection)


@pytest.fixture(scope="module")
def template():
    return make_toy_template(n_vertices=200, seed=0)


def brute_force_lbs(template: HeadTemplate, points, weights, theta):
    """Independent 4x4 homogeneous-chain skinning in numpy."""
    K = template.n_joints
    parents = template.parents.numpy()
    joints = (template.joint_regressor @ template.vertices).numpy()
    R = Rotation.from_rotvec(theta.reshape(K, 3)).as_matrix()
    G = np.zeros((K, 4, 4))
    for k in range(K):
        local = np.eye(4)
        local[:3, :3] = R[k]
        local[:3, 3] = joints[k] - (joints[parents[k]] if parents[k] >= 0 else 0.0)
        G[k] = local if parents[k] < 0 else G[parents[k]] @ local
    out = np.zeros_like(points)
    amats = np.zeros((points.shape[0], 3, 3))
    for i, x in enumerate(points):
        acc = np.zeros(3)
        for k in range(K):
            skin = G[k] @ np.block([[np.eye(3), -joints[k][:, None]], [np.zeros(3), 1.0]])
            acc += weights[i, k] * (skin[:3, :3] @ x + skin[:3, 3])
            amats[i] += weights[i, k] * skin[:3, :3]
        out[i] = acc
    return out, amats


def test_lbs_matches_brute_force_chain(template):
    theta = RNG.uniform(-0.5, 0.5, template.n_joints * 3)
    points = torch.as_tensor(RNG.standard_normal((40, 3)) * 0.1, dtype=torch.float64)
    w_raw = RNG.uniform(0, 1, (40, template.n_joints))
    weights = torch.as_tensor(w_raw / w_raw.sum(1, keepdims=True), dtype=torch.float64)

    rotmats = pose_to_rotmats(torch.as_tensor(theta, dtype=torch.float64), template.n_joints)
    joints = compute_joints(template, torch.zeros(template.n_shape, dtype=torch.float64))
    rot, trans = relative_to_absolute(rotmats, joints, template.parents)
    posed, amat = lbs(points, weights, rot, trans)

    ref_posed, ref_a = brute_force_lbs(template, points.numpy(), weights.numpy(), theta)
    np.testing.assert_allclose(posed.numpy(), ref_posed, atol=1e-12)
    np.testing.assert_allclose(amat.numpy(), ref_a, atol=1e-12)


def test_rest_pose_is_identity(template):
    zero_pose = torch.zeros(template.n_joints * 3, dtype=torch.float64)
    zeros = torch.zeros(template.n_shape, dtype=torch.float64)
    posed = pose_template(template, zeros, zero_pose, torch.zeros(template.n_expr, dtype=torch.float64))
    err = (posed - template.vertices).abs().max()
    assert float(err) <= 1e-12


def test_root_rigid_equivariance(template):
    rot_vec = np.array([0.3, -0.2, 0.5])
    theta_rest = torch.zeros(template.n_joints * 3, dtype=torch.float64)
    theta_rot = theta_rest.clone()
    theta_rot[:3] = torch.as_tensor(rot_vec)
    beta = torch.as_tensor(RNG.standard_normal(template.n_shape) * 0.5, dtype=torch.float64)
    psi = torch.as_tensor(RNG.standard_normal(template.n_expr) * 0.5, dtype=torch.float64)

    base = pose_template(template, beta, theta_rest, psi)
    rotated = pose_template(template, beta, theta_rot, psi)

    root = compute_joints(template, beta)[0].numpy()
    R0 = Rotation.from_rotvec(rot_vec).as_matrix()
    expected = (base.numpy() - root) @ R0.T + root
    np.testing.assert_allclose(rotated.numpy(), expected, atol=1e-12)


def test_blendshape_linearity(template):
    basis = template.shape_basis
    n = template.n_shape
    # unit coefficients extract columns bitwise
    for j in range(n):
        e = torch.zeros(n, dtype=torch.float64)
        e[j] = 1.0
        np.testing.assert_array_equal(blend_shapes(e, basis).numpy(), basis[..., j].numpy())
    c1 = torch.as_tensor(RNG.standard_normal(n), dtype=torch.float64)
    c2 = torch.as_tensor(RNG.standard_normal(n), dtype=torch.float64)
    lhs = blend_shapes(0.5 * c1 + 0.25 * c2, basis)
    rhs = 0.5 * blend_shapes(c1, basis) + 0.25 * blend_shapes(c2, basis)
    np.testing.assert_allclose(lhs.numpy(), rhs.numpy(), atol=1e-15)


def test_pose_feature_zero_at_rest(template):
    rotmats = pose_to_rotmats(torch.zeros(template.n_joints * 3, dtype=torch.float64), template.n_joints)
    f = pose_feature(rotmats)
    assert f.shape == (template.n_pose_feat,)
    np.testing.assert_array_equal(f.numpy(), np.zeros(template.n_pose_feat))


def test_lbs_rotation_recovers_pure_rotation():
    r = Rotation.random(10, random_state=7)
    q_ref = quat_canonical(torch.as_tensor(np.roll(r.as_quat(), 1, axis=-1), dtype=torch.float64))
    q = lbs_rotation(torch.as_tensor(r.as_matrix(), dtype=torch.float64))
    np.testing.assert_allclose(q.numpy(), q_ref.numpy(), atol=1e-9)


def test_knn_interpolation_matches_exhaustive_loop():
    refs = torch.as_tensor(RNG.standard_normal((30, 3)), dtype=torch.float64)
    values = torch.as_tensor(RNG.standard_normal((30, 5)), dtype=torch.float64)
    queries = torch.as_tensor(RNG.standard_normal((12, 3)), dtype=torch.float64)
    out = knn_inverse_distance(queries, refs, values, k=3, eps=1e-8)

    for i in range(queries.shape[0]):
        d = np.linalg.norm(refs.numpy() - queries[i].numpy(), axis=1)
        idx = np.argsort(d)[:3]
        w = 1.0 / (d[idx] + 1e-8)
        w /= w.sum()
        ref = (w[:, None] * values.numpy()[idx]).sum(0)
        np.testing.assert_allclose(out[i].numpy(), ref, atol=1e-12)


def test_knn_exact_at_reference_points():
    refs = torch.as_tensor(RNG.standard_normal((20, 3)), dtype=torch.float64)
    values = torch.as_tensor(RNG.standard_normal((20, 2)), dtype=torch.float64)
    out = knn_inverse_distance(refs[:5], refs, values, k=3)
    # at a reference point the inverse-distance weight concentrates there
    np.testing.assert_allclose(out.numpy(), values[:5].numpy(), atol=1e-6)


def test_template_save_load_roundtrip(tmp_path, template):
    path = tmp_path / "template.bin"
    template.save(path, {"note": "test"})
    loaded = HeadTemplate.load(path, dtype=torch.float64)
    for name in ("vertices", "lbs_weights", "shape_basis", "pose_basis", "expr_basis"):
        np.testing.assert_array_equal(getattr(loaded, name).numpy(), getattr(template, name).numpy())
    assert loaded.parents.dtype == torch.long


def test_template_validate_rejects_bad_tree():
    t = make_toy_template(n_vertices=50, seed=1)
    bad = HeadTemplate(
        vertices=t.vertices,
        parents=torch.tensor([2, 0, 1, 1]),
        joint_regressor=t.joint_regressor,
        lbs_weights=t.lbs_weights,
        shape_basis=t.shape_basis,
        pose_basis=t.pose_basis,
        expr_basis=t.expr_basis,
    )
    with pytest.raises(DeformError):
        bad.validate()


def test_toy_template_is_plausible(template):
    assert template.n_joints == 4
    np.testing.assert_allclose(template.lbs_weights.sum(1).numpy(), 1.0, atol=1e-12)
    np.testing.assert_allclose(template.joint_regressor.sum(1).numpy(), 1.0, atol=1e-12)
    span = template.vertices.max(0).values - template.vertices.min(0).values
    assert 0.15 < float(span.max()) < 0.3
    assert float(template.shape_basis.abs().max()) <= 0.012 + 1e-9


def test_full_deformation_gradcheck(template):
    tmpl64 = template.to(torch.float64)
    store = ParamStore()
    beta = store.register("beta", 0.3 * torch.as_tensor(RNG.standard_normal(tmpl64.n_shape)))
    theta = store.register("theta", 0.2 * torch.as_tensor(RNG.standard_normal(tmpl64.n_joints * 3)))
    psi = store.register("psi", 0.3 * torch.as_tensor(RNG.standard_normal(tmpl64.n_expr)))
    probe = torch.as_tensor(RNG.standard_normal((tmpl64.n_vertices, 3)), dtype=torch.float64)

    def f():
        posed = pose_template(tmpl64, store["beta"], store["theta"], store["psi"])
        return (posed * probe).sum()

    report = grad_check(f, store, max_entries_per_param=12, rng=np.random.default_rng(0))
    assert report.ok(rtol=1e-5), report.summary()
