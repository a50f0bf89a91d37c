import json
from collections import Counter

import numpy as np
import pytest

from corrmorph.geometry import PHYSICAL, DisplacementField, PointSet, point_mesh_distance
from corrmorph.synthdata import (
    GenParams,
    REGION_NAMES,
    build_dataset,
    generate_case,
    icosphere,
    kernel_transfer,
    kernel_transfer_oracle,
    load_manifest,
    region_labels,
    sample_surface,
    segment_displacement,
    _rotation_matrix,
)


def kernel_oracle_loops(bone, disp, skin, h):
    out = np.zeros((len(skin), 3))
    for i, x in enumerate(skin):
        ws, acc = 0.0, np.zeros(3)
        for b, d in zip(bone, disp):
            w = np.exp(-np.sum((x - b) ** 2) / h**2)
            ws += w
            acc += w * d
        out[i] = acc / ws
    return out


@pytest.fixture(scope="module")
def small_case():
    return generate_case(GenParams(seed=3, subdivisions=2, sample_points=64))


# ---------------------------------------------------------------------------
# Mesh primitives


def test_icosphere_counts():
    m = icosphere(2)
    assert len(m.vertices) == 162
    assert len(m.faces) == 320
    assert np.abs(np.linalg.norm(m.vertices, axis=1) - 1.0).max() < 1e-12


def test_case_determinism():
    p = GenParams(seed=9, subdivisions=2, sample_points=64)
    a, b = generate_case(p), generate_case(p)
    assert np.array_equal(a.bone_mesh.vertices, b.bone_mesh.vertices)
    assert np.array_equal(a.skin_mesh.vertices, b.skin_mesh.vertices)
    assert np.array_equal(a.gt_skin_disp.vectors, b.gt_skin_disp.vectors)
    assert np.array_equal(a.segment_labels, b.segment_labels)


def test_meshes_are_manifold(small_case):
    for mesh in (small_case.bone_mesh, small_case.skin_mesh):
        edges = Counter()
        for f in mesh.faces:
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                edges[(min(a, b), max(a, b))] += 1
        assert max(edges.values()) <= 2


def test_segment_labels_partition(small_case):
    labels = small_case.segment_labels
    assert labels.min() == 0
    assert labels.max() == len(small_case.segment_transforms) - 1
    assert np.all(np.bincount(labels) > 0)  # every segment nonempty
    assert len(labels) == len(small_case.bone_mesh.vertices)


def test_zero_transforms_give_zero_ground_truth(small_case):
    identity = [(np.eye(3), np.zeros(3))] * len(small_case.segment_transforms)
    disp = segment_displacement(
        small_case.bone_mesh.vertices, small_case.segment_labels, identity
    )
    assert np.all(disp == 0.0)
    gt = kernel_transfer(small_case.bone_mesh.vertices, disp, small_case.skin_mesh.vertices, 15.0)
    assert np.all(gt == 0.0)


def test_transform_limits(small_case):
    for rot, _ in small_case.segment_transforms:
        angle = np.degrees(np.arccos(np.clip((np.trace(rot) - 1) / 2, -1, 1)))
        assert angle <= 15.0 + 1e-9


# ---------------------------------------------------------------------------
# Kernel transfer oracle


def test_kernel_constant_field(rng):
    bone = rng.normal(size=(30, 3)) * 20
    skin = rng.normal(size=(10, 3)) * 25
    t = np.array([1.5, -2.0, 0.25])
    out = kernel_transfer(bone, np.tile(t, (30, 1)), skin, h=10.0)
    assert np.abs(out - t).max() < 1e-9


def test_kernel_zero_field(rng):
    bone = rng.normal(size=(10, 3))
    skin = rng.normal(size=(6, 3))
    out = kernel_transfer(bone, np.zeros((10, 3)), skin, h=5.0)
    assert np.all(out == 0.0)


def test_kernel_matches_loop_oracle(rng):
    bone = rng.normal(size=(25, 3)) * 15
    disp = rng.normal(size=(25, 3)) * 4
    skin = rng.normal(size=(12, 3)) * 18
    got = kernel_transfer(bone, disp, skin, h=12.0)
    want = kernel_oracle_loops(bone, disp, skin, 12.0)
    assert np.abs(got - want).max() < 1e-9


def test_kernel_convex_bounds(rng):
    bone = rng.normal(size=(40, 3)) * 30
    disp = rng.normal(size=(40, 3)) * 8
    skin = rng.normal(size=(20, 3)) * 35
    out = kernel_transfer(bone, disp, skin, h=15.0)
    for c in range(3):
        assert np.all(out[:, c] <= disp[:, c].max() + 1e-12)
        assert np.all(out[:, c] >= disp[:, c].min() - 1e-12)


def test_kernel_rotation_equivariance(rng):
    bone = rng.normal(size=(30, 3)) * 25
    disp = rng.normal(size=(30, 3)) * 5
    skin = rng.normal(size=(14, 3)) * 28
    rot = _rotation_matrix(np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5]), 0.9)
    base = kernel_transfer(bone, disp, skin, h=14.0)
    rotated = kernel_transfer(bone @ rot.T, disp @ rot.T, skin @ rot.T, h=14.0)
    assert np.abs(rotated - base @ rot.T).max() < 1e-9


def test_kernel_typed_wrapper_units(rng):
    bone = PointSet(rng.normal(size=(5, 3)), unit=PHYSICAL)
    skin = PointSet(rng.normal(size=(4, 3)), unit=PHYSICAL)
    disp = DisplacementField(rng.normal(size=(5, 3)), unit=PHYSICAL)
    out = kernel_transfer_oracle(bone, disp, skin, h=3.0)
    assert out.unit == PHYSICAL and len(out) == 4
    with pytest.raises(ValueError, match="positive"):
        kernel_transfer_oracle(bone, disp, skin, h=0.0)


def test_kernel_normalized_frame_matches_physical(rng):
    """Running the transfer in the normalized frame (with the bandwidth scaled
    the same way) and mapping back must equal the physical-frame transfer."""
    from corrmorph.geometry import (
        DisplacementField,
        PHYSICAL,
        PointSet,
        denormalize_displacement,
        normalize_displacement,
        normalize_pair,
    )

    bone = rng.normal(size=(30, 3)) * 25 + 10
    disp = rng.normal(size=(30, 3)) * 5
    skin = rng.normal(size=(20, 3)) * 30 + 10
    h = 14.0
    direct = kernel_transfer(bone, disp, skin, h)

    skin_n, bone_n, _, t = normalize_pair(
        PointSet(skin, unit=PHYSICAL), PointSet(bone, unit=PHYSICAL), PointSet(bone, unit=PHYSICAL)
    )
    disp_n = normalize_displacement(DisplacementField(disp, unit=PHYSICAL), t)
    out_n = kernel_transfer(bone_n.coords, disp_n.vectors, skin_n.coords, h / t.scale)
    back = denormalize_displacement(DisplacementField(out_n, unit="normalized"), t)
    assert np.abs(back.vectors - direct).max() < 1e-9


def test_kernel_far_points_do_not_underflow(rng):
    bone = rng.normal(size=(8, 3))
    disp = np.tile([1.0, 0.0, 0.0], (8, 1))
    skin = np.array([[5000.0, 0.0, 0.0]])  # weights would all underflow naively
    out = kernel_transfer(bone, disp, skin, h=1.0)
    assert np.all(np.isfinite(out))
    assert abs(out[0, 0] - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# Sampling and regions


def test_samples_lie_on_surface(small_case, rng):
    pts = sample_surface(small_case.skin_mesh, 64, rng)
    d = point_mesh_distance(pts, small_case.skin_mesh)
    assert d.max() < 1e-6


def test_region_labels_cover_all_six(rng):
    v = rng.normal(size=(2000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    labels = region_labels(v * 50, np.zeros(3))
    assert set(labels) == set(range(len(REGION_NAMES)))


# ---------------------------------------------------------------------------
# Dataset on disk


def test_build_dataset_layout(tiny_dataset):
    manifest = load_manifest(tiny_dataset)
    assert len(manifest["cases"]) == 4
    assert len(manifest["folds"]) == 2
    ids = sorted(i for fold in manifest["folds"] for i in fold)
    assert ids == [0, 1, 2, 3]  # disjoint and covering
    case = tiny_dataset / "case_000"
    for fname in (
        "bone.ply",
        "skin.ply",
        "labels.csv",
        "transforms.json",
        "samples_bone.csv",
        "samples_skin.csv",
        "skin_disp.csv",
    ):
        assert (case / fname).exists(), fname


def test_fold_assignment_deterministic(tmp_path, tiny_params):
    a = build_dataset(tmp_path / "a", 4, 2, tiny_params)
    b = build_dataset(tmp_path / "b", 4, 2, tiny_params)
    assert a["folds"] == b["folds"]
    bytes_a = (tmp_path / "a" / "case_001" / "samples_skin.csv").read_bytes()
    bytes_b = (tmp_path / "b" / "case_001" / "samples_skin.csv").read_bytes()
    assert bytes_a == bytes_b


def test_transforms_json_schema(tiny_dataset):
    raw = json.loads((tiny_dataset / "case_000" / "transforms.json").read_text())
    assert "segments" in raw
    for sid, t in raw["segments"].items():
        rot = np.array(t["rotation"])
        assert rot.shape == (3, 3)
        assert np.abs(rot @ rot.T - np.eye(3)).max() < 1e-9  # proper rigid rotation
        assert len(t["translation"]) == 3


def test_dataset_rejects_too_few_cases(tmp_path, tiny_params):
    with pytest.raises(ValueError, match="folds"):
        build_dataset(tmp_path / "x", 2, 3, tiny_params)


def test_genparams_validation():
    with pytest.raises(ValueError):
        GenParams(kernel_h=-1.0)
    with pytest.raises(ValueError):
        GenParams(segment_range=(1, 4))
    with pytest.raises(ValueError):
        GenParams(rotation_deg=(0.0, 40.0))
    with pytest.raises(ValueError):
        GenParams(thickness_range=(5.0, 2.0))
