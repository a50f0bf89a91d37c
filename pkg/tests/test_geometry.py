import numpy as np
import pytest

from corrmorph.geometry import (
    NORMALIZED,
    PHYSICAL,
    DisplacementField,
    NormTransform,
    PointSet,
    TriMesh,
    ball_query,
    closest_point_matrix,
    denormalize_displacement,
    farthest_point_sample,
    idw_interpolate,
    lexicographic_start,
    normalize_pair,
    point_mesh_distance,
    point_triangle_distance,
)


# ---------------------------------------------------------------------------
# Brute-force oracles, written independently of the library implementations.


def fps_oracle(coords, k, start):
    chosen = [start]
    while len(chosen) < k:
        best_i, best_d = -1, -1.0
        for i in range(len(coords)):
            d = min(np.sum((coords[i] - coords[j]) ** 2) for j in chosen)
            if d > best_d:  # strict: ties keep the earlier (lower) index
                best_i, best_d = i, d
        chosen.append(best_i)
    return chosen


def ball_query_oracle(centers, pts, radius, max_n):
    out = []
    for c in centers:
        cand = sorted(
            ((np.linalg.norm(p - c), j) for j, p in enumerate(pts)),
            key=lambda t: (t[0], t[1]),
        )
        inside = [j for d, j in cand if d <= radius][:max_n]
        out.append(inside if inside else [cand[0][1]])
    return out


def idw_oracle(src, vals, dst, k):
    out = np.zeros((len(dst), vals.shape[1]))
    for m, q in enumerate(dst):
        cand = sorted(((np.linalg.norm(p - q), j) for j, p in enumerate(src)), key=lambda t: (t[0], t[1]))
        sel = cand[:k]
        if sel[0][0] == 0.0:
            out[m] = vals[sel[0][1]]
            continue
        ws = [1.0 / max(d, 1e-8) ** 2 for d, _ in sel]
        out[m] = sum(w * vals[j] for w, (_, j) in zip(ws, sel)) / sum(ws)
    return out


def closest_oracle(facial, bony):
    r = np.zeros((len(facial), len(bony)))
    for i, f in enumerate(facial):
        best_j, best_d = 0, np.inf
        for j, b in enumerate(bony):
            d = np.sum((f - b) ** 2)
            if d < best_d:
                best_j, best_d = j, d
        r[i, best_j] = 1.0
    return r


def point_triangle_oracle(p, a, b, c):
    """Eberly-style constrained quadratic minimization over the triangle."""
    e0, e1 = b - a, c - a
    d = a - p
    a00, a01, a11 = e0 @ e0, e0 @ e1, e1 @ e1
    b0, b1 = e0 @ d, e1 @ d
    det = max(a00 * a11 - a01 * a01, 0.0)
    s, t = a01 * b1 - a11 * b0, a01 * b0 - a00 * b1
    if s + t <= det:
        if s < 0:
            if t < 0:  # region 4
                if b0 < 0:
                    s, t = min(max(-b0 / a00, 0.0), 1.0), 0.0
                else:
                    s, t = 0.0, min(max(-b1 / a11, 0.0), 1.0)
            else:  # region 3
                s, t = 0.0, min(max(-b1 / a11, 0.0), 1.0)
        elif t < 0:  # region 5
            s, t = min(max(-b0 / a00, 0.0), 1.0), 0.0
        else:  # region 0
            s, t = s / det, t / det
    else:
        if s < 0:  # region 2
            tmp0, tmp1 = a01 + b0, a11 + b1
            if tmp1 > tmp0:
                numer, denom = tmp1 - tmp0, a00 - 2 * a01 + a11
                s = min(max(numer / denom, 0.0), 1.0)
                t = 1.0 - s
            else:
                s, t = 0.0, min(max(-b1 / a11, 0.0), 1.0)
        elif t < 0:  # region 6
            tmp0, tmp1 = a01 + b1, a00 + b0
            if tmp1 > tmp0:
                numer, denom = tmp1 - tmp0, a00 - 2 * a01 + a11
                t = min(max(numer / denom, 0.0), 1.0)
                s = 1.0 - t
            else:
                s, t = min(max(-b0 / a00, 0.0), 1.0), 0.0
        else:  # region 1
            numer = (a11 + b1) - (a01 + b0)
            denom = a00 - 2 * a01 + a11
            s = min(max(numer / denom, 0.0), 1.0)
            t = 1.0 - s
    closest = a + s * e0 + t * e1
    return np.linalg.norm(p - closest)


# ---------------------------------------------------------------------------
# Types


def test_pointset_validation():
    with pytest.raises(ValueError):
        PointSet(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointSet(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        PointSet(np.array([[np.nan, 0, 0]]))
    with pytest.raises(ValueError):
        PointSet(np.zeros((3, 3)), unit="parsecs")


def test_trimesh_validation():
    verts = np.eye(3)
    TriMesh(verts, [[0, 1, 2]])
    with pytest.raises(ValueError):
        TriMesh(verts, [[0, 1, 1]])  # degenerate
    with pytest.raises(ValueError):
        TriMesh(verts, [[0, 1, 3]])  # out of range


def test_norm_transform_roundtrip():
    t = NormTransform(np.array([1.0, -2.0, 3.0]), 50.0)
    x = np.random.default_rng(0).normal(size=(20, 3)) * 30
    back = t.invert(t.apply(x))
    assert np.abs(back - x).max() < 1e-6
    with pytest.raises(ValueError):
        NormTransform(np.zeros(3), 0.0)


def test_displacement_field_validation():
    with pytest.raises(ValueError):
        DisplacementField(np.array([[np.inf, 0, 0]]))


# ---------------------------------------------------------------------------
# normalize_pair


def _physical(coords):
    return PointSet(coords, unit=PHYSICAL)


def test_normalize_identity_case(rng):
    v = rng.normal(size=(40, 3))
    v -= v.mean(axis=0)
    facial = v / np.linalg.norm(v, axis=1).max()
    bony = facial * 0.5
    # centroid of the union is not exactly 0 for arbitrary clouds; build one
    # where it is: mirrored points
    facial = np.concatenate([facial, -facial])
    facial /= np.linalg.norm(facial, axis=1).max()
    bony = facial * 0.5
    f_n, b_n, bp_n, t = normalize_pair(_physical(facial), _physical(bony), _physical(bony))
    assert np.abs(t.center).max() < 1e-12
    assert abs(t.scale - 1.0) < 1e-12
    assert np.abs(f_n.coords - facial).max() < 1e-12


def test_normalize_translation_cancels(rng):
    f = rng.normal(size=(30, 3))
    b = rng.normal(size=(25, 3))
    bp = b + rng.normal(size=(25, 3)) * 0.1
    out1 = normalize_pair(_physical(f), _physical(b), _physical(bp))
    shift = np.array([10.0, -5.0, 3.0])
    out2 = normalize_pair(_physical(f + shift), _physical(b + shift), _physical(bp + shift))
    for a, c in zip(out1[:3], out2[:3]):
        assert np.abs(a.coords - c.coords).max() < 1e-12


def test_normalize_roundtrip(rng):
    f = rng.normal(size=(30, 3)) * 40 + 5
    b = rng.normal(size=(20, 3)) * 30
    f_n, b_n, _, t = normalize_pair(_physical(f), _physical(b), _physical(b))
    assert np.abs(t.invert(f_n.coords) - f).max() < 1e-6
    assert np.abs(t.invert(b_n.coords) - b).max() < 1e-6
    assert np.linalg.norm(f_n.coords, axis=1).max() <= 1.0 + 1e-12
    assert np.linalg.norm(b_n.coords, axis=1).max() <= 1.0 + 1e-12


def test_normalize_scale_equivariance(rng):
    f = rng.normal(size=(30, 3)) * 40
    b = rng.normal(size=(20, 3)) * 30
    out1 = normalize_pair(_physical(f), _physical(b), _physical(b))
    s = 3.7
    out2 = normalize_pair(_physical(f * s), _physical(b * s), _physical(b * s))
    for a, c in zip(out1[:3], out2[:3]):
        assert np.abs(a.coords - c.coords).max() < 1e-9
    assert abs(out2[3].scale - s * out1[3].scale) < 1e-9 * out1[3].scale


def test_normalize_degenerate_rejected():
    same = np.ones((5, 3))
    with pytest.raises(ValueError, match="degenerate"):
        normalize_pair(_physical(same), _physical(same), _physical(same))


def test_normalize_requires_physical(rng):
    f = PointSet(rng.normal(size=(5, 3)), unit=NORMALIZED)
    p = _physical(rng.normal(size=(5, 3)))
    with pytest.raises(ValueError, match="physical"):
        normalize_pair(f, p, p)


# ---------------------------------------------------------------------------
# denormalize_displacement


def test_denormalize_zero():
    t = NormTransform(np.zeros(3), 50.0)
    v = DisplacementField(np.zeros((4, 3)), unit=NORMALIZED)
    out = denormalize_displacement(v, t)
    assert np.all(out.vectors == 0.0) and out.unit == PHYSICAL


def test_denormalize_scaling():
    t = NormTransform(np.array([7.0, 8.0, 9.0]), 50.0)
    v = DisplacementField(np.array([[0.1, 0.0, 0.0]]), unit=NORMALIZED)
    out = denormalize_displacement(v, t)
    assert np.allclose(out.vectors, [[5.0, 0.0, 0.0]], atol=1e-15)


def test_denormalize_unit_mismatch():
    t = NormTransform(np.zeros(3), 2.0)
    with pytest.raises(ValueError):
        denormalize_displacement(DisplacementField(np.zeros((1, 3)), unit=PHYSICAL), t)


# ---------------------------------------------------------------------------
# farthest_point_sample


def test_fps_single():
    ps = PointSet(np.random.default_rng(1).normal(size=(10, 3)), unit=NORMALIZED)
    assert list(farthest_point_sample(ps, 1, start=0)) == [0]
    assert list(farthest_point_sample(ps, 1, start=7)) == [7]


def test_fps_collinear():
    ps = PointSet(np.array([[0, 0, 0], [1, 0, 0], [0.5, 0, 0]]), unit=NORMALIZED)
    assert list(farthest_point_sample(ps, 2, start=0)) == [0, 1]


def test_fps_rejects_bad_k():
    ps = PointSet(np.zeros((3, 3)) + np.arange(3)[:, None], unit=NORMALIZED)
    with pytest.raises(ValueError):
        farthest_point_sample(ps, 4, start=0)
    with pytest.raises(ValueError):
        farthest_point_sample(ps, 2, start=3)


def test_fps_matches_oracle(rng):
    coords = rng.normal(size=(64, 3))
    ps = PointSet(coords, unit=NORMALIZED)
    got = list(farthest_point_sample(ps, 8, start=3))
    assert got == fps_oracle(coords, 8, 3)


def test_fps_exhaustive_small_sizes(rng):
    # exactness across sizes, ks, and starts (includes duplicate points -> ties)
    for n in (2, 5, 9, 17):
        coords = np.round(rng.normal(size=(n, 3)), 1)  # rounding forces ties
        ps = PointSet(coords, unit=NORMALIZED)
        for k in range(1, n + 1):
            for start in range(0, n, max(1, n // 3)):
                got = list(farthest_point_sample(ps, k, start=start))
                assert got == fps_oracle(coords, k, start), (n, k, start)


def test_lexicographic_start():
    coords = np.array([[1, 0, 0], [0, 5, 0], [0, 2, 7], [0, 2, 3]])
    assert lexicographic_start(coords) == 3


# ---------------------------------------------------------------------------
# ball_query


def test_ball_query_coincident_center():
    pts = PointSet(np.array([[0.0, 0, 0], [1, 0, 0]]), unit=NORMALIZED)
    out = ball_query(PointSet(np.array([[0.0, 0, 0]]), unit=NORMALIZED), pts, 0.5, 4)
    assert list(out[0]) == [0]


def test_ball_query_radius_cut():
    pts = PointSet(np.array([[0.05, 0, 0], [0.2, 0, 0]]), unit=NORMALIZED)
    out = ball_query(PointSet(np.zeros((1, 3)), unit=NORMALIZED), pts, 0.1, 4)
    assert list(out[0]) == [0]


def test_ball_query_empty_fallback():
    pts = PointSet(np.array([[1.0, 0, 0], [2.0, 0, 0]]), unit=NORMALIZED)
    out = ball_query(PointSet(np.zeros((1, 3)), unit=NORMALIZED), pts, 0.1, 4)
    assert list(out[0]) == [0]  # nearest point even though outside the radius


def test_ball_query_matches_oracle(rng):
    pts = rng.normal(size=(256, 3)) * 0.5
    centers = pts[rng.choice(256, 32, replace=False)]
    got = ball_query(
        PointSet(centers, unit=NORMALIZED), PointSet(pts, unit=NORMALIZED), 0.1, 32
    )
    want = ball_query_oracle(centers, pts, 0.1, 32)
    for g, w in zip(got, want):
        assert list(g) == list(w)


def test_ball_query_order_independence(rng):
    pts = rng.normal(size=(60, 3))
    centers = rng.normal(size=(5, 3)) * 0.3
    perm = rng.permutation(60)
    a = ball_query(PointSet(centers, unit=NORMALIZED), PointSet(pts, unit=NORMALIZED), 0.8, 8)
    b = ball_query(PointSet(centers, unit=NORMALIZED), PointSet(pts[perm], unit=NORMALIZED), 0.8, 8)
    inv = np.argsort(perm)
    for ga, gb in zip(a, b):
        assert list(ga) == list(perm[gb])  # same points, expressed in original ids


# ---------------------------------------------------------------------------
# idw_interpolate


def test_idw_exact_copy(rng):
    src = PointSet(rng.normal(size=(10, 3)), unit=NORMALIZED)
    vals = rng.normal(size=(10, 4))
    out = idw_interpolate(src, vals, src, k=1)
    assert np.array_equal(out, vals)


def test_idw_exact_copy_k3(rng):
    src = PointSet(rng.normal(size=(10, 3)), unit=NORMALIZED)
    vals = rng.normal(size=(10, 2))
    out = idw_interpolate(src, vals, src, k=3)  # self is among the neighbors
    assert np.abs(out - vals).max() < 1e-12


def test_idw_constant(rng):
    src = PointSet(rng.normal(size=(12, 3)), unit=NORMALIZED)
    dst = PointSet(rng.normal(size=(7, 3)), unit=NORMALIZED)
    vals = np.full((12, 2), 3.25)
    out = idw_interpolate(src, vals, dst, k=4)
    assert np.abs(out - 3.25).max() < 1e-12


def test_idw_matches_oracle(rng):
    src = rng.normal(size=(20, 3))
    dst = rng.normal(size=(9, 3))
    vals = rng.normal(size=(20, 5))
    got = idw_interpolate(
        PointSet(src, unit=NORMALIZED), vals, PointSet(dst, unit=NORMALIZED), k=3
    )
    want = idw_oracle(src, vals, dst, 3)
    assert np.abs(got - want).max() < 1e-6


def test_idw_envelope(rng):
    src = rng.normal(size=(15, 3))
    dst = rng.normal(size=(8, 3))
    vals = rng.normal(size=(15, 2))
    from corrmorph.geometry import idw_weights

    idx, w = idw_weights(src, dst, 3)
    out = idw_interpolate(PointSet(src, unit=NORMALIZED), vals, PointSet(dst, unit=NORMALIZED), 3)
    sel = vals[idx]
    assert np.all(out <= sel.max(axis=1) + 1e-12)
    assert np.all(out >= sel.min(axis=1) - 1e-12)


# ---------------------------------------------------------------------------
# closest_point_matrix


def test_closest_identity(rng):
    pts = rng.normal(size=(9, 3))
    r = closest_point_matrix(PointSet(pts, unit=NORMALIZED), PointSet(pts, unit=NORMALIZED))
    assert np.array_equal(r, np.eye(9))


def test_closest_row_sums(rng):
    f = rng.normal(size=(14, 3))
    b = rng.normal(size=(11, 3))
    r = closest_point_matrix(PointSet(f, unit=NORMALIZED), PointSet(b, unit=NORMALIZED))
    assert np.array_equal(r.sum(axis=1), np.ones(14))


def test_closest_matches_oracle(rng):
    f = rng.normal(size=(16, 3))
    b = rng.normal(size=(13, 3))
    got = closest_point_matrix(PointSet(f, unit=NORMALIZED), PointSet(b, unit=NORMALIZED))
    assert np.array_equal(got, closest_oracle(f, b))


# ---------------------------------------------------------------------------
# point-to-triangle / point-to-mesh


def test_point_triangle_matches_oracle(rng):
    for _ in range(80):
        tri = rng.normal(size=(3, 3))
        pts = rng.normal(size=(6, 3)) * 2
        got = point_triangle_distance(pts, tri)
        want = [point_triangle_oracle(p, *tri) for p in pts]
        assert np.abs(got - want).max() < 1e-9


def test_point_mesh_distance_plane():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    mesh = TriMesh(verts, [[0, 1, 2], [1, 3, 2]])
    pts = np.array([[0.3, 0.3, 0.7], [2.0, 0.0, 0.0]])
    d = point_mesh_distance(pts, mesh)
    assert abs(d[0] - 0.7) < 1e-12
    assert abs(d[1] - 1.0) < 1e-12
