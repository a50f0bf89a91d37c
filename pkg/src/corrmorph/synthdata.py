"""Synthetic driver/driven case generator with analytic ground truth.

Each case is a bumpy ellipsoid "bone" surface, a "skin" surface offset from it
along vertex normals with smoothly varying thickness, a partition of the bone
into segments by axis-aligned cutting planes, and one random rigid transform
per non-fixed segment. Ground-truth skin displacement comes from a Gaussian
kernel transfer of the per-vertex bone displacement: smooth, local, and
bounded by the input movement, so nearby bone dominates nearby skin.

Everything is a deterministic function of the seed.
"""

from __future__ import annotations

import json
import multiprocessing
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fileio import write_ply, write_points_csv
from .geometry import (
    NORMALIZED,
    PHYSICAL,
    DisplacementField,
    PointSet,
    TriMesh,
    farthest_point_sample,
    lexicographic_start,
)

REGION_NAMES = ("top", "bottom", "front", "right", "back", "left")


@dataclass(frozen=True)
class GenParams:
    """Knobs of the synthetic generator; the seed fully determines a case."""

    seed: int = 0
    base_radii: tuple[float, float, float] = (62.0, 55.0, 50.0)
    radii_jitter: float = 0.15
    thickness_range: tuple[float, float] = (6.0, 14.0)
    bump_amplitude: float = 0.08
    bump_count: int = 6
    segment_range: tuple[int, int] = (2, 4)
    rotation_deg: tuple[float, float] = (5.0, 15.0)
    translation_mm: tuple[float, float] = (3.0, 10.0)
    kernel_h: float = 15.0
    subdivisions: int = 3
    sample_points: int = 4096

    def __post_init__(self):
        if min(self.base_radii) <= 0 or self.kernel_h <= 0 or self.bump_amplitude < 0:
            raise ValueError("radii, kernel bandwidth must be positive; amplitude non-negative")
        if not (0 < self.thickness_range[0] <= self.thickness_range[1]):
            raise ValueError(f"bad thickness range {self.thickness_range}")
        if not (2 <= self.segment_range[0] <= self.segment_range[1] <= 4):
            raise ValueError(f"segment count range must sit inside [2, 4], got {self.segment_range}")
        if not (0 <= self.rotation_deg[0] <= self.rotation_deg[1] <= 15.0):
            raise ValueError("rotation range must sit inside [0, 15] degrees")
        if not (0 <= self.translation_mm[0] <= self.translation_mm[1] <= 10.0):
            raise ValueError("translation range must sit inside [0, 10] mm")
        if self.subdivisions < 1 or self.sample_points < 8:
            raise ValueError("need at least 1 subdivision and 8 sample points")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "base_radii": list(self.base_radii),
            "radii_jitter": self.radii_jitter,
            "thickness_range": list(self.thickness_range),
            "bump_amplitude": self.bump_amplitude,
            "bump_count": self.bump_count,
            "segment_range": list(self.segment_range),
            "rotation_deg": list(self.rotation_deg),
            "translation_mm": list(self.translation_mm),
            "kernel_h": self.kernel_h,
            "subdivisions": self.subdivisions,
            "sample_points": self.sample_points,
        }

    @staticmethod
    def from_dict(d: dict) -> "GenParams":
        return GenParams(
            seed=d["seed"],
            base_radii=tuple(d["base_radii"]),
            radii_jitter=d["radii_jitter"],
            thickness_range=tuple(d["thickness_range"]),
            bump_amplitude=d["bump_amplitude"],
            bump_count=d["bump_count"],
            segment_range=tuple(d["segment_range"]),
            rotation_deg=tuple(d["rotation_deg"]),
            translation_mm=tuple(d["translation_mm"]),
            kernel_h=d["kernel_h"],
            subdivisions=d["subdivisions"],
            sample_points=d["sample_points"],
        )


@dataclass
class SyntheticCase:
    bone_mesh: TriMesh
    skin_mesh: TriMesh
    segment_labels: np.ndarray  # per bone vertex
    segment_transforms: list[tuple[np.ndarray, np.ndarray]]  # (R 3x3, t 3,) per segment
    gt_skin_disp: DisplacementField  # per skin vertex, physical units
    cut_axis: int
    cut_planes: np.ndarray


# ---------------------------------------------------------------------------
# Base meshes


def icosphere(subdivisions: int) -> TriMesh:
    """Unit icosphere with 20 * 4^subdivisions faces."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = np.array(verts[i]) + np.array(verts[j])
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(tuple(m))
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64))


def _bump_field(dirs: np.ndarray, centers: np.ndarray, amps: np.ndarray, widths: np.ndarray) -> np.ndarray:
    """Sum of angular Gaussian bumps evaluated at unit directions."""
    cosang = np.clip(dirs @ centers.T, -1.0, 1.0)
    ang = np.arccos(cosang)
    return (amps[None, :] * np.exp(-0.5 * (ang / widths[None, :]) ** 2)).sum(axis=1)


def _random_unit(rng: np.random.Generator, n: int = 1) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    k = np.asarray(axis, dtype=np.float64)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


# ---------------------------------------------------------------------------
# Ground-truth transfer oracle


def kernel_transfer(
    bone_xyz: np.ndarray, bone_disp: np.ndarray, skin_xyz: np.ndarray, h: float
) -> np.ndarray:
    """Gaussian-weighted displacement transfer (raw-array core).

    out[x] = sum_j w_j(x) d_j / sum_j w_j(x) with w_j(x) = exp(-|x - b_j|^2 / h^2).
    Each output component is a convex combination of input components.
    """
    if h <= 0:
        raise ValueError(f"kernel bandwidth must be positive, got {h}")
    bone_xyz = np.asarray(bone_xyz, dtype=np.float64)
    bone_disp = np.asarray(bone_disp, dtype=np.float64)
    skin_xyz = np.asarray(skin_xyz, dtype=np.float64)
    out = np.empty((skin_xyz.shape[0], 3))
    for lo in range(0, skin_xyz.shape[0], 2048):
        chunk = skin_xyz[lo : lo + 2048]
        d2 = (
            np.sum(chunk * chunk, axis=1)[:, None]
            + np.sum(bone_xyz * bone_xyz, axis=1)[None, :]
            - 2.0 * chunk @ bone_xyz.T
        )
        d2 = np.maximum(d2, 0.0)
        # subtract the row-min before exponentiating so far points cannot
        # underflow every weight to zero
        w = np.exp(-(d2 - d2.min(axis=1, keepdims=True)) / (h * h))
        out[lo : lo + 2048] = (w @ bone_disp) / w.sum(axis=1, keepdims=True)
    return out


def kernel_transfer_oracle(
    bone_pts: PointSet, bone_disp: DisplacementField, skin_pts: PointSet, h: float
) -> DisplacementField:
    """Typed wrapper around `kernel_transfer` for physical-unit point sets."""
    if bone_pts.unit != PHYSICAL or skin_pts.unit != PHYSICAL or bone_disp.unit != PHYSICAL:
        raise ValueError("kernel transfer operates in physical units")
    if len(bone_disp) != len(bone_pts):
        raise ValueError("bone displacement must be index-aligned with bone points")
    return DisplacementField(
        kernel_transfer(bone_pts.coords, bone_disp.vectors, skin_pts.coords, h), unit=PHYSICAL
    )


# ---------------------------------------------------------------------------
# Case generation


def _segment_of(coords: np.ndarray, axis: int, planes: np.ndarray) -> np.ndarray:
    """Segment id for any point: which slab between cutting planes it falls in."""
    return np.searchsorted(planes, coords[:, axis]).astype(np.int64)


def segment_displacement(
    coords: np.ndarray,
    labels: np.ndarray,
    transforms: list[tuple[np.ndarray, np.ndarray]],
) -> np.ndarray:
    """Per-point displacement (R x + t) - x under each point's segment transform."""
    out = np.zeros_like(coords)
    for sid, (rot, trans) in enumerate(transforms):
        mask = labels == sid
        if mask.any():
            pts = coords[mask]
            out[mask] = pts @ rot.T + trans - pts
    return out


def generate_case(p: GenParams) -> SyntheticCase:
    rng = np.random.default_rng(p.seed)
    base = icosphere(p.subdivisions)
    dirs = base.vertices  # unit sphere directions

    radii = np.array(p.base_radii) * rng.uniform(1.0 - p.radii_jitter, 1.0 + p.radii_jitter, 3)
    bump_c = _random_unit(rng, p.bump_count)
    bump_a = rng.uniform(0.3, 1.0, p.bump_count) * p.bump_amplitude
    bump_w = rng.uniform(np.deg2rad(15.0), np.deg2rad(40.0), p.bump_count)
    radial = 1.0 + _bump_field(dirs, bump_c, bump_a, bump_w)
    bone_verts = dirs * radii[None, :] * radial[:, None]
    bone = TriMesh(bone_verts, base.faces)

    t_lo, t_hi = p.thickness_range
    thick_c = _random_unit(rng, 4)
    thick_field = _bump_field(dirs, thick_c, rng.uniform(-1.0, 1.0, 4), rng.uniform(0.5, 1.0, 4))
    thickness = t_lo + (t_hi - t_lo) * 0.5 * (1.0 + np.tanh(thick_field))
    skin = TriMesh(bone.vertices + bone.vertex_normals() * thickness[:, None], base.faces)

    n_seg = int(rng.integers(p.segment_range[0], p.segment_range[1] + 1))
    axis = int(rng.integers(0, 3))
    coord = bone.vertices[:, axis]
    quantiles = (np.arange(1, n_seg) / n_seg) + rng.uniform(-0.06, 0.06, n_seg - 1)
    planes = np.quantile(coord, np.clip(quantiles, 0.1, 0.9))
    labels = _segment_of(bone.vertices, axis, planes)

    transforms: list[tuple[np.ndarray, np.ndarray]] = [(np.eye(3), np.zeros(3))]
    for sid in range(1, n_seg):
        seg_pts = bone.vertices[labels == sid]
        centroid = seg_pts.mean(axis=0)
        angle = np.deg2rad(rng.uniform(*p.rotation_deg)) * rng.choice((-1.0, 1.0))
        rot = _rotation_matrix(_random_unit(rng)[0], angle)
        trans_local = _random_unit(rng)[0] * rng.uniform(*p.translation_mm)
        # rotate about the segment centroid, stored in x' = R x + t form
        trans = centroid - rot @ centroid + trans_local
        transforms.append((rot, trans))

    bone_disp = segment_displacement(bone.vertices, labels, transforms)
    gt = kernel_transfer(bone.vertices, bone_disp, skin.vertices, p.kernel_h)
    return SyntheticCase(
        bone_mesh=bone,
        skin_mesh=skin,
        segment_labels=labels,
        segment_transforms=transforms,
        gt_skin_disp=DisplacementField(gt, unit=PHYSICAL),
        cut_axis=axis,
        cut_planes=planes,
    )


# ---------------------------------------------------------------------------
# Surface sampling and regions


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator, oversample: int = 4) -> np.ndarray:
    """n surface points: area-weighted uniform draw, reduced by farthest point
    sampling for even coverage. Every returned point lies on a triangle."""
    areas = mesh.face_areas()
    m = max(n * oversample, n)
    f_idx = rng.choice(len(mesh.faces), size=m, p=areas / areas.sum())
    r1, r2 = rng.random(m), rng.random(m)
    s1 = np.sqrt(r1)
    bary = np.stack([1.0 - s1, s1 * (1.0 - r2), s1 * r2], axis=1)
    tris = mesh.vertices[mesh.faces[f_idx]]
    pts = np.einsum("mk,mkd->md", bary, tris)
    ps = PointSet(pts, unit=PHYSICAL)
    keep = farthest_point_sample(ps, n, start=lexicographic_start(pts))
    return pts[keep]


def region_labels(coords: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Six spherical sectors around `center`: polar caps plus four azimuthal
    quadrants of the equatorial band. Mirrors the six-region evaluation split."""
    d = np.asarray(coords, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    r = np.linalg.norm(d, axis=1)
    r[r == 0.0] = 1.0
    polar = np.arccos(np.clip(d[:, 2] / r, -1.0, 1.0))
    azim = np.arctan2(d[:, 1], d[:, 0])  # [-pi, pi], 0 = +x ("front")
    out = np.empty(len(d), dtype=np.int64)
    out[:] = 2 + ((azim + np.pi / 4) // (np.pi / 2)).astype(np.int64) % 4
    out[polar < np.deg2rad(50.0)] = 0
    out[polar > np.deg2rad(130.0)] = 1
    return out


# ---------------------------------------------------------------------------
# Dataset on disk


def _case_dir(root: Path, i: int) -> Path:
    return root / f"case_{i:03d}"


def write_case(case_dir: Path, case: SyntheticCase, p: GenParams) -> None:
    case_dir.mkdir(parents=True, exist_ok=True)
    write_ply(case_dir / "bone.ply", case.bone_mesh)
    write_ply(case_dir / "skin.ply", case.skin_mesh)
    (case_dir / "labels.csv").write_text(
        "segment\n" + "\n".join(str(s) for s in case.segment_labels) + "\n"
    )
    transforms = {
        str(sid): {"rotation": rot.tolist(), "translation": trans.tolist()}
        for sid, (rot, trans) in enumerate(case.segment_transforms)
    }
    (case_dir / "transforms.json").write_text(
        json.dumps(
            {"cut_axis": case.cut_axis, "cut_planes": case.cut_planes.tolist(), "segments": transforms},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    rng = np.random.default_rng(p.seed + 1)  # sampling stream, distinct from geometry
    bone_samples = sample_surface(case.bone_mesh, p.sample_points, rng)
    skin_samples = sample_surface(case.skin_mesh, p.sample_points, rng)
    sample_labels = _segment_of(bone_samples, case.cut_axis, case.cut_planes)
    bone_sample_disp = segment_displacement(bone_samples, sample_labels, case.segment_transforms)
    bone_vert_labels = case.segment_labels
    bone_vert_disp = segment_displacement(
        case.bone_mesh.vertices, bone_vert_labels, case.segment_transforms
    )
    skin_sample_disp = kernel_transfer(
        case.bone_mesh.vertices, bone_vert_disp, skin_samples, p.kernel_h
    )
    write_points_csv(case_dir / "samples_bone.csv", bone_samples, bone_sample_disp)
    write_points_csv(case_dir / "samples_skin.csv", skin_samples, skin_sample_disp)
    write_points_csv(case_dir / "skin_disp.csv", case.skin_mesh.vertices, case.gt_skin_disp.vectors)


def _case_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def _build_one(args) -> str:
    root, i, params = args
    case_params = replace(params, seed=_case_seed(params.seed, i))
    case = generate_case(case_params)
    write_case(_case_dir(Path(root), i), case, case_params)
    return f"case_{i:03d}"


def build_dataset(
    out_dir: str | Path, n_cases: int, folds: int, params: GenParams, jobs: int = 1
) -> dict:
    """Generate n_cases cases with distinct per-case seeds and disjoint fold
    lists covering all cases. Returns the manifest dict (also written to disk)."""
    if n_cases < folds:
        raise ValueError(f"need at least as many cases ({n_cases}) as folds ({folds})")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    work = [(str(root), i, params) for i in range(n_cases)]
    if jobs > 1:
        with multiprocessing.Pool(jobs) as pool:
            names = pool.map(_build_one, work)
    else:
        names = [_build_one(w) for w in work]

    order = np.random.default_rng(params.seed).permutation(n_cases)
    fold_lists = [sorted(int(c) for c in order[f::folds]) for f in range(folds)]
    manifest = {
        "cases": names,
        "folds": fold_lists,
        "params": params.to_dict(),
        "format": 1,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    return json.loads(path.read_text())
