"""Point-set and mesh primitives: normalization, sampling, neighbor queries,
interpolation, and point-to-surface distances.

Everything here is a pure function of its inputs. Coordinates are float64.
Point sets carry a unit tag ("physical" = millimeters, "normalized" = unit
ball) so that mixing frames is caught early instead of silently producing
garbage displacements.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PHYSICAL = "physical"
NORMALIZED = "normalized"

_UNITS = (PHYSICAL, NORMALIZED)


def _as_coords(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {a.shape}")
    if a.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one point")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return a


@dataclass
class PointSet:
    """N x 3 coordinates plus optional per-point feature channels."""

    coords: np.ndarray
    unit: str = PHYSICAL
    features: np.ndarray | None = None

    def __post_init__(self):
        self.coords = _as_coords(self.coords, "coords")
        if self.unit not in _UNITS:
            raise ValueError(f"unit must be one of {_UNITS}, got {self.unit!r}")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != len(self):
                raise ValueError(
                    f"features must have shape (N, C) with N={len(self)}, "
                    f"got {self.features.shape}"
                )

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass
class TriMesh:
    """Triangle mesh: V x 3 vertices (mm) and F x 3 vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = _as_coords(self.vertices, "vertices")
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError(f"faces must have shape (F, 3), got {self.faces.shape}")
        v = self.vertices.shape[0]
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ValueError("face indices out of range")
        a, b, c = self.faces[:, 0], self.faces[:, 1], self.faces[:, 2]
        if np.any((a == b) | (b == c) | (a == c)):
            raise ValueError("mesh contains a degenerate face (repeated vertex index)")

    def face_areas(self) -> np.ndarray:
        t = self.vertices[self.faces]
        cross = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def vertex_areas(self) -> np.ndarray:
        """Barycentric vertex areas: one third of each incident face's area."""
        areas = self.face_areas()
        out = np.zeros(len(self.vertices))
        for k in range(3):
            np.add.at(out, self.faces[:, k], areas / 3.0)
        return out

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals, unit length."""
        t = self.vertices[self.faces]
        fn = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])  # length = 2*area
        out = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(out, self.faces[:, k], fn)
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        return out / norms


@dataclass(frozen=True)
class NormTransform:
    """Maps physical coordinates into the unit ball: x_n = (x - center) / scale."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def apply(self, coords: np.ndarray) -> np.ndarray:
        return (np.asarray(coords, dtype=np.float64) - self.center) / self.scale

    def invert(self, coords: np.ndarray) -> np.ndarray:
        return np.asarray(coords, dtype=np.float64) * self.scale + self.center


@dataclass
class DisplacementField:
    """N x 3 per-point displacement vectors with the same unit tag as its point set."""

    vectors: np.ndarray
    unit: str = PHYSICAL

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != 3:
            raise ValueError(f"vectors must have shape (N, 3), got {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("displacement vectors contain non-finite values")
        if self.unit not in _UNITS:
            raise ValueError(f"unit must be one of {_UNITS}, got {self.unit!r}")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def normalize_pair(
    facial: PointSet, bony_pre: PointSet, bony_post: PointSet
) -> tuple[PointSet, PointSet, PointSet, NormTransform]:
    """Normalize a driven/driver surface pair into one shared unit-ball frame.

    The frame is defined by the union of the facial and pre-bony coordinates:
    center = centroid of the union, scale = max distance from that center.
    The post-bony set is mapped with the same transform so displacement fields
    only get divided by the scale (the translation cancels).
    """
    for name, ps in (("facial", facial), ("bony_pre", bony_pre), ("bony_post", bony_post)):
        if ps.unit != PHYSICAL:
            raise ValueError(f"{name} must be in physical units, got {ps.unit!r}")
    union = np.concatenate([facial.coords, bony_pre.coords], axis=0)
    center = union.mean(axis=0)
    scale = float(np.linalg.norm(union - center, axis=1).max())
    if scale <= 0.0:
        raise ValueError("degenerate input: all points identical (scale would be 0)")
    t = NormTransform(center, scale)
    out = tuple(
        PointSet(t.apply(ps.coords), unit=NORMALIZED, features=ps.features)
        for ps in (facial, bony_pre, bony_post)
    )
    return out[0], out[1], out[2], t


def normalize_displacement(v: DisplacementField, t: NormTransform) -> DisplacementField:
    """Physical -> normalized units: divide by the scale (translation cancels)."""
    if v.unit != PHYSICAL:
        raise ValueError(f"expected a physical-unit field, got {v.unit!r}")
    return DisplacementField(v.vectors / t.scale, unit=NORMALIZED)


def denormalize_displacement(v: DisplacementField, t: NormTransform) -> DisplacementField:
    """Normalized -> physical units: multiply by the scale."""
    if v.unit != NORMALIZED:
        raise ValueError(f"expected a normalized-unit field, got {v.unit!r}")
    return DisplacementField(v.vectors * t.scale, unit=PHYSICAL)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of a (N,3) and b (M,3), shape (N, M)."""
    d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def lexicographic_start(coords: np.ndarray) -> int:
    """Index of the lexicographically smallest point (x, then y, then z).

    Used as the deterministic farthest-point-sampling start so results do not
    depend on file ordering. Ties resolve to the lowest index.
    """
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    return int(order[0])


def farthest_point_sample(ps: PointSet, k: int, start: int = 0) -> np.ndarray:
    """Iterative farthest point sampling.

    First index is `start`; each subsequent index maximizes the minimum
    distance to the already-chosen set, ties broken by lowest index.
    """
    coords = ps.coords
    n = coords.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if not 0 <= start < n:
        raise ValueError(f"start must be in [0, {n}), got {start}")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    min_d2 = np.sum((coords - coords[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_d2))  # argmax returns the first (lowest) index on ties
        chosen[i] = nxt
        d2 = np.sum((coords - coords[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


def ball_query(
    centers: PointSet, ps: PointSet, radius: float, max_n: int = 32
) -> list[np.ndarray]:
    """Per-center lists of point indices within `radius`, nearest-first.

    Lists are truncated at `max_n`. A center with no points in range gets a
    single-element list holding its nearest point, so downstream grouping
    never sees an empty group.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if max_n < 1:
        raise ValueError(f"max_n must be >= 1, got {max_n}")
    d2 = pairwise_sq_dists(centers.coords, ps.coords)
    r2 = radius * radius
    out: list[np.ndarray] = []
    for row in d2:
        sub = np.flatnonzero(row <= r2)
        if sub.size == 0:
            out.append(np.array([np.argmin(row)], dtype=np.int64))
            continue
        # sub is ascending, so a stable sort keeps the lowest index first on ties
        order = np.argsort(row[sub], kind="stable")[:max_n]
        out.append(sub[order].astype(np.int64))
    return out


def smallest_k(d2: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the k smallest entries, ordered by (value, index).

    argpartition fast path with an exact stable re-sort for the rare rows where
    ties at the selection boundary could otherwise pick the wrong indices.
    """
    m, n = d2.shape
    if k >= n:
        return np.argsort(d2, axis=1, kind="stable")[:, :k]
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(d2, part, axis=1)
    vmax = vals.max(axis=1)
    # exact semantics are in doubt when any selected value repeats (intra ties)
    # or the boundary value also occurs outside the selection
    total_le = (d2 <= vmax[:, None]).sum(axis=1)
    sorted_vals = np.sort(vals, axis=1)
    has_dup = (np.diff(sorted_vals, axis=1) == 0.0).any(axis=1) if k > 1 else np.zeros(m, bool)
    suspect = np.flatnonzero((total_le > k) | has_dup)
    order = np.argsort(vals, axis=1, kind="stable")
    out = np.take_along_axis(part, order, axis=1).astype(np.int64)
    for r in suspect:
        out[r] = np.argsort(d2[r], kind="stable")[:k]
    return out


def knn_indices(query: np.ndarray, source: np.ndarray, k: int, exclude_self: bool = False) -> np.ndarray:
    """Indices of the k nearest source rows for each query row, nearest-first.

    With exclude_self=True, query and source must be the same array and each
    point's own index is removed before taking the k nearest.
    """
    n = source.shape[0]
    budget = k + 1 if exclude_self else k
    if budget > n:
        raise ValueError(f"k={k} too large for {n} source points")
    d2 = pairwise_sq_dists(query, source)
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
    return smallest_k(d2, k)


def idw_weights(
    src_pts: np.ndarray, dst_pts: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-distance-squared interpolation plan: (indices (M,k), weights (M,k)).

    Weights sum to 1 per destination. Distances are floored at 1e-8 before
    inverting; an exactly coincident source point takes all the weight so the
    interpolation reproduces source values exactly there.
    """
    if k < 1 or k > src_pts.shape[0]:
        raise ValueError(f"k must be in [1, {src_pts.shape[0]}], got {k}")
    d2 = pairwise_sq_dists(dst_pts, src_pts)
    order = smallest_k(d2, k)
    nd2 = np.take_along_axis(d2, order, axis=1)
    w = 1.0 / np.maximum(nd2, 1e-16)  # floor d at 1e-8, i.e. d^2 at 1e-16
    exact = nd2 == 0.0
    hit = exact.any(axis=1)
    w[hit] = 0.0
    w[exact] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return order.astype(np.int64), w


def idw_interpolate(
    src_pts: PointSet, src_vals: np.ndarray, dst_pts: PointSet, k: int = 3
) -> np.ndarray:
    """Interpolate per-point values from src to dst via inverse-distance weighting."""
    src_vals = np.asarray(src_vals, dtype=np.float64)
    if src_vals.shape[0] != len(src_pts):
        raise ValueError(
            f"src_vals has {src_vals.shape[0]} rows for {len(src_pts)} source points"
        )
    idx, w = idw_weights(src_pts.coords, dst_pts.coords, k)
    return np.einsum("mk,mkc->mc", w, src_vals[idx])


def closest_point_matrix(facial: PointSet, bony: PointSet) -> np.ndarray:
    """Binary N1 x N2 matrix with R[i, j] = 1 iff bony j is nearest to facial i.

    Ties resolve to the lowest j; every row has exactly one 1.
    """
    if facial.unit != NORMALIZED or bony.unit != NORMALIZED:
        raise ValueError("both point sets must be normalized")
    d2 = pairwise_sq_dists(facial.coords, bony.coords)
    nearest = np.argmin(d2, axis=1)  # first (lowest) index on ties
    r = np.zeros((len(facial), len(bony)))
    r[np.arange(len(facial)), nearest] = 1.0
    return r


def point_triangle_distance(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Distance from each point (N,3) to one triangle (3,3 vertices).

    Closest-feature enumeration: the nearest point on a triangle is either the
    interior plane projection, a point on one of the three edges, or a vertex.
    """
    points = np.asarray(points, dtype=np.float64)
    a, b, c = (np.asarray(v, dtype=np.float64) for v in tri)
    best = np.full(points.shape[0], np.inf)

    # interior projection, accepted only when barycentric coordinates are valid
    n = np.cross(b - a, c - a)
    nn = n @ n
    if nn > 0.0:
        t = ((points - a) @ n) / nn
        proj = points - t[:, None] * n
        v0, v1 = b - a, c - a
        d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
        denom = d00 * d11 - d01 * d01
        if denom > 0.0:
            v2 = proj - a
            d20, d21 = v2 @ v0, v2 @ v1
            u = (d11 * d20 - d01 * d21) / denom
            v = (d00 * d21 - d01 * d20) / denom
            inside = (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
            di = np.linalg.norm(points - proj, axis=1)
            best = np.where(inside, di, best)

    # edges (covers vertices via clamping)
    for p0, p1 in ((a, b), (b, c), (c, a)):
        e = p1 - p0
        ee = e @ e
        if ee == 0.0:
            d = np.linalg.norm(points - p0, axis=1)
        else:
            t = np.clip(((points - p0) @ e) / ee, 0.0, 1.0)
            d = np.linalg.norm(points - (p0 + t[:, None] * e), axis=1)
        np.minimum(best, d, out=best)
    return best


def point_mesh_distance(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Distance from each point to the nearest point on the mesh surface."""
    points = np.asarray(points, dtype=np.float64)
    best = np.full(points.shape[0], np.inf)
    tris = mesh.vertices[mesh.faces]
    for tri in tris:
        np.minimum(best, point_triangle_distance(points, tri), out=best)
    return best
