"""Mesh and point-set file formats.

Meshes: ASCII OBJ and binary little-endian PLY (float64 coordinates, optional
per-vertex uchar RGB). Point sets and displacement fields: CSV with a required
header row, columns x,y,z or x,y,z,dx,dy,dz.

Writers emit deterministic bytes so re-running a pipeline with identical
inputs overwrites outputs with identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import TriMesh


def write_obj(path: str | Path, mesh: TriMesh) -> None:
    lines = [f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}" for v in mesh.vertices]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> TriMesh:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            if len(idx) != 3:
                raise ValueError(f"{path}: only triangular faces are supported")
            faces.append(idx)
    if not verts:
        raise ValueError(f"{path}: no vertices found")
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64))


def write_ply(path: str | Path, mesh: TriMesh, colors: np.ndarray | None = None) -> None:
    """Binary little-endian PLY. `colors` is an optional (V, 3) uint8 array."""
    v = np.ascontiguousarray(mesh.vertices, dtype="<f8")
    nv, nf = len(mesh.vertices), len(mesh.faces)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {nv}"]
    header += [f"property double {ax}" for ax in "xyz"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        if colors.shape != (nv, 3):
            raise ValueError(f"colors must have shape ({nv}, 3), got {colors.shape}")
        header += [f"property uchar {ch}" for ch in ("red", "green", "blue")]
    header += [f"element face {nf}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if colors is None:
            fh.write(v.tobytes())
        else:
            for row, col in zip(v, colors):
                fh.write(row.tobytes())
                fh.write(col.tobytes())
        face_rec = np.empty(nf, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        face_rec["n"] = 3
        face_rec["idx"] = mesh.faces.astype("<i4")
        fh.write(face_rec.tobytes())


_PLY_TYPES = {
    "double": ("<f8", 8),
    "float": ("<f4", 4),
    "uchar": ("<u1", 1),
    "uint8": ("<u1", 1),
    "int": ("<i4", 4),
    "int32": ("<i4", 4),
}


def read_ply(path: str | Path) -> TriMesh:
    """Read a binary little-endian PLY with x/y/z vertex properties and
    triangular faces. Extra vertex properties (e.g. colors) are skipped."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = fh.readline().strip()
        if fmt != b"format binary_little_endian 1.0":
            raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
        nv = nf = 0
        vert_props: list[tuple[str, str]] = []  # (name, numpy dtype)
        face_list_types: tuple[str, str] | None = None
        current = None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            parts = line.decode("ascii").split()
            if not parts:
                continue
            if parts[0] == "comment":
                continue
            if parts[0] == "element":
                current = parts[1]
                if current == "vertex":
                    nv = int(parts[2])
                elif current == "face":
                    nf = int(parts[2])
                else:
                    raise ValueError(f"{path}: unsupported element {current!r}")
            elif parts[0] == "property":
                if current == "vertex":
                    if parts[1] == "list":
                        raise ValueError(f"{path}: list-typed vertex properties unsupported")
                    if parts[1] not in _PLY_TYPES:
                        raise ValueError(f"{path}: unsupported property type {parts[1]!r}")
                    vert_props.append((parts[2], _PLY_TYPES[parts[1]][0]))
                elif current == "face":
                    if parts[1] != "list":
                        raise ValueError(f"{path}: face element must use a list property")
                    face_list_types = (parts[2], parts[3])
            elif parts[0] == "end_header":
                break
        names = [n for n, _ in vert_props]
        if not {"x", "y", "z"} <= set(names):
            raise ValueError(f"{path}: vertex element lacks x/y/z")
        vdtype = np.dtype([(n, t) for n, t in vert_props])
        vraw = np.frombuffer(fh.read(nv * vdtype.itemsize), dtype=vdtype, count=nv)
        verts = np.stack(
            [vraw["x"], vraw["y"], vraw["z"]], axis=1
        ).astype(np.float64)
        if face_list_types is None and nf > 0:
            raise ValueError(f"{path}: face element without list property")
        faces = np.empty((nf, 3), dtype=np.int64)
        if nf:
            count_t, idx_t = (_PLY_TYPES[t][0] for t in face_list_types)
            count_size = np.dtype(count_t).itemsize
            idx_size = np.dtype(idx_t).itemsize
            for i in range(nf):
                (cnt,) = np.frombuffer(fh.read(count_size), dtype=count_t, count=1)
                if int(cnt) != 3:
                    raise ValueError(f"{path}: non-triangular face with {int(cnt)} vertices")
                faces[i] = np.frombuffer(fh.read(3 * idx_size), dtype=idx_t, count=3)
    return TriMesh(verts, faces)


def write_points_csv(
    path: str | Path, coords: np.ndarray, displacements: np.ndarray | None = None
) -> None:
    coords = np.asarray(coords, dtype=np.float64)
    if displacements is None:
        header = "x,y,z"
        data = coords
    else:
        displacements = np.asarray(displacements, dtype=np.float64)
        if displacements.shape != coords.shape:
            raise ValueError("displacements must match coords shape")
        header = "x,y,z,dx,dy,dz"
        data = np.concatenate([coords, displacements], axis=1)
    rows = [header] + [",".join(f"{x:.17g}" for x in row) for row in data]
    Path(path).write_text("\n".join(rows) + "\n")


def read_points_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Returns (coords, displacements-or-None)."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in lines[0].split(",")]
    if header == ["x", "y", "z"]:
        ncol = 3
    elif header == ["x", "y", "z", "dx", "dy", "dz"]:
        ncol = 6
    else:
        raise ValueError(f"{path}: unexpected CSV header {lines[0]!r}")
    data = np.array(
        [[float(x) for x in line.split(",")] for line in lines[1:] if line.strip()]
    )
    if data.ndim != 2 or data.shape[1] != ncol:
        raise ValueError(f"{path}: malformed rows")
    if ncol == 3:
        return data, None
    return data[:, :3], data[:, 3:]


_MESH_READERS = {".obj": read_obj, ".ply": read_ply}
_MESH_WRITERS = {".obj": write_obj, ".ply": write_ply}


def read_mesh(path: str | Path) -> TriMesh:
    ext = Path(path).suffix.lower()
    if ext not in _MESH_READERS:
        raise ValueError(f"unsupported mesh format {ext!r} (use .obj or .ply)")
    return _MESH_READERS[ext](path)


def write_mesh(path: str | Path, mesh: TriMesh) -> None:
    ext = Path(path).suffix.lower()
    if ext not in _MESH_WRITERS:
        raise ValueError(f"unsupported mesh format {ext!r} (use .obj or .ply)")
    _MESH_WRITERS[ext](path, mesh)
