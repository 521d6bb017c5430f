"""Mesh interchange: ASCII OBJ and binary little-endian PLY (positions and triangles only)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from densereg.errors import SchemaError
from densereg.model import Mesh


def save_obj(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices.tolist():
            # repr of a python float round-trips exactly
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for f in np.asarray(mesh.faces) + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def load_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                # "f a/b/c ..." keeps only the position index; polygons are fanned
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) < 3:
                    raise SchemaError(f"{path}:{lineno}: face with fewer than 3 vertices")
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    V = np.array(verts, dtype=np.float64).reshape(-1, 3)
    F = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if F.size and (F.min() < 0 or F.max() >= len(V)):
        raise SchemaError(f"{path}: face index out of range")
    return Mesh(V, F)


def save_ply(mesh: Mesh, path) -> None:
    V = np.asarray(mesh.vertices, dtype="<f8")
    F = np.asarray(mesh.faces)
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(V)}\n"
              "property double x\nproperty double y\nproperty double z\n"
              f"element face {len(F)}\n"
              "property list uchar int vertex_indices\nend_header\n")
    rec = np.empty(len(F), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    rec["n"] = 3
    rec["idx"] = F
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(V.tobytes())
        fh.write(rec.tobytes())


_PLY_TYPES = {"char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1", "short": "<i2",
              "ushort": "<u2", "int16": "<i2", "uint16": "<u2", "int": "<i4", "uint": "<u4",
              "int32": "<i4", "uint32": "<u4", "float": "<f4", "float32": "<f4",
              "double": "<f8", "float64": "<f8"}


def load_ply(path) -> Mesh:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise SchemaError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in lines:
        raise SchemaError(f"{path}: only binary little-endian PLY is supported")
    elements = []  # (name, count, [(prop, dtype) or ("list", count_t, item_t)])
    for line in lines:
        p = line.split()
        if p[0] == "element":
            elements.append((p[1], int(p[2]), []))
        elif p[0] == "property":
            if p[1] == "list":
                elements[-1][2].append(("list", _PLY_TYPES[p[2]], _PLY_TYPES[p[3]], p[4]))
            else:
                elements[-1][2].append((p[2], _PLY_TYPES[p[1]]))
    off = 0
    V = F = None
    for name, count, props in elements:
        if any(pr[0] == "list" for pr in props):
            if len(props) != 1:
                raise SchemaError(f"{path}: mixed list properties are not supported")
            _, ct, it, _ = props[0]
            dt = np.dtype([("n", ct), ("idx", it, (3,))])
            rec = np.frombuffer(body, dtype=dt, count=count, offset=off)
            if count and (rec["n"] != 3).any():
                raise SchemaError(f"{path}: only triangle faces are supported")
            off += dt.itemsize * count
            if name == "face":
                F = rec["idx"].astype(np.int64)
        else:
            dt = np.dtype([(pn, t) for pn, t in props])
            rec = np.frombuffer(body, dtype=dt, count=count, offset=off)
            off += dt.itemsize * count
            if name == "vertex":
                V = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    if V is None:
        raise SchemaError(f"{path}: no vertex element")
    F = np.zeros((0, 3), np.int64) if F is None else F
    if F.size and (F.min() < 0 or F.max() >= len(V)):
        raise SchemaError(f"{path}: face index out of range")
    return Mesh(V, F)


def save_mesh(mesh: Mesh, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        save_obj(mesh, path)
    elif suffix == ".ply":
        save_ply(mesh, path)
    else:
        raise ValueError(f"unsupported mesh format {suffix!r} (use .obj or .ply)")


def load_mesh(path) -> Mesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".ply":
        return load_ply(path)
    raise ValueError(f"unsupported mesh format {suffix!r} (use .obj or .ply)")
