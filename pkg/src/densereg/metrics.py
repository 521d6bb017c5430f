"""Scan-to-mesh evaluation: point-to-surface distances, regional statistics, heatmaps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from densereg import bvh
from densereg.camera import Camera, project, to_camera
from densereg.errors import SchemaError
from densereg.model import Mesh, face_cross

FULL = "full_no_scalp"
DEFAULT_THRESHOLD_MM = 1.0


def point_to_surface(points, mesh: Mesh) -> np.ndarray:
    """Unsigned distance from every point to its closest point on ``mesh``."""
    if mesh.faces.shape[0] == 0:
        raise ValueError("point_to_surface needs a non-empty mesh")
    tree = bvh.build(mesh.triangles)
    return bvh.closest_points(tree, points).distance


def point_to_surface_bruteforce(points, mesh: Mesh, chunk: int = 256) -> np.ndarray:
    """Exhaustive oracle: closest point over every triangle, vectorised in numpy."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if mesh.faces.shape[0] == 0:
        raise ValueError("point_to_surface needs a non-empty mesh")
    tri = mesh.triangles
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk, None, :]
        out[s:s + chunk] = np.sqrt(_closest_dist2(p, a[None], b[None], c[None]).min(axis=1))
    return out


def _closest_dist2(p, a, b, c):
    """Squared distance from points to triangles, region-by-region (broadcasting)."""
    ab, ac, ap = b - a, c - a, p - a
    bp, cp = p - b, p - c
    dot = lambda x, y: np.sum(x * y, axis=-1)  # noqa: E731
    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    # interior by default
    denom = va + vb + vc
    safe = np.where(denom == 0, 1.0, denom)
    v = vb / safe
    w = vc / safe
    q = a + v[..., None] * ab + w[..., None] * ac
    done = np.zeros(d1.shape, bool)

    def assign(cond, point):
        nonlocal q, done
        cond = cond & ~done
        q = np.where(cond[..., None], point, q)
        done |= cond

    assign((d1 <= 0) & (d2 <= 0), np.broadcast_to(a, q.shape))
    assign((d3 >= 0) & (d4 <= d3), np.broadcast_to(b, q.shape))
    t = d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t[..., None] * ab)
    assign((d6 >= 0) & (d5 <= d6), np.broadcast_to(c, q.shape))
    t = d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t[..., None] * ac)
    num, den = d4 - d3, (d4 - d3) + (d5 - d6)
    t = num / np.where(den == 0, 1.0, den)
    assign((va <= 0) & (num >= 0) & ((d5 - d6) >= 0), b + t[..., None] * (c - b))
    # zero-area triangles that reached the interior branch: nearest corner
    degenerate = ~done & (denom == 0)
    if degenerate.any():
        corners = np.stack(np.broadcast_arrays(a, b, c), axis=-2)
        dc = np.sum((p[..., None, :] - corners) ** 2, axis=-1)
        nearest = np.take_along_axis(corners, np.argmin(dc, axis=-1)[..., None, None], axis=-2)[..., 0, :]
        q = np.where(degenerate[..., None], nearest, q)
    return np.sum((p - q) ** 2, axis=-1)


# --- regions ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegionMasks:
    regions: dict  # name -> vertex indices
    excluded: tuple = ("scalp", "boundary")

    def __post_init__(self):
        regions = {str(k): np.asarray(v, dtype=np.int64) for k, v in self.regions.items()}
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "excluded", tuple(self.excluded))
        if FULL in regions:
            raise SchemaError(f"{FULL!r} is derived from the other regions and cannot be stored")
        missing = [e for e in self.excluded if e not in regions]
        if missing:
            raise SchemaError(f"excluded regions {missing} are not defined")

    def validate(self, n_vertices: int) -> None:
        for name, idx in self.regions.items():
            if idx.size and (idx.min() < 0 or idx.max() >= n_vertices):
                raise SchemaError(f"region {name!r} has vertex indices out of range")

    def names(self) -> list[str]:
        return [n for n in self.regions if n not in self.excluded] + [FULL]

    def to_dict(self) -> dict:
        return {"regions": {k: v.tolist() for k, v in self.regions.items()},
                "excluded": list(self.excluded)}

    @classmethod
    def from_dict(cls, doc: dict) -> "RegionMasks":
        if not isinstance(doc, dict) or "regions" not in doc:
            raise SchemaError("masks JSON needs a 'regions' object")
        return cls(doc["regions"], tuple(doc.get("excluded", ())))


def save_masks(masks: RegionMasks, path) -> None:
    Path(path).write_text(json.dumps(masks.to_dict()) + "\n")


def load_masks(path) -> RegionMasks:
    return RegionMasks.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Stat:
    median: float
    mean: float
    std: float
    count: int


def _stat(d) -> Stat:
    if len(d) == 0:
        return Stat(float("nan"), float("nan"), float("nan"), 0)
    return Stat(float(np.median(d)), float(np.mean(d)), float(np.std(d)), int(len(d)))


def assign_regions(scan_points, pred_mesh: Mesh, masks: RegionMasks) -> dict:
    """Per region, a boolean selection of scan points whose nearest predicted vertex lies in it."""
    _, nearest = cKDTree(pred_mesh.vertices).query(np.asarray(scan_points, dtype=np.float64))
    out = {}
    n_v = len(pred_mesh.vertices)
    for name, idx in masks.regions.items():
        member = np.zeros(n_v, bool)
        member[idx] = True
        out[name] = member[nearest]
    return out


def region_stats(scan_points, pred_mesh: Mesh, masks: RegionMasks, regions=None,
                 distances=None) -> dict:
    """Median / mean / std of scan-to-surface distances per region (mm)."""
    masks.validate(len(pred_mesh.vertices))
    names = masks.names() if regions is None else list(regions)
    known = set(masks.regions) | {FULL}
    unknown = [n for n in names if n not in known]
    if unknown:
        raise KeyError(f"unknown region(s) {unknown}; available: {sorted(known)}")
    if distances is None:
        distances = point_to_surface(scan_points, pred_mesh)
    sel = assign_regions(scan_points, pred_mesh, masks)
    stats = {}
    for name in names:
        if name == FULL:
            kept = np.zeros(len(distances), bool)
            for r, s in sel.items():
                if r not in masks.excluded:
                    kept |= s
            for r in masks.excluded:
                kept &= ~sel[r]
            stats[name] = _stat(distances[kept])
        else:
            stats[name] = _stat(distances[sel[name]])
    return stats


def write_stats(stats: dict, csv_path=None, json_path=None) -> None:
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["region", "median", "mean", "std", "count"])
            for name, s in stats.items():
                w.writerow([name, repr(s.median), repr(s.mean), repr(s.std), s.count])
    if json_path is not None:
        doc = {name: {"median": s.median, "mean": s.mean, "std": s.std, "count": s.count}
               for name, s in stats.items()}
        Path(json_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --- mesh quality ----------------------------------------------------------


def flipped_faces(mesh: Mesh, reference_mesh: Mesh) -> int:
    """Faces whose orientation opposes the corresponding reference face."""
    if not np.array_equal(mesh.faces, reference_mesh.faces):
        raise ValueError("flipped_faces needs meshes with identical topology")
    a = face_cross(mesh.vertices, mesh.faces)
    b = face_cross(reference_mesh.vertices, reference_mesh.faces)
    return int(np.count_nonzero(np.sum(a * b, axis=1) < 0))


# --- heatmaps --------------------------------------------------------------

BLUE = np.array([0.0, 0.0, 1.0])
RED = np.array([1.0, 0.0, 0.0])


def colormap(distances, threshold_mm: float = DEFAULT_THRESHOLD_MM) -> np.ndarray:
    s = np.clip(np.asarray(distances, dtype=np.float64) / threshold_mm, 0.0, 1.0)
    return (1 - s)[..., None] * BLUE + s[..., None] * RED


def heatmap(scan_points, distances, camera: Camera, H: int, W: int,
            threshold_mm: float = DEFAULT_THRESHOLD_MM, background=(1.0, 1.0, 1.0)):
    """Splat scan points into ``camera``; returns ``(image (H, W, 3) in [0, 1], occupancy)``.

    Each point covers its nearest pixel; the front-most point wins.
    """
    if (camera.width, camera.height) != (W, H):
        camera = camera.resized(W, H)
    pts = np.asarray(scan_points, dtype=np.float64)
    uv, valid = project(camera, pts)
    z = to_camera(camera, pts)[:, 2]
    px = np.rint(uv).astype(np.int64)
    inside = valid & (px[:, 0] >= 0) & (px[:, 0] < W) & (px[:, 1] >= 0) & (px[:, 1] < H)
    idx = np.flatnonzero(inside)
    lin = px[idx, 1] * W + px[idx, 0]
    # nearest point per pixel: sort by pixel, then depth, keep the first of each run
    order = np.lexsort((z[idx], lin))
    lin, idx = lin[order], idx[order]
    first = np.ones(len(lin), bool)
    first[1:] = lin[1:] != lin[:-1]
    lin, idx = lin[first], idx[first]
    img = np.empty((H, W, 3))
    img[:] = background
    occ = np.zeros(H * W, bool)
    img.reshape(-1, 3)[lin] = colormap(np.asarray(distances)[idx], threshold_mm)
    occ[lin] = True
    occ = occ.reshape(H, W)
    return img, occ


def save_png(image, path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
