"""Deterministic z-buffer rasterizer for pointmaps and normal maps.

Pixel assignment is hard (front-most triangle wins, ties within 1e-9 mm go to
the lower face index). Gradients are visibility-locked: each covered pixel
keeps its triangle, and its point is the intersection of the pixel ray with
that triangle's plane, so it moves with the triangle's vertices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from densereg import container
from densereg.camera import Z_NEAR, Camera
from densereg.errors import DimensionError
from densereg.model import Mesh

GEOMAPS_KIND = "geomaps"
DEPTH_TIE = 1e-9
MIN_SCREEN_AREA = 1e-12  # px^2
MIN_WORLD_AREA = 1e-12  # mm^2
BAND = 8  # rows per parallel work item


@dataclass(frozen=True, eq=False)
class GeoMaps:
    pointmap: np.ndarray  # (H, W, 3) world mm
    normalmap: np.ndarray  # (H, W, 3) world unit normals
    mask: np.ndarray  # (H, W) bool
    face_id: np.ndarray  # (H, W) int, -1 where empty
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"pointmap": self.pointmap, "normalmap": self.normalmap, "mask": self.mask,
                "face_id": self.face_id, "bary": self.bary}

    def equals(self, other: "GeoMaps") -> bool:
        """Bitwise equality of every array."""
        return all(np.array_equal(a, b) for a, b in zip(self.to_arrays().values(),
                                                         other.to_arrays().values()))


def save_geomaps(maps_list, path, meta=None) -> None:
    arrays = {}
    for i, maps in enumerate(maps_list):
        for name, arr in maps.to_arrays().items():
            arrays[f"{i}/{name}"] = arr
    dtypes = {k: ("<i4" if k.endswith("face_id") else "|b1" if k.endswith("mask") else "<f8")
              for k in arrays}
    container.write(path, arrays, GEOMAPS_KIND, meta={"views": len(maps_list), **(meta or {})},
                    dtypes=dtypes)


def load_geomaps(path) -> list[GeoMaps]:
    arrays, header = container.read(path, kind=GEOMAPS_KIND)
    out = []
    for i in range(header["meta"]["views"]):
        out.append(GeoMaps(arrays[f"{i}/pointmap"], arrays[f"{i}/normalmap"],
                           arrays[f"{i}/mask"].astype(bool), arrays[f"{i}/face_id"].astype(np.int64),
                           arrays[f"{i}/bary"]))
    return out


def _camera_for(cam: Camera, H: int, W: int) -> Camera:
    if cam.width == W and cam.height == H:
        return cam
    return cam.resized(W, H)


@numba.njit(cache=True)
def _setup(pc, faces, fx, fy, cx, cy, world_area):
    m = faces.shape[0]
    scr = np.empty((m, 3, 3))  # per corner: u, v, z
    area = np.zeros(m)
    ok = np.zeros(m, dtype=np.bool_)
    for f in range(m):
        good = world_area[f] >= MIN_WORLD_AREA
        for k in range(3):
            p = pc[faces[f, k]]
            z = p[2]
            if z <= Z_NEAR:
                good = False
                z = 1.0
            scr[f, k, 0] = fx * p[0] / z + cx
            scr[f, k, 1] = fy * p[1] / z + cy
            scr[f, k, 2] = z
        a2 = ((scr[f, 1, 0] - scr[f, 0, 0]) * (scr[f, 2, 1] - scr[f, 0, 1])
              - (scr[f, 2, 0] - scr[f, 0, 0]) * (scr[f, 1, 1] - scr[f, 0, 1]))
        area[f] = a2
        if 0.5 * abs(a2) <= MIN_SCREEN_AREA:
            good = False
        ok[f] = good
    return scr, area, ok


@numba.njit(parallel=True, cache=True)
def _raster(scr, area, ok, H, W):
    face_id = np.full((H, W), -1, dtype=np.int64)
    depth = np.full((H, W), np.inf)
    bary = np.zeros((H, W, 3))
    m = scr.shape[0]
    n_bands = (H + BAND - 1) // BAND
    for band in numba.prange(n_bands):
        r0 = band * BAND
        r1 = min(H, r0 + BAND)
        for f in range(m):
            if not ok[f]:
                continue
            u0, v0, z0 = scr[f, 0, 0], scr[f, 0, 1], scr[f, 0, 2]
            u1, v1, z1 = scr[f, 1, 0], scr[f, 1, 1], scr[f, 1, 2]
            u2, v2, z2 = scr[f, 2, 0], scr[f, 2, 1], scr[f, 2, 2]
            ymin = max(r0, int(np.ceil(min(v0, min(v1, v2)))))
            ymax = min(r1 - 1, int(np.floor(max(v0, max(v1, v2)))))
            if ymin > ymax:
                continue
            xmin = max(0, int(np.ceil(min(u0, min(u1, u2)))))
            xmax = min(W - 1, int(np.floor(max(u0, max(u1, u2)))))
            if xmin > xmax:
                continue
            a = area[f]
            for y in range(ymin, ymax + 1):
                for x in range(xmin, xmax + 1):
                    px = float(x)
                    py = float(y)
                    w0 = (u2 - u1) * (py - v1) - (px - u1) * (v2 - v1)
                    w1 = (u0 - u2) * (py - v2) - (px - u2) * (v0 - v2)
                    w2 = (u1 - u0) * (py - v0) - (px - u0) * (v1 - v0)
                    if a > 0:
                        if w0 < 0 or w1 < 0 or w2 < 0:
                            continue
                    else:
                        if w0 > 0 or w1 > 0 or w2 > 0:
                            continue
                    l0 = w0 / a
                    l1 = w1 / a
                    l2 = w2 / a
                    q0 = l0 / z0
                    q1 = l1 / z1
                    q2 = l2 / z2
                    qs = q0 + q1 + q2
                    z = 1.0 / qs
                    if z < depth[y, x] - DEPTH_TIE:
                        depth[y, x] = z
                        face_id[y, x] = f
                        bary[y, x, 0] = q0 * z
                        bary[y, x, 1] = q1 * z
                        bary[y, x, 2] = q2 * z
    return face_id, bary


def render(mesh: Mesh, cam: Camera, H: int = 256, W: int = 256) -> GeoMaps:
    cam = _camera_for(cam, H, W)
    V = mesh.vertices
    F = np.ascontiguousarray(mesh.faces, dtype=np.int64)
    if F.shape[0] == 0:
        return _empty(H, W)
    pc = V @ cam.rotation.T + cam.translation
    tri = V[F]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    clen = np.linalg.norm(cross, axis=1)
    scr, area, ok = _setup(np.ascontiguousarray(pc), F, cam.fx, cam.fy, cam.cx, cam.cy, 0.5 * clen)
    face_id, bary = _raster(scr, area, ok, H, W)
    mask = face_id >= 0
    pointmap = np.zeros((H, W, 3))
    normalmap = np.zeros((H, W, 3))
    fid = face_id[mask]
    b = bary[mask]
    pointmap[mask] = np.einsum("pk,pkj->pj", b, tri[fid])
    normalmap[mask] = cross[fid] / clen[fid, None]
    return GeoMaps(pointmap, normalmap, mask, face_id, bary)


def _empty(H, W) -> GeoMaps:
    return GeoMaps(np.zeros((H, W, 3)), np.zeros((H, W, 3)), np.zeros((H, W), bool),
                   np.full((H, W), -1, dtype=np.int64), np.zeros((H, W, 3)))


def pixel_rays(cam: Camera, H: int, W: int) -> np.ndarray:
    """World-space ray directions (unnormalised, camera-z = 1) for every pixel centre."""
    cam = _camera_for(cam, H, W)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    dc = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], axis=-1)
    return dc @ cam.rotation


@numba.njit(cache=True, inline="always")
def _cross(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


@numba.njit(cache=True)
def _backward(face_id, rays, origin, V, F, d_point, d_normal, grad):
    # scalar arithmetic throughout: small temporary arrays dominate the cost otherwise
    H, W = face_id.shape
    for y in range(H):
        for x in range(W):
            f = face_id[y, x]
            if f < 0:
                continue
            i0, i1, i2 = F[f, 0], F[f, 1], F[f, 2]
            ax, ay, az = V[i1, 0] - V[i0, 0], V[i1, 1] - V[i0, 1], V[i1, 2] - V[i0, 2]
            bx, by, bz = V[i2, 0] - V[i0, 0], V[i2, 1] - V[i0, 1], V[i2, 2] - V[i0, 2]
            nx, ny, nz = _cross(ax, ay, az, bx, by, bz)
            gx, gy, gz = d_point[y, x, 0], d_point[y, x, 1], d_point[y, x, 2]
            if gx != 0.0 or gy != 0.0 or gz != 0.0:
                dx, dy, dz = rays[y, x, 0], rays[y, x, 1], rays[y, x, 2]
                D = nx * dx + ny * dy + nz * dz
                ox, oy, oz = V[i0, 0] - origin[0], V[i0, 1] - origin[1], V[i0, 2] - origin[2]
                s = (nx * ox + ny * oy + nz * oz) / D
                # w = V0 - hit point
                wx, wy, wz = ox - s * dx, oy - s * dy, oz - s * dz
                c = (gx * dx + gy * dy + gz * dz) / D
                p1x, p1y, p1z = _cross(bx, by, bz, wx, wy, wz)
                p2x, p2y, p2z = _cross(wx, wy, wz, ax, ay, az)
                grad[i1, 0] += c * p1x
                grad[i1, 1] += c * p1y
                grad[i1, 2] += c * p1z
                grad[i2, 0] += c * p2x
                grad[i2, 1] += c * p2y
                grad[i2, 2] += c * p2z
                grad[i0, 0] += c * (nx - p1x - p2x)
                grad[i0, 1] += c * (ny - p1y - p2y)
                grad[i0, 2] += c * (nz - p1z - p2z)
            gx, gy, gz = d_normal[y, x, 0], d_normal[y, x, 1], d_normal[y, x, 2]
            if gx != 0.0 or gy != 0.0 or gz != 0.0:
                ln = np.sqrt(nx * nx + ny * ny + nz * nz)
                fx, fy, fz = nx / ln, ny / ln, nz / ln
                proj = gx * fx + gy * fy + gz * fz
                hx, hy, hz = (gx - proj * fx) / ln, (gy - proj * fy) / ln, (gz - proj * fz) / ln
                p1x, p1y, p1z = _cross(bx, by, bz, hx, hy, hz)
                p2x, p2y, p2z = _cross(hx, hy, hz, ax, ay, az)
                grad[i1, 0] += p1x
                grad[i1, 1] += p1y
                grad[i1, 2] += p1z
                grad[i2, 0] += p2x
                grad[i2, 1] += p2y
                grad[i2, 2] += p2z
                grad[i0, 0] -= p1x + p2x
                grad[i0, 1] -= p1y + p2y
                grad[i0, 2] -= p1z + p2z


def render_backward(maps: GeoMaps, d_pointmap, d_normalmap, mesh: Mesh, cam: Camera) -> np.ndarray:
    """Vertex gradient of a loss given its gradients w.r.t. the rendered maps."""
    H, W = maps.shape
    d_pointmap = np.asarray(d_pointmap, dtype=np.float64)
    d_normalmap = np.asarray(d_normalmap, dtype=np.float64)
    if d_pointmap.shape != (H, W, 3) or d_normalmap.shape != (H, W, 3):
        raise DimensionError(
            f"upstream gradients must be ({H}, {W}, 3), got {d_pointmap.shape} and {d_normalmap.shape}"
        )
    cam = _camera_for(cam, H, W)
    grad = np.zeros_like(mesh.vertices)
    _backward(maps.face_id, pixel_rays(cam, H, W), cam.center, mesh.vertices,
              np.ascontiguousarray(mesh.faces, dtype=np.int64),
              np.ascontiguousarray(d_pointmap), np.ascontiguousarray(d_normalmap), grad)
    return grad
