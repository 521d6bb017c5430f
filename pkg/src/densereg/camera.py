"""Calibrated pinhole cameras and multi-view rigs.

Pixel (0, 0) is the centre of the top-left pixel; ``u`` grows to the right
and ``v`` downwards. There is no lens distortion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from densereg.errors import InvariantError, SchemaError

Z_NEAR = 1.0  # mm


@dataclass(frozen=True, eq=False)
class Camera:
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not np.isfinite(R).all() or not np.isfinite(t).all():
            raise InvariantError("camera extrinsics must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1) > 1e-6:
            raise InvariantError("camera rotation must be orthonormal with det=+1")
        if not (self.fx > 0 and self.fy > 0):
            raise InvariantError("focal lengths must be positive")
        if int(self.width) < 8 or int(self.height) < 8:
            raise InvariantError("camera resolution must be at least 8x8")

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def resized(self, width: int, height: int) -> "Camera":
        """Same camera with intrinsics rescaled to a new resolution."""
        sx, sy = width / self.width, height / self.height
        # pixel centres: u' + 0.5 = sx * (u + 0.5)
        return Camera(self.rotation, self.translation, self.fx * sx, self.fy * sy,
                      (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5, width, height)


@dataclass(frozen=True, eq=False)
class CameraRig:
    cameras: tuple
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        if len(self.cameras) < 1:
            raise InvariantError("a rig needs at least one camera")
        if len(self.names) != len(self.cameras):
            raise InvariantError("one name per camera is required")
        if len(set(self.names)) != len(self.names):
            raise InvariantError("camera names must be unique")

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i):
        return self.cameras[i]

    def subset(self, order) -> "CameraRig":
        return CameraRig([self.cameras[i] for i in order], [self.names[i] for i in order])

    def canonical_order(self) -> list[int]:
        """View indices sorted by camera name (used for order-independent reductions)."""
        return sorted(range(len(self.names)), key=lambda i: self.names[i])


def to_camera(cam: Camera, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ cam.rotation.T + cam.translation


def project_camera_space(cam: Camera, pc) -> tuple[np.ndarray, np.ndarray]:
    pc = np.asarray(pc, dtype=np.float64)
    z = pc[:, 2]
    valid = z > Z_NEAR
    zs = np.where(valid, z, 1.0)
    uv = np.stack([cam.fx * pc[:, 0] / zs + cam.cx, cam.fy * pc[:, 1] / zs + cam.cy], axis=1)
    return uv, valid


def project(cam: Camera, points) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``(M, 2)`` and validity flags ``(M,)``."""
    return project_camera_space(cam, to_camera(cam, points))


def project_jacobian(cam: Camera, points):
    """Projection plus its Jacobian ``d(u, v)/d(world point)`` of shape ``(M, 2, 3)``."""
    pc = to_camera(cam, points)
    uv, valid = project_camera_space(cam, pc)
    z = np.where(valid, pc[:, 2], 1.0)
    J = np.zeros((len(pc), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * pc[:, 0] / z ** 2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * pc[:, 1] / z ** 2
    return uv, valid, J @ cam.rotation


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World->camera rotation and translation for a camera at ``eye`` looking at ``target``.

    The camera looks along +z with image ``v`` pointing down (world ``-up``).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye


def ring_rig(n_views: int = 8, distance: float = 600.0, width: int = 256, height: int = 256,
             fov_deg: float = 30.0, elevation_deg: float = 10.0, arc_deg: float = 200.0,
             target=(0.0, 0.0, 0.0)) -> CameraRig:
    """Cameras on a horizontal arc in front of a head facing +z."""
    cams, names = [], []
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    azimuths = np.linspace(-arc_deg / 2, arc_deg / 2, n_views) if n_views > 1 else [0.0]
    for i, az in enumerate(azimuths):
        el = elevation_deg * (1 if i % 2 == 0 else -1)
        a, e = np.radians(az), np.radians(el)
        eye = np.asarray(target) + distance * np.array([np.sin(a) * np.cos(e), np.sin(e), np.cos(a) * np.cos(e)])
        R, t = look_at(eye, target)
        cams.append(Camera(R, t, f, f, (width - 1) / 2,
                           (height - 1) / 2, width, height))
        names.append(f"cam{i:02d}")
    return CameraRig(cams, names)


# --- rig JSON --------------------------------------------------------------

_REQUIRED = ("name", "R", "t", "fx", "fy", "cx", "cy", "width", "height")


def rig_to_dict(rig: CameraRig) -> dict:
    cams = []
    for name, c in zip(rig.names, rig.cameras):
        cams.append({
            "name": name,
            "R": [float(x) for x in c.rotation.ravel()],
            "t": [float(x) for x in c.translation],
            "fx": float(c.fx), "fy": float(c.fy), "cx": float(c.cx), "cy": float(c.cy),
            "width": int(c.width), "height": int(c.height),
        })
    return {"cameras": cams}


def rig_from_dict(doc: dict) -> CameraRig:
    if not isinstance(doc, dict) or not isinstance(doc.get("cameras"), list):
        raise SchemaError("rig JSON must be an object with a 'cameras' list")
    cams, names = [], []
    for i, c in enumerate(doc["cameras"]):
        if not isinstance(c, dict):
            raise SchemaError(f"camera {i} is not an object")
        missing = [k for k in _REQUIRED if k not in c]
        if missing:
            raise SchemaError(f"camera {i} is missing {', '.join(missing)}")
        unknown = sorted(set(c) - set(_REQUIRED))
        if unknown:
            raise SchemaError(f"camera {i} has unknown keys {unknown}")
        if len(c["R"]) != 9 or len(c["t"]) != 3:
            raise SchemaError(f"camera {i}: R needs 9 values and t needs 3")
        cams.append(Camera(np.array(c["R"], dtype=np.float64).reshape(3, 3), c["t"],
                           float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                           int(c["width"]), int(c["height"])))
        names.append(c["name"])
    return CameraRig(cams, names)


def save_rig(rig: CameraRig, path) -> None:
    # json writes floats with repr(), which round-trips exactly
    Path(path).write_text(json.dumps(rig_to_dict(rig), indent=2) + "\n")


def load_rig(path) -> CameraRig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"rig file is not valid JSON: {exc}") from exc
    return rig_from_dict(doc)
