"""Synthetic oracle scenes: ground-truth heads, remeshed scans, rendered maps, landmarks."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from densereg import container
from densereg.camera import CameraRig, load_rig, project, ring_rig, rig_to_dict, save_rig, to_camera
from densereg.errors import InvariantError
from densereg.losses import Landmarks
from densereg.metrics import RegionMasks, load_masks, save_masks
from densereg.model import (Mesh, ParametricModel, Params, axis_angle_to_matrix, forward,
                            load_model, save_model)
from densereg.raster import GeoMaps, load_geomaps, render, save_geomaps

log = logging.getLogger(__name__)

SCENE_FORMAT = 1
OCCLUSION_MM = 1.0


@dataclass(frozen=True)
class NoiseSpec:
    scan_jitter: float = 0.0  # mm, per scan vertex
    hole_fraction: float = 0.0  # fraction of scan faces removed in patches
    n_holes: int = 3
    landmark_px: float = 0.0  # pixel noise on landmarks
    beta_std: float = 1.0
    psi_std: float = 1.0
    coeff_bound: float = 2.0  # coefficients are clipped to +/- bound * std
    head_pose_deg: float = 5.0  # std of the root rotation
    segment_pose_deg: float = 0.0  # std of non-root rotations
    trans_mm: float = 10.0  # uniform translation range per axis

    @classmethod
    def noiseless(cls, **kw) -> "NoiseSpec":
        return cls(**kw)


@dataclass(frozen=True)
class RigSpec:
    n_views: int = 8
    distance: float = 600.0
    resolution: tuple = (128, 128)
    fov_deg: float = 30.0
    arc_deg: float = 200.0

    def build(self) -> CameraRig:
        H, W = self.resolution
        return ring_rig(self.n_views, self.distance, W, H, self.fov_deg, arc_deg=self.arc_deg)


@dataclass(eq=False)
class Scene:
    model: ParametricModel
    rig: CameraRig
    gt_params: Params
    gt_mesh: Mesh
    scan: Mesh
    gt_maps: list
    landmarks: Landmarks
    eye_mask: np.ndarray
    masks: RegionMasks
    seed: int
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    @property
    def resolution(self) -> tuple:
        return self.gt_maps[0].shape


def make_region_masks(model: ParametricModel) -> RegionMasks:
    """Evaluation regions over the toy head, from template directions (y up, face towards +z)."""
    X = model.template_vertices
    d = (X - X.mean(axis=0)) / np.linalg.norm(X - X.mean(axis=0), axis=1, keepdims=True)
    y, z = d[:, 1], d[:, 2]
    scalp = (y > 0.55) | ((y > 0.15) & (z < -0.3))
    boundary = y < -0.85
    neck = (y >= -0.85) & (y < -0.55)
    face = (z > 0.35) & (y >= -0.55) & (y <= 0.55)
    lips_c = np.array([0.0, -0.3, 0.95])
    lips = np.linalg.norm(d - lips_c / np.linalg.norm(lips_c), axis=1) < 0.22
    other = ~(scalp | boundary | neck | face)
    regions = {"face": face, "lips": lips, "neck": neck, "sides": other,
               "scalp": scalp, "boundary": boundary}
    return RegionMasks({k: np.flatnonzero(v) for k, v in regions.items()}, ("scalp", "boundary"))


def subdivide(mesh: Mesh) -> Mesh:
    """One level of midpoint subdivision; new vertices lie exactly on the input surface."""
    V, F = mesh.vertices, mesh.faces
    e = np.sort(np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]]), axis=1)
    uniq, inv = np.unique(e, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    mids = 0.5 * (V[uniq[:, 0]] + V[uniq[:, 1]])
    n = len(V)
    m = len(F)
    ab, bc, ca = inv[:m] + n, inv[m:2 * m] + n, inv[2 * m:] + n
    a, b, c = F[:, 0], F[:, 1], F[:, 2]
    faces = np.concatenate([np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
                            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1)])
    return Mesh(np.concatenate([V, mids]), faces)


def punch_holes(mesh: Mesh, fraction: float, n_holes: int, rng) -> Mesh:
    """Delete ``round(fraction * n_f)`` faces in ``n_holes`` compact patches."""
    n_f = len(mesh.faces)
    target = int(round(fraction * n_f))
    if target <= 0:
        return mesh
    cent = mesh.triangles.mean(axis=1)
    keep = np.ones(n_f, bool)
    per = np.diff(np.linspace(0, target, n_holes + 1).round().astype(int))
    for k in per:
        alive = np.flatnonzero(keep)
        if k <= 0 or len(alive) == 0:
            continue
        center = cent[alive[rng.integers(len(alive))]]
        d = np.linalg.norm(cent[alive] - center, axis=1)
        keep[alive[np.argsort(d, kind="stable")[:k]]] = False
    return compact(Mesh(mesh.vertices, mesh.faces[keep]))


def compact(mesh: Mesh) -> Mesh:
    used = np.unique(mesh.faces)
    remap = np.full(len(mesh.vertices), -1)
    remap[used] = np.arange(len(used))
    return Mesh(mesh.vertices[used], remap[mesh.faces])


def sample_params(model: ParametricModel, noise: NoiseSpec, rng) -> Params:
    def bounded(n, std):
        return np.clip(rng.normal(size=n), -noise.coeff_bound, noise.coeff_bound) * std

    theta = np.zeros((model.n_segments, 3))
    theta[model.root] = bounded(3, np.radians(noise.head_pose_deg))
    for s in range(model.n_segments):
        if s != model.root:
            theta[s] = bounded(3, np.radians(noise.segment_pose_deg))
    trans = rng.uniform(-noise.trans_mm, noise.trans_mm, size=3)
    return Params(bounded(model.n_beta, noise.beta_std), bounded(model.n_psi, noise.psi_std),
                  theta, trans)


def render_maps(mesh: Mesh, rig: CameraRig, resolution) -> list:
    H, W = resolution
    return [render(mesh, cam, H, W) for cam in rig]


def make_landmarks(gt_mesh: Mesh, rig: CameraRig, scan_maps, noise_px: float, rng) -> Landmarks:
    """Exact projections plus pixel noise; confidence 0 for vertices hidden behind the scan."""
    uv_all, conf_all = [], []
    for cam, maps in zip(rig, scan_maps):
        H, W = maps.shape
        cam_r = cam if (cam.width, cam.height) == (W, H) else cam.resized(W, H)
        uv, valid = project(cam_r, gt_mesh.vertices)
        # landmarks are expressed in the rig's own resolution
        uv_native, _ = project(cam, gt_mesh.vertices)
        px = np.rint(uv).astype(np.int64)
        inside = valid & (px[:, 0] >= 0) & (px[:, 0] < W) & (px[:, 1] >= 0) & (px[:, 1] < H)
        depth = to_camera(cam, gt_mesh.vertices)[:, 2]
        conf = inside.astype(np.float64)
        idx = np.flatnonzero(inside)
        hit = maps.mask[px[idx, 1], px[idx, 0]]
        scan_depth = to_camera(cam, maps.pointmap[px[idx, 1], px[idx, 0]])[:, 2]
        occluded = hit & (depth[idx] > scan_depth + OCCLUSION_MM)
        conf[idx[occluded]] = 0.0
        if noise_px > 0:
            uv_native = uv_native + rng.normal(scale=noise_px, size=uv_native.shape)
        uv_all.append(uv_native)
        conf_all.append(conf)
    return Landmarks(np.stack(uv_all), np.stack(conf_all))


def make_scene(model: ParametricModel, rig_spec=None, seed: int = 0,
               noise_spec: NoiseSpec | None = None, resolution=None) -> Scene:
    noise = noise_spec or NoiseSpec()
    if isinstance(rig_spec, CameraRig):
        rig = rig_spec
        resolution = resolution or (rig[0].height, rig[0].width)
    else:
        rig_spec = rig_spec or RigSpec()
        rig = rig_spec.build()
        resolution = resolution or tuple(rig_spec.resolution)
    rng = np.random.default_rng(seed)
    params = sample_params(model, noise, rng)
    gt = forward(model, params)
    scan = subdivide(gt)
    if noise.scan_jitter > 0:
        scan = Mesh(scan.vertices + rng.normal(scale=noise.scan_jitter, size=scan.vertices.shape),
                    scan.faces)
    if noise.hole_fraction > 0:
        scan = punch_holes(scan, noise.hole_fraction, noise.n_holes, rng)
    maps = render_maps(scan, rig, resolution)
    if not any(m.mask.any() for m in maps):
        raise InvariantError("no camera of the rig sees the head")
    lms = make_landmarks(gt, rig, maps, noise.landmark_px, rng)
    eye = model.eye_mask if model.eye_mask is not None else np.zeros(model.n_vertices, bool)
    return Scene(model, rig, params, gt, scan, maps, lms, np.asarray(eye, bool),
                 make_region_masks(model), seed, noise)


def perturb_init(gt_vertices, magnitude: float, seed: int = 0, rigid: float = 0.0,
                 n_centers: int = 6, width: float = 80.0) -> np.ndarray:
    """Ground truth plus a smooth displacement field of RMS ``magnitude`` mm and a rigid shift."""
    V = np.asarray(gt_vertices, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = V.copy()
    if magnitude > 0:
        lo, hi = V.min(axis=0), V.max(axis=0)
        centers = rng.uniform(lo, hi, size=(n_centers, 3))
        amps = rng.normal(size=(n_centers, 3))
        d2 = ((V[:, None, :] - centers[None]) ** 2).sum(-1)
        field_ = np.exp(-d2 / (2 * width ** 2)) @ amps
        rms = np.sqrt(np.mean(np.sum(field_ ** 2, axis=1)))
        out += field_ * (magnitude / rms)
    if rigid > 0:
        direction = rng.normal(size=3)
        out += rigid * direction / np.linalg.norm(direction)
    return out


# --- scene directories -----------------------------------------------------


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_scene(scene: Scene, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_model(scene.model, d / "model.dreg")
    save_rig(scene.rig, d / "rig.json")
    p = scene.gt_params
    container.write(d / "truth.dreg", {
        "gt_vertices": scene.gt_mesh.vertices, "faces": scene.gt_mesh.faces,
        "beta": p.beta, "psi": p.psi, "theta": p.theta, "trans": p.trans,
        "scan_vertices": scene.scan.vertices, "scan_faces": scene.scan.faces,
        "eye_mask": scene.eye_mask,
    }, "scene", dtypes={"faces": "<i4", "scan_faces": "<i4"})
    container.write(d / "landmarks.dreg", {"uv": scene.landmarks.uv,
                                           "confidence": scene.landmarks.confidence}, "landmarks")
    save_masks(scene.masks, d / "masks.json")
    files = ["model.dreg", "rig.json", "truth.dreg", "landmarks.dreg", "masks.json"]
    manifest = {
        "format": SCENE_FORMAT,
        "seed": scene.seed,
        "noise": asdict(scene.noise),
        "resolution": list(scene.resolution),
        "files": {f: _sha256(d / f) for f in files},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    # warm the render cache with the maps we already have
    _write_cache(d, scene.scan, scene.rig, scene.resolution, scene.gt_maps)
    return d / "manifest.json"


def audit_scene(directory) -> list[str]:
    """Names of files whose checksum no longer matches the manifest."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    bad = []
    for name, digest in manifest["files"].items():
        if not (d / name).exists() or _sha256(d / name) != digest:
            bad.append(name)
    return bad


def load_scene(directory, resolution=None) -> Scene:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    bad = audit_scene(d)
    if bad:
        raise container.ChecksumError(f"scene files fail the manifest audit: {bad}")
    model = load_model(d / "model.dreg")
    rig = load_rig(d / "rig.json")
    t, _ = container.read(d / "truth.dreg", kind="scene")
    lm, _ = container.read(d / "landmarks.dreg", kind="landmarks")
    params = Params(t["beta"], t["psi"], t["theta"], t["trans"])
    scan = Mesh(t["scan_vertices"], t["scan_faces"])
    resolution = tuple(resolution or manifest["resolution"])
    maps = prerender_scan(d, resolution, scan=scan, rig=rig)
    return Scene(model, rig, params, Mesh(t["gt_vertices"], t["faces"]), scan, maps,
                 Landmarks(lm["uv"], lm["confidence"]), t["eye_mask"].astype(bool),
                 load_masks(d / "masks.json"), int(manifest["seed"]),
                 NoiseSpec(**manifest["noise"]))


def _cache_key(scan: Mesh, rig: CameraRig, resolution) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(scan.vertices, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(scan.faces, dtype="<i8").tobytes())
    h.update(json.dumps(rig_to_dict(rig), sort_keys=True).encode())
    h.update(repr(tuple(int(x) for x in resolution)).encode())
    return h.hexdigest()[:24]


def _cache_path(directory, scan, rig, resolution) -> Path:
    H, W = resolution
    return Path(directory) / "cache" / f"scanmaps_{H}x{W}_{_cache_key(scan, rig, resolution)}.dreg"


def _write_cache(directory, scan, rig, resolution, maps) -> Path:
    path = _cache_path(directory, scan, rig, resolution)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_geomaps(maps, tmp, meta={"resolution": list(resolution)})
    tmp.replace(path)
    return path


def prerender_scan(scene_or_dir, resolution, scan: Mesh | None = None,
                   rig: CameraRig | None = None, cache_dir=None) -> list:
    """Per-view scan maps at ``resolution``, served from the on-disk cache when possible."""
    if isinstance(scene_or_dir, Scene):
        scan, rig = scene_or_dir.scan, scene_or_dir.rig
        if cache_dir is None:
            log.info("rendering scan maps without a cache directory")
            return render_maps(scan, rig, resolution)
        directory = Path(cache_dir)
    else:
        directory = Path(cache_dir or scene_or_dir)
        if scan is None or rig is None:
            t, _ = container.read(Path(scene_or_dir) / "truth.dreg", kind="scene")
            scan = Mesh(t["scan_vertices"], t["scan_faces"])
            rig = load_rig(Path(scene_or_dir) / "rig.json")
    resolution = tuple(int(x) for x in resolution)
    path = _cache_path(directory, scan, rig, resolution)
    if path.exists():
        log.info("scan map cache hit: %s", path.name)
        return load_geomaps(path)
    log.info("scan map cache miss: rendering %s", path.name)
    maps = render_maps(scan, rig, resolution)
    _write_cache(directory, scan, rig, resolution, maps)
    return maps
