"""Objective terms with analytic gradients.

Every loss returns its value together with gradients w.r.t. the vertex
arrays it depends on. Renderer-coupled terms route map gradients through
:func:`densereg.raster.render_backward`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from densereg import bvh as bvh_mod
from densereg import pliks
from densereg.camera import CameraRig, project_jacobian
from densereg.errors import DimensionError, InvariantError
from densereg.model import Mesh, ParametricModel
from densereg.raster import GeoMaps, render, render_backward

EDGE_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    w_geom: float = 1.0
    w_lm: float = 0.1
    w_align: float = 1.0
    w_reg: float = 1e-4
    lambda_v: float = 1.0
    lambda_e: float = 10.0
    lambda_beta: float = 1e-3
    lambda_psi: float = 1e-3
    sigma_point: float = 10.0
    sigma_normal: float = 1.0
    w_lm_r: float = 0.1
    w_edge_r: float = 10.0
    w_eye_r: float = 1.0
    w_geom_r: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise InvariantError(f"loss weight {k} must be finite and >= 0, got {v}")
        if self.sigma_point <= 0 or self.sigma_normal <= 0:
            raise InvariantError("sigmas must be > 0")

    def replace(self, **kw) -> "LossWeights":
        return LossWeights(**{**asdict(self), **kw})


@dataclass(frozen=True, eq=False)
class Landmarks:
    """Per-view dense 2D landmarks: ``uv`` (K, n_v, 2) pixels and ``confidence`` (K, n_v)."""

    uv: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        uv = np.asarray(self.uv, dtype=np.float64)
        conf = np.asarray(self.confidence, dtype=np.float64)
        if uv.ndim != 3 or uv.shape[2] != 2 or conf.shape != uv.shape[:2]:
            raise DimensionError(f"landmarks must be (K, n_v, 2) with (K, n_v) confidences, "
                                 f"got {uv.shape} and {conf.shape}")
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "confidence", conf)

    @property
    def n_views(self) -> int:
        return self.uv.shape[0]

    def subset(self, order) -> "Landmarks":
        return Landmarks(self.uv[list(order)], self.confidence[list(order)])


@dataclass(eq=False)
class LossReport:
    total: float
    terms: dict = field(default_factory=dict)
    per_view: list = field(default_factory=list)
    counts: list = field(default_factory=list)
    data_term: str = "pointmap"  # what filled the "geom" slot

    def weighted_sum(self, weights: dict) -> float:
        return sum(weights[k] * v for k, v in self.terms.items() if k in weights)

    def to_record(self, step: int | None = None) -> dict:
        rec = {"total": self.total, "terms": dict(self.terms), "per_view": list(self.per_view),
               "counts": list(self.counts), "data_term": self.data_term}
        if step is not None:
            rec = {"step": step, **rec}
        return rec

    def to_json(self, step: int | None = None) -> str:
        return json.dumps(self.to_record(step), sort_keys=True)


# --- robust penalty --------------------------------------------------------


def gm(x, sigma):
    """Geman-McClure penalty ``x^2 / (x^2 + sigma^2)``."""
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    return x2 / (x2 + sigma * sigma)


def gm_vec(r, sigma):
    """Penalty of residual vectors ``r`` (..., 3) and its gradient w.r.t. ``r``."""
    x2 = np.sum(r * r, axis=-1)
    s2 = sigma * sigma
    denom = x2 + s2
    return x2 / denom, (2 * s2 / denom ** 2)[..., None] * r


# --- geometric map loss ----------------------------------------------------


@dataclass(eq=False)
class GeomTerm:
    value: float
    per_view: list
    counts: list
    point_term: float
    normal_term: float
    d_pointmaps: list  # per-view (H, W, 3) gradients
    d_normalmaps: list


def geom_map_loss(pred_maps, gt_maps, weights: LossWeights, order=None) -> GeomTerm:
    """Robust pointmap + normal map discrepancy, mean over shared coverage, summed over views."""
    if len(pred_maps) != len(gt_maps):
        raise DimensionError(f"{len(pred_maps)} predicted views vs {len(gt_maps)} target views")
    order = range(len(pred_maps)) if order is None else order
    per_view = [0.0] * len(pred_maps)
    counts = [0] * len(pred_maps)
    d_p, d_n = [None] * len(pred_maps), [None] * len(pred_maps)
    total = pt = nt = 0.0
    for i in order:
        pm, gm_ = pred_maps[i], gt_maps[i]
        if pm.shape != gm_.shape:
            raise DimensionError(f"view {i}: resolution {pm.shape} vs {gm_.shape}")
        both = pm.mask & gm_.mask
        n = int(both.sum())
        counts[i] = n
        dp = np.zeros(pm.pointmap.shape)
        dn = np.zeros(pm.normalmap.shape)
        if n:
            vp, gp = gm_vec(pm.pointmap[both] - gm_.pointmap[both], weights.sigma_point)
            vn, gn = gm_vec(pm.normalmap[both] - gm_.normalmap[both], weights.sigma_normal)
            sp, sn = vp.sum() / n, vn.sum() / n
            per_view[i] = sp + sn
            pt += sp
            nt += sn
            total += sp + sn
            dp[both] = gp / n
            dn[both] = gn / n
        d_p[i], d_n[i] = dp, dn
    return GeomTerm(total, per_view, counts, pt, nt, d_p, d_n)


def render_views(verts, faces, rig: CameraRig, resolution, order=None):
    H, W = resolution
    mesh = Mesh(verts, faces)
    order = range(len(rig)) if order is None else order
    maps = [None] * len(rig)
    for i in order:
        maps[i] = render(mesh, rig[i], H, W)
    return maps


def geom_loss(verts, faces, rig: CameraRig, gt_maps, weights: LossWeights, resolution=None,
              order=None):
    """Render ``verts`` in every view and return ``(GeomTerm, vertex gradient, pred maps)``."""
    if resolution is None:
        resolution = gt_maps[0].shape
    if len(gt_maps) != len(rig):
        raise DimensionError(f"{len(gt_maps)} target views for a {len(rig)}-camera rig")
    order = rig.canonical_order() if order is None else order
    pred = render_views(verts, faces, rig, resolution, order)
    term = geom_map_loss(pred, gt_maps, weights, order)
    mesh = Mesh(verts, faces)
    grad = np.zeros_like(mesh.vertices)
    for i in order:
        if term.counts[i]:
            grad += render_backward(pred[i], term.d_pointmaps[i], term.d_normalmaps[i], mesh, rig[i])
    return term, grad, pred


# --- landmarks -------------------------------------------------------------


def landmark_view(verts, cam, uv, conf):
    """``D_i`` for one view: confidence-weighted squared pixel error averaged over valid vertices."""
    proj, valid, J = project_jacobian(cam, verts)
    use = valid & (conf > 0)
    n = int(use.sum())
    grad = np.zeros_like(verts)
    if n == 0:
        return 0.0, grad, 0
    r = proj[use] - uv[use]
    c = conf[use]
    value = float(np.sum(c * np.sum(r * r, axis=1)) / n)
    grad[use] = np.einsum("m,mi,mij->mj", 2 * c / n, r, J[use])
    return value, grad, n


def landmark_loss(verts, rig: CameraRig, landmarks: Landmarks, order=None):
    """Sum over views of ``D_i(verts)``; returns ``(value, gradient, per_view)``."""
    verts = np.asarray(verts, dtype=np.float64)
    if landmarks.n_views != len(rig):
        raise DimensionError(f"{landmarks.n_views} landmark views for a {len(rig)}-camera rig")
    if landmarks.uv.shape[1] != len(verts):
        raise DimensionError(f"landmarks cover {landmarks.uv.shape[1]} vertices, mesh has {len(verts)}")
    order = rig.canonical_order() if order is None else order
    total = 0.0
    grad = np.zeros_like(verts)
    per_view = [0.0] * len(rig)
    for i in order:
        v, g, _ = landmark_view(verts, rig[i], landmarks.uv[i], landmarks.confidence[i])
        per_view[i] = v
        total += v
        grad += g
    return total, grad, per_view


# --- topology terms --------------------------------------------------------


def edge_loss(verts_a, verts_b, edges):
    """Mean squared relative edge-length change of ``a`` w.r.t. the reference ``b``."""
    a = np.asarray(verts_a, dtype=np.float64)
    b = np.asarray(verts_b, dtype=np.float64)
    i, j = edges[:, 0], edges[:, 1]
    ea, eb = a[i] - a[j], b[i] - b[j]
    la, lb = np.linalg.norm(ea, axis=1), np.linalg.norm(eb, axis=1)
    den = lb + EDGE_EPS
    r = (la - lb) / den
    m = len(edges)
    value = float(np.mean(r * r))
    # d r / d la and d r / d lb
    dla = 2 * r / den / m
    dlb = -2 * r * (la + EDGE_EPS) / den ** 2 / m
    ua = np.divide(ea, la[:, None], out=np.zeros_like(ea), where=la[:, None] > 0)
    ub = np.divide(eb, lb[:, None], out=np.zeros_like(eb), where=lb[:, None] > 0)
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    np.add.at(ga, i, dla[:, None] * ua)
    np.add.at(ga, j, -dla[:, None] * ua)
    np.add.at(gb, i, dlb[:, None] * ub)
    np.add.at(gb, j, -dlb[:, None] * ub)
    return value, ga, gb


def vertex_loss(verts_a, verts_b):
    """Mean squared vertex distance (mm^2) and gradients w.r.t. both inputs."""
    d = np.asarray(verts_a, dtype=np.float64) - verts_b
    n = len(d)
    return float(np.sum(d * d) / n), 2 * d / n, -2 * d / n


def pliks_align_loss(v_fl, v_pred, edges, weights: LossWeights):
    """Returns ``(value, grad_fl, grad_pred, vertex_term, edge_term)``."""
    vv, gvf, gvp = vertex_loss(v_fl, v_pred)
    ev, gef, gep = edge_loss(v_fl, v_pred, edges)
    value = weights.lambda_v * vv + weights.lambda_e * ev
    return (value, weights.lambda_v * gvf + weights.lambda_e * gef,
            weights.lambda_v * gvp + weights.lambda_e * gep, vv, ev)


def pliks_reg_loss(beta, psi, weights: LossWeights):
    beta = np.asarray(beta, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    value = weights.lambda_beta * float(beta @ beta) + weights.lambda_psi * float(psi @ psi)
    return value, 2 * weights.lambda_beta * beta, 2 * weights.lambda_psi * psi


def eye_loss(v_ref, anchor, eye_mask):
    eye_mask = np.asarray(eye_mask, dtype=bool)
    if eye_mask.shape != (len(v_ref),):
        raise DimensionError(f"eye mask has {eye_mask.shape[0]} entries for {len(v_ref)} vertices")
    grad = np.zeros_like(v_ref)
    n = int(eye_mask.sum())
    if n == 0:
        return 0.0, grad
    d = v_ref[eye_mask] - anchor[eye_mask]
    grad[eye_mask] = 2 * d / n
    return float(np.sum(d * d) / n), grad


# --- baseline data terms ---------------------------------------------------


def point_to_surface_loss(points, mesh: Mesh, tree: bvh_mod.BVH | None = None):
    """Mean squared scan-to-surface distance with the closest-triangle assignment held fixed."""
    points = np.asarray(points, dtype=np.float64)
    if mesh.faces.shape[0] == 0:
        raise ValueError("point_to_surface_loss needs a non-empty mesh")
    tree = tree or bvh_mod.build(mesh.triangles)
    cp = bvh_mod.closest_points(tree, points)
    r = points - cp.point
    m = len(points)
    value = float(np.sum(r * r) / m)
    grad = np.zeros_like(mesh.vertices)
    corners = mesh.faces[cp.face]
    for k in range(3):
        np.add.at(grad, corners[:, k], (-2.0 / m) * cp.bary[:, k, None] * r)
    return value, grad


def chamfer_loss(points_a, points_b):
    """Symmetric Chamfer distance ``0.5 * (mean_a d^2 + mean_b d^2)`` and subgradients."""
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer_loss needs two non-empty point sets")
    _, ia = cKDTree(b).query(a)
    _, ib = cKDTree(a).query(b)
    ra = a - b[ia]
    rb = b - a[ib]
    value = 0.5 * (np.sum(ra * ra) / len(a) + np.sum(rb * rb) / len(b))
    ga = ra / len(a)
    gb = rb / len(b)
    np.add.at(gb, ia, -ra / len(a))
    np.add.at(ga, ib, -rb / len(b))
    return float(value), ga, gb


# --- composite objectives --------------------------------------------------


@dataclass(eq=False)
class Targets:
    """Everything the objectives compare against."""

    model: ParametricModel
    rig: CameraRig
    gt_maps: list
    landmarks: Landmarks
    resolution: tuple
    scan_points: np.ndarray | None = None
    eye_mask: np.ndarray | None = None
    edges: np.ndarray | None = None

    def __post_init__(self):
        if self.edges is None:
            from densereg.model import edges as model_edges
            self.edges = model_edges(self.model)
        if self.eye_mask is None:
            em = self.model.eye_mask
            self.eye_mask = np.zeros(self.model.n_vertices, bool) if em is None else em
        if len(self.gt_maps) != len(self.rig):
            raise DimensionError(f"{len(self.gt_maps)} target views for a {len(self.rig)}-camera rig")
        self.resolution = tuple(int(x) for x in self.resolution)


DATA_TERMS = ("pointmap", "p2s", "chamfer")


def data_term(verts, targets: Targets, weights: LossWeights, kind: str = "pointmap"):
    """Returns ``(value, gradient, GeomTerm | None)`` for the chosen data term."""
    faces = targets.model.faces
    if kind == "pointmap":
        term, grad, _ = geom_loss(verts, faces, targets.rig, targets.gt_maps, weights,
                                  targets.resolution)
        return term.value, grad, term
    if targets.scan_points is None:
        raise ValueError(f"data term {kind!r} needs scan points")
    if kind == "p2s":
        v, g = point_to_surface_loss(targets.scan_points, Mesh(verts, faces))
        return v, g, None
    if kind == "chamfer":
        v, g, _ = chamfer_loss(verts, targets.scan_points)
        return v, g, None
    raise ValueError(f"unknown data term {kind!r}; choose from {DATA_TERMS}")


def total_loss(v_pred, targets: Targets, weights: LossWeights, data: str = "pointmap",
               data_scale: float = 1.0, rotations=None):
    """Coarse objective over free-form vertices; returns ``(report, gradient, pliks result)``."""
    v_pred = np.asarray(v_pred, dtype=np.float64)
    model = targets.model
    res = pliks.run(v_pred, model, weights.lambda_beta, weights.lambda_psi, rotations=rotations)
    w_data = weights.w_geom * data_scale
    geom_v, g_geom, term = data_term(v_pred, targets, weights, data)
    lm_p, g_lm_p, _ = landmark_loss(v_pred, targets.rig, targets.landmarks)
    lm_f, g_lm_f, _ = landmark_loss(res.v_fl, targets.rig, targets.landmarks)
    al, g_al_f, g_al_p, vterm, eterm = pliks_align_loss(res.v_fl, v_pred, targets.edges, weights)
    reg, g_beta, g_psi = pliks_reg_loss(res.beta, res.psi, weights)

    total = w_data * geom_v + weights.w_lm * (lm_p + lm_f) + weights.w_align * al + weights.w_reg * reg
    grad = w_data * g_geom + weights.w_lm * g_lm_p + weights.w_align * g_al_p
    grad += res.backward(g_vfl=weights.w_lm * g_lm_f + weights.w_align * g_al_f,
                         g_beta=weights.w_reg * g_beta, g_psi=weights.w_reg * g_psi)
    report = LossReport(
        total=float(total),
        terms={"geom": geom_v, "lm": lm_p + lm_f, "lm_pred": lm_p, "lm_fl": lm_f,
               "align": al, "align_vertex": vterm, "align_edge": eterm, "reg": reg,
               "pliks_residual": res.residual},
        per_view=list(term.per_view) if term else [],
        counts=list(term.counts) if term else [],
        data_term=data,
    )
    return report, grad, res


def total_weights(weights: LossWeights, data_scale: float = 1.0) -> dict:
    """Multipliers that map report terms onto ``report.total``."""
    return {"geom": weights.w_geom * data_scale, "lm": weights.w_lm, "align": weights.w_align,
            "reg": weights.w_reg}


def refine_loss(v_ref, v_pred_anchor, eye_mask, targets: Targets, weights: LossWeights,
                data: str = "pointmap", data_scale: float = 1.0):
    """Refinement objective around a frozen anchor; returns ``(report, gradient)``."""
    v_ref = np.asarray(v_ref, dtype=np.float64)
    anchor = np.asarray(v_pred_anchor, dtype=np.float64)
    eye_mask = np.asarray(eye_mask, dtype=bool)
    if eye_mask.shape != (len(v_ref),):
        raise DimensionError(f"eye mask has {eye_mask.shape[0]} entries for {len(v_ref)} vertices")
    lm, g_lm, _ = landmark_loss(v_ref, targets.rig, targets.landmarks)
    ed, g_ed, _ = edge_loss(v_ref, anchor, targets.edges)
    ey, g_ey = eye_loss(v_ref, anchor, eye_mask)
    geom_v, g_geom, term = data_term(v_ref, targets, weights, data)
    w_data = weights.w_geom_r * data_scale
    total = weights.w_lm_r * lm + weights.w_edge_r * ed + weights.w_eye_r * ey + w_data * geom_v
    grad = weights.w_lm_r * g_lm + weights.w_edge_r * g_ed + weights.w_eye_r * g_ey + w_data * g_geom
    report = LossReport(
        total=float(total),
        terms={"lm": lm, "edge": ed, "eye": ey, "geom": geom_v},
        per_view=list(term.per_view) if term else [],
        counts=list(term.counts) if term else [],
        data_term=data,
    )
    return report, grad


def refine_weights(weights: LossWeights, data_scale: float = 1.0) -> dict:
    return {"lm": weights.w_lm_r, "edge": weights.w_edge_r, "eye": weights.w_eye_r,
            "geom": weights.w_geom_r * data_scale}
