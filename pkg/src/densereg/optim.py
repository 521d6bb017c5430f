"""Adam-driven fitting loops over free-form vertex positions."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from densereg import container, pliks
from densereg.camera import CameraRig, project
from densereg.errors import OptimizationError
from densereg.losses import (DATA_TERMS, Landmarks, LossReport, LossWeights, Targets,
                             edge_loss, geom_loss, landmark_loss, pliks_align_loss,
                             pliks_reg_loss, refine_loss, render_views, total_loss)
from densereg.model import ParametricModel

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "fitstate"
VARIANTS = ("coarse", "tto", "direct")
TTO_ITERATIONS = 50


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 500
    learning_rate: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_tol: float = 1e-8  # stationarity: no update while max|g| stays at or below this
    weights: LossWeights = field(default_factory=LossWeights)
    resolution: tuple = (128, 128)
    seed: int = 0
    variant: str = "coarse"
    log_every: int = 0
    data_term: str = "pointmap"
    data_scale: float = 1.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ValueError("learning rate and eps must be > 0")
        if self.grad_tol < 0:
            raise ValueError("grad_tol must be >= 0")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0 < b < 1:
                raise ValueError("Adam betas must lie in (0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.data_term not in DATA_TERMS:
            raise ValueError(f"data_term must be one of {DATA_TERMS}")
        if self.data_scale < 0:
            raise ValueError("data_scale must be >= 0")
        object.__setattr__(self, "resolution", tuple(int(x) for x in self.resolution))

    def replace(self, **kw) -> "FitConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass(eq=False)
class FitState:
    v_pred: np.ndarray  # decision variable (V_pred, or V_ref for refinement)
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    history: list = field(default_factory=list)  # one LossReport record per step
    pliks: pliks.PliksResult | None = None
    anchor: np.ndarray | None = None  # frozen coarse vertices during refinement

    @classmethod
    def start(cls, verts, anchor=None) -> "FitState":
        verts = np.array(verts, dtype=np.float64)
        return cls(verts, np.zeros_like(verts), np.zeros_like(verts), 0, [], None,
                   None if anchor is None else np.array(anchor, dtype=np.float64))

    def copy(self) -> "FitState":
        return FitState(self.v_pred.copy(), self.m.copy(), self.v.copy(), self.step,
                        list(self.history), self.pliks,
                        None if self.anchor is None else self.anchor.copy())

    def losses(self) -> np.ndarray:
        return np.array([h["total"] for h in self.history])


def adam_step(state: FitState, gradient, config: FitConfig) -> FitState:
    """One bias-corrected Adam update, in place; returns ``state``."""
    g = np.asarray(gradient, dtype=np.float64)
    bad = ~np.isfinite(g)
    if bad.any():
        i = np.unravel_index(int(np.flatnonzero(bad)[0]), g.shape)
        raise OptimizationError(f"non-finite gradient at coordinate {tuple(int(x) for x in i)}",
                                state.step)
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.step += 1
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * g * g
    if np.abs(g).max(initial=0.0) <= config.grad_tol:
        # Adam rescales rounding-level gradients to full-size steps; at a
        # stationary point that would only inject noise
        return state
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    state.v_pred = state.v_pred - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return state


def make_targets(model, rig, gt_maps, landmarks, config: FitConfig, scan_points=None,
                 eye_mask=None) -> Targets:
    return Targets(model, rig, list(gt_maps), landmarks, config.resolution,
                   scan_points=scan_points, eye_mask=eye_mask)


def _run(state: FitState, config: FitConfig, objective, callback=None) -> FitState:
    while state.step < config.iterations:
        it = state.step
        try:
            report, grad, extra = objective(state.v_pred)
        except OptimizationError:
            raise
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            raise OptimizationError(str(exc), it) from exc
        if not np.isfinite(report.total):
            raise OptimizationError("loss became non-finite", it)
        if extra is not None:
            state.pliks = extra
        state.history.append(report.to_record(it))
        adam_step(state, grad, config)
        if config.log_every and (it % config.log_every == 0 or state.step == config.iterations):
            log.info("step %d loss %.6g", it, report.total)
        if callback is not None and callback(state):
            break  # a truthy callback return stops the loop early
    return state


def fit_coarse(model: ParametricModel, rig: CameraRig, gt_maps, landmarks: Landmarks,
               init_verts=None, config: FitConfig = FitConfig(), scan_points=None,
               state: FitState | None = None, callback=None) -> FitState:
    """Minimise the coarse objective over free-form vertices.

    Pass ``state`` (e.g. a loaded checkpoint) to resume; the continuation is
    bit-identical to an uninterrupted run.
    """
    targets = make_targets(model, rig, gt_maps, landmarks, config, scan_points)
    if state is None:
        if init_verts is None:
            init_verts = initial_alignment(model, rig, landmarks)
        state = FitState.start(init_verts)

    def objective(v):
        return total_loss(v, targets, config.weights, config.data_term, config.data_scale)

    state = _run(state, config, objective, callback)
    # attach the PLIKS result for the final vertices
    w = config.weights
    state.pliks = pliks.run(state.v_pred, model, w.lambda_beta, w.lambda_psi)
    return state


def refine_tto(model: ParametricModel, rig: CameraRig, gt_maps, landmarks: Landmarks,
               eye_mask, coarse: FitState, config: FitConfig | None = None, scan_points=None,
               state: FitState | None = None, callback=None) -> FitState:
    """Refine a coarse fit around its frozen vertices with the refinement objective."""
    config = config or FitConfig(iterations=TTO_ITERATIONS, variant="tto")
    targets = make_targets(model, rig, gt_maps, landmarks, config, scan_points, eye_mask)
    if state is None:
        state = FitState.start(coarse.v_pred, anchor=coarse.v_pred)
    anchor = state.anchor

    def objective(v):
        report, grad = refine_loss(v, anchor, targets.eye_mask, targets, config.weights,
                                   config.data_term, config.data_scale)
        return report, grad, None

    return _run(state, config, objective, callback)


def fit_direct(model, rig, gt_maps, landmarks, eye_mask, coarse: FitState,
               config: FitConfig | None = None, scan_points=None, state=None,
               callback=None) -> FitState:
    """Unregularised baseline: the refinement loop with edge and eyeball terms switched off."""
    config = config or FitConfig(iterations=TTO_ITERATIONS, variant="direct")
    w = config.weights.replace(w_edge_r=0.0, w_eye_r=0.0)
    return refine_tto(model, rig, gt_maps, landmarks, eye_mask, coarse,
                      config.replace(weights=w, variant="direct"), scan_points, state, callback)


# --- initialisation ----------------------------------------------------------


def triangulate(rig: CameraRig, landmarks: Landmarks, min_views: int = 2):
    """Linear (DLT) triangulation of every landmark seen with confidence > 0 in enough views."""
    K = len(rig)
    n = landmarks.uv.shape[1]
    P = []
    for cam in rig:
        Kmat = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1.0]])
        P.append(Kmat @ np.hstack([cam.rotation, cam.translation[:, None]]))
    P = np.array(P)
    seen = landmarks.confidence > 0
    ok = seen.sum(axis=0) >= min_views
    X = np.full((n, 3), np.nan)
    for j in np.flatnonzero(ok):
        rows = []
        for i in range(K):
            if seen[i, j]:
                u, v = landmarks.uv[i, j]
                rows.append(u * P[i, 2] - P[i, 0])
                rows.append(v * P[i, 2] - P[i, 1])
        A = np.array(rows)
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        _, _, Vt = np.linalg.svd(A)
        h = Vt[-1]
        X[j] = h[:3] / h[3]
    return X, ok


def initial_alignment(model: ParametricModel, rig: CameraRig, landmarks: Landmarks) -> np.ndarray:
    """Template rigidly aligned (Procrustes) onto triangulated landmarks."""
    X, ok = triangulate(rig, landmarks)
    T = model.template_vertices
    if ok.sum() < 3:
        raise OptimizationError("fewer than three landmarks could be triangulated")
    R = pliks._kabsch(T[ok], X[ok])
    if R is None:
        R = np.eye(3)
    t = X[ok].mean(axis=0) - R @ T[ok].mean(axis=0)
    return T @ R.T + t


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(state: FitState, path, config: FitConfig | None = None) -> None:
    arrays = {"v_pred": state.v_pred, "m": state.m, "v": state.v}
    if state.anchor is not None:
        arrays["anchor"] = state.anchor
    meta = {"step": state.step, "history": state.history}
    if config is not None:
        meta["config"] = config.to_dict()
    container.write(path, arrays, CHECKPOINT_KIND, meta=meta,
                    dtypes={k: "<f8" for k in arrays})


def load_checkpoint(path) -> tuple[FitState, dict | None]:
    arrays, header = container.read(path, kind=CHECKPOINT_KIND)
    meta = header["meta"]
    state = FitState(arrays["v_pred"], arrays["m"], arrays["v"], int(meta["step"]),
                     list(meta["history"]), None, arrays.get("anchor"))
    return state, meta.get("config")


def write_history(state: FitState, path) -> None:
    with open(path, "w") as fh:
        for rec in state.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# --- gradient checking -------------------------------------------------------

OBJECTIVES = ("geom", "landmark", "edge", "align", "reg", "refine", "total")
DEFAULT_TOLERANCE = {"geom": 1e-3, "refine": 1e-3, "total": 1e-3, "landmark": 1e-6,
                     "edge": 1e-6, "align": 1e-6, "reg": 1e-8}
FD_STEP = 1e-3  # mm


@dataclass
class GradcheckReport:
    objective: str
    max_rel_error: float  # max |a - f| over checked coordinates, divided by max |f|
    tolerance: float
    checked: int
    skipped: int
    worst_coordinate_error: float = 0.0  # per-coordinate, floored at 1e-3 max |f|
    worst_coordinate: int = -1

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.objective:8s} max_rel_err={self.max_rel_error:.3e} "
                f"tol={self.tolerance:.0e} checked={self.checked} skipped={self.skipped} "
                f"worst_coord_err={self.worst_coordinate_error:.2e}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def gradcheck_problem(seed: int = 0, resolution=(64, 64), n_views: int = 4):
    """Small random configuration shared by all objectives."""
    from densereg.model import make_toy_model
    from densereg.synth import NoiseSpec, RigSpec, make_scene, perturb_init

    model = make_toy_model(seed, n_v=162, n_beta=6, n_psi=4, S=3)
    scene = make_scene(model, RigSpec(n_views=n_views, resolution=resolution), seed=seed,
                       noise_spec=NoiseSpec())
    v = perturb_init(scene.gt_mesh.vertices, 1.5, seed=seed + 1, rigid=1.0)
    other = perturb_init(scene.gt_mesh.vertices, 1.0, seed=seed + 2)
    targets = Targets(model, scene.rig, scene.gt_maps, scene.landmarks, resolution,
                      scan_points=scene.scan.vertices, eye_mask=scene.eye_mask)
    return model, targets, v, other


def _objective(name, model, targets: Targets, v0, other, weights: LossWeights):
    """``f(x) -> (value, grad, signature)`` for the named objective at flat coordinates ``x``."""
    faces = model.faces
    E = targets.edges
    shape = v0.shape
    frozen = pliks.run(v0, model, weights.lambda_beta, weights.lambda_psi).rotations

    def sig_of(maps):
        return tuple(m.face_id.tobytes() for m in maps if m is not None)

    if name == "geom":
        def f(x):
            term, g, maps = geom_loss(x.reshape(shape), faces, targets.rig, targets.gt_maps,
                                      weights, targets.resolution)
            return term.value, g.ravel(), sig_of(maps)
        return f, v0.ravel()
    if name == "landmark":
        def f(x):
            val, g, _ = landmark_loss(x.reshape(shape), targets.rig, targets.landmarks)
            return val, g.ravel(), None
        return f, v0.ravel()
    if name == "edge":
        n = v0.size

        def f(x):
            val, ga, gb = edge_loss(x[:n].reshape(shape), x[n:].reshape(shape), E)
            return val, np.concatenate([ga.ravel(), gb.ravel()]), None
        return f, np.concatenate([v0.ravel(), other.ravel()])
    if name == "align":
        n = v0.size

        def f(x):
            val, gf, gp, _, _ = pliks_align_loss(x[:n].reshape(shape), x[n:].reshape(shape), E, weights)
            return val, np.concatenate([gf.ravel(), gp.ravel()]), None
        return f, np.concatenate([other.ravel(), v0.ravel()])
    if name == "reg":
        def f(x):
            res = pliks.run(x.reshape(shape), model, weights.lambda_beta, weights.lambda_psi,
                            rotations=frozen)
            val, gb, gp = pliks_reg_loss(res.beta, res.psi, weights)
            return val, res.backward(g_beta=gb, g_psi=gp).ravel(), None
        return f, v0.ravel()
    if name == "refine":
        def f(x):
            rep, g = refine_loss(x.reshape(shape), other, targets.eye_mask, targets, weights)
            maps = render_views(x.reshape(shape), faces, targets.rig, targets.resolution)
            return rep.total, g.ravel(), sig_of(maps)
        return f, v0.ravel()
    if name == "total":
        def f(x):
            rep, g, _ = total_loss(x.reshape(shape), targets, weights, rotations=frozen)
            maps = render_views(x.reshape(shape), faces, targets.rig, targets.resolution)
            return rep.total, g.ravel(), sig_of(maps)
        return f, v0.ravel()
    raise ValueError(f"unknown objective {name!r}; choose from {OBJECTIVES}")


def gradcheck(objective_id: str, seed: int = 0, tolerance: float | None = None,
              step: float = FD_STEP, max_coords: int | None = None,
              weights: LossWeights | None = None, problem=None) -> GradcheckReport:
    """Central finite differences against the analytic gradient.

    The error is measured in the max norm, ``max_c |a_c - f_c| / max_c |f_c|``,
    over coordinates whose pixel-to-triangle assignment is unchanged by the
    step. Per-coordinate ratios are reported too; at a 1e-3 mm step they carry
    O(step^2) truncation error on coordinates whose gradient nearly cancels.
    """
    if objective_id not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective_id!r}; choose from {OBJECTIVES}")
    tol = DEFAULT_TOLERANCE[objective_id] if tolerance is None else tolerance
    weights = weights or LossWeights(w_reg=1.0, lambda_beta=1e-2, lambda_psi=1e-2)
    model, targets, v0, other = problem or gradcheck_problem(seed)
    f, x0 = _objective(objective_id, model, targets, v0, other, weights)
    _, g, sig0 = f(x0)
    coords = np.arange(x0.size)
    if max_coords is not None and max_coords < x0.size:
        coords = np.sort(np.random.default_rng(seed).choice(x0.size, max_coords, replace=False))
    kept, fds = [], []
    for c in coords:
        xp = x0.copy()
        xp[c] += step
        xm = x0.copy()
        xm[c] -= step
        fp, _, sp = f(xp)
        fm, _, sm = f(xm)
        if sig0 is not None and (sp != sig0 or sm != sig0):
            continue
        kept.append(c)
        fds.append((fp - fm) / (2 * step))
    kept = np.array(kept, dtype=np.int64)
    if kept.size == 0:
        return GradcheckReport(objective_id, float("inf"), tol, 0, len(coords))
    fd = np.array(fds)
    a = g[kept]
    diff = np.abs(a - fd)
    scale = max(np.abs(fd).max(), np.abs(a).max(), 1e-300)
    per = diff / np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-3 * scale)
    w = int(np.argmax(per))
    return GradcheckReport(objective_id, float(diff.max() / scale), tol, int(kept.size),
                           int(len(coords) - kept.size), float(per[w]), int(kept[w]))
