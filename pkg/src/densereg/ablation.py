"""Seeded trial harness: data-term ablations and refinement-iteration sweeps on synthetic scenes."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from densereg import metrics
from densereg.errors import DenseRegError
from densereg.losses import DATA_TERMS, LossWeights, Targets, data_term
from densereg.model import Mesh, ParametricModel, make_toy_model
from densereg.optim import FitConfig, fit_coarse, fit_direct, refine_tto
from densereg.synth import NoiseSpec, RigSpec, Scene, make_scene, perturb_init

log = logging.getLogger(__name__)

TTO_SWEEP = (5, 10, 20, 50, 100)


def worker_count(default: int | None = None) -> int:
    env = os.environ.get("DENSEREG_THREADS")
    if env:
        return max(1, int(env))
    return default or (os.cpu_count() or 1)


def matched_scale(verts, targets: Targets, weights: LossWeights, kind: str) -> float:
    """Multiplier giving data term ``kind`` the pointmap term's gradient norm at ``verts``."""
    if kind == "pointmap":
        return 1.0
    ref = np.linalg.norm(data_term(verts, targets, weights, "pointmap")[1])
    other = np.linalg.norm(data_term(verts, targets, weights, kind)[1])
    if other == 0 or ref == 0:
        return 1.0
    return float(ref / other)


@dataclass(frozen=True)
class TrialSpec:
    trial_id: int
    seed: int
    loss: str = "pointmap"
    weight: float = 1.0  # multiplier on the (matched) data term
    iterations: int = 500
    tto_iters: tuple = ()
    resolution: tuple = (96, 96)
    n_views: int = 8
    init_rms: float = 5.0
    init_rigid: float = 10.0
    learning_rate: float = 0.1
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    model_seed: int = 0
    n_vertices: int = 642

    def __post_init__(self):
        if self.loss not in DATA_TERMS:
            raise ValueError(f"loss must be one of {DATA_TERMS}")


def scene_for(spec: TrialSpec, model: ParametricModel | None = None) -> Scene:
    model = model or make_toy_model(spec.model_seed, n_v=spec.n_vertices)
    return make_scene(model, RigSpec(n_views=spec.n_views, resolution=spec.resolution),
                      seed=spec.seed, noise_spec=spec.noise)


def median_p2s(scene: Scene, verts) -> float:
    d = metrics.point_to_surface(scene.scan.vertices, Mesh(verts, scene.model.faces))
    return float(np.median(d))


def _row(spec: TrialSpec, stage: str, iters: int, scene: Scene, verts, status="ok") -> dict:
    mesh = Mesh(verts, scene.model.faces)
    d = metrics.point_to_surface(scene.scan.vertices, mesh)
    return {"trial_id": spec.trial_id, "seed": spec.seed, "loss": spec.loss,
            "weight": spec.weight, "stage": stage, "iters": iters,
            "median_p2s": float(np.median(d)), "mean_p2s": float(np.mean(d)),
            "flipped_faces": metrics.flipped_faces(mesh, scene.gt_mesh), "status": status}


def run_trial(spec: TrialSpec, model: ParametricModel | None = None) -> list[dict]:
    """Coarse fit with the chosen data term, then an optional refinement sweep."""
    scene = scene_for(spec, model)
    model = scene.model
    init = perturb_init(scene.gt_mesh.vertices, spec.init_rms, seed=spec.seed + 10_000,
                        rigid=spec.init_rigid)
    targets = Targets(model, scene.rig, scene.gt_maps, scene.landmarks, spec.resolution,
                      scan_points=scene.scan.vertices, eye_mask=scene.eye_mask)
    scale = spec.weight * matched_scale(init, targets, spec.weights, spec.loss)
    cfg = FitConfig(iterations=spec.iterations, learning_rate=spec.learning_rate,
                    weights=spec.weights, resolution=spec.resolution, seed=spec.seed,
                    data_term=spec.loss, data_scale=scale)
    coarse = fit_coarse(model, scene.rig, scene.gt_maps, scene.landmarks, init, cfg,
                        scan_points=scene.scan.vertices)
    rows = [_row(spec, "coarse", coarse.step, scene, coarse.v_pred)]
    if spec.tto_iters:
        rows += [r for r in tto_sweep(scene, coarse, spec.tto_iters, cfg.replace(variant="tto"),
                                      spec=spec)]
    return rows


def tto_sweep(scene: Scene, coarse, checkpoints=TTO_SWEEP, config: FitConfig | None = None,
              direct: bool = False, spec: TrialSpec | None = None) -> list[dict]:
    """One refinement run, sampled after each iteration count in ``checkpoints``."""
    checkpoints = sorted(set(int(c) for c in checkpoints))
    config = (config or FitConfig(resolution=scene.resolution, variant="tto"))
    config = config.replace(iterations=checkpoints[-1])
    spec = spec or TrialSpec(0, scene.seed)
    stage = "direct" if direct else "tto"
    rows = [_row(spec, stage, 0, scene, coarse.v_pred)]

    def snap(state):
        if state.step in checkpoints:
            rows.append(_row(spec, stage, state.step, scene, state.v_pred))

    run = fit_direct if direct else refine_tto
    run(scene.model, scene.rig, scene.gt_maps, scene.landmarks, scene.eye_mask, coarse, config,
        scan_points=scene.scan.vertices, callback=snap)
    return rows


def _safe_trial(spec: TrialSpec) -> list[dict]:
    try:
        return run_trial(spec)
    except (DenseRegError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("trial %d failed: %s", spec.trial_id, exc)
        return [{"trial_id": spec.trial_id, "seed": spec.seed, "loss": spec.loss,
                 "weight": spec.weight, "stage": "coarse", "iters": 0,
                 "median_p2s": float("nan"), "mean_p2s": float("nan"),
                 "flipped_faces": -1, "status": f"error: {exc}"}]


def run_matrix(specs, workers: int | None = None) -> list[dict]:
    """Run every trial (in parallel when ``workers`` > 1); rows come back ordered by trial id."""
    specs = sorted(specs, key=lambda s: s.trial_id)
    workers = worker_count(1) if workers is None else workers
    if workers <= 1:
        results = [_safe_trial(s) for s in specs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_trial, specs))
    return [row for rows in results for row in rows]


def build_matrix(seeds, losses=("pointmap", "p2s", "chamfer"), weights=(1.0,), **common):
    specs = []
    tid = 0
    for loss in losses:
        for w in weights:
            for seed in seeds:
                specs.append(TrialSpec(tid, int(seed), loss, float(w), **common))
                tid += 1
    return specs


def summarize(rows, stage="coarse") -> dict:
    """Median final p2s and median flipped-face count per (loss, weight) cell."""
    cells: dict = {}
    for r in rows:
        if r["stage"] != stage or r["status"] != "ok":
            continue
        if stage == "coarse" or r["iters"] == max(x["iters"] for x in rows if x["stage"] == stage):
            cells.setdefault((r["loss"], r["weight"]), []).append(r)
    return {k: {"median_p2s": float(np.median([r["median_p2s"] for r in v])),
                "median_flips": float(np.median([r["flipped_faces"] for r in v])),
                "n": len(v)} for k, v in cells.items()}


def spec_dict(spec: TrialSpec) -> dict:
    return asdict(spec)
