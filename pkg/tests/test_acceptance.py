"""End-to-end acceptance checks. Each criterion prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are repeated in the
terminal summary) or directly with ``python3 tests/test_acceptance.py``.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import (bruteforce_p2s, front_camera, render_digest, reprojection_error,  # noqa: E402
                     sphere_radius_error)

from densereg import pliks  # noqa: E402
from densereg.ablation import (TTO_SWEEP, build_matrix, median_p2s, run_matrix, summarize,  # noqa: E402
                               tto_sweep)
from densereg.camera import CameraRig, ring_rig  # noqa: E402
from densereg.losses import LossWeights, geom_loss, gm, point_to_surface_loss  # noqa: E402
from densereg.metrics import flipped_faces, point_to_surface  # noqa: E402
from densereg.model import (Mesh, axis_angle_to_matrix, forward, icosphere, joints,  # noqa: E402
                            load_model, make_toy_model, rest_shape, save_model)
from densereg.optim import (FitConfig, fit_coarse, fit_direct, gradcheck, gradcheck_problem,  # noqa: E402
                            load_checkpoint, refine_tto, save_checkpoint)
from densereg.raster import load_geomaps, render, save_geomaps  # noqa: E402
from densereg.synth import (NoiseSpec, RigSpec, load_scene, make_scene, perturb_init,  # noqa: E402
                            sample_params, save_scene)

RESULTS: list[str] = []

SEEDS = range(20)
SCENE_RIG = RigSpec(n_views=8, resolution=(96, 96))
# loss-stability ablation: the coarse initialisation used for registration, with every data
# term rescaled to the pointmap gradient norm (weight 1)
ABLATION = dict(iterations=300, init_rigid=10.0, init_rms=5.0, weight=1.0)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def _scene(model, seed):
    return make_scene(model, SCENE_RIG, seed=seed)


def _coarse_init(scene, seed):
    return perturb_init(scene.gt_mesh.vertices, 5.0, seed=seed + 10_000, rigid=10.0)


# 1 -------------------------------------------------------------------------------


def test_criterion_1_geman_mcclure():
    t = time.time()
    x = np.linspace(-1e3, 1e3, 20001)
    y = gm(x, 10.0)
    pos = x >= 0
    ok = (gm(10.0, 10.0) == 0.5 and gm(0.0, 10.0) == 0.0 and gm(0.0, 1.0) == 0.0
          and bool(np.all(np.diff(y[pos]) >= 0)) and bool(np.all(np.diff(y[~pos]) <= 0))
          and bool(np.all((y >= 0) & (y < 1))) and bool(np.allclose(y, gm(-x, 10.0), rtol=0, atol=0)))
    report(1, ok and time.time() - t < 1.0,
           f"gm(10,10)={gm(10.0, 10.0)}, gm(0,s)=0, monotone, bounded in [0,1) ({time.time() - t:.2f}s)")


# 2 -------------------------------------------------------------------------------


def test_criterion_2_pliks_exact_recovery():
    t = time.time()
    worst_rel, worst_v = 0.0, 0.0
    for seed in range(50):
        model = make_toy_model(seed, n_v=642)
        A = np.concatenate([model.basis_id, model.basis_exp], axis=2).reshape(-1, model.n_beta + model.n_psi)
        assert np.linalg.matrix_rank(A) == model.n_beta + model.n_psi
        p = sample_params(model, NoiseSpec(), np.random.default_rng(seed))
        pred = forward(model, p).vertices
        r = pliks.run(pred, model, 0.0, 0.0)
        # the solver's translation is the rigid offset x -> R x + t, which folds in the
        # rotation about the root joint
        R = axis_angle_to_matrix(p.theta[model.root])
        J = joints(model, rest_shape(model, p.beta, p.psi))[model.root]
        truth = np.concatenate([p.beta, p.psi, p.trans + J - R @ J])
        est = np.concatenate([r.beta, r.psi, r.trans])
        worst_rel = max(worst_rel, np.linalg.norm(est - truth) / np.linalg.norm(truth))
        worst_v = max(worst_v, np.abs(r.v_fl - pred).max())
    dt = time.time() - t
    report(2, worst_rel < 1e-6 and worst_v < 1e-6 and dt < 30,
           f"50 scenes: max rel err {worst_rel:.2e}, max |v_fl - pred| {worst_v:.2e} mm ({dt:.1f}s)")


# 3 -------------------------------------------------------------------------------


def test_criterion_3_gradient_suite():
    t = time.time()
    problem = gradcheck_problem(0, resolution=(64, 64))
    limits = {"edge": 1e-6, "align": 1e-6, "reg": 1e-6, "landmark": 1e-6, "geom": 1e-3, "refine": 1e-3}
    reps = {k: gradcheck(k, tolerance=v, problem=problem) for k, v in limits.items()}
    dt = time.time() - t
    ok = all(r.passed for r in reps.values()) and dt < 120
    detail = ", ".join(f"{k} {r.max_rel_error:.1e} ({r.checked} coords)" for k, r in reps.items())
    report(3, ok, f"{detail} ({dt:.0f}s)")


# 4 -------------------------------------------------------------------------------


def test_criterion_4_rasterizer_oracle():
    t = time.time()
    sphere_err, n = sphere_radius_error()
    mesh = Mesh(make_toy_model(0).template_vertices, make_toy_model(0).faces)
    reproj = max(reprojection_error(mesh, cam, 96, 96)[0] for cam in ring_rig(8, width=96, height=96))
    (_, d1), (_, d4) = render_digest(1), render_digest(4)
    dt = time.time() - t
    report(4, sphere_err < 0.005 and reproj < 0.5 and d1 == d4 and dt < 60,
           f"sphere radius err {100 * sphere_err:.3f}% over {n} px, reprojection {reproj:.3f} px, "
           f"1 vs 4 threads {'identical' if d1 == d4 else 'DIFFERENT'} ({dt:.0f}s)")


# 5 -------------------------------------------------------------------------------


def test_criterion_5_bvh_matches_bruteforce():
    t = time.time()
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(100):
        n_pts = int(rng.integers(100, 2001))
        if i % 2:
            n_f = int(rng.integers(10, 1001))
            tris = rng.normal(size=(n_f, 3, 3)) * rng.uniform(1, 30) + rng.normal(size=(n_f, 1, 3)) * 50
            mesh = Mesh(tris.reshape(-1, 3), np.arange(3 * n_f).reshape(-1, 3))
        else:
            s = icosphere(int(rng.integers(1, 4)), 60.0)  # up to 1280 faces; keep <= 1000
            faces = s.faces[: min(len(s.faces), 1000)]
            mesh = Mesh(s.vertices + rng.normal(size=s.vertices.shape) * 3, faces)
        pts = rng.normal(size=(n_pts, 3)) * 70
        worst = max(worst, np.abs(point_to_surface(pts, mesh) - bruteforce_p2s(pts, mesh.triangles)).max())
    dt = time.time() - t
    report(5, worst < 1e-9 and dt < 120, f"100 instances, max |bvh - brute force| {worst:.1e} ({dt:.0f}s)")


# 6 -------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_synthetic_registration():
    t = time.time()
    model = make_toy_model(0)
    good, meds, flips = 0, [], []
    for seed in SEEDS:
        s = _scene(model, seed)
        st = fit_coarse(model, s.rig, s.gt_maps, s.landmarks, _coarse_init(s, seed),
                        FitConfig(iterations=500, resolution=s.resolution))
        meds.append(median_p2s(s, st.v_pred))
        flips.append(flipped_faces(Mesh(st.v_pred, model.faces), s.gt_mesh))
        good += meds[-1] < 0.5 and flips[-1] == 0
    dt = time.time() - t
    report(6, good >= 18 and dt < 1200,
           f"{good}/20 seeds with median p2s < 0.5 mm and 0 flips (median of medians "
           f"{np.median(meds):.3f} mm, worst {max(meds):.3f} mm, max flips {max(flips)}) ({dt:.0f}s)")


# 7 -------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_refinement_trend():
    t = time.time()
    model = make_toy_model(0)
    good, starts, ratios = 0, [], []
    for seed in SEEDS:
        s = _scene(model, seed)
        cfg = FitConfig(iterations=500, resolution=s.resolution)
        # early stop once the coarse fit reaches about 1 mm
        coarse = fit_coarse(model, s.rig, s.gt_maps, s.landmarks, _coarse_init(s, seed), cfg,
                            callback=lambda st: median_p2s(s, st.v_pred) <= 1.0)
        p = [r["median_p2s"] for r in tto_sweep(s, coarse, TTO_SWEEP, cfg.replace(variant="tto"))]
        starts.append(p[0])
        ratios.append(p[0] / p[TTO_SWEEP.index(50) + 1])
        halved = p[TTO_SWEEP.index(50) + 1] * 2 <= p[0]
        monotone = all(a >= b for a, b in zip(p[1:], p[2:]))
        good += halved and monotone
    dt = time.time() - t
    report(7, good >= 18 and dt < 900,
           f"{good}/20 seeds with t50 >= 2x below t0 and non-increasing over t={list(TTO_SWEEP)} "
           f"(start median {np.median(starts):.2f} mm, median t0/t50 {np.median(ratios):.1f}x) ({dt:.0f}s)")


# 8 -------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_loss_stability_ablation():
    t = time.time()
    a = dict(ABLATION)
    weight = a.pop("weight")
    rows = run_matrix(build_matrix(SEEDS, ("pointmap", "p2s", "chamfer"), (weight,), **a))
    cells = summarize(rows)
    pm, ps, ch = (cells[(k, weight)] for k in ("pointmap", "p2s", "chamfer"))
    n_ok = min(c["n"] for c in (pm, ps, ch)) >= 20
    lower_err = pm["median_p2s"] < ps["median_p2s"]
    lower_flips = pm["median_flips"] < ps["median_flips"]
    # chamfer between the two, or alongside p2s (no better than pointmap)
    chamfer_trend = ch["median_flips"] >= pm["median_flips"]
    dt = time.time() - t
    report(8, n_ok and lower_err and lower_flips and chamfer_trend and dt < 1800,
           f"weight x{weight:g}, init {a['init_rigid']:g} mm rigid + {a['init_rms']:g} mm RMS: "
           + ", ".join(f"{k} median p2s {c['median_p2s']:.3f} mm / flips {c['median_flips']:g}"
                       for k, c in (("pointmap", pm), ("p2s", ps), ("chamfer", ch)))
           + f" ({dt:.0f}s)")


# 9 -------------------------------------------------------------------------------


def _roof_gradients(s):
    """Vertex gradients of both losses for a query point at x = s over a two-triangle roof."""
    V = np.array([[0.0, -30, 0], [0, 30, 0], [-30, 0, -12], [30, 0, -12]])
    F = np.array([[0, 1, 2], [0, 3, 1]])  # shared edge along x = 0
    cam = front_camera(64)
    q = np.array([s, 0.0, -20.0])
    # geometry target: a large tilted plane through the same query point
    n = np.array([0.3, 0.0, 1.0]) / np.linalg.norm([0.3, 0.0, 1.0])
    u = np.cross(n, [0.0, 1, 0])
    u /= np.linalg.norm(u)
    w = np.cross(n, u)
    P = np.array([q + 500 * (a * u + b * w) for a, b in ((-1, -1), (1, -1), (1, 1), (-1, 1))])
    target = render(Mesh(P, [[0, 1, 2], [0, 2, 3]]), cam, 64, 64)
    g_p2s = point_to_surface_loss(q[None], Mesh(V, F))[1]
    g_geom = geom_loss(V, F, CameraRig([cam], ["c"]), [target], LossWeights(), (64, 64))[1]
    return g_p2s, g_geom


def _max_jump(h, which):
    G = [_roof_gradients(s)[which] for s in np.arange(-0.5, 0.5 + h / 2, h)]
    scale = max(np.abs(g).max() for g in G)
    return max(np.abs(a - b).max() for a, b in zip(G, G[1:])) / scale


def test_criterion_9_non_smoothness():
    t = time.time()
    # a jump that does not shrink with the sampling step is a discontinuity
    p_coarse, p_fine = _max_jump(0.1, 0), _max_jump(0.025, 0)
    g_coarse, g_fine = _max_jump(0.1, 1), _max_jump(0.025, 1)
    p2s_jumps = p_fine > 0.1 and p_fine > 0.5 * p_coarse
    geom_smooth = g_fine < 0.5 * g_coarse and g_fine < 1e-2
    dt = time.time() - t
    report(9, p2s_jumps and geom_smooth and dt < 10,
           f"crossing the closest-triangle boundary: p2s gradient jump {p_coarse:.3f} -> {p_fine:.3f} "
           f"(step 0.1 -> 0.025 mm), geom jump {g_coarse:.1e} -> {g_fine:.1e} ({dt:.1f}s)")


# 10 ------------------------------------------------------------------------------


def _resumed_equal(run, tmp_path, name, total=16, split=7):
    full = run(total, None)
    half = run(split, None)
    save_checkpoint(half, tmp_path / f"{name}.dreg")
    state, _ = load_checkpoint(tmp_path / f"{name}.dreg")
    resumed = run(total, state)
    return (np.array_equal(full.v_pred, resumed.v_pred) and np.array_equal(full.m, resumed.m)
            and np.array_equal(full.v, resumed.v) and full.history == resumed.history)


def _byte_round_trip(tmp_path, name, save, load):
    a, b = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
    save(a)
    save_again = load(a)
    save_again(b)
    return a.read_bytes() == b.read_bytes()


def test_criterion_10_determinism_and_serialization(tmp_path):
    t = time.time()
    model = make_toy_model(0, n_v=162, n_beta=6, n_psi=4, S=3)
    s = make_scene(model, RigSpec(n_views=4, resolution=(48, 48)), seed=1)
    init = perturb_init(s.gt_mesh.vertices, 3.0, seed=2, rigid=5.0)
    args = (model, s.rig, s.gt_maps, s.landmarks)

    def coarse(n, state):
        return fit_coarse(*args, init, FitConfig(iterations=n, resolution=s.resolution), state=state)

    base = coarse(10, None)

    def tto(n, state):
        return refine_tto(*args, s.eye_mask, base, FitConfig(iterations=n, resolution=s.resolution),
                          state=state)

    def direct(n, state):
        return fit_direct(*args, s.eye_mask, base, FitConfig(iterations=n, resolution=s.resolution),
                          state=state)

    resumes = {k: _resumed_equal(f, tmp_path, k) for k, f in
               (("coarse", coarse), ("tto", tto), ("direct", direct))}

    r = pliks.run(base.v_pred, model)
    trips = {
        "model": _byte_round_trip(tmp_path, "model", lambda p: save_model(model, p),
                                  lambda p: (lambda m: lambda q: save_model(m, q))(load_model(p))),
        "geomaps": _byte_round_trip(tmp_path, "maps", lambda p: save_geomaps(s.gt_maps, p),
                                    lambda p: (lambda g: lambda q: save_geomaps(g, q))(load_geomaps(p))),
        "pliks": _byte_round_trip(tmp_path, "pliks", lambda p: pliks.save_result(r, p),
                                  lambda p: (lambda x: lambda q: pliks.save_result(x, q))(pliks.load_result(p))),
        "checkpoint": _byte_round_trip(tmp_path, "ckpt", lambda p: save_checkpoint(base, p),
                                       lambda p: (lambda x: lambda q: save_checkpoint(x[0], q))(load_checkpoint(p))),
    }
    save_scene(s, tmp_path / "scene_a")
    again = load_scene(tmp_path / "scene_a")
    save_scene(again, tmp_path / "scene_b")
    trips["scene"] = all((tmp_path / "scene_a" / f).read_bytes() == (tmp_path / "scene_b" / f).read_bytes()
                         for f in ("manifest.json", "model.dreg", "rig.json", "truth.dreg",
                                   "landmarks.dreg", "masks.json"))
    dt = time.time() - t
    ok = all(resumes.values()) and all(trips.values()) and dt < 300
    report(10, ok, "resume bit-exact: " + ", ".join(f"{k} {'yes' if v else 'NO'}" for k, v in resumes.items())
           + "; byte-identical round trips: " + ", ".join(f"{k} {'yes' if v else 'NO'}" for k, v in trips.items())
           + f" ({dt:.0f}s)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
