"""Command-line frontend: ``densereg {synth,fit,tto,eval,ablate,gradcheck}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from densereg import container, metrics, pliks
from densereg.errors import (ContainerError, DenseRegError, OptimizationError, SchemaError,
                             SolverError)
from densereg.losses import DATA_TERMS, LossWeights
from densereg.meshio import load_mesh, save_mesh
from densereg.model import Mesh, load_model, make_toy_model

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("densereg")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _threads() -> None:
    env = os.environ.get("DENSEREG_THREADS")
    if not env:
        return
    import numba

    try:
        n = int(env)
    except ValueError:
        raise UsageError(f"DENSEREG_THREADS must be an integer, got {env!r}")
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


# --- config ----------------------------------------------------------------

FIT_KEYS = {"iterations", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps", "grad_tol", "resolution",
            "seed", "log_every", "data_term", "data_scale"}
PATH_KEYS = {"model", "rig", "scene", "out", "fit"}
WEIGHT_KEYS = {f.name for f in fields(LossWeights)}
INIT_KEYS = {"mode", "rms", "rigid"}


def load_config(path) -> dict:
    """Read a TOML run config; unknown sections or keys are rejected."""
    try:
        doc = tomllib.loads(Path(path).read_text())
    except OSError:
        raise
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}")
    allowed = {"fit": FIT_KEYS, "weights": WEIGHT_KEYS, "paths": PATH_KEYS, "init": INIT_KEYS}
    for section, body in doc.items():
        if section not in allowed:
            raise UsageError(f"{path}: unknown section [{section}]")
        if not isinstance(body, dict):
            raise UsageError(f"{path}: [{section}] must be a table")
        unknown = set(body) - allowed[section]
        if unknown:
            raise UsageError(f"{path}: unknown key(s) in [{section}]: {sorted(unknown)}")
    base = Path(path).resolve().parent
    for k, v in doc.get("paths", {}).items():
        doc["paths"][k] = str((base / v).resolve())
    return doc


def _fit_config(args, doc, variant="coarse", iterations=None):
    from densereg.optim import FitConfig

    fit = dict(doc.get("fit", {}))
    w = LossWeights(**doc.get("weights", {}))
    for key, attr in (("iterations", "iters"), ("learning_rate", "lr"), ("seed", "seed"),
                      ("log_every", "log_every")):
        val = getattr(args, attr, None)
        if val is not None:
            fit[key] = val
    if getattr(args, "loss", None):
        fit["data_term"] = args.loss
    if getattr(args, "resolution", None):
        fit["resolution"] = tuple(args.resolution)
    if iterations is not None and "iterations" not in fit:
        fit["iterations"] = iterations
    try:
        return FitConfig(weights=w, variant=variant, **fit)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def _path(args, doc, name, required=True):
    val = getattr(args, name, None) or doc.get("paths", {}).get(name)
    if val is None and required:
        raise UsageError(f"--{name} is required")
    return None if val is None else Path(val).resolve()


def _existing(path: Path, flag: str) -> Path:
    if not path.exists():
        raise UsageError(f"{flag}: {path} does not exist")
    return path


# --- plots -----------------------------------------------------------------


def _plot_history(history, path, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy([h["total"] for h in history], label="total")
    terms = history[0]["terms"].keys() if history else []
    for k in terms:
        vals = np.array([h["terms"][k] for h in history], dtype=float)
        if np.all(vals > 0):
            ax.semilogy(vals, label=k, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _boxplot(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cells: dict = {}
    for r in rows:
        if r["stage"] == "coarse" and r["status"] == "ok":
            cells.setdefault(f"{r['loss']}\nx{r['weight']:g}", []).append(r)
    if not cells:
        return
    labels = list(cells)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].boxplot([[r["median_p2s"] for r in cells[k]] for k in labels])
    axes[0].set_title("median p2s (mm)")
    axes[1].boxplot([[r["flipped_faces"] for r in cells[k]] for k in labels])
    axes[1].set_title("flipped faces")
    for ax in axes:
        ax.set_xticks(range(1, len(labels) + 1), labels, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# --- commands --------------------------------------------------------------


def cmd_synth(args) -> int:
    from densereg.synth import NoiseSpec, RigSpec, make_scene, save_scene

    doc = load_config(args.config) if args.config else {}
    out = _path(args, doc, "out")
    model_path = _path(args, doc, "model", required=False)
    if model_path is not None:
        model = load_model(_existing(model_path, "--model"))
    else:
        model = make_toy_model(args.model_seed, n_v=args.vertices)
    noise = NoiseSpec(scan_jitter=args.jitter, hole_fraction=args.holes,
                      landmark_px=args.landmark_px)
    rig_path = _path(args, doc, "rig", required=False)
    if rig_path is not None:
        from densereg.camera import load_rig

        rig = load_rig(_existing(rig_path, "--rig"))
    else:
        rig = RigSpec(n_views=args.views, resolution=tuple(args.resolution)).build()
    scene = make_scene(model, rig, seed=args.seed, noise_spec=noise,
                       resolution=tuple(args.resolution))
    manifest = save_scene(scene, out)
    print(manifest)
    return EXIT_OK


def _scene(args, doc, resolution=None):
    from densereg.synth import load_scene

    d = _existing(_path(args, doc, "scene"), "--scene")
    return load_scene(d, resolution)


def _write_fit_outputs(out: Path, state, scene, fmt, name, dump_pliks=False):
    from densereg.optim import write_history

    out.mkdir(parents=True, exist_ok=True)
    mesh = Mesh(state.v_pred, scene.model.faces)
    save_mesh(mesh, out / f"{name}.{fmt}")
    write_history(state, out / "history.jsonl")
    if state.history:
        _plot_history(state.history, out / "convergence.png", name)
    if dump_pliks and state.pliks is not None:
        pliks.save_result(state.pliks, out / "pliks.dreg")
    d = metrics.point_to_surface(scene.scan.vertices, mesh)
    summary = {"steps": state.step, "final_loss": state.history[-1]["total"] if state.history else None,
               "median_p2s": float(np.median(d)), "mean_p2s": float(np.mean(d)),
               "flipped_faces": metrics.flipped_faces(mesh, scene.gt_mesh)}
    return summary


def cmd_fit(args) -> int:
    from densereg.optim import (FitState, fit_coarse, initial_alignment, load_checkpoint,
                                save_checkpoint)
    from densereg.synth import perturb_init

    doc = load_config(args.config) if args.config else {}
    cfg = _fit_config(args, doc, "coarse", iterations=500)
    out = _path(args, doc, "out")
    scene = _scene(args, doc, cfg.resolution)
    state = None
    if args.resume:
        state, _ = load_checkpoint(_existing(Path(args.resume), "--resume"))
        init = state.v_pred
    else:
        init_doc = doc.get("init", {})
        mode = args.init or init_doc.get("mode", "landmarks")
        if mode == "landmarks":
            init = initial_alignment(scene.model, scene.rig, scene.landmarks)
        elif mode == "perturbed":
            rms = args.init_rms if args.init_rms is not None else init_doc.get("rms", 5.0)
            rigid = args.init_rigid if args.init_rigid is not None else init_doc.get("rigid", 10.0)
            init = perturb_init(scene.gt_mesh.vertices, rms, seed=cfg.seed, rigid=rigid)
        elif mode == "truth":
            init = scene.gt_mesh.vertices
        else:
            raise UsageError(f"--init must be landmarks, perturbed or truth, got {mode!r}")
    scale = args.data_scale
    if scale is None and cfg.data_term != "pointmap":
        from densereg.ablation import matched_scale
        from densereg.losses import Targets

        targets = Targets(scene.model, scene.rig, scene.gt_maps, scene.landmarks, cfg.resolution,
                          scan_points=scene.scan.vertices)
        scale = matched_scale(init, targets, cfg.weights, cfg.data_term)
    if scale is not None:
        cfg = cfg.replace(data_scale=scale)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.dreg"
    every = args.checkpoint_every

    def cb(st: FitState):
        if every and st.step % every == 0:
            save_checkpoint(st, ckpt, cfg)

    state = fit_coarse(scene.model, scene.rig, scene.gt_maps, scene.landmarks, init, cfg,
                       scan_points=scene.scan.vertices, state=state, callback=cb)
    save_checkpoint(state, ckpt, cfg)
    summary = _write_fit_outputs(out, state, scene, args.format, "fit", args.dump_pliks)
    summary["data_term"] = cfg.data_term
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"fit: {summary['steps']} steps, median p2s {summary['median_p2s']:.4f} mm, "
          f"flipped faces {summary['flipped_faces']}")
    return EXIT_OK


def cmd_tto(args) -> int:
    from densereg.optim import fit_direct, load_checkpoint, refine_tto, save_checkpoint

    doc = load_config(args.config) if args.config else {}
    cfg = _fit_config(args, doc, "direct" if args.direct else "tto", iterations=50)
    out = _path(args, doc, "out")
    scene = _scene(args, doc, cfg.resolution)
    fit_dir = _existing(_path(args, doc, "fit"), "--fit")
    ckpt = fit_dir / "checkpoint.dreg" if fit_dir.is_dir() else fit_dir
    coarse, _ = load_checkpoint(_existing(ckpt, "--fit"))
    before = float(np.median(metrics.point_to_surface(scene.scan.vertices,
                                                      Mesh(coarse.v_pred, scene.model.faces))))
    run = fit_direct if args.direct else refine_tto
    state = run(scene.model, scene.rig, scene.gt_maps, scene.landmarks, scene.eye_mask, coarse,
                cfg, scan_points=scene.scan.vertices)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out / "checkpoint.dreg", cfg)
    name = "direct" if args.direct else "tto"
    summary = _write_fit_outputs(out, state, scene, args.format, name)
    summary["median_p2s_before"] = before
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{name}: {state.step} steps, median p2s {before:.4f} -> {summary['median_p2s']:.4f} mm")
    return EXIT_OK


def cmd_eval(args) -> int:
    from densereg.camera import load_rig

    doc = load_config(args.config) if args.config else {}
    out = _path(args, doc, "out")
    mesh = load_mesh(_existing(Path(args.mesh), "--mesh"))
    scene_dir = _path(args, doc, "scene", required=False)
    rig = None
    if args.scan:
        scan = load_mesh(_existing(Path(args.scan), "--scan"))
    elif scene_dir is not None:
        t, _ = container.read(_existing(scene_dir, "--scene") / "truth.dreg", kind="scene")
        scan = Mesh(t["scan_vertices"], t["scan_faces"])
    else:
        raise UsageError("--scan or --scene is required")
    if args.masks:
        masks = metrics.load_masks(_existing(Path(args.masks), "--masks"))
    elif scene_dir is not None:
        masks = metrics.load_masks(scene_dir / "masks.json")
    else:
        raise UsageError("--masks or --scene is required")
    if args.rig:
        rig = load_rig(_existing(Path(args.rig), "--rig"))
    elif scene_dir is not None:
        rig = load_rig(scene_dir / "rig.json")
    d = metrics.point_to_surface(scan.vertices, mesh)
    stats = metrics.region_stats(scan.vertices, mesh, masks, distances=d)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_stats(stats, out / "stats.csv", out / "stats.json")
    if rig is not None:
        H, W = args.resolution
        for name, cam in zip(rig.names, rig):
            img, _ = metrics.heatmap(scan.vertices, d, cam, H, W, threshold_mm=args.threshold)
            metrics.save_png(img, out / f"heatmap_{name}.png")
    for name, s in stats.items():
        print(f"{name:16s} median {s.median:.4f} mean {s.mean:.4f} std {s.std:.4f} n={s.count}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from densereg.ablation import build_matrix, run_matrix, summarize, worker_count

    out = Path(args.out).resolve()
    for loss in args.losses:
        if loss not in DATA_TERMS:
            raise UsageError(f"--losses: unknown data term {loss!r}")
    specs = build_matrix(range(args.seed, args.seed + args.seeds), args.losses, args.weights,
                         iterations=args.iters, tto_iters=tuple(args.tto_iters),
                         resolution=tuple(args.resolution))
    rows = run_matrix(specs, workers=worker_count(args.workers))
    out.mkdir(parents=True, exist_ok=True)
    cols = ["trial_id", "seed", "loss", "weight", "stage", "iters", "median_p2s", "mean_p2s",
            "flipped_faces", "status"]
    with open(out / "trials.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    _boxplot(rows, out / "boxplot.png")
    for (loss, weight), s in summarize(rows).items():
        print(f"{loss:9s} x{weight:<6g} median p2s {s['median_p2s']:.4f} mm, "
              f"median flips {s['median_flips']:g} (n={s['n']})")
    failed = sum(r["status"] != "ok" for r in rows)
    if failed:
        print(f"{failed} trial(s) failed; see trials.csv")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from densereg.optim import OBJECTIVES, gradcheck, gradcheck_problem

    if args.all:
        names = list(OBJECTIVES)
    elif args.objective:
        names = [args.objective]
    else:
        raise UsageError("give an objective or --all")
    problem = gradcheck_problem(args.seed)
    ok = True
    for name in names:
        rep = gradcheck(name, args.seed, args.tolerance, problem=problem)
        print(rep.line())
        ok &= rep.passed
    return EXIT_OK if ok else 1


# --- parser ----------------------------------------------------------------


def _resolution(p, default):
    p.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"), default=default,
                   help="render resolution in pixels")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="densereg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene directory")
    s.add_argument("--out", help="scene directory to write")
    s.add_argument("--config", help="TOML run config")
    s.add_argument("--model", help="model container; default: generated toy model")
    s.add_argument("--rig", help="rig JSON; default: ring rig")
    s.add_argument("--model-seed", type=int, default=0, help="toy model seed")
    s.add_argument("--vertices", type=int, default=642, help="toy model vertex count")
    s.add_argument("--seed", type=int, default=0, help="scene seed")
    s.add_argument("--views", type=int, default=8, help="cameras in the ring rig")
    _resolution(s, [96, 96])
    s.add_argument("--jitter", type=float, default=0.0, help="scan vertex noise (mm)")
    s.add_argument("--holes", type=float, default=0.0, help="fraction of scan faces removed")
    s.add_argument("--landmark-px", type=float, default=0.0, help="landmark pixel noise")
    s.set_defaults(func=cmd_synth)

    def fit_common(q, iters_default):
        q.add_argument("--scene", help="scene directory")
        q.add_argument("--out", help="output directory")
        q.add_argument("--config", help="TOML run config")
        q.add_argument("--iters", type=int, default=None,
                       help=f"iterations (default {iters_default})")
        q.add_argument("--lr", type=float, default=None, help="Adam learning rate (mm/step)")
        q.add_argument("--seed", type=int, default=None, help="seed")
        q.add_argument("--log-every", type=int, default=None, help="log every N steps")
        q.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"), default=None,
                       help="render resolution (default: the scene's)")
        q.add_argument("--format", choices=["obj", "ply"], default="obj", help="mesh format")

    f = sub.add_parser("fit", help="coarse registration-free fit")
    fit_common(f, 500)
    f.add_argument("--loss", choices=DATA_TERMS, default=None, help="data term")
    f.add_argument("--data-scale", type=float, default=None,
                   help="data term multiplier (default: matched to the pointmap gradient)")
    f.add_argument("--init", choices=["landmarks", "perturbed", "truth"], default=None,
                   help="initialisation (default: landmarks)")
    f.add_argument("--init-rms", type=float, default=None, help="perturbed init field RMS (mm)")
    f.add_argument("--init-rigid", type=float, default=None, help="perturbed init shift (mm)")
    f.add_argument("--resume", help="checkpoint to continue from")
    f.add_argument("--checkpoint-every", type=int, default=0, help="checkpoint period (steps)")
    f.add_argument("--dump-pliks", action="store_true", help="write the final PLIKS result")
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("tto", help="refine a coarse fit")
    fit_common(t, 50)
    t.add_argument("--fit", help="coarse fit directory or checkpoint")
    t.add_argument("--direct", action="store_true", help="unregularised direct baseline")
    t.add_argument("--loss", choices=DATA_TERMS, default=None, help="data term")
    t.set_defaults(func=cmd_tto)

    e = sub.add_parser("eval", help="regional scan-to-mesh statistics and heatmaps")
    e.add_argument("--mesh", required=True, help="mesh to evaluate (.obj/.ply)")
    e.add_argument("--scene", help="scene directory (scan, masks, rig)")
    e.add_argument("--scan", help="scan mesh (.obj/.ply)")
    e.add_argument("--masks", help="region masks JSON")
    e.add_argument("--rig", help="rig JSON for heatmaps")
    e.add_argument("--out", help="output directory")
    e.add_argument("--config", help="TOML run config")
    e.add_argument("--threshold", type=float, default=metrics.DEFAULT_THRESHOLD_MM,
                   help="heatmap clamp (mm)")
    _resolution(e, [256, 256])
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="seeded data-term ablation")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--seeds", type=int, default=20, help="trials per cell")
    a.add_argument("--seed", type=int, default=0, help="first seed")
    a.add_argument("--losses", nargs="+", default=list(DATA_TERMS), help="data terms")
    a.add_argument("--weights", type=float, nargs="+", default=[1.0],
                   help="data weight multipliers")
    a.add_argument("--iters", type=int, default=500, help="coarse iterations")
    a.add_argument("--tto-iters", type=int, nargs="*", default=[],
                   help="refinement checkpoints, e.g. 5 10 20 50 100")
    a.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: DENSEREG_THREADS or CPU count)")
    _resolution(a, [96, 96])
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("objective", nargs="?", help="objective to check")
    g.add_argument("--all", action="store_true", help="check every objective")
    g.add_argument("--seed", type=int, default=0, help="seed of the random configuration")
    g.add_argument("--tolerance", type=float, default=None, help="override the tolerance")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads()
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"densereg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OptimizationError as exc:
        print(f"densereg: optimization failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SolverError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"densereg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ContainerError, SchemaError) as exc:
        print(f"densereg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DenseRegError as exc:
        print(f"densereg: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
