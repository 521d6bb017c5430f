import csv
import json

import numpy as np
import pytest
from PIL import Image

from densereg.cli import build_parser, main
from densereg.meshio import load_mesh, save_mesh
from densereg.model import Mesh, make_toy_model, save_model
from densereg.synth import audit_scene, load_scene

SMALL = ["--vertices", "162", "--views", "4", "--resolution", "48", "48"]


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["synth", "--out", str(d), "--seed", "3", *SMALL]) == 0
    return d


@pytest.fixture(scope="module")
def fit_dir(scene_dir):
    out = scene_dir.parent / "fit"
    assert main(["fit", "--scene", str(scene_dir), "--out", str(out), "--iters", "500",
                 "--dump-pliks"]) == 0
    return out


def test_synth_defaults_pass_audit(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "s"), "--vertices", "42", "--views", "2",
                 "--resolution", "32", "32"]) == 0
    assert capsys.readouterr().out.strip().endswith("manifest.json")
    assert audit_scene(tmp_path / "s") == []


def test_synth_same_seed_same_manifest(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--seed", "7", *SMALL]) == 0
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_synth_missing_model_is_a_usage_error(tmp_path, capsys):
    code = main(["synth", "--out", str(tmp_path / "s"), "--model", str(tmp_path / "nope.dreg")])
    assert code == 2
    assert "--model" in capsys.readouterr().err


def test_synth_with_model_file(tmp_path):
    save_model(make_toy_model(1, n_v=42), tmp_path / "m.dreg")
    assert main(["synth", "--out", str(tmp_path / "s"), "--model", str(tmp_path / "m.dreg"),
                 "--views", "2", "--resolution", "32", "32"]) == 0
    assert load_scene(tmp_path / "s").model.n_vertices == 42


def test_corrupt_model_is_an_io_error(tmp_path):
    (tmp_path / "m.dreg").write_bytes(b"garbage")
    assert main(["synth", "--out", str(tmp_path / "s"), "--model", str(tmp_path / "m.dreg")]) == 3


def test_fit_outputs_and_accuracy(fit_dir, capsys):
    for name in ("fit.obj", "history.jsonl", "convergence.png", "pliks.dreg", "checkpoint.dreg",
                 "summary.json"):
        assert (fit_dir / name).exists(), name
    summary = json.loads((fit_dir / "summary.json").read_text())
    assert summary["steps"] == 500
    assert summary["median_p2s"] < 0.5
    lines = (fit_dir / "history.jsonl").read_text().splitlines()
    assert len(lines) == 500 and "total" in json.loads(lines[0])


def test_fit_is_idempotent(scene_dir, tmp_path):
    for name in ("a", "b"):
        assert main(["fit", "--scene", str(scene_dir), "--out", str(tmp_path / name),
                     "--iters", "5", "--format", "ply"]) == 0
    for f in ("fit.ply", "history.jsonl", "checkpoint.dreg", "summary.json", "convergence.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_fit_p2s_loss_switch(scene_dir, tmp_path):
    assert main(["fit", "--scene", str(scene_dir), "--out", str(tmp_path / "p"), "--iters", "3",
                 "--loss", "p2s"]) == 0
    assert json.loads((tmp_path / "p/summary.json").read_text())["data_term"] == "p2s"
    rec = json.loads((tmp_path / "p/history.jsonl").read_text().splitlines()[0])
    assert rec["data_term"] == "p2s"


def test_fit_resume_is_bit_exact(scene_dir, tmp_path):
    args = ["fit", "--scene", str(scene_dir), "--init", "perturbed"]
    assert main([*args, "--out", str(tmp_path / "full"), "--iters", "12"]) == 0
    assert main([*args, "--out", str(tmp_path / "half"), "--iters", "6"]) == 0
    assert main([*args, "--out", str(tmp_path / "rest"), "--iters", "12",
                 "--resume", str(tmp_path / "half/checkpoint.dreg")]) == 0
    a = load_mesh(tmp_path / "full/fit.obj").vertices
    b = load_mesh(tmp_path / "rest/fit.obj").vertices
    assert np.array_equal(a, b)
    assert (tmp_path / "full/history.jsonl").read_bytes() == (tmp_path / "rest/history.jsonl").read_bytes()


def test_tto_default_iterations_and_summary(scene_dir, fit_dir, tmp_path, capsys):
    assert main(["tto", "--scene", str(scene_dir), "--fit", str(fit_dir),
                 "--out", str(tmp_path / "t")]) == 0
    summary = json.loads((tmp_path / "t/summary.json").read_text())
    assert summary["steps"] == 50
    assert "median_p2s_before" in summary
    assert "->" in capsys.readouterr().out
    assert (tmp_path / "t/tto.obj").exists()


def test_tto_direct(scene_dir, fit_dir, tmp_path):
    assert main(["tto", "--scene", str(scene_dir), "--fit", str(fit_dir / "checkpoint.dreg"),
                 "--out", str(tmp_path / "d"), "--direct", "--iters", "5"]) == 0
    assert (tmp_path / "d/direct.obj").exists()


def test_eval_ground_truth_gives_zero_stats(tmp_path, scene_dir):
    scene = load_scene(scene_dir)
    save_mesh(scene.gt_mesh, tmp_path / "gt.obj")
    assert main(["eval", "--mesh", str(tmp_path / "gt.obj"), "--scene", str(scene_dir),
                 "--out", str(tmp_path / "e"), "--resolution", "32", "32"]) == 0
    with open(tmp_path / "e/stats.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["region", "median", "mean", "std", "count"]
    for r in rows[1:]:
        if int(r[4]):
            assert float(r[1]) < 1e-9 and float(r[2]) < 1e-9
    assert len(list((tmp_path / "e").glob("heatmap_*.png"))) == len(scene.rig)


def test_eval_threshold_rescales_colours(tmp_path, scene_dir):
    scene = load_scene(scene_dir)
    # a uniformly inflated mesh: every scan point is about 1 mm away
    c = scene.gt_mesh.vertices.mean(axis=0)
    V = c + (scene.gt_mesh.vertices - c) * 1.012
    save_mesh(Mesh(V, scene.gt_mesh.faces), tmp_path / "m.obj")
    reds = {}
    for thr in ("1.0", "2.0"):
        out = tmp_path / thr
        assert main(["eval", "--mesh", str(tmp_path / "m.obj"), "--scene", str(scene_dir),
                     "--out", str(out), "--threshold", thr, "--resolution", "32", "32"]) == 0
        img = np.asarray(Image.open(next(out.glob("heatmap_*.png")))).astype(float)
        occ = ~(img == 255).all(axis=2)
        reds[thr] = img[occ][:, 0].mean()
    assert reds["2.0"] < reds["1.0"]


def test_eval_requires_scan(tmp_path, fit_dir):
    assert main(["eval", "--mesh", str(fit_dir / "fit.obj"), "--out", str(tmp_path)]) == 2


def test_ablate_smoke(tmp_path, capsys):
    assert main(["ablate", "--out", str(tmp_path / "a"), "--seeds", "1", "--losses", "pointmap",
                 "--iters", "2", "--resolution", "32", "32", "--workers", "1"]) == 0
    with open(tmp_path / "a/trials.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    assert float(rows[0]["median_p2s"]) >= 0
    assert (tmp_path / "a/boxplot.png").exists()
    assert "pointmap" in capsys.readouterr().out


def test_ablate_rejects_unknown_loss(tmp_path):
    assert main(["ablate", "--out", str(tmp_path), "--losses", "huber"]) == 2


def test_gradcheck_commands(capsys):
    assert main(["gradcheck", "edge"]) == 0
    assert capsys.readouterr().out.startswith("PASS edge")
    assert main(["gradcheck", "edge", "--tolerance", "1e-30"]) == 1
    assert main(["gradcheck"]) == 2


@pytest.mark.slow
def test_gradcheck_all(capsys):
    code = main(["gradcheck", "--all"])
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 7
    assert code == (0 if all(l.startswith("PASS") for l in out) else 1)


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--no-such-flag"])
    assert exc.value.code == 2


def test_help_documents_every_flag(capsys):
    for cmd in ("synth", "fit", "tto", "eval", "ablate", "gradcheck"):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
    for action in build_parser()._actions:
        for sub in getattr(action, "choices", None) or {}:
            sp = action.choices[sub]
            for a in sp._actions:
                assert a.help, (sub, a.option_strings)


def test_toml_config(tmp_path, scene_dir):
    cfg = tmp_path / "run.toml"
    cfg.write_text(f'[paths]\nscene = "{scene_dir}"\nout = "{tmp_path / "o"}"\n'
                   '[fit]\niterations = 3\nresolution = [48, 48]\n[weights]\nw_lm = 0.2\n')
    assert main(["fit", "--config", str(cfg)]) == 0
    assert json.loads((tmp_path / "o/summary.json").read_text())["steps"] == 3
    cfg.write_text('[fit]\niterations = 3\ncolour = "red"\n')
    assert main(["fit", "--config", str(cfg)]) == 2
    cfg.write_text('[extras]\nx = 1\n')
    assert main(["fit", "--config", str(cfg)]) == 2


def test_threads_env(monkeypatch, tmp_path):
    monkeypatch.setenv("DENSEREG_THREADS", "many")
    assert main(["gradcheck", "edge"]) == 2
