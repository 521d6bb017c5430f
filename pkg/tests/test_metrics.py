import json

import numpy as np
import pytest

from oracles import bruteforce_p2s, front_camera

from densereg import bvh
from densereg.errors import SchemaError
from densereg.metrics import (FULL, RegionMasks, assign_regions, colormap, flipped_faces, heatmap,
                              load_masks, point_to_surface, point_to_surface_bruteforce,
                              region_stats, save_masks, save_png, write_stats)
from densereg.model import Mesh, axis_angle_to_matrix, icosphere
from densereg.synth import perturb_init


def random_soup(rng, n_faces, n_points):
    tris = rng.normal(size=(n_faces, 3, 3)) * 20 + rng.normal(size=(n_faces, 1, 3)) * 60
    mesh = Mesh(tris.reshape(-1, 3), np.arange(3 * n_faces).reshape(-1, 3))
    return mesh, rng.normal(size=(n_points, 3)) * 80


def test_points_on_the_mesh_have_zero_distance(toy):
    mesh = Mesh(toy.template_vertices, toy.faces)
    assert np.abs(point_to_surface(mesh.vertices, mesh)).max() < 1e-9
    centroids = mesh.triangles.mean(axis=1)
    assert np.abs(point_to_surface(centroids, mesh)).max() < 1e-9


def test_height_above_triangle():
    tri = Mesh([[-1.0, -1, 0], [2, -1, 0], [-1, 2, 0]], [[0, 1, 2]])
    assert point_to_surface([[0, 0, 3.5]], tri)[0] == pytest.approx(3.5, abs=1e-12)
    # beyond a vertex: distance to that vertex
    assert point_to_surface([[-2.0, -2, 0]], tri)[0] == pytest.approx(np.sqrt(2), abs=1e-12)


def test_bvh_matches_exhaustive_oracle(rng):
    mesh, pts = random_soup(rng, 500, 1000)
    fast = point_to_surface(pts, mesh)
    assert np.abs(fast - bruteforce_p2s(pts, mesh.triangles)).max() < 1e-9
    assert np.abs(fast - point_to_surface_bruteforce(pts, mesh)).max() < 1e-9


def test_closest_points_lie_on_their_faces(rng):
    mesh, pts = random_soup(rng, 100, 300)
    cp = bvh.closest_points(bvh.build(mesh.triangles), pts)
    assert np.allclose(cp.bary.sum(axis=1), 1) and cp.bary.min() >= -1e-12
    assert np.allclose(np.linalg.norm(cp.point - pts, axis=1), cp.distance)
    assert np.allclose(np.einsum("mk,mkj->mj", cp.bary, mesh.triangles[cp.face]), cp.point)


def test_degenerate_triangles(rng):
    V = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [5, 5, 5]])
    mesh = Mesh(V, [[0, 1, 2], [3, 3, 3]])
    pts = rng.normal(size=(50, 3)) * 4
    assert np.abs(point_to_surface(pts, mesh) - bruteforce_p2s(pts, mesh.triangles)).max() < 1e-9


def test_distances_are_rigid_invariant(rng, toy):
    mesh = Mesh(toy.template_vertices, toy.faces)
    pts = rng.normal(size=(400, 3)) * 90
    R = axis_angle_to_matrix(rng.normal(size=3))
    t = rng.normal(size=3) * 100
    moved = Mesh(mesh.vertices @ R.T + t, mesh.faces)
    d0 = point_to_surface(pts, mesh)
    d1 = point_to_surface(pts @ R.T + t, moved)
    assert np.abs(d0 - d1).max() < 1e-9


def test_empty_mesh_rejected():
    with pytest.raises(ValueError):
        point_to_surface(np.zeros((2, 3)), Mesh(np.zeros((0, 3)), np.zeros((0, 3), int)))


# --- region statistics ---------------------------------------------------------


def test_perfect_fit_gives_zero_stats(small_scene):
    s = small_scene
    stats = region_stats(s.gt_mesh.vertices, s.gt_mesh, s.masks)
    assert set(stats) == set(s.masks.names())
    for st in stats.values():
        if st.count:
            assert st.median < 1e-9 and st.mean < 1e-9


def test_constant_distance_stats():
    sphere = icosphere(3, 50.0)
    pts = sphere.vertices * (52.0 / 50.0)  # exactly 2 mm outside at the vertices
    masks = RegionMasks({"all": np.arange(len(sphere.vertices)), "scalp": []}, ("scalp",))
    st = region_stats(pts, sphere, masks)["all"]
    assert st.median == pytest.approx(2.0, abs=1e-9) and st.mean == pytest.approx(2.0, abs=1e-9)
    assert st.std < 1e-9 and st.count == len(pts)


def test_stats_match_direct_computation(small_scene):
    s = small_scene
    pred = Mesh(perturb_init(s.gt_mesh.vertices, 1.5, seed=1), s.gt_mesh.faces)
    pts = s.scan.vertices
    stats = region_stats(pts, pred, s.masks)
    d = point_to_surface_bruteforce(pts, pred)
    # nearest predicted vertex by exhaustive search
    nearest = np.argmin(((pts[:, None] - pred.vertices[None]) ** 2).sum(-1), axis=1)
    sel = {k: np.isin(nearest, idx) for k, idx in s.masks.regions.items()}
    for name in stats:
        if name != FULL and sel[name].any():
            assert stats[name].median == pytest.approx(np.median(d[sel[name]]), abs=1e-9)
    pooled = np.zeros(len(pts), bool)
    for name in s.masks.regions:
        if name not in s.masks.excluded:
            pooled |= sel[name]
    for name in s.masks.excluded:
        pooled &= ~sel[name]
    assert stats[FULL].count == pooled.sum()
    assert stats[FULL].mean == pytest.approx(d[pooled].mean(), abs=1e-9)
    assert stats[FULL].std == pytest.approx(d[pooled].std(), abs=1e-9)


def test_empty_region_changes_nothing(small_scene):
    s = small_scene
    pred = Mesh(perturb_init(s.gt_mesh.vertices, 1.0, seed=2), s.gt_mesh.faces)
    base = region_stats(s.scan.vertices, pred, s.masks)
    more = RegionMasks({**s.masks.regions, "empty": []}, s.masks.excluded)
    out = region_stats(s.scan.vertices, pred, more)
    assert out["empty"].count == 0
    for k, v in base.items():
        assert out[k] == v


def test_unknown_region_and_bad_masks(tmp_path, small_scene):
    s = small_scene
    with pytest.raises(KeyError, match="nose"):
        region_stats(s.scan.vertices, s.gt_mesh, s.masks, regions=["nose"])
    with pytest.raises(SchemaError):
        RegionMasks({FULL: [0]}, ())
    with pytest.raises(SchemaError):
        RegionMasks({"face": [0]}, ("scalp",))
    with pytest.raises(SchemaError):
        RegionMasks({"face": [10_000], "scalp": []}, ("scalp",)).validate(10)
    save_masks(s.masks, tmp_path / "m.json")
    back = load_masks(tmp_path / "m.json")
    assert back.to_dict() == s.masks.to_dict()
    (tmp_path / "bad.json").write_text(json.dumps([1]))
    with pytest.raises(SchemaError):
        load_masks(tmp_path / "bad.json")


def test_write_stats_columns(tmp_path, small_scene):
    s = small_scene
    stats = region_stats(s.scan.vertices, s.gt_mesh, s.masks)
    write_stats(stats, tmp_path / "s.csv", tmp_path / "s.json")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "region,median,mean,std,count"
    assert len(lines) == len(stats) + 1
    doc = json.loads((tmp_path / "s.json").read_text())
    assert set(doc) == set(stats)


def test_assignment_uses_nearest_vertex():
    mesh = Mesh([[0.0, 0, 0], [10, 0, 0], [0, 10, 0]], [[0, 1, 2]])
    masks = RegionMasks({"a": [0], "b": [1, 2], "scalp": []}, ("scalp",))
    sel = assign_regions([[1.0, 1, 0], [9, 0, 1]], mesh, masks)
    assert list(sel["a"]) == [True, False] and list(sel["b"]) == [False, True]


# --- flipped faces ---------------------------------------------------------------


def test_flipped_faces_examples(toy):
    mesh = Mesh(toy.template_vertices, toy.faces)
    assert flipped_faces(mesh, mesh) == 0
    # pull one vertex through the surface towards the centre: fans around it invert
    V = mesh.vertices.copy()
    V[0] = V[0] * -0.05
    assert flipped_faces(Mesh(V, mesh.faces), mesh) > 0
    one = Mesh([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    down = Mesh([[0.0, 0, 0], [1, 0, 0], [0, -1, 0]], [[0, 1, 2]])
    assert flipped_faces(down, one) == 1
    with pytest.raises(ValueError):
        flipped_faces(one, Mesh(one.vertices, [[0, 2, 1]]))


def test_flipped_faces_loop_oracle(rng, toy):
    ref = Mesh(toy.template_vertices, toy.faces)
    crumpled = Mesh(ref.vertices + rng.normal(size=ref.vertices.shape) * 8, ref.faces)
    count = 0
    for f in ref.faces:
        a, b, c = ref.vertices[f]
        p, q, r = crumpled.vertices[f]
        count += int(np.dot(np.cross(b - a, c - a), np.cross(q - p, r - p)) < 0)
    assert count > 0
    assert flipped_faces(crumpled, ref) == count


# --- heatmaps ----------------------------------------------------------------------


def _splat_points():
    g = np.linspace(-30, 30, 40)
    x, y = np.meshgrid(g, g)
    return np.c_[x.ravel(), y.ravel(), np.zeros(x.size)]


def test_heatmap_colours():
    pts = _splat_points()
    cam = front_camera(32)
    img, occ = heatmap(pts, np.zeros(len(pts)), cam, 32, 32)
    assert occ.any()
    assert np.array_equal(img[occ], np.tile([0.0, 0, 1], (occ.sum(), 1)))
    assert (img[~occ] == 1).all()
    img, occ = heatmap(pts, np.full(len(pts), 3.0), cam, 32, 32)
    assert np.array_equal(img[occ], np.tile([1.0, 0, 0], (occ.sum(), 1)))
    img, occ = heatmap(pts, np.full(len(pts), 1.0), cam, 32, 32, threshold_mm=2.0)
    assert np.allclose(img[occ], [0.5, 0, 0.5])


def test_colormap_is_linear():
    assert np.allclose(colormap([0.5], 1.0), [[0.5, 0, 0.5]])
    assert np.allclose(colormap([0.25, 7], 1.0), [[0.25, 0, 0.75], [1, 0, 0]])


def test_heatmap_front_point_wins():
    cam = front_camera(16)
    pts = np.array([[0.0, 0, 0], [0, 0, -50]])  # second point is closer to the camera
    img, occ = heatmap(pts, np.array([0.0, 5.0]), cam, 16, 16)
    assert occ.sum() == 1
    assert np.array_equal(img[occ][0], [1.0, 0, 0])


def test_save_png(tmp_path):
    from PIL import Image

    img = np.zeros((4, 5, 3))
    img[..., 2] = 1
    save_png(img, tmp_path / "h.png")
    arr = np.asarray(Image.open(tmp_path / "h.png"))
    assert arr.shape == (4, 5, 3) and (arr[..., 2] == 255).all() and (arr[..., 0] == 0).all()
