import numpy as np
import pytest

from oracles import front_camera, render_digest, reprojection_error, sphere_radius_error

from densereg.camera import ring_rig
from densereg.errors import DimensionError
from densereg.model import Mesh, normals
from densereg.raster import load_geomaps, render, render_backward, save_geomaps


def plane_triangle(z=0.0, s=40.0):
    return Mesh([[-s, -s, z], [s, -s, z], [0, s, z]], [[0, 1, 2]])


def test_screen_parallel_triangle():
    cam = front_camera(64)
    g = render(plane_triangle(z=10.0), cam, 64, 64)
    assert g.mask[32, 32]
    assert np.allclose(g.pointmap[g.mask][:, 2], 10.0)
    V = plane_triangle(z=10.0).vertices
    b = g.bary[32, 32]
    assert np.allclose(b @ V, g.pointmap[32, 32])


def test_nearer_triangle_wins():
    # the camera sits at z = -300 looking along +z
    near = plane_triangle(z=-20.0).vertices
    far = plane_triangle(z=20.0).vertices
    mesh = Mesh(np.vstack([far, near]), [[0, 1, 2], [3, 4, 5]])
    g = render(mesh, front_camera(64), 64, 64)
    assert g.mask.any()
    assert (g.face_id[g.mask] == 1).all()


def test_depth_tie_goes_to_lower_index():
    V = plane_triangle().vertices
    mesh = Mesh(np.vstack([V, V]), [[3, 4, 5], [0, 1, 2]])
    g = render(mesh, front_camera(64), 64, 64)
    assert (g.face_id[g.mask] == 0).all()


def test_empty_render():
    g = render(plane_triangle(z=-400.0), front_camera(64), 64, 64)  # behind the camera
    assert not g.mask.any()
    assert (g.face_id == -1).all()


def test_geomaps_invariants(small_scene):
    for g in small_scene.gt_maps:
        assert (g.face_id[~g.mask] == -1).all()
        b = g.bary[g.mask]
        assert b.min() >= -1e-6
        assert np.abs(b.sum(axis=1) - 1).max() < 1e-5
        assert np.abs(np.linalg.norm(g.normalmap[g.mask], axis=1) - 1).max() < 1e-5


def test_sphere_radius_oracle():
    err, n = sphere_radius_error()
    assert n > 1000
    assert err < 0.005


def test_reprojection_within_half_pixel(toy):
    mesh = Mesh(toy.template_vertices, toy.faces)
    for cam in ring_rig(4, width=96, height=96):
        err, n = reprojection_error(mesh, cam, 96, 96)
        assert n > 0 and err < 0.5


def test_thread_count_determinism():
    (n1, d1), (n4, d4) = render_digest(1), render_digest(4)
    assert (n1, n4) == (1, 4)
    assert d1 == d4


def test_zero_upstream_gives_zero_gradient(toy):
    mesh = Mesh(toy.template_vertices, toy.faces)
    cam = ring_rig(1, width=48, height=48)[0]
    g = render(mesh, cam, 48, 48)
    z = np.zeros((48, 48, 3))
    assert not render_backward(g, z, z, mesh, cam).any()


def test_backward_shape_mismatch(toy):
    mesh = Mesh(toy.template_vertices, toy.faces)
    cam = ring_rig(1, width=48, height=48)[0]
    g = render(mesh, cam, 48, 48)
    with pytest.raises(DimensionError):
        render_backward(g, np.zeros((4, 4, 3)), np.zeros((48, 48, 3)), mesh, cam)


def _masked_loss(V, faces, cam, H, W, keep, up_p, up_n):
    g = render(Mesh(V, faces), cam, H, W)
    return float(np.sum(g.pointmap[keep] * up_p[keep]) + np.sum(g.normalmap[keep] * up_n[keep])), g


def _fd_check(V, faces, cam, H, W, up_p, up_n, vertices, axes, h=1e-3):
    base = render(Mesh(V, faces), cam, H, W)
    grad = render_backward(base, up_p * base.mask[..., None], up_n * base.mask[..., None],
                           Mesh(V, faces), cam)
    for v in vertices:
        for a in axes:
            Vp, Vm = V.copy(), V.copy()
            Vp[v, a] += h
            Vm[v, a] -= h
            gp, gm_ = render(Mesh(Vp, faces), cam, H, W), render(Mesh(Vm, faces), cam, H, W)
            keep = base.mask & (gp.face_id == base.face_id) & (gm_.face_id == base.face_id)
            # analytic gradient restricted to the same stable pixels
            g_keep = render_backward(base, up_p * keep[..., None], up_n * keep[..., None],
                                     Mesh(V, faces), cam)
            lp, _ = _masked_loss(Vp, faces, cam, H, W, keep, up_p, up_n)
            lm, _ = _masked_loss(Vm, faces, cam, H, W, keep, up_p, up_n)
            fd = (lp - lm) / (2 * h)
            assert abs(g_keep[v, a] - fd) <= 1e-4 * max(abs(fd), 1e-8), (v, a, g_keep[v, a], fd)
    return grad


def test_pointmap_gradient_moving_vertex_along_z():
    cam = front_camera(64)
    tri = Mesh([[-30.0, -25, 5], [35, -20, -5], [0, 30, 12]], [[0, 1, 2]])
    up = np.ones((64, 64, 3))
    _fd_check(tri.vertices.copy(), tri.faces, cam, 64, 64, up, np.zeros((64, 64, 3)), [1], [2])


def test_normalmap_gradient_single_triangle(rng):
    cam = front_camera(64)
    tri = Mesh([[-30.0, -25, 5], [35, -20, -5], [0, 30, 12]], [[0, 1, 2]])
    up_n = rng.normal(size=(64, 64, 3))
    _fd_check(tri.vertices.copy(), tri.faces, cam, 64, 64, np.zeros((64, 64, 3)), up_n,
              [0, 1, 2], [0, 1, 2])


def test_random_mesh_gradients(rng, toy):
    cam = ring_rig(1, width=48, height=48)[0]
    V = toy.template_vertices + rng.normal(size=toy.template_vertices.shape)
    up_p, up_n = rng.normal(size=(48, 48, 3)), rng.normal(size=(48, 48, 3))
    base = render(Mesh(V, toy.faces), cam, 48, 48)
    visible = np.unique(toy.faces[base.face_id[base.mask]])
    picks = rng.choice(visible, size=4, replace=False)
    _fd_check(V, toy.faces, cam, 48, 48, up_p, up_n, picks, [0, 1, 2])


def test_geomaps_round_trip(tmp_path, small_scene):
    save_geomaps(small_scene.gt_maps, tmp_path / "g.dreg")
    back = load_geomaps(tmp_path / "g.dreg")
    assert all(a.equals(b) for a, b in zip(small_scene.gt_maps, back))
    save_geomaps(back, tmp_path / "g2.dreg")
    assert (tmp_path / "g.dreg").read_bytes() == (tmp_path / "g2.dreg").read_bytes()


def test_degenerate_faces_skipped():
    V = np.array([[-30.0, -30, 0], [30, -30, 0], [0, 30, 0], [100, 100, 0]])
    mesh = Mesh(V, [[0, 1, 3], [0, 1, 2], [0, 0, 1]])
    g = render(mesh, front_camera(64), 64, 64)
    assert set(np.unique(g.face_id[g.mask])) <= {0, 1}
    assert np.isfinite(normals(mesh).face).all()
