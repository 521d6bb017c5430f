"""Parametric linear-blend-skinned head model.

All lengths are millimetres. A model carries a template mesh, identity and
expression blendshapes, pose-corrective blendshapes driven by
``vec(R_s - I)`` of the non-root segments, a joint regressor and skinning
weights over a tree of segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from densereg import container
from densereg.errors import DimensionError, InvariantError

MODEL_KIND = "model"


@dataclass(frozen=True, eq=False)
class ParametricModel:
    template_vertices: np.ndarray  # (n_v, 3)
    faces: np.ndarray  # (n_f, 3) int
    basis_id: np.ndarray  # (n_v, 3, n_beta)
    basis_exp: np.ndarray  # (n_v, 3, n_psi)
    basis_pose: np.ndarray  # (n_v, 3, 9 * (S - 1))
    joint_regressor: np.ndarray  # (S, n_v)
    skin_weights: np.ndarray  # (n_v, S)
    segment_parents: np.ndarray  # (S,), -1 marks the root
    eye_mask: np.ndarray | None = None  # (n_v,) bool, optional

    def __post_init__(self):
        for name in ("template_vertices", "basis_id", "basis_exp", "basis_pose",
                     "joint_regressor", "skin_weights"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("faces", "segment_parents"):
            arr = np.array(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.eye_mask is not None:
            mask = np.array(self.eye_mask, dtype=bool)
            mask.setflags(write=False)
            object.__setattr__(self, "eye_mask", mask)
        validate_model(self)

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_beta(self) -> int:
        return self.basis_id.shape[2]

    @property
    def n_psi(self) -> int:
        return self.basis_exp.shape[2]

    @property
    def n_segments(self) -> int:
        return self.skin_weights.shape[1]

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.segment_parents < 0)[0])

    def segment_order(self) -> list[int]:
        """Segments ordered so that every parent precedes its children."""
        return _topological_order(self.segment_parents)


@dataclass(frozen=True)
class Params:
    beta: np.ndarray
    psi: np.ndarray
    theta: np.ndarray  # (S, 3) axis-angle per segment
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "psi", np.asarray(self.psi, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=np.float64).reshape(3))

    @classmethod
    def zeros(cls, model: ParametricModel) -> "Params":
        return cls(np.zeros(model.n_beta), np.zeros(model.n_psi),
                   np.zeros((model.n_segments, 3)), np.zeros(3))


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise DimensionError(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise DimensionError(f"faces must be (m, 3), got {f.shape}")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]


def _topological_order(parents: np.ndarray) -> list[int]:
    parents = np.asarray(parents)
    roots = np.flatnonzero(parents < 0)
    if len(roots) != 1:
        raise InvariantError(f"segment tree must have exactly one root, found {len(roots)}")
    children: dict[int, list[int]] = {}
    for s, p in enumerate(parents):
        if p >= 0:
            if p >= len(parents):
                raise InvariantError(f"segment {s} has invalid parent {p}")
            children.setdefault(int(p), []).append(s)
    order = []
    stack = [int(roots[0])]
    while stack:
        s = stack.pop()
        order.append(s)
        stack.extend(reversed(children.get(s, [])))
    if len(order) != len(parents):
        raise InvariantError("segment tree contains a cycle or disconnected segment")
    return order


def validate_model(model: ParametricModel) -> None:
    n_v = model.template_vertices.shape[0]
    if model.template_vertices.shape != (n_v, 3):
        raise InvariantError(f"template_vertices must be (n_v, 3), got {model.template_vertices.shape}")
    for name in ("basis_id", "basis_exp", "basis_pose"):
        b = getattr(model, name)
        if b.ndim != 3 or b.shape[:2] != (n_v, 3):
            raise InvariantError(f"{name} must be (n_v={n_v}, 3, k), got {b.shape}")
    w = model.skin_weights
    if w.ndim != 2 or w.shape[0] != n_v:
        raise InvariantError(f"skin_weights must be (n_v={n_v}, S), got {w.shape}")
    S = w.shape[1]
    if (w < 0).any():
        row = int(np.argwhere(w < 0)[0, 0])
        raise InvariantError(f"skin weight row {row} has a negative entry")
    bad = np.flatnonzero(np.abs(w.sum(axis=1) - 1.0) > 1e-6)
    if len(bad):
        raise InvariantError(
            f"skin weight row {int(bad[0])} sums to {w[bad[0]].sum():.9g}, expected 1"
        )
    if model.joint_regressor.shape != (S, n_v):
        raise InvariantError(f"joint_regressor must be (S={S}, n_v={n_v}), got {model.joint_regressor.shape}")
    if model.segment_parents.shape != (S,):
        raise InvariantError(f"segment_parents must have length S={S}")
    _topological_order(model.segment_parents)
    if model.basis_pose.shape[2] not in (0, 9 * (S - 1)):
        raise InvariantError(
            f"basis_pose must have 9*(S-1)={9 * (S - 1)} columns, got {model.basis_pose.shape[2]}"
        )
    f = model.faces
    if f.ndim != 2 or f.shape[1] != 3:
        raise InvariantError(f"faces must be (n_f, 3), got {f.shape}")
    if f.size and (f.min() < 0 or f.max() >= n_v):
        raise InvariantError("faces reference vertex indices out of range")
    if f.size:
        e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        if counts.max() > 2:
            raise InvariantError("an edge is shared by more than two faces")
    if model.eye_mask is not None and model.eye_mask.shape != (n_v,):
        raise InvariantError("eye_mask must have one entry per vertex")
    for name in ("template_vertices", "basis_id", "basis_exp", "basis_pose",
                 "joint_regressor", "skin_weights"):
        if not np.isfinite(getattr(model, name)).all():
            raise InvariantError(f"{name} contains non-finite values")


# --- rotations -------------------------------------------------------------


def axis_angle_to_matrix(aa) -> np.ndarray:
    """Rodrigues' formula for one axis-angle vector or a stack of them."""
    aa = np.asarray(aa, dtype=np.float64)
    single = aa.ndim == 1
    aa = aa.reshape(-1, 3)
    angle = np.linalg.norm(aa, axis=1)
    out = np.tile(np.eye(3), (len(aa), 1, 1))
    nz = angle > 1e-12
    if nz.any():
        k = aa[nz] / angle[nz, None]
        K = np.zeros((len(k), 3, 3))
        K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
        K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
        K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
        s = np.sin(angle[nz])[:, None, None]
        c = np.cos(angle[nz])[:, None, None]
        out[nz] = np.eye(3) + s * K + (1 - c) * (K @ K)
    return out[0] if single else out


def matrix_to_axis_angle(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    angle = np.arccos(cos)
    if angle < 1e-12:
        return np.zeros(3)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - angle < 1e-6:
        # near pi the antisymmetric part vanishes; use the symmetric part
        axis = np.sqrt(np.maximum((np.diag(R) + 1) / 2, 0))
        i = int(np.argmax(axis))
        col = (R[:, i] + np.eye(3)[i]) / 2
        axis = col / np.linalg.norm(col)
        return axis * angle
    return w / (2 * np.sin(angle)) * angle


# --- evaluation ------------------------------------------------------------


def rest_shape(model: ParametricModel, beta, psi) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    psi = np.asarray(psi, dtype=np.float64).reshape(-1)
    if beta.shape[0] != model.n_beta:
        raise DimensionError(f"basis_id expects {model.n_beta} coefficients, got {beta.shape[0]}")
    if psi.shape[0] != model.n_psi:
        raise DimensionError(f"basis_exp expects {model.n_psi} coefficients, got {psi.shape[0]}")
    return model.template_vertices + model.basis_id @ beta + model.basis_exp @ psi


def pose_feature(model: ParametricModel, rotations: np.ndarray) -> np.ndarray:
    """``vec(R_s - I)`` concatenated over non-root segments in index order."""
    root = model.root
    parts = [(rotations[s] - np.eye(3)).ravel() for s in range(model.n_segments) if s != root]
    return np.concatenate(parts) if parts else np.zeros(0)


def joints(model: ParametricModel, rest: np.ndarray) -> np.ndarray:
    # rows renormalised so joints move exactly with rigid motions of the rest shape
    reg = model.joint_regressor
    return (reg / reg.sum(axis=1, keepdims=True)) @ rest


def segment_transforms(model: ParametricModel, rotations: np.ndarray, J: np.ndarray):
    """World rotation and translation of every segment's skinning transform.

    Returns ``(Rw, tw)`` such that a rest-pose point ``x`` moves to
    ``Rw[s] @ x + tw[s]`` under segment ``s``.
    """
    S = model.n_segments
    Gr = np.zeros((S, 3, 3))
    Gt = np.zeros((S, 3))
    parents = model.segment_parents
    for s in model.segment_order():
        p = parents[s]
        if p < 0:
            Gr[s] = rotations[s]
            Gt[s] = J[s]
        else:
            Gr[s] = Gr[p] @ rotations[s]
            Gt[s] = Gr[p] @ (J[s] - J[p]) + Gt[p]
    tw = Gt - np.einsum("sij,sj->si", Gr, J)
    return Gr, tw


def forward(model: ParametricModel, params: Params) -> Mesh:
    theta = params.theta
    if theta.shape != (model.n_segments, 3):
        raise DimensionError(f"theta must be ({model.n_segments}, 3), got {theta.shape}")
    if not np.isfinite(theta).all():
        raise ValueError("theta contains non-finite values")
    if not (np.isfinite(params.beta).all() and np.isfinite(params.psi).all()
            and np.isfinite(params.trans).all()):
        raise ValueError("params contain non-finite values")
    shaped = rest_shape(model, params.beta, params.psi)
    J = joints(model, shaped)
    rotations = axis_angle_to_matrix(theta).reshape(-1, 3, 3)
    posed_rest = shaped
    if model.basis_pose.shape[2]:
        posed_rest = shaped + model.basis_pose @ pose_feature(model, rotations)
    Rw, tw = segment_transforms(model, rotations, J)
    # blend per-segment affine maps by skinning weight
    W = model.skin_weights
    # exact affine blending even when stored weights carry float32 rounding
    W = W / W.sum(axis=1, keepdims=True)
    Rb = np.einsum("vs,sij->vij", W, Rw)
    tb = W @ tw
    verts = np.einsum("vij,vj->vi", Rb, posed_rest) + tb + params.trans
    return Mesh(verts, model.faces)


# --- topology --------------------------------------------------------------


def edges(faces_or_model) -> np.ndarray:
    faces = faces_or_model.faces if hasattr(faces_or_model, "faces") else faces_or_model
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class Normals:
    face: np.ndarray  # (n_f, 3) unit, zero for degenerate faces
    vertex: np.ndarray  # (n_v, 3) unit where defined, zero elsewhere
    degenerate: np.ndarray  # indices of faces with area below 1e-12 mm^2


def face_cross(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])


def normals(mesh: Mesh) -> Normals:
    cross = face_cross(mesh.vertices, mesh.faces)
    length = np.linalg.norm(cross, axis=1)
    degenerate = np.flatnonzero(0.5 * length < 1e-12)
    fn = np.zeros_like(cross)
    ok = 0.5 * length >= 1e-12
    fn[ok] = cross[ok] / length[ok, None]
    vn = np.zeros_like(mesh.vertices)
    contrib = np.where(ok[:, None], cross, 0.0)
    for k in range(3):
        np.add.at(vn, mesh.faces[:, k], contrib)
    vlen = np.linalg.norm(vn, axis=1)
    has = vlen > 0
    vn[has] /= vlen[has, None]
    return Normals(fn, vn, degenerate)


# --- container I/O ---------------------------------------------------------

_F32 = ("template_vertices", "basis_id", "basis_exp", "basis_pose",
        "joint_regressor", "skin_weights")


def model_arrays(model: ParametricModel) -> dict[str, np.ndarray]:
    arrays = {name: getattr(model, name) for name in _F32}
    arrays["faces"] = model.faces
    arrays["segment_parents"] = model.segment_parents
    if model.eye_mask is not None:
        arrays["eye_mask"] = model.eye_mask
    return arrays


def save_model(model: ParametricModel, path) -> None:
    dtypes = {name: "<f4" for name in _F32}
    dtypes.update(faces="<i4", segment_parents="<i4", eye_mask="|b1")
    meta = {
        "n_vertices": model.n_vertices,
        "n_faces": int(model.faces.shape[0]),
        "n_beta": model.n_beta,
        "n_psi": model.n_psi,
        "n_segments": model.n_segments,
    }
    container.write(path, model_arrays(model), MODEL_KIND, meta=meta, dtypes=dtypes)


def load_model(path) -> ParametricModel:
    arrays, _ = container.read(Path(path), kind=MODEL_KIND)
    return ParametricModel(
        template_vertices=arrays["template_vertices"],
        faces=arrays["faces"],
        basis_id=arrays["basis_id"],
        basis_exp=arrays["basis_exp"],
        basis_pose=arrays["basis_pose"],
        joint_regressor=arrays["joint_regressor"],
        skin_weights=arrays["skin_weights"],
        segment_parents=arrays["segment_parents"],
        eye_mask=arrays.get("eye_mask"),
    )


# --- toy model -------------------------------------------------------------


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> Mesh:
    t = (1.0 + 5 ** 0.5) / 2
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return Mesh(np.array(v) * radius, np.array(faces, dtype=np.int64))


def icosphere_level(n_v: int) -> int:
    """Smallest subdivision level whose icosphere has at least ``n_v`` vertices."""
    if n_v < 12:
        raise ValueError("toy models need n_v >= 12")
    level = 0
    while 10 * 4 ** level + 2 < n_v:
        level += 1
    return level


HEAD_RADII = np.array([75.0, 100.0, 90.0])  # x (ear to ear), y (up), z (towards the face)


def _head_template(level: int) -> Mesh:
    sphere = icosphere(level)
    d = sphere.vertices
    v = d * HEAD_RADII
    # nose and chin bumps on the +z face
    nose = np.exp(-np.sum((d - np.array([0.0, 0.05, 1.0])) ** 2, axis=1) / (2 * 0.12 ** 2))
    chin = np.exp(-np.sum((d - np.array([0.0, -0.55, 0.83])) ** 2, axis=1) / (2 * 0.2 ** 2))
    v = v + d * (14.0 * nose + 6.0 * chin)[:, None]
    return Mesh(v, sphere.faces)


def _smooth_fields(rng, points, n_fields, n_centers=5, width=70.0):
    """Random low-frequency vector fields sampled at ``points`` -> (n_v, 3, n_fields)."""
    out = np.zeros((len(points), 3, n_fields))
    lo, hi = points.min(axis=0), points.max(axis=0)
    for k in range(n_fields):
        centers = rng.uniform(lo, hi, size=(n_centers, 3))
        amps = rng.normal(size=(n_centers, 3))
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
        out[:, :, k] = np.exp(-d2 / (2 * width ** 2)) @ amps
    return out


def _remove_segment_rotation(fields, template, assignment, blend, S):
    """Add a smooth rotational field so each segment's displacement is rotation-free.

    After correction ``X_s^T D_s`` is symmetric for every segment ``s``, where
    ``X_s`` are the centred template points dominated by ``s``. Procrustes
    between the template and any linear combination of the fields therefore
    returns the identity, which keeps parameter recovery exact.
    """
    out = fields.copy()
    centroids = np.array([template[assignment == s].mean(axis=0) for s in range(S)])

    def skew_residual(D):
        r = np.zeros(3 * S)
        for s in range(S):
            sel = assignment == s
            X = template[sel] - centroids[s]
            M = X.T @ D[sel]
            r[3 * s:3 * s + 3] = (M[1, 2] - M[2, 1], M[2, 0] - M[0, 2], M[0, 1] - M[1, 0])
        return r

    # response of the residual to a unit rotation rate of each segment's field
    A = np.zeros((3 * S, 3 * S))
    for s in range(S):
        for a in range(3):
            w = np.zeros(3)
            w[a] = 1.0
            E = blend[:, s, None] * np.cross(w, template - centroids[s])
            A[:, 3 * s + a] = skew_residual(E)
    for k in range(fields.shape[2]):
        omega = np.linalg.solve(A, -skew_residual(fields[:, :, k]))
        for s in range(S):
            out[:, :, k] += blend[:, s, None] * np.cross(omega[3 * s:3 * s + 3], template - centroids[s])
    return out


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def make_toy_model(seed: int = 0, n_v: int = 642, n_beta: int = 10, n_psi: int = 10,
                   S: int = 4, basis_scale: float = 5.0, eye_radius: float = 0.2) -> ParametricModel:
    """Build a deterministic head-like toy model on an icosphere.

    ``n_v`` is rounded up to the next icosphere vertex count (12, 42, 162, 642,
    2562, ...). Segments are horizontal bands stacked along +y and chained
    bottom to top; each basis column displaces a vertex by at most
    ``basis_scale`` mm per unit coefficient.
    """
    rng = np.random.default_rng(seed)
    head = _head_template(icosphere_level(n_v))
    X = head.vertices
    y = X[:, 1]

    # smooth banded skinning weights
    edges_y = np.linspace(y.min(), y.max(), S + 1)
    centers = 0.5 * (edges_y[1:] + edges_y[:-1])
    spacing = (y.max() - y.min()) / S
    logits = -((y[:, None] - centers[None]) / (0.45 * spacing)) ** 2
    W = np.exp(logits - logits.max(axis=1, keepdims=True))
    W[W < 1e-4] = 0.0
    W = W / W.sum(axis=1, keepdims=True)
    W = _f32(W)
    # renormalise in float32 so rows still sum to one after rounding
    W = _f32(W / W.sum(axis=1, keepdims=True))
    assignment = np.argmax(W, axis=1)

    fields = _smooth_fields(rng, X, n_beta + n_psi)
    if S > 1:
        fields = _remove_segment_rotation(fields, X, assignment, W, S)
    else:
        fields = _remove_segment_rotation(fields, X, np.zeros(len(X), dtype=int), np.ones((len(X), 1)), 1)
    mags = np.linalg.norm(fields, axis=1).max(axis=0)
    scales = rng.uniform(0.6, 1.0, size=n_beta + n_psi) * basis_scale / mags
    fields = fields * scales
    basis_id = _f32(fields[:, :, :n_beta])
    basis_exp = _f32(fields[:, :, n_beta:])

    regressor = W.T / W.sum(axis=0)[:, None]
    parents = np.arange(-1, S - 1)
    d = X / np.linalg.norm(X, axis=1, keepdims=True)
    eyes = np.zeros(len(X), dtype=bool)
    for ex in (-0.38, 0.38):
        c = np.array([ex, 0.3, 0.87])
        eyes |= np.linalg.norm(d - c / np.linalg.norm(c), axis=1) < eye_radius
    return ParametricModel(
        template_vertices=_f32(X),
        faces=head.faces,
        basis_id=basis_id,
        basis_exp=basis_exp,
        basis_pose=np.zeros((len(X), 3, 9 * (S - 1))),
        joint_regressor=_f32(regressor),
        skin_weights=W,
        segment_parents=parents,
        eye_mask=eyes,
    )
