"""Pseudo-linear inverse kinematics: recover model parameters from free-form vertices.

Per-segment rotations come from one Procrustes pass over dominant-segment
vertex sets; with rotations frozen, shape, expression and translation follow
from a single linear least-squares solve. The recovered mesh ``v_fl`` is an
affine function of the predicted vertices, so gradients pass through it
exactly (rotations are treated as constants).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from densereg import container
from densereg.errors import SolverError
from densereg.model import ParametricModel

PLIKS_KIND = "pliks"


def dominant_segments(model: ParametricModel) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest segment
    return np.argmax(model.skin_weights, axis=1)


@dataclass
class ProcrustesDiagnostics:
    fallback: list = field(default_factory=list)  # segments that inherited a rotation


def _kabsch(X, Y):
    """Rotation ``R`` minimising ``||R X_c - Y_c||`` with det(R) = +1, or None if degenerate."""
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    H = Xc.T @ Yc
    U, s, Vt = np.linalg.svd(H)
    if s[0] <= 0 or s[1] <= 1e-9 * s[0]:
        return None
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


def segment_procrustes(template_verts, pred_verts, assignment, S, parents=None,
                       diagnostics: ProcrustesDiagnostics | None = None) -> np.ndarray:
    template_verts = np.asarray(template_verts, dtype=np.float64)
    pred_verts = np.asarray(pred_verts, dtype=np.float64)
    if parents is None:
        parents = np.full(S, -1)
        order = list(range(S))
    else:
        from densereg.model import _topological_order
        order = _topological_order(parents)
    rotations = np.tile(np.eye(3), (S, 1, 1))
    for s in order:
        sel = assignment == s
        R = _kabsch(template_verts[sel], pred_verts[sel]) if sel.sum() >= 3 else None
        if R is None:
            p = parents[s]
            R = rotations[p].copy() if p >= 0 else np.eye(3)
            if diagnostics is not None:
                diagnostics.fallback.append(int(s))
        rotations[s] = R
    return rotations


class LinearSolve:
    """Factorised least-squares map from predicted vertices to ``[beta; psi; t]``."""

    def __init__(self, A, offset, n_beta, n_psi, lambda_beta, lambda_psi):
        self.A = A  # (3 n_v, k)
        self.offset = offset  # (3 n_v,) = vec(R_s V_bar)
        self.n_beta = n_beta
        self.n_psi = n_psi
        k = A.shape[1]
        assert k == n_beta + n_psi + 3
        self.ridge = np.concatenate([np.full(n_beta, lambda_beta), np.full(n_psi, lambda_psi),
                                     np.zeros(3)])
        if (self.ridge < 0).any():
            raise ValueError("ridge weights must be >= 0")
        # ridge terms enter as extra rows sqrt(lambda) I; QR of the stacked matrix
        # avoids squaring the condition number as the normal equations would
        stacked = np.vstack([A, np.diag(np.sqrt(self.ridge))])
        Q, self.R = np.linalg.qr(stacked)
        self.Q = Q[:A.shape[0]]
        d = np.abs(np.diag(self.R))
        if d.min() <= 1e-12 * max(d.max(), 1.0):
            raise SolverError(
                "least-squares system is rank deficient; use lambda_beta, lambda_psi > 0"
            )

    def solve(self, rhs):
        """``x = argmin ||A x - rhs||^2 + ridge``."""
        return scipy.linalg.solve_triangular(self.R, self.Q.T @ rhs)

    def solve_transpose(self, gx):
        """Adjoint of :meth:`solve`: gradient w.r.t. ``rhs`` given gradient w.r.t. ``x``."""
        return self.Q @ scipy.linalg.solve_triangular(self.R, gx, trans="T")


def build_system(model: ParametricModel, rotations, assignment):
    Rv = rotations[assignment]  # (n_v, 3, 3)
    n_v = model.n_vertices
    blocks = [np.einsum("vij,vjk->vik", Rv, model.basis_id),
              np.einsum("vij,vjk->vik", Rv, model.basis_exp),
              np.broadcast_to(np.eye(3), (n_v, 3, 3))]
    A = np.concatenate(blocks, axis=2).reshape(3 * n_v, -1)
    offset = np.einsum("vij,vj->vi", Rv, model.template_vertices).reshape(-1)
    return A, offset


def solve(pred_verts, model: ParametricModel, rotations, assignment,
          lambda_beta: float = 0.0, lambda_psi: float = 0.0):
    """Returns ``(beta, psi, trans, residual, solver)``; residual is the RMS vertex error in mm."""
    A, offset = build_system(model, rotations, assignment)
    solver = LinearSolve(A, offset, model.n_beta, model.n_psi, lambda_beta, lambda_psi)
    x = solver.solve(np.asarray(pred_verts, dtype=np.float64).reshape(-1) - offset)
    beta, psi, trans = np.split(x, [model.n_beta, model.n_beta + model.n_psi])
    fitted = (A @ x + offset).reshape(-1, 3)
    residual = float(np.sqrt(np.mean(np.sum((fitted - pred_verts) ** 2, axis=1))))
    return beta, psi, trans, residual, solver


def reforward(model: ParametricModel, rotations, assignment, beta, psi, trans) -> np.ndarray:
    rest = model.template_vertices + model.basis_id @ beta + model.basis_exp @ psi
    return np.einsum("vij,vj->vi", rotations[assignment], rest) + np.asarray(trans)


@dataclass(eq=False)
class PliksResult:
    rotations: np.ndarray
    beta: np.ndarray
    psi: np.ndarray
    trans: np.ndarray
    v_fl: np.ndarray
    residual: float
    assignment: np.ndarray
    solver: LinearSolve | None = None
    fallback: list = field(default_factory=list)

    def backward(self, g_vfl=None, g_beta=None, g_psi=None, g_trans=None) -> np.ndarray:
        """Gradient w.r.t. the predicted vertices at frozen rotations."""
        if self.solver is None:
            raise ValueError("result was loaded without its factorisation; rerun pliks.run")
        nb, npsi = len(self.beta), len(self.psi)
        gx = np.zeros(nb + npsi + 3)
        if g_vfl is not None:
            gx += self.solver.A.T @ np.asarray(g_vfl).reshape(-1)
        if g_beta is not None:
            gx[:nb] += g_beta
        if g_psi is not None:
            gx[nb:nb + npsi] += g_psi
        if g_trans is not None:
            gx[nb + npsi:] += g_trans
        return self.solver.solve_transpose(gx).reshape(-1, 3)

    def to_arrays(self):
        return {"rotations": self.rotations, "beta": self.beta, "psi": self.psi,
                "trans": self.trans, "v_fl": self.v_fl, "residual": np.array([self.residual]),
                "assignment": self.assignment}


def run(pred_verts, model: ParametricModel, lambda_beta: float = 0.0, lambda_psi: float = 0.0,
        rotations=None) -> PliksResult:
    """Full pass: dominant segments, Procrustes, linear solve, re-forward.

    ``rotations`` may be supplied to skip the Procrustes step (used when
    checking derivatives at frozen rotations).
    """
    pred_verts = np.asarray(pred_verts, dtype=np.float64)
    assignment = dominant_segments(model)
    diag = ProcrustesDiagnostics()
    if rotations is None:
        rotations = segment_procrustes(model.template_vertices, pred_verts, assignment,
                                       model.n_segments, model.segment_parents, diag)
    beta, psi, trans, residual, solver = solve(pred_verts, model, rotations, assignment,
                                               lambda_beta, lambda_psi)
    v_fl = reforward(model, rotations, assignment, beta, psi, trans)
    return PliksResult(rotations, beta, psi, trans, v_fl, residual, assignment, solver,
                       diag.fallback)


def save_result(result: PliksResult, path) -> None:
    container.write(path, result.to_arrays(), PLIKS_KIND,
                    dtypes={"assignment": "<i4"})


def load_result(path) -> PliksResult:
    a, _ = container.read(path, kind=PLIKS_KIND)
    return PliksResult(a["rotations"], a["beta"], a["psi"], a["trans"], a["v_fl"],
                       float(a["residual"][0]), a["assignment"].astype(np.int64))
