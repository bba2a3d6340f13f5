"""Grasp energy E = E_fc + w_dis E_dis + w_p E_p + w_sp E_sp + w_q E_q and its gradient.

Configuration variables are the joint vector ``theta`` and the object pose
``T = (R, t)`` expressed in the hand frame. Gradients with respect to ``T``
use twist coordinates ``(v, w)`` with the update ``t <- t + v``,
``R <- exp(w) R`` (object rotates about its own centroid, axes in the hand
frame).

Everything that touches the object is evaluated at object-frame coordinates
``q = R^T (x - t)`` of hand points ``x``; the table lives in the world frame
given by the object's canonical pose.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .geometry import ObjectModel, sdf
from .hand_model import FKResult, HandModel
from .spatial import Pose


@dataclass
class EnergyWeights:
    w_dis: float = 100.0
    w_p: float = 100.0
    w_sp: float = 10.0
    w_q: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")


@dataclass
class EnergyBreakdown:
    e_fc: float
    e_dis: float
    e_p: float
    e_sp: float
    e_q: float
    total: float

    def to_json(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_json(cls, d: dict) -> "EnergyBreakdown":
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})


@dataclass
class BatchEnergy:
    """Per-chain energy terms (B,) and optional gradients."""

    e_fc: np.ndarray
    e_dis: np.ndarray
    e_p: np.ndarray
    e_p_table: np.ndarray
    e_sp: np.ndarray
    e_q: np.ndarray
    total: np.ndarray
    grad_theta: np.ndarray | None = None
    grad_v: np.ndarray | None = None
    grad_w: np.ndarray | None = None

    def breakdown(self, i: int = 0) -> EnergyBreakdown:
        return EnergyBreakdown(float(self.e_fc[i]), float(self.e_dis[i]), float(self.e_p[i]),
                               float(self.e_sp[i]), float(self.e_q[i]), float(self.total[i]))


# -------------------------------------------------------------- building blocks

def grasp_map(contacts, center) -> np.ndarray:
    """6 x 3n matrix mapping stacked contact forces to the net wrench about ``center``."""
    p = np.asarray(contacts, dtype=float).reshape(-1, 3) - np.asarray(center, dtype=float)
    n = len(p)
    G = np.zeros((6, 3 * n))
    for i in range(n):
        G[:3, 3 * i:3 * i + 3] = np.eye(3)
        x, y, z = p[i]
        G[3:, 3 * i:3 * i + 3] = [[0, -z, y], [z, 0, -x], [-y, x, 0]]
    return G


def _to_object(R, t, x):
    return np.einsum("bij,bpi->bpj", R, x - t[:, None, :])


def _to_hand(R, g):
    return np.einsum("bij,bpj->bpi", R, g)


def _gather_points(fk: FKResult, link_idx: np.ndarray, local: np.ndarray) -> np.ndarray:
    """Points whose link index varies per chain: link_idx (B, P), local (B, P, 3)."""
    b = np.arange(link_idx.shape[0])[:, None]
    R = fk.rot[b, link_idx]
    return np.einsum("bpij,bpj->bpi", R, local) + fk.pos[b, link_idx]


def _backprop(model: HandModel, fk: FKResult, link_idx, world, grad) -> np.ndarray:
    """J^T grad summed over points; link_idx is (P,) or (B, P)."""
    if link_idx.ndim == 1:
        return model.backprop_points(fk, link_idx, world, grad)
    A = np.moveaxis(model.ancestor[:, link_idx], 0, 1).astype(float)  # (B, J, P)
    moment = np.einsum("bjp,bpk->bjk", A, np.cross(world, grad))
    force = np.einsum("bjp,bpk->bjk", A, grad)
    return np.einsum("bjk,bjk->bj", fk.axis, moment - np.cross(fk.origin, force))


def contact_terms(obj: ObjectModel, q: np.ndarray, want_grad: bool = True):
    """Force-closure and distance terms for object-frame contact points q (B, n, 3).

    Returns (e_fc, e_dis, grad_q_fc, grad_q_dis).
    """
    res = sdf(obj, q, hessian=want_grad)
    v, g = res.value, res.gradient
    nrm = -g  # inward contact normals
    force = nrm.sum(axis=1)
    torque = np.cross(q, nrm).sum(axis=1)
    w = np.concatenate([force, torque], axis=1)
    e_fc = np.linalg.norm(w, axis=1)
    e_dis = np.abs(v).sum(axis=1)
    if not want_grad:
        return e_fc, e_dis, None, None
    u = w / np.maximum(e_fc, 1e-300)[:, None]
    u = np.where(e_fc[:, None] > 0, u, 0.0)
    uf, ut = u[:, None, :3], u[:, None, 3:]
    # d/dq [uf.n + ut.(q x n)] with n = -g(q), dn/dq = -H
    vec = uf + np.cross(ut, q)
    g_fc = np.cross(nrm, np.broadcast_to(ut, q.shape)) - np.einsum("bpij,bpj->bpi", res.hessian, vec)
    g_dis = np.sign(v)[..., None] * g
    return e_fc, e_dis, g_fc, g_dis


def _scatter_rows(B, S, bi, si, rows):
    """Sum (P, 3) rows into a (B, S, 3) array at (bi, si) pairs."""
    flat = bi * S + si
    out = np.empty((B * S, 3))
    for k in range(3):
        out[:, k] = np.bincount(flat, weights=rows[:, k], minlength=B * S)
    return out.reshape(B, S, 3)


def self_penetration(model: HandModel, xs: np.ndarray, want_grad: bool = True, pairs=None):
    """Hinge overlap of non-adjacent sphere pairs; xs (B, S, 3) hand-frame centers."""
    pairs = model.self_collision_pairs if pairs is None else pairs
    B, S, _ = xs.shape
    if len(pairs) == 0:
        return np.zeros(B), np.zeros_like(xs) if want_grad else None
    a, b = pairs[:, 0], pairs[:, 1]
    d = xs[:, a] - xs[:, b]
    reach = model.sphere_radii[a] + model.sphere_radii[b]
    d2 = np.einsum("bpi,bpi->bp", d, d)
    bi, pi = np.nonzero(d2 < reach[None] ** 2)
    dist = np.sqrt(d2[bi, pi])
    e = np.bincount(bi, weights=reach[pi] - dist, minlength=B).astype(float)
    if not want_grad:
        return e, None
    unit = d[bi, pi] / np.maximum(dist, 1e-12)[:, None]
    grad = _scatter_rows(B, S, np.concatenate([bi, bi]), np.concatenate([a[pi], b[pi]]),
                         np.concatenate([-unit, unit]))
    return e, grad


def joint_limit_penalty(model: HandModel, theta: np.ndarray, want_grad: bool = True):
    above = theta - model.upper
    below = model.lower - theta
    e = np.maximum(above, 0).sum(axis=-1) + np.maximum(below, 0).sum(axis=-1)
    if not want_grad:
        return e, None
    return e, (above > 0).astype(float) - (below > 0).astype(float)


def penetration_terms(model: HandModel, obj: ObjectModel, qs: np.ndarray, want_grad: bool = True,
                      samples: np.ndarray | None = None, radii: np.ndarray | None = None):
    """Hand-object, hand-table and object-surface-vs-hand penetration.

    qs: (B, S, 3) sphere centers in the object frame; ``radii`` defaults to
    the model's sphere radii. Returns (e_obj, e_table, e_samples, grad_qs).
    """
    r = model.sphere_radii if radii is None else radii
    B, S, _ = qs.shape
    res = sdf(obj, qs)
    pen = r - res.value
    act = pen > 0
    e_obj = np.where(act, pen, 0.0).sum(axis=1)
    Ro, to = obj.canonical_pose.rotation, obj.canonical_pose.translation
    z = qs @ Ro[2] + to[2]
    pen_t = r - z
    act_t = pen_t > 0
    e_tab = np.where(act_t, pen_t, 0.0).sum(axis=1)
    grad = None
    if want_grad:
        grad = -res.gradient * act[..., None] - np.where(act_t[..., None], Ro[2], 0.0)
    # object surface samples inside hand spheres; only spheres overlapping the
    # object surface (|sdf| < r) can contain a sample
    pts = obj.surface_points if samples is None else samples
    e_samp = np.zeros(B)
    bi, si = np.nonzero(np.abs(res.value) < r)
    if len(bi):
        diff = qs[bi, si][:, None, :] - pts[None, :, :]  # (Pa, K, 3)
        dist = np.linalg.norm(diff, axis=-1)
        sd = dist - r[si][:, None]
        best = np.full((B, len(pts)), np.inf)
        rows, starts = np.unique(bi, return_index=True)  # bi is sorted
        best[rows] = np.minimum.reduceat(sd, starts, axis=0)
        inside = best < 0
        e_samp = np.where(inside, -best, 0.0).sum(axis=1)
        if want_grad:
            win = (sd == best[bi]) & inside[bi]
            unit = diff / np.maximum(dist, 1e-12)[..., None]
            g_rows = -(unit * win[..., None]).sum(axis=1)
            grad += _scatter_rows(B, S, bi, si, g_rows)
    return e_obj, e_tab, e_samp, grad


# ------------------------------------------------------------------- full energy

def batch_energy(model: HandModel, obj: ObjectModel, theta: np.ndarray, R: np.ndarray,
                 t: np.ndarray, assignment: np.ndarray, weights: EnergyWeights,
                 want_grad: bool = True, samples: np.ndarray | None = None) -> BatchEnergy:
    """Energy of B configurations at once.

    theta (B, d); R (B, 3, 3), t (B, 3) object pose in the hand frame;
    assignment (B, n) contact candidate ids (n may be 0).
    """
    theta = np.asarray(theta, dtype=float)
    B = theta.shape[0]
    fk = model.fk(theta)
    assignment = np.asarray(assignment, dtype=int).reshape(B, -1)
    grad_x_sph = None

    xs = model.sphere_world(fk)
    qs = _to_object(R, t, xs)
    e_obj, e_tab, e_samp, gq_s = penetration_terms(model, obj, qs, want_grad, samples)
    e_p = e_obj + e_tab + e_samp
    e_sp, gx_sp = self_penetration(model, xs, want_grad)
    e_q, g_q = joint_limit_penalty(model, theta, want_grad)

    if assignment.shape[1]:
        xc = _gather_points(fk, model.cand_links[assignment], model.cand_points[assignment])
        qc = _to_object(R, t, xc)
        e_fc, e_dis, g_fc, g_dis = contact_terms(obj, qc, want_grad)
    else:
        e_fc = e_dis = np.zeros(B)
    w = weights
    total = e_fc + w.w_dis * e_dis + w.w_p * e_p + w.w_sp * e_sp + w.w_q * e_q
    out = BatchEnergy(e_fc, e_dis, e_p, e_tab, e_sp, e_q, total)
    if not want_grad:
        return out

    gx_obj = _to_hand(R, w.w_p * gq_s)
    grad_x_sph = gx_obj + w.w_sp * gx_sp
    grad_theta = _backprop(model, fk, model.sphere_links, xs, grad_x_sph) + w.w_q * g_q
    grad_v = -gx_obj.sum(axis=1)
    grad_w = np.cross(gx_obj, xs - t[:, None, :]).sum(axis=1)
    if assignment.shape[1]:
        gx_c = _to_hand(R, g_fc + w.w_dis * g_dis)
        grad_theta = grad_theta + _backprop(model, fk, model.cand_links[assignment], xc, gx_c)
        grad_v = grad_v - gx_c.sum(axis=1)
        grad_w = grad_w + np.cross(gx_c, xc - t[:, None, :]).sum(axis=1)
    out.grad_theta, out.grad_v, out.grad_w = grad_theta, grad_v, grad_w
    return out


def finger_energy(model: HandModel, obj: ObjectModel, theta, T: Pose, assignment, fingers,
                  weights: EnergyWeights | None = None) -> EnergyBreakdown:
    """Energy of one object counting only the hand parts on ``fingers``.

    Penetration uses those fingers' spheres, self-penetration the pairs with
    both spheres on them, and the joint-limit term their joints. The value
    depends only on the joints of ``fingers`` since every finger is a serial
    chain rooted at the palm.
    """
    w = weights or EnergyWeights()
    fingers = set(fingers)
    theta = np.asarray(theta, float)[None]
    fk = model.fk(theta)
    on = np.array([model.link_finger(model.links[li]) in fingers for li in model.sphere_links])
    xs = model.sphere_world(fk)
    qs = _to_object(T.rotation[None], T.translation[None], xs[:, on])
    e_obj, e_tab, e_samp, _ = penetration_terms(model, obj, qs, False, radii=model.sphere_radii[on])
    pairs = model.self_collision_pairs
    pairs = pairs[on[pairs[:, 0]] & on[pairs[:, 1]]] if len(pairs) else pairs
    e_sp, _ = self_penetration(model, xs, False, pairs=pairs)
    joints = model.fingers_joints(sorted(fingers))
    e_q = float(np.maximum(theta[0, joints] - model.upper[joints], 0).sum()
                + np.maximum(model.lower[joints] - theta[0, joints], 0).sum())
    assignment = np.asarray(list(assignment), int)
    if len(assignment):
        xc = _gather_points(fk, model.cand_links[assignment][None], model.cand_points[assignment][None])
        qc = _to_object(T.rotation[None], T.translation[None], xc)
        e_fc, e_dis, _, _ = contact_terms(obj, qc, False)
        e_fc, e_dis = float(e_fc[0]), float(e_dis[0])
    else:
        e_fc = e_dis = 0.0
    e_p = float(e_obj[0] + e_tab[0] + e_samp[0])
    total = e_fc + w.w_dis * e_dis + w.w_p * e_p + w.w_sp * float(e_sp[0]) + w.w_q * e_q
    return EnergyBreakdown(e_fc, e_dis, e_p, float(e_sp[0]), e_q, total)


def _single(theta, T: Pose):
    return (np.asarray(theta, float)[None], T.rotation[None], T.translation[None])


def _single_energy(model, obj, theta, T, assignment, weights, grad=False):
    th, R, t = _single(theta, T)
    a = np.asarray(list(assignment) if assignment is not None else [], int)[None]
    return batch_energy(model, obj, th, R, t, a, weights or EnergyWeights(), want_grad=grad)


def energy_fc(model, theta, T: Pose, obj, assignment) -> float:
    if len(assignment) == 0:
        raise ValueError("assignment must be nonempty")
    return float(_single_energy(model, obj, theta, T, assignment, None).e_fc[0])


def energy_dis(model, theta, T: Pose, obj, assignment) -> float:
    return float(_single_energy(model, obj, theta, T, assignment, None).e_dis[0])


def energy_pen(model, theta, T: Pose, obj) -> float:
    return float(_single_energy(model, obj, theta, T, [], None).e_p[0])


def energy_spen(model, theta) -> float:
    fk = model.fk(np.asarray(theta, float)[None])
    return float(self_penetration(model, model.sphere_world(fk), want_grad=False)[0][0])


def energy_q(model, theta) -> float:
    return float(joint_limit_penalty(model, np.asarray(theta, float), want_grad=False)[0])


def total_energy(model, theta, T: Pose, obj, assignment, weights: EnergyWeights | None = None) -> EnergyBreakdown:
    return _single_energy(model, obj, theta, T, assignment, weights).breakdown(0)


def energy_gradient(model, theta, T: Pose, obj, assignment, weights: EnergyWeights | None = None):
    """(dE/dtheta (d,), dE/dT (6,) as [translation twist, rotation twist])."""
    be = _single_energy(model, obj, theta, T, assignment, weights, grad=True)
    return be.grad_theta[0], np.concatenate([be.grad_v[0], be.grad_w[0]])
