"""Quasi-static grasp validation.

A grasp is kept when the detected contacts can balance gravity along all six
hand-frame axis directions with forces inside linearized friction cones, and
when the hand can approach the object without hitting it or the table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .geometry import ObjectModel, sdf
from .hand_model import HandModel
from .spatial import Pose

DIRECTIONS = ("+x", "-x", "+y", "-y", "+z", "-z")
GRAVITY_DIRECTIONS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
                              dtype=float)
REASONS = ("none", "no_contacts", "wrench_infeasible", "approach_collision")

DEDUP_CELL = 5e-3
APPROACH_OFFSET = 0.10
SWEEP_STEP = 0.01


@dataclass
class ValidationConfig:
    mu: float = 0.9
    density: float = 500.0
    facets: int = 8
    activation: float = 2e-3
    preload: float = 1.0
    gravity: float = 9.81
    torsion: float = 0.0  # soft-contact twist per unit normal force (m); 0 is a point contact

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("friction coefficient must be positive")
        if self.facets < 3:
            raise ValueError("friction cones need at least 3 facets")
        if self.torsion < 0:
            raise ValueError("torsional friction must be non-negative")
        if self.activation < 0 or self.preload <= 0 or self.density <= 0:
            raise ValueError("activation, preload and density must be positive")

    @property
    def f_max(self) -> float:
        return 10.0 * self.preload

    def mass(self, obj: ObjectModel) -> float:
        return obj.volume * self.density


@dataclass
class ValidationReport:
    rotation_robust: bool
    margins: np.ndarray
    execution_feasible: bool
    reason: str = "none"
    direction: str | None = None  # set when reason is wrench_infeasible
    n_contacts: int = 0

    def __post_init__(self):
        self.margins = np.asarray(self.margins, dtype=float).reshape(6)
        if self.reason not in REASONS:
            raise ValueError(f"unknown failure reason '{self.reason}'")

    @property
    def valid(self) -> bool:
        return self.rotation_robust and self.execution_feasible

    def to_json(self) -> dict:
        return {"rotation_robust": self.rotation_robust,
                "margins": [float(m) for m in self.margins],
                "execution_feasible": self.execution_feasible, "reason": self.reason,
                "direction": self.direction, "n_contacts": self.n_contacts}

    @classmethod
    def from_json(cls, d: dict) -> "ValidationReport":
        return cls(d["rotation_robust"], np.array(d["margins"], float), d["execution_feasible"],
                   d.get("reason", "none"), d.get("direction"), d.get("n_contacts", 0))


@dataclass
class Contact:
    point: np.ndarray   # hand frame
    normal: np.ndarray  # unit, pointing into the object
    depth: float = 0.0  # sphere-to-surface gap, negative when penetrating


# ------------------------------------------------------------------ contacts

def _hand_spheres_in_object(model: HandModel, theta, T: Pose):
    fk = model.fk(np.asarray(theta, float)[None])
    xs = model.sphere_world(fk)[0]
    return xs, (xs - T.translation) @ T.rotation


def detect_contacts(model: HandModel, theta, T: Pose, obj: ObjectModel,
                    activation: float = 2e-3) -> list[Contact]:
    """Hand sphere surfaces within ``activation`` of the object surface.

    Each contact is placed on the object surface below the sphere center with
    the inward SDF normal. Contacts falling into the same 5 mm cell are
    merged, keeping the deepest.
    """
    xs, qs = _hand_spheres_in_object(model, theta, T)
    res = sdf(obj, qs)
    gap = res.value - model.sphere_radii
    hits = np.flatnonzero(gap <= activation)
    cells: dict[tuple, Contact] = {}
    for i in hits[np.argsort(gap[hits], kind="stable")]:
        g = res.gradient[i]
        q_surf = qs[i] - res.value[i] * g
        p = T.apply(q_surf)
        key = tuple(np.floor(p / DEDUP_CELL).astype(int))
        if key not in cells:
            cells[key] = Contact(p, -(T.rotation @ g), float(gap[i]))
    return list(cells.values())


# ---------------------------------------------------------- wrench feasibility

def _tangent(n, preferred):
    """Unit vector normal to ``n``, along the part of the first usable ``preferred`` vector."""
    for a in preferred:
        u = a - (a @ n) * n
        norm = np.linalg.norm(u)
        if norm > 1e-9:
            return u / norm
    a = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(n, a)
    return u / np.linalg.norm(u)


def _cone_generators(contacts, center, mu, facets, up=None, torsion=0.0):
    """Columns are unit-normal-force wrenches of each cone edge: (6, n*k).

    The first edge of each cone leans toward ``up`` (the direction opposing
    gravity) so the polygon turns with the whole contact system. With
    ``torsion`` > 0 each contact gets two more columns, a pure push twisting
    by +/- ``torsion`` newton-meters per newton about its normal (soft
    fingertip pads), so k = m + 2.
    """
    cols = []
    ang = 2 * np.pi * np.arange(facets) / facets
    up = [] if up is None else [np.asarray(up, float)]
    for c in contacts:
        n = np.asarray(c.normal, float)
        n = n / np.linalg.norm(n)
        arm = np.asarray(c.point, float) - center
        u = _tangent(n, up + [np.cross(arm, n)])
        v = np.cross(n, u)
        f = n[None] + mu * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v)
        tau = np.cross(arm, f)
        if torsion > 0:
            f = np.vstack([f, n, n])
            tau = np.vstack([tau, np.cross(arm, n) + torsion * n, np.cross(arm, n) - torsion * n])
        cols.append(np.hstack([f, tau]).T)
    return np.hstack(cols)


def _normal_caps(n_contacts, facets):
    """Rows summing each contact's edge weights (its normal force)."""
    A = np.zeros((n_contacts, n_contacts * facets))
    for i in range(n_contacts):
        A[i, i * facets:(i + 1) * facets] = 1.0
    return A


def _residual_lp(G, caps, f_max, w):
    """min ||G l + w||_inf over the capped cone; returns the optimum."""
    k = G.shape[1]
    c = np.zeros(k + 1)
    c[-1] = 1.0
    one = np.ones((6, 1))
    A_ub = np.vstack([np.hstack([G, -one]), np.hstack([-G, -one]),
                      np.hstack([caps, np.zeros((len(caps), 1))])])
    b_ub = np.concatenate([-w, w, np.full(len(caps), f_max)])
    r = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(0, None)] * (k + 1), method="highs")
    return float(r.fun) if r.status == 0 else float(np.abs(w).max())


def _margin_lp(G, caps, f_max, w):
    """Largest eps such that every -w +/- eps e_k (k = 1..6) is reachable."""
    k = G.shape[1]
    dirs = np.vstack([np.eye(6), -np.eye(6)])
    nd = len(dirs)
    nv = nd * k + 1
    A_eq = np.zeros((6 * nd, nv))
    b_eq = np.zeros(6 * nd)
    A_ub = np.zeros((len(caps) * nd, nv))
    for j, d in enumerate(dirs):
        A_eq[6 * j:6 * j + 6, j * k:(j + 1) * k] = G
        A_eq[6 * j:6 * j + 6, -1] = -d
        b_eq[6 * j:6 * j + 6] = -w
        A_ub[len(caps) * j:len(caps) * (j + 1), j * k:(j + 1) * k] = caps
    c = np.zeros(nv)
    c[-1] = -1.0
    r = linprog(c, A_ub=A_ub, b_ub=np.full(len(A_ub), f_max), A_eq=A_eq, b_eq=b_eq,
                bounds=[(0, None)] * nv, method="highs")
    if r.status != 0:
        return None
    return float(r.x[-1])


def gravity_wrench(mass: float, direction, magnitude: float = 9.81, center=None, com=None):
    g = mass * magnitude * np.asarray(direction, float)
    if center is None or com is None:
        return np.concatenate([g, np.zeros(3)])
    return np.concatenate([g, np.cross(np.asarray(com) - np.asarray(center), g)])


def wrench_resistible(contacts, mass: float, gravity_direction, config: ValidationConfig | None = None,
                      center=None) -> tuple[bool, float]:
    """Can capped friction-cone forces at ``contacts`` cancel the object's weight?

    Torques are taken about ``center`` (the object's center of mass, default
    origin). The margin is the radius of the largest cross-polytope of extra
    wrenches around the balancing wrench that stays reachable when feasible,
    and minus the smallest achievable infinity-norm residual otherwise.
    """
    cfg = config or ValidationConfig()
    center = np.zeros(3) if center is None else np.asarray(center, float)
    w = gravity_wrench(mass, gravity_direction, cfg.gravity)
    if len(contacts) == 0:
        return False, -float(np.abs(w).max())
    up = -np.asarray(gravity_direction, float)
    G = _cone_generators(contacts, center, cfg.mu, cfg.facets, up, cfg.torsion)
    caps = _normal_caps(len(contacts), G.shape[1] // len(contacts))
    resid = _residual_lp(G, caps, cfg.f_max, w)
    if resid > 1e-9:
        return False, -resid
    eps = _margin_lp(G, caps, cfg.f_max, w)
    if eps is None:  # numerically borderline; residual says feasible
        eps = 0.0
    return True, max(eps, 0.0)


def rotation_robustness(model: HandModel, theta, T: Pose, obj: ObjectModel,
                        config: ValidationConfig | None = None, contacts=None):
    """Wrench feasibility for gravity along each hand-frame axis direction.

    Returns (robust, margins[6]) in the order +x, -x, +y, -y, +z, -z.
    """
    cfg = config or ValidationConfig()
    if contacts is None:
        contacts = detect_contacts(model, theta, T, obj, cfg.activation)
    mass = cfg.mass(obj)
    margins = np.empty(6)
    ok = np.empty(6, bool)
    for k, d in enumerate(GRAVITY_DIRECTIONS):
        ok[k], margins[k] = wrench_resistible(contacts, mass, d, cfg, center=T.translation)
    return bool(ok.all()), margins


# ------------------------------------------------------ execution feasibility

def hand_penetration(model: HandModel, theta, hand_world: Pose, objects, table: bool = True,
                     ignore_below: float = 0.0):
    """Deepest hand-sphere penetration into the table and into any of ``objects``.

    ``objects`` is a sequence of (ObjectModel, world Pose). Returns
    (table_depth, object_depth), each >= 0.
    """
    fk = model.fk(np.asarray(theta, float)[None])
    xs = hand_world.apply(model.sphere_world(fk)[0])
    r = model.sphere_radii
    t_depth = float(np.max(np.maximum(r - xs[:, 2], 0.0))) if table else 0.0
    o_depth = 0.0
    for obj, pose in objects:
        q = (xs - pose.translation) @ pose.rotation
        o_depth = max(o_depth, float(np.max(np.maximum(r - sdf(obj, q).value, 0.0))))
    return t_depth, o_depth


def open_theta(model: HandModel, theta, fingers, grid: int = 7):
    """Flatten the given fingers for travel.

    The first (abduction) joint of each finger is kept; the remaining joints
    are chosen on a grid to minimize how far the finger rises above the palm
    plane along the approach axis.
    """
    out = np.asarray(theta, float).copy()
    for f in fingers:
        idx = model.finger_joint_idx.get(f)
        if idx is None or len(idx) < 2:
            continue
        flex = idx[1:]
        axes = [np.linspace(model.lower[j], model.upper[j], grid) for j in flex]
        combos = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(flex))
        th = np.tile(out, (len(combos), 1))
        th[:, flex] = combos
        own = np.array([model.link_finger(model.links[li]) == f for li in model.sphere_links])
        xs = model.sphere_world(model.fk(th))[:, own]
        top = (xs[..., 2] + model.sphere_radii[own]).max(axis=1)
        out[flex] = combos[int(np.argmin(top))]
    return out


def approach_poses(hand_world: Pose, offset: float = APPROACH_OFFSET, step: float = SWEEP_STEP):
    """Hand poses from the offset pose forward along the palm normal to the grasp pose."""
    n = int(round(offset / step))
    z = hand_world.rotation[:, 2]
    return [Pose(hand_world.rotation, hand_world.translation - (offset - k * step) * z)
            for k in range(n + 1)]


def approach_clear(model: HandModel, theta_travel, theta_final, hand_world: Pose, objects,
                   activation: float, table: bool = True) -> bool:
    """Swept approach check shared by validation and execution simulation.

    The offset pose must be collision-free; later poses may touch objects up
    to ``activation`` deep but never the table. ``theta_travel`` is used on
    the way in and ``theta_final`` at the grasp pose.
    """
    poses = approach_poses(hand_world)
    for k, pose in enumerate(poses):
        th = theta_final if k == len(poses) - 1 else theta_travel
        td, od = hand_penetration(model, th, pose, objects, table)
        limit = 0.0 if k == 0 else activation
        if td > 0.0 or od > limit:
            return False
    return True


def serving_fingers(model: HandModel, assignment) -> list[str]:
    return sorted(f for f in model.candidate_fingers(assignment) if f in model.finger_joint_idx)


def execution_feasibility(model: HandModel, grasp, obj: ObjectModel, table: bool = True,
                          config: ValidationConfig | None = None, scene=()) -> bool:
    """Can the hand reach ``grasp`` from 10 cm back along its palm normal?

    The serving fingers travel flattened. At the grasp pose both the
    pre-grasp hand (fingertips retracted for the squeeze) and the grasp
    itself must be clear, and the retract/advance fingertip targets must be
    reachable. The object sits at its canonical world pose; ``scene`` holds
    extra (ObjectModel, world Pose) obstacles.
    """
    from .exec_planner import PlanError, squeeze_targets  # the planner imports this module

    cfg = config or ValidationConfig()
    hand = obj.canonical_pose @ grasp.T.inverse()
    fingers = serving_fingers(model, grasp.assignment)
    try:
        pre, _, _ = squeeze_targets(model, grasp.theta, [f for f in fingers if f in model.fingertips])
    except PlanError:
        return False
    travel = open_theta(model, grasp.theta, fingers)
    objects = [(obj, obj.canonical_pose)] + list(scene)
    if not approach_clear(model, travel, pre, hand, objects, cfg.activation, table):
        return False
    td, od = hand_penetration(model, grasp.theta, hand, objects, table)
    return td <= 0.0 and od <= cfg.activation


def validate(model: HandModel, grasp, obj: ObjectModel, config: ValidationConfig | None = None,
             scene=()) -> ValidationReport:
    cfg = config or ValidationConfig()
    contacts = detect_contacts(model, grasp.theta, grasp.T, obj, cfg.activation)
    if not contacts:
        robust, margins = False, np.full(6, -cfg.mass(obj) * cfg.gravity)
    else:
        robust, margins = rotation_robustness(model, grasp.theta, grasp.T, obj, cfg, contacts)
    feasible = execution_feasibility(model, grasp, obj, True, cfg, scene)
    reason, direction = "none", None
    if not contacts:
        reason = "no_contacts"
    elif not robust:
        reason = "wrench_infeasible"
        direction = DIRECTIONS[int(np.argmin(margins))]
    elif not feasible:
        reason = "approach_collision"
    return ValidationReport(robust, margins, feasible, reason, direction, len(contacts))


def validate_records(model: HandModel, records, objects: dict, config: ValidationConfig | None = None):
    """Attach a report to each record; returns the valid subset."""
    kept = []
    for rec in records:
        rec.validation = validate(model, rec, objects[rec.object_id], config)
        if rec.validation.valid:
            kept.append(rec)
    return kept
