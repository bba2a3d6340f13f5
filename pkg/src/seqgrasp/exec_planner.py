"""Squeeze-and-lift execution planning and a staged quasi-static execution check."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import ObjectModel, sdf
from .hand_model import HandModel
from .spatial import Pose, axis_angle
from .validation import (DIRECTIONS, ValidationConfig, approach_poses, detect_contacts,
                         hand_penetration, open_theta, rotation_robustness, wrench_resistible)

IK_DAMPING = 1e-3
IK_MAX_ITERS = 200
IK_TOLERANCE = 2e-3


@dataclass
class IKResult:
    theta: np.ndarray  # full joint vector; only the finger's joints are changed
    success: bool
    residual: float
    iterations: int


def finger_ik(model: HandModel, finger: str, target, theta_init, damping: float = IK_DAMPING,
              max_iters: int = IK_MAX_ITERS, tol: float = IK_TOLERANCE) -> IKResult:
    """Damped least squares on one finger's chain to place its fingertip at ``target``.

    Joint limits are clamped after every step, which can make the iteration
    oscillate, so the best iterate seen is returned. The loop stops early once
    the residual is below 1e-6 m; success means that residual is under ``tol``.
    """
    if finger not in model.fingertips or finger not in model.finger_joint_idx:
        raise KeyError(f"unknown finger '{finger}'")
    target = np.asarray(target, dtype=float)
    theta = model.clamp(np.asarray(theta_init, dtype=float).copy())
    cols = model.finger_joint_idx[finger]
    tip = model.fingertips[finger]
    li = model.link_index[tip.link]
    it = 0
    best, best_res = theta, np.inf
    for it in range(max_iters + 1):
        fk = model.fk(theta[None])
        p = fk.rot[0, li] @ tip.point + fk.pos[0, li]
        err = target - p
        res = float(np.linalg.norm(err))
        if res < best_res:
            best, best_res = theta.copy(), res
        if res < 1e-6 or it == max_iters:
            break
        J = model.point_jacobian(fk, np.array([li]), p[None, None])[0, 0][:, cols]
        step = J.T @ np.linalg.solve(J @ J.T + damping * np.eye(3), err)
        theta[cols] += step
        theta = model.clamp(theta)
    return IKResult(best, best_res < tol, best_res, it)


# --------------------------------------------------------------------- planning

RETRACT = 0.025
ADVANCE = 0.03
APPROACH_OFFSET = 0.10
CLOSE_STEPS = 40
STAGES = ("plan", "approach_1", "grasp_1", "reorient", "approach_2", "lift")


class PlanError(RuntimeError):
    def __init__(self, finger: str, residual: float, which: str):
        super().__init__(f"IK failed for finger '{finger}' ({which}, residual {residual:.4f} m)")
        self.finger, self.residual, self.which = finger, residual, which


@dataclass
class Scene:
    """World poses of the pinch object and the side object on a table at z = 0."""

    poses: tuple[Pose, Pose]
    table: bool = True


def default_scene(obj1: ObjectModel, obj2: ObjectModel, spacing: float = 0.20) -> Scene:
    p1 = Pose(obj1.canonical_pose.rotation, obj1.canonical_pose.translation * [0, 0, 1])
    p2 = Pose(obj2.canonical_pose.rotation,
              obj2.canonical_pose.translation * [0, 0, 1] + [spacing, 0.0, 0.0])
    return Scene((p1, p2))


def perturb_scene(scene: Scene, rng: np.random.Generator, position: float = 0.01,
                  yaw: float = 0.1) -> Scene:
    """Shift each object in the table plane and spin it about the vertical."""
    out = []
    for p in scene.poses:
        dx, dy = rng.uniform(-position, position, 2)
        a = rng.uniform(-yaw, yaw)
        Rz = axis_angle(np.array([0.0, 0.0, 1.0]), a)
        out.append(Pose(Rz @ p.rotation, p.translation + [dx, dy, 0.0]))
    return Scene(tuple(out), scene.table)


@dataclass
class ExecutionPlan:
    grasp_poses: tuple[Pose, Pose]     # wrist poses for the pinch and the side grasp
    approach_poses: tuple[Pose, Pose]  # offset back along the palm normal
    original: np.ndarray
    pre_grasp: np.ndarray
    target: np.ndarray
    fingers: tuple[list[str], list[str]]  # fingers with a fingertip serving each grasp
    displacements: dict = field(default_factory=dict)  # finger -> (pre, target) along pad normal
    stages: tuple = STAGES[1:]


def _offset(pose: Pose, d: float) -> Pose:
    return Pose(pose.rotation, pose.translation - d * pose.rotation[:, 2])


def squeeze_targets(model: HandModel, record_theta, fingers, retract: float = RETRACT,
                    advance: float = ADVANCE):
    """Pre-grasp and target joints for ``fingers``; raises PlanError on IK misses.

    Returns (pre_grasp, target, displacements) where displacements maps each
    finger to its FK-measured (pre, target) fingertip offsets along the pad normal.
    """
    pre = np.asarray(record_theta, float).copy()
    tgt = pre.copy()
    disp = {}
    for f in fingers:
        p, x = model.fingertip_frame(record_theta, f)
        for which, dist, out in (("pre_grasp", -retract, pre), ("target", advance, tgt)):
            if dist == 0:
                continue
            r = finger_ik(model, f, p + dist * x, record_theta)
            if not r.success:
                raise PlanError(f, r.residual, which)
            idx = model.finger_joint_idx[f]
            out[idx] = r.theta[idx]
        p_pre = model.fingertip_frame(pre, f)[0]
        p_tgt = model.fingertip_frame(tgt, f)[0]
        disp[f] = (float((p_pre - p) @ x), float((p_tgt - p) @ x))
    return pre, tgt, disp


def make_plan(model: HandModel, record, objects: dict, scene: Scene, retract: float = RETRACT,
              advance: float = ADVANCE, offset: float = APPROACH_OFFSET) -> ExecutionPlan:
    """Wrist poses from the nominal scene and per-finger pre-grasp/target joints.

    Fingertips of fingers serving either grasp retract by ``retract`` and
    advance by ``advance`` along their pad normals; other joints keep the
    record's values. Raises :class:`PlanError` when IK misses by over 2 mm.
    """
    H1 = scene.poses[0] @ record.T1.inverse()
    H2 = scene.poses[1] @ record.T2.inverse()
    f1 = sorted(f for f in model.candidate_fingers(record.assignments[0]) if f in model.fingertips)
    f2 = sorted(f for f in model.candidate_fingers(record.assignments[1]) if f in model.fingertips)
    pre, tgt, disp = squeeze_targets(model, record.theta, f1 + f2, retract, advance)
    return ExecutionPlan((H1, H2), (_offset(H1, offset), _offset(H2, offset)), record.theta.copy(),
                         pre, tgt, (f1, f2), disp)


# ------------------------------------------------------------------- simulation

@dataclass
class TrialOutcome:
    success: bool
    stage: str | None = None  # first failing stage
    reason: str = "none"
    direction: str | None = None

    def to_json(self) -> dict:
        return {"success": self.success, "stage": self.stage, "reason": self.reason,
                "direction": self.direction}


PUSH_ITERS = 30
MAX_PUSH = 0.03


def _hand_spheres(model: HandModel, theta, hand: Pose) -> np.ndarray:
    return hand.apply(model.sphere_world(model.fk(np.asarray(theta, float)[None]))[0])


def push_resolve(model: HandModel, theta, hand: Pose, obj: ObjectModel, pose: Pose,
                 compliance: float, origin: Pose | None = None):
    """Slide ``obj`` in the table plane until no hand sphere sinks deeper than ``compliance``.

    Each iteration moves the object away from the penetrating spheres by
    their mean horizontal push. Returns (pose, ok); ``ok`` is False when the
    penetration cannot be resolved (for example a purely vertical press or
    fingers squeezing from both sides) or the object would travel more than
    3 cm from ``origin``.
    """
    xs = _hand_spheres(model, theta, hand)
    r = model.sphere_radii
    origin = pose if origin is None else origin
    t = pose.translation.copy()
    for _ in range(PUSH_ITERS + 1):
        res = sdf(obj, (xs - t) @ pose.rotation)
        pen = r - res.value
        act = pen > compliance
        if not act.any():
            ok = np.linalg.norm(t - origin.translation) <= MAX_PUSH
            return Pose(pose.rotation, t), ok
        n = res.gradient[act] @ pose.rotation.T  # outward normals, world frame
        push = -((pen[act] - 0.5 * compliance)[:, None] * n).mean(axis=0)
        push[2] = 0.0
        if np.linalg.norm(push) < 1e-6:
            break
        t = t + push
    return Pose(pose.rotation, t), False


def _finger_paths(model, knots, fingers, steps):
    s = np.linspace(0.0, 1.0, steps + 1)[:, None]
    out = {}
    for f in fingers:
        idx = model.finger_joint_idx[f]
        out[f] = np.vstack([(1 - s) * a[idx] + s * b[idx] for a, b in zip(knots[:-1], knots[1:])])
    return out


def _touching(model, theta, hand, obj, pose, finger, tol) -> bool:
    on = np.array([model.link_finger(model.links[li]) == finger for li in model.sphere_links])
    xs = _hand_spheres(model, theta, hand)[on]
    return bool((sdf(obj, pose.inverse().apply(xs)).value - model.sphere_radii[on] <= tol).any())


def squeeze(model: HandModel, theta_from, theta_to, fingers, hand: Pose, obj: ObjectModel,
            pose: Pose, compliance: float = 2e-3, via=None, steps: int = CLOSE_STEPS):
    """Close ``fingers`` toward ``theta_to`` while the object may slide on the table.

    The joint path is linear, or piecewise linear through ``via``. At every
    step the object is pushed to absorb penetration; a finger that cannot
    advance without sinking deeper than ``compliance`` stops where it is.
    Past ``via`` the target only acts as a squeeze setpoint: fingers already
    touching the object hold still and the others keep closing.
    Returns (theta, object pose).
    """
    theta = np.asarray(theta_from, float).copy()
    knots = [theta.copy()] + ([np.asarray(via, float)] if via is not None else []) + [theta_to]
    paths = _finger_paths(model, knots, fingers, steps)
    moving = list(fingers)
    origin = pose
    for k in range(len(next(iter(paths.values()))) if paths else 0):
        while moving:
            cand = theta.copy()
            for f in moving:
                cand[model.finger_joint_idx[f]] = paths[f][k]
            new_pose, ok = push_resolve(model, cand, hand, obj, pose, compliance, origin)
            if ok:
                theta, pose = cand, new_pose
                if via is not None and k >= steps:
                    moving = [f for f in moving if not _touching(model, theta, hand, obj, pose, f,
                                                                 compliance)]
                break
            # drop the fingers that are blocked on their own
            blocked = []
            for f in moving:
                solo = theta.copy()
                solo[model.finger_joint_idx[f]] = paths[f][k]
                if not push_resolve(model, solo, hand, obj, pose, compliance, origin)[1]:
                    blocked.append(f)
            moving = [f for f in moving if f not in blocked] if blocked else moving[1:]
    return theta, pose


def push_approach(model: HandModel, theta_travel, theta_final, hand: Pose, target: ObjectModel,
                  pose: Pose, obstacles, activation: float, table: bool = True):
    """Approach sweep in which the target object may be nudged on the table.

    The offset pose must not touch anything. Afterwards the table and the
    ``obstacles`` must stay clear (up to ``activation`` for obstacles) while
    the target is pushed to absorb any deeper contact. Returns (ok, pose).
    """
    poses = approach_poses(hand)
    origin = pose
    for k, hp in enumerate(poses):
        th = theta_final if k == len(poses) - 1 else theta_travel
        td, od = hand_penetration(model, th, hp, list(obstacles) + ([(target, pose)] if k == 0 else []),
                                  table)
        if td > 0.0 or od > (0.0 if k == 0 else activation):
            return False, pose
        if k:
            pose, ok = push_resolve(model, th, hp, target, pose, activation, origin)
            if not ok:
                return False, pose
    return True, pose


def _held_object_clear(obj: ObjectModel, world: Pose, others, table: bool, tol: float) -> bool:
    pts = world.apply(obj.surface_points)
    if table and pts[:, 2].min() < -tol:
        return False
    for other, pose in others:
        if sdf(other, pose.inverse().apply(pts)).value.min() < -tol:
            return False
    return True


def simulate_execution(model: HandModel, plan: ExecutionPlan, record, objects: dict,
                       config: ValidationConfig | None = None, scene: Scene | None = None
                       ) -> TrialOutcome:
    """Quasi-static sequential execution against the (possibly perturbed) ``scene``.

    Stages: approach the pinch object with the serving fingers flattened,
    close the pinch fingers and lift against world gravity, check all six
    hand-axis gravity directions for the held object, approach the side
    object carrying the first one, then close the side fingers and lift
    both objects.
    """
    cfg = config or ValidationConfig()
    obj1, obj2 = objects[record.object_ids[0]], objects[record.object_ids[1]]
    if scene is None:
        scene = default_scene(obj1, obj2)
    P1, P2 = scene.poses
    H1, H2 = plan.grasp_poses
    f1, f2 = plan.fingers
    down = np.array([0.0, 0.0, -1.0])

    # 1: approach object 1
    travel = open_theta(model, plan.original, f1)
    at_grasp = travel.copy()
    for f in f1:
        at_grasp[model.finger_joint_idx[f]] = plan.pre_grasp[model.finger_joint_idx[f]]
    ok, P1 = push_approach(model, travel, at_grasp, H1, obj1, P1, [(obj2, P2)], cfg.activation,
                           scene.table)
    if not ok:
        return TrialOutcome(False, "approach_1", "approach_collision")

    # 2: squeeze object 1 and lift it
    held, P1 = squeeze(model, at_grasp, plan.target, f1, H1, obj1, P1, cfg.activation,
                       via=plan.original)
    T1 = H1.inverse() @ P1
    c1 = detect_contacts(model, held, T1, obj1, cfg.activation)
    if not c1:
        return TrialOutcome(False, "grasp_1", "no_contacts")
    ok, _ = wrench_resistible(c1, cfg.mass(obj1), H1.rotation.T @ down, cfg, center=T1.translation)
    if not ok:
        return TrialOutcome(False, "grasp_1", "wrench_infeasible", "lift")

    # 3: object 1 must survive reorientation to the side-grasp wrist pose
    robust, margins = rotation_robustness(model, held, T1, obj1, cfg, contacts=c1)
    if not robust:
        return TrialOutcome(False, "reorient", "wrench_infeasible", DIRECTIONS[int(np.argmin(margins))])

    # 4: approach object 2 carrying object 1
    at_grasp2 = held.copy()
    for f in f2:
        idx = model.finger_joint_idx[f]
        at_grasp2[idx] = plan.pre_grasp[idx]
    travel2 = open_theta(model, held, f2)
    ok, P2 = push_approach(model, travel2, at_grasp2, H2, obj2, P2, [], cfg.activation, scene.table)
    if not ok:
        return TrialOutcome(False, "approach_2", "approach_collision")
    for pose in approach_poses(H2):
        if not _held_object_clear(obj1, pose @ T1, [(obj2, P2)], scene.table, cfg.activation):
            return TrialOutcome(False, "approach_2", "approach_collision")

    # 5: squeeze object 2 and lift both
    final, P2 = squeeze(model, at_grasp2, plan.target, f2, H2, obj2, P2, cfg.activation,
                        via=plan.original)
    T2 = H2.inverse() @ P2
    g_hand = H2.rotation.T @ down
    for obj, T in ((obj2, T2), (obj1, T1)):
        cs = detect_contacts(model, final, T, obj, cfg.activation)
        if not cs:
            return TrialOutcome(False, "lift", "no_contacts")
        ok, _ = wrench_resistible(cs, cfg.mass(obj), g_hand, cfg, center=T.translation)
        if not ok:
            return TrialOutcome(False, "lift", "wrench_infeasible", "lift")
    return TrialOutcome(True)
