"""Combine a pinch grasp and a side grasp into one two-object hand configuration."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .energy import EnergyBreakdown, EnergyWeights, finger_energy, self_penetration
from .geometry import ObjectModel, sdf
from .hand_model import HandModel
from .spatial import Pose
from .validation import hand_penetration

log = logging.getLogger(__name__)


class MergeError(ValueError):
    """Raised for style mismatches and incompatible finger usage."""


@dataclass
class MultiGraspRecord:
    theta: np.ndarray
    T1: Pose  # pinch object in the hand frame
    T2: Pose  # side object in the hand frame
    object_ids: tuple[str, str]
    source_ids: tuple[str, str]
    assignments: tuple[list[int], list[int]]
    energies: tuple[EnergyBreakdown, EnergyBreakdown]
    clearance: float
    inherited: dict[str, str] = field(default_factory=dict)  # finger -> "pinch" | "side"
    id: str = ""

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.object_ids = tuple(self.object_ids)
        self.source_ids = tuple(self.source_ids)
        self.assignments = tuple([int(a) for a in x] for x in self.assignments)
        self.energies = tuple(self.energies)
        if not self.id:
            self.id = f"{self.source_ids[0]}+{self.source_ids[1]}"

    def to_json(self) -> dict:
        return {
            "kind": "multigrasp", "id": self.id, "theta": self.theta.tolist(),
            "T1": self.T1.to_json(), "T2": self.T2.to_json(),
            "object_ids": list(self.object_ids), "source_ids": list(self.source_ids),
            "assignments": [list(a) for a in self.assignments],
            "energies": [e.to_json() for e in self.energies],
            "clearance": float(self.clearance), "inherited": dict(self.inherited),
        }

    @classmethod
    def from_json(cls, d: dict) -> "MultiGraspRecord":
        return cls(theta=np.array(d["theta"], float), T1=Pose.from_json(d["T1"]),
                   T2=Pose.from_json(d["T2"]), object_ids=d["object_ids"],
                   source_ids=d["source_ids"], assignments=d["assignments"],
                   energies=tuple(EnergyBreakdown.from_json(e) for e in d["energies"]),
                   clearance=d["clearance"], inherited=d.get("inherited", {}), id=d["id"])


@dataclass
class Rejection:
    reason: str  # object_overlap | self_penetration | hand_object_overlap | table_collision
    clearance: float
    detail: float = 0.0


def serving_fingers(model: HandModel, assignment) -> set[str]:
    """Fingers (including 'palm') carrying at least one assigned contact."""
    return model.candidate_fingers(assignment)


def _check_styles(g_pinch, g_side):
    if g_pinch.style != "pinch" or g_side.style != "side":
        raise MergeError(f"expected (pinch, side) records, got ({g_pinch.style}, {g_side.style})")


def compatible(model: HandModel, g_pinch, g_side) -> bool:
    """True iff the two grasps touch disjoint fingers and joints."""
    _check_styles(g_pinch, g_side)
    f1 = serving_fingers(model, g_pinch.assignment)
    f2 = serving_fingers(model, g_side.assignment)
    if f1 & f2:
        return False
    j1 = set(model.fingers_joints(sorted(f1)).tolist())
    j2 = set(model.fingers_joints(sorted(f2)).tolist())
    return not (j1 & j2)


def object_clearance(obj1: ObjectModel, T1: Pose, obj2: ObjectModel, T2: Pose) -> float:
    """Smallest signed distance between the two objects' surface samples.

    Each object's samples are tested against the other's SDF, so the result
    is negative as soon as either surface dips into the other solid.
    """
    rel12 = T1.inverse() @ T2  # obj2 frame -> obj1 frame
    d12 = sdf(obj1, rel12.apply(obj2.surface_points)).value.min()
    d21 = sdf(obj2, rel12.inverse().apply(obj1.surface_points)).value.min()
    return float(min(d12, d21))


def _cross_penetration(model: HandModel, theta, fingers, obj: ObjectModel, T: Pose) -> float:
    """Deepest penetration of spheres on ``fingers`` into ``obj``."""
    on = np.array([model.link_finger(model.links[li]) in fingers for li in model.sphere_links])
    if not on.any():
        return 0.0
    xs = model.sphere_world(model.fk(np.asarray(theta, float)[None]))[0, on]
    q = T.inverse().apply(xs)
    return float(np.max(np.maximum(model.sphere_radii[on] - sdf(obj, q).value, 0.0)))


def _table_clear(model, theta, obj1, T1, obj2, T2) -> bool:
    H1 = obj1.canonical_pose @ T1.inverse()
    H2 = obj2.canonical_pose @ T2.inverse()
    for H in (H1, H2):
        if hand_penetration(model, theta, H, [], table=True)[0] > 0:
            return False
    return bool((H2 @ T1).apply(obj1.surface_points)[:, 2].min() >= 0.0)


def merge(model: HandModel, g_pinch, g_side, objects: dict, rng: np.random.Generator,
          weights: EnergyWeights | None = None, cross_tolerance: float = 2e-3):
    """Assemble a two-object configuration, or return a :class:`Rejection`.

    Joints of fingers serving either grasp come from that grasp; any other
    finger copies its joints from a uniformly chosen source. Besides
    object overlap and self-penetration, the merge is rejected when a
    finger serving one object sinks more than ``cross_tolerance`` into the
    other object, or when the merged hand touches the table at either
    grasp's wrist pose (objects at their canonical poses), or the held
    pinch object would touch it during the side grasp.
    """
    if not compatible(model, g_pinch, g_side):
        raise MergeError(f"grasps {g_pinch.id} and {g_side.id} share fingers or joints")
    f1 = serving_fingers(model, g_pinch.assignment)
    f2 = serving_fingers(model, g_side.assignment)
    theta = np.empty(model.dof)
    inherited = {}
    for finger in sorted(model.finger_joint_idx):
        idx = model.finger_joint_idx[finger]
        if finger in f1:
            theta[idx] = g_pinch.theta[idx]
        elif finger in f2:
            theta[idx] = g_side.theta[idx]
        else:
            src = "pinch" if rng.random() < 0.5 else "side"
            theta[idx] = (g_pinch if src == "pinch" else g_side).theta[idx]
            inherited[finger] = src
    obj1, obj2 = objects[g_pinch.object_id], objects[g_side.object_id]
    clearance = object_clearance(obj1, g_pinch.T, obj2, g_side.T)
    if clearance < 0:
        return Rejection("object_overlap", clearance)
    fk = model.fk(theta[None])
    e_sp = float(self_penetration(model, model.sphere_world(fk), want_grad=False)[0][0])
    if e_sp > 0:
        return Rejection("self_penetration", clearance, e_sp)
    cross = max(_cross_penetration(model, theta, f1, obj2, g_side.T),
                _cross_penetration(model, theta, f2, obj1, g_pinch.T))
    if cross > cross_tolerance:
        return Rejection("hand_object_overlap", clearance, cross)
    if not _table_clear(model, theta, obj1, g_pinch.T, obj2, g_side.T):
        return Rejection("table_collision", clearance)
    e1 = finger_energy(model, obj1, theta, g_pinch.T, g_pinch.assignment, f1, weights)
    e2 = finger_energy(model, obj2, theta, g_side.T, g_side.assignment, f2, weights)
    return MultiGraspRecord(theta, g_pinch.T, g_side.T, (obj1.id, obj2.id), (g_pinch.id, g_side.id),
                            (g_pinch.assignment, g_side.assignment), (e1, e2), clearance, inherited)


@dataclass
class MergeStats:
    pairs_tried: int = 0
    incompatible: int = 0
    rejected: Counter = field(default_factory=Counter)
    merged: int = 0


def merge_datasets(model: HandModel, pinch_records, side_records, objects: dict, max_pairs: int,
                   rng: np.random.Generator, weights: EnergyWeights | None = None,
                   stats: MergeStats | None = None) -> list[MultiGraspRecord]:
    """Merge up to ``max_pairs`` pairs drawn without replacement from the cross product.

    Pairs are visited in a random order until enough merges succeed or the
    cross product is exhausted.
    """
    stats = stats if stats is not None else MergeStats()
    n1, n2 = len(pinch_records), len(side_records)
    out: list[MultiGraspRecord] = []
    if n1 == 0 or n2 == 0 or max_pairs <= 0:
        return out
    for flat in rng.permutation(n1 * n2):
        if len(out) >= max_pairs:
            break
        gp, gs = pinch_records[flat // n2], side_records[flat % n2]
        stats.pairs_tried += 1
        if not compatible(model, gp, gs):
            stats.incompatible += 1
            continue
        res = merge(model, gp, gs, objects, rng, weights)
        if isinstance(res, Rejection):
            stats.rejected[res.reason] += 1
            continue
        out.append(res)
    stats.merged = len(out)
    log.info("merged %d records (%d tried, %d incompatible, rejections %s)",
             stats.merged, stats.pairs_tried, stats.incompatible, dict(stats.rejected))
    return out
