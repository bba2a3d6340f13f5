"""Parametric multi-fingered hand: kinematic tree, collision spheres, contact candidates.

The hand is described in a JSON file (see ``data/allegro_lite.json`` and
``data/hand_schema.json``). Frames: the palm link is the root; its +z axis is
the palm normal (the approach direction), +x points toward the fingers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .spatial import Pose, axis_angle, rpy_matrix

STYLES = ("pinch", "side")
# fingers allowed to carry candidates of each style
STYLE_FINGERS = {"pinch": ("thumb", "index", "middle"), "side": ("ring", "palm")}


class HandModelError(ValueError):
    pass


class HandParseError(HandModelError):
    """Malformed hand-description file (JSON syntax or missing/invalid field)."""


class HandInvariantError(HandModelError):
    """Structurally valid file that violates a model invariant."""

    def __init__(self, invariant: str, detail: str):
        super().__init__(f"invariant '{invariant}' violated: {detail}")
        self.invariant = invariant


@dataclass(frozen=True)
class Joint:
    name: str
    parent: str
    child: str
    axis: np.ndarray
    origin: Pose
    lower: float
    upper: float


@dataclass(frozen=True)
class ContactCandidate:
    id: int
    style: str
    link: str
    point: np.ndarray
    normal: np.ndarray


@dataclass(frozen=True)
class Fingertip:
    link: str
    point: np.ndarray
    x_axis: np.ndarray


class FKResult:
    """Batched forward kinematics output.

    rot: (B, L, 3, 3), pos: (B, L, 3) link frames in the hand root frame;
    axis, origin: (B, J, 3) joint axes and origins in the hand root frame.
    """

    __slots__ = ("rot", "pos", "axis", "origin")

    def __init__(self, rot, pos, axis, origin):
        self.rot, self.pos, self.axis, self.origin = rot, pos, axis, origin


class HandModel:
    def __init__(self, name, links, joints, fingers, palm_link, fingertips,
                 contact_candidates, collision_spheres, anchors=None, style_fingers=None):
        self.name = name
        self.links: list[str] = list(links)
        self.joints: list[Joint] = list(joints)
        self.fingers: dict[str, list[str]] = {k: list(v) for k, v in fingers.items()}
        self.palm_link = palm_link
        self.fingertips: dict[str, Fingertip] = dict(fingertips)
        self.candidates: list[ContactCandidate] = list(contact_candidates)
        self.collision_spheres: dict[str, list[tuple[np.ndarray, float]]] = {
            k: list(v) for k, v in collision_spheres.items()}
        self.anchors = {k: np.asarray(v, float) for k, v in (anchors or {}).items()}
        self.style_fingers = {k: tuple(v) for k, v in (style_fingers or STYLE_FINGERS).items()}
        self._check_invariants()
        self._build_tables()

    # ------------------------------------------------------------------ setup
    def _check_invariants(self):
        link_set = set(self.links)
        if len(link_set) != len(self.links):
            raise HandInvariantError("unique-links", "duplicate link names")
        if self.palm_link not in link_set:
            raise HandInvariantError("single-root", f"palm link '{self.palm_link}' is not a link")
        children = {}
        for j in self.joints:
            for end in (j.parent, j.child):
                if end not in link_set:
                    raise HandInvariantError("joint-links", f"joint {j.name} references unknown link '{end}'")
            if j.child in children:
                raise HandInvariantError("acyclic-tree", f"link '{j.child}' has two parent joints")
            children[j.child] = j
            if not j.lower < j.upper:
                raise HandInvariantError(
                    "joint-limits", f"joint {j.name}: lower {j.lower} is not < upper {j.upper}")
        roots = [l for l in self.links if l not in children]
        if roots != [self.palm_link]:
            raise HandInvariantError("single-root", f"roots are {roots}, expected ['{self.palm_link}']")
        # every link must reach the root without revisiting
        for l in self.links:
            seen, cur = set(), l
            while cur in children:
                if cur in seen:
                    raise HandInvariantError("acyclic-tree", f"cycle through link '{cur}'")
                seen.add(cur)
                cur = children[cur].parent
        jnames = [j.name for j in self.joints]
        owner = {}
        for f, js in self.fingers.items():
            for jn in js:
                if jn not in jnames:
                    raise HandInvariantError("finger-partition", f"finger {f} lists unknown joint {jn}")
                if jn in owner:
                    raise HandInvariantError("finger-partition", f"joint {jn} in fingers {owner[jn]} and {f}")
                owner[jn] = f
        if set(owner) != set(jnames):
            missing = sorted(set(jnames) - set(owner))
            raise HandInvariantError("finger-partition", f"joints without finger: {missing}")
        self._link_finger = self._compute_link_fingers(children, owner)
        for c in self.candidates:
            if c.link not in link_set:
                raise HandInvariantError("candidate-link", f"candidate {c.id} on unknown link '{c.link}'")
            if abs(np.linalg.norm(c.normal) - 1.0) > 1e-9:
                raise HandInvariantError("candidate-normal", f"candidate {c.id} normal is not unit length")
            if c.style not in STYLES or c.style not in self.style_fingers:
                raise HandInvariantError("candidate-style", f"unknown style '{c.style}'")
            finger = self._link_finger[c.link]
            if finger not in self.style_fingers[c.style]:
                raise HandInvariantError(
                    "style-links", f"{c.style} candidate {c.id} lies on {finger} link '{c.link}'")
        for link in self.collision_spheres:
            if link not in link_set:
                raise HandInvariantError("sphere-link", f"collision spheres on unknown link '{link}'")
        for f, tip in self.fingertips.items():
            if f not in self.fingers or tip.link not in link_set:
                raise HandInvariantError("fingertip", f"fingertip for '{f}' is inconsistent")

    def _compute_link_fingers(self, children, owner):
        out = {}
        for l in self.links:
            cur, finger = l, "palm"
            while cur in children:
                finger = owner[children[cur].name]
                cur = children[cur].parent
            out[l] = finger
        return out

    def _build_tables(self):
        self.link_index = {l: i for i, l in enumerate(self.links)}
        self.joint_index = {j.name: i for i, j in enumerate(self.joints)}
        L, J = len(self.links), len(self.joints)
        parent_joint = {j.child: i for i, j in enumerate(self.joints)}
        # joints ordered so a parent link is placed before its children
        order, placed = [], {self.palm_link}
        pending = list(range(J))
        while pending:
            progressed = False
            for i in list(pending):
                if self.joints[i].parent in placed:
                    order.append(i)
                    placed.add(self.joints[i].child)
                    pending.remove(i)
                    progressed = True
            if not progressed:
                raise HandInvariantError("acyclic-tree", "joints unreachable from the root")
        self._joint_order = order
        self._joint_parent_idx = np.array([self.link_index[j.parent] for j in self.joints])
        self._joint_child_idx = np.array([self.link_index[j.child] for j in self.joints])
        self._joint_origin_R = np.stack([j.origin.rotation for j in self.joints])
        self._joint_origin_t = np.stack([j.origin.translation for j in self.joints])
        self._joint_axis = np.stack([j.axis for j in self.joints])
        # ancestor[j, l]: joint j moves link l
        anc = np.zeros((J, L), dtype=bool)
        for l, name in enumerate(self.links):
            cur = name
            while cur in parent_joint:
                ji = parent_joint[cur]
                anc[ji, l] = True
                cur = self.joints[ji].parent
        self.ancestor = anc
        self.lower = np.array([j.lower for j in self.joints])
        self.upper = np.array([j.upper for j in self.joints])
        # collision spheres
        centers, radii, slinks = [], [], []
        for name in self.links:
            for c, r in self.collision_spheres.get(name, []):
                centers.append(c)
                radii.append(r)
                slinks.append(self.link_index[name])
        self.sphere_centers = np.array(centers, float).reshape(-1, 3)
        self.sphere_radii = np.array(radii, float)
        self.sphere_links = np.array(slinks, int)
        self.sphere_fingers = np.array([self._link_finger[self.links[i]] for i in self.sphere_links])
        self.self_collision_pairs = self._self_collision_pairs()
        # candidates
        self.cand_links = np.array([self.link_index[c.link] for c in self.candidates], int)
        self.cand_points = np.array([c.point for c in self.candidates], float).reshape(-1, 3)
        self.cand_normals = np.array([c.normal for c in self.candidates], float).reshape(-1, 3)
        self.cand_styles = np.array([c.style for c in self.candidates])
        self.finger_joint_idx = {f: np.array([self.joint_index[j] for j in js], int)
                                 for f, js in self.fingers.items()}

    def _sphere_ancestor_link(self, link):
        """Nearest proper ancestor link that carries collision spheres."""
        parent_of = {j.child: j.parent for j in self.joints}
        cur = parent_of.get(link)
        while cur is not None and not self.collision_spheres.get(cur):
            cur = parent_of.get(cur)
        return cur

    def _self_collision_pairs(self):
        adjacent = set()
        for name in self.links:
            anc = self._sphere_ancestor_link(name)
            if anc is not None:
                adjacent.add((self.link_index[name], self.link_index[anc]))
                adjacent.add((self.link_index[anc], self.link_index[name]))
        pairs = []
        n = len(self.sphere_radii)
        for a in range(n):
            for b in range(a + 1, n):
                la, lb = self.sphere_links[a], self.sphere_links[b]
                if la == lb or (la, lb) in adjacent:
                    continue
                pairs.append((a, b))
        return np.array(pairs, int).reshape(-1, 2)

    # ------------------------------------------------------------- properties
    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def joint_names(self) -> list[str]:
        return [j.name for j in self.joints]

    @property
    def mid_range(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def link_finger(self, link: str) -> str:
        """Finger name owning ``link`` ('palm' for the root)."""
        return self._link_finger[link]

    def style_candidates(self, style: str) -> np.ndarray:
        return np.flatnonzero(self.cand_styles == style)

    def candidate_finger(self, cid: int) -> str:
        return self._link_finger[self.candidates[cid].link]

    def candidate_fingers(self, ids) -> set[str]:
        return {self.candidate_finger(int(i)) for i in ids}

    def fingers_joints(self, fingers) -> np.ndarray:
        idx = [self.finger_joint_idx[f] for f in fingers if f in self.finger_joint_idx]
        return np.concatenate(idx) if idx else np.zeros(0, int)

    def clamp(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self._joint_origin_R, self._joint_origin_t, self._joint_axis, self.lower,
                    self.upper, self.sphere_centers, self.sphere_radii, self.cand_points,
                    self.cand_normals):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        h.update(json.dumps([self.links, self.joint_names, self.fingers], sort_keys=True).encode())
        return h.hexdigest()[:16]

    # -------------------------------------------------------------- kinematics
    def fk(self, theta: np.ndarray) -> FKResult:
        """Batched forward kinematics for ``theta`` of shape (B, d)."""
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 2 or theta.shape[1] != self.dof:
            raise ValueError(f"expected joint array of shape (B, {self.dof}), got {theta.shape}")
        B, L, J = theta.shape[0], len(self.links), self.dof
        rot = np.empty((B, L, 3, 3))
        pos = np.empty((B, L, 3))
        root = self.link_index[self.palm_link]
        rot[:, root] = np.eye(3)
        pos[:, root] = 0.0
        axis = np.empty((B, J, 3))
        origin = np.empty((B, J, 3))
        for j in self._joint_order:
            p, c = self._joint_parent_idx[j], self._joint_child_idx[j]
            Rp, tp = rot[:, p], pos[:, p]
            R0 = Rp @ self._joint_origin_R[j]
            o = tp + Rp @ self._joint_origin_t[j]
            Rj = axis_angle(self._joint_axis[j], theta[:, j])
            rot[:, c] = R0 @ Rj
            pos[:, c] = o
            axis[:, j] = R0 @ self._joint_axis[j]
            origin[:, j] = o
        return FKResult(rot, pos, axis, origin)

    @staticmethod
    def points_on_links(fk: FKResult, link_idx: np.ndarray, local: np.ndarray) -> np.ndarray:
        """Hand-frame positions (B, P, 3) of link-local points."""
        R = fk.rot[:, link_idx]
        return (R @ local[:, :, None])[..., 0] + fk.pos[:, link_idx]

    def point_jacobian(self, fk: FKResult, link_idx: np.ndarray, world: np.ndarray) -> np.ndarray:
        """Positional Jacobians (B, P, 3, d) of points rigidly attached to links."""
        A = self.ancestor[:, link_idx].T  # (P, J)
        lever = world[:, :, None, :] - fk.origin[:, None, :, :]  # (B, P, J, 3)
        cols = np.cross(fk.axis[:, None, :, :], lever) * A[None, :, :, None]
        return np.swapaxes(cols, -1, -2)

    def backprop_points(self, fk: FKResult, link_idx: np.ndarray, world: np.ndarray,
                        grad: np.ndarray) -> np.ndarray:
        """Accumulate J^T grad over points: returns (B, d) joint gradient."""
        A = self.ancestor[:, link_idx].astype(float)  # (J, P)
        moment = A @ np.cross(world, grad)
        force = A @ grad
        return np.einsum("bjk,bjk->bj", fk.axis, moment - np.cross(fk.origin, force))

    def sphere_world(self, fk: FKResult) -> np.ndarray:
        return self.points_on_links(fk, self.sphere_links, self.sphere_centers)

    def candidate_world(self, fk: FKResult, ids=None) -> np.ndarray:
        ids = np.arange(len(self.candidates)) if ids is None else np.asarray(ids)
        return self.points_on_links(fk, self.cand_links[ids], self.cand_points[ids])

    def fingertip_frame(self, theta: np.ndarray, finger: str) -> tuple[np.ndarray, np.ndarray]:
        """Position and local x-axis of a fingertip in the hand frame, for a single theta."""
        tip = self.fingertips[finger]
        fk = self.fk(np.asarray(theta, float)[None])
        li = self.link_index[tip.link]
        R, t = fk.rot[0, li], fk.pos[0, li]
        return R @ tip.point + t, R @ tip.x_axis


# ------------------------------------------------------------------ functions

def _field(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise HandParseError(f"{where}: missing field '{key}'")
    return obj[key]


def _vec(value, n, where):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise HandParseError(f"{where}: expected {n} numbers") from None
    if arr.shape != (n,):
        raise HandParseError(f"{where}: expected {n} numbers, got shape {arr.shape}")
    return arr


def hand_model_from_dict(d: dict) -> HandModel:
    links = [_field(l, "name", f"links[{i}]") for i, l in enumerate(_field(d, "links", "root"))]
    joints = []
    for i, j in enumerate(_field(d, "joints", "root")):
        w = f"joints[{i}]"
        axis = _vec(_field(j, "axis", w), 3, f"{w}.axis")
        n = np.linalg.norm(axis)
        if n == 0:
            raise HandParseError(f"{w}.axis: zero vector")
        origin = _field(j, "origin", w)
        lim = _vec(_field(j, "limits", w), 2, f"{w}.limits")
        joints.append(Joint(
            name=_field(j, "name", w), parent=_field(j, "parent", w), child=_field(j, "child", w),
            axis=axis / n,
            origin=Pose(rpy_matrix(_vec(origin.get("rpy", [0, 0, 0]), 3, f"{w}.origin.rpy")),
                        _vec(_field(origin, "xyz", f"{w}.origin"), 3, f"{w}.origin.xyz")),
            lower=float(lim[0]), upper=float(lim[1])))
    cands = []
    cc = _field(d, "contact_candidates", "root")
    for style in STYLES:
        for i, c in enumerate(cc.get(style, [])):
            w = f"contact_candidates.{style}[{i}]"
            cands.append(ContactCandidate(
                id=len(cands), style=style, link=_field(c, "link", w),
                point=_vec(_field(c, "point", w), 3, f"{w}.point"),
                normal=_vec(_field(c, "normal", w), 3, f"{w}.normal")))
    spheres = {}
    for link, lst in _field(d, "collision_spheres", "root").items():
        spheres[link] = [(_vec(_field(s, "center", f"collision_spheres.{link}[{k}]"), 3,
                               f"collision_spheres.{link}[{k}].center"),
                          float(_field(s, "radius", f"collision_spheres.{link}[{k}]")))
                         for k, s in enumerate(lst)]
    tips = {}
    for f, t in d.get("fingertips", {}).items():
        w = f"fingertips.{f}"
        x = _vec(_field(t, "x_axis", w), 3, f"{w}.x_axis")
        tips[f] = Fingertip(_field(t, "link", w), _vec(_field(t, "point", w), 3, f"{w}.point"),
                            x / np.linalg.norm(x))
    return HandModel(
        name=d.get("name", "hand"), links=links, joints=joints,
        fingers=_field(d, "fingers", "root"), palm_link=_field(d, "palm_link", "root"),
        fingertips=tips, contact_candidates=cands, collision_spheres=spheres,
        anchors=d.get("anchors"), style_fingers=d.get("style_fingers"))


def load_hand_model(path=None) -> HandModel:
    """Load a hand description; ``None`` loads the bundled allegro_lite model."""
    if path is None:
        text = resources.files("seqgrasp.data").joinpath("allegro_lite.json").read_text()
        where = "allegro_lite.json"
    else:
        text = Path(path).read_text()
        where = str(path)
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise HandParseError(f"{where}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    return hand_model_from_dict(d)


def forward_kinematics(model: HandModel, theta) -> dict[str, Pose]:
    """Per-link poses in the hand root frame for a single joint vector."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.dof,):
        raise ValueError(f"joint vector has length {theta.size}, hand has {model.dof} DOF")
    fk = model.fk(theta[None])
    return {name: Pose(fk.rot[0, i], fk.pos[0, i]) for i, name in enumerate(model.links)}


def contact_point_jacobian(model: HandModel, theta, candidate: int) -> np.ndarray:
    """3 x d Jacobian of a contact candidate's hand-frame position."""
    if not 0 <= int(candidate) < len(model.candidates):
        raise KeyError(f"unknown contact candidate id {candidate}")
    theta = np.asarray(theta, dtype=float)
    fk = model.fk(theta[None])
    ids = np.array([int(candidate)])
    world = model.candidate_world(fk, ids)
    return model.point_jacobian(fk, model.cand_links[ids], world)[0, 0]
