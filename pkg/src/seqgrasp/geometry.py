"""Object geometry: analytic signed distance fields, surface sampling, object library.

Every object lives in its own frame with the origin at the centroid. Shapes
are axis-aligned with the object frame; cylinders and capsules use +z as the
symmetry axis.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .spatial import Pose

DEFAULT_DENSITY = 500.0  # kg/m^3

SHAPES = ("sphere", "box", "cylinder", "capsule", "mesh")


@dataclass
class SdfResult:
    value: np.ndarray
    gradient: np.ndarray
    hessian: np.ndarray | None = None


@dataclass
class ObjectModel:
    """A rigid object.

    ``params`` by shape: sphere ``r``; box ``hx, hy, hz`` (half extents);
    cylinder ``r, h`` (full height); capsule ``r, h`` (segment length, caps
    excluded); mesh ``points`` and ``normals`` arrays of a convex surface.
    """

    id: str
    shape: str
    params: dict
    density: float = DEFAULT_DENSITY
    canonical_pose: Pose = field(default_factory=Pose)
    surface_points: np.ndarray | None = None
    surface_normals: np.ndarray | None = None
    _kdtree: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape '{self.shape}'")
        if not self.density > 0:
            raise ValueError("density must be positive")
        if self.shape == "mesh":
            pts = np.asarray(self.params["points"], float)
            nrm = np.asarray(self.params["normals"], float)
            self.params = {"points": pts, "normals": nrm / np.linalg.norm(nrm, axis=1, keepdims=True)}
        else:
            self.params = {k: float(v) for k, v in self.params.items()}
        if self.surface_points is None:
            self.surface_points, self.surface_normals = sample_surface(self, 256, seed=0)

    # ---------------------------------------------------------------- derived
    @property
    def volume(self) -> float:
        p = self.params
        if self.shape == "sphere":
            return 4.0 / 3.0 * np.pi * p["r"] ** 3
        if self.shape == "box":
            return 8.0 * p["hx"] * p["hy"] * p["hz"]
        if self.shape == "cylinder":
            return np.pi * p["r"] ** 2 * p["h"]
        if self.shape == "capsule":
            return np.pi * p["r"] ** 2 * p["h"] + 4.0 / 3.0 * np.pi * p["r"] ** 3
        from scipy.spatial import ConvexHull
        return float(ConvexHull(p["points"]).volume)

    @property
    def mass(self) -> float:
        return self.density * self.volume

    @property
    def bounding_radius(self) -> float:
        p = self.params
        if self.shape == "sphere":
            return p["r"]
        if self.shape == "box":
            return float(np.linalg.norm([p["hx"], p["hy"], p["hz"]]))
        if self.shape == "cylinder":
            return float(np.hypot(p["r"], 0.5 * p["h"]))
        if self.shape == "capsule":
            return 0.5 * p["h"] + p["r"]
        return float(np.linalg.norm(p["points"], axis=1).max())

    def sdf(self, points, hessian: bool = False) -> SdfResult:
        return sdf(self, points, hessian=hessian)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(object_to_json(self), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------- SDFs

def _safe_unit(v, eps=1e-12):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, eps), n[..., 0]


def _sdf_sphere(q, r, want_h):
    g, n = _safe_unit(q)
    g = np.where(n[..., None] < 1e-12, np.array([1.0, 0, 0]), g)
    H = None
    if want_h:
        H = (np.eye(3) - g[..., :, None] * g[..., None, :]) / np.maximum(n, 1e-9)[..., None, None]
    return n - r, g, H


def _sdf_box(q, h, want_h):
    a = np.abs(q) - h
    s = np.where(q >= 0, 1.0, -1.0)
    o = np.maximum(a, 0.0)
    on = np.linalg.norm(o, axis=-1)
    outside = on > 0
    inside_val = a.max(axis=-1)
    k = a.argmax(axis=-1)
    g_in = np.zeros_like(q)
    np.put_along_axis(g_in, k[..., None], np.take_along_axis(s, k[..., None], -1), -1)
    g_out = s * o / np.maximum(on, 1e-300)[..., None]
    value = np.where(outside, on, inside_val)
    grad = np.where(outside[..., None], g_out, g_in)
    H = None
    if want_h:
        act = (a > 0).astype(float)
        P = act[..., :, None] * act[..., None, :] * np.eye(3)
        H = (P - grad[..., :, None] * grad[..., None, :]) / np.maximum(on, 1e-9)[..., None, None]
        H = np.where(outside[..., None, None], H, 0.0)
    return value, grad, H


def _sdf_cylinder(q, r, hh, want_h):
    rho = np.hypot(q[..., 0], q[..., 1])
    rho_s = np.maximum(rho, 1e-12)
    rhat = np.zeros_like(q)
    rhat[..., 0] = np.where(rho > 1e-12, q[..., 0] / rho_s, 1.0)
    rhat[..., 1] = np.where(rho > 1e-12, q[..., 1] / rho_s, 0.0)
    sz = np.where(q[..., 2] >= 0, 1.0, -1.0)
    zhat = np.zeros_like(q)
    zhat[..., 2] = sz
    a1, a2 = rho - r, np.abs(q[..., 2]) - hh
    rim = (a1 > 0) & (a2 > 0)
    dr = np.sqrt(np.maximum(a1, 0) ** 2 + np.maximum(a2, 0) ** 2)
    side = (a1 > 0) & (a2 <= 0)
    cap = (a1 <= 0) & (a2 > 0)
    inside = (a1 <= 0) & (a2 <= 0)
    in_side = inside & (a1 > a2)
    value = np.select([rim, side, cap], [dr, a1, a2], np.maximum(a1, a2))
    dr_s = np.maximum(dr, 1e-300)
    g_rim = (a1 / dr_s)[..., None] * rhat + (a2 / dr_s)[..., None] * zhat
    use_rho = side | in_side
    grad = np.where(rim[..., None], g_rim, np.where(use_rho[..., None], rhat, zhat))
    H = None
    if want_h:
        P = np.diag([1.0, 1.0, 0.0])
        hr = (P - rhat[..., :, None] * rhat[..., None, :]) / np.maximum(rho, 1e-9)[..., None, None]
        d3 = np.maximum(dr, 1e-9) ** 3
        outer = lambda u, v: u[..., :, None] * v[..., None, :]
        f_rr = a2**2 / d3
        f_zz = a1**2 / d3
        f_rz = -a1 * a2 / d3  # zhat already carries sign(z)
        H_rim = (f_rr[..., None, None] * outer(rhat, rhat) + f_zz[..., None, None] * outer(zhat, zhat)
                 + f_rz[..., None, None] * (outer(rhat, zhat) + outer(zhat, rhat))
                 + (a1 / np.maximum(dr, 1e-9))[..., None, None] * hr)
        H = np.where(rim[..., None, None], H_rim, np.where(use_rho[..., None, None], hr, 0.0))
    return value, grad, H


def _sdf_capsule(q, r, hh, want_h):
    c = np.zeros_like(q)
    c[..., 2] = np.clip(q[..., 2], -hh, hh)
    d = q - c
    g, n = _safe_unit(d)
    g = np.where(n[..., None] < 1e-12, np.array([1.0, 0, 0]), g)
    H = None
    if want_h:
        body = (np.abs(q[..., 2]) < hh)[..., None, None]
        base = np.where(body, np.diag([1.0, 1.0, 0.0]), np.eye(3))
        H = (base - g[..., :, None] * g[..., None, :]) / np.maximum(n, 1e-9)[..., None, None]
    return n - r, g, H


def _sdf_mesh(q, tree, pts, nrm, want_h):
    flat = q.reshape(-1, 3)
    _, k = tree.query(flat)
    n = nrm[k]
    value = np.einsum("ij,ij->i", flat - pts[k], n)
    H = np.zeros(flat.shape + (3,)) if want_h else None
    out_h = None if H is None else H.reshape(q.shape + (3,))
    return value.reshape(q.shape[:-1]), n.reshape(q.shape), out_h


def sdf(obj: ObjectModel, points, hessian: bool = False) -> SdfResult:
    """Signed distance (negative inside) and its gradient at object-frame points.

    Works on any (..., 3) array. Analytic shapes are exact; the mesh path is a
    nearest-sample tangent-plane approximation.
    """
    q = np.asarray(points, dtype=float)
    p = obj.params
    if obj.shape == "sphere":
        v, g, H = _sdf_sphere(q, p["r"], hessian)
    elif obj.shape == "box":
        v, g, H = _sdf_box(q, np.array([p["hx"], p["hy"], p["hz"]]), hessian)
    elif obj.shape == "cylinder":
        v, g, H = _sdf_cylinder(q, p["r"], 0.5 * p["h"], hessian)
    elif obj.shape == "capsule":
        v, g, H = _sdf_capsule(q, p["r"], 0.5 * p["h"], hessian)
    else:
        if obj._kdtree is None:
            from scipy.spatial import cKDTree
            obj._kdtree = cKDTree(p["points"])
        v, g, H = _sdf_mesh(q, obj._kdtree, p["points"], p["normals"], hessian)
    return SdfResult(v, g, H)


def table_sdf(p) -> np.ndarray:
    """Signed distance to the tabletop half-space z >= 0 (world frame)."""
    return np.asarray(p, dtype=float)[..., 2]


# ------------------------------------------------------------------ sampling

def _unit_disk(rng, n):
    rad = np.sqrt(rng.random(n))
    ang = 2 * np.pi * rng.random(n)
    return rad * np.cos(ang), rad * np.sin(ang)


def sample_surface(obj: ObjectModel, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted surface samples (points, outward normals) in the object frame."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    p = obj.params
    if obj.shape == "sphere":
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return p["r"] * v, v
    if obj.shape == "box":
        h = np.array([p["hx"], p["hy"], p["hz"]])
        areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-1, 1, (n, 3)) * h
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts = u.copy()
        pts[np.arange(n), axis] = sign * h[axis]
        nrm = np.zeros((n, 3))
        nrm[np.arange(n), axis] = sign
        return pts, nrm
    if obj.shape in ("cylinder", "capsule"):
        r, hh = p["r"], 0.5 * p["h"]
        body = 2 * np.pi * r * 2 * hh
        ends = 2 * np.pi * r**2 if obj.shape == "cylinder" else 4 * np.pi * r**2
        on_body = rng.random(n) < body / (body + ends)
        ang = 2 * np.pi * rng.random(n)
        pts = np.stack([r * np.cos(ang), r * np.sin(ang), rng.uniform(-hh, hh, n)], axis=1)
        nrm = np.stack([np.cos(ang), np.sin(ang), np.zeros(n)], axis=1)
        m = ~on_body
        k = int(m.sum())
        if obj.shape == "cylinder":
            x, y = _unit_disk(rng, k)
            s = np.where(rng.random(k) < 0.5, 1.0, -1.0)
            pts[m] = np.stack([r * x, r * y, s * hh], axis=1)
            nrm[m] = np.stack([np.zeros(k), np.zeros(k), s], axis=1)
        else:
            v = rng.standard_normal((k, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            pts[m] = r * v + np.outer(np.sign(v[:, 2]) * hh, [0, 0, 1])
            nrm[m] = v
        return pts, nrm
    idx = rng.choice(len(p["points"]), size=n, replace=len(p["points"]) < n)
    return p["points"][idx].copy(), p["normals"][idx].copy()


# ------------------------------------------------------------------ library

def resting_pose(shape: str, params: dict) -> Pose:
    """Upright pose with the lowest surface point on the table plane."""
    if shape == "sphere":
        z = params["r"]
    elif shape == "box":
        z = params["hz"]
    elif shape == "cylinder":
        z = 0.5 * params["h"]
    elif shape == "capsule":
        z = 0.5 * params["h"] + params["r"]
    else:
        z = -np.asarray(params["points"])[:, 2].min()
    return Pose(np.eye(3), np.array([0.0, 0.0, z]))


def object_from_json(d: dict) -> ObjectModel:
    shape = d["shape"]
    params = dict(d["params"])
    pose = Pose.from_json(d["canonical_pose"]) if "canonical_pose" in d else resting_pose(shape, params)
    return ObjectModel(id=d["id"], shape=shape, params=params,
                       density=float(d.get("density", DEFAULT_DENSITY)), canonical_pose=pose)


def object_to_json(obj: ObjectModel) -> dict:
    params = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in obj.params.items()}
    return {"id": obj.id, "shape": obj.shape, "params": params, "density": obj.density,
            "canonical_pose": obj.canonical_pose.to_json()}


def load_object_library(path=None) -> dict[str, ObjectModel]:
    """Objects keyed by id; ``None`` loads the bundled primitive library."""
    if path is None:
        text = resources.files("seqgrasp.data").joinpath("objects.json").read_text()
    else:
        text = Path(path).read_text()
    objs = [object_from_json(d) for d in json.loads(text)]
    return {o.id: o for o in objs}


def library_fingerprint(objects) -> str:
    h = hashlib.sha256()
    for o in sorted(objects, key=lambda o: o.id):
        h.update(o.fingerprint().encode())
    return h.hexdigest()[:16]


def write_xyz(path, points, normals=None, frame: str = "object"):
    """ASCII point cloud: header comment then one ``x y z [nx ny nz]`` row per point."""
    rows = points if normals is None else np.hstack([points, normals])
    with open(path, "w") as fh:
        fh.write(f"# frame={frame}\n")
        np.savetxt(fh, rows, fmt="%.9g")


def read_xyz(path) -> tuple[np.ndarray, np.ndarray | None, str]:
    frame = "object"
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("#") and "frame=" in first:
        frame = first.split("frame=", 1)[1].strip()
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.shape[1] == 6:
        return data[:, :3], data[:, 3:], frame
    return data[:, :3], None, frame
