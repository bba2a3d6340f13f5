"""Single-object grasp synthesis: style-specific initialization, MALA over the
grasp energy with contact resampling, and energy-threshold filtering."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .energy import EnergyBreakdown, EnergyWeights, batch_energy
from .geometry import ObjectModel
from .hand_model import HandModel
from .spatial import Pose, exp_so3, project_rotation

log = logging.getLogger(__name__)

SIDE_YAWS = 8


@dataclass
class SynthesisConfig:
    style: str = "pinch"
    n_candidates: int = 512
    n_contacts: int | None = None  # pinch 3, side 4
    steps: int = 2000
    step_size: float = 1e-4
    temperature: float = 1.0
    # geometric per-step decay, floored at temperature_min; decay 1 disables
    temperature_decay: float = 0.997
    temperature_min: float = 0.01
    # per-block step scale for (joints, translation, rotation); all ones is plain MALA
    precondition: tuple = (20.0, 0.1, 2.0)
    energy_threshold: float = 5.0
    contact_resample_prob: float = 0.1
    seed: int = 0
    batch_size: int = 256
    weights: EnergyWeights = field(default_factory=EnergyWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = EnergyWeights(**self.weights)
        self.precondition = tuple(float(p) for p in self.precondition)
        if self.style not in ("pinch", "side"):
            raise ValueError(f"unknown style '{self.style}'")
        if self.n_contacts is None:
            self.n_contacts = 3 if self.style == "pinch" else 4
        if self.n_candidates < 1 or self.steps < 1:
            raise ValueError("n_candidates and steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0.0 <= self.contact_resample_prob <= 1.0:
            raise ValueError("contact_resample_prob must lie in [0, 1]")
        if self.temperature <= 0 or not 0 < self.temperature_decay <= 1:
            raise ValueError("temperature must be positive and decay in (0, 1]")
        if self.temperature_decay < 1 and self.temperature_min <= 0:
            raise ValueError("an annealed schedule needs temperature_min > 0")
        if min(self.precondition) <= 0:
            raise ValueError("precondition scales must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["precondition"] = list(self.precondition)
        return d


@dataclass
class GraspRecord:
    style: str
    object_id: str
    theta: np.ndarray
    T: Pose  # object pose in the hand frame
    assignment: list[int]
    energy: EnergyBreakdown
    validation: object | None = None
    seed: int = 0
    index: int = 0
    id: str = ""

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.assignment = [int(a) for a in self.assignment]
        if not self.id:
            self.id = f"{self.object_id}/{self.style}/{self.seed}/{self.index}"

    def to_json(self) -> dict:
        return {
            "kind": "grasp", "id": self.id, "style": self.style, "object_id": self.object_id,
            "theta": self.theta.tolist(), "T": self.T.to_json(), "assignment": self.assignment,
            "energy": self.energy.to_json(),
            "validation": None if self.validation is None else self.validation.to_json(),
            "seed": self.seed, "index": self.index,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GraspRecord":
        from .validation import ValidationReport
        v = d.get("validation")
        return cls(style=d["style"], object_id=d["object_id"], theta=np.array(d["theta"]),
                   T=Pose.from_json(d["T"]), assignment=d["assignment"],
                   energy=EnergyBreakdown.from_json(d["energy"]),
                   validation=None if v is None else ValidationReport.from_json(v),
                   seed=d.get("seed", 0), index=d.get("index", 0), id=d["id"])


# ------------------------------------------------------------------ initialization

def fibonacci_cap(n: int, max_polar: float) -> np.ndarray:
    """n roughly uniform unit vectors within ``max_polar`` of +z."""
    i = np.arange(n) + 0.5
    cos_p = 1.0 - (1.0 - np.cos(max_polar)) * i / n
    phi = np.pi * (1.0 + 5 ** 0.5) * i
    s = np.sqrt(1.0 - cos_p**2)
    return np.stack([s * np.cos(phi), s * np.sin(phi), cos_p], axis=1)


def _frame_from_zy(z, y_hint):
    z = z / np.linalg.norm(z)
    x = np.cross(y_hint, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def hand_world_pose(obj: ObjectModel, T: Pose) -> Pose:
    """World pose of the hand given the object's canonical pose and T (object in hand)."""
    return obj.canonical_pose @ T.inverse()


def init_candidate(model: HandModel, obj: ObjectModel, style: str, rng: np.random.Generator,
                   n_contacts: int | None = None, cap_size: int = 64):
    """Initial (theta, T, assignment) for one chain.

    Pinch: palm facing the object from a point on a Fibonacci cap of radius
    bounding_radius + 8 cm, fingers at mid-range. Side: palm vertical beside
    the object at ring-finger height, one of eight yaw poses plus noise.
    """
    Po = obj.canonical_pose
    center = Po.translation
    theta = model.mid_range.copy()
    if style == "pinch":
        anchor = model.anchors.get("pinch", np.zeros(3))
        r0 = obj.bounding_radius + 0.08
        cap = fibonacci_cap(cap_size, np.deg2rad(40.0))
        u = cap[rng.integers(cap_size)]
        yaw = rng.uniform(0, 2 * np.pi)
        x_hint = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        Rh = _frame_from_zy(-u, np.cross(-u, x_hint))
        p_anchor = center + r0 * u
    elif style == "side":
        anchor = model.anchors.get("side", np.zeros(3))
        k = rng.integers(SIDE_YAWS)
        yaw = 2 * np.pi * k / SIDE_YAWS
        u = np.array([np.cos(yaw), np.sin(yaw), 0.0])  # palm normal, toward the object
        Rh = _frame_from_zy(u, np.array([0.0, 0.0, 1.0]))
        Rh = exp_so3(rng.uniform(-0.15, 0.15, 3)) @ Rh
        reach = _horizontal_extent(obj, u) + 0.02
        p_anchor = np.array([center[0], center[1], 0.0]) - reach * u
        p_anchor[2] = _height(obj) * 0.5
        p_anchor = p_anchor + rng.uniform(-0.02, 0.02, 3)
        ring = model.finger_joint_idx.get("ring")
        if ring is not None:
            theta[ring[1:]] = 0.1
    else:
        raise ValueError(f"unknown style '{style}'")
    hand = Pose(Rh, p_anchor - Rh @ anchor)
    T = hand.inverse() @ Po
    pool = model.style_candidates(style)
    n = n_contacts or (3 if style == "pinch" else 4)
    assignment = rng.choice(pool, size=min(n, len(pool)), replace=False)
    return theta, T, np.sort(assignment)


def _height(obj: ObjectModel) -> float:
    pts = obj.canonical_pose.apply(obj.surface_points)
    return float(pts[:, 2].max())


def _horizontal_extent(obj: ObjectModel, u: np.ndarray) -> float:
    pts = obj.surface_points @ obj.canonical_pose.rotation.T
    return float(np.max(-(pts @ u)))


# ------------------------------------------------------------------------ MALA

def mala_log_ratio(E, E_new, delta, g, g_new, tau, temperature, scale=1.0):
    """log of the MALA acceptance ratio for a move ``delta`` (batched over rows).

    ``scale`` is a diagonal preconditioner applied to both drift and noise.
    """
    fwd = delta + tau * scale * g
    bwd = -delta + tau * scale * g_new
    quad = (np.sum(fwd * fwd / scale, axis=-1) - np.sum(bwd * bwd / scale, axis=-1))
    return -(E_new - E) / temperature + quad / (4.0 * tau * temperature)


def mala_step(x, energy_fn, grad_fn, tau, temperature, rng, cache=None):
    """One MALA transition for a flat state vector.

    Returns (new_x, accepted). ``cache`` may carry (E(x), grad(x)) to avoid
    recomputation; it is not updated in place.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    x = np.asarray(x, dtype=float)
    E, g = cache if cache is not None else (energy_fn(x), grad_fn(x))
    xi = rng.standard_normal(x.shape)
    delta = -tau * g + np.sqrt(2.0 * tau * temperature) * xi
    x_new = x + delta
    E_new, g_new = energy_fn(x_new), grad_fn(x_new)
    log_a = mala_log_ratio(E, E_new, delta, g, g_new, tau, temperature)
    if np.log(rng.random()) < log_a:
        return x_new, True
    return x, False


def acceptance_probability(E, E_new, temperature):
    """Metropolis acceptance for a symmetric move; nondecreasing in temperature when E_new >= E."""
    return float(min(1.0, np.exp(-(E_new - E) / temperature)))


def resample_contacts(assignment, candidates, rng, prob, energy_fn=None, temperature=1.0):
    """Swap one assigned contact for an unused candidate with probability ``prob``.

    If ``energy_fn`` is given the swap is Metropolis-accepted against it.
    """
    assignment = list(assignment)
    if rng.random() >= prob:
        return assignment
    unused = [c for c in candidates if c not in assignment]
    if not unused or not assignment:
        return assignment
    slot = int(rng.integers(len(assignment)))
    proposal = list(assignment)
    proposal[slot] = int(unused[int(rng.integers(len(unused)))])
    if energy_fn is None:
        return proposal
    log_a = -(energy_fn(proposal) - energy_fn(assignment)) / temperature
    return proposal if np.log(rng.random()) < log_a else assignment


class _Chains:
    """Batched chain state with per-chain RNG streams."""

    def __init__(self, model, obj, cfg, indices):
        self.model, self.obj, self.cfg = model, obj, cfg
        self.rngs = [np.random.default_rng([cfg.seed, int(i)]) for i in indices]
        inits = [init_candidate(model, obj, cfg.style, r, cfg.n_contacts) for r in self.rngs]
        self.theta = np.stack([a[0] for a in inits])
        self.R = np.stack([a[1].rotation for a in inits])
        self.t = np.stack([a[1].translation for a in inits])
        self.assign = np.stack([a[2] for a in inits])
        self.pool = model.style_candidates(cfg.style)
        self.accepted = np.zeros(len(indices), int)
        d = model.dof
        p = cfg.precondition
        self.scale = np.concatenate([np.full(d, p[0]), np.full(3, p[1]), np.full(3, p[2])])
        self._eval_all()

    def _energy(self, idx, theta, R, t, assign):
        return batch_energy(self.model, self.obj, theta[idx], R[idx], t[idx], assign[idx],
                            self.cfg.weights)

    def _eval_all(self):
        idx = np.arange(len(self.theta))
        be = self._energy(idx, self.theta, self.R, self.t, self.assign)
        self.E = be.total
        self.g = np.hstack([be.grad_theta, be.grad_v, be.grad_w])

    def step(self, temperature):
        cfg, d = self.cfg, self.model.dof
        B = len(self.theta)
        tau = cfg.step_size
        xi = np.stack([r.standard_normal(d + 6) for r in self.rngs])
        u = np.stack([r.random(4) for r in self.rngs])
        delta = -tau * self.scale * self.g + np.sqrt(2 * tau * temperature * self.scale) * xi
        # joint proposals are clamped into the limits; the ratio uses the clamped move
        th = self.model.clamp(self.theta + delta[:, :d])
        delta[:, :d] = th - self.theta
        t = self.t + delta[:, d:d + 3]
        R = exp_so3(delta[:, d + 3:]) @ self.R
        be = batch_energy(self.model, self.obj, th, R, t, self.assign, cfg.weights)
        g_new = np.hstack([be.grad_theta, be.grad_v, be.grad_w])
        log_a = mala_log_ratio(self.E, be.total, delta, self.g, g_new, tau, temperature, self.scale)
        acc = np.log(np.maximum(u[:, 0], 1e-300)) < np.nan_to_num(log_a, nan=-np.inf)
        if acc.any():
            self.theta[acc] = th[acc]
            self.t[acc] = t[acc]
            self.R[acc] = project_rotation(R[acc])
            self.E[acc] = be.total[acc]
            self.g[acc] = g_new[acc]
            self.accepted += acc
        self._resample(u, temperature)

    def _resample(self, u, temperature):
        cfg = self.cfg
        n = self.assign.shape[1]
        pick = np.flatnonzero(u[:, 1] < cfg.contact_resample_prob)
        if len(pick) == 0 or len(self.pool) <= n:
            return
        prop = self.assign.copy()
        for b in pick:
            unused = np.setdiff1d(self.pool, self.assign[b])
            slot = min(int(u[b, 2] * n), n - 1)
            prop[b, slot] = unused[min(int(u[b, 3] * len(unused)), len(unused) - 1)]
        be = self._energy(pick, self.theta, self.R, self.t, prop)
        # independent stream for the swap acceptance keeps the main draws aligned
        acc_u = np.array([self.rngs[b].random() for b in pick])
        ok = np.log(np.maximum(acc_u, 1e-300)) < -(be.total - self.E[pick]) / temperature
        keep = pick[ok]
        if len(keep):
            self.assign[keep] = np.sort(prop[keep], axis=1)
            self.E[keep] = be.total[ok]
            self.g[keep] = np.hstack([be.grad_theta, be.grad_v, be.grad_w])[ok]


def temperature_schedule(cfg: SynthesisConfig, k: int) -> float:
    return max(cfg.temperature * cfg.temperature_decay**k, cfg.temperature_min)


@dataclass
class SynthesisResult:
    records: list
    n_candidates: int
    acceptance_rate: float

    @property
    def yield_fraction(self) -> float:
        return len(self.records) / self.n_candidates if self.n_candidates else 0.0


def synthesize(model: HandModel, obj: ObjectModel, config: SynthesisConfig, progress=None) -> SynthesisResult:
    """Run ``n_candidates`` independent chains and keep those under the energy threshold."""
    cfg = config
    records, acc_total = [], 0
    for start in range(0, cfg.n_candidates, cfg.batch_size):
        idx = np.arange(start, min(start + cfg.batch_size, cfg.n_candidates))
        chains = _Chains(model, obj, cfg, idx)
        for k in range(cfg.steps):
            chains.step(temperature_schedule(cfg, k))
            if progress is not None and (k + 1) % 250 == 0:
                progress(start, k + 1, chains)
        acc_total += int(chains.accepted.sum())
        # re-evaluate from scratch before filtering
        be = batch_energy(model, obj, chains.theta, chains.R, chains.t, chains.assign,
                          cfg.weights, want_grad=False)
        keep = (be.total <= cfg.energy_threshold) & (be.e_p_table < 1e-6)
        for j in np.flatnonzero(keep):
            records.append(GraspRecord(
                style=cfg.style, object_id=obj.id, theta=chains.theta[j].copy(),
                T=Pose(chains.R[j].copy(), chains.t[j].copy()), assignment=chains.assign[j].tolist(),
                energy=be.breakdown(j), seed=cfg.seed, index=int(idx[j])))
    rate = acc_total / (cfg.n_candidates * cfg.steps)
    log.info("synthesized %d/%d %s grasps for %s", len(records), cfg.n_candidates, cfg.style, obj.id)
    return SynthesisResult(records, cfg.n_candidates, rate)
