"""Conditional DDPM over two-object hand configurations.

The configuration vector stacks joint angles and, for each object, its
translation and the nine entries of its rotation matrix in the hand frame.
The denoiser is a plain MLP fed with the noisy vector, a sinusoidal time
embedding and two max-pooled point-cloud codes. Gradients are written out by
hand and optimized with Adam; everything runs in float64 numpy.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .spatial import Pose, project_rotation

log = logging.getLogger(__name__)

__all__ = ["NoiseSchedule", "ConfigCodec", "Normalizer", "TrainConfig", "DiffusionModel",
           "forward_noise", "reverse_mean", "encode_pointcloud", "init_params", "loss_and_grads",
           "train", "sample_vectors", "sample_configs", "project_rotation", "save_model",
           "load_model", "resample_cloud"]


# --------------------------------------------------------------------- schedule

@dataclass
class NoiseSchedule:
    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.steps)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def _check(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.steps):
            raise ValueError(f"diffusion step must lie in [1, {self.steps}]")
        return t.astype(int) - 1

    def beta(self, t):
        return self.betas[self._check(t)]

    def alpha(self, t):
        return self.alphas[self._check(t)]

    def alpha_bar(self, t):
        return self.alpha_bars[self._check(t)]

    def to_json(self) -> dict:
        return {"steps": self.steps, "beta_start": self.beta_start, "beta_end": self.beta_end}


def forward_noise(x0, t, xi, schedule: NoiseSchedule):
    """Closed-form marginal x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) xi.

    ``t`` is a scalar or one step per row of ``x0``.
    """
    ab = np.asarray(schedule.alpha_bar(t), float)
    if ab.ndim:
        ab = ab[:, None]
    return np.sqrt(ab) * np.asarray(x0, float) + np.sqrt(1.0 - ab) * np.asarray(xi, float)


def reverse_mean(x_t, t, eps_hat, schedule: NoiseSchedule):
    """Posterior mean of x_{t-1} given the predicted noise."""
    b = np.asarray(schedule.beta(t), float)
    a = np.asarray(schedule.alpha(t), float)
    ab = np.asarray(schedule.alpha_bar(t), float)
    if b.ndim:
        b, a, ab = b[:, None], a[:, None], ab[:, None]
    return (np.asarray(x_t, float) - b / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)


# ------------------------------------------------------------ configuration vec

class ConfigCodec:
    """(theta, T1, T2) <-> flat vector of size dof + 24."""

    def __init__(self, dof: int):
        self.dof = int(dof)
        self.dim = self.dof + 24

    def encode(self, theta, T1: Pose, T2: Pose) -> np.ndarray:
        parts = [np.asarray(theta, float)]
        for T in (T1, T2):
            parts += [T.translation, T.rotation.reshape(-1)]
        return np.concatenate(parts)

    def split(self, x):
        x = np.asarray(x, float)
        d = self.dof
        theta = x[..., :d]
        t1, r1 = x[..., d:d + 3], x[..., d + 3:d + 12].reshape(x.shape[:-1] + (3, 3))
        t2, r2 = x[..., d + 12:d + 15], x[..., d + 15:d + 24].reshape(x.shape[:-1] + (3, 3))
        return theta, (t1, r1), (t2, r2)

    def decode(self, x, project: bool = True):
        """Vector -> (theta, T1, T2); rotation blocks snapped to SO(3) unless ``project`` is False."""
        theta, (t1, r1), (t2, r2) = self.split(x)
        if project:
            r1, r2 = project_rotation(r1), project_rotation(r2)
        return theta.copy(), Pose(r1, t1), Pose(r2, t2)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X, floor: float = 1e-6) -> "Normalizer":
        X = np.asarray(X, float)
        std = X.std(axis=0)
        # constant dimensions keep unit scale
        std = np.where(std < floor, 1.0, std)
        return cls(X.mean(axis=0), std)

    def apply(self, X):
        return (np.asarray(X, float) - self.mean) / self.std

    def invert(self, Z):
        return np.asarray(Z, float) * self.std + self.mean


# ------------------------------------------------------------------- network

def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def _silu_grad(z, s):
    return s * (1.0 + z * (1.0 - s))


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer steps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, float))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None]
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        out = np.concatenate([out, np.zeros((len(t), 1))], axis=1)
    return out


@dataclass
class NetShape:
    dim: int
    hidden: int = 512
    layers: int = 3
    time_dim: int = 64
    enc_hidden: int = 64
    enc_out: int = 128
    n_objects: int = 2

    @property
    def cond_dim(self) -> int:
        return self.enc_out * self.n_objects


def init_params(shape: NetShape, rng: np.random.Generator) -> dict:
    """He-style initialization; the output layer starts small."""
    p = {}

    def lin(name, n_in, n_out, scale=1.0):
        p[name + "_W"] = rng.standard_normal((n_in, n_out)) * scale * np.sqrt(2.0 / n_in)
        p[name + "_b"] = np.zeros(n_out)

    lin("enc0", 3, shape.enc_hidden)
    lin("enc1", shape.enc_hidden, shape.enc_out)
    n_in = shape.dim + shape.time_dim + shape.cond_dim
    for i in range(shape.layers):
        lin(f"den{i}", n_in if i == 0 else shape.hidden, shape.hidden)
    lin("out", shape.hidden, shape.dim, scale=0.1)
    return p


def _encode_clouds(params, clouds):
    """clouds (K, n, 3) -> codes (K, enc_out) plus the backward cache."""
    z0 = clouds @ params["enc0_W"] + params["enc0_b"]
    h0, s0 = _silu(z0)
    z1 = h0 @ params["enc1_W"] + params["enc1_b"]
    arg = np.argmax(z1, axis=1)  # (K, enc_out)
    code = np.take_along_axis(z1, arg[:, None, :], axis=1)[:, 0]
    return code, (clouds, z0, h0, s0, arg, z1.shape)


def _encode_backward(params, cache, g_code, grads):
    clouds, z0, h0, s0, arg, shp = cache
    K, n, m = shp
    g_z1 = np.zeros(shp)
    np.put_along_axis(g_z1, arg[:, None, :], g_code[:, None, :], axis=1)
    grads["enc1_W"] += np.einsum("kni,knj->ij", h0, g_z1)
    grads["enc1_b"] += g_z1.sum(axis=(0, 1))
    g_h0 = g_z1 @ params["enc1_W"].T
    g_z0 = g_h0 * _silu_grad(z0, s0)
    grads["enc0_W"] += np.einsum("kni,knj->ij", clouds, g_z0)
    grads["enc0_b"] += g_z0.sum(axis=(0, 1))


def encode_pointcloud(points, params: dict) -> np.ndarray:
    """Permutation-invariant code of one cloud: per-point MLP then max pool."""
    pts = np.asarray(points, float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError("point cloud must be a nonempty (n, 3) array")
    return _encode_clouds(params, pts[None])[0][0]


def _denoiser_forward(params, shape: NetShape, x, t, cond):
    inp = np.concatenate([x, time_embedding(t, shape.time_dim), cond], axis=1)
    h = inp
    cache = []
    for i in range(shape.layers):
        z = h @ params[f"den{i}_W"] + params[f"den{i}_b"]
        a, s = _silu(z)
        cache.append((h, z, s))
        h = a
    out = h @ params["out_W"] + params["out_b"]
    return out, (cache, h)


def _denoiser_backward(params, shape: NetShape, fcache, g_out, grads):
    cache, h = fcache
    grads["out_W"] += h.T @ g_out
    grads["out_b"] += g_out.sum(axis=0)
    g = g_out @ params["out_W"].T
    for i in reversed(range(shape.layers)):
        h_in, z, s = cache[i]
        gz = g * _silu_grad(z, s)
        grads[f"den{i}_W"] += h_in.T @ gz
        grads[f"den{i}_b"] += gz.sum(axis=0)
        g = gz @ params[f"den{i}_W"].T
    return g  # gradient w.r.t. the concatenated input


def predict_noise(params, shape: NetShape, x_t, t, clouds, pair_index):
    """eps_hat for rows of ``x_t``; ``pair_index`` (B, n_objects) indexes ``clouds``."""
    codes, _ = _encode_clouds(params, clouds)
    cond = codes[pair_index].reshape(len(x_t), -1)
    return _denoiser_forward(params, shape, x_t, t, cond)[0]


def loss_and_grads(params, shape: NetShape, x0, t, xi, clouds, pair_index, schedule: NoiseSchedule):
    """Mean squared noise-prediction error and its gradient for every parameter.

    x0, xi: (B, D); t: (B,) steps; clouds: (K, n, 3); pair_index: (B, n_objects).
    """
    B = len(x0)
    x_t = forward_noise(x0, t, xi, schedule)
    codes, ecache = _encode_clouds(params, clouds)
    cond = codes[pair_index].reshape(B, -1)
    out, fcache = _denoiser_forward(params, shape, x_t, t, cond)
    diff = out - xi
    loss = float(np.mean(diff * diff))
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    g_out = 2.0 * diff / diff.size
    g_in = _denoiser_backward(params, shape, fcache, g_out, grads)
    g_cond = g_in[:, shape.dim + shape.time_dim:].reshape(B, shape.n_objects, shape.enc_out)
    g_codes = np.zeros_like(codes)
    np.add.at(g_codes, pair_index, g_cond)
    _encode_backward(params, ecache, g_codes, grads)
    return loss, grads


class Adam:
    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.k = 0

    def step(self, params, grads):
        self.k += 1
        c1 = 1 - self.b1**self.k
        c2 = 1 - self.b2**self.k
        for name in sorted(params):
            g = grads[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            params[name] -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


# ------------------------------------------------------------------- training

@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    lr_final: float = 1e-4  # cosine decay target
    seed: int = 0
    hidden: int = 512
    layers: int = 3
    time_dim: int = 64
    n_points: int = 512
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    log_every: int = 100

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = NoiseSchedule(**self.schedule)
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("invalid training hyperparameters")

    def to_json(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.to_json()
        return d


@dataclass
class DiffusionModel:
    params: dict
    shape: NetShape
    schedule: NoiseSchedule
    normalizer: Normalizer
    codec: ConfigCodec
    clouds: dict  # object id -> (n_points, 3) conditioning cloud
    fingerprint: str = ""
    loss_trace: list = field(default_factory=list)


def resample_cloud(points, n: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``n`` points drawn from ``points`` (without replacement when possible)."""
    pts = np.asarray(points, float)
    if len(pts) == 0:
        raise ValueError("empty point cloud")
    idx = rng.choice(len(pts), size=n, replace=len(pts) < n)
    return pts[np.sort(idx)]


def dataset_fingerprint(X) -> str:
    return hashlib.sha256(np.ascontiguousarray(X, dtype=float).tobytes()).hexdigest()[:16]


def train(records, clouds: dict, config: TrainConfig | None = None, dof: int | None = None,
          progress=None) -> DiffusionModel:
    """Fit the denoiser on merged records.

    ``clouds`` maps object ids to conditioning point clouds; each is
    resampled once to ``n_points``. Deterministic for a fixed seed.
    """
    cfg = config or TrainConfig()
    if not records:
        raise ValueError("training set is empty")
    dof = dof or len(records[0].theta)
    codec = ConfigCodec(dof)
    X = np.stack([codec.encode(r.theta, r.T1, r.T2) for r in records])
    norm = Normalizer.fit(X)
    Z = norm.apply(X)
    rng = np.random.default_rng(cfg.seed)
    ids = sorted({oid for r in records for oid in r.object_ids})
    missing = [i for i in ids if i not in clouds]
    if missing:
        raise KeyError(f"no point cloud for objects {missing}")
    cloud_arr = np.stack([resample_cloud(clouds[i], cfg.n_points, rng) for i in ids])
    pos = {oid: k for k, oid in enumerate(ids)}
    pairs = np.array([[pos[o] for o in r.object_ids] for r in records])
    shape = NetShape(codec.dim, cfg.hidden, cfg.layers, cfg.time_dim)
    params = init_params(shape, rng)
    opt = Adam(params, cfg.lr)
    S = cfg.schedule
    trace = []
    for step in range(cfg.steps):
        b = rng.integers(len(Z), size=cfg.batch_size)
        t = rng.integers(1, S.steps + 1, size=cfg.batch_size)
        xi = rng.standard_normal((cfg.batch_size, codec.dim))
        used, inv = np.unique(pairs[b], return_inverse=True)
        loss, grads = loss_and_grads(params, shape, Z[b], t, xi, cloud_arr[used],
                                     inv.reshape(len(b), -1), S)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at step {step}")
        frac = step / max(cfg.steps - 1, 1)
        opt.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + np.cos(np.pi * frac))
        opt.step(params, grads)
        trace.append(loss)
        if progress is not None and (step + 1) % cfg.log_every == 0:
            progress(step + 1, float(np.mean(trace[-cfg.log_every:])))
    return DiffusionModel(params, shape, S, norm, codec, {i: cloud_arr[pos[i]] for i in ids},
                          dataset_fingerprint(X), trace)


# ------------------------------------------------------------------- sampling

def sample_vectors(model: DiffusionModel, clouds, n: int, seed: int = 0) -> np.ndarray:
    """Ancestral sampling of ``n`` normalized vectors, returned in raw units.

    ``clouds`` is a pair of (n_points, 3) arrays, one per object.
    """
    if n <= 0:
        return np.zeros((0, model.codec.dim))
    rng = np.random.default_rng(seed)
    S = model.schedule
    cl = np.stack([np.asarray(c, float) for c in clouds])
    codes, _ = _encode_clouds(model.params, cl)
    cond = np.tile(codes.reshape(1, -1), (n, 1))
    x = rng.standard_normal((n, model.codec.dim))
    for t in range(S.steps, 0, -1):
        tt = np.full(n, t)
        eps = _denoiser_forward(model.params, model.shape, x, tt, cond)[0]
        x = reverse_mean(x, tt, eps, S)
        if t > 1:
            x = x + np.sqrt(S.beta(t)) * rng.standard_normal(x.shape)
    return model.normalizer.invert(x)


def sample_configs(model: DiffusionModel, object_ids, n: int, seed: int = 0):
    """Decoded (theta, T1, T2) samples conditioned on the stored clouds of ``object_ids``."""
    clouds = [model.clouds[o] for o in object_ids]
    X = sample_vectors(model, clouds, n, seed)
    return [model.codec.decode(x) for x in X]


# ------------------------------------------------------------------ checkpoint

FORMAT = "seqgrasp-ddpm/1"


def _pack(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unpack(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()


def save_model(path, model: DiffusionModel, extra: dict | None = None):
    from .pipeline import atomic_write_text

    doc = {
        "format": FORMAT,
        "shape": asdict(model.shape),
        "schedule": model.schedule.to_json(),
        "dof": model.codec.dof,
        "normalizer": {"mean": _pack(model.normalizer.mean), "std": _pack(model.normalizer.std)},
        "params": {k: _pack(v) for k, v in sorted(model.params.items())},
        "clouds": {k: _pack(v) for k, v in sorted(model.clouds.items())},
        "fingerprint": model.fingerprint,
        "final_loss": float(np.mean(model.loss_trace[-100:])) if model.loss_trace else None,
    }
    if extra:
        doc["extra"] = extra
    atomic_write_text(path, json.dumps(doc))


def load_model(path) -> DiffusionModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    shape = NetShape(**doc["shape"])
    params = {k: _unpack(v) for k, v in doc["params"].items()}
    norm = Normalizer(_unpack(doc["normalizer"]["mean"]), _unpack(doc["normalizer"]["std"]))
    return DiffusionModel(params, shape, NoiseSchedule(**doc["schedule"]), norm,
                          ConfigCodec(doc["dof"]), {k: _unpack(v) for k, v in doc["clouds"].items()},
                          doc.get("fingerprint", ""))
