"""Dataset files, experiment configuration and success-rate statistics."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .energy import EnergyWeights, finger_energy
from .exec_planner import (PlanError, Scene, TrialOutcome, default_scene, make_plan, perturb_scene,
                           simulate_execution)
from .geometry import ObjectModel, library_fingerprint, sample_surface, sdf
from .hand_model import HandModel
from .merge import MergeStats, MultiGraspRecord, merge_datasets, object_clearance
from .synthesis import GraspRecord, SynthesisConfig, synthesize
from .validation import ValidationConfig, validate_records

log = logging.getLogger(__name__)

DATASET_FORMAT = "seqgrasp-dataset/1"
DEFAULT_PAIRS = (("sphere", "cylinder"), ("sphere", "box"), ("cube", "cylinder"), ("cube", "box"))


class DataError(ValueError):
    """Malformed, mismatched or empty input data."""


def atomic_write_text(path, text: str):
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------- records

@dataclass
class OutcomeRecord:
    mode: str
    pair: tuple[str, str]
    trial: int
    record_id: str
    outcome: TrialOutcome

    def to_json(self) -> dict:
        return {"kind": "outcome", "mode": self.mode, "pair": list(self.pair), "trial": self.trial,
                "record_id": self.record_id, **self.outcome.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "OutcomeRecord":
        return cls(d["mode"], tuple(d["pair"]), int(d["trial"]), d["record_id"],
                   TrialOutcome(d["success"], d.get("stage"), d.get("reason", "none"), d.get("direction")))


RECORD_KINDS = {"grasp": GraspRecord, "multigrasp": MultiGraspRecord, "outcome": OutcomeRecord}


def record_from_json(d: dict):
    try:
        cls = RECORD_KINDS[d["kind"]]
    except KeyError:
        raise DataError(f"unknown record kind {d.get('kind')!r}") from None
    return cls.from_json(d)


def dataset_header(hand: HandModel, objects: dict, meta: dict | None = None) -> dict:
    return {"format": DATASET_FORMAT, "hand": hand.fingerprint(),
            "objects": library_fingerprint(objects.values()), "meta": meta or {}}


def dumps_dataset(records, header: dict) -> str:
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in records]
    return "\n".join(lines) + "\n"


def write_dataset(path, records, hand: HandModel, objects: dict, meta: dict | None = None):
    atomic_write_text(path, dumps_dataset(records, dataset_header(hand, objects, meta)))


def loads_dataset(text: str, hand: HandModel | None = None, objects: dict | None = None):
    """Parse NDJSON text into (header, records), checking format and model hashes."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError("empty dataset file (no header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataError(f"bad dataset header: {e}") from None
    if header.get("format") != DATASET_FORMAT:
        raise DataError(f"unsupported dataset format {header.get('format')!r}, expected {DATASET_FORMAT}")
    if hand is not None and header.get("hand") != hand.fingerprint():
        raise DataError("hand-model hash mismatch: dataset was written for a different hand")
    if objects is not None and header.get("objects") != library_fingerprint(objects.values()):
        raise DataError("object-library hash mismatch: dataset was written for different objects")
    records = []
    for n, ln in enumerate(lines[1:], start=2):
        try:
            records.append(record_from_json(json.loads(ln)))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"line {n}: malformed record ({e})") from None
    return header, records


def read_dataset(path, hand: HandModel | None = None, objects: dict | None = None, kind=None,
                 allow_empty: bool = False):
    header, records = loads_dataset(Path(path).read_text(), hand, objects)
    if kind is not None:
        wrong = [r for r in records if not isinstance(r, RECORD_KINDS[kind])]
        if wrong:
            raise DataError(f"{path}: expected only '{kind}' records")
    if not records and not allow_empty:
        raise DataError(f"{path}: dataset has no records")
    return header, records


# ------------------------------------------------------------------ statistics

@dataclass
class Heatmap:
    rows: list[str]
    cols: list[str]
    successes: np.ndarray
    trials: np.ndarray

    @property
    def rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.trials > 0, self.successes / np.maximum(self.trials, 1), np.nan)

    def mean_rate(self) -> float:
        r = self.rates
        return float(np.nanmean(r)) if np.isfinite(r).any() else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pinch\\side"] + self.cols)
        for i, row in enumerate(self.rows):
            cells = []
            for j in range(len(self.cols)):
                t = self.trials[i, j]
                cells.append("n/a" if t == 0 else f"{self.successes[i, j] / t:.4f}")
            w.writerow([row] + cells)
        return buf.getvalue()


def heatmap_stats(outcomes, rows=None, cols=None) -> Heatmap:
    """Success rate per (pinch object, side object); cells without trials stay empty."""
    outcomes = list(outcomes)
    rows = list(rows) if rows is not None else sorted({o.pair[0] for o in outcomes})
    cols = list(cols) if cols is not None else sorted({o.pair[1] for o in outcomes})
    s = np.zeros((len(rows), len(cols)), int)
    t = np.zeros_like(s)
    for o in outcomes:
        i, j = rows.index(o.pair[0]), cols.index(o.pair[1])
        t[i, j] += 1
        s[i, j] += bool(o.outcome.success)
    return Heatmap(rows, cols, s, t)


# ----------------------------------------------------------------- experiment

@dataclass
class ExperimentConfig:
    pairs: list = field(default_factory=lambda: [list(p) for p in DEFAULT_PAIRS])
    samples: int = 25
    position_noise: float = 0.01
    yaw_noise: float = 0.1
    observed_poses: bool = True  # plan on the perturbed poses; False plans on the nominal ones
    seed: int = 0
    mode: str = "SG"
    n_candidates: int = 512
    synthesis_steps: int = 2000
    max_merged: int = 64
    cloud_points: int = 512
    train_steps: int = 3000
    train_batch: int = 64

    def __post_init__(self):
        self.pairs = [tuple(p) for p in self.pairs]
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.mode not in ("SG", "LG"):
            raise ValueError(f"mode must be SG or LG, got {self.mode!r}")
        if any(len(p) != 2 for p in self.pairs) or not self.pairs:
            raise ValueError("pairs must be a nonempty list of (pinch object, side object)")

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> dict:
        d = asdict(self)
        d["pairs"] = [list(p) for p in self.pairs]
        return d

    @property
    def rows(self) -> list[str]:
        return list(dict.fromkeys(p[0] for p in self.pairs))

    @property
    def cols(self) -> list[str]:
        return list(dict.fromkeys(p[1] for p in self.pairs))


def object_cloud(obj: ObjectModel, n: int, seed: int = 0) -> np.ndarray:
    """Conditioning cloud: surface samples at the canonical orientation, centred on the object."""
    pts, _ = sample_surface(obj, n, seed)
    return pts @ obj.canonical_pose.rotation.T


def infer_assignment(hand: HandModel, theta, T, obj: ObjectModel, style: str) -> list[int]:
    """For each finger of the style, its candidate closest to the object surface."""
    cand = hand.style_candidates(style)
    pts = hand.candidate_world(hand.fk(np.asarray(theta, float)[None]), cand)[0]
    dist = np.abs(sdf(obj, T.inverse().apply(pts)).value)
    best = {}
    for c, d in zip(cand, dist):
        f = hand.candidate_finger(int(c))
        if f not in best or d < best[f][1]:
            best[f] = (int(c), d)
    return sorted(c for c, _ in best.values())


def sampled_record(hand: HandModel, objects: dict, object_ids, theta, T1, T2, tag: str,
                   weights: EnergyWeights | None = None) -> MultiGraspRecord:
    """Wrap a generated configuration as a record with inferred contact assignments."""
    theta = hand.clamp(np.asarray(theta, float))
    o1, o2 = objects[object_ids[0]], objects[object_ids[1]]
    a1 = infer_assignment(hand, theta, T1, o1, "pinch")
    a2 = infer_assignment(hand, theta, T2, o2, "side")
    e1 = finger_energy(hand, o1, theta, T1, a1, hand.candidate_fingers(a1), weights)
    e2 = finger_energy(hand, o2, theta, T2, a2, hand.candidate_fingers(a2), weights)
    return MultiGraspRecord(theta, T1, T2, tuple(object_ids), (tag, tag), (a1, a2), (e1, e2),
                            object_clearance(o1, T1, o2, T2), id=tag)


def execute_trial(hand: HandModel, record: MultiGraspRecord, objects: dict, rng: np.random.Generator,
                  position: float, yaw: float, config: ValidationConfig | None = None,
                  observed: bool = True) -> TrialOutcome:
    """Execute ``record`` in a perturbed copy of the nominal two-object scene.

    The wrist poses come from the perturbed object poses when ``observed``,
    otherwise from the nominal ones, which turns the perturbation into a
    registration error. This is the only execution path; SG and LG differ
    only in where ``record`` came from.
    """
    o1, o2 = objects[record.object_ids[0]], objects[record.object_ids[1]]
    nominal = default_scene(o1, o2)
    actual = perturb_scene(nominal, rng, position, yaw)
    try:
        plan = make_plan(hand, record, objects, actual if observed else nominal)
    except PlanError:
        return TrialOutcome(False, "plan", "ik_failure")
    return simulate_execution(hand, plan, record, objects, config, actual)


def run_trials(hand: HandModel, objects: dict, cfg: ExperimentConfig, records_by_pair: dict,
               mode: str, progress=None) -> list[OutcomeRecord]:
    """Execute ``cfg.samples`` trials per pair drawn from ``records_by_pair[pair]``.

    Records are drawn without replacement while enough exist. Trial RNG
    streams are keyed by (seed, pair index, trial) so cells are independent.
    """
    out = []
    for k, pair in enumerate(cfg.pairs):
        pool = records_by_pair.get(pair, [])
        if not pool:
            log.warning("no records for pair %s; cell left empty", pair)
            continue
        pick_rng = np.random.default_rng([cfg.seed, k, 7])
        picks = pick_rng.permutation(len(pool)) if len(pool) >= cfg.samples else \
            pick_rng.integers(len(pool), size=cfg.samples)
        for trial in range(cfg.samples):
            rec = pool[int(picks[trial])]
            rng = np.random.default_rng([cfg.seed, k, trial])
            res = execute_trial(hand, rec, objects, rng, cfg.position_noise, cfg.yaw_noise,
                                observed=cfg.observed_poses)
            out.append(OutcomeRecord(mode, pair, trial, rec.id, res))
            if progress is not None:
                progress(mode=mode, pair=f"{pair[0]}+{pair[1]}", trial=trial, success=int(res.success))
    return out


@dataclass
class Artifacts:
    grasps: dict = field(default_factory=dict)   # (object, style) -> validated GraspRecords
    merged: dict = field(default_factory=dict)   # pair -> MultiGraspRecords
    synth_yield: dict = field(default_factory=dict)
    merge_stats: dict = field(default_factory=dict)


def build_datasets(hand: HandModel, objects: dict, cfg: ExperimentConfig, progress=None) -> Artifacts:
    """Synthesize, validate and merge grasps for every pair in ``cfg``."""
    art = Artifacts()
    for style, ids in (("pinch", cfg.rows), ("side", cfg.cols)):
        for oid in ids:
            if oid not in objects:
                raise DataError(f"unknown object id '{oid}'")
            t0 = time.perf_counter()
            sc = SynthesisConfig(style=style, n_candidates=cfg.n_candidates, steps=cfg.synthesis_steps,
                                 seed=cfg.seed)
            res = synthesize(hand, objects[oid], sc)
            valid = validate_records(hand, res.records, objects)
            art.grasps[(oid, style)] = valid
            art.synth_yield[(oid, style)] = len(valid) / cfg.n_candidates
            if progress is not None:
                progress(stage="synth", object=oid, style=style, energy_pass=len(res.records),
                         valid=len(valid), seconds=round(time.perf_counter() - t0, 1))
    for k, pair in enumerate(cfg.pairs):
        st = MergeStats()
        recs = merge_datasets(hand, art.grasps[(pair[0], "pinch")], art.grasps[(pair[1], "side")],
                              objects, cfg.max_merged, np.random.default_rng([cfg.seed, k, 11]), stats=st)
        art.merged[pair] = recs
        art.merge_stats[pair] = st
        if progress is not None:
            progress(stage="merge", pair=f"{pair[0]}+{pair[1]}", merged=len(recs), tried=st.pairs_tried)
    return art


def learned_records(hand: HandModel, objects: dict, model, cfg: ExperimentConfig) -> dict:
    """``cfg.samples`` diffusion samples per pair, wrapped as records."""
    from .diffusion import sample_vectors

    out = {}
    for k, pair in enumerate(cfg.pairs):
        clouds = [model.clouds[o] if o in model.clouds else object_cloud(objects[o], cfg.cloud_points)
                  for o in pair]
        X = sample_vectors(model, clouds, cfg.samples, seed=int(np.random.default_rng([cfg.seed, k, 13])
                                                                 .integers(2**31)))
        recs = []
        for i, x in enumerate(X):
            theta, T1, T2 = model.codec.decode(x)
            recs.append(sampled_record(hand, objects, pair, theta, T1, T2, f"lg/{pair[0]}+{pair[1]}/{i}"))
        out[pair] = recs
    return out


def train_on_merged(objects: dict, merged: dict, cfg: ExperimentConfig, progress=None):
    from .diffusion import TrainConfig, train

    records = [r for pair in cfg.pairs for r in merged.get(pair, [])]
    if not records:
        raise DataError("no merged records to train on")
    ids = sorted({o for r in records for o in r.object_ids})
    clouds = {o: object_cloud(objects[o], cfg.cloud_points) for o in ids}
    tc = TrainConfig(steps=cfg.train_steps, batch_size=cfg.train_batch, seed=cfg.seed,
                     n_points=cfg.cloud_points)
    cb = None if progress is None else (lambda s, l: progress(stage="train", step=s, loss=round(l, 5)))
    return train(records, clouds, tc, progress=cb)
