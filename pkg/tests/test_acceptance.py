"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (shown even
when pytest captures output) before asserting.
"""

import time

import numpy as np
import pytest

from oracles import mc_min_residual, random_contact_set
from seqgrasp.diffusion import NetShape, NoiseSchedule, TrainConfig, forward_noise, init_params, loss_and_grads
from seqgrasp.diffusion import sample_configs, train
from seqgrasp.energy import EnergyWeights, batch_energy, contact_terms, finger_energy, self_penetration
from seqgrasp.geometry import ObjectModel, sample_surface
from seqgrasp.merge import merge_datasets, serving_fingers
from seqgrasp.pipeline import (ExperimentConfig, build_datasets, heatmap_stats, learned_records, run_trials,
                               train_on_merged)
from seqgrasp.spatial import Pose, exp_so3, project_rotation, random_rotation
from seqgrasp.synthesis import SynthesisConfig, mala_step, synthesize
from seqgrasp.validation import ValidationConfig, detect_contacts, gravity_wrench, validate, validate_records
from seqgrasp.validation import wrench_resistible

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail=""):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
    return emit


# ----------------------------------------------------------------------- 1

def _five_point(E, pert, k, h):
    return (8 * (E(*pert(k, h)) - E(*pert(k, -h))) - (E(*pert(k, 2 * h)) - E(*pert(k, -2 * h)))) / (12 * h)


def test_c1_energy_gradient(hand, objects, report):
    """Analytic gradient of the total energy against a five-point stencil.

    A configuration counts as near a hinge kink when the stencil disagrees
    with itself across step sizes h/2, h and 5h by more than 1e-5 in any
    coordinate: a smooth function gives the same slope at all three, while a
    kink inside the stencil does not.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    W = EnergyWeights()
    B, h = 200, 1e-6
    errs, kinks, active = [], [], []
    for oid in sorted(objects):
        obj = objects[oid]
        th = rng.uniform(hand.lower - 0.2, hand.upper + 0.2, (B, hand.dof))
        R = random_rotation(rng, B)
        t = np.array([0.09, 0.0, 0.05]) + rng.normal(0, 0.02, (B, 3))
        a = np.stack([rng.choice(hand.style_candidates("pinch"), 3, replace=False) for _ in range(B)])
        be = batch_energy(hand, obj, th, R, t, a, W)
        active.append(np.stack([be.e_fc > 0, be.e_dis > 0, be.e_p > 0, be.e_sp > 0, be.e_q > 0], 1))

        def E(th_, R_, t_):
            return batch_energy(hand, obj, th_, R_, t_, a, W, want_grad=False).total

        def pert(k, s):
            if k < hand.dof:
                d = np.zeros(hand.dof)
                d[k] = s
                return th + d, R, t
            d = np.zeros(3)
            d[(k - hand.dof) % 3] = s
            if k < hand.dof + 3:
                return th, R, t + d
            return th, exp_so3(d) @ R, t

        n = hand.dof + 6
        fd = np.zeros((B, n))
        kink = np.zeros(B, bool)
        for k in range(n):
            a1 = _five_point(E, pert, k, h)
            a2 = _five_point(E, pert, k, h / 2)
            a5 = _five_point(E, pert, k, 5 * h)
            fd[:, k] = a1
            kink |= (np.abs(a1 - a2) >= 1e-5) | (np.abs(a1 - a5) >= 1e-5)
        an = np.hstack([be.grad_theta, be.grad_v, be.grad_w])
        errs.append(np.abs(an - fd).max(axis=1))
        kinks.append(kink)
    err, kink, active = np.concatenate(errs), np.concatenate(kinks), np.concatenate(active)
    elapsed = time.perf_counter() - t0
    kept = ~kink
    worst = float(err[kept].max())
    term_cover = active[kept].mean(axis=0)
    ok = worst < 1e-4 and elapsed < 60 and kept.mean() >= 0.8 and np.all(term_cover > 0.1)
    report(1, ok, f"configs={len(err)} kept={kept.sum()} max_err={worst:.2e} "
                  f"term_activity={np.round(term_cover, 2).tolist()} time={elapsed:.1f}s")
    assert len(err) == 1000
    assert worst < 1e-4
    assert kept.mean() >= 0.8
    assert np.all(term_cover > 0.1)  # every term contributes in the retained set
    assert elapsed < 60


# ----------------------------------------------------------------------- 2

def test_c2_force_closure(objects, report):
    rng = np.random.default_rng(1)
    sphere = ObjectModel("s", "sphere", {"r": 0.03})
    u = rng.standard_normal((200, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    antipodal = contact_terms(sphere, np.stack([0.03 * u, -0.03 * u], 1), False)[0]
    cyl = objects["cylinder"]
    r = cyl.params["r"]
    vals = []
    for phase in np.linspace(0, 2 * np.pi / 3, 7):
        for z in (-0.02, 0.0, 0.02):
            ang = phase + np.deg2rad([0, 120, 240])
            q = np.stack([r * np.cos(ang), r * np.sin(ang), np.full(3, z)], 1)
            vals.append(contact_terms(cyl, q[None], False)[0][0])
    singles = []
    for oid, obj in objects.items():
        pts, _ = sample_surface(obj, 500, seed=3)
        singles.append(contact_terms(obj, pts[:, None, :], False)[0].min())
    ok = np.abs(antipodal).max() <= 1e-9 and max(vals) <= 1e-6 and min(singles) > 0.1
    report(2, ok, f"antipodal_max={np.abs(antipodal).max():.1e} cylinder3_max={max(vals):.1e} "
                  f"single_min={min(singles):.3f}")
    assert np.abs(antipodal).max() <= 1e-9
    assert max(vals) <= 1e-6
    assert min(singles) > 0.1


# ----------------------------------------------------------------------- 3

def test_c3_mala_stationarity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    x = np.zeros(4)
    xs = np.empty((100_000, 4))
    acc = 0
    for i in range(100_000):
        x, a = mala_step(x, lambda v: 0.5 * float(v @ v), lambda v: v, 0.5, 1.0, rng)
        acc += a
        xs[i] = x
    elapsed = time.perf_counter() - t0
    var = xs[1000:].var(axis=0)
    ok = np.all(np.abs(var - 1) < 0.1) and elapsed < 30
    report(3, ok, f"variance={np.round(var, 3).tolist()} acceptance={acc / 1e5:.3f} time={elapsed:.1f}s")
    assert np.all(np.abs(var - 1) < 0.1)
    assert elapsed < 30


# ----------------------------------------------------------------------- 4

def test_c4_validation_oracle(report):
    rng = np.random.default_rng(4)
    cfg = ValidationConfig()
    mass = 500 * 4 / 3 * np.pi * 0.03 ** 3
    axes = np.vstack([np.eye(3), -np.eye(3)])
    inconsistent = mu_viol = contact_viol = feasible = 0
    mus = (0.1, 0.3, 0.6, 0.9, 1.2)
    for i in range(200):
        c = random_contact_set(rng, int(rng.integers(2, 6)))
        g = axes[i % 6]
        ok, margin = wrench_resistible(c, mass, g, cfg)
        feasible += ok
        best = mc_min_residual(c, gravity_wrench(mass, g), cfg.mu, cfg.facets, cfg.f_max, rng)
        lp_residual = 0.0 if ok else -margin
        if (best <= 1e-6 and not ok) or best < lp_residual - 1e-7:
            inconsistent += 1
        verdicts = [wrench_resistible(c, mass, g, ValidationConfig(mu=m))[0] for m in mus]
        mu_viol += int(any(a and not b for a, b in zip(verdicts, verdicts[1:])))
        if ok:
            more = c + random_contact_set(rng, int(rng.integers(1, 3)))
            contact_viol += int(not wrench_resistible(more, mass, g, cfg)[0])
    ok = inconsistent == 0 and mu_viol == 0 and contact_viol == 0
    report(4, ok, f"sets=200 feasible={feasible} oracle_inconsistent={inconsistent} "
                  f"mu_violations={mu_viol} contact_violations={contact_viol}")
    assert 0 < feasible < 200  # the sets exercise both verdicts
    assert inconsistent == 0 and mu_viol == 0 and contact_viol == 0


# ----------------------------------------------------------------------- 5, 6

@pytest.fixture(scope="module")
def synthesized(hand, objects):
    t0 = time.perf_counter()
    out = {}
    for oid, style in (("sphere", "pinch"), ("cylinder", "side")):
        res = synthesize(hand, objects[oid], SynthesisConfig(style=style, n_candidates=512, seed=0))
        out[oid] = (res, validate_records(hand, res.records, objects))
    return out, time.perf_counter() - t0


def test_c5_synthesis_yield(hand, objects, synthesized, report):
    out, elapsed = synthesized
    yields, revalid = {}, True
    for oid, (res, valid) in out.items():
        yields[oid] = len(valid) / 512
        for rec in valid:
            again = validate(hand, rec, objects[oid])
            revalid &= again.valid and again.to_json() == rec.validation.to_json()
            if rec.style == "pinch":
                revalid &= len(detect_contacts(hand, rec.theta, rec.T, objects[oid])) >= 2
    ok = all(0 < y < 0.5 for y in yields.values()) and revalid and elapsed < 600
    report(5, ok, f"yield={ {k: round(v, 4) for k, v in yields.items()} } revalidated={revalid} "
                  f"time={elapsed:.0f}s")
    assert all(y > 0 for y in yields.values())
    assert all(y < 0.5 for y in yields.values())
    assert revalid
    assert elapsed < 600


def test_c6_merge_correctness(hand, objects, synthesized, report):
    out, _ = synthesized
    pinch, side = out["sphere"][1], out["cylinder"][1]
    merged = merge_datasets(hand, pinch, side, objects, 64, np.random.default_rng(6))
    by_id = {r.id: r for r in pinch + side}
    bad = {"disjoint": 0, "clearance": 0, "self_penetration": 0, "energy": 0}
    for m in merged:
        f1, f2 = serving_fingers(hand, m.assignments[0]), serving_fingers(hand, m.assignments[1])
        j1 = set(hand.fingers_joints(sorted(f1)).tolist())
        j2 = set(hand.fingers_joints(sorted(f2)).tolist())
        bad["disjoint"] += int(bool(f1 & f2 or j1 & j2))
        bad["clearance"] += int(m.clearance < 0)
        e_sp = self_penetration(hand, hand.sphere_world(hand.fk(m.theta[None])), want_grad=False)[0][0]
        bad["self_penetration"] += int(e_sp > 0)
        for src_id, fingers, oid, T in ((m.source_ids[0], f1, m.object_ids[0], m.T1),
                                        (m.source_ids[1], f2, m.object_ids[1], m.T2)):
            src = by_id[src_id]
            ref = finger_energy(hand, objects[oid], src.theta, src.T, src.assignment, fingers)
            now = finger_energy(hand, objects[oid], m.theta, T, src.assignment, fingers)
            bad["energy"] += int(abs(now.total - ref.total) > 1e-9)
    ok = len(merged) > 0 and not any(bad.values())
    report(6, ok, f"merged={len(merged)} violations={bad}")
    assert len(merged) > 0
    assert not any(bad.values())


# ----------------------------------------------------------------------- 7

def test_c7_diffusion(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    S = NoiseSchedule()
    x0 = rng.normal(size=8)
    moments = True
    for t in (1, S.steps // 2, S.steps):
        xs = forward_noise(np.tile(x0, (10_000, 1)), t, rng.standard_normal((10_000, 8)), S)
        sd = np.sqrt(1 - S.alpha_bar(t))
        moments &= bool(np.all(np.abs(xs.mean(0) - np.sqrt(S.alpha_bar(t)) * x0) < 3 * sd / 100))
        moments &= bool(np.all(np.abs(xs.var(0) / sd ** 2 - 1) < 0.05))

    M = rng.normal(size=(10_000, 3, 3))
    R = project_rotation(M)
    svd_ok = bool(np.all(np.abs(np.linalg.det(R) - 1) < 1e-9)
                  and np.all(np.abs(np.einsum("nji,njk->nik", R, R) - np.eye(3)) < 1e-9))
    Q = random_rotation(rng, 10_000)
    for i in range(20):
        svd_ok &= bool(np.linalg.norm(M[i] - R[i]) <= np.linalg.norm(M[i] - Q, axis=(1, 2)).min() + 1e-12)

    shape = NetShape(8, 16, 2, 8, 8, 16)
    p = init_params(shape, rng)
    for k in p:
        p[k] = p[k] + 0.1 * rng.standard_normal(p[k].shape)
    xb, xi = rng.standard_normal((5, 8)), rng.standard_normal((5, 8))
    tb = rng.integers(1, S.steps + 1, 5)
    clouds = rng.standard_normal((3, 20, 3))
    pairs = np.array([[0, 1], [1, 2], [0, 0], [2, 1], [1, 0]])
    _, g = loss_and_grads(p, shape, xb, tb, xi, clouds, pairs, S)
    rel = 0.0
    for k in p:
        for i in range(p[k].size):
            q = {kk: v.copy() for kk, v in p.items()}
            q[k].flat[i] += 1e-5
            lp = loss_and_grads(q, shape, xb, tb, xi, clouds, pairs, S)[0]
            q[k].flat[i] -= 2e-5
            lm = loss_and_grads(q, shape, xb, tb, xi, clouds, pairs, S)[0]
            fd = (lp - lm) / 2e-5
            rel = max(rel, abs(fd - g[k].flat[i]) / max(abs(fd), abs(g[k].flat[i]), 1e-6))

    from types import SimpleNamespace
    target = SimpleNamespace(theta=rng.uniform(-0.3, 1.2, 16), T1=Pose(random_rotation(rng), rng.normal(0, .05, 3)),
                             T2=Pose(random_rotation(rng), rng.normal(0, .05, 3)), object_ids=("a", "b"))
    cl = {"a": rng.normal(size=(300, 3)) * 0.03, "b": rng.normal(size=(300, 3)) * 0.05}
    model = train([target], cl, TrainConfig(steps=3000, batch_size=64, n_points=256))
    loss = float(np.mean(model.loss_trace[-100:]))
    th = np.stack([s[0] for s in sample_configs(model, ("a", "b"), 16, seed=3)])
    rms = float(np.sqrt(np.mean((th - target.theta) ** 2)))
    elapsed = time.perf_counter() - t0
    ok = moments and svd_ok and rel < 1e-4 and loss < 0.1 and rms < 0.05 and elapsed < 300
    report(7, ok, f"moments={moments} svd={svd_ok} grad_rel={rel:.1e} loss={loss:.4f} theta_rms={rms:.4f} "
                  f"time={elapsed:.0f}s")
    assert moments and svd_ok
    assert rel < 1e-4
    assert loss < 0.1 and rms < 0.05
    assert elapsed < 300


# ----------------------------------------------------------------------- 8, 9

def run_grid(hand, objects, seed=0):
    """Full SG then LG run; returns (SG csv, LG csv, SG mean, LG mean, seconds)."""
    t0 = time.perf_counter()
    cfg = ExperimentConfig(seed=seed)
    art = build_datasets(hand, objects, cfg)
    sg = heatmap_stats(run_trials(hand, objects, cfg, art.merged, "SG"), cfg.rows, cfg.cols)
    model = train_on_merged(objects, art.merged, cfg)
    lg_pool = learned_records(hand, objects, model, cfg)
    lg = heatmap_stats(run_trials(hand, objects, cfg, lg_pool, "LG"), cfg.rows, cfg.cols)
    return sg.to_csv(), lg.to_csv(), sg.mean_rate(), lg.mean_rate(), time.perf_counter() - t0


@pytest.fixture(scope="module")
def first_grid(hand, objects):
    return run_grid(hand, objects)


def test_c8_end_to_end_trend(first_grid, report, tmp_path):
    sg_csv, lg_csv, sg, lg, elapsed = first_grid
    (tmp_path / "sg.csv").write_text(sg_csv)
    (tmp_path / "lg.csv").write_text(lg_csv)
    ok = sg >= lg and sg >= 0.6 and elapsed < 1800
    report(8, ok, f"SG={sg:.3f} LG={lg:.3f} time={elapsed:.0f}s")
    assert sg >= lg
    assert sg >= 0.6
    assert elapsed < 1800


def test_c9_determinism(hand, objects, first_grid, report):
    sg_csv, lg_csv, *_ = run_grid(hand, objects)
    same = sg_csv.encode() == first_grid[0].encode() and lg_csv.encode() == first_grid[1].encode()
    report(9, same, f"identical_sg_csv={sg_csv == first_grid[0]} identical_lg_csv={lg_csv == first_grid[1]}")
    assert same
