import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from oracles import mc_min_residual, random_contact_set
from seqgrasp.energy import total_energy
from seqgrasp.spatial import Pose
from seqgrasp.synthesis import GraspRecord, hand_world_pose, init_candidate
from seqgrasp.validation import (Contact, ValidationConfig, ValidationReport, detect_contacts,
                                 execution_feasibility, gravity_wrench, rotation_robustness,
                                 validate, wrench_resistible)

MASS = 500 * 4 / 3 * np.pi * 0.03 ** 3  # bundled sphere at the default density


def antipodal(axis=0, r=0.03):
    e = np.eye(3)[axis]
    return [Contact(r * e, -e), Contact(-r * e, e)]


def test_antipodal_axial_feasible():
    ok, margin = wrench_resistible(antipodal(0), MASS, [1, 0, 0])
    # point contacts on one axis cannot twist about it, so the margin ball is flat
    assert ok and margin == pytest.approx(0.0, abs=1e-9)


def test_perpendicular_without_friction_infeasible():
    cfg = ValidationConfig(mu=1e-9)
    ok, margin = wrench_resistible(antipodal(0), MASS, [0, 0, -1], cfg)
    assert not ok and margin < 0
    assert wrench_resistible(antipodal(0), MASS, [0, 0, -1])[0]


def test_zero_contacts():
    ok, margin = wrench_resistible([], MASS, [0, 0, 1])
    assert not ok and margin < 0


def test_config_invariants():
    with pytest.raises(ValueError):
        ValidationConfig(mu=0.0)
    with pytest.raises(ValueError):
        ValidationConfig(facets=2)
    assert ValidationConfig(preload=1.5).f_max == 15.0


def test_force_cap_limits_heavy_objects():
    # axial squeeze cannot hold more than f_max against gravity along the axis
    ok_light = wrench_resistible(antipodal(0), 0.9 * 10 / 9.81, [1, 0, 0])[0]
    ok_heavy = wrench_resistible(antipodal(0), 1.1 * 10 / 9.81, [1, 0, 0])[0]
    assert ok_light and not ok_heavy


@pytest.mark.parametrize("seed", range(20))
def test_lp_agrees_with_sampling_oracle(seed):
    rng = np.random.default_rng(seed)
    cfg = ValidationConfig()
    c = random_contact_set(rng, 3)
    g = np.eye(3)[seed % 3] * (-1) ** seed
    ok, margin = wrench_resistible(c, MASS, g, cfg)
    best = mc_min_residual(c, gravity_wrench(MASS, g), cfg.mu, cfg.facets, cfg.f_max, rng,
                           n_samples=20_000)
    if best <= 1e-6:
        assert ok
    # the solver minimizes the residual over a superset of the sampled forces
    lp_residual = 0.0 if ok else -margin
    assert best >= lp_residual - 1e-7


def sphere_cage():
    e = np.vstack([np.eye(3), -np.eye(3)]) * 0.03
    return [Contact(p, -p / 0.03) for p in e]


def test_six_contact_cage_robust_all_directions():
    for g in np.vstack([np.eye(3), -np.eye(3)]):
        ok, margin = wrench_resistible(sphere_cage(), MASS, g)
        assert ok and margin > 0


def test_single_contact_not_robust(hand, objects):
    c = [Contact(np.array([0.03, 0, 0]), np.array([-1.0, 0, 0]))]
    verdicts = [wrench_resistible(c, MASS, g)[0] for g in np.vstack([np.eye(3), -np.eye(3)])]
    # only pushing straight against gravity through the center balances
    assert verdicts == [True, False, False, False, False, False]
    s = objects["sphere"]
    theta, T, a = init_candidate(hand, s, "pinch", np.random.default_rng(0))
    robust, margins = rotation_robustness(hand, theta, T, s, contacts=c)
    assert not robust and np.sum(margins < 0) >= 5


def test_pinch_lateral_threshold_in_mu():
    """Lateral support of an antipodal pinch appears at a single friction threshold."""
    mus = np.linspace(0.005, 0.9, 60)
    verdicts = [wrench_resistible(antipodal(0), MASS, [0, 0, -1], ValidationConfig(mu=m))[0] for m in mus]
    assert not verdicts[0] and verdicts[-1]
    flips = np.flatnonzero(np.diff(np.array(verdicts, int)))
    assert len(flips) == 1
    # two edges each pushing f_max sideways: 2 * mu * f_max * cos(pi/8)-ish needed to cover m g
    mu_star = mus[flips[0] + 1]
    need = MASS * 9.81 / (2 * 10.0)
    assert need * 0.9 <= mu_star <= need / np.cos(np.pi / 8) * 1.1 + (mus[1] - mus[0])
    for g in ([1, 0, 0], [-1, 0, 0]):
        assert wrench_resistible(antipodal(0), MASS, g, ValidationConfig(mu=0.01))[0]


contact_sets = st.builds(lambda seed, n: random_contact_set(np.random.default_rng(seed), n),
                         st.integers(0, 2**31), st.integers(2, 5))
gravity = st.sampled_from(list(np.vstack([np.eye(3), -np.eye(3)])))


@settings(max_examples=60, deadline=None)
@given(contact_sets, gravity, st.floats(0.05, 1.5), st.floats(0.05, 1.5))
def test_mu_monotone(c, g, m1, m2):
    lo, hi = sorted((m1, m2))
    if wrench_resistible(c, MASS, g, ValidationConfig(mu=lo))[0]:
        assert wrench_resistible(c, MASS, g, ValidationConfig(mu=hi))[0]


@settings(max_examples=60, deadline=None)
@given(contact_sets, gravity, st.integers(0, 2**31))
def test_contact_monotone(c, g, seed):
    extra = random_contact_set(np.random.default_rng(seed), 1)
    if wrench_resistible(c, MASS, g)[0]:
        assert wrench_resistible(c + extra, MASS, g)[0]


@settings(max_examples=40, deadline=None)
@given(contact_sets, gravity, st.integers(0, 2**31))
def test_frame_invariance(c, g, seed):
    R = Rotation.random(random_state=seed).as_matrix()
    ok, margin = wrench_resistible(c, MASS, g)
    rc = [Contact(R @ x.point, R @ x.normal) for x in c]
    ok2, margin2 = wrench_resistible(rc, MASS, R @ g)
    if abs(margin) > 1e-6:  # verdicts at the boundary are numerically undecided
        assert ok == ok2
    # the margin ball is axis-aligned, so only the verdict is rotation invariant


@settings(max_examples=40, deadline=None)
@given(contact_sets, gravity, st.integers(0, 2**31))
def test_margin_continuity(c, g, seed):
    rng = np.random.default_rng(seed)
    _, m0 = wrench_resistible(c, MASS, g)
    moved = [Contact(x.point + 1e-6 * rng.uniform(-1, 1, 3), x.normal) for x in c]
    _, m1 = wrench_resistible(moved, MASS, g)
    assert abs(m1 - m0) < 10 * 1e-6 * max(1.0, 10.0 * len(c))


# ------------------------------------------------------------- contacts

def test_detect_contacts_far_and_tangent(hand, objects):
    s = objects["sphere"]
    theta = hand.mid_range
    assert detect_contacts(hand, theta, Pose(np.eye(3), np.array([5.0, 0, 0])), s) == []
    # put the sphere so that it just touches collision sphere 0 from outside
    fk = hand.fk(theta[None])
    xs = hand.sphere_world(fk)[0]
    i = int(np.argmax(xs[:, 2]))  # the topmost sphere has free space above it
    r = s.params["r"]
    center = xs[i] + np.array([0, 0, hand.sphere_radii[i] + r])
    c = detect_contacts(hand, theta, Pose(np.eye(3), center), s, activation=1e-9)
    assert len(c) == 1
    np.testing.assert_allclose(c[0].point, xs[i] + [0, 0, hand.sphere_radii[i]], atol=1e-12)
    np.testing.assert_allclose(c[0].normal, [0, 0, 1], atol=1e-12)


def test_report_invariant_and_json():
    rep = ValidationReport(False, np.arange(6.0) - 1, True, "wrench_infeasible", "+x", 2)
    assert not rep.valid
    assert ValidationReport.from_json(rep.to_json()).to_json() == rep.to_json()
    with pytest.raises(ValueError):
        ValidationReport(True, np.zeros(6), True, "bogus")


def test_rotation_robustness_agrees_with_margins(hand, objects):
    s = objects["sphere"]
    theta, T, a = init_candidate(hand, s, "pinch", np.random.default_rng(0))
    robust, margins = rotation_robustness(hand, theta, T, s)
    assert robust == bool(np.all(margins >= 0))


# ------------------------------------------------------------- execution feasibility

def _record(hand, obj, seed=0):
    theta, T, a = init_candidate(hand, obj, "pinch", np.random.default_rng(seed))
    return GraspRecord(style="pinch", object_id=obj.id, theta=theta, T=T, assignment=a,
                       energy=total_energy(hand, theta, T, obj, a))


def test_top_grasp_on_lone_sphere_feasible(hand, objects):
    s = objects["sphere"]
    for seed in range(5):
        rec = _record(hand, s, seed)
        assert hand_world_pose(s, rec.T).rotation[2, 2] < -0.5  # palm faces down
        assert execution_feasibility(hand, rec, s)


def test_palm_below_table_infeasible(hand, objects):
    s = objects["sphere"]
    rec = _record(hand, s)
    H = hand_world_pose(s, rec.T)
    H = Pose(H.rotation, H.translation - [0, 0, H.translation[2] + 0.05])
    rec.T = H.inverse() @ s.canonical_pose
    assert not execution_feasibility(hand, rec, s)
    assert execution_feasibility(hand, rec, s, table=False) is not None


def test_blocking_object_infeasible(hand, objects):
    s, box = objects["sphere"], objects["cube"]
    rec = _record(hand, s)
    H = hand_world_pose(s, rec.T)
    blocker = Pose(np.eye(3), H.translation - 0.06 * H.rotation[:, 2])
    assert execution_feasibility(hand, rec, s)
    assert not execution_feasibility(hand, rec, s, scene=[(box, blocker)])


def test_validate_reports_reason(hand, objects):
    s = objects["sphere"]
    rec = _record(hand, s)
    far = GraspRecord(style="pinch", object_id="sphere", theta=rec.theta,
                      T=Pose(np.eye(3), np.array([1.0, 0, 0])), assignment=rec.assignment,
                      energy=rec.energy)
    rep = validate(hand, far, s)
    assert rep.reason == "no_contacts" and not rep.rotation_robust and rep.n_contacts == 0
    assert np.all(rep.margins < 0)
