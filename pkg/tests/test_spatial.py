import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from seqgrasp.spatial import Pose, exp_so3, project_rotation, random_rotation, rpy_matrix, skew

finite = st.floats(-10, 10, allow_nan=False)


def test_skew_matches_cross(rng):
    a, b = rng.standard_normal((2, 3))
    np.testing.assert_allclose(skew(a) @ b, np.cross(a, b), atol=1e-15)


def test_rpy_matches_scipy_extrinsic_xyz(rng):
    for rpy in rng.uniform(-np.pi, np.pi, (20, 3)):
        ref = Rotation.from_euler("xyz", rpy).as_matrix()
        np.testing.assert_allclose(rpy_matrix(rpy), ref, atol=1e-12)


def test_exp_so3_matches_rotvec(rng):
    for w in rng.standard_normal((20, 3)):
        np.testing.assert_allclose(exp_so3(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=9, max_size=9))
def test_projection_is_a_rotation(vals):
    M = np.array(vals).reshape(3, 3)
    if np.linalg.matrix_rank(M, tol=1e-6) < 2:
        return
    R = project_rotation(M)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


def test_projection_fixes_rotations_and_is_nearest(rng):
    R = random_rotation(rng)
    np.testing.assert_allclose(project_rotation(R), R, atol=1e-12)
    M = R + 0.05 * rng.standard_normal((3, 3))
    P = project_rotation(M)
    for Q in random_rotation(rng, 200):
        assert np.linalg.norm(M - P) <= np.linalg.norm(M - Q) + 1e-12


def test_projection_rejects_degenerate():
    with pytest.raises(ValueError):
        project_rotation(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        project_rotation(np.full((3, 3), np.nan))


def test_pose_algebra(rng):
    A = Pose(random_rotation(rng), rng.standard_normal(3))
    B = Pose(random_rotation(rng), rng.standard_normal(3))
    p = rng.standard_normal((5, 3))
    np.testing.assert_allclose((A @ B).apply(p), A.apply(B.apply(p)), atol=1e-12)
    np.testing.assert_allclose((A @ A.inverse()).as_matrix(), np.eye(4), atol=1e-12)
    np.testing.assert_allclose(Pose.from_matrix(A.as_matrix()).as_matrix(), A.as_matrix())
    assert Pose.from_json(A.to_json()).to_json() == A.to_json()
    assert A.is_valid()
