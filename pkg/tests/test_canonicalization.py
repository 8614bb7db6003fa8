import numpy as np
import pytest

from halo import diffcore as dc
from halo.canonicalization import (AngleSet, CANONICAL_PLANE, CANONICAL_SPREAD,
                                   canonical_angles_of, canonical_skeleton,
                                   canonicalization_transforms,
                                   pose_from_angles, validate_angles)
from halo.errors import AngleOutOfRange, CollinearPalmarBones
from halo.skeleton import (BONE_CHILD_JOINT, BONE_PARENT_JOINT, Skeleton,
                           bone_lengths)
from tests.conftest import make_random_skeletons


def apply44(mats, points):
    """Apply one 4x4 per row of points (n, 3)."""
    h = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    out = np.einsum("nij,nj->ni", mats, h)
    return out[:, :3]


def rigid_motion(seed=0):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])
    return rot, rng.uniform(-80.0, 80.0, size=3)


class TestReferencePose:
    def test_flat_hand_has_zero_finger_angles(self, flat_hand):
        a = canonical_angles_of(flat_hand)
        assert np.max(np.abs(a.flexion)) < 1e-9
        assert np.max(np.abs(a.abduction)) < 1e-9
        assert np.allclose(a.spread, CANONICAL_SPREAD, atol=1e-9)
        assert np.allclose(a.plane, CANONICAL_PLANE, atol=1e-9)

    def test_flat_hand_transforms_are_identity(self, flat_hand):
        bt, _ = canonicalization_transforms(flat_hand)
        eye = np.broadcast_to(np.eye(4), (20, 4, 4))
        assert np.max(np.abs(bt.inv - eye)) < 1e-9
        assert np.max(np.abs(bt.fwd - eye)) < 1e-9

    def test_wrist_at_origin(self, flat_hand):
        assert np.allclose(flat_hand.joints[0], 0.0)

    def test_preserves_bone_lengths(self, template_lengths):
        s = canonical_skeleton(template_lengths)
        assert np.allclose(bone_lengths(s).d, template_lengths, atol=1e-9)


class TestRoundTrip:
    def test_angles_round_trip(self):
        for s in make_random_skeletons(25, seed=3):
            a = canonical_angles_of(s)
            s2 = pose_from_angles(bone_lengths(s).d, a)
            a2 = canonical_angles_of(s2)
            for field in ("flexion", "abduction", "spread", "plane"):
                err = np.max(np.abs(getattr(a, field) - getattr(a2, field)))
                assert err < 1e-6, field

    def test_inv_maps_posed_joints_to_canonical(self):
        for s in make_random_skeletons(10, seed=4):
            bt, a = canonicalization_transforms(s)
            canon = canonical_skeleton(bone_lengths(s).d)
            posed_child = s.joints[BONE_CHILD_JOINT]
            canon_child = canon.joints[BONE_CHILD_JOINT]
            err = np.max(np.abs(apply44(bt.inv, posed_child) - canon_child))
            assert err < 1e-6
            posed_parent = s.joints[BONE_PARENT_JOINT]
            canon_parent = canon.joints[BONE_PARENT_JOINT]
            err = np.max(np.abs(apply44(bt.inv, posed_parent) - canon_parent))
            assert err < 1e-6

    def test_fwd_is_inverse_of_inv(self):
        for s in make_random_skeletons(10, seed=5):
            bt, _ = canonicalization_transforms(s)
            prod = np.einsum("bij,bjk->bik", bt.fwd, bt.inv)
            assert np.max(np.abs(prod - np.eye(4))) < 1e-9

    def test_fwd_reconstructs_posed_joints(self):
        # posing the canonical joints with fwd gives back the input skeleton
        for s in make_random_skeletons(10, seed=6):
            bt, _ = canonicalization_transforms(s)
            canon = canonical_skeleton(bone_lengths(s).d)
            rec = apply44(bt.fwd, canon.joints[BONE_CHILD_JOINT])
            assert np.max(np.abs(rec - s.joints[BONE_CHILD_JOINT])) < 1e-6


class TestRigidity:
    def test_rotation_blocks_orthonormal(self):
        for s in make_random_skeletons(10, seed=7):
            bt, _ = canonicalization_transforms(s)
            for mats in (bt.inv, bt.fwd):
                r = mats[:, :3, :3]
                gram = np.einsum("bij,bkj->bik", r, r)
                assert np.max(np.abs(gram - np.eye(3))) < 1e-8
                assert np.max(np.abs(np.linalg.det(r) - 1.0)) < 1e-8
                assert np.max(np.abs(mats[:, 3, :] - [0, 0, 0, 1])) < 1e-12

    def test_pose_invariant_to_rigid_motion(self):
        rot, t = rigid_motion(seed=11)
        for s in make_random_skeletons(8, seed=8):
            moved = Skeleton(joints=s.joints @ rot.T + t)
            a1 = canonical_angles_of(s)
            a2 = canonical_angles_of(moved)
            for field in ("flexion", "abduction", "spread", "plane"):
                err = np.max(np.abs(getattr(a1, field) - getattr(a2, field)))
                assert err < 1e-8, field

    def test_canonical_joints_invariant_to_rigid_motion(self):
        from halo.canonicalization import _canonicalize
        rot, t = rigid_motion(seed=12)
        s = make_random_skeletons(1, seed=9)[0]
        r1 = _canonicalize(s.joints)
        r2 = _canonicalize(s.joints @ rot.T + t)
        assert np.max(np.abs(r1.canonical_joints - r2.canonical_joints)) < 1e-8


class TestDeterminism:
    def test_bitwise_repeatable(self):
        s = make_random_skeletons(1, seed=10)[0]
        b1, a1 = canonicalization_transforms(s)
        b2, a2 = canonicalization_transforms(s)
        assert np.array_equal(b1.inv, b2.inv)
        assert np.array_equal(b1.fwd, b2.fwd)
        assert np.array_equal(a1.flexion, a2.flexion)
        assert np.array_equal(a1.spread, a2.spread)


class TestGradients:
    def test_transforms_differentiable(self):
        from halo.canonicalization import _canonicalize
        s = make_random_skeletons(1, seed=13)[0]
        rng = np.random.default_rng(0)
        w = rng.normal(size=(20, 4, 4))

        def f(flat):
            res = _canonicalize(dc.reshape(flat, (21, 3)))
            return dc.sum_(res.inv * w)

        err = dc.finite_diff_check(f, s.joints.ravel(), h=1e-5)
        assert err < 1e-6

    def test_angles_differentiable(self):
        from halo.canonicalization import _canonicalize
        s = make_random_skeletons(1, seed=14)[0]

        def f(flat):
            res = _canonicalize(dc.reshape(flat, (21, 3)))
            return (dc.sum_(res.flexion) + dc.sum_(res.abduction)
                    + dc.sum_(res.spread) + dc.sum_(res.plane))

        err = dc.finite_diff_check(f, s.joints.ravel(), h=1e-5)
        assert err < 1e-6


class TestValidation:
    def test_angle_ranges_enforced(self):
        bad = AngleSet(flexion=np.full(15, 2.0), abduction=np.zeros(15),
                       spread=CANONICAL_SPREAD.copy(), plane=CANONICAL_PLANE.copy())
        with pytest.raises(AngleOutOfRange):
            validate_angles(bad)
        with pytest.raises(AngleOutOfRange):
            pose_from_angles(np.full(20, 30.0), bad)

    def test_collinear_palm_rejected(self):
        # all five palmar bones point straight up +z; fingers fan out in x
        j = np.zeros((21, 3))
        for f in range(5):
            base = 1 + 4 * f
            j[base] = [0.0, 0.0, 30.0 + 5.0 * f]
            for level in range(1, 4):
                j[base + level] = j[base] + [10.0 * level, 2.0 * f, 0.0]
        with pytest.raises(CollinearPalmarBones):
            canonicalization_transforms(Skeleton(joints=j))
