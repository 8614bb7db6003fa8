import json

import numpy as np
import pytest

from halo.errors import DegenerateBone, NonFiniteCoordinate, WrongJointCount
from halo.skeleton import (BONE_CHILD_JOINT, BONE_FINGER, BONE_LEVEL,
                           BONE_PARENT, BONE_PARENT_JOINT, Skeleton,
                           bone_lengths, load_skeleton_csv,
                           load_skeleton_json, save_skeleton_json,
                           to_bone_vectors, validate_skeleton)


def grid_joints():
    # 21 distinct points, all bones non-degenerate
    rng = np.random.default_rng(7)
    return rng.uniform(-50.0, 120.0, size=(21, 3))


class TestTree:
    def test_every_nonroot_bone_has_parent(self):
        assert np.all(BONE_PARENT[5:] >= 0)
        assert np.all(BONE_PARENT[:5] == -1)

    def test_parent_child_joints_chain(self):
        # each non-palmar bone starts where its parent bone ends
        for i in range(5, 20):
            assert BONE_PARENT_JOINT[i] == BONE_CHILD_JOINT[BONE_PARENT[i]]

    def test_levels_and_fingers(self):
        assert list(BONE_LEVEL) == [0] * 5 + [1] * 5 + [2] * 5 + [3] * 5
        assert list(BONE_FINGER[:5]) == [0, 1, 2, 3, 4]
        # a bone and its parent belong to the same finger
        for i in range(5, 20):
            assert BONE_FINGER[i] == BONE_FINGER[BONE_PARENT[i]]


class TestValidate:
    def test_accepts_valid(self):
        s = validate_skeleton(grid_joints())
        assert isinstance(s, Skeleton)
        assert s.joints.shape == (21, 3)

    def test_wrong_count(self):
        with pytest.raises(WrongJointCount):
            validate_skeleton(np.zeros((20, 3)))

    def test_non_finite(self):
        j = grid_joints()
        j[3, 1] = np.nan
        with pytest.raises(NonFiniteCoordinate):
            validate_skeleton(j)

    def test_degenerate_bone(self):
        j = grid_joints()
        j[1] = j[0]  # collapse the thumb palmar bone
        with pytest.raises(DegenerateBone):
            validate_skeleton(j)

    def test_left_hand_mirrored(self):
        j = grid_joints()
        right = validate_skeleton(j, handedness="right")
        left = validate_skeleton(j, handedness="left")
        assert np.allclose(left.joints[:, 0], -right.joints[:, 0])
        assert np.allclose(left.joints[:, 1:], right.joints[:, 1:])
        assert left.handedness == "right"

    def test_joints_read_only(self):
        s = validate_skeleton(grid_joints())
        with pytest.raises(ValueError):
            s.joints[0, 0] = 1.0


class TestBoneVectors:
    def test_unit_directions(self):
        bv = to_bone_vectors(validate_skeleton(grid_joints()))
        assert np.allclose(np.linalg.norm(bv.directions, axis=1), 1.0)

    def test_lengths_positive_and_match(self):
        s = validate_skeleton(grid_joints())
        bv = to_bone_vectors(s)
        bl = bone_lengths(s)
        assert np.all(bl.d > 0)
        assert np.allclose(bv.lengths, bl.d)

    def test_translation_invariant(self):
        j = grid_joints()
        a = to_bone_vectors(validate_skeleton(j))
        b = to_bone_vectors(validate_skeleton(j + np.array([10.0, -4.0, 2.5])))
        assert np.allclose(a.directions, b.directions)
        assert np.allclose(a.lengths, b.lengths)


class TestFileIO:
    def test_json_round_trip(self, tmp_path):
        s = validate_skeleton(grid_joints())
        path = tmp_path / "s.json"
        save_skeleton_json(s, path)
        s2 = load_skeleton_json(path)
        assert np.array_equal(s.joints, s2.joints)

    def test_json_units_field(self, tmp_path):
        s = validate_skeleton(grid_joints())
        path = tmp_path / "s.json"
        save_skeleton_json(s, path)
        data = json.loads(path.read_text())
        assert data["units"] == "mm"
        assert len(data["joints"]) == 21

    def test_csv_load(self, tmp_path):
        j = grid_joints()
        path = tmp_path / "s.csv"
        path.write_text("\n".join(",".join(f"{v:.17g}" for v in row) for row in j))
        s = load_skeleton_csv(path)
        assert np.allclose(s.joints, j)
