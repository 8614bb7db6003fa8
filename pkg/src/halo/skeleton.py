"""Hand skeleton data model, kinematic tree, and keypoints-to-bone-vectors mapping.

Joint ordering (fixed program data, also the on-disk ordering):
    0            wrist (root)
    1..4         thumb, base to tip
    5..8         index, base to tip
    9..12        middle, base to tip
    13..16       ring, base to tip
    17..20       pinky, base to tip

Bone ordering (0-based, 20 bones):
    0..4         level-0 (palmar) bones, finger order thumb..pinky
    5..9         level-1 bones
    10..14       level-2 bones
    15..19       level-3 bones
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBone, NonFiniteCoordinate, WrongJointCount

N_JOINTS = 21
N_BONES = 20
MIN_BONE_LENGTH = 1e-6  # mm

# Kinematic tree: static program data, identical across all skeletons.
# Joint endpoints per bone.
BONE_PARENT_JOINT = np.array(
    [0, 0, 0, 0, 0,
     1, 5, 9, 13, 17,
     2, 6, 10, 14, 18,
     3, 7, 11, 15, 19])
BONE_CHILD_JOINT = np.array(
    [1, 5, 9, 13, 17,
     2, 6, 10, 14, 18,
     3, 7, 11, 15, 19,
     4, 8, 12, 16, 20])
# Parent bone index, -1 for level-0 bones attached to the root.
BONE_PARENT = np.array(
    [-1, -1, -1, -1, -1,
     0, 1, 2, 3, 4,
     5, 6, 7, 8, 9,
     10, 11, 12, 13, 14])
BONE_LEVEL = np.repeat(np.arange(4), 5)
# Finger index 0..4 = thumb, index, middle, ring, pinky.
BONE_FINGER = np.tile(np.arange(5), 4)


@dataclass(frozen=True)
class Skeleton:
    """21 joint positions in millimeters, right-hand convention."""

    joints: np.ndarray  # (21, 3) float64
    handedness: str = "right"

    def __post_init__(self):
        object.__setattr__(self, "joints", np.asarray(self.joints, dtype=np.float64))
        self.joints.setflags(write=False)


@dataclass(frozen=True)
class BoneVectors:
    """Unit bone directions and bone lengths of a root-aligned skeleton."""

    directions: np.ndarray  # (20, 3), unit norm
    lengths: np.ndarray     # (20,), mm


@dataclass(frozen=True)
class BoneLengths:
    d: np.ndarray  # (20,), mm, all > 0


def validate_skeleton(raw, handedness: str = "right") -> Skeleton:
    """Validate raw 21x3 joint positions and return a Skeleton.

    Left hands are mirrored to the right-hand convention by negating x.

    Raises:
        WrongJointCount: input is not 21x3.
        NonFiniteCoordinate: any coordinate is NaN or infinite.
        DegenerateBone: a bone is shorter than 1e-6 mm.
    """
    joints = np.asarray(raw, dtype=np.float64)
    if joints.shape != (N_JOINTS, 3):
        raise WrongJointCount(f"expected {N_JOINTS}x3 joints, got shape {joints.shape}")
    if not np.all(np.isfinite(joints)):
        raise NonFiniteCoordinate("joint coordinates must be finite")
    if handedness not in ("left", "right"):
        raise ValueError(f"handedness must be 'left' or 'right', got {handedness!r}")
    if handedness == "left":
        joints = joints * np.array([-1.0, 1.0, 1.0])
    seg = joints[BONE_CHILD_JOINT] - joints[BONE_PARENT_JOINT]
    lengths = np.linalg.norm(seg, axis=1)
    if np.any(lengths <= MIN_BONE_LENGTH):
        bad = int(np.argmin(lengths))
        raise DegenerateBone(f"bone {bad} has length {lengths[bad]:.3g} mm")
    return Skeleton(joints=joints, handedness="right")


def to_bone_vectors(s: Skeleton) -> BoneVectors:
    """Map keypoints to unit bone vectors and lengths (root-aligned)."""
    joints = s.joints - s.joints[0]
    seg = joints[BONE_CHILD_JOINT] - joints[BONE_PARENT_JOINT]
    lengths = np.linalg.norm(seg, axis=1)
    return BoneVectors(directions=seg / lengths[:, None], lengths=lengths)


def bone_lengths(s: Skeleton) -> BoneLengths:
    seg = s.joints[BONE_CHILD_JOINT] - s.joints[BONE_PARENT_JOINT]
    return BoneLengths(d=np.linalg.norm(seg, axis=1))


def save_skeleton_json(s: Skeleton, path) -> None:
    data = {
        "units": "mm",
        "handedness": s.handedness,
        "joints": s.joints.tolist(),
    }
    with open(path, "w") as f:
        json.dump(data, f, indent=1)


def load_skeleton_json(path) -> Skeleton:
    with open(path) as f:
        data = json.load(f)
    return validate_skeleton(data["joints"], data.get("handedness", "right"))


def load_skeleton_csv(path) -> Skeleton:
    """21 rows of x,y,z in the documented joint order."""
    rows = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if row:
                rows.append([float(v) for v in row[:3]])
    return validate_skeleton(rows)
