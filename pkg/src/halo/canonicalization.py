"""Differentiable mapping from 21 keypoints to per-bone canonicalizing transforms.

Pipeline, per skeleton:
  1. root-align and rotate the hand to a fixed global anchor (middle palmar
     bone to +z, the index-middle palm-plane normal to +x),
  2. rotate the palmar bones to a reference palm with fixed plane-pair and
     spread angles (middle finger and the index-middle plane stay fixed),
  3. build local coordinate frames for every non-palmar bone along the
     kinematic chain, measure flexion/abduction angles in them,
  4. rotate every bone to its reference flexion/abduction, accumulating
     rotations along the chain and mapping them back to global coordinates,
  5. restore bone lengths and re-attach bones to their parents' tips.

All math goes through `diffcore`, so the same code runs in plain numpy and
recorded on a tape for gradients with respect to the joint coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import value_of
from .errors import AngleOutOfRange, CollinearPalmarBones, DegenerateFrame
from .skeleton import (BONE_CHILD_JOINT, BONE_FINGER, BONE_PARENT,
                       BONE_PARENT_JOINT, BoneVectors, Skeleton)

# Reference palm configuration (radians).
CANONICAL_PLANE = np.array([0.8, 0.2, 0.2])      # angles between adjacent palm planes
CANONICAL_SPREAD = np.array([0.4, 0.2, 0.2, 0.2])  # angles between adjacent palmar bones

# Biomechanical angle ranges, enforced only when synthesizing skeletons.
FLEXION_RANGE = (-0.4, 1.6)
ABDUCTION_RANGE_L1 = (-0.45, 0.45)
ABDUCTION_RANGE_DEEP = (-0.2, 0.2)
SPREAD_RANGES = [(0.3, 1.1), (0.08, 0.45), (0.08, 0.45), (0.08, 0.45)]
PLANE_RANGES = [(0.3, 1.3), (-0.2, 0.6), (-0.2, 0.6)]

_COLLINEAR_EPS = 1e-8


@dataclass(frozen=True)
class PalmFrame:
    """Palm-plane normals and the unsigned palm angles."""

    normals: np.ndarray            # (4, 3) unit normals of adjacent-bone planes
    plane_pair_angles: np.ndarray  # (3,) in [0, pi)
    spread_angles: np.ndarray      # (4,) in (0, pi)


@dataclass(frozen=True)
class LocalFrame:
    """Right-handed orthonormal basis; z is the parent bone direction."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def matrix(self):
        return np.stack([self.x, self.y, self.z], axis=1)


@dataclass(frozen=True)
class AngleSet:
    """Biomechanical angle parameterization of a hand pose.

    flexion/abduction cover the 15 non-palmar bones (chain order: level-1
    thumb..pinky, then level-2, then level-3). plane angles are signed;
    spread angles are unsigned.
    """

    flexion: np.ndarray    # (15,)
    abduction: np.ndarray  # (15,)
    spread: np.ndarray     # (4,)
    plane: np.ndarray      # (3,)


@dataclass(frozen=True)
class BoneTransformSet:
    inv: np.ndarray  # (20, 4, 4) posed -> canonical
    fwd: np.ndarray  # (20, 4, 4) canonical -> posed


@dataclass(frozen=True)
class CanonicalPose:
    """Reference pose: flat hand (zero flexion/abduction) at the fixed palm angles.

    Swappable: pass a different instance to canonicalization_transforms or
    pose_from_angles to change the reference.
    """

    flexion: np.ndarray = field(default_factory=lambda: np.zeros(15))
    abduction: np.ndarray = field(default_factory=lambda: np.zeros(15))
    spread: np.ndarray = field(default_factory=lambda: CANONICAL_SPREAD.copy())
    plane: np.ndarray = field(default_factory=lambda: CANONICAL_PLANE.copy())


DEFAULT_CANONICAL_POSE = CanonicalPose()


# ---------------------------------------------------------------------------
# generic small-matrix helpers (Var or ndarray)
# ---------------------------------------------------------------------------

def _mv(m, v):
    if not (isinstance(m, dc.Var) or isinstance(v, dc.Var)):
        return (m @ np.reshape(v, (3, 1))).reshape(3)
    return dc.reshape(dc.matmul(m, dc.reshape(v, (3, 1))), (3,))


def _mat_t(m):
    return dc.transpose(m, (1, 0)) if isinstance(m, dc.Var) else np.transpose(m)


def _rot_axis(axis, angle):
    """Rodrigues rotation matrix about a unit axis."""
    if not (isinstance(angle, dc.Var) or isinstance(axis, dc.Var)):
        av = np.asarray(axis, dtype=np.float64)
        c, s = np.cos(angle), np.sin(angle)
        K = np.array([[0.0, -av[2], av[1]],
                      [av[2], 0.0, -av[0]],
                      [-av[1], av[0], 0.0]])
        return c * np.eye(3) + s * K + (1.0 - c) * np.outer(av, av)
    c, s = dc.cos(angle), dc.sin(angle)
    C = dc.sub(1.0, c)
    a0, a1, a2 = axis[0], axis[1], axis[2]
    r0 = dc.stack([c + a0 * a0 * C, a0 * a1 * C - a2 * s, a0 * a2 * C + a1 * s])
    r1 = dc.stack([a1 * a0 * C + a2 * s, c + a1 * a1 * C, a1 * a2 * C - a0 * s])
    r2 = dc.stack([a2 * a0 * C - a1 * s, a2 * a1 * C + a0 * s, c + a2 * a2 * C])
    return dc.stack([r0, r1, r2], axis=0)


def _rot_x(angle):
    c, s = dc.cos(angle), dc.sin(angle)
    if isinstance(angle, dc.Var):
        one, zero = 1.0, 0.0
        return dc.stack([dc.stack([one, zero, zero]),
                         dc.stack([zero, c, -s]),
                         dc.stack([zero, s, c])], axis=0)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(angle):
    c, s = dc.cos(angle), dc.sin(angle)
    if isinstance(angle, dc.Var):
        one, zero = 1.0, 0.0
        return dc.stack([dc.stack([c, zero, s]),
                         dc.stack([zero, one, zero]),
                         dc.stack([-s, zero, c])], axis=0)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _signed_angle(u, v, axis):
    return dc.atan2(dc.dot3(dc.cross3(u, v), axis), dc.dot3(u, v))


def _unsigned_angle(u, v):
    return dc.atan2(dc.norm3(dc.cross3(u, v)), dc.dot3(u, v))


def _fa_rotation(theta_f, theta_a):
    """Local rotation realizing flexion then abduction: maps +z onto the bone."""
    return dc.matmul(_rot_y(theta_f), _rot_x(dc.neg(theta_a)))


def _rigid44(rot, trans):
    top = dc.concat([rot, dc.reshape(trans, (3, 1))], axis=1)
    bottom = np.array([[0.0, 0.0, 0.0, 1.0]])
    return dc.concat([top, bottom], axis=0)


def flexion_abduction_of(bone_local):
    """Flexion/abduction of a unit bone given in local frame coordinates."""
    bx, by, bz = bone_local[0], bone_local[1], bone_local[2]
    theta_f = dc.atan2(bx, bz)
    theta_a = dc.atan2(by, dc.sqrt(bx * bx + bz * bz + 1e-14))
    return theta_f, theta_a


# ---------------------------------------------------------------------------
# palm normalization steps
# ---------------------------------------------------------------------------

# Each step drives one palm angle to a target by rotating the listed palmar
# bones (0-based: thumb..pinky) about an axis derived from the current palm.
# Plane steps rotate about the shared bone; spread steps rotate in the plane
# of the two adjacent bones. Rotations on the index/ring bones propagate to
# the thumb/pinky bones respectively.
_PALM_STEPS = (
    ("plane", 1, (3, 4)),
    ("plane", 0, (0,)),
    ("plane", 2, (4,)),
    ("spread", 1, (1, 0)),
    ("spread", 0, (0,)),
    ("spread", 2, (3, 4)),
    ("spread", 3, (4,)),
)


def _palm_normals(p):
    return [dc.unit3(dc.cross3(p[k + 1], p[k])) for k in range(4)]


def _check_palm(p):
    for k in range(4):
        c = np.linalg.norm(np.cross(value_of(p[k + 1]), value_of(p[k])))
        if c <= _COLLINEAR_EPS:
            raise CollinearPalmarBones(
                f"palmar bones {k} and {k + 1} are collinear (|cross| = {c:.3g})")


def _run_palm_steps(p, spread_targets, plane_targets, reverse=False):
    """Drive palm angles to targets. Returns (new dirs, per-bone rotations)."""
    p = list(p)
    acc = [np.eye(3) for _ in range(5)]
    steps = _PALM_STEPS[::-1] if reverse else _PALM_STEPS
    for kind, k, members in steps:
        n = _palm_normals(p)
        if kind == "plane":
            axis = p[k + 1]
            phi = _signed_angle(n[k], n[k + 1], axis)
            target = plane_targets[k]
            delta = dc.sub(phi, target) if k == 0 else dc.sub(target, phi)
        else:
            axis = n[k]
            u = _unsigned_angle(p[k], p[k + 1])
            target = spread_targets[k]
            delta = dc.sub(target, u) if k in (0, 1) else dc.sub(u, target)
        rot = _rot_axis(axis, delta)
        for m in members:
            p[m] = _mv(rot, p[m])
            acc[m] = dc.matmul(rot, acc[m])
    return p, acc


# ---------------------------------------------------------------------------
# palm geometry summaries (numpy)
# ---------------------------------------------------------------------------

def palm_frame(bv: BoneVectors) -> PalmFrame:
    """Palm-plane normals and unsigned plane-pair/spread angles."""
    p = [bv.directions[k] for k in range(5)]
    _check_palm(p)
    normals = np.stack([value_of(n) for n in _palm_normals(p)])
    plane = np.array([float(np.abs(_signed_angle(normals[k], normals[k + 1], p[k + 1])))
                      for k in range(3)])
    spread = np.array([float(_unsigned_angle(p[k], p[k + 1])) for k in range(4)])
    return PalmFrame(normals=normals, plane_pair_angles=plane, spread_angles=spread)


def normalize_palm(bv: BoneVectors, canonical: CanonicalPose = DEFAULT_CANONICAL_POSE):
    """Rotate the palm to the reference palm angles.

    Returns the per-palmar-bone rotations (5, 3, 3) and the rotated
    BoneVectors; non-palmar bones rotate rigidly with their finger's
    palmar bone.
    """
    p = [bv.directions[k] for k in range(5)]
    _check_palm(p)
    pn, acc = _run_palm_steps(p, canonical.spread, canonical.plane)
    dirs = np.array(bv.directions, copy=True)
    for k in range(5):
        dirs[k] = pn[k]
    for i in range(5, 20):
        dirs[i] = acc[BONE_FINGER[i]] @ dirs[i]
    return np.stack(acc), BoneVectors(directions=dirs, lengths=bv.lengths)


def build_local_frames(bv_normalized: BoneVectors):
    """Local frames for bones 5..19 of a palm-normalized skeleton.

    Frames are built in level order; each child frame is the parent frame
    rotated by the parent's measured flexion/abduction.
    """
    dirs = bv_normalized.directions
    frames = _frames_and_angles([dirs[i] for i in range(20)])[0]
    out = []
    for i in range(5, 20):
        m = value_of(frames[i])
        if min(np.linalg.norm(m[:, 0]), np.linalg.norm(m[:, 1])) < _COLLINEAR_EPS:
            raise DegenerateFrame(f"frame for bone {i} is degenerate")
        out.append(LocalFrame(x=m[:, 0], y=m[:, 1], z=m[:, 2]))
    return out


def extract_flexion_abduction(bone, frame: LocalFrame):
    """Signed flexion/abduction of a unit bone with respect to a frame."""
    local = frame.matrix().T @ np.asarray(bone, dtype=np.float64)
    tf, ta = flexion_abduction_of(local)
    return float(tf), float(ta)


# ---------------------------------------------------------------------------
# full pipeline (generic)
# ---------------------------------------------------------------------------

@dataclass
class CanonResult:
    """Everything the pipeline produces; fields are Vars when recorded."""

    inv: object               # (20, 4, 4)
    fwd: object               # (20, 4, 4)
    lengths: object           # (20,)
    flexion: object           # (15,)
    abduction: object         # (15,)
    spread: object            # (4,)
    plane: object             # (3,)
    canonical_joints: object  # (21, 3)
    aligned_joints: object    # (21, 3)
    frames: list              # per bone 3x3 (None for palmar)
    align_rotation: object    # (3, 3)
    palm_rotations: list      # 5 x (3, 3)
    root: object              # (3,) original root position, mm


def _frames_and_angles(dirs_normalized):
    """Frames plus measured flexion/abduction for the normalized bone set."""
    p = dirs_normalized[:5]
    n = _palm_normals(p)
    xs = {
        5: dc.neg(n[0]),
        6: dc.neg(n[1]),
        7: dc.neg(dc.unit3(n[1] + n[2])),
        8: dc.neg(dc.unit3(n[2] + n[3])),
        9: dc.neg(n[3]),
    }
    frames = [None] * 20
    flex = [None] * 15
    abd = [None] * 15
    for f in range(5):
        i = 5 + f
        z = p[f]
        x = xs[i]
        if np.linalg.norm(value_of(x)) < _COLLINEAR_EPS:
            raise DegenerateFrame(f"x axis for bone {i} vanishes")
        y = dc.unit3(dc.cross3(z, x))
        frame = dc.stack([x, y, z], axis=1)
        for level in range(1, 4):
            i = 5 * level + f
            bone = dirs_normalized[i]
            frames[i] = frame
            local = _mv(_mat_t(frame), bone)
            tf, ta = flexion_abduction_of(local)
            flex[i - 5] = tf
            abd[i - 5] = ta
            if level < 3:
                # child frame = R_measured @ frame, which reduces to a
                # right-multiplication by the local flexion/abduction rotation
                frame = dc.matmul(frame, _fa_rotation(tf, ta))
    return frames, flex, abd


def _canonicalize(joints, canonical: CanonicalPose = DEFAULT_CANONICAL_POSE) -> CanonResult:
    """Core pipeline; `joints` is a (21, 3) ndarray or Var."""
    j0 = joints[0]
    ja = joints - j0

    # bone vectors
    tb = [ja[int(c)] - ja[int(pj)]
          for c, pj in zip(BONE_CHILD_JOINT, BONE_PARENT_JOINT)]
    lengths = [dc.norm3(t) for t in tb]
    b = [dc.unit3(t) for t in tb]

    # global anchor: middle palmar bone to +z, index-middle plane normal to +x
    _check_palm(b[:5])
    e_z = b[2]
    e_x = dc.unit3(dc.cross3(b[2], b[1]))
    e_y = dc.unit3(dc.cross3(e_z, e_x))
    align = dc.stack([e_x, e_y, e_z], axis=0)
    b = [_mv(align, d) for d in b]
    ja_rows = [_mv(align, ja[i]) for i in range(21)]

    # palm angles of the input (pre-normalization), for the AngleSet
    n_in = _palm_normals(b[:5])
    spread = [_unsigned_angle(b[k], b[k + 1]) for k in range(4)]
    plane = [_signed_angle(n_in[k], n_in[k + 1], b[k + 1]) for k in range(3)]

    # palm normalization
    pn, acc = _run_palm_steps(b[:5], canonical.spread, canonical.plane)
    dirs_norm = list(pn) + [_mv(acc[BONE_FINGER[i]], b[i]) for i in range(5, 20)]

    # frames and measured angles
    frames, flex, abd = _frames_and_angles(dirs_norm)

    # per-bone canonicalizing rotations, accumulated along each chain
    Q = [None] * 20
    for k in range(5):
        Q[k] = acc[k]
    G = [None] * 20
    for f in range(5):
        g = np.eye(3)
        for level in range(1, 4):
            i = 5 * level + f
            frame = frames[i]
            tf, ta = flex[i - 5], abd[i - 5]
            tfc, tac = canonical.flexion[i - 5], canonical.abduction[i - 5]
            rc_local = dc.matmul(_fa_rotation(tfc, tac),
                                 _mat_t(_fa_rotation(tf, ta)))
            rc = dc.matmul(dc.matmul(frame, rc_local), _mat_t(frame))
            g = dc.matmul(g, rc)
            G[i] = g
            Q[i] = dc.matmul(g, acc[f])

    # canonical joints
    cj = [None] * 21
    cj[0] = np.zeros(3)
    order = list(range(5)) + list(range(5, 20))
    for i in order:
        pj = int(BONE_PARENT_JOINT[i])
        c = int(BONE_CHILD_JOINT[i])
        cdir = _mv(Q[i], b[i])
        cj[c] = cj[pj] + lengths[i] * cdir

    # homogeneous transforms; B^{-1} x = Q_i @ align @ (x - j0) + t_i
    inv_list = []
    fwd_list = []
    for i in range(20):
        pj = int(BONE_PARENT_JOINT[i])
        W = dc.matmul(Q[i], align)
        t = cj[pj] - _mv(Q[i], ja_rows[pj]) - _mv(W, joints[0])
        inv_list.append(_rigid44(W, t))
        Wt = _mat_t(W)
        fwd_list.append(_rigid44(Wt, dc.neg(_mv(Wt, t))))

    return CanonResult(
        inv=dc.stack(inv_list, axis=0),
        fwd=dc.stack(fwd_list, axis=0),
        lengths=dc.stack(lengths),
        flexion=dc.stack(flex),
        abduction=dc.stack(abd),
        spread=dc.stack(spread),
        plane=dc.stack(plane),
        canonical_joints=dc.stack(cj, axis=0),
        aligned_joints=dc.stack(ja_rows, axis=0),
        frames=frames,
        align_rotation=align,
        palm_rotations=acc,
        root=j0,
    )


def canonicalization_transforms(s: Skeleton,
                                canonical: CanonicalPose = DEFAULT_CANONICAL_POSE):
    """Per-bone posed<->canonical transforms and the extracted angles."""
    res = _canonicalize(np.asarray(s.joints, dtype=np.float64), canonical)
    angles = AngleSet(flexion=res.flexion, abduction=res.abduction,
                      spread=res.spread, plane=res.plane)
    return BoneTransformSet(inv=res.inv, fwd=res.fwd), angles


def canonical_angles_of(s: Skeleton,
                        canonical: CanonicalPose = DEFAULT_CANONICAL_POSE) -> AngleSet:
    """Extract the biomechanical angles of a skeleton."""
    return canonicalization_transforms(s, canonical)[1]


# ---------------------------------------------------------------------------
# synthesis (inverse direction)
# ---------------------------------------------------------------------------

def _palm_from_angles(spread, plane):
    """Construct palmar bone directions at the anchor from palm angles."""
    p = [None] * 5
    p[2] = np.array([0.0, 0.0, 1.0])
    n1 = np.array([1.0, 0.0, 0.0])
    p[1] = _rot_axis(n1, float(spread[1])) @ p[2]
    n0 = _rot_axis(p[1], -float(plane[0])) @ n1
    p[0] = _rot_axis(n0, float(spread[0])) @ p[1]
    n2 = _rot_axis(p[2], float(plane[1])) @ n1
    p[3] = _rot_axis(n2, -float(spread[2])) @ p[2]
    n3 = _rot_axis(p[3], float(plane[2])) @ n2
    p[4] = _rot_axis(n3, -float(spread[3])) @ p[3]
    return p


_CANONICAL_PALM_CACHE = {}


def _canonical_palm(canonical: CanonicalPose):
    key = (tuple(canonical.spread), tuple(canonical.plane))
    if key not in _CANONICAL_PALM_CACHE:
        _CANONICAL_PALM_CACHE[key] = _palm_from_angles(canonical.spread, canonical.plane)
    return _CANONICAL_PALM_CACHE[key]


def validate_angles(a: AngleSet) -> None:
    """Check the documented biomechanical ranges; raise AngleOutOfRange."""
    for i in range(15):
        lo, hi = FLEXION_RANGE
        if not lo <= a.flexion[i] <= hi:
            raise AngleOutOfRange(f"flexion[{i}] = {a.flexion[i]:.3f} outside [{lo}, {hi}]")
        lo, hi = ABDUCTION_RANGE_L1 if i < 5 else ABDUCTION_RANGE_DEEP
        if not lo <= a.abduction[i] <= hi:
            raise AngleOutOfRange(f"abduction[{i}] = {a.abduction[i]:.3f} outside [{lo}, {hi}]")
    for k in range(4):
        lo, hi = SPREAD_RANGES[k]
        if not lo <= a.spread[k] <= hi:
            raise AngleOutOfRange(f"spread[{k}] = {a.spread[k]:.3f} outside [{lo}, {hi}]")
    for k in range(3):
        lo, hi = PLANE_RANGES[k]
        if not lo <= a.plane[k] <= hi:
            raise AngleOutOfRange(f"plane[{k}] = {a.plane[k]:.3f} outside [{lo}, {hi}]")


def pose_from_angles(lengths, a: AngleSet,
                     canonical: CanonicalPose = DEFAULT_CANONICAL_POSE,
                     validate: bool = True) -> Skeleton:
    """Forward kinematics from the reference pose.

    Builds the fingers at the requested flexion/abduction in the reference
    palm's frames, then moves the palm to the requested spread/plane angles
    with fingers following rigidly. Canonicalizing the result recovers `a`.
    """
    if validate:
        validate_angles(a)
    d = np.asarray(lengths.d if hasattr(lengths, "d") else lengths, dtype=np.float64)
    palm_c = _canonical_palm(canonical)

    dirs = [None] * 20
    for k in range(5):
        dirs[k] = palm_c[k]
    n = [value_of(x) for x in _palm_normals(palm_c)]
    xs = [-n[0], -n[1], -value_of(dc.unit3(n[1] + n[2])),
          -value_of(dc.unit3(n[2] + n[3])), -n[3]]
    for f in range(5):
        frame = np.stack([xs[f], value_of(dc.unit3(dc.cross3(palm_c[f], xs[f]))), palm_c[f]], axis=1)
        for level in range(1, 4):
            i = 5 * level + f
            tf, ta = float(a.flexion[i - 5]), float(a.abduction[i - 5])
            rot_fa = value_of(_fa_rotation(tf, ta))
            dirs[i] = frame @ rot_fa @ np.array([0.0, 0.0, 1.0])
            frame = frame @ rot_fa
    # move the palm (and fingers, rigidly) to the requested palm angles
    pn, acc = _run_palm_steps([dirs[k] for k in range(5)], a.spread, a.plane,
                              reverse=True)
    for k in range(5):
        dirs[k] = value_of(pn[k])
    for i in range(5, 20):
        dirs[i] = value_of(acc[BONE_FINGER[i]]) @ dirs[i]

    joints = np.zeros((21, 3))
    for i in range(20):
        pj = int(BONE_PARENT_JOINT[i])
        c = int(BONE_CHILD_JOINT[i])
        joints[c] = joints[pj] + d[i] * dirs[i]
    return Skeleton(joints=joints)


def canonical_skeleton(lengths,
                       canonical: CanonicalPose = DEFAULT_CANONICAL_POSE) -> Skeleton:
    """The reference-pose skeleton for the given bone lengths."""
    a = AngleSet(flexion=np.asarray(canonical.flexion, dtype=float),
                 abduction=np.asarray(canonical.abduction, dtype=float),
                 spread=np.asarray(canonical.spread, dtype=float),
                 plane=np.asarray(canonical.plane, dtype=float))
    return pose_from_angles(lengths, a, canonical, validate=False)
