"""Hand-object interaction: interpenetration loss, translation refinement,
physics metrics, and the standalone angle losses.

The interpenetration loss sums the hand occupancy over object-interior points
whose occupancy exceeds 0.5. The gate mask is frozen while differentiating
(recomputed between optimizer steps) so within-step gradients are smooth.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import value_of
from .canonicalization import canonical_angles_of
from .errors import (NonFiniteGradient, NonWatertight, SamplingStalled,
                     UnsupportedPrimitive)
from .occupancy import HandOccupancyModel, query_occupancy
from .skeleton import (BONE_CHILD_JOINT, BONE_PARENT_JOINT, Skeleton,
                       validate_skeleton)
from .surface import TriMesh

PRIMITIVE_KINDS = ("sphere", "box", "cylinder", "mesh")


@dataclass(frozen=True)
class ObjectShape:
    """Watertight object: analytic primitive or triangle mesh (all mm).

    Cylinders are axis-aligned with +z. Mesh inside tests use the
    generalized winding number, which tolerates arbitrary watertight input.
    """

    kind: str
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 0.0        # sphere, cylinder
    half_extents: np.ndarray | None = None  # box
    half_height: float = 0.0   # cylinder
    mesh: TriMesh | None = None

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise UnsupportedPrimitive(f"unknown object kind {self.kind!r}")
        object.__setattr__(self, "center",
                           np.asarray(self.center, dtype=np.float64))
        if self.half_extents is not None:
            object.__setattr__(self, "half_extents",
                               np.asarray(self.half_extents, dtype=np.float64))

    def contains(self, pts):
        pts = np.atleast_2d(pts)
        q = pts - self.center
        if self.kind == "sphere":
            return np.einsum("ij,ij->i", q, q) <= self.radius ** 2
        if self.kind == "box":
            return np.all(np.abs(q) <= self.half_extents, axis=1)
        if self.kind == "cylinder":
            radial = q[:, 0] ** 2 + q[:, 1] ** 2 <= self.radius ** 2
            return radial & (np.abs(q[:, 2]) <= self.half_height)
        return _winding_inside(self.mesh, pts)

    def bbox(self):
        if self.kind == "sphere":
            r = np.full(3, self.radius)
        elif self.kind == "box":
            r = self.half_extents
        elif self.kind == "cylinder":
            r = np.array([self.radius, self.radius, self.half_height])
        else:
            return (self.mesh.vertices.min(axis=0),
                    self.mesh.vertices.max(axis=0))
        return self.center - r, self.center + r

    def to_mesh(self, resolution=3) -> TriMesh:
        """Analytic watertight triangulation (meshes pass through)."""
        if self.kind == "sphere":
            m = _icosphere(self.radius, subdivisions=resolution)
        elif self.kind == "box":
            m = _box_mesh(self.half_extents)
        elif self.kind == "cylinder":
            m = _cylinder_mesh(self.radius, self.half_height,
                               segments=16 * 2 ** resolution)
        else:
            return self.mesh
        return TriMesh(vertices=m.vertices + self.center, faces=m.faces)


@dataclass(frozen=True)
class GraspScene:
    """A hand near an object, with interior samples P_o of the object."""

    skeleton: Skeleton
    obj: ObjectShape
    interior_points: np.ndarray  # (N, 3), all strictly inside obj


def object_from_json(data) -> ObjectShape:
    if isinstance(data, str):
        with open(data) as f:
            data = json.load(f)
    kind = data["kind"]
    center = np.asarray(data.get("center", [0.0, 0.0, 0.0]))
    if kind == "sphere":
        return ObjectShape(kind=kind, center=center,
                           radius=float(data["radius_mm"]))
    if kind == "box":
        return ObjectShape(kind=kind, center=center,
                           half_extents=np.asarray(data["half_extents_mm"]))
    if kind == "cylinder":
        return ObjectShape(kind=kind, center=center,
                           radius=float(data["radius_mm"]),
                           half_height=float(data["half_height_mm"]))
    raise UnsupportedPrimitive(f"cannot build object kind {kind!r} from JSON")


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def _winding_inside(mesh: TriMesh, pts, chunk=512):
    """Generalized winding number > 1/2 test (exact solid-angle sum)."""
    tri = mesh.face_corners()
    inside = np.empty(len(pts), dtype=bool)
    for lo in range(0, len(pts), chunk):
        p = pts[lo:lo + chunk]
        a = tri[None, :, 0] - p[:, None]  # (n, F, 3)
        b = tri[None, :, 1] - p[:, None]
        c = tri[None, :, 2] - p[:, None]
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        num = np.einsum("nfj,nfj->nf", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("nfj,nfj->nf", a, b) * lc
               + np.einsum("nfj,nfj->nf", b, c) * la
               + np.einsum("nfj,nfj->nf", c, a) * lb)
        omega = 2.0 * np.arctan2(num, den)
        inside[lo:lo + chunk] = np.abs(omega.sum(axis=1)) > 2.0 * np.pi
    return inside


def _icosphere(radius, subdivisions=3) -> TriMesh:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([[-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
                  [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
                  [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]],
                 dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    for _ in range(subdivisions):
        edge_mid = {}
        verts = list(v)

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in edge_mid:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                edge_mid[key] = len(verts) - 1
            return edge_mid[key]

        nf = []
        for (i, j, k) in f:
            ij, jk, ki = midpoint(i, j), midpoint(j, k), midpoint(k, i)
            nf += [[i, ij, ki], [j, jk, ij], [k, ki, jk], [ij, jk, ki]]
        v = np.array(verts)
        f = np.array(nf)
    return TriMesh(vertices=v * radius, faces=f)


def _box_mesh(half_extents) -> TriMesh:
    h = np.asarray(half_extents, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1)
                        for z in (-1, 1)]) * h
    # 12 triangles, outward orientation
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
             (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for (a, b, c, d) in quads:
        faces += [[a, b, c], [a, c, d]]
    return TriMesh(vertices=corners, faces=np.array(faces))


def _cylinder_mesh(radius, half_height, segments=64) -> TriMesh:
    ang = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bot = np.concatenate([ring, np.full((segments, 1), -half_height)], axis=1)
    top = np.concatenate([ring, np.full((segments, 1), half_height)], axis=1)
    verts = np.concatenate([bot, top,
                            [[0.0, 0.0, -half_height], [0.0, 0.0, half_height]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [[i, j, segments + i], [j, segments + j, segments + i]]
        faces += [[cb, j, i], [ct, segments + i, segments + j]]
    return TriMesh(vertices=verts, faces=np.array(faces))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def sample_object_interior(obj: ObjectShape, n, rng):
    """Rejection-sampled points strictly inside the object."""
    if n <= 0:
        raise ValueError("n must be positive")
    lo, hi = obj.bbox()
    pts = np.empty((0, 3))
    tried = accepted = 0
    while len(pts) < n:
        m = max(4 * (n - len(pts)), 1024)
        cand = rng.uniform(lo, hi, size=(m, 3))
        keep = obj.contains(cand)
        tried += m
        accepted += int(np.count_nonzero(keep))
        pts = np.concatenate([pts, cand[keep]])
        if tried >= 100_000 and accepted / tried < 1e-4:
            raise SamplingStalled(
                f"interior acceptance {accepted / tried:.2e} below 1e-4")
    return pts[:n]


def make_scene(skeleton: Skeleton, obj: ObjectShape, n=2048,
               rng=None) -> GraspScene:
    rng = np.random.default_rng(0) if rng is None else rng
    return GraspScene(skeleton=skeleton, obj=obj,
                      interior_points=sample_object_interior(obj, n, rng))


def interpenetration_loss(model: HandOccupancyModel, joints, interior_points,
                          gate_mask=None):
    """Sum of hand occupancy over object-interior points with occupancy > 0.5.

    `joints` may be a Skeleton, a (21, 3) array, or a recorded Var (making
    the loss differentiable w.r.t. the joints). The gate is evaluated without
    recording and applied as a frozen mask.
    """
    if isinstance(joints, Skeleton):
        joints = joints.joints
    pts = np.atleast_2d(np.asarray(interior_points, dtype=np.float64))
    if len(pts) == 0:
        return 0.0
    if gate_mask is None:
        plain = query_occupancy(model, np.asarray(value_of(joints)), pts)
        gate_mask = plain > 0.5
    if not np.any(gate_mask):
        return dc.sum_(joints * 0.0) if isinstance(joints, dc.Var) else 0.0
    vals = query_occupancy(model, joints, pts[gate_mask])
    return dc.sum_(vals)


def refine_translation(model: HandOccupancyModel, skeleton, obj,
                       steps=10, step_mm=2.0, n_points=2048, rng=None):
    """Gradient descent on a rigid hand translation against the
    interpenetration loss.

    Each step moves the hand by step_mm along the normalized negative
    gradient; the gate mask is recomputed between steps. Returns the
    best-loss translation and the per-step loss trace (steps + 1 values).
    """
    joints = skeleton.joints if isinstance(skeleton, Skeleton) else np.asarray(skeleton)
    rng = np.random.default_rng(0) if rng is None else rng
    if isinstance(obj, GraspScene):
        pts = obj.interior_points
    else:
        pts = sample_object_interior(obj, n_points, rng)

    t = np.zeros(3)
    trace = []
    best_t, best_loss = t.copy(), np.inf
    for _ in range(steps):
        tape = dc.Tape()
        tv = tape.var(t)
        moved = joints + dc.broadcast_to(dc.reshape(tv, (1, 3)), joints.shape)
        loss = interpenetration_loss(model, moved, pts)
        loss_val = float(value_of(loss))
        trace.append(loss_val)
        if loss_val < best_loss:
            best_loss, best_t = loss_val, t.copy()
        if loss_val == 0.0:
            break
        (g,) = tape.gradient([loss], [tv])
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("interpenetration gradient is not finite")
        norm = np.linalg.norm(g)
        if norm == 0.0:
            break
        t = t - step_mm * g / norm
    final = float(value_of(interpenetration_loss(model, joints + t, pts)))
    trace.append(final)
    if final < best_loss:
        best_loss, best_t = final, t.copy()
    return best_t, trace


def interpenetration_volume(hand: TriMesh, obj: TriMesh, h=1.0):
    """Intersection volume at `h` mm voxels, in cm³, plus a contact flag.

    Contact means any intersecting voxel, or a hand voxel face-adjacent to
    an object voxel.
    """
    from .surface import voxelize

    for name, mesh in (("hand", hand), ("object", obj)):
        if not mesh.is_watertight():
            raise NonWatertight(f"{name} mesh is not watertight")
    lo = np.maximum(hand.vertices.min(axis=0), obj.vertices.min(axis=0)) - h
    hi = np.minimum(hand.vertices.max(axis=0), obj.vertices.max(axis=0)) + h
    if np.any(hi <= lo):
        return 0.0, False
    shape = tuple(np.maximum(np.ceil((hi - lo) / h).astype(int), 1))
    origin = lo + 0.5 * h  # voxel centers sit mid-cell
    vh = voxelize(hand, origin, shape, h)
    vo = voxelize(obj, origin, shape, h)
    inter = vh & vo
    volume_cm3 = float(inter.sum()) * h ** 3 / 1000.0
    contact = bool(inter.any())
    if not contact:
        for axis in range(3):
            for shift in (1, -1):
                if np.any(np.roll(vh, shift, axis=axis) & vo):
                    contact = True
                    break
            if contact:
                break
    return volume_cm3, contact


def angle_losses(pred: Skeleton, gt: Skeleton):
    """Mean absolute per-family angle differences between two skeletons."""
    pa = canonical_angles_of(pred)
    ga = canonical_angles_of(gt)
    return {
        "flexion": float(np.mean(np.abs(pa.flexion - ga.flexion))),
        "abduction": float(np.mean(np.abs(pa.abduction - ga.abduction))),
        "spread": float(np.mean(np.abs(pa.spread - ga.spread))),
        "plane": float(np.mean(np.abs(pa.plane - ga.plane))),
    }


def bone_length_l1(pred: Skeleton, gt: Skeleton):
    """Mean absolute bone-length difference, mm."""
    def lengths(s):
        seg = s.joints[BONE_CHILD_JOINT] - s.joints[BONE_PARENT_JOINT]
        return np.linalg.norm(seg, axis=1)
    return float(np.mean(np.abs(lengths(pred) - lengths(gt))))


def translate_skeleton(s: Skeleton, t) -> Skeleton:
    return validate_skeleton(s.joints + np.asarray(t), s.handedness)
