"""Procedural capsule-hand ground truth.

A hand shape is the union of 20 capsules, one per bone: the segment between
the bone's joints, inflated by a per-bone radius. Capsules give exact inside
tests, exact signed distances, and cheap area-weighted surface sampling, so
they serve as the watertight ground-truth geometry that occupancy models are
trained against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .skeleton import (BONE_CHILD_JOINT, BONE_PARENT_JOINT, N_BONES, Skeleton)

# Default capsule radii in mm: palmar bones are thick (they fuse into a
# palm-like slab), finger segments taper toward the tips.
DEFAULT_RADII = np.array(
    [11.0, 11.0, 11.5, 11.0, 10.0,
     8.0, 7.5, 7.5, 7.0, 6.5,
     7.0, 6.5, 6.5, 6.0, 5.5,
     6.0, 5.5, 5.5, 5.0, 4.5])

SKIN_TAU_MM = 5.0  # softmax temperature for part skinning weights


def _segment_distances(pts, a, b):
    """Distance from each point to each segment: (N, K) for (K,3) endpoints."""
    d = b - a                                    # (K, 3)
    l2 = np.einsum("kj,kj->k", d, d)
    t = np.einsum("nkj,kj->nk", pts[:, None, :] - a, d) / l2
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, :, None] * d              # (N, K, 3)
    return np.linalg.norm(pts[:, None, :] - closest, axis=2)


@dataclass(frozen=True)
class CapsuleHand:
    """Union-of-capsules hand; the exact oracle geometry for one skeleton."""

    skeleton: Skeleton
    radii: np.ndarray  # (20,) mm

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=np.float64)
        if r.shape != (N_BONES,):
            raise ShapeMismatch(f"expected {N_BONES} radii, got shape {r.shape}")
        object.__setattr__(self, "radii", r)

    @property
    def _endpoints(self):
        j = self.skeleton.joints
        return j[BONE_PARENT_JOINT], j[BONE_CHILD_JOINT]

    def bone_distances(self, pts):
        """Unsigned distance from each point to each bone segment, (N, 20)."""
        a, b = self._endpoints
        return _segment_distances(np.atleast_2d(pts), a, b)

    def sdf(self, pts):
        """Exact signed distance to the union surface (negative inside)."""
        return np.min(self.bone_distances(pts) - self.radii, axis=1)

    def contains(self, pts):
        return self.sdf(pts) <= 0.0

    def part_sdf(self, pts):
        """Per-part signed distances (N, 16): palm fuses the 5 palmar capsules."""
        d = self.bone_distances(pts) - self.radii
        palm = np.min(d[:, :5], axis=1, keepdims=True)
        return np.concatenate([palm, d[:, 5:]], axis=1)

    def skinning_weights(self, pts, tau=SKIN_TAU_MM):
        """Soft part assignment, rows sum to one: softmax of -distance/tau."""
        z = -self.part_sdf(pts) / tau
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def bbox(self, margin=0.0):
        a, b = self._endpoints
        lo = np.minimum(a, b).min(axis=0) - self.radii.max() - margin
        hi = np.maximum(a, b).max(axis=0) + self.radii.max() + margin
        return lo, hi

    def volume_upper_bound(self):
        """Sum of individual capsule volumes (ignores overlaps), mm^3."""
        a, b = self._endpoints
        length = np.linalg.norm(b - a, axis=1)
        r = self.radii
        return float(np.sum(np.pi * r ** 2 * length + 4.0 / 3.0 * np.pi * r ** 3))

    def sample_surface(self, n, rng):
        """Area-weighted points on the union surface with outward normals.

        Candidate points are drawn on individual capsule surfaces in
        proportion to their area, then rejected if they fall strictly inside
        any other capsule. Returns (points (n,3), normals (n,3)).
        """
        a, b = self._endpoints
        axis = b - a
        length = np.linalg.norm(axis, axis=1)
        axis_u = axis / length[:, None]
        r = self.radii
        area = 2.0 * np.pi * r * length + 4.0 * np.pi * r ** 2
        p_cyl = (2.0 * np.pi * r * length) / area
        prob = area / area.sum()

        pts_out = np.empty((0, 3))
        nrm_out = np.empty((0, 3))
        # capsules overlap, so oversample and reject; a few rounds suffice
        for _ in range(64):
            m = max(2 * (n - len(pts_out)), 256)
            k = rng.choice(N_BONES, size=m, p=prob)
            u = rng.normal(size=(m, 3))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            on_cyl = rng.random(m) < p_cyl[k]
            ax = axis_u[k]
            # cylindrical band: random height, direction orthogonalized to axis
            side = u - np.einsum("mj,mj->m", u, ax)[:, None] * ax
            sn = np.linalg.norm(side, axis=1, keepdims=True)
            side = np.where(sn > 1e-12, side / np.maximum(sn, 1e-12), u)
            t = rng.random(m)
            cyl_pts = a[k] + t[:, None] * axis[k] + r[k, None] * side
            # spherical caps: hemisphere picks which end the point belongs to
            along = np.einsum("mj,mj->m", u, ax)
            cap_base = np.where(along[:, None] >= 0.0, b[k], a[k])
            cap_pts = cap_base + r[k, None] * u
            pts = np.where(on_cyl[:, None], cyl_pts, cap_pts)
            nrm = np.where(on_cyl[:, None], side, u)

            dist = self.bone_distances(pts) - r
            dist[np.arange(m), k] = np.inf  # own capsule does not reject
            keep = np.min(dist, axis=1) > 1e-9
            pts_out = np.concatenate([pts_out, pts[keep]])
            nrm_out = np.concatenate([nrm_out, nrm[keep]])
            if len(pts_out) >= n:
                return pts_out[:n], nrm_out[:n]
        raise RuntimeError("surface sampling failed to converge")


def capsule_oracle(skeleton: Skeleton, radii=None) -> CapsuleHand:
    """Ground-truth hand geometry for a skeleton."""
    return CapsuleHand(skeleton=skeleton,
                       radii=DEFAULT_RADII if radii is None else radii)


def capsule_volume(length, radius):
    """Exact volume of one capsule, mm^3."""
    return float(np.pi * radius ** 2 * length + 4.0 / 3.0 * np.pi * radius ** 3)
