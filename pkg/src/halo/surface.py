"""Isosurface extraction and surface metrics.

Occupancy fields are turned into triangle meshes by marching cubes on a
regular grid; meshes are compared by point-IoU, Chamfer-L1 and normal
consistency, all in millimeters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .errors import EmptyMesh, EmptySurface, ShapeMismatch

PART_PALETTE = np.array([
    [0.85, 0.35, 0.35], [0.85, 0.55, 0.25], [0.85, 0.75, 0.25],
    [0.65, 0.85, 0.25], [0.40, 0.85, 0.30], [0.25, 0.85, 0.55],
    [0.25, 0.85, 0.80], [0.25, 0.65, 0.85], [0.30, 0.45, 0.85],
    [0.45, 0.30, 0.85], [0.65, 0.25, 0.85], [0.85, 0.25, 0.80],
    [0.85, 0.25, 0.55], [0.60, 0.60, 0.60], [0.80, 0.70, 0.55],
    [0.50, 0.70, 0.70]])


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned sampling lattice: `resolution` samples per axis."""

    bounds_min: np.ndarray  # (3,) mm
    bounds_max: np.ndarray  # (3,) mm
    resolution: tuple = (128, 128, 128)
    iso: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "bounds_min",
                           np.asarray(self.bounds_min, dtype=np.float64))
        object.__setattr__(self, "bounds_max",
                           np.asarray(self.bounds_max, dtype=np.float64))
        if np.any(self.bounds_max <= self.bounds_min):
            raise ValueError("bounds_max must exceed bounds_min")
        if any(r < 2 for r in self.resolution):
            raise ValueError("resolution must be at least 2 per axis")

    def axes(self):
        return [np.linspace(self.bounds_min[i], self.bounds_max[i],
                            self.resolution[i]) for i in range(3)]

    def points(self):
        ax = self.axes()
        g = np.meshgrid(*ax, indexing="ij")
        return np.stack([a.ravel() for a in g], axis=1)

    def spacing(self):
        return tuple((self.bounds_max[i] - self.bounds_min[i])
                     / (self.resolution[i] - 1) for i in range(3))


def grid_for_bounds(lo, hi, margin=10.0, resolution=128):
    return GridSpec(bounds_min=np.asarray(lo) - margin,
                    bounds_max=np.asarray(hi) + margin,
                    resolution=(resolution,) * 3)


@dataclass
class TriMesh:
    vertices: np.ndarray        # (V, 3) mm
    faces: np.ndarray           # (F, 3) int indices
    vertex_normals: np.ndarray | None = None

    def face_corners(self):
        return self.vertices[self.faces]  # (F, 3, 3)

    def face_normals_areas(self):
        tri = self.face_corners()
        c = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n = np.linalg.norm(c, axis=1)
        areas = 0.5 * n
        normals = c / np.maximum(n, 1e-300)[:, None]
        return normals, areas

    def area(self):
        return float(self.face_normals_areas()[1].sum())

    def sample_surface(self, n, rng):
        """Area-weighted surface points with their face normals."""
        if len(self.faces) == 0:
            raise EmptyMesh("mesh has no faces")
        normals, areas = self.face_normals_areas()
        total = areas.sum()
        if total <= 0.0:
            raise EmptyMesh("mesh has zero surface area")
        f = rng.choice(len(self.faces), size=n, p=areas / total)
        u, v = rng.random(n), rng.random(n)
        flip = u + v > 1.0
        u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
        tri = self.face_corners()[f]
        pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) \
            + v[:, None] * (tri[:, 2] - tri[:, 0])
        return pts, normals[f]

    def is_watertight(self):
        """Every undirected edge is shared by exactly two faces."""
        if len(self.faces) == 0:
            return False
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                            self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))


def marching_cubes(field, grid: GridSpec) -> TriMesh:
    """Extract the `grid.iso` level set of a scalar field.

    `field` maps (N, 3) points to (N,) values; evaluation is chunked so the
    field only ever sees modest batches. The sampled volume is padded with a
    below-iso shell, so a surface clipped by the grid is closed at the
    boundary and the mesh stays watertight.
    """
    pts = grid.points()
    vals = np.empty(len(pts))
    chunk = 16384
    for lo in range(0, len(pts), chunk):
        vals[lo:lo + chunk] = field(pts[lo:lo + chunk])
    vol = vals.reshape(grid.resolution)
    if vol.min() >= grid.iso or vol.max() <= grid.iso:
        raise EmptySurface(
            f"field never crosses iso level {grid.iso} "
            f"(range [{vol.min():.3g}, {vol.max():.3g}])")
    sp = grid.spacing()
    vol = np.pad(vol, 1, constant_values=grid.iso - 1.0)
    verts, faces, normals, _ = measure.marching_cubes(
        vol, level=grid.iso, spacing=sp)
    offset = grid.bounds_min - np.asarray(sp)
    # inside > iso convention: flip winding so face normals point outward
    return TriMesh(vertices=verts + offset, faces=faces[:, ::-1],
                   vertex_normals=-normals)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def iou(pred_inside, gt_inside):
    """Intersection over union of boolean labels; both empty counts as 1."""
    pred_inside = np.asarray(pred_inside, dtype=bool)
    gt_inside = np.asarray(gt_inside, dtype=bool)
    if pred_inside.shape != gt_inside.shape:
        raise ShapeMismatch(
            f"label shapes differ: {pred_inside.shape} vs {gt_inside.shape}")
    union = np.count_nonzero(pred_inside | gt_inside)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred_inside & gt_inside) / union


def field_iou(pred_field, gt_field, pts, iso=0.5):
    """IoU of two thresholded scalar fields on shared sample points."""
    return iou(np.asarray(pred_field(pts)) > iso,
               np.asarray(gt_field(pts)) > iso)


def chamfer_l1(a: TriMesh, b: TriMesh, n=10000, rng=None):
    """Symmetric mean nearest-neighbor distance between surfaces, mm."""
    rng = np.random.default_rng(0) if rng is None else rng
    # shared sample seed so identical meshes yield identical point sets
    seed = int(rng.integers(0, 2 ** 63))
    pa, _ = a.sample_surface(n, np.random.default_rng(seed))
    pb, _ = b.sample_surface(n, np.random.default_rng(seed))
    da, _ = cKDTree(pb).query(pa, workers=-1)
    db, _ = cKDTree(pa).query(pb, workers=-1)
    return 0.5 * (float(np.mean(da)) + float(np.mean(db)))


def normal_consistency(a: TriMesh, b: TriMesh, n=10000, rng=None):
    """Mean |cos| between normals at mutually nearest surface points."""
    rng = np.random.default_rng(0) if rng is None else rng
    seed = int(rng.integers(0, 2 ** 63))
    pa, na = a.sample_surface(n, np.random.default_rng(seed))
    pb, nb = b.sample_surface(n, np.random.default_rng(seed))
    _, ia = cKDTree(pb).query(pa, workers=-1)
    _, ib = cKDTree(pa).query(pb, workers=-1)
    c1 = np.abs(np.einsum("ij,ij->i", na, nb[ia]))
    c2 = np.abs(np.einsum("ij,ij->i", nb, na[ib]))
    return 0.5 * (float(np.mean(c1)) + float(np.mean(c2)))


# ---------------------------------------------------------------------------
# OBJ output
# ---------------------------------------------------------------------------

def save_obj(mesh: TriMesh, path, part_of_vertex=None):
    """Write an OBJ file; optional per-vertex part indices add colors."""
    with open(path, "w") as f:
        f.write("# halo surface export\n")
        for i, v in enumerate(mesh.vertices):
            if part_of_vertex is not None:
                r, g, b = PART_PALETTE[int(part_of_vertex[i]) % len(PART_PALETTE)]
                f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f} "
                        f"{r:.3f} {g:.3f} {b:.3f}\n")
            else:
                f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        if mesh.vertex_normals is not None:
            for vn in mesh.vertex_normals:
                f.write(f"vn {vn[0]:.6f} {vn[1]:.6f} {vn[2]:.6f}\n")
        for face in mesh.faces:
            f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")


# ---------------------------------------------------------------------------
# voxelization (used by mesh containment and interpenetration volume)
# ---------------------------------------------------------------------------

def voxelize(mesh: TriMesh, origin, shape, h=1.0):
    """Occupancy of voxel centers by z-column ray parity.

    origin is the center of voxel (0,0,0); shape the integer grid extent;
    h the voxel pitch in mm. The mesh must be watertight for the parity
    argument to hold.
    """
    origin = np.asarray(origin, dtype=np.float64)
    nx, ny, nz = shape
    tri = (mesh.face_corners() - origin) / h  # work in grid coordinates
    # irrational sub-nanometer shift so voxel centers never tie exactly with
    # triangle edges (a tie double-counts the crossing and flips the parity
    # of the whole column)
    tri[:, :, 0] += 1e-7 * np.sqrt(2.0)
    tri[:, :, 1] += 1e-7 * np.sqrt(3.0)
    grid = np.zeros((nx, ny, nz), dtype=bool)

    # per triangle, the column centers its xy projection can cover
    xy = tri[:, :, :2]
    lo = np.ceil(xy.min(axis=1)).astype(int)
    hi = np.floor(xy.max(axis=1)).astype(int)
    lo = np.clip(lo, 0, [nx, ny])          # upper clip keeps empty spans empty
    hi = np.clip(hi, -1, [nx - 1, ny - 1])
    spans = np.maximum(hi - lo + 1, 0)
    counts = spans[:, 0] * spans[:, 1]
    keep = counts > 0
    if not np.any(keep):
        return grid

    crossings_col = []
    crossings_z = []
    widths = spans[keep][:, 0]
    # group triangles by their x-span so candidate columns expand to
    # rectangular index blocks of equal size
    for w in np.unique(widths):
        for d in np.unique(spans[keep][widths == w][:, 1]):
            sel = keep.copy()
            sel[keep] &= (spans[keep][:, 0] == w) & (spans[keep][:, 1] == d)
            if not np.any(sel):
                continue
            t = tri[sel]
            base = lo[sel]
            ox, oy = np.meshgrid(np.arange(w), np.arange(d), indexing="ij")
            cx = base[:, 0, None] + ox.ravel()[None, :]   # (T, w*d)
            cy = base[:, 1, None] + oy.ravel()[None, :]
            # barycentric test of (cx, cy) against the xy projection
            ax, ay = t[:, 0, 0, None], t[:, 0, 1, None]
            bx, by = t[:, 1, 0, None], t[:, 1, 1, None]
            qx, qy = t[:, 2, 0, None], t[:, 2, 1, None]
            den = (by - qy) * (ax - qx) + (qx - bx) * (ay - qy)
            ok = np.abs(den) > 1e-12
            den = np.where(ok, den, 1.0)
            l1 = ((by - qy) * (cx - qx) + (qx - bx) * (cy - qy)) / den
            l2 = ((qy - ay) * (cx - qx) + (ax - qx) * (cy - qy)) / den
            l3 = 1.0 - l1 - l2
            inside = ok & (l1 >= 0.0) & (l2 >= 0.0) & (l3 >= 0.0)
            z = l1 * t[:, 0, 2, None] + l2 * t[:, 1, 2, None] \
                + l3 * t[:, 2, 2, None]
            ii, jj = np.nonzero(inside)
            crossings_col.append(cx[ii, jj].astype(np.int64) * ny
                                 + cy[ii, jj].astype(np.int64))
            crossings_z.append(z[ii, jj])
    if not crossings_col:
        return grid
    col = np.concatenate(crossings_col)
    z = np.concatenate(crossings_z)

    # parity per column: voxel center k is inside iff an odd number of
    # crossings lie above it
    order = np.lexsort((z, col))
    col, z = col[order], z[order]
    zk = np.clip(np.ceil(z).astype(np.int64), 0, nz)
    # center k lies below a crossing at height z iff ceil(z) > k, so a +1
    # toggle at column position ceil(z) flips the parity of centers 0..k-1;
    # suffix sums starting at k+1 count the crossings strictly above center k
    toggles = np.zeros((nx * ny, nz + 1), dtype=np.int64)
    np.add.at(toggles, (col, zk), 1)
    suffix = np.cumsum(toggles[:, ::-1], axis=1)[:, ::-1]
    return (suffix[:, 1:] % 2).astype(bool).reshape(nx, ny, nz)
