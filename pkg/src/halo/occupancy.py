"""Part-based neural occupancy of the hand, driven by canonicalizing transforms.

The hand is covered by 16 parts (palm + 3 per finger). A query point is
mapped into each part's canonical space by that part's posed->canonical
transform; a small per-part MLP scores it there, conditioned on a projected
pose feature and (depending on the mode) bone-length shape features. The
final occupancy is the max over parts of the per-part probabilities.

Modes:
  NASA_BASELINE  canonical point + projected pose features only
  HALO_LOCAL     adds the driving bone's length per part
  HALO_FULL      adds a learned global encoding of all 16 part lengths
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import diffcore as dc
from .diffcore import value_of
from .canonicalization import _canonicalize, _rigid44, _mv, CanonResult
from .errors import PartIndexOutOfRange, ShapeMismatch
from .skeleton import Skeleton

NASA_BASELINE = "NASA_BASELINE"
HALO_LOCAL = "HALO_LOCAL"
HALO_FULL = "HALO_FULL"
MODES = (NASA_BASELINE, HALO_LOCAL, HALO_FULL)

N_PARTS = 16
# millimeters -> network feature units
MM_SCALE = 0.01

CHECKPOINT_MAGIC = b"HALO"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class OccupancyConfig:
    mode: str = HALO_FULL
    parts: int = N_PARTS
    layers: int = 4
    width: int = 40
    leaky_slope: float = 0.1
    dropout: float = 0.2
    residual: bool = True
    pose_feature_size: int = 8
    global_width: int = 40
    global_out: int = 16
    reference_point: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.width <= 0 or self.layers < 2:
            raise ValueError("width must be positive and layers >= 2")

    @property
    def input_size(self):
        n = 3 + self.pose_feature_size
        if self.mode in (HALO_LOCAL, HALO_FULL):
            n += 1
        if self.mode == HALO_FULL:
            n += self.global_out
        return n


@dataclass(frozen=True)
class PoseDescriptor:
    transforms: np.ndarray  # (16, 4, 4) posed -> canonical per part
    features: np.ndarray    # (16, pose_feature_size) projected features


@dataclass(frozen=True)
class ShapeDescriptor:
    local: np.ndarray            # (16,) driving bone length per part, mm
    global_code: np.ndarray | None  # (global_out,) when mode is HALO_FULL


class HandOccupancyModel:
    """Per-part occupancy networks with flat-addressable parameters.

    A trained model is immutable for inference purposes; training mutates
    parameters under a single-writer contract.
    """

    def __init__(self, cfg: OccupancyConfig, params: dict):
        self.cfg = cfg
        self.params = params
        self._order = list(params.keys())

    @property
    def param_count(self):
        return sum(p.size for p in self.params.values())

    def flat_parameters(self):
        return np.concatenate([self.params[k].ravel() for k in self._order])

    def set_flat_parameters(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.param_count:
            raise ShapeMismatch(
                f"expected {self.param_count} parameters, got {flat.size}")
        ofs = 0
        for k in self._order:
            p = self.params[k]
            np.copyto(p, flat[ofs:ofs + p.size].reshape(p.shape))
            ofs += p.size

    def copy(self):
        return HandOccupancyModel(self.cfg, {k: v.copy() for k, v in self.params.items()})


def _param_shapes(cfg: OccupancyConfig):
    P, W, I = cfg.parts, cfg.width, cfg.input_size
    shapes = {
        "pi_w": (P, N_PARTS * 3, cfg.pose_feature_size),
        "pi_b": (P, 1, cfg.pose_feature_size),
        "w0": (P, I, W),
        "b0": (P, 1, W),
    }
    for li in range(1, cfg.layers - 1):
        shapes[f"w{li}"] = (P, W, W)
        shapes[f"b{li}"] = (P, 1, W)
    shapes[f"w{cfg.layers - 1}"] = (P, W, 1)
    shapes[f"b{cfg.layers - 1}"] = (P, 1, 1)
    if cfg.mode == HALO_FULL:
        shapes["gw0"] = (N_PARTS, cfg.global_width)
        shapes["gb0"] = (1, cfg.global_width)
        shapes["gw1"] = (cfg.global_width, cfg.global_out)
        shapes["gb1"] = (1, cfg.global_out)
    return shapes


def parameter_count(cfg: OccupancyConfig):
    return sum(int(np.prod(s)) for s in _param_shapes(cfg).values())


def init_model(cfg: OccupancyConfig, seed: int = 0) -> HandOccupancyModel:
    """Kaiming-style fan-in uniform weights (leaky-rectifier gain), zero biases."""
    rng = np.random.default_rng(seed)
    gain = np.sqrt(2.0 / (1.0 + cfg.leaky_slope ** 2))
    params = {}
    for name, shape in _param_shapes(cfg).items():
        if name in ("pi_b", "gb0", "gb1") or (name[0] == "b" and name[1:].isdigit()):
            params[name] = np.zeros(shape)
        elif name == "pi_w":
            fan_in = shape[-2]
            bound = np.sqrt(3.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, shape)
        else:
            fan_in = shape[-2]
            bound = gain * np.sqrt(3.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, shape)
    return HandOccupancyModel(cfg, params)


# ---------------------------------------------------------------------------
# descriptors
# ---------------------------------------------------------------------------

def select_part_transforms(res: CanonResult):
    """16 posed->canonical part transforms from the 20-bone set.

    Root (palmar) bone transforms are dropped; the palm part gets the global
    alignment transform (identity for an already root-aligned, anchored
    skeleton).
    """
    inv = res.inv
    align = res.align_rotation
    # palm transform: x -> align @ (x - root)
    palm = _rigid44(align, dc.neg(_mv(align, res.root)))
    rows = [palm] + [inv[i] for i in range(5, 20)]
    return dc.stack(rows, axis=0)


def part_local_lengths(lengths):
    """Per-part driving bone length: palm uses the mean palmar length."""
    palm = dc.mean_(lengths[0:5])
    return dc.concat([dc.reshape(palm, (1,)), lengths[5:20]], axis=0)


def pose_descriptor(model: HandOccupancyModel, transforms, t0=None) -> PoseDescriptor:
    """Project the stacked canonicalizing translations of t0 to per-part features."""
    mats = transforms.inv if hasattr(transforms, "inv") else np.asarray(transforms)
    if mats.shape[0] == 20:
        mats = np.concatenate([np.eye(4)[None], mats[5:20]], axis=0)
    if mats.shape != (N_PARTS, 4, 4):
        raise ShapeMismatch(f"expected ({N_PARTS}, 4, 4) transforms, got {mats.shape}")
    if t0 is None:
        t0 = np.asarray(model.cfg.reference_point)
    h = np.append(np.asarray(t0, dtype=np.float64), 1.0)
    moved = (mats @ h)[:, :3]  # (16, 3) = {B^-1 t0}
    flat = moved.reshape(-1) * MM_SCALE
    feats = np.einsum("pif,i->pf", model.params["pi_w"], flat) + model.params["pi_b"][:, 0, :]
    return PoseDescriptor(transforms=mats, features=feats)


# ---------------------------------------------------------------------------
# forward pass (generic over Var / ndarray)
# ---------------------------------------------------------------------------

def transform_points(part_mats, pts):
    """Map (N, 3) query points by (16, 4, 4) transforms -> (16, N, 3)."""
    pts = np.asarray(pts, dtype=np.float64)
    R = part_mats[:, :3, :3]
    t = part_mats[:, :3, 3]
    out = dc.transpose(dc.matmul(R, pts.T), (0, 2, 1))  # (16, N, 3)
    return out + dc.reshape(t, (N_PARTS, 1, 3))


def forward_parts(params, cfg: OccupancyConfig, x_canon, pose_flat, d16,
                  train_mode=False, rng=None):
    """Per-part occupancy probabilities.

    x_canon:   (..., 16, N, 3) canonical-space points, mm
    pose_flat: (..., 48) stacked {B^-1 t0} translations, mm
    d16:       (..., 16) per-part driving bone lengths, mm
    returns    (..., 16, N) probabilities in (0, 1)
    """
    def shp(a):
        return np.shape(value_of(a))

    batch = shp(x_canon)[:-3]
    n = shp(x_canon)[-2]
    x = x_canon * MM_SCALE

    pose_in = dc.reshape(pose_flat * MM_SCALE, batch + (1, 1, N_PARTS * 3))
    pose_in = dc.broadcast_to(pose_in, batch + (N_PARTS, 1, N_PARTS * 3))
    feats = dc.matmul(pose_in, params["pi_w"]) + params["pi_b"]   # (..., 16, 1, F)
    feats = dc.broadcast_to(feats, batch + (N_PARTS, n, cfg.pose_feature_size))

    pieces = [x, feats]
    if cfg.mode in (HALO_LOCAL, HALO_FULL):
        local = dc.reshape(d16 * MM_SCALE, batch + (N_PARTS, 1, 1))
        pieces.append(dc.broadcast_to(local, batch + (N_PARTS, n, 1)))
    if cfg.mode == HALO_FULL:
        g = dc.reshape(d16 * MM_SCALE, batch + (1, N_PARTS))
        g = dc.leaky_relu(dc.matmul(g, params["gw0"]) + params["gb0"], cfg.leaky_slope)
        g = dc.matmul(g, params["gw1"]) + params["gb1"]            # (..., 1, 16)
        g = dc.reshape(g, batch + (1, 1, cfg.global_out))
        pieces.append(dc.broadcast_to(g, batch + (N_PARTS, n, cfg.global_out)))
    h = dc.concat(pieces, axis=-1)

    slope = cfg.leaky_slope
    h = dc.leaky_relu(dc.matmul(h, params["w0"]) + params["b0"], slope)
    h = dc.dropout(h, cfg.dropout, rng, train_mode)
    for li in range(1, cfg.layers - 1):
        z = dc.leaky_relu(dc.matmul(h, params[f"w{li}"]) + params[f"b{li}"], slope)
        z = dc.dropout(z, cfg.dropout, rng, train_mode)
        h = h + z if cfg.residual else z
    out = dc.matmul(h, params[f"w{cfg.layers - 1}"]) + params[f"b{cfg.layers - 1}"]
    out = dc.logistic(out)
    return dc.reshape(out, batch + (N_PARTS, n))


def hand_inputs(res: CanonResult, t0=(0.0, 0.0, 0.0)):
    """(part transforms, pose input, part lengths) for one canonicalized hand.

    The pose descriptor stacks each part transform applied to the wrist
    (offset by t0), so a rigid motion of the whole hand leaves it unchanged.
    """
    mats = select_part_transforms(res)
    anchor = res.root + np.asarray(t0, dtype=np.float64)
    moved = dc.matmul(mats[:, :3, :3], dc.reshape(anchor, (3, 1)))
    pose_flat = (dc.reshape(moved, (N_PARTS * 3,))
                 + dc.reshape(mats[:, :3, 3], (N_PARTS * 3,)))
    d16 = part_local_lengths(res.lengths)
    return mats, pose_flat, d16


def query_occupancy(model: HandOccupancyModel, skeleton, pts,
                    train_mode=False, rng=None):
    """Occupancy probability of each query point for the given skeleton.

    `skeleton` may be a Skeleton or a (21, 3) joints array (possibly a Var,
    in which case the whole evaluation is recorded for differentiation).
    """
    joints = skeleton.joints if isinstance(skeleton, Skeleton) else skeleton
    res = _canonicalize(joints)
    mats, pose_flat, d16 = hand_inputs(res, model.cfg.reference_point)
    x_canon = transform_points(mats, pts)
    vals = forward_parts(model.params, model.cfg, x_canon, pose_flat, d16,
                         train_mode=train_mode, rng=rng)
    return dc.max_(vals, axis=0)


def part_occupancies(model: HandOccupancyModel, skeleton, pts):
    """All 16 per-part probabilities (16, N) for diagnostics and losses."""
    joints = skeleton.joints if isinstance(skeleton, Skeleton) else skeleton
    res = _canonicalize(joints)
    mats, pose_flat, d16 = hand_inputs(res, model.cfg.reference_point)
    x_canon = transform_points(mats, pts)
    return forward_parts(model.params, model.cfg, x_canon, pose_flat, d16)


def part_occupancy(model: HandOccupancyModel, b: int, x_canonical,
                   pose_features, shape_features=None):
    """Single child network forward pass; part index b in 1..16."""
    if not 1 <= b <= model.cfg.parts:
        raise PartIndexOutOfRange(f"part index {b} outside 1..{model.cfg.parts}")
    cfg = model.cfg
    i = b - 1
    slope = cfg.leaky_slope

    def leaky(z):
        return np.where(z >= 0.0, z, slope * z)

    x = np.atleast_2d(np.asarray(x_canonical, dtype=np.float64)) * MM_SCALE
    feats = np.broadcast_to(np.asarray(pose_features, dtype=np.float64),
                            (x.shape[0], cfg.pose_feature_size))
    pieces = [x, feats]
    if cfg.mode in (HALO_LOCAL, HALO_FULL):
        sf = np.atleast_1d(np.asarray(shape_features, dtype=np.float64)) * MM_SCALE
        # a scalar gives this part's driving length; a full 16-vector also
        # feeds the global encoder in HALO_FULL mode
        local = sf[i:i + 1] if sf.size == N_PARTS else sf[:1]
        pieces.append(np.broadcast_to(local, (x.shape[0], 1)))
        if cfg.mode == HALO_FULL:
            if sf.size != N_PARTS:
                raise ShapeMismatch(
                    f"HALO_FULL shape features need {N_PARTS} lengths, got {sf.size}")
            g = leaky(sf.reshape(1, -1) @ model.params["gw0"] + model.params["gb0"])
            g = g @ model.params["gw1"] + model.params["gb1"]
            pieces.append(np.broadcast_to(g, (x.shape[0], cfg.global_out)))
    h = np.concatenate(pieces, axis=-1)

    h = leaky(h @ model.params["w0"][i] + model.params["b0"][i])
    for li in range(1, cfg.layers - 1):
        z = leaky(h @ model.params[f"w{li}"][i] + model.params[f"b{li}"][i])
        h = h + z if cfg.residual else z
    out = h @ model.params[f"w{cfg.layers - 1}"][i] + model.params[f"b{cfg.layers - 1}"][i]
    return (0.5 * (np.tanh(0.5 * out) + 1.0)).reshape(-1)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(model: HandOccupancyModel, path) -> None:
    """Write magic, version, JSON metadata, then raw little-endian f32 data."""
    meta = {
        "config": asdict(model.cfg),
        "params": [[k, list(model.params[k].shape)] for k in model._order],
        "dtype": "<f4",
    }
    meta_bytes = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        for k in model._order:
            f.write(np.ascontiguousarray(model.params[k], dtype="<f4").tobytes())


def load_checkpoint(path) -> HandOccupancyModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta_len, = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        cfg_d = meta["config"]
        cfg_d["reference_point"] = tuple(cfg_d["reference_point"])
        cfg = OccupancyConfig(**cfg_d)
        params = {}
        for k, shape in meta["params"]:
            n = int(np.prod(shape))
            arr = np.frombuffer(f.read(4 * n), dtype="<f4").astype(np.float64)
            params[k] = arr.reshape(shape)
    return HandOccupancyModel(cfg, params)
