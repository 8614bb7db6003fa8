"""Corpus generation and training for hand occupancy models.

Ground truth comes from procedural capsule hands: randomized bone lengths
(per-finger scale jitter) posed through the biomechanical angle model. Query
points are labeled by the exact inside test; training minimizes a squared
occupancy error plus a skinning term that is switched off once validation
IoU reaches a cutoff.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import value_of
from .canonicalization import (ABDUCTION_RANGE_DEEP, ABDUCTION_RANGE_L1,
                               FLEXION_RANGE, PLANE_RANGES, SPREAD_RANGES,
                               AngleSet, _canonicalize, pose_from_angles)
from .capsule import DEFAULT_RADII, SKIN_TAU_MM, CapsuleHand, capsule_oracle
from .errors import NonFiniteGradient, NonFiniteLoss, ShapeMismatch
from .occupancy import (HandOccupancyModel, N_PARTS, forward_parts,
                        hand_inputs)
from .skeleton import Skeleton, save_skeleton_json, load_skeleton_json

UNIFORM_BBOX = "uniform-bbox"
SURFACE_GAUSSIAN = "surface+gaussian"

POINTS_MAGIC = b"HPTS"
POINTS_VERSION = 1

# Nominal bone lengths (mm) for the procedural corpus, thumb..pinky per level.
TEMPLATE_BONE_LENGTHS = np.array(
    [45.0, 85.0, 80.0, 75.0, 70.0,
     35.0, 40.0, 45.0, 40.0, 32.0,
     28.0, 25.0, 28.0, 25.0, 20.0,
     22.0, 22.0, 24.0, 22.0, 18.0])


@dataclass(frozen=True)
class LabeledPointSet:
    points: np.ndarray   # (N, 3) mm
    labels: np.ndarray   # (N,) uint8, exact oracle occupancy
    strategy: str


@dataclass
class TrainConfig:
    """Optimization schedule; defaults follow the reference recipe."""

    steps: int = 2000
    lr: float = 1e-4
    batch_hands: int = 64
    query_points_per_hand: int = 2048
    surface_points_per_hand: int = 2000
    presample_per_strategy: int = 100_000
    surface_presample: int = 6000
    sigma_mm: float = 5.0
    lambda_skinning: float = 0.5
    skinning_iou_cutoff: float = 0.80
    skinning_tau: float = SKIN_TAU_MM
    use_bce: bool = False
    eval_every: int = 100
    val_fraction: float = 0.1
    val_points: int = 4096
    stop_at_iou: float | None = None
    # exponential learning-rate decay: lr(step) = lr * lr_decay^(step/steps)
    lr_decay: float = 1.0
    # single-precision inner loop roughly halves step time; master weights,
    # Adam state, and evaluation stay in double precision
    float32: bool = True

    def __post_init__(self):
        for name in ("steps", "lr", "batch_hands", "query_points_per_hand",
                     "surface_points_per_hand", "presample_per_strategy",
                     "surface_presample",
                     "skinning_iou_cutoff", "skinning_tau", "eval_every",
                     "val_points"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.lambda_skinning < 0:
            raise ValueError("TrainConfig.lambda_skinning must be nonnegative")
        if self.lr_decay <= 0:
            raise ValueError("TrainConfig.lr_decay must be positive")


@dataclass
class CorpusSample:
    """One posed capsule hand plus its labeled query points."""

    skeleton: Skeleton
    radii: np.ndarray
    points: np.ndarray   # (N, 3)
    labels: np.ndarray   # (N,) uint8

    def oracle(self) -> CapsuleHand:
        return capsule_oracle(self.skeleton, self.radii)


# ---------------------------------------------------------------------------
# sampling and losses
# ---------------------------------------------------------------------------

def sample_query_points(oracle: CapsuleHand, n, strategy, rng,
                        sigma=5.0, margin=15.0) -> LabeledPointSet:
    """Labeled training points by one of the two sampling strategies."""
    if n <= 0:
        raise ValueError("n must be positive")
    if strategy == UNIFORM_BBOX:
        lo, hi = oracle.bbox(margin)
        pts = rng.uniform(lo, hi, size=(n, 3))
    elif strategy == SURFACE_GAUSSIAN:
        pts, _ = oracle.sample_surface(n, rng)
        if sigma > 0.0:
            pts = pts + rng.normal(scale=sigma, size=(n, 3))
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    labels = oracle.contains(pts).astype(np.uint8)
    return LabeledPointSet(points=pts, labels=labels, strategy=strategy)


def occupancy_loss(pred, labels, use_bce=False):
    """Mean squared error between occupancy outputs and {0,1} labels.

    Binary cross-entropy is available behind the flag.
    """
    labels = np.asarray(labels, dtype=value_of(pred).dtype)
    if np.shape(value_of(pred)) != labels.shape:
        raise ShapeMismatch(
            f"pred shape {np.shape(value_of(pred))} vs labels {labels.shape}")
    if use_bce:
        eps = 1e-7
        p = pred * (1.0 - 2.0 * eps) + eps
        return dc.neg(dc.mean_(labels * dc.log(p) + (1.0 - labels) * dc.log(1.0 - p)))
    return dc.mean_((pred - labels) ** 2)


def skinning_loss(part_values, weights):
    """Mean over points of the squared gap between per-part occupancies and
    target skinning weights: part_values (..., 16, N), weights (..., N, 16)."""
    weights = np.asarray(weights, dtype=value_of(part_values).dtype)
    shp = np.shape(value_of(part_values))
    if weights.shape[-2:] != (shp[-1], N_PARTS) or shp[-2] != N_PARTS:
        raise ShapeMismatch(
            f"part values {shp} incompatible with weights {weights.shape}")
    wt = np.swapaxes(weights, -1, -2)
    return dc.mean_(dc.sum_((part_values - wt) ** 2, axis=-2))


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

def random_shape(rng, jitter=0.2):
    """Bone lengths and capsule radii with per-finger scale jitter."""
    scale = rng.uniform(1.0 - jitter, 1.0 + jitter, size=5)
    per_bone = np.tile(scale, 4)
    return TEMPLATE_BONE_LENGTHS * per_bone, DEFAULT_RADII * per_bone


def random_angles(rng, margin=0.02) -> AngleSet:
    """Angles uniform within the biomechanical ranges (slightly shrunk)."""
    def u(lo, hi, size=None):
        pad = margin * (hi - lo)
        return rng.uniform(lo + pad, hi - pad, size=size)

    flexion = u(*FLEXION_RANGE, size=15)
    abduction = np.concatenate([u(*ABDUCTION_RANGE_L1, size=5),
                                u(*ABDUCTION_RANGE_DEEP, size=10)])
    spread = np.array([u(lo, hi) for lo, hi in SPREAD_RANGES])
    plane = np.array([u(lo, hi) for lo, hi in PLANE_RANGES])
    return AngleSet(flexion=flexion, abduction=abduction,
                    spread=spread, plane=plane)


def generate_corpus(n_poses, n_shapes, points_per_pose, rng,
                    sigma=5.0) -> list:
    """Posed capsule hands with labeled points, half per sampling strategy.

    Poses are distributed evenly over the shapes (shape changes slowest, so
    a leading split by pose index also splits by shape).
    """
    shapes = [random_shape(rng) for _ in range(n_shapes)]
    samples = []
    n_half = points_per_pose // 2
    for i in range(n_poses):
        lengths, radii = shapes[i % n_shapes]
        s = pose_from_angles(lengths, random_angles(rng))
        oracle = capsule_oracle(s, radii)
        uni = sample_query_points(oracle, points_per_pose - n_half,
                                  UNIFORM_BBOX, rng)
        srf = sample_query_points(oracle, n_half, SURFACE_GAUSSIAN, rng,
                                  sigma=sigma)
        samples.append(CorpusSample(
            skeleton=s, radii=radii,
            points=np.concatenate([uni.points, srf.points]),
            labels=np.concatenate([uni.labels, srf.labels])))
    return samples


def save_points_bin(path, points, labels):
    """Labeled points: magic, version u32, count u32, then N x (3 f32 + u8)."""
    points = np.asarray(points, dtype="<f4")
    labels = np.asarray(labels, dtype=np.uint8)
    rec = np.zeros(len(points), dtype=[("xyz", "<f4", 3), ("occ", "u1")])
    rec["xyz"] = points
    rec["occ"] = labels
    with open(path, "wb") as f:
        f.write(POINTS_MAGIC)
        f.write(struct.pack("<II", POINTS_VERSION, len(points)))
        f.write(rec.tobytes())


def load_points_bin(path):
    with open(path, "rb") as f:
        if f.read(4) != POINTS_MAGIC:
            raise ValueError(f"bad points magic in {path}")
        version, count = struct.unpack("<II", f.read(8))
        if version != POINTS_VERSION:
            raise ValueError(f"unsupported points version {version}")
        rec = np.frombuffer(f.read(count * 13),
                            dtype=[("xyz", "<f4", 3), ("occ", "u1")])
    return rec["xyz"].astype(np.float64), rec["occ"].copy()


def save_corpus(samples, directory):
    os.makedirs(directory, exist_ok=True)
    manifest = {"version": 1, "samples": []}
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}"
        sub = os.path.join(directory, name)
        os.makedirs(sub, exist_ok=True)
        save_skeleton_json(s.skeleton, os.path.join(sub, "skeleton.json"))
        save_points_bin(os.path.join(sub, "points.bin"), s.points, s.labels)
        manifest["samples"].append({"dir": name, "radii": s.radii.tolist(),
                                    "count": int(len(s.points))})
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_corpus(directory):
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    samples = []
    for entry in manifest["samples"]:
        sub = os.path.join(directory, entry["dir"])
        skel = load_skeleton_json(os.path.join(sub, "skeleton.json"))
        pts, labels = load_points_bin(os.path.join(sub, "points.bin"))
        samples.append(CorpusSample(skeleton=skel,
                                    radii=np.asarray(entry["radii"]),
                                    points=pts, labels=labels))
    return samples


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, x, g):
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * g
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g
        mh = self.m / (1.0 - self.b1 ** self.t)
        vh = self.v / (1.0 - self.b2 ** self.t)
        return x - self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class _HandData:
    """Precomputed per-sample tensors the training loop gathers from."""

    R: np.ndarray          # (16, 3, 3) canonicalizing rotations
    t: np.ndarray          # (16, 3) canonicalizing translations
    pose_flat: np.ndarray  # (48,)
    d16: np.ndarray        # (16,)
    points: np.ndarray
    labels: np.ndarray
    surf_points: np.ndarray
    skin_weights: np.ndarray


def _prepare(sample: CorpusSample, cfg: TrainConfig, rng,
             reference_point) -> _HandData:
    res = _canonicalize(np.asarray(sample.skeleton.joints))
    mats, pose_flat, d16 = hand_inputs(res, reference_point)
    n_surf = min(cfg.surface_presample, 2 * cfg.surface_points_per_hand)
    oracle = sample.oracle()
    surf, _ = oracle.sample_surface(n_surf, rng)
    weights = oracle.skinning_weights(surf, tau=cfg.skinning_tau)
    return _HandData(R=mats[:, :3, :3].copy(), t=mats[:, :3, 3].copy(),
                     pose_flat=pose_flat, d16=d16,
                     points=sample.points, labels=sample.labels,
                     surf_points=surf, skin_weights=weights)


def _batch_canonical(data, hand_idx, pts):
    """(nh, 16, n, 3) canonical points for gathered per-hand points."""
    R = np.stack([data[h].R for h in hand_idx])
    t = np.stack([data[h].t for h in hand_idx])
    return np.einsum("hpij,hnj->hpni", R, pts) + t[:, :, None, :]


def predict_occupancy(model: HandOccupancyModel, hand: _HandData, pts,
                      chunk=16384):
    """Plain inference for one prepared hand, chunked over points."""
    out = np.empty(len(pts))
    for lo in range(0, len(pts), chunk):
        p = pts[lo:lo + chunk]
        xc = np.einsum("pij,nj->pni", hand.R, p) + hand.t[:, None, :]
        vals = forward_parts(model.params, model.cfg, xc,
                             hand.pose_flat, hand.d16)
        out[lo:lo + chunk] = np.max(vals, axis=0)
    return out


def _validation_iou(model, data, val_idx, n_points):
    ious = []
    for h in val_idx:
        hand = data[h]
        k = min(n_points, len(hand.points))
        pred = predict_occupancy(model, hand, hand.points[:k]) > 0.5
        gt = hand.labels[:k].astype(bool)
        union = np.count_nonzero(pred | gt)
        ious.append(1.0 if union == 0 else np.count_nonzero(pred & gt) / union)
    return float(np.mean(ious))


def train(model: HandOccupancyModel, corpus, cfg: TrainConfig, rng):
    """Adam training with the skinning-loss schedule.

    Returns (model, log); the model carries the best-validation parameters.
    The log is a list of per-step dicts plus eval entries with val_iou.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    if len(corpus) == 1:
        # degenerate corpus: validate on the training sample
        train_idx, val_idx = [0], [0]
    else:
        n_val = max(1, int(round(len(corpus) * cfg.val_fraction)))
        train_idx = list(range(len(corpus) - n_val))
        val_idx = list(range(len(corpus) - n_val, len(corpus)))

    data = [_prepare(s, cfg, rng, model.cfg.reference_point) for s in corpus]
    adam = Adam(model.param_count, cfg.lr)
    flat = model.flat_parameters()
    skinning_active = cfg.lambda_skinning > 0.0
    best = (-1.0, flat.copy())
    log = []

    dt = np.float32 if cfg.float32 else np.float64
    nh = min(cfg.batch_hands, len(train_idx))
    for step in range(1, cfg.steps + 1):
        model.set_flat_parameters(flat)
        hands = rng.choice(train_idx, size=nh, replace=len(train_idx) < nh)

        npts = cfg.query_points_per_hand
        pts = np.empty((nh, npts, 3))
        labels = np.empty((nh, npts), dtype=dt)
        for r, h in enumerate(hands):
            sel = rng.integers(0, len(data[h].points), size=npts)
            pts[r] = data[h].points[sel]
            labels[r] = data[h].labels[sel]
        x_canon = _batch_canonical(data, hands, pts).astype(dt)
        pose_in = np.stack([data[h].pose_flat for h in hands]).astype(dt)
        d16 = np.stack([data[h].d16 for h in hands]).astype(dt)

        tape = dc.Tape()
        pvars = {k: tape.var(v.astype(dt)) for k, v in model.params.items()}
        vals = forward_parts(pvars, model.cfg, x_canon, pose_in, d16,
                             train_mode=True, rng=rng)
        pred = dc.max_(vals, axis=-2)
        l_occ = occupancy_loss(pred, labels, use_bce=cfg.use_bce)

        l_skin = 0.0
        if skinning_active:
            ns = min(cfg.surface_points_per_hand,
                     len(data[hands[0]].surf_points))
            spts = np.empty((nh, ns, 3))
            sw = np.empty((nh, ns, 16))
            for r, h in enumerate(hands):
                sel = rng.integers(0, len(data[h].surf_points), size=ns)
                spts[r] = data[h].surf_points[sel]
                sw[r] = data[h].skin_weights[sel]
            sx = _batch_canonical(data, hands, spts).astype(dt)
            svals = forward_parts(pvars, model.cfg, sx, pose_in, d16,
                                  train_mode=True, rng=rng)
            l_skin = skinning_loss(svals, sw.astype(dt))
            total = l_occ + cfg.lambda_skinning * l_skin
        else:
            total = l_occ

        loss_val = float(value_of(total))
        if not np.isfinite(loss_val):
            raise NonFiniteLoss(f"loss diverged at step {step}: {loss_val}")
        grads = tape.gradient([total], list(pvars.values()))
        g = np.concatenate([gg.ravel() for gg in grads]).astype(np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient at step {step}")
        adam.lr = cfg.lr * cfg.lr_decay ** (step / cfg.steps)
        flat = adam.step(flat, g)

        entry = {"step": step, "loss": loss_val,
                 "occupancy_loss": float(value_of(l_occ)),
                 "skinning_loss": float(value_of(l_skin)),
                 "lambda_skinning": cfg.lambda_skinning if skinning_active else 0.0,
                 "skinning_active": skinning_active}
        if val_idx and (step % cfg.eval_every == 0 or step == cfg.steps):
            model.set_flat_parameters(flat)
            iou = _validation_iou(model, data, val_idx, cfg.val_points)
            entry["val_iou"] = iou
            if iou > best[0]:
                best = (iou, flat.copy())
            if skinning_active and iou >= cfg.skinning_iou_cutoff:
                skinning_active = False
            if cfg.stop_at_iou is not None and iou >= cfg.stop_at_iou:
                log.append(entry)
                break
        log.append(entry)

    model.set_flat_parameters(best[1] if best[0] >= 0.0 else flat)
    return model, log


def evaluate_iou(model: HandOccupancyModel, corpus, max_points=None):
    """Mean per-sample IoU of thresholded predictions on stored points."""
    ious = []
    for s in corpus:
        res = _canonicalize(np.asarray(s.skeleton.joints))
        mats, pose_flat, d16 = hand_inputs(res, model.cfg.reference_point)
        hand = _HandData(R=mats[:, :3, :3].copy(), t=mats[:, :3, 3].copy(),
                         pose_flat=pose_flat, d16=d16, points=s.points,
                         labels=s.labels, surf_points=None, skin_weights=None)
        k = len(s.points) if max_points is None else min(max_points, len(s.points))
        pred = predict_occupancy(model, hand, s.points[:k]) > 0.5
        gt = s.labels[:k].astype(bool)
        union = np.count_nonzero(pred | gt)
        ious.append(1.0 if union == 0 else np.count_nonzero(pred & gt) / union)
    return float(np.mean(ious))
