"""Synthetic two-view scene generation and correspondence corruption.

A scene is a pair of pinhole cameras with a shared cloud of 3-D points;
corruption superimposes noise on the true matches: Gaussian pixel jitter
on inliers, descriptor-ambiguity drift of the second image point, and
gross random re-pairing.  Ground-truth inlier labels are always
re-derived from the epipolar threshold, never trusted from the
construction bookkeeping.  Everything is deterministic per seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .geometry import (
    CameraIntrinsics,
    CorrespondenceSet,
    Pose,
    classify_by_epipolar,
    essential_from_pose,
    normalize_points,
    rotation_from_axis_angle,
)
from .serialize import fmt_float, fmt_float_list

__all__ = [
    "DatagenError",
    "GenerationError",
    "DatasetFormatError",
    "SceneConfig",
    "NoiseConfig",
    "ScenePair",
    "DatasetRecord",
    "INLIER_EPIPOLAR_TAU",
    "sample_scene",
    "project_scene",
    "corrupt",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "record_correspondences",
]

INLIER_EPIPOLAR_TAU = 1e-4

_RECORD_FIELDS = ("pair_id", "k1", "k2", "r", "t", "corrs", "labels")


class DatagenError(Exception):
    pass


class GenerationError(DatagenError):
    """Scene or corruption sampling could not satisfy its contract."""


class DatasetFormatError(DatagenError):
    """A dataset file violates the JSON Lines schema."""


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 512
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 320.0
    width: float = 640.0
    height: float = 640.0
    depth_min: float = 4.0
    depth_max: float = 20.0
    max_rotation_deg: float = 30.0

    def __post_init__(self):
        if self.n_points < 8:
            raise GenerationError("a scene needs at least 8 points")
        if not 0 < self.depth_min < self.depth_max:
            raise GenerationError("invalid depth range")


@dataclass(frozen=True)
class NoiseConfig:
    n_total: int = 512
    outlier_ratio: float = 0.5
    inlier_jitter_px: float = 0.5
    drift_fraction: float = 0.5
    drift_px: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.n_total < 16:
            raise GenerationError("n_total must be at least 16")
        if not 0.0 <= self.outlier_ratio < 1.0:
            raise GenerationError("outlier_ratio must lie in [0, 1)")
        if not 0.0 <= self.drift_fraction <= 1.0:
            raise GenerationError("drift_fraction must lie in [0, 1]")
        if self.inlier_jitter_px < 0 or self.drift_px < 0:
            raise GenerationError("noise magnitudes must be nonnegative")
        if self.n_total - round(self.n_total * self.outlier_ratio) < 8:
            raise GenerationError("configuration leaves fewer than 8 inliers")


@dataclass
class ScenePair:
    k1: CameraIntrinsics
    k2: CameraIntrinsics
    pose: Pose
    points3d: np.ndarray


@dataclass
class DatasetRecord:
    pair_id: str
    k1: CameraIntrinsics
    k2: CameraIntrinsics
    r: np.ndarray
    t: np.ndarray
    corrs: np.ndarray       # (N, 4) pixel coordinates
    labels: np.ndarray      # (N,) bool, re-derived from the epipolar threshold

    @property
    def pose(self):
        return Pose(self.r, self.t)


def _pair_key(pair_id):
    """Stable 64-bit key for a pair id, used to derive RNG streams."""
    digest = hashlib.sha256(pair_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _project(points3d, k):
    z = points3d[:, 2]
    u = points3d[:, 0] / z * k.fx + k.cx
    v = points3d[:, 1] / z * k.fy + k.cy
    return np.column_stack([u, v])


def sample_scene(seed, config=SceneConfig()):
    """Sample a random two-view scene, deterministic per seed.

    The relative rotation angle is uniform below the configured maximum,
    the baseline has unit norm, and 3-D points are rejection-sampled so
    that both projections land inside the image and in front of both
    cameras.  ``seed`` may be an int or a sequence of ints.
    """
    entropy = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    rng = np.random.default_rng(np.random.SeedSequence(entropy))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, np.radians(config.max_rotation_deg))
    r = rotation_from_axis_angle(axis, angle)
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    pose = Pose(r, t)
    k = CameraIntrinsics(config.fx, config.fy, config.cx, config.cy)

    collected = []
    need = config.n_points
    for _ in range(1000):
        m = 2 * need
        u = rng.uniform(0.0, config.width, m)
        v = rng.uniform(0.0, config.height, m)
        z = rng.uniform(config.depth_min, config.depth_max, m)
        pts = np.column_stack(
            [(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z]
        )
        in2 = pts @ r.T + t
        proj2 = np.full((m, 2), -1.0)
        front = in2[:, 2] > 1e-6
        proj2[front] = _project(in2[front], k)
        ok = (
            front
            & (proj2[:, 0] >= 0) & (proj2[:, 0] <= config.width)
            & (proj2[:, 1] >= 0) & (proj2[:, 1] <= config.height)
        )
        collected.append(pts[ok])
        need -= int(np.count_nonzero(ok))
        if need <= 0:
            break
    else:
        raise GenerationError("could not sample enough co-visible points")
    points3d = np.concatenate(collected)[: config.n_points]
    return ScenePair(k, k, pose, points3d)


def project_scene(scene):
    """True pixel projections of the scene points: two (M, 2) arrays."""
    p1 = _project(scene.points3d, scene.k1)
    in2 = scene.points3d @ scene.pose.r.T + scene.pose.t
    p2 = _project(in2, scene.k2)
    return p1, p2


def corrupt(scene, noise, pair_id="0"):
    """Corrupt true matches into a labeled record per the noise model.

    Inliers get Gaussian pixel jitter in both images.  A ``drift``
    outlier keeps its first image point but displaces the second by a
    random direction with magnitude ~ N(drift_px, drift_px/4), clamped
    to at least 10x the jitter sigma.  A ``random`` outlier pairs the
    first image point with a uniform location.  Labels are then
    recomputed from the symmetric epipolar distance at tau=1e-4, and the
    order is shuffled.  Regenerates (up to 10 attempts) if fewer than 8
    recomputed inliers survive.
    """
    n = noise.n_total
    if scene.points3d.shape[0] < n:
        raise GenerationError("scene has fewer points than n_total")
    n_out = int(round(n * noise.outlier_ratio))
    n_in = n - n_out
    n_drift = int(round(n_out * noise.drift_fraction))
    n_rand = n_out - n_drift
    e_gt = essential_from_pose(scene.pose)
    width = scene.k1.cx * 2.0
    height = scene.k1.cy * 2.0
    key = _pair_key(pair_id)

    for attempt in range(10):
        rng = np.random.default_rng(
            np.random.SeedSequence([noise.seed, key, attempt])
        )
        p1, p2 = project_scene(scene)
        p1 = p1[:n] + rng.normal(0.0, noise.inlier_jitter_px, (n, 2))
        p2 = p2[:n] + rng.normal(0.0, noise.inlier_jitter_px, (n, 2))
        # drift block follows the inliers, random re-pairings come last
        if n_drift:
            lo = n_in
            hi = n_in + n_drift
            mag = rng.normal(noise.drift_px, noise.drift_px / 4.0, n_drift)
            mag = np.maximum(mag, 10.0 * noise.inlier_jitter_px)
            theta = rng.uniform(0.0, 2.0 * np.pi, n_drift)
            p2[lo:hi, 0] += mag * np.cos(theta)
            p2[lo:hi, 1] += mag * np.sin(theta)
        if n_rand:
            p2[n_in + n_drift:, 0] = rng.uniform(0.0, width, n_rand)
            p2[n_in + n_drift:, 1] = rng.uniform(0.0, height, n_rand)
        corrs = np.column_stack([p1, p2])
        norm = normalize_points(corrs, scene.k1, scene.k2)
        labels = classify_by_epipolar(norm, e_gt, INLIER_EPIPOLAR_TAU)
        if int(labels.sum()) < 8:
            continue
        perm = rng.permutation(n)
        return DatasetRecord(
            pair_id=pair_id,
            k1=scene.k1,
            k2=scene.k2,
            r=scene.pose.r.copy(),
            t=scene.pose.t.copy(),
            corrs=corrs[perm],
            labels=labels[perm],
        )
    raise GenerationError(
        f"pair {pair_id}: fewer than 8 inliers after 10 corruption attempts"
    )


def generate_dataset(seed, n_pairs, noise=NoiseConfig(), scene_config=None):
    """Generate ``n_pairs`` labeled records; fully determined by inputs."""
    if scene_config is None:
        scene_config = SceneConfig(n_points=noise.n_total)
    records = []
    for i in range(n_pairs):
        pair_id = f"{i:06d}"
        scene = sample_scene([seed, _pair_key(pair_id)], scene_config)
        noise_i = replace(noise, seed=seed)
        records.append(corrupt(scene, noise_i, pair_id))
    return records


# -- JSON Lines persistence ----------------------------------------------


def _record_line(rec):
    parts = [
        f'"pair_id": {json.dumps(rec.pair_id)}',
        f'"k1": {fmt_float_list(rec.k1.as_list())}',
        f'"k2": {fmt_float_list(rec.k2.as_list())}',
        f'"r": {fmt_float_list(rec.r.reshape(-1))}',
        f'"t": {fmt_float_list(rec.t)}',
        f'"corrs": {fmt_float_list(rec.corrs.reshape(-1))}',
        f'"labels": [{", ".join(str(int(b)) for b in rec.labels)}]',
    ]
    return "{" + ", ".join(parts) + "}"


def write_dataset(records, path):
    """Write records as JSON Lines with 17-significant-digit floats."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(_record_line(rec) + "\n")


def _parse_record(obj, lineno):
    for field_name in _RECORD_FIELDS:
        if field_name not in obj:
            raise DatasetFormatError(f"line {lineno}: missing field '{field_name}'")
    try:
        k1 = CameraIntrinsics(*obj["k1"])
        k2 = CameraIntrinsics(*obj["k2"])
        r = np.asarray(obj["r"], dtype=np.float64).reshape(3, 3)
        t = np.asarray(obj["t"], dtype=np.float64).reshape(3)
        corrs = np.asarray(obj["corrs"], dtype=np.float64).reshape(-1, 4)
        labels = np.asarray(obj["labels"], dtype=np.int64).astype(bool)
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line {lineno}: {exc}") from exc
    if labels.shape[0] != corrs.shape[0]:
        raise DatasetFormatError(
            f"line {lineno}: labels/correspondence count mismatch"
        )
    return DatasetRecord(str(obj["pair_id"]), k1, k2, r, t, corrs, labels)


def read_dataset(path):
    """Read a JSON Lines dataset; an empty file yields an empty list."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: {exc}") from exc
            records.append(_parse_record(obj, lineno))
    return records


def record_correspondences(record):
    """Normalized, labeled correspondences of a record."""
    corrs = normalize_points(record.corrs, record.k1, record.k2)
    corrs.labels = record.labels.copy()
    return corrs
