"""Seeded generation of synthetic non-rigid registration pairs.

A pair is built by warping a source cloud with a smooth radial-basis
displacement field, rotating it about the z axis, cropping it to a partial
overlap, jittering it with Gaussian noise and finally appending uniform
outliers. Every stage draws from its own seed derived from the pair seed.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import GenerationError, ParameterError
from .geometry import (
    CorrespondenceSet,
    DeformationField,
    PointCloud,
    RigidTransform,
    apply_rigid,
    as_cloud,
    mean_distance,
)

N_KERNELS = 8
BANDWIDTH = 0.3
LEVEL_SCALE = 0.5
PERCENTILE = 95.0
OUTLIER_INFLATION = 0.1
OVERLAP_TOL = 0.02
STAGES = ("deform", "rotate", "crop", "noise", "outliers")
SHAPES = ("box", "sphere", "cylinder", "cone", "torus")


@dataclass(frozen=True)
class ChallengeSpec:
    deformation_level: float = 0.0
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    overlap_ratio: float = 1.0
    rotation_max: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.deformation_level <= 1.0:
            raise ParameterError("deformation_level must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be nonnegative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ParameterError("outlier_fraction must lie in [0, 1)")
        if not 0.0 < self.overlap_ratio <= 1.0:
            raise ParameterError("overlap_ratio must lie in (0, 1]")
        if self.rotation_max < 0:
            raise ParameterError("rotation_max must be nonnegative")
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ChallengeSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown challenge fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class RegistrationPair:
    """Source and target clouds with ground truth.

    ``field_gt`` row ``r`` is the non-rigid displacement of source point
    ``correspondences.source[r]``; the target correspondent is that displaced
    point moved by ``rigid`` (plus noise, if any was injected).
    """

    source: PointCloud
    target: PointCloud
    correspondences: CorrespondenceSet
    field_gt: DeformationField
    spec: ChallengeSpec = field(default_factory=ChallengeSpec)
    rigid: RigidTransform = field(default_factory=RigidTransform.identity)
    stage_seeds: dict = field(default_factory=dict)
    outlier_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    provenance: str = "synthetic"
    label: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.outlier_indices = np.asarray(self.outlier_indices, dtype=np.int64).reshape(-1)
        self.correspondences.check_bounds(len(self.source), len(self.target))
        if len(self.field_gt) != len(self.correspondences):
            raise ParameterError("field_gt must have one row per correspondence")

    @property
    def corr_source(self) -> PointCloud:
        return self.source.subset(self.correspondences.source)

    @property
    def corr_target(self) -> PointCloud:
        return self.target.subset(self.correspondences.target)

    def initial_mean_distance(self) -> float:
        return mean_distance(self.corr_source, self.corr_target)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegistrationPair):
            return NotImplemented
        return (
            self.source == other.source
            and self.target == other.target
            and self.correspondences == other.correspondences
            and self.field_gt == other.field_gt
            and self.spec == other.spec
            and self.rigid == other.rigid
            and self.stage_seeds == other.stage_seeds
            and np.array_equal(self.outlier_indices, other.outlier_indices)
            and self.provenance == other.provenance
            and self.label == other.label
            and self.extra == other.extra
        )


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_primitive(shape: str, n: int, seed: int = 0) -> PointCloud:
    """Sample ``n`` points on the surface of a primitive.

    The result is centred on its centroid and scaled to unit bounding-box
    diagonal.
    """
    if n < 1:
        raise ParameterError("n must be positive")
    rng = np.random.default_rng(seed)
    if shape == "sphere":
        pts = _unit_vectors(rng, n)
    elif shape == "box":
        face = rng.integers(0, 6, size=n)
        pts = rng.uniform(-1.0, 1.0, size=(n, 3))
        axis = face // 2
        pts[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0)
        pts *= np.array([1.0, 0.7, 0.5])
    elif shape == "cylinder":
        theta = rng.uniform(0, 2 * np.pi, n)
        pts = np.stack([np.cos(theta), np.sin(theta), rng.uniform(-1.0, 1.0, n)], axis=1)
    elif shape == "cone":
        theta = rng.uniform(0, 2 * np.pi, n)
        # area element grows linearly with distance from the apex
        s = np.sqrt(rng.uniform(0, 1, n))
        pts = np.stack([s * np.cos(theta), s * np.sin(theta), 1.5 * (1.0 - s)], axis=1)
    elif shape == "torus":
        big, small = 1.0, 0.35
        u = rng.uniform(0, 2 * np.pi, n)
        # rejection sampling for uniform surface density
        v = np.empty(n)
        filled = 0
        while filled < n:
            cand = rng.uniform(0, 2 * np.pi, 2 * n)
            keep = cand[rng.uniform(0, 1, 2 * n) < (big + small * np.cos(cand)) / (big + small)]
            take = min(len(keep), n - filled)
            v[filled:filled + take] = keep[:take]
            filled += take
        pts = np.stack(
            [(big + small * np.cos(v)) * np.cos(u), (big + small * np.cos(v)) * np.sin(u), small * np.sin(v)],
            axis=1,
        )
    else:
        raise ParameterError(f"unknown shape {shape!r}; choose from {SHAPES}")
    pts = pts - pts.mean(axis=0)
    diag = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
    return PointCloud(pts / diag)


def rbf_field(points: np.ndarray, level: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = len(points)
    diag = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
    centers = points[rng.choice(n, size=N_KERNELS, replace=n < N_KERNELS)]
    vectors = rng.normal(size=(N_KERNELS, 3))
    if level == 0.0 or diag == 0.0:
        return np.zeros_like(points)
    bw = BANDWIDTH * diag
    sq = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    raw = np.exp(-sq / (2.0 * bw * bw)) @ vectors
    p95 = np.percentile(np.linalg.norm(raw, axis=1), PERCENTILE)
    if p95 <= 0:
        raise GenerationError("deformation field vanished; cannot calibrate")
    return raw * (level * LEVEL_SCALE * diag / p95)


def deform(source: PointCloud, level: float, seed: int) -> tuple[PointCloud, DeformationField]:
    """Warp ``source`` with a smooth field whose 95th-percentile magnitude is
    ``level * 0.5 * diagonal``."""
    if not 0.0 <= level <= 1.0:
        raise ParameterError(f"deformation level {level} outside [0, 1]")
    source = as_cloud(source)
    disp = rbf_field(source.points, float(level), seed)
    return source.with_points(source.points + disp), DeformationField(disp)


def add_noise(cloud: PointCloud, sigma: float, seed: int) -> PointCloud:
    if sigma < 0:
        raise ParameterError("noise sigma must be nonnegative")
    cloud = as_cloud(cloud)
    if sigma == 0:
        return cloud
    rng = np.random.default_rng(seed)
    return cloud.with_points(cloud.points + rng.normal(0.0, sigma, size=cloud.points.shape))


def outlier_box(cloud: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = cloud.points.min(axis=0), cloud.points.max(axis=0)
    center, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    half = half * (1.0 + OUTLIER_INFLATION)
    return center - half, center + half


def add_outliers(cloud: PointCloud, fraction: float, seed: int) -> tuple[PointCloud, np.ndarray]:
    if not 0.0 <= fraction < 1.0:
        raise ParameterError("outlier fraction must lie in [0, 1)")
    cloud = as_cloud(cloud)
    n = len(cloud)
    count = int(math.floor(fraction * n + 0.5))
    if count == 0:
        return cloud, np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    lo, hi = outlier_box(cloud)
    extra = rng.uniform(lo, hi, size=(count, 3))
    # attribute channels are not meaningful for synthetic points
    out = PointCloud(np.vstack([cloud.points, extra]))
    return out, np.arange(n, n + count, dtype=np.int64)


def crop_to_overlap(pair: RegistrationPair, ratio: float, seed: int, max_tries: int = 32) -> RegistrationPair:
    """Cut the target with a random half-space so that a ``ratio`` fraction of
    source points keep their ground-truth correspondent."""
    if not 0.0 < ratio <= 1.0:
        raise ParameterError("overlap ratio must lie in (0, 1]")
    if ratio == 1.0:
        return pair
    n_src = len(pair.source)
    keep = int(math.floor(ratio * n_src + 0.5))
    corr = pair.correspondences
    if keep < 1 or keep > len(corr) or abs(keep / n_src - ratio) > OVERLAP_TOL:
        raise GenerationError(f"overlap ratio {ratio} is unreachable with {n_src} source points")
    rng = np.random.default_rng(seed)
    tgt = pair.target.points
    for _ in range(max_tries):
        direction = _unit_vectors(rng, 1)[0]
        proj = tgt @ direction
        corr_proj = np.sort(proj[corr.target])
        threshold = corr_proj[keep - 1]
        if keep < len(corr_proj) and corr_proj[keep] == threshold:
            continue
        break
    else:
        raise GenerationError("could not find a half-space that separates the requested overlap")

    kept = np.flatnonzero(proj <= threshold)
    remap = np.full(len(tgt), -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    rows = np.flatnonzero(remap[corr.target] >= 0)
    new_corr = CorrespondenceSet(np.stack([corr.source[rows], remap[corr.target[rows]]], axis=1))
    outliers = remap[pair.outlier_indices]
    return RegistrationPair(
        source=pair.source,
        target=pair.target.subset(kept),
        correspondences=new_corr,
        field_gt=DeformationField(pair.field_gt.displacements[rows]),
        spec=pair.spec,
        rigid=pair.rigid,
        stage_seeds=dict(pair.stage_seeds),
        outlier_indices=outliers[outliers >= 0],
        provenance=pair.provenance,
        label=pair.label,
        extra=dict(pair.extra),
    )


def stage_seeds(seed: int) -> dict[str, int]:
    state = np.random.SeedSequence(int(seed)).generate_state(len(STAGES), dtype=np.uint64)
    return {name: int(s) for name, s in zip(STAGES, state)}


def make_pair(source: PointCloud, spec: ChallengeSpec, provenance: str = "synthetic") -> RegistrationPair:
    """Run deform, rotate, crop, noise and outlier stages in that order."""
    source = as_cloud(source)
    seeds = stage_seeds(spec.seed)
    deformed, disp = deform(source, spec.deformation_level, seeds["deform"])

    angle = np.random.default_rng(seeds["rotate"]).uniform(0.0, spec.rotation_max)
    rigid = RigidTransform.about_z(angle)
    target = apply_rigid(deformed, rigid)

    pair = RegistrationPair(
        source=source,
        target=target,
        correspondences=CorrespondenceSet.identity(len(source)),
        field_gt=disp,
        spec=spec,
        rigid=rigid,
        stage_seeds=seeds,
        provenance=provenance,
    )
    pair = crop_to_overlap(pair, spec.overlap_ratio, seeds["crop"])
    noisy = add_noise(pair.target, spec.noise_sigma, seeds["noise"])
    with_outliers, injected = add_outliers(noisy, spec.outlier_fraction, seeds["outliers"])
    pair.target = with_outliers
    pair.outlier_indices = injected
    return pair


def ground_truth_residual(pair: RegistrationPair) -> np.ndarray:
    """Distance between each warped+moved source correspondent and its target."""
    src = pair.corr_source.points + pair.field_gt.displacements
    moved = src @ pair.rigid.rotation.T + pair.rigid.translation
    return np.linalg.norm(moved - pair.corr_target.points, axis=1)
