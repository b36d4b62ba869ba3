"""Point cloud types, transforms, nearest neighbours and evaluation metrics.

Everything here works on float64 numpy arrays. Inputs stored at lower
precision are promoted before any distance is computed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DimensionError, EmptyInputError, InvalidTransformError, ParameterError

ORTHO_TOL = 1e-6

# rows of the query processed per block in the brute-force searches
_CHUNK = 1024


def _as_points(points) -> np.ndarray:
    arr = np.array(points, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionError(f"expected an (n, 3) array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of 3D points with optional per-point scalar channels."""

    points: np.ndarray
    attributes: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        pts = _as_points(self.points)
        if pts.shape[0] < 1:
            raise EmptyInputError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ParameterError("point coordinates must be finite")
        pts.setflags(write=False)
        attrs = {}
        for name, values in dict(self.attributes).items():
            vals = np.array(values, dtype=np.float64).reshape(-1)
            if vals.shape[0] != pts.shape[0]:
                raise DimensionError(
                    f"attribute {name!r} has length {vals.shape[0]}, cloud has {pts.shape[0]} points"
                )
            vals.setflags(write=False)
            attrs[name] = vals
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "attributes", attrs)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.attributes)

    def with_attribute(self, name: str, values) -> "PointCloud":
        attrs = dict(self.attributes)
        attrs[name] = values
        return PointCloud(self.points, attrs)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            self.points[idx], {k: v[idx] for k, v in self.attributes.items()}
        )

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        if set(self.attributes) != set(other.attributes):
            return False
        return np.array_equal(self.points, other.points) and all(
            np.array_equal(v, other.attributes[k]) for k, v in self.attributes.items()
        )


def as_cloud(obj) -> PointCloud:
    return obj if isinstance(obj, PointCloud) else PointCloud(obj)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64)
        trans = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise DimensionError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise InvalidTransformError("transform entries must be finite")
        if (
            np.abs(rot @ rot.T - np.eye(3)).max() > ORTHO_TOL
            or abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL
        ):
            raise InvalidTransformError("rotation is not a proper orthogonal matrix")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def about_z(cls, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Per-point displacement vectors aligned index-for-index with a source cloud."""

    displacements: np.ndarray

    def __post_init__(self):
        disp = np.array(self.displacements, dtype=np.float64)
        if disp.ndim != 2 or disp.shape[1] != 3:
            raise DimensionError(f"expected an (n, 3) displacement array, got {disp.shape}")
        if not np.all(np.isfinite(disp)):
            raise ParameterError("displacements must be finite")
        disp.setflags(write=False)
        object.__setattr__(self, "displacements", disp)

    def __len__(self) -> int:
        return self.displacements.shape[0]

    @classmethod
    def zeros(cls, n: int) -> "DeformationField":
        return cls(np.zeros((n, 3)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, DeformationField):
            return NotImplemented
        return np.array_equal(self.displacements, other.displacements)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """(source index, target index) pairs. Source indices are unique."""

    pairs: np.ndarray

    def __post_init__(self):
        pairs = np.array(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(np.unique(pairs[:, 0])) != len(pairs):
            raise ParameterError("source indices in a correspondence set must be unique")
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return self.pairs.shape[0]

    @property
    def source(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def target(self) -> np.ndarray:
        return self.pairs[:, 1]

    @classmethod
    def identity(cls, n: int) -> "CorrespondenceSet":
        idx = np.arange(n)
        return cls(np.stack([idx, idx], axis=1))

    def check_bounds(self, n_source: int, n_target: int) -> None:
        if len(self) == 0:
            return
        if self.pairs.min() < 0 or self.source.max() >= n_source or self.target.max() >= n_target:
            raise DimensionError("correspondence index out of range")

    def __eq__(self, other) -> bool:
        if not isinstance(other, CorrespondenceSet):
            return NotImplemented
        return np.array_equal(self.pairs, other.pairs)


def apply_rigid(cloud: PointCloud, xf: RigidTransform) -> PointCloud:
    if not isinstance(xf, RigidTransform):
        xf = RigidTransform(*xf)
    cloud = as_cloud(cloud)
    return cloud.with_points(cloud.points @ xf.rotation.T + xf.translation)


def apply_deformation(cloud: PointCloud, deformation: DeformationField) -> PointCloud:
    cloud = as_cloud(cloud)
    if not isinstance(deformation, DeformationField):
        deformation = DeformationField(deformation)
    if len(deformation) != len(cloud):
        raise DimensionError(
            f"field has {len(deformation)} vectors but cloud has {len(cloud)} points"
        )
    return cloud.with_points(cloud.points + deformation.displacements)


def mean_distance(a: PointCloud, b: PointCloud) -> float:
    """Average Euclidean distance between index-corresponding points."""
    pa, pb = as_cloud(a).points, as_cloud(b).points
    if pa.shape != pb.shape:
        raise DimensionError(f"mean distance needs equal cardinality, got {len(pa)} and {len(pb)}")
    return float(np.mean(np.sqrt(np.sum((pa - pb) ** 2, axis=1))))


def _pairwise_sq(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    # fixed x, y, z summation order so tied distances compare equal
    diff = query[:, None, :] - reference[None, :, :]
    sq = diff * diff
    return sq[..., 0] + sq[..., 1] + sq[..., 2]


def nearest_sq_distances(query, reference) -> np.ndarray:
    """Squared distance from every query point to its closest reference point."""
    q, r = as_cloud(query).points, as_cloud(reference).points
    out = np.empty(len(q))
    for start in range(0, len(q), _CHUNK):
        out[start:start + _CHUNK] = _pairwise_sq(q[start:start + _CHUNK], r).min(axis=1)
    return out


def chamfer_distance(a: PointCloud, b: PointCloud) -> float:
    pa, pb = _as_points(getattr(a, "points", a)), _as_points(getattr(b, "points", b))
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyInputError("chamfer distance needs two non-empty clouds")
    return float(nearest_sq_distances(pa, pb).mean() + nearest_sq_distances(pb, pa).mean())


def knn_indices(query, reference, k: int, exclude_self: bool = False) -> np.ndarray:
    """Brute-force k nearest neighbours by squared Euclidean distance.

    Rows are ordered by ascending distance with ties going to the lower
    reference index. With ``exclude_self`` the query and reference must be
    the same cloud and each point's own index is never returned.
    """
    q, r = as_cloud(query).points, as_cloud(reference).points
    avail = len(r) - (1 if exclude_self else 0)
    if k < 1 or k > avail:
        raise ParameterError(f"k={k} is outside [1, {avail}]")
    if exclude_self and len(q) != len(r):
        raise DimensionError("exclude_self requires query and reference to be the same cloud")
    out = np.empty((len(q), k), dtype=np.int64)
    for start in range(0, len(q), _CHUNK):
        d = _pairwise_sq(q[start:start + _CHUNK], r)
        if exclude_self:
            rows = np.arange(d.shape[0])
            d[rows, rows + start] = np.inf
        out[start:start + _CHUNK] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def normalize_unit_diagonal(cloud: PointCloud) -> tuple[PointCloud, np.ndarray, float]:
    """Center on the centroid and scale to unit bounding-box diagonal.

    Returns the normalized cloud with the centre and scale that were removed.
    """
    cloud = as_cloud(cloud)
    center = cloud.points.mean(axis=0)
    diag = cloud.bbox_diagonal()
    scale = diag if diag > 0 else 1.0
    return cloud.with_points((cloud.points - center) / scale), center, scale
