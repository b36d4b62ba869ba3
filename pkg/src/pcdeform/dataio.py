"""Reading and writing registration pairs.

Bundle layout (one directory per pair)::

    source.xyz   one point per line, three %.17g columns
    target.xyz   same
    corr.csv     header ``source,target`` then integer index pairs
    meta.json    challenge spec, stage seeds, rigid transform, ground-truth
                 field, outlier indices, provenance

4DMatch-style records are ``.npz`` containers holding ``X, D, R, t, overlap,
corr``. Files using the upstream names are translated by ``UPSTREAM_FIELDS``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BundleFormatError,
    BundleIOError,
    BundleParseError,
    DimensionError,
    ParameterError,
)
from .geometry import CorrespondenceSet, DeformationField, PointCloud, RigidTransform
from .synth import ChallengeSpec, RegistrationPair

FORMAT_VERSION = 1
BUNDLE_FILES = {
    "source": "source.xyz",
    "target": "target.xyz",
    "correspondences": "corr.csv",
    "metadata": "meta.json",
}
OVERLAP_THRESHOLD = 0.45

# upstream 4DMatch .npz key -> canonical record field
UPSTREAM_FIELDS = {
    "s_pc": "X",
    "s2t_flow": "D",
    "rot": "R",
    "trans": "t",
    "s_overlap_rate": "overlap",
    "correspondences": "corr",
}
RECORD_FIELDS = ("X", "D", "R", "t", "overlap", "corr")


def format_points(points: np.ndarray) -> str:
    buf = io.StringIO()
    for x, y, z in np.asarray(points, dtype=np.float64):
        buf.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
    return buf.getvalue()


def parse_points(text: str, path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise BundleParseError(path, lineno, f"expected 3 columns, found {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise BundleParseError(path, lineno, str(exc)) from None
        if not all(math.isfinite(v) for v in vals):
            raise BundleParseError(path, lineno, "non-finite coordinate")
        rows.append(vals)
    if not rows:
        raise BundleParseError(path, 1, "no points")
    return np.array(rows, dtype=np.float64)


def _floats(arr) -> list:
    return np.asarray(arr, dtype=np.float64).tolist()


def pair_metadata(pair: RegistrationPair) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "spec": pair.spec.to_dict(),
        "stage_seeds": {k: int(v) for k, v in pair.stage_seeds.items()},
        "rigid": {
            "rotation": _floats(pair.rigid.rotation),
            "translation": _floats(pair.rigid.translation),
        },
        "field_gt": _floats(pair.field_gt.displacements),
        "outlier_indices": [int(i) for i in pair.outlier_indices],
        "provenance": pair.provenance,
        "label": pair.label,
        "extra": pair.extra,
    }


def write_bundle(pair: RegistrationPair, path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / BUNDLE_FILES["source"]).write_text(format_points(pair.source.points))
        (path / BUNDLE_FILES["target"]).write_text(format_points(pair.target.points))
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["source", "target"])
        writer.writerows(pair.correspondences.pairs.tolist())
        (path / BUNDLE_FILES["correspondences"]).write_text(buf.getvalue())
        (path / BUNDLE_FILES["metadata"]).write_text(
            json.dumps(pair_metadata(pair), indent=1, sort_keys=True) + "\n"
        )
    except OSError as exc:
        raise BundleIOError(f"cannot write bundle at {path}: {exc}") from exc
    return path


def _read_part(path: Path, part: str) -> str:
    f = path / BUNDLE_FILES[part]
    if not f.is_file():
        raise BundleFormatError(f"bundle {path} is missing its {part} file ({f.name})")
    try:
        return f.read_text()
    except OSError as exc:
        raise BundleIOError(f"cannot read {f}: {exc}") from exc


def parse_correspondences(text: str, path) -> np.ndarray:
    lines = text.splitlines()
    if not lines or [c.strip() for c in lines[0].split(",")] != ["source", "target"]:
        raise BundleParseError(path, 1, "expected header 'source,target'")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise BundleParseError(path, lineno, f"expected 2 columns, found {len(parts)}")
        try:
            rows.append((int(parts[0]), int(parts[1])))
        except ValueError as exc:
            raise BundleParseError(path, lineno, str(exc)) from None
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def read_bundle(path) -> RegistrationPair:
    path = Path(path)
    if not path.is_dir():
        raise BundleFormatError(f"{path} is not a bundle directory")
    texts = {part: _read_part(path, part) for part in BUNDLE_FILES}
    source = parse_points(texts["source"], path / BUNDLE_FILES["source"])
    target = parse_points(texts["target"], path / BUNDLE_FILES["target"])
    corr = parse_correspondences(texts["correspondences"], path / BUNDLE_FILES["correspondences"])
    try:
        meta = json.loads(texts["metadata"])
    except json.JSONDecodeError as exc:
        raise BundleParseError(path / BUNDLE_FILES["metadata"], exc.lineno, exc.msg) from None
    try:
        field_gt = np.array(meta["field_gt"], dtype=np.float64).reshape(-1, 3)
        return RegistrationPair(
            source=PointCloud(source),
            target=PointCloud(target),
            correspondences=CorrespondenceSet(corr),
            field_gt=DeformationField(field_gt),
            spec=ChallengeSpec.from_dict(meta["spec"]),
            rigid=RigidTransform(meta["rigid"]["rotation"], meta["rigid"]["translation"]),
            stage_seeds={k: int(v) for k, v in meta["stage_seeds"].items()},
            outlier_indices=np.array(meta["outlier_indices"], dtype=np.int64),
            provenance=meta.get("provenance", ""),
            label=meta.get("label", ""),
            extra=meta.get("extra", {}),
        )
    except KeyError as exc:
        raise BundleFormatError(f"metadata in {path} lacks key {exc}") from None
    except (ValueError, TypeError) as exc:
        raise BundleFormatError(f"bundle {path} is inconsistent: {exc}") from None


def is_bundle(path) -> bool:
    return (Path(path) / BUNDLE_FILES["metadata"]).is_file()


def find_bundles(path) -> list[Path]:
    """A bundle directory itself, or every bundle below a directory, sorted."""
    path = Path(path)
    if is_bundle(path):
        return [path]
    return sorted(p.parent for p in path.rglob(BUNDLE_FILES["metadata"]))


@dataclass(frozen=True, eq=False)
class FourDMatchRecord:
    X: np.ndarray
    D: np.ndarray
    R: np.ndarray
    t: np.ndarray
    overlap: float
    corr: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        D = np.asarray(self.D, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        corr = np.asarray(self.corr, dtype=np.int64).reshape(-1, 2)
        if X.ndim != 2 or X.shape[1] != 3 or D.shape != X.shape:
            raise DimensionError(f"X and D must both be (n, 3); got {X.shape} and {D.shape}")
        if R.shape != (3, 3) or t.shape != (3,):
            raise DimensionError("R must be 3x3 and t a 3-vector")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-5 or abs(np.linalg.det(R) - 1) > 1e-5:
            raise ParameterError("R is not a rotation")
        if len(corr) and (corr[:, 0].min() < 0 or corr[:, 0].max() >= len(X)):
            raise DimensionError("correspondence source index out of range")
        overlap = float(self.overlap)
        if not 0.0 <= overlap <= 1.0:
            raise ParameterError("overlap must lie in [0, 1]")
        for name, value in (("X", X), ("D", D), ("R", R), ("t", t), ("corr", corr)):
            object.__setattr__(self, name, value)
        object.__setattr__(self, "overlap", overlap)

    @property
    def label(self) -> str:
        return overlap_label(self.overlap)

    def source_indices(self) -> np.ndarray:
        """Source indices with a correspondence, first occurrence order."""
        _, first = np.unique(self.corr[:, 0], return_index=True)
        return self.corr[np.sort(first), 0]


def overlap_label(overlap: float) -> str:
    return "4DMatch" if overlap > OVERLAP_THRESHOLD else "4DLoMatch"


def reconstruct_4dmatch_target(rec: FourDMatchRecord) -> PointCloud:
    """Rebuild the target from corresponding source points as t + R (x + d)."""
    idx = rec.source_indices()
    moved = (rec.X[idx] + rec.D[idx]) @ rec.R.T + rec.t
    return PointCloud(moved)


def load_4dmatch_record(path) -> FourDMatchRecord:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise BundleFormatError(f"cannot read record {path}: {exc}") from None
    canonical = {}
    for key, value in arrays.items():
        name = key if key in RECORD_FIELDS else UPSTREAM_FIELDS.get(key)
        if name is not None and name not in canonical:
            canonical[name] = value
    missing = [f for f in RECORD_FIELDS if f not in canonical]
    if missing:
        raise BundleFormatError(f"record {path} lacks fields {missing}")
    return FourDMatchRecord(**{k: canonical[k] for k in RECORD_FIELDS})


def save_4dmatch_record(rec: FourDMatchRecord, path) -> None:
    np.savez(path, X=rec.X, D=rec.D, R=rec.R, t=rec.t, overlap=np.float64(rec.overlap), corr=rec.corr)


def record_to_pair(rec: FourDMatchRecord, provenance: str = "4dmatch") -> RegistrationPair:
    """Bundle-ready pair: corresponding source subset, rebuilt target, identity
    correspondences."""
    idx = rec.source_indices()
    n = len(idx)
    return RegistrationPair(
        source=PointCloud(rec.X[idx]),
        target=reconstruct_4dmatch_target(rec),
        correspondences=CorrespondenceSet.identity(n),
        field_gt=DeformationField(rec.D[idx]),
        rigid=RigidTransform(rec.R, rec.t),
        provenance=provenance,
        label=rec.label,
        extra={"overlap": rec.overlap},
    )


def red_blue(values: np.ndarray) -> np.ndarray:
    """Linear map from red at the minimum to blue at the maximum."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    s = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    rgb = np.stack([255.0 * (1.0 - s), np.zeros_like(s), 255.0 * s], axis=1)
    return np.rint(rgb).astype(np.uint8)


def export_colorized(cloud: PointCloud, channel: str, path) -> Path:
    if channel not in cloud.attributes:
        raise ParameterError(f"cloud has no channel {channel!r}; available: {sorted(cloud.attributes)}")
    colors = red_blue(cloud.attributes[channel])
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment color channel {channel}",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for (x, y, z), (r, g, b) in zip(cloud.points, colors):
        lines.append(f"{x:.17g} {y:.17g} {z:.17g} {r} {g} {b}")
    path = Path(path)
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise BundleIOError(f"cannot write {path}: {exc}") from exc
    return path


def load_points_file(path) -> np.ndarray:
    """Points from .npy, .ply (ASCII) or whitespace/comma separated text."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        arr = np.load(path, allow_pickle=False)
    elif suffix == ".ply":
        arr = read_ply_points(path)
    else:
        text = path.read_text().replace(",", " ")
        arr = np.loadtxt(io.StringIO(text), ndmin=2)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 3:
        raise BundleFormatError(f"{path} does not hold (n, 3) points")
    return arr[:, :3]


def read_ply_points(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply" or "end_header" not in lines:
        raise BundleFormatError(f"{path} is not an ASCII PLY file")
    end = lines.index("end_header")
    count = next(int(l.split()[2]) for l in lines[:end] if l.startswith("element vertex"))
    return np.array([l.split()[:3] for l in lines[end + 1:end + 1 + count]], dtype=np.float64)


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Points and colours of a file written by ``export_colorized``."""
    lines = Path(path).read_text().splitlines()
    end = lines.index("end_header")
    count = next(int(l.split()[2]) for l in lines[:end] if l.startswith("element vertex"))
    body = np.array([l.split() for l in lines[end + 1:end + 1 + count]], dtype=np.float64).reshape(-1, 6)
    return body[:, :3], body[:, 3:].astype(np.uint8)


POINT_SUFFIXES = (".txt", ".xyz", ".csv", ".npy", ".ply")


def index_paired_files(directory) -> list[tuple[Path, Path]]:
    """Match ``*source*`` / ``*target*`` files that differ only in that word."""
    directory = Path(directory)
    files = [p for p in directory.rglob("*") if p.is_file() and p.suffix.lower() in POINT_SUFFIXES]
    targets = {}
    for p in files:
        low = str(p.relative_to(directory)).lower()
        if "target" in low:
            targets[low.replace("target", "source")] = p
    pairs = []
    for p in sorted(files):
        low = str(p.relative_to(directory)).lower()
        if "source" in low and low in targets:
            pairs.append((p, targets[low]))
    return pairs


def load_index_paired(directory, provenance: str = "external") -> list[RegistrationPair]:
    """Pairs whose source and target rows correspond one-to-one."""
    out = []
    for src_path, tgt_path in index_paired_files(directory):
        src, tgt = load_points_file(src_path), load_points_file(tgt_path)
        if len(src) != len(tgt):
            raise BundleFormatError(f"{src_path} and {tgt_path} differ in point count")
        out.append(RegistrationPair(
            source=PointCloud(src),
            target=PointCloud(tgt),
            correspondences=CorrespondenceSet.identity(len(src)),
            field_gt=DeformationField(tgt - src),
            provenance=f"{provenance}:{src_path.name}",
        ))
    return out
