"""Sweep generation and benchmark tables keyed by one challenge axis."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import find_bundles, read_bundle, write_bundle
from .descriptor import Descriptor
from .geometry import PointCloud
from .pipeline import pair_metrics, register
from .solver import SolverConfig
from .synth import ChallengeSpec, RegistrationPair, make_pair, sample_primitive

AXES = ("deformation_level", "noise_sigma", "outlier_fraction", "overlap_ratio", "rotation_max")
METRIC_COLUMNS = (
    "initial_mean_distance",
    "registered_mean_distance",
    "initial_chamfer",
    "registered_chamfer",
)


def canonical_hash(doc) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple
    n_seeds: int = 1
    seed: int = 0
    base: ChallengeSpec = field(default_factory=ChallengeSpec)
    shapes: tuple = ("sphere",)
    n_points: int = 512

    def pair_specs(self):
        """(axis value, seed index, shape, ChallengeSpec) in generation order."""
        for value in self.values:
            for s in range(self.n_seeds):
                spec = replace(self.base, **{self.axis: value}, seed=self.seed + s)
                yield value, s, self.shapes[s % len(self.shapes)], spec

    def source_for(self, shape: str, spec: ChallengeSpec) -> PointCloud:
        return sample_primitive(shape, self.n_points, seed=spec.seed)

    def pairs(self):
        for value, s, shape, spec in self.pair_specs():
            yield value, s, make_pair(self.source_for(shape, spec), spec, provenance=f"synthetic:{shape}")


def bundle_name(axis: str, value, seed_index: int) -> str:
    return f"{axis}_{value!r}/seed_{seed_index:03d}"


def generate(sweep: SweepSpec, out_dir) -> dict:
    out = Path(out_dir)
    entries = []
    for value, s, pair in sweep.pairs():
        rel = bundle_name(sweep.axis, value, s)
        write_bundle(pair, out / rel)
        entries.append({"path": rel, "axis": sweep.axis, "value": value, "seed": pair.spec.seed,
                        "provenance": pair.provenance})
    manifest = {"axis": sweep.axis, "count": len(entries), "bundles": entries}
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


@dataclass
class BenchRow:
    value: float
    initial_mean_distance: float
    registered_mean_distance: float
    initial_chamfer: float
    registered_chamfer: float
    pair_count: int
    runtime: float = 0.0


@dataclass
class BenchReport:
    axis: str
    rows: list
    config_hash: str = ""

    def to_dict(self) -> dict:
        # runtime is excluded so the report is byte-reproducible
        return {
            "axis": self.axis,
            "config_hash": self.config_hash,
            "rows": [{k: v for k, v in r.__dict__.items() if k != "runtime"} for r in self.rows],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.axis, *METRIC_COLUMNS, "pair_count"])
        for r in self.rows:
            w.writerow([repr(r.value), *(repr(getattr(r, c)) for c in METRIC_COLUMNS), r.pair_count])
        return buf.getvalue()

    def timing_csv(self) -> str:
        lines = [f"{self.axis},runtime_s"] + [f"{r.value!r},{r.runtime:.6f}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        (out / "report.csv").write_text(self.to_csv())
        (out / "timing.csv").write_text(self.timing_csv())


def aggregate(axis: str, grouped: dict, runtimes: dict, config_hash: str = "") -> BenchReport:
    rows = []
    for value in sorted(grouped):
        metrics = grouped[value]
        rows.append(BenchRow(
            value=value,
            **{c: float(np.mean([m[c] for m in metrics])) for c in METRIC_COLUMNS},
            pair_count=len(metrics),
            runtime=runtimes.get(value, 0.0),
        ))
    return BenchReport(axis=axis, rows=rows, config_hash=config_hash)


def run_bench(model: Descriptor, sweep: SweepSpec, solver_cfg: SolverConfig,
              normalization: str = "unit-diagonal", config_hash: str = "") -> BenchReport:
    """Initial metrics are measured on each generated pair before registration."""
    grouped, runtimes = {}, {}
    for value, _, pair in sweep.pairs():
        t0 = time.perf_counter()
        deformation, _ = register(model, pair, solver_cfg, normalization)
        runtimes[value] = runtimes.get(value, 0.0) + time.perf_counter() - t0
        grouped.setdefault(value, []).append(pair_metrics(pair, deformation))
    return aggregate(sweep.axis, grouped, runtimes, config_hash)


def bench_pairs(model: Descriptor, axis: str, pairs_by_value: dict, solver_cfg: SolverConfig,
                normalization: str = "unit-diagonal", config_hash: str = "") -> BenchReport:
    grouped, runtimes = {}, {}
    for value, pairs in pairs_by_value.items():
        for pair in pairs:
            t0 = time.perf_counter()
            deformation, _ = register(model, pair, solver_cfg, normalization)
            runtimes[value] = runtimes.get(value, 0.0) + time.perf_counter() - t0
            grouped.setdefault(value, []).append(pair_metrics(pair, deformation))
    return aggregate(axis, grouped, runtimes, config_hash)


def load_pairs(path) -> list[RegistrationPair]:
    return [read_bundle(p) for p in find_bundles(path)]
