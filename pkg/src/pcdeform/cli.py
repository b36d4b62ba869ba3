"""Command-line interface: gen, train, register, eval, bench, ingest-4dmatch."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import bench as benchmod
from .dataio import (
    export_colorized,
    find_bundles,
    format_points,
    load_4dmatch_record,
    read_bundle,
    record_to_pair,
    write_bundle,
)
from .descriptor import Descriptor, DescriptorConfig, load_checkpoint, save_checkpoint
from .errors import (
    BundleFormatError,
    CompatibilityError,
    ConfigError,
    DivergenceError,
    PcdeformError,
)
from .geometry import apply_deformation, nearest_sq_distances
from .pipeline import pair_metrics, register
from .solver import SolverConfig
from .synth import SHAPES, ChallengeSpec
from .training import TrainConfig, train, validate

log = logging.getLogger("pcdeform")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_FORMAT, EXIT_COMPAT, EXIT_DIVERGENCE = 0, 1, 2, 3, 4, 5

_num = {"type": "number"}
_int = {"type": "integer"}

SOLVER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "k_cand": {"type": "integer", "minimum": 1},
        "k_reg": {"type": "integer", "minimum": 1},
        "alpha": {"type": "number", "minimum": 0},
        "lbp_iterations": {"type": "integer", "minimum": 0},
        "temperature": {"type": "number", "exclusiveMinimum": 0},
        "softmin_temperature": {"type": ["number", "null"], "exclusiveMinimum": 0},
    },
}

DESCRIPTOR_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "tnet_conv": {"type": "array", "items": _int, "minItems": 1},
        "tnet_fc": {"type": "array", "items": _int},
        "edge_widths": {"type": "array", "items": _int, "minItems": 1},
        "k_edge": {"type": "integer", "minimum": 1},
        "dynamic_graph": {"type": "boolean"},
        "d_model": {"type": "integer", "minimum": 1},
        "n_heads": {"type": "integer", "minimum": 1},
        "ff_width": {"type": "integer", "minimum": 1},
        "norm_eps": {"type": "number", "exclusiveMinimum": 0},
    },
}

CHALLENGE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "deformation_level": {"type": "number", "minimum": 0, "maximum": 1},
        "noise_sigma": {"type": "number", "minimum": 0},
        "outlier_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "overlap_ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "rotation_max": {"type": "number", "minimum": 0},
    },
}

SWEEP_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["axis", "values"],
    "properties": {
        "axis": {"enum": list(benchmod.AXES)},
        "values": {"type": "array", "items": _num, "minItems": 1},
        "n_seeds": {"type": "integer", "minimum": 1},
    },
}

SOURCE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "shapes": {"type": "array", "items": {"enum": list(SHAPES)}, "minItems": 1},
        "n_points": {"type": "integer", "minimum": 2},
    },
}

_version = {"const": SCHEMA_VERSION}
_norm = {"enum": ["unit-diagonal", "none"]}

SCHEMAS = {
    "gen": {
        "type": "object",
        "additionalProperties": False,
        "required": ["schema_version", "sweep"],
        "properties": {
            "schema_version": _version,
            "seed": {"type": "integer", "minimum": 0},
            "sweep": SWEEP_SCHEMA,
            "base": CHALLENGE_SCHEMA,
            "source": SOURCE_SCHEMA,
        },
    },
    "train": {
        "type": "object",
        "additionalProperties": False,
        "required": ["schema_version", "data"],
        "properties": {
            "schema_version": _version,
            "data": {"type": "string"},
            "validation": {"type": "string"},
            "train": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "epochs": {"type": "integer", "minimum": 0},
                    "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                    "batch_size": {"type": "integer", "minimum": 1},
                    "seed": {"type": "integer", "minimum": 0},
                    "normalization": _norm,
                    "loss": {"enum": ["corr-mse"]},
                    "optimizer": {"enum": ["adam"]},
                    "dtype": {"enum": ["float32", "float64"]},
                    "checkpoint_every": {"type": "integer", "minimum": 0},
                    "solver": SOLVER_SCHEMA,
                    "descriptor": DESCRIPTOR_SCHEMA,
                },
            },
        },
    },
    "register": {
        "type": "object",
        "additionalProperties": False,
        "required": ["schema_version"],
        "properties": {
            "schema_version": _version,
            "solver": SOLVER_SCHEMA,
            "normalization": _norm,
            "d_model": {"type": "integer", "minimum": 1},
        },
    },
}
SCHEMAS["eval"] = SCHEMAS["register"]
SCHEMAS["bench"] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "sweep"],
    "properties": {
        **SCHEMAS["gen"]["properties"],
        "solver": SOLVER_SCHEMA,
        "normalization": _norm,
        "descriptor": DESCRIPTOR_SCHEMA,
        "d_model": {"type": "integer", "minimum": 1},
    },
}


def load_config(path, command: str, seed: int | None = None) -> dict:
    """Read and validate a run configuration; ``seed`` overrides the document."""
    if path is None:
        doc = {"schema_version": SCHEMA_VERSION}
    else:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    if seed is not None:
        if command == "train":
            doc.setdefault("train", {})["seed"] = seed
        elif command in ("gen", "bench"):
            doc["seed"] = seed
    try:
        jsonschema.validate(doc, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid {command} config at {where}: {exc.message}") from None
    return doc


def sweep_from_config(doc: dict) -> benchmod.SweepSpec:
    sweep = doc["sweep"]
    source = doc.get("source", {})
    try:
        base = ChallengeSpec(**doc.get("base", {}))
        spec = benchmod.SweepSpec(
            axis=sweep["axis"],
            values=tuple(sweep["values"]),
            n_seeds=sweep.get("n_seeds", 1),
            seed=doc.get("seed", 0),
            base=base,
            shapes=tuple(source.get("shapes", ["sphere"])),
            n_points=source.get("n_points", 512),
        )
        # validate every axis value before anything is written
        list(spec.pair_specs())
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid sweep: {exc}") from None
    return spec


def solver_from(doc: dict) -> SolverConfig:
    return SolverConfig(**doc.get("solver", {}))


def _load_model(params, doc: dict) -> Descriptor:
    model = load_checkpoint(params)
    if "d_model" in doc and doc["d_model"] != model.config.d_model:
        raise CompatibilityError(
            f"checkpoint has d_model={model.config.d_model}, config expects {doc['d_model']}"
        )
    return model


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


def cmd_gen(args) -> int:
    doc = load_config(_require(args.config, "--config"), "gen", args.seed)
    sweep = sweep_from_config(doc)
    manifest = benchmod.generate(sweep, _require(args.out, "--out"))
    log.info("wrote %d bundles to %s", manifest["count"], args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_config(_require(args.config, "--config"), "train", args.seed)
    cfg = TrainConfig.from_dict(doc.get("train", {}))
    data = benchmod.load_pairs(doc["data"])
    if not data:
        raise BundleFormatError(f"no bundles under {doc['data']}")
    validation = benchmod.load_pairs(doc["validation"]) if "validation" in doc else None
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    model, report = train(data, cfg, out_dir=out, validation=validation)
    save_checkpoint(model, out / "checkpoint.npz", extra={"config_hash": report.config_hash})
    (out / "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    report.write(out)
    return EXIT_OK


def error_channel(pair, registered) -> np.ndarray:
    """Distance to the ground-truth correspondent where known, else to the nearest target point."""
    err = np.sqrt(nearest_sq_distances(registered, pair.target))
    corr = pair.correspondences
    diff = registered.points[corr.source] - pair.target.points[corr.target]
    err[corr.source] = np.linalg.norm(diff, axis=1)
    return err


def cmd_register(args) -> int:
    doc = load_config(args.config, "register")
    model = _load_model(_require(args.params, "--params"), doc)
    solver_cfg = solver_from(doc)
    norm = doc.get("normalization", "unit-diagonal")
    out = Path(_require(args.out, "--out"))
    bundles = find_bundles(_require(args.pairs, "--pairs"))
    if not bundles:
        raise BundleFormatError(f"no bundles under {args.pairs}")
    for path in bundles:
        pair = read_bundle(path)
        deformation, _ = register(model, pair, solver_cfg, norm)
        registered = apply_deformation(pair.source, deformation)
        name = path.name if len(bundles) == 1 else str(path.relative_to(args.pairs))
        dest = out / name
        dest.mkdir(parents=True, exist_ok=True)
        (dest / "registered.xyz").write_text(format_points(registered.points))
        metrics = pair_metrics(pair, deformation)
        (dest / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
        export_colorized(registered.with_attribute("error", error_channel(pair, registered)),
                         "error", dest / "error.ply")
        log.info("%s: %.6g -> %.6g", name, metrics["initial_mean_distance"],
                 metrics["registered_mean_distance"])
    return EXIT_OK


def cmd_eval(args) -> int:
    doc = load_config(args.config, "eval")
    model = _load_model(_require(args.params, "--params"), doc)
    pairs = benchmod.load_pairs(_require(args.pairs, "--pairs"))
    if not pairs:
        raise BundleFormatError(f"no bundles under {args.pairs}")
    record = validate(model, pairs, solver_from(doc), doc.get("normalization", "unit-diagonal"))
    text = json.dumps(record, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metrics.json").write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    doc = load_config(_require(args.config, "--config"), "bench", args.seed)
    sweep = sweep_from_config(doc)
    if args.params:
        model = _load_model(args.params, doc)
    else:
        model = Descriptor(DescriptorConfig.from_dict(doc.get("descriptor", {})), seed=doc.get("seed", 0)).double()
    report = benchmod.run_bench(model, sweep, solver_from(doc), doc.get("normalization", "unit-diagonal"),
                                config_hash=benchmod.canonical_hash(doc))
    report.write(_require(args.out, "--out"))
    return EXIT_OK


def ingest_records(archive) -> list[Path]:
    archive = Path(archive)
    if archive.is_dir():
        files = sorted(archive.glob("*.npz"))
    elif archive.is_file():
        files = [archive]
    else:
        raise BundleFormatError(f"{archive} does not exist")
    return files


def cmd_ingest(args) -> int:
    files = ingest_records(_require(args.archive, "--archive"))
    out = Path(_require(args.out, "--out"))
    entries = []
    for i, f in enumerate(files):
        try:
            rec = load_4dmatch_record(f)
            pair = record_to_pair(rec, provenance=f"4dmatch:{f.name}")
        except (BundleFormatError, ValueError) as exc:
            raise BundleFormatError(f"record {i} ({f.name}): {exc}") from None
        rel = f"{i:05d}_{f.stem}"
        write_bundle(pair, out / rel)
        entries.append({"path": rel, "label": pair.label, "overlap": rec.overlap, "record": i})
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"count": len(entries), "bundles": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "register": cmd_register,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ingest-4dmatch": cmd_ingest,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(prog="pcdeform", description="Non-rigid point cloud registration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate synthetic pair bundles")
    sub.add_parser("train", parents=[common], help="train descriptor parameters")
    for name, text in (("register", "register pairs with a checkpoint"), ("eval", "evaluate a checkpoint")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--params", help="checkpoint .npz")
        p.add_argument("--pairs", help="bundle or directory of bundles")
    p = sub.add_parser("bench", parents=[common], help="benchmark table over one challenge axis")
    p.add_argument("--params", help="checkpoint .npz (default: freshly initialized parameters)")
    p = sub.add_parser("ingest-4dmatch", parents=[common], help="convert 4DMatch records into bundles")
    p.add_argument("--archive", help=".npz record or directory of records")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except BundleFormatError as exc:
        log.error("format error: %s", exc)
        return EXIT_FORMAT
    except CompatibilityError as exc:
        log.error("compatibility error: %s", exc)
        return EXIT_COMPAT
    except DivergenceError as exc:
        log.error("divergence: %s", exc)
        return EXIT_DIVERGENCE
    except (PcdeformError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
