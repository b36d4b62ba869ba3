"""Supervised training of descriptor parameters through the solver."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .descriptor import Descriptor, DescriptorConfig, save_checkpoint
from .errors import ConfigError, DivergenceError
from .geometry import DeformationField
from .pipeline import NORMALIZATION_MODES, forward, pair_metrics, prepare, register
from .solver import SolverConfig
from .synth import RegistrationPair

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 1
    seed: int = 0
    normalization: str = "unit-diagonal"
    loss: str = "corr-mse"
    optimizer: str = "adam"
    dtype: str = "float64"
    checkpoint_every: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)

    def __post_init__(self):
        if isinstance(self.solver, dict):
            object.__setattr__(self, "solver", SolverConfig.from_dict(self.solver))
        if isinstance(self.descriptor, dict):
            object.__setattr__(self, "descriptor", DescriptorConfig.from_dict(self.descriptor))
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.normalization not in NORMALIZATION_MODES:
            raise ConfigError(f"normalization must be one of {NORMALIZATION_MODES}")
        if self.loss != "corr-mse":
            raise ConfigError("only the corr-mse loss is available")
        if self.optimizer != "adam":
            raise ConfigError("only the adam optimizer is available")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["descriptor"] = self.descriptor.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    val_mean_distance: list = field(default_factory=list)
    wall_clock: float = 0.0
    config_hash: str = ""

    @property
    def epochs(self) -> int:
        return len(self.losses)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        rows = ["epoch,loss,val_mean_distance"]
        rows += [f"{i + 1},{l!r},{v!r}" for i, (l, v) in enumerate(zip(self.losses, self.val_mean_distance))]
        (out / "loss.csv").write_text("\n".join(rows) + "\n")


def correspondence_loss(pred: torch.Tensor, prep) -> torch.Tensor:
    """Mean squared distance between moved source points and their targets."""
    moved = prep.source[prep.corr_source] + pred[prep.corr_source]
    diff = moved - prep.target[prep.corr_target]
    return (diff * diff).sum(-1).mean()


def loss(pair: RegistrationPair, deformation: DeformationField) -> float:
    """mean_i ||(x_i + u_i) - y_gt(i)||^2 over ground-truth correspondences."""
    corr = pair.correspondences
    if len(corr) == 0:
        raise ConfigError("the pair has no ground-truth correspondences")
    disp = np.asarray(getattr(deformation, "displacements", deformation), dtype=np.float64)
    moved = pair.source.points[corr.source] + disp[corr.source]
    return float(np.mean(np.sum((moved - pair.target.points[corr.target]) ** 2, axis=1)))


def _optimizer_state(opt: torch.optim.Optimizer) -> dict:
    arrays = {}
    for i, state in opt.state_dict()["state"].items():
        for key, value in state.items():
            arrays[f"{i}.{key}"] = torch.as_tensor(value).detach().numpy()
    return arrays


def write_checkpoint(model, opt, out_dir, epoch: int, report: TrainReport) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = save_checkpoint(model, out / f"checkpoint_epoch{epoch:04d}.npz",
                           extra={"epoch": epoch, "config_hash": report.config_hash})
    np.savez(out / f"optimizer_epoch{epoch:04d}.npz", **_optimizer_state(opt))
    return path


def train(dataset, config: TrainConfig, out_dir=None, validation=None,
          model: Descriptor | None = None) -> tuple[Descriptor, TrainReport]:
    """Fit descriptor parameters so the soft solver output matches ground truth.

    Without a ``validation`` set, the per-epoch mean distance is the one
    measured on the training forwards of that epoch (before each step).
    """
    dataset = list(dataset)
    if not dataset:
        raise ConfigError("training needs at least one pair")
    for pair in dataset:
        if len(pair.correspondences) == 0:
            raise ConfigError("every training pair needs ground-truth correspondences")
    dtype = DTYPES[config.dtype]
    if model is None:
        model = Descriptor(config.descriptor, seed=config.seed).to(dtype)
    report = TrainReport(config_hash=config.config_hash())
    if config.epochs == 0:
        return model, report

    start = time.perf_counter()
    preps = [prepare(p, config.solver, config.normalization, dtype) for p in dataset]
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    order_rng = np.random.default_rng(config.seed)

    for epoch in range(1, config.epochs + 1):
        model.train()
        order = order_rng.permutation(len(preps))
        losses, dists = [], []
        for b in range(0, len(order), config.batch_size):
            batch = [preps[i] for i in order[b:b + config.batch_size]]
            opt.zero_grad()
            for prep in batch:
                sol = forward(model, prep, config.solver)
                value = correspondence_loss(sol.field, prep)
                if not torch.isfinite(value):
                    raise DivergenceError(epoch, float(value.detach()))
                (value / len(batch)).backward()
                value = value.detach()
                with torch.no_grad():
                    moved = prep.source[prep.corr_source] + sol.field[prep.corr_source]
                    d = torch.linalg.norm(moved - prep.target[prep.corr_target], dim=1).mean()
                losses.append(float(value) * prep.scale ** 2)
                dists.append(float(d) * prep.scale)
            opt.step()
        epoch_loss = float(np.mean(losses))
        if not math.isfinite(epoch_loss):
            raise DivergenceError(epoch, epoch_loss)
        report.losses.append(epoch_loss)
        if validation is not None:
            metrics = validate(model, validation, config.solver, config.normalization)
            report.val_mean_distance.append(metrics["mean_registered_mean_distance"])
        else:
            report.val_mean_distance.append(float(np.mean(dists)))
        log.info("epoch %d loss %.6g mean distance %.6g", epoch, epoch_loss, report.val_mean_distance[-1])
        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            write_checkpoint(model, opt, out_dir, epoch, report)

    report.wall_clock = time.perf_counter() - start
    model.eval()
    return model, report


def validate(model: Descriptor, dataset, solver_cfg: SolverConfig,
             normalization: str = "unit-diagonal") -> dict:
    per_pair = []
    for pair in dataset:
        deformation, _ = register(model, pair, solver_cfg, normalization)
        per_pair.append(pair_metrics(pair, deformation))
    record = {"pairs": per_pair}
    for key in ("initial_mean_distance", "registered_mean_distance", "initial_chamfer", "registered_chamfer"):
        vals = [m[key] for m in per_pair]
        record[f"mean_{key}"] = float(np.mean(vals)) if vals else float("nan")
        record[f"median_{key}"] = float(np.median(vals)) if vals else float("nan")
    return record
