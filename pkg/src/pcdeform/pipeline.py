"""End-to-end registration: normalize, describe, solve, map back."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .descriptor import Descriptor
from .errors import ConfigError
from .geometry import DeformationField, PointCloud, apply_deformation, chamfer_distance, mean_distance
from .solver import CandidateSet, Solution, SolverConfig, build_candidates, solve
from .synth import RegistrationPair

NORMALIZATION_MODES = ("unit-diagonal", "none")


@dataclass
class PreparedPair:
    """Tensors for one pair in the normalized frame, reused across epochs."""

    pair: RegistrationPair
    source: torch.Tensor
    target: torch.Tensor
    corr_source: torch.Tensor
    corr_target: torch.Tensor
    center: np.ndarray
    scale: float
    candidates: CandidateSet


def normalization_frame(source: PointCloud, mode: str) -> tuple[np.ndarray, float]:
    if mode == "none":
        return np.zeros(3), 1.0
    if mode != "unit-diagonal":
        raise ConfigError(f"unknown normalization mode {mode!r}")
    diag = source.bbox_diagonal()
    return source.points.mean(axis=0), (diag if diag > 0 else 1.0)


def prepare(pair: RegistrationPair, solver_cfg: SolverConfig, mode: str = "unit-diagonal",
            dtype=torch.float64) -> PreparedPair:
    center, scale = normalization_frame(pair.source, mode)
    src = PointCloud((pair.source.points - center) / scale)
    tgt = PointCloud((pair.target.points - center) / scale)
    cs = build_candidates(src, tgt, solver_cfg, dtype=dtype)
    corr = pair.correspondences
    return PreparedPair(
        pair=pair,
        source=torch.tensor(src.points, dtype=dtype),
        target=torch.tensor(tgt.points, dtype=dtype),
        corr_source=torch.as_tensor(np.array(corr.source)),
        corr_target=torch.as_tensor(np.array(corr.target)),
        center=center,
        scale=scale,
        candidates=cs,
    )


def forward(model: Descriptor, prep: PreparedPair, solver_cfg: SolverConfig) -> Solution:
    """Normalized-frame solution for a prepared pair (differentiable)."""
    phi_x, phi_y = model(prep.source, prep.target)
    return solve(prep.source.detach().numpy(), prep.target.detach().numpy(), phi_x, phi_y,
                 solver_cfg, cs=prep.candidates)


def register(model: Descriptor, pair: RegistrationPair, solver_cfg: SolverConfig,
             mode: str = "unit-diagonal") -> tuple[DeformationField, np.ndarray]:
    """Displacement field for ``pair.source`` in original units, with weights."""
    dtype = next(model.parameters()).dtype
    prep = prepare(pair, solver_cfg, mode, dtype)
    with torch.no_grad():
        sol = forward(model, prep, solver_cfg)
    field = sol.field.double().numpy() * prep.scale
    return DeformationField(field), sol.weights.double().numpy()


def pair_metrics(pair: RegistrationPair, field: DeformationField) -> dict:
    """Mean distance over ground-truth correspondences, Chamfer over full clouds."""
    registered = apply_deformation(pair.source, field)
    corr = pair.correspondences
    return {
        "initial_mean_distance": mean_distance(pair.corr_source, pair.corr_target),
        "registered_mean_distance": mean_distance(registered.subset(corr.source), pair.corr_target),
        "initial_chamfer": chamfer_distance(pair.source, pair.target),
        "registered_chamfer": chamfer_distance(registered, pair.target),
        "n_source": len(pair.source),
        "n_target": len(pair.target),
        "n_correspondences": len(corr),
    }
