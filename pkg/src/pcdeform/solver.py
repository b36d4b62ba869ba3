"""Displacement estimation from per-point descriptors.

Every source point gets ``k_cand`` candidate target points (its coordinate
nearest neighbours). Candidates are scored by feature distance, refined by
min-sum loopy belief propagation over a k-NN graph of the source, and the
refined costs are turned into softmax weights that average the candidate
displacements.

Messages live on directed edges. ``messages[e, q]`` is the message from
``edges[e, 0]`` to ``edges[e, 1]`` evaluated at candidate ``q`` of the
receiving point; ``pairwise[e, p, q]`` is the cost of the sender taking its
candidate ``p`` while the receiver takes ``q``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ConfigError, DimensionError, ParameterError, StateError
from .geometry import as_cloud, knn_indices


@dataclass(frozen=True)
class SolverConfig:
    k_cand: int = 16
    k_reg: int = 8
    alpha: float = 1.0
    lbp_iterations: int = 5
    temperature: float = 1.0
    # experimental: replace the hard min in message updates by a soft-min
    softmin_temperature: float | None = None

    def __post_init__(self):
        if self.k_cand < 1 or self.k_reg < 1:
            raise ConfigError("k_cand and k_reg must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.lbp_iterations < 0:
            raise ConfigError("lbp_iterations must be nonnegative")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.softmin_temperature is not None and not self.softmin_temperature > 0:
            raise ConfigError("softmin_temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        return cls(**d)


@dataclass
class CandidateSet:
    candidates: torch.Tensor            # (n, K) target indices
    displacements: torch.Tensor         # (n, K, 3) candidate minus source point
    edges: torch.Tensor                 # (E, 2) directed edges
    reverse: torch.Tensor               # (E,) index of the opposite edge
    pairwise: torch.Tensor              # (E, K, K)
    unary: torch.Tensor | None = None   # (n, K)
    messages: torch.Tensor | None = None  # (E, K)

    @property
    def n(self) -> int:
        return self.candidates.shape[0]

    @property
    def k(self) -> int:
        return self.candidates.shape[1]

    def reset_messages(self) -> None:
        self.messages = self.pairwise.new_zeros(self.edges.shape[0], self.k)


def directed_edges(undirected: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Both orientations of each undirected edge.

    Returns (edges, reverse, flipped) where ``flipped[e]`` tells whether edge
    ``e`` runs against the orientation given in ``undirected``.
    """
    und = np.asarray(undirected, dtype=np.int64).reshape(-1, 2)
    m = len(und)
    edges = np.concatenate([und, und[:, ::-1]], axis=0)
    reverse = np.concatenate([np.arange(m, 2 * m), np.arange(m)])
    flipped = np.concatenate([np.zeros(m, bool), np.ones(m, bool)])
    return edges, reverse, flipped


def knn_graph(points, k: int) -> np.ndarray:
    """Undirected edges of the symmetrized k-NN graph, each as (low, high), sorted."""
    nbrs = knn_indices(points, points, k, exclude_self=True)
    i = np.repeat(np.arange(len(nbrs)), k)
    j = nbrs.reshape(-1)
    und = np.stack([np.minimum(i, j), np.maximum(i, j)], axis=1)
    return np.unique(und, axis=0)


def pairwise_cost(x_i, x_j, c_ip, c_jq):
    """||(c_i^p - x_i) - (c_j^q - x_j)||^2."""
    diff = (c_ip - x_i) - (c_jq - x_j)
    return (diff * diff).sum(-1)


def displacement_pairwise(displacements: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
    """(E, K, K) table of squared differences between candidate displacements."""
    a = displacements[edges[:, 0]][:, :, None, :]
    b = displacements[edges[:, 1]][:, None, :, :]
    diff = a - b
    return (diff * diff).sum(-1)


def from_tables(unary, undirected_edges, pairwise) -> CandidateSet:
    """Candidate set built from explicit costs rather than geometry.

    ``pairwise[u, p, q]`` is the cost of ``undirected_edges[u, 0]`` taking
    ``p`` while ``undirected_edges[u, 1]`` takes ``q``.
    """
    unary = torch.as_tensor(np.asarray(unary, dtype=np.float64))
    pw = torch.as_tensor(np.asarray(pairwise, dtype=np.float64))
    edges, reverse, flipped = directed_edges(undirected_edges)
    n_und = len(np.asarray(undirected_edges).reshape(-1, 2))
    if pw.shape != (n_und, unary.shape[1], unary.shape[1]):
        raise DimensionError("pairwise table must be (edges, K, K)")
    table = torch.cat([pw, pw.transpose(1, 2)], dim=0) if n_und else pw.new_zeros(0, unary.shape[1], unary.shape[1])
    n, k = unary.shape
    cs = CandidateSet(
        candidates=torch.zeros(n, k, dtype=torch.long),
        displacements=unary.new_zeros(n, k, 3),
        edges=torch.as_tensor(edges),
        reverse=torch.as_tensor(reverse),
        pairwise=table,
        unary=unary,
    )
    cs.reset_messages()
    return cs


def build_candidates(source, target, cfg: SolverConfig, dtype=torch.float64) -> CandidateSet:
    """Coordinate-space candidates plus the source regularization graph."""
    src, tgt = as_cloud(source), as_cloud(target)
    if cfg.k_cand > len(tgt):
        raise ParameterError(f"k_cand={cfg.k_cand} exceeds target size {len(tgt)}")
    if cfg.k_reg >= len(src):
        raise ParameterError(f"k_reg={cfg.k_reg} must be smaller than source size {len(src)}")
    cand = knn_indices(src, tgt, cfg.k_cand)
    disp = tgt.points[cand] - src.points[:, None, :]
    edges, reverse, _ = directed_edges(knn_graph(src, cfg.k_reg))
    disp_t = torch.as_tensor(disp, dtype=dtype)
    edges_t = torch.as_tensor(edges)
    return CandidateSet(
        candidates=torch.as_tensor(cand),
        displacements=disp_t,
        edges=edges_t,
        reverse=torch.as_tensor(reverse),
        pairwise=displacement_pairwise(disp_t, edges_t),
    )


def unary_costs(phi_x: torch.Tensor, phi_y: torch.Tensor, cs: CandidateSet) -> torch.Tensor:
    """d[i, p] = ||phi_x[i] - phi_y[c_i^p]||^2."""
    if phi_x.shape[-1] != phi_y.shape[-1]:
        raise DimensionError(f"feature widths differ: {phi_x.shape[-1]} vs {phi_y.shape[-1]}")
    if phi_x.shape[0] != cs.n:
        raise DimensionError("source features do not match the candidate set")
    diff = phi_x[:, None, :] - phi_y[cs.candidates]
    return (diff * diff).sum(-1)


def _softmin(x: torch.Tensor, dim: int, tau: float) -> torch.Tensor:
    return -tau * torch.logsumexp(-x / tau, dim=dim)


def lbp_sweep(cs: CandidateSet, cfg: SolverConfig) -> torch.Tensor:
    """One synchronous min-sum update of every directed-edge message.

    m_{i->j}[q] = min_p (d_i[p] + alpha r_ij[p, q] - m_{j->i}[p] + sum_h m_{h->i}[p]),
    followed by shifting each message so its minimum is zero.
    """
    if cs.unary is None or cs.messages is None:
        raise StateError("candidate set has no unary costs or messages; initialize it first")
    incoming = cs.unary.new_zeros(cs.unary.shape).index_add(0, cs.edges[:, 1], cs.messages)
    sender = cs.edges[:, 0]
    h = cs.unary[sender] + incoming[sender] - cs.messages[cs.reverse]
    total = h[:, :, None] + cfg.alpha * cs.pairwise
    if cfg.softmin_temperature is None:
        new = total.min(dim=1).values
    else:
        new = _softmin(total, 1, cfg.softmin_temperature)
    return new - new.min(dim=1, keepdim=True).values


def beliefs(cs: CandidateSet) -> torch.Tensor:
    """belief[i, p] = d_i[p] + sum_h m_{h->i}[p]."""
    if cs.unary is None:
        raise StateError("candidate set has no unary costs")
    if cs.messages is None:
        return cs.unary
    return cs.unary.index_add(0, cs.edges[:, 1], cs.messages)


def run_lbp(cs: CandidateSet, cfg: SolverConfig, iterations: int | None = None) -> torch.Tensor:
    if cs.messages is None:
        cs.reset_messages()
    for _ in range(cfg.lbp_iterations if iterations is None else iterations):
        cs.messages = lbp_sweep(cs, cfg)
    return beliefs(cs)


def map_energy(unary: np.ndarray, undirected_edges: np.ndarray, pairwise: np.ndarray,
               labels: np.ndarray, alpha: float) -> float:
    """sum_i d_i[l_i] + alpha sum_(i,j) r_ij[l_i, l_j]."""
    unary = np.asarray(unary)
    e = float(unary[np.arange(len(labels)), labels].sum())
    for (i, j), table in zip(np.asarray(undirected_edges).reshape(-1, 2), pairwise):
        e += alpha * float(table[labels[i], labels[j]])
    return e


def soft_assign(b: torch.Tensor, displacements: torch.Tensor, temperature: float):
    weights = torch.softmax(-b / temperature, dim=1)
    field = (weights[:, :, None] * displacements).sum(dim=1)
    return field, weights


@dataclass
class Solution:
    field: torch.Tensor       # (n, 3)
    weights: torch.Tensor     # (n, K)
    beliefs: torch.Tensor     # (n, K)
    candidates: CandidateSet


def solve(source, target, phi_x: torch.Tensor, phi_y: torch.Tensor, cfg: SolverConfig,
          cs: CandidateSet | None = None) -> Solution:
    """Soft displacement field u_i = sum_p w_i^p (c_i^p - x_i).

    Gradients reach ``phi_x`` and ``phi_y`` through the unary costs, the
    selected branch of every message minimum, and the softmax.
    """
    if cs is None:
        cs = build_candidates(source, target, cfg, dtype=phi_x.dtype)
    if phi_y.shape[0] != len(as_cloud(target)):
        raise DimensionError("target features do not match the target cloud")
    cs.unary = unary_costs(phi_x, phi_y, cs)
    cs.reset_messages()
    b = run_lbp(cs, cfg)
    field, weights = soft_assign(b, cs.displacements.to(phi_x.dtype), cfg.temperature)
    return Solution(field=field, weights=weights, beliefs=b, candidates=cs)
