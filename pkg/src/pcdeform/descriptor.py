"""Per-point feature descriptor.

Three stages run on each cloud: a learned 3x3 alignment transform, a stack
of EdgeConv layers over nearest-neighbour graphs, and a transformer that
cross-conditions the source and target features and adds the result back
onto them residually.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CompatibilityError, ConfigError, DimensionError, InputError

CHECKPOINT_VERSION = 1
MANIFEST_KEY = "__manifest__"


@dataclass(frozen=True)
class DescriptorConfig:
    tnet_conv: tuple[int, ...] = (64, 128, 1024)
    tnet_fc: tuple[int, ...] = (512, 256)
    edge_widths: tuple[int, ...] = (64, 128, 256)
    k_edge: int = 20
    dynamic_graph: bool = True
    d_model: int = 256
    n_heads: int = 4
    ff_width: int = 512
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("tnet_conv", "tnet_fc", "edge_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if not self.edge_widths or self.edge_widths[-1] != self.d_model:
            raise ConfigError("the last EdgeConv width must equal d_model")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.k_edge < 1:
            raise ConfigError("k_edge must be positive")
        if not self.tnet_conv:
            raise ConfigError("the alignment net needs at least one convolution")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DescriptorConfig":
        return cls(**d)

    @classmethod
    def tiny(cls, d_model: int = 8, **kw) -> "DescriptorConfig":
        """Small configuration used for gradient checks and quick tests."""
        base = dict(
            tnet_conv=(8, 8, 16), tnet_fc=(8, 8), edge_widths=(8, 8, d_model),
            k_edge=4, d_model=d_model, n_heads=2, ff_width=16,
        )
        base.update(kw)
        return cls(**base)


def instance_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalize each channel over the points of a single cloud, (n, c) -> (n, c)."""
    mean = x.mean(dim=0, keepdim=True)
    var = x.var(dim=0, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


class AlignmentNet(nn.Module):
    """Predicts a 3x3 matrix from a cloud; the final layer starts at identity."""

    def __init__(self, conv=(64, 128, 1024), fc=(512, 256), eps=1e-5):
        super().__init__()
        self.eps = eps
        widths = (3,) + tuple(conv)
        self.conv = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        widths = (widths[-1],) + tuple(fc)
        self.fc = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.head = nn.Linear(widths[-1], 9)
        self.reset_head()

    def reset_head(self):
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.copy_(torch.eye(3).flatten())

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        if points.shape[0] < 2:
            raise InputError("the alignment transform needs at least two points")
        x = points
        for layer in self.conv:
            x = torch.relu(instance_norm(layer(x), self.eps))
        x = x.max(dim=0).values
        for layer in self.fc:
            x = torch.relu(layer(x))
        return self.head(x).view(3, 3)


def alignment_transform(points: torch.Tensor, net: AlignmentNet) -> torch.Tensor:
    return net(points)


def feature_knn(x: torch.Tensor, k: int) -> torch.Tensor:
    """k nearest rows of ``x`` to each row (self included), ties to lower index."""
    with torch.no_grad():
        diff = x[:, None, :] - x[None, :, :]
        d = (diff * diff).sum(-1)
        return torch.sort(d, dim=1, stable=True).indices[:, :k]


def edgeconv_layer(
    features: torch.Tensor, neighbors: torch.Tensor, theta: torch.Tensor, phi: torch.Tensor
) -> torch.Tensor:
    """out[i, l] = max_j ReLU(theta_l . (x_j - x_i) + phi_l . x_i).

    ``theta`` and ``phi`` are (d_out, d_in). The edge term is split as
    theta x_j + (phi - theta) x_i so only n*k*d_out values are gathered.
    """
    n, d = features.shape
    if theta.shape[1] != d or phi.shape != theta.shape:
        raise DimensionError(f"layer expects width {theta.shape[1]}, features have width {d}")
    if neighbors.numel() and (int(neighbors.min()) < 0 or int(neighbors.max()) >= n):
        raise DimensionError("neighbour index out of range")
    edge = features @ theta.T
    center = features @ (phi - theta).T
    agg = edge[neighbors].max(dim=1).values
    return torch.relu(agg + center)


class EdgeConv(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.theta = nn.Parameter(torch.empty(d_out, d_in).uniform_(-bound, bound))
        self.phi = nn.Parameter(torch.empty(d_out, d_in).uniform_(-bound, bound))

    def forward(self, features, neighbors):
        return edgeconv_layer(features, neighbors, self.theta, self.phi)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"incompatible attention shapes Q{tuple(q.shape)} K{tuple(k.shape)} V{tuple(v.shape)}"
        )
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1) @ v


def multi_head(q, k, v, wq, wk, wv, wo, n_heads: int) -> torch.Tensor:
    """Concat(head_1..head_h) W^O with head_i = Attention(Q W^Q_i, K W^K_i, V W^V_i).

    The per-head projections are column blocks of the (d_model, d_model)
    matrices ``wq``, ``wk`` and ``wv``.
    """
    d_model = wq.shape[1]
    if d_model % n_heads:
        raise ConfigError(f"d_model={d_model} is not divisible by {n_heads} heads")
    dh = d_model // n_heads

    def split(x, w):
        # (a, d_model) -> (h, a, dh)
        return (x @ w).view(x.shape[0], n_heads, dh).transpose(0, 1)

    heads = attention(split(q, wq), split(k, wk), split(v, wv))
    return heads.transpose(0, 1).reshape(q.shape[0], d_model) @ wo


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        bound = 1.0 / math.sqrt(d_model)
        self.wq, self.wk, self.wv, self.wo = (
            nn.Parameter(torch.empty(d_model, d_model).uniform_(-bound, bound)) for _ in range(4)
        )

    def forward(self, q, k, v):
        return multi_head(q, k, v, self.wq, self.wk, self.wv, self.wo, self.n_heads)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, width: int):
        super().__init__()
        self.lin1 = nn.Linear(d_model, width)
        self.lin2 = nn.Linear(width, d_model)

    def forward(self, x):
        return self.lin2(torch.relu(self.lin1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, d_model, n_heads, ff_width, eps=1e-5):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ff = FeedForward(d_model, ff_width)
        self.norm1 = nn.LayerNorm(d_model, eps=eps)
        self.norm2 = nn.LayerNorm(d_model, eps=eps)

    def forward(self, x):
        x = self.norm1(x + self.attn(x, x, x))
        return self.norm2(x + self.ff(x))


class DecoderBlock(nn.Module):
    def __init__(self, d_model, n_heads, ff_width, eps=1e-5):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.ff = FeedForward(d_model, ff_width)
        self.norm1 = nn.LayerNorm(d_model, eps=eps)
        self.norm2 = nn.LayerNorm(d_model, eps=eps)
        self.norm3 = nn.LayerNorm(d_model, eps=eps)

    def forward(self, x, memory):
        x = self.norm1(x + self.self_attn(x, x, x))
        x = self.norm2(x + self.cross_attn(x, memory, memory))
        return self.norm3(x + self.ff(x))


class Transformer(nn.Module):
    """The asymmetric map phi(A, B): encode B, decode A against it."""

    def __init__(self, d_model, n_heads, ff_width, eps=1e-5):
        super().__init__()
        self.d_model = d_model
        self.encoder = EncoderBlock(d_model, n_heads, ff_width, eps)
        self.decoder = DecoderBlock(d_model, n_heads, ff_width, eps)

    def forward(self, a, b):
        return self.decoder(a, self.encoder(b))


def transformer_fuse(fx: torch.Tensor, fy: torch.Tensor, transformer: Transformer):
    d = transformer.d_model
    if fx.shape[-1] != d or fy.shape[-1] != d:
        raise DimensionError(f"feature widths {fx.shape[-1]}, {fy.shape[-1]} do not match d_model={d}")
    return fx + transformer(fx, fy), fy + transformer(fy, fx)


class Descriptor(nn.Module):
    def __init__(self, config: DescriptorConfig | None = None, seed: int | None = 0):
        super().__init__()
        self.config = config = config or DescriptorConfig()
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            self.align = AlignmentNet(config.tnet_conv, config.tnet_fc, config.norm_eps)
            widths = (3,) + config.edge_widths
            self.edges = nn.ModuleList(EdgeConv(a, b) for a, b in zip(widths[:-1], widths[1:]))
            self.transformer = Transformer(config.d_model, config.n_heads, config.ff_width, config.norm_eps)

    def embed(self, points: torch.Tensor) -> torch.Tensor:
        """Alignment followed by the EdgeConv stack for one cloud."""
        m = self.align(points)
        x = points @ m.T
        k = min(self.config.k_edge, x.shape[0])
        nbrs = feature_knn(x, k)
        for i, layer in enumerate(self.edges):
            if i and self.config.dynamic_graph:
                nbrs = feature_knn(x, k)
            x = layer(x, nbrs)
        return x

    def forward(self, source: torch.Tensor, target: torch.Tensor):
        return transformer_fuse(self.embed(source), self.embed(target), self.transformer)


def describe(source, target, model: Descriptor):
    dtype = next(model.parameters()).dtype
    src = torch.tensor(np.asarray(getattr(source, "points", source)), dtype=dtype)
    tgt = torch.tensor(np.asarray(getattr(target, "points", target)), dtype=dtype)
    return model(src, tgt)


def save_checkpoint(model: Descriptor, path, extra: dict | None = None) -> Path:
    """Write parameters to an ``.npz`` with a JSON manifest of shapes."""
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "extra": extra or {},
    }
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **state, **{MANIFEST_KEY: np.array(json.dumps(manifest, sort_keys=True))})
    return path


def read_manifest(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        return json.loads(str(data[MANIFEST_KEY]))


def load_checkpoint(path, expect_d_model: int | None = None) -> Descriptor:
    with np.load(path, allow_pickle=False) as data:
        if MANIFEST_KEY not in data.files:
            raise CompatibilityError(f"{path} has no checkpoint manifest")
        manifest = json.loads(str(data[MANIFEST_KEY]))
        arrays = {k: data[k] for k in data.files if k != MANIFEST_KEY}
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"unsupported checkpoint version {manifest.get('format_version')}")
    config = DescriptorConfig.from_dict(manifest["config"])
    if expect_d_model is not None and config.d_model != expect_d_model:
        raise CompatibilityError(
            f"checkpoint d_model={config.d_model} but the run expects {expect_d_model}"
        )
    model = Descriptor(config, seed=None).to(getattr(torch, manifest["dtype"]))
    expected = {k: list(v.shape) for k, v in model.state_dict().items()}
    actual = {k: list(v.shape) for k, v in arrays.items()}
    if expected != manifest["shapes"] or actual != expected:
        raise CompatibilityError(f"{path} parameter shapes do not match its configuration")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    return model
