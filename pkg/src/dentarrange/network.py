"""Decoupled arrangement network: perception of target features, then motion regression.

Batched tensors use the layout ``points: (B, L, N, 3)`` with a boolean
``mask: (B, L)`` marking present teeth. Teeth that are absent are excluded from
attention and from the global max-pool, so they never influence present teeth.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DegenerateQuaternion, ShapeError
from .geometry import Dentition, RigidMotion, quat_normalize

ARCH_WIDTH_DIM = 12


@dataclass
class EncoderConfig:
    feature_dim: int = 64
    global_dim: int = 128
    mlp_widths: tuple = (64, 64)
    head_hidden: int = 128
    attention_heads: int = 4
    arch_hidden: int = 64
    # standardization of the arch width vector before embedding: per-entry mean
    # and spread in mm (training fills these from the training set)
    arch_mean: tuple | None = None
    arch_spread: tuple | None = None
    coord_scale: float = 0.1
    conditional: bool = False
    ema_momentum: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim <= 0 or self.global_dim <= 0:
            raise ValueError("feature and global dimensions must be positive")
        self.mlp_widths = tuple(self.mlp_widths)
        for name in ("arch_mean", "arch_spread"):
            value = getattr(self, name)
            if value is not None:
                value = tuple(float(v) for v in value)
                if len(value) != ARCH_WIDTH_DIM:
                    raise ValueError(f"{name} needs {ARCH_WIDTH_DIM} entries")
                setattr(self, name, value)
        if self.arch_spread is not None and min(self.arch_spread) <= 0:
            raise ValueError("arch_spread entries must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_widths"] = list(self.mlp_widths)
        for name in ("arch_mean", "arch_spread"):
            if d[name] is not None:
                d[name] = list(d[name])
        return d


def mlp(dims, final_activation=False) -> nn.Sequential:
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2 or final_activation:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class PointNetEncoder(nn.Module):
    """Shared per-point MLP followed by a channel-wise max over points (no input transform)."""

    def __init__(self, in_dim, widths, out_dim):
        super().__init__()
        self.net = mlp([in_dim, *widths, out_dim], final_activation=True)

    def forward(self, x, point_mask=None):
        # x: (..., N, in_dim) -> (..., out_dim)
        h = self.net(x)
        if point_mask is not None:
            h = h.masked_fill(~point_mask.unsqueeze(-1), float("-inf"))
        return h.max(dim=-2).values


class Propagator(nn.Module):
    """One post-norm transformer encoder block over the tooth tokens."""

    def __init__(self, dim, heads):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.ReLU(), nn.Linear(4 * dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, mask=None):
        pad = None if mask is None else ~mask
        a, _ = self.attn(x, x, x, key_padding_mask=pad, need_weights=False)
        x = self.norm1(x + a)
        x = self.norm2(x + self.ff(x))
        if mask is not None:
            x = x.masked_fill(~mask.unsqueeze(-1), 0.0)
        return x


def quat_normalize_torch(raw: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    norm = raw.norm(dim=-1, keepdim=True)
    if torch.any(norm <= eps):
        raise DegenerateQuaternion("regressed quaternion has near-zero norm")
    q = raw / norm
    sign = torch.where(q[..., :1] < 0, -1.0, 1.0).to(q.dtype)
    return q * sign


def quat_to_matrix_torch(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        -1,
    ).reshape(*q.shape[:-1], 3, 3)


def apply_motion_torch(points, q, t, center):
    """points (..., N, 3); q (..., 4); t, center (..., 3)."""
    rot = quat_to_matrix_torch(q)
    rel = points - center.unsqueeze(-2)
    return rel @ rot.transpose(-1, -2) + center.unsqueeze(-2) + t.unsqueeze(-2)


class DTAN(nn.Module):
    """Arrangement network with EMA target copies of the two local encoders.

    With ``config.conditional`` the arch-width embedding is added to the global
    feature before projection (the conditional variant).
    """

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config = config or EncoderConfig()
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self._build(config)

    def _build(self, config):
        C, G = config.feature_dim, config.global_dim
        self.geo_encoder = PointNetEncoder(3, config.mlp_widths, C)
        self.pos_encoder = PointNetEncoder(3, config.mlp_widths, C)
        self.global_encoder = PointNetEncoder(6, config.mlp_widths, G)
        self.geo_propagator = Propagator(C, config.attention_heads)
        self.pos_propagator = Propagator(C, config.attention_heads)
        self.projector = mlp([G + 2 * C, config.head_hidden, config.head_hidden, C])
        self.regressor = mlp([3 * C + 3, config.head_hidden, config.head_hidden, 7])
        final = self.regressor[-1]
        with torch.no_grad():
            final.weight.zero_()
            final.bias.copy_(torch.tensor([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]))
        self.arch_embedding = None
        if config.conditional:
            self.arch_embedding = nn.Sequential(
                nn.Linear(ARCH_WIDTH_DIM, config.arch_hidden),
                nn.LeakyReLU(),
                nn.Linear(config.arch_hidden, G),
            )
        self.target_geo_encoder = copy.deepcopy(self.geo_encoder)
        self.target_pos_encoder = copy.deepcopy(self.pos_encoder)
        for p in self.target_parameters():
            p.requires_grad_(False)

    # -- parameter groups -------------------------------------------------

    def target_parameters(self):
        yield from self.target_geo_encoder.parameters()
        yield from self.target_pos_encoder.parameters()

    def online_parameters(self):
        target = {id(p) for p in self.target_parameters()}
        return [p for p in self.parameters() if id(p) not in target]

    @torch.no_grad()
    def ema_update(self, momentum: float | None = None) -> None:
        m = self.config.ema_momentum if momentum is None else momentum
        if not 0.0 <= m < 1.0:
            raise ValueError(f"EMA momentum {m} must lie in [0, 1)")
        pairs = [(self.target_geo_encoder, self.geo_encoder), (self.target_pos_encoder, self.pos_encoder)]
        for target, online in pairs:
            for pt, po in zip(target.parameters(), online.parameters()):
                pt.mul_(m).add_(po, alpha=1.0 - m)

    # -- phases -----------------------------------------------------------

    def _scaled(self, x):
        return x * self.config.coord_scale

    def encode_local(self, points, centers=None):
        """(f_geo, f_pos) per tooth; points (..., N, 3)."""
        if centers is None:
            centers = points.mean(dim=-2)
        f_geo = self.geo_encoder(self._scaled(points - centers.unsqueeze(-2)))
        f_pos = self.pos_encoder(self._scaled(points))
        return f_geo, f_pos

    def encode_target(self, points):
        with torch.no_grad():
            centers = points.mean(dim=-2, keepdim=True)
            return (
                self.target_geo_encoder(self._scaled(points - centers)),
                self.target_pos_encoder(self._scaled(points)),
            )

    def encode_global(self, points, centers=None, mask=None):
        """Max over every point of every present tooth, each tagged with its tooth barycenter."""
        if centers is None:
            centers = points.mean(dim=-2)
        B, L, N, _ = points.shape
        feats = torch.cat([points, centers.unsqueeze(-2).expand(B, L, N, 3)], dim=-1)
        point_mask = None
        if mask is not None:
            point_mask = mask.unsqueeze(-1).expand(B, L, N).reshape(B, L * N)
        return self.global_encoder(self._scaled(feats).reshape(B, L * N, 6), point_mask)

    def embed_arch_width(self, arch_width):
        if self.arch_embedding is None:
            raise ValueError("this model was built without arch-width conditioning")
        mean = 0.0 if self.config.arch_mean is None else arch_width.new_tensor(self.config.arch_mean)
        if self.config.arch_spread is None:
            return self.arch_embedding(self._scaled(arch_width - mean))
        return self.arch_embedding((arch_width - mean) / arch_width.new_tensor(self.config.arch_spread))

    def propagate(self, f_geo, f_pos, mask=None):
        return self.geo_propagator(f_geo, mask), self.pos_propagator(f_pos, mask)

    def project(self, f_global, h_geo, h_pos):
        L = h_geo.shape[-2]
        g = f_global.unsqueeze(-2).expand(*f_global.shape[:-1], L, f_global.shape[-1])
        return self.projector(torch.cat([g, h_geo, h_pos], dim=-1))

    def regress_motion(self, f_geo, centers, f_pos, f_proj):
        """(q, t): unit quaternions with w >= 0 and translations in mm."""
        out = self.regressor(torch.cat([f_geo, self._scaled(centers), f_pos, f_proj], dim=-1))
        # translations are regressed in the same scaled units as the inputs
        return quat_normalize_torch(out[..., :4]), out[..., 4:] / self.config.coord_scale

    def forward(self, points, mask=None, arch_width=None):
        if points.dim() != 4 or points.shape[-1] != 3:
            raise ShapeError(f"expected (B, L, N, 3) points, got {tuple(points.shape)}")
        centers = points.mean(dim=-2)
        f_geo, f_pos = self.encode_local(points, centers)
        f_global = self.encode_global(points, centers, mask)
        if self.arch_embedding is not None and arch_width is not None:
            f_global = f_global + self.embed_arch_width(arch_width)
        h_geo, h_pos = self.propagate(f_geo, f_pos, mask)
        f_proj = self.project(f_global, h_geo, h_pos)
        q, t = self.regress_motion(f_geo, centers, f_pos, f_proj)
        return {
            "q": q, "t": t, "centers": centers,
            "f_geo": f_geo, "f_pos": f_pos, "h_geo": h_geo, "h_pos": h_pos,
            "f_proj": f_proj, "f_global": f_global,
        }

    # -- checkpoints --------------------------------------------------------

    def checkpoint(self, extra: dict | None = None) -> dict:
        return {
            "config": self.config.to_dict(),
            "state_dict": {k: v.detach().clone() for k, v in self.state_dict().items()},
            "ema_momentum": self.config.ema_momentum,
            "seed": self.config.seed,
            **(extra or {}),
        }

    def save(self, path, extra: dict | None = None) -> None:
        torch.save(self.checkpoint(extra), path)

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "DTAN":
        model = cls(EncoderConfig(**ckpt["config"]))
        dtypes = {v.dtype for v in ckpt["state_dict"].values() if v.is_floating_point()}
        if len(dtypes) == 1:
            model = model.to(dtypes.pop())
        model.load_state_dict(ckpt["state_dict"])
        return model

    @classmethod
    def load(cls, path) -> "DTAN":
        return cls.from_checkpoint(torch.load(path, weights_only=False))


def dentition_tensor(dentition: Dentition, dtype=torch.float32) -> tuple[torch.Tensor, list[int]]:
    labels = dentition.labels
    counts = {dentition[k].cloud.shape[0] for k in labels}
    if len(counts) != 1:
        raise ShapeError(f"teeth must share one point count, got {sorted(counts)}")
    pts = np.stack([dentition[k].cloud for k in labels])
    return torch.as_tensor(pts, dtype=dtype).unsqueeze(0), labels


def predict(model: DTAN, dentition: Dentition, arch_width=None) -> tuple[dict[int, RigidMotion], dict]:
    """Per-tooth motions for one dentition, plus the feature bundle keyed by label."""
    dtype = next(model.parameters()).dtype
    points, labels = dentition_tensor(dentition, dtype)
    aw = None if arch_width is None else torch.as_tensor(np.asarray(arch_width), dtype=dtype).unsqueeze(0)
    with torch.no_grad():
        out = model(points, arch_width=aw)
    motions = {}
    for i, label in enumerate(labels):
        q = quat_normalize(out["q"][0, i].double().numpy())
        motions[label] = RigidMotion(q, out["t"][0, i].double().numpy(), out["centers"][0, i].double().numpy())
    bundle = {
        key: {label: out[key][0, i].numpy() for i, label in enumerate(labels)}
        for key in ("f_geo", "f_pos", "h_geo", "h_pos", "f_proj")
    }
    bundle["f_global"] = out["f_global"][0].numpy()
    return motions, bundle
