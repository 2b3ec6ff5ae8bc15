"""SE(3)-invariant structure encoder with atom-to-pair attention.

Atoms are embedded by type; every atom pair gets a Gaussian-basis encoding of
its distance whose affine input depends on the ordered pair of atom types.
Each layer biases attention logits with the pair tensor and hands the
pre-softmax scores on as the next pair tensor. The pooled representation is
the final state of the virtual atom at row 0. Coordinates enter only through
distances, so everything except the coordinate decoder is invariant to
rigid motions; the decoder is equivariant.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .conformer import ATOM_TYPES, VIRT_ID, VirtualizedConformer
from .errors import ConfigError, ShapeMismatch
from .numerics import DTYPE, ParamStore, gelu, layer_norm, softmax_rows

INIT_STD = 0.02
SIGMA_FLOOR = 1e-2


@dataclass(frozen=True)
class StructConfig:
    atom_dim: int = 64
    pair_dim: int = 8  # also the number of heads and Gaussian kernels
    layers: int = 3
    ff_dim: int = 128
    max_distance: float = 10.0
    n_types: int = len(ATOM_TYPES)

    def __post_init__(self):
        if self.pair_dim < 1 or self.atom_dim % self.pair_dim:
            raise ConfigError(f"pair_dim ({self.pair_dim}) must divide atom_dim ({self.atom_dim})")
        if self.layers < 1:
            raise ConfigError("structure encoder needs at least one layer")

    @property
    def head_dim(self) -> int:
        return self.atom_dim // self.pair_dim

    @classmethod
    def published_scale(cls) -> StructConfig:
        # 15 layers x 64 heads; atom width chosen so each head has 8 dims
        return cls(atom_dim=512, pair_dim=64, layers=15, ff_dim=2048)

    def to_dict(self) -> dict:
        return asdict(self)


def init_struct_params(cfg: StructConfig, gen: torch.Generator, store: ParamStore | None = None) -> ParamStore:
    store = store if store is not None else ParamStore()
    da, dp, T = cfg.atom_dim, cfg.pair_dim, cfg.n_types

    def normal(*shape, std=None):
        std = shape[0] ** -0.5 if std is None else std
        return torch.normal(0.0, std, size=shape, generator=gen, dtype=DTYPE)

    store.add("struct.atom_emb", normal(T, da, std=1.0))
    store.add("struct.pair_v", torch.ones(T * T, dp))
    store.add("struct.pair_u", torch.zeros(T * T, dp))
    store.add("struct.mu", torch.linspace(0.0, cfg.max_distance, dp, dtype=DTYPE))
    store.add("struct.sigma", torch.ones(dp))
    for i in range(cfg.layers):
        p = f"struct.l{i}."
        for w in ("q", "k", "v", "o"):
            store.add(p + "w" + w, normal(da, da))
        store.add(p + "ln.g", torch.ones(da))
        store.add(p + "ln.b", torch.zeros(da))
        store.add(p + "w1", normal(da, cfg.ff_dim))
        store.add(p + "b1", torch.zeros(cfg.ff_dim))
        store.add(p + "w2", normal(cfg.ff_dim, da))
        store.add(p + "b2", torch.zeros(da))
    store.add("psi.w1", normal(dp, dp, std=INIT_STD))
    store.add("psi.b1", torch.zeros(dp))
    store.add("psi.w2", normal(dp, 1, std=INIT_STD))
    store.add("psi.b2", torch.zeros(1))
    return store


@dataclass
class StructBatch:
    types: torch.Tensor  # (B, N) long, padded with VIRT_ID
    coords: torch.Tensor  # (B, N, 3)
    mask: torch.Tensor  # (B, N) bool, True for real and virtual atoms

    @property
    def real_mask(self) -> torch.Tensor:
        m = self.mask.clone()
        m[:, 0] = False
        return m


def collate_structures(types: Sequence[np.ndarray], coords: Sequence[np.ndarray]) -> StructBatch:
    """Pad per-conformer type ids and (virtualized) coordinates into a batch."""
    B = len(types)
    N = max(len(t) for t in types)
    t_out = torch.full((B, N), VIRT_ID, dtype=torch.long)
    c_out = torch.zeros((B, N, 3), dtype=DTYPE)
    m_out = torch.zeros((B, N), dtype=torch.bool)
    for b, (t, c) in enumerate(zip(types, coords)):
        n = len(t)
        t_out[b, :n] = torch.as_tensor(t, dtype=torch.long)
        c_out[b, :n] = torch.as_tensor(c, dtype=DTYPE)
        m_out[b, :n] = True
    return StructBatch(t_out, c_out, m_out)


def batch_from_conformers(confs: Sequence[VirtualizedConformer], coords: Sequence[np.ndarray] | None = None) -> StructBatch:
    if coords is None:
        coords = [c.coords for c in confs]
    return collate_structures([c.type_ids() for c in confs], coords)


def distances(coords: torch.Tensor) -> torch.Tensor:
    diff = coords.unsqueeze(-2) - coords.unsqueeze(-3)
    return torch.sqrt((diff * diff).sum(-1).clamp_min(0.0))


def gaussian(x: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    return torch.exp(-(x * x) / (2 * sigma * sigma)) / (sigma * math.sqrt(2 * math.pi))


def gaussian_pair_embedding(types: torch.Tensor, coords: torch.Tensor, params: ParamStore) -> torch.Tensor:
    """Initial pair tensor (B, N, N, d_p) from type-pair-aware Gaussian kernels of distances."""
    T = int(math.isqrt(params["struct.pair_v"].shape[0]))
    pair = types.unsqueeze(-1) * T + types.unsqueeze(-2)
    dist = distances(coords.detach()).unsqueeze(-1)
    x = params["struct.pair_v"][pair] * dist + params["struct.pair_u"][pair] - params["struct.mu"]
    return gaussian(x, params["struct.sigma"].clamp_min(SIGMA_FLOOR))


def atom_to_pair_layer(
    xa: torch.Tensor, xp: torch.Tensor, params: ParamStore, prefix: str, mask: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """One encoder layer. Returns the new atom (B, N, d_a) and pair (B, N, N, d_p) tensors.

    The returned pair tensor is exactly the pre-softmax score tensor of each
    head; padded keys (``mask`` False) are excluded only inside the softmax.
    """
    B, N, da = xa.shape
    dp = xp.shape[-1]
    if xp.shape != (B, N, N, dp) or da % dp:
        raise ShapeMismatch(f"atom tensor {tuple(xa.shape)} incompatible with pair tensor {tuple(xp.shape)}")
    dh = da // dp

    def heads(w):
        return (xa @ params[prefix + w]).view(B, N, dp, dh).transpose(1, 2)

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh) + xp.permute(0, 3, 1, 2)
    keep = None if mask is None else mask[:, None, None, :]
    out = (softmax_rows(scores, mask=keep) @ v).transpose(1, 2).reshape(B, N, da)
    xa = out @ params[prefix + "wo"] + xa
    f = layer_norm(xa, params[prefix + "ln.g"], params[prefix + "ln.b"])
    xa = xa + gelu(f @ params[prefix + "w1"] + params[prefix + "b1"]) @ params[prefix + "w2"] + params[prefix + "b2"]
    return xa, scores.permute(0, 2, 3, 1)


@dataclass
class StructOutput:
    atoms: torch.Tensor  # final atom representations (B, N, d_a)
    pair: torch.Tensor  # final pair tensor (B, N, N, d_p)
    pair0: torch.Tensor  # initial pair tensor
    x3d: torch.Tensor  # (B, d_a), virtual-atom row
    pair_layers: list[torch.Tensor] = field(default_factory=list)


def encode_structure(batch: StructBatch, params: ParamStore, cfg: StructConfig) -> StructOutput:
    xa = params["struct.atom_emb"][batch.types]
    xp0 = gaussian_pair_embedding(batch.types, batch.coords, params)
    xp = xp0
    layers = []
    for i in range(cfg.layers):
        xa, xp = atom_to_pair_layer(xa, xp, params, f"struct.l{i}.", batch.mask)
        layers.append(xp)
    return StructOutput(xa, xp, xp0, xa[:, 0], layers)


def encode_conformer(c: VirtualizedConformer, params: ParamStore, cfg: StructConfig) -> StructOutput:
    return encode_structure(batch_from_conformers([c]), params, cfg)


def psi(x: torch.Tensor, params: ParamStore) -> torch.Tensor:
    return (gelu(x @ params["psi.w1"] + params["psi.b1"]) @ params["psi.w2"] + params["psi.b2"]).squeeze(-1)


def reconstruct_coordinates(
    coords: torch.Tensor, pair: torch.Tensor, pair0: torch.Tensor, params: ParamStore, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Predicted clean coordinates from noisy ones.

    p_hat_i = p_i + sum_j psi(pair_ij - pair0_ij) (p_i - p_j) / N, where the
    sum and N run over every atom of the conformer, virtual atom included.
    """
    w = psi(pair - pair0, params)
    if mask is None:
        mask = torch.ones(coords.shape[:2], dtype=torch.bool)
    pm = (mask.unsqueeze(-1) & mask.unsqueeze(-2)).to(DTYPE)
    n = mask.sum(-1).to(DTYPE).view(-1, 1, 1)
    diff = coords.unsqueeze(-2) - coords.unsqueeze(-3)
    return coords + ((w * pm).unsqueeze(-1) * diff).sum(-2) / n
