"""Transformer encoder over P-SMILES tokens and the masked-prediction head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, LengthExceeded, OddDimension, UnknownId
from .numerics import DTYPE, ParamStore, gelu, layer_norm, softmax_rows
from .psmiles import PAD_ID

INIT_STD = 0.02


@dataclass(frozen=True)
class SeqConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    max_len: int = 128

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"seq heads ({self.heads}) must divide seq dim ({self.dim})")
        if self.dim % 2:
            raise ConfigError(f"seq dim must be even for sinusoidal positions, got {self.dim}")
        if min(self.vocab_size, self.layers, self.heads, self.ff_dim, self.max_len) < 1:
            raise ConfigError(f"invalid sequence encoder config {self}")

    @classmethod
    def published_scale(cls, vocab_size: int) -> SeqConfig:
        # 6 layers x 12 heads; widths follow the usual 768/3072 for that shape
        return cls(vocab_size, dim=768, layers=6, heads=12, ff_dim=3072, max_len=512)

    def to_dict(self) -> dict:
        return asdict(self)


def positional_embedding(pos: int, d: int) -> np.ndarray:
    """Sinusoidal embedding of one position: sin at even, cos at odd components."""
    if d % 2:
        raise OddDimension(f"positional embedding needs an even dimension, got {d}")
    return positional_table(pos + 1, d)[pos]


def positional_table(length: int, d: int) -> np.ndarray:
    if d % 2:
        raise OddDimension(f"positional embedding needs an even dimension, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    out = np.empty((length, d))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq)
    return out


def init_seq_params(cfg: SeqConfig, gen: torch.Generator, store: ParamStore | None = None) -> ParamStore:
    store = store if store is not None else ParamStore()
    d, ff, V = cfg.dim, cfg.ff_dim, cfg.vocab_size

    def normal(*shape, std=None):
        # fan-in scaling keeps activations at unit scale, comparable to the positions
        std = shape[0] ** -0.5 if std is None else std
        return torch.normal(0.0, std, size=shape, generator=gen, dtype=DTYPE)

    store.add("seq.tok_emb", normal(V, d, std=1.0))
    for i in range(cfg.layers):
        p = f"seq.l{i}."
        store.add(p + "ln1.g", torch.ones(d))
        store.add(p + "ln1.b", torch.zeros(d))
        for w in ("q", "k", "v", "o"):
            store.add(p + "w" + w, normal(d, d))
            store.add(p + "b" + w, torch.zeros(d))
        store.add(p + "ln2.g", torch.ones(d))
        store.add(p + "ln2.b", torch.zeros(d))
        store.add(p + "w1", normal(d, ff))
        store.add(p + "b1", torch.zeros(ff))
        store.add(p + "w2", normal(ff, d))
        store.add(p + "b2", torch.zeros(d))
    store.add("seq.lnf.g", torch.ones(d))
    store.add("seq.lnf.b", torch.zeros(d))
    store.add("mlm.w", normal(d, V, std=INIT_STD))
    store.add("mlm.b", torch.zeros(V))
    return store


def pad_batch(seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    T = max(len(s) for s in seqs)
    out = torch.full((len(seqs), T), PAD_ID, dtype=torch.long)
    for b, s in enumerate(seqs):
        out[b, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def _attention(h: torch.Tensor, params: ParamStore, p: str, heads: int, keep: torch.Tensor) -> torch.Tensor:
    B, T, d = h.shape
    dh = d // heads

    def proj(w):
        return (h @ params[p + "w" + w] + params[p + "b" + w]).view(B, T, heads, dh).transpose(1, 2)

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    attn = softmax_rows(scores, mask=keep[:, None, None, :])
    out = (attn @ v).transpose(1, 2).reshape(B, T, d)
    return out @ params[p + "wo"] + params[p + "bo"]


def encode_batch(ids: torch.Tensor, params: ParamStore, cfg: SeqConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Padded ids (B, T) -> token representations (B, T, d) and [CLS] vectors (B, d)."""
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.dim() != 2:
        raise ValueError("encode_batch expects a (batch, length) id tensor")
    B, T = ids.shape
    if T > cfg.max_len:
        raise LengthExceeded(f"sequence length {T} exceeds max_len {cfg.max_len}")
    if bool((ids < 0).any()) or bool((ids >= cfg.vocab_size).any()):
        raise UnknownId(f"token id outside [0, {cfg.vocab_size})")
    keep = ids != PAD_ID
    pe = torch.from_numpy(positional_table(T, cfg.dim))
    h = params["seq.tok_emb"][ids] + pe
    for i in range(cfg.layers):
        p = f"seq.l{i}."
        h = h + _attention(layer_norm(h, params[p + "ln1.g"], params[p + "ln1.b"]), params, p, cfg.heads, keep)
        f = layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"])
        h = h + gelu(f @ params[p + "w1"] + params[p + "b1"]) @ params[p + "w2"] + params[p + "b2"]
    h = layer_norm(h, params["seq.lnf.g"], params["seq.lnf.b"])
    return h, h[:, 0]


def encode_sequence(ids: Sequence[int], params: ParamStore, cfg: SeqConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Single unpadded sequence -> (T, d) token representations and the d-dim [CLS] vector."""
    reps, x1d = encode_batch(pad_batch([ids]), params, cfg)
    return reps[0], x1d[0]


def mlm_logits(reps: torch.Tensor, positions, params: ParamStore) -> torch.Tensor:
    """Vocabulary distributions at the masked positions.

    ``reps`` is (T, d) with ``positions`` a list of indices, or (B, T, d) with
    ``positions`` a list of (b, t) pairs. Returns (|M|, |V|) probabilities.
    """
    V = params["mlm.b"].shape[0]
    if len(positions) == 0:
        return torch.zeros((0, V), dtype=DTYPE)
    if reps.dim() == 2:
        rows = reps[torch.as_tensor(list(positions), dtype=torch.long)]
    else:
        idx = torch.as_tensor(list(positions), dtype=torch.long)
        rows = reps[idx[:, 0], idx[:, 1]]
    return softmax_rows(rows @ params["mlm.w"] + params["mlm.b"])
