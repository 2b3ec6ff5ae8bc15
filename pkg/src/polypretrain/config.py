"""Flat run configuration shared by the command-line tools.

A configuration file is a flat JSON object. Every key is validated before any
work starts and unknown keys are rejected. Precedence is command-line flags,
then the file, then the defaults below.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .finetune import FinetuneConfig
from .pretrain import PretrainConfig
from .seq_encoder import SeqConfig
from .struct_encoder import StructConfig

# keys that fix the shape of the parameters; a checkpoint must agree with them
ARCH_KEYS = (
    "seq_dim", "seq_layers", "seq_heads", "seq_ff_dim", "max_len",
    "atom_dim", "pair_dim", "struct_layers", "struct_ff_dim", "max_distance", "contrast_dim",
)


@dataclass
class RunConfig:
    seed: int = 0
    # sequence encoder
    seq_dim: int = 64
    seq_layers: int = 2
    seq_heads: int = 4
    seq_ff_dim: int = 128
    max_len: int = 128
    # structure encoder
    atom_dim: int = 64
    pair_dim: int = 8
    struct_layers: int = 3
    struct_ff_dim: int = 128
    max_distance: float = 10.0
    # pretraining
    batch_size: int = 32
    steps: int = 300
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-6
    tau: float = 0.1
    noise_scale: float = 1.0
    mask_rate: float = 0.15
    contrast_dim: int = 64
    strategy: str = "substitute"
    tasks: str = "mlm,denoise,contrast"
    # fine-tuning
    modality: str = "1d"
    folds: int = 5
    epochs: int = 40
    ft_batch_size: int = 16
    ft_lr: float = 1e-3
    hidden: int = 64
    freeze_encoder: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            want = {"int": int, "float": float, "str": str, "bool": bool}[f.type]
            if want is float and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
                setattr(self, f.name, v)
            if not isinstance(v, want) or (want is int and isinstance(v, bool)):
                raise ConfigError(f"config key {f.name!r} must be {f.type}, got {v!r}")
        # constructing the component configs runs their own validation
        self.seq_config(vocab_size=5)
        self.struct_config()
        self.pretrain_config()
        self.finetune_config()

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> tuple[RunConfig, set[str]]:
        """Defaults, then ``path``, then ``overrides`` (None values ignored).

        Also returns the set of keys that were set explicitly.
        """
        data: dict[str, Any] = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text(encoding="utf-8"))
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
            except json.JSONDecodeError as e:
                raise ConfigError(f"config {path} is not valid JSON: {e}") from None
            if not isinstance(raw, dict):
                raise ConfigError(f"config {path} must hold a flat JSON object")
            data.update(raw)
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(data), set(data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def seq_config(self, vocab_size: int) -> SeqConfig:
        return SeqConfig(vocab_size, self.seq_dim, self.seq_layers, self.seq_heads, self.seq_ff_dim, self.max_len)

    def struct_config(self) -> StructConfig:
        return StructConfig(self.atom_dim, self.pair_dim, self.struct_layers, self.struct_ff_dim, self.max_distance)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            batch_size=self.batch_size, steps=self.steps, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
            eps=self.eps, tau=self.tau, noise_scale=self.noise_scale, mask_rate=self.mask_rate,
            contrast_dim=self.contrast_dim, strategy=self.strategy, seed=self.seed,
        )

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(
            modality=self.modality, folds=self.folds, epochs=self.epochs, batch_size=self.ft_batch_size,
            lr=self.ft_lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, hidden=self.hidden,
            freeze_encoder=self.freeze_encoder, strategy=self.strategy, seed=self.seed,
        )

    def arch(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in ARCH_KEYS}
