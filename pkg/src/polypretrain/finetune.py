"""Property regression on top of the pretrained encoders, with k-fold evaluation."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .conformer import Conformer, add_virtual_atom, chain_embed
from .errors import ConfigError, ConstantTargets, MalformedRecord, MissingConformer, ShapeMismatch, TooFewRecords
from .numerics import DTYPE, AdamState, ParamStore, adam_step, compute_grads, gelu
from .psmiles import StarStrategy, Vocabulary, encode_ids, tokenize, transform_stars
from .pretrain import Sample
from .seq_encoder import SeqConfig, encode_batch, pad_batch
from .struct_encoder import StructConfig, collate_structures, encode_structure

log = logging.getLogger(__name__)


class ModalityChoice(str, enum.Enum):
    ONE_D = "1d"
    THREE_D = "3d"
    BOTH = "both"

    @property
    def uses_seq(self) -> bool:
        return self is not ModalityChoice.THREE_D

    @property
    def uses_struct(self) -> bool:
        return self is not ModalityChoice.ONE_D

    def input_dim(self, seq_cfg: SeqConfig, struct_cfg: StructConfig) -> int:
        return seq_cfg.dim * self.uses_seq + struct_cfg.atom_dim * self.uses_struct

    def encoder_prefixes(self) -> tuple[str, ...]:
        return ("seq.",) * self.uses_seq + ("struct.",) * self.uses_struct


@dataclass
class FinetuneConfig:
    modality: str = "1d"
    folds: int = 5
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-6
    hidden: int = 64
    freeze_encoder: bool = False
    strategy: str = "substitute"
    seed: int = 0

    def __post_init__(self):
        try:
            ModalityChoice(self.modality)
        except ValueError:
            raise ConfigError(f"unknown modality {self.modality!r}; expected 1d, 3d or both") from None
        if self.folds < 2:
            raise ConfigError("cross-validation needs at least 2 folds")
        if self.epochs < 0 or self.batch_size < 1 or self.hidden < 1 or self.lr <= 0:
            raise ConfigError(f"invalid fine-tuning config {self}")


# ---------------------------------------------------------------------------
# data


@dataclass
class PropertyDataset:
    records: list[tuple[str, float | None]]
    name: str = "property"
    value_range: tuple[float, float] | None = None

    def __post_init__(self):
        for i, (s, v) in enumerate(self.records):
            if v is None:
                continue
            if not math.isfinite(v):
                raise MalformedRecord(f"record {i} ({s}): non-finite value {v}")
            if self.value_range and not self.value_range[0] <= v <= self.value_range[1]:
                raise MalformedRecord(f"record {i} ({s}): value {v} outside declared range {self.value_range}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def psmiles(self) -> list[str]:
        return [s for s, _ in self.records]

    @property
    def has_values(self) -> bool:
        return all(v is not None for _, v in self.records)

    def targets(self) -> np.ndarray:
        if not self.has_values:
            raise MalformedRecord(f"dataset {self.name!r} has records without a value")
        return np.array([v for _, v in self.records], dtype=np.float64)


def load_dataset(path: str | Path, value_range: tuple[float, float] | None = None, require_values: bool = True) -> PropertyDataset:
    """Read a ``psmiles,value`` CSV. With ``require_values`` off the value column may be absent or blank."""
    records: list[tuple[str, float | None]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if "psmiles" not in fields or (require_values and "value" not in fields):
            raise MalformedRecord(f"{path}: expected header 'psmiles,value', got {fields}")
        for lineno, row in enumerate(reader, start=2):
            s = (row.get("psmiles") or "").strip()
            if not s:
                raise MalformedRecord(f"{path}:{lineno}: empty psmiles")
            raw = (row.get("value") or "").strip()
            if not raw:
                if require_values:
                    raise MalformedRecord(f"{path}:{lineno}: missing value")
                records.append((s, None))
                continue
            try:
                records.append((s, float(raw)))
            except ValueError:
                raise MalformedRecord(f"{path}:{lineno}: value {raw!r} is not a number") from None
    return PropertyDataset(records, name=Path(path).stem, value_range=value_range)


def save_dataset(ds: PropertyDataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["psmiles", "value"])
        for s, v in ds.records:
            w.writerow([s, "" if v is None else repr(v)])


def prepare_samples(
    psmiles: Sequence[str],
    vocab: Vocabulary,
    modality: ModalityChoice | str,
    conformers: Iterable[Conformer] | None = None,
    strategy: StarStrategy | str = StarStrategy.SUBSTITUTE,
) -> list[Sample]:
    """Tokenize each polymer and attach its conformer when the modality needs one.

    Without ``conformers`` the toy chain layout stands in; with them, a
    polymer that has no entry raises :class:`MissingConformer`.
    """
    modality, strategy = ModalityChoice(modality), StarStrategy(strategy)
    table = None if conformers is None else {c.psmiles: c for c in conformers}
    out = []
    for s in psmiles:
        ids = encode_ids(tokenize(s), vocab)
        conf = None
        if modality.uses_struct:
            key = transform_stars(s, strategy)
            if table is None:
                conf = chain_embed(key, allow_stars=strategy is StarStrategy.KEEP)
            else:
                conf = table.get(key) or table.get(s)
                if conf is None:
                    raise MissingConformer(f"no conformer for {s!r} (looked up as {key!r})")
            conf = add_virtual_atom(conf)
        out.append(Sample(s, ids, conf))
    return out


# ---------------------------------------------------------------------------
# metrics


def rmse(pred: Sequence[float], target: Sequence[float]) -> float:
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ShapeMismatch(f"rmse needs equal nonzero lengths, got {p.shape} and {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def r_squared(pred: Sequence[float], target: Sequence[float]) -> float:
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ShapeMismatch(f"r_squared needs equal nonzero lengths, got {p.shape} and {t.shape}")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise ConstantTargets("R^2 is undefined for constant targets")
    return 1.0 - float(np.sum((p - t) ** 2)) / ss_tot


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class Normalizer:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, y: np.ndarray) -> Normalizer:
        y = np.asarray(y, dtype=np.float64)
        std = float(y.std())
        # a constant training split keeps unit scale rather than dividing by zero
        return cls(float(y.mean()), std if std > 0 else 1.0)

    def forward(self, y):
        return (y - self.mean) / self.std

    def inverse(self, z):
        return z * self.std + self.mean


def init_head(in_dim: int, hidden: int, gen: torch.Generator, store: ParamStore) -> ParamStore:
    store.add("head.w1", torch.normal(0.0, in_dim**-0.5, size=(in_dim, hidden), generator=gen, dtype=DTYPE))
    store.add("head.b1", torch.zeros(hidden))
    store.add("head.w2", torch.normal(0.0, hidden**-0.5, size=(hidden, 1), generator=gen, dtype=DTYPE))
    store.add("head.b2", torch.zeros(1))
    return store


def apply_head(x: torch.Tensor, params: ParamStore) -> torch.Tensor:
    w1 = params["head.w1"]
    if x.shape[-1] != w1.shape[0]:
        raise ShapeMismatch(f"head expects input dim {w1.shape[0]}, got {x.shape[-1]}")
    return (gelu(x @ w1 + params["head.b1"]) @ params["head.w2"] + params["head.b2"]).squeeze(-1)


def representation(
    samples: Sequence[Sample], params: ParamStore, modality: ModalityChoice | str, seq_cfg: SeqConfig, struct_cfg: StructConfig
) -> torch.Tensor:
    """X_1d, X_3d or their concatenation for a batch of samples. Only the needed encoder is read."""
    modality = ModalityChoice(modality)
    parts = []
    if modality.uses_seq:
        _, x1d = encode_batch(pad_batch([s.ids for s in samples]), params, seq_cfg)
        parts.append(x1d)
    if modality.uses_struct:
        missing = [s.psmiles for s in samples if s.conformer is None]
        if missing:
            raise MissingConformer(f"no conformer for {missing[0]!r}")
        sb = collate_structures([s.conformer.type_ids() for s in samples], [s.conformer.coords for s in samples])
        parts.append(encode_structure(sb, params, struct_cfg).x3d)
    return torch.cat(parts, dim=-1)


@dataclass
class PropertyModel:
    """Everything needed to predict a property in original units."""

    params: ParamStore
    modality: ModalityChoice
    seq_cfg: SeqConfig
    struct_cfg: StructConfig
    normalizer: Normalizer = field(default_factory=Normalizer)

    def predict_normalized(self, samples: Sequence[Sample]) -> torch.Tensor:
        x = representation(samples, self.params, self.modality, self.seq_cfg, self.struct_cfg)
        return apply_head(x, self.params)

    @torch.no_grad()
    def predict(self, samples: Sequence[Sample], batch_size: int = 64) -> np.ndarray:
        out = [
            self.predict_normalized(samples[i : i + batch_size]).numpy()
            for i in range(0, len(samples), batch_size)
        ]
        return self.normalizer.inverse(np.concatenate(out)) if out else np.zeros(0)


def predict_property(sample: Sample, model: PropertyModel) -> float:
    return float(model.predict([sample])[0])


def build_model(
    pretrained: ParamStore,
    modality: ModalityChoice | str,
    seq_cfg: SeqConfig,
    struct_cfg: StructConfig,
    hidden: int,
    seed: int,
    freeze_encoder: bool = False,
) -> PropertyModel:
    """Copy the selected encoder out of ``pretrained`` and put a fresh head on top.

    Pretraining-only tensors (masked-prediction head, projectors, coordinate
    decoder) are left behind.
    """
    modality = ModalityChoice(modality)
    params = ParamStore()
    for name, t in pretrained.items():
        if name.startswith(modality.encoder_prefixes()):
            params.add(name, t.detach(), trainable=not freeze_encoder)
    init_head(modality.input_dim(seq_cfg, struct_cfg), hidden, torch.Generator().manual_seed(seed), params)
    return PropertyModel(params, modality, seq_cfg, struct_cfg)


def fit(model: PropertyModel, samples: Sequence[Sample], targets: np.ndarray, cfg: FinetuneConfig, rng: np.random.Generator) -> list[float]:
    """Fit ``model`` on z-scored targets with Adam and mean squared error; returns per-epoch mean losses."""
    model.normalizer = Normalizer.fit(targets)
    z = torch.as_tensor(model.normalizer.forward(np.asarray(targets, dtype=np.float64)), dtype=DTYPE)
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            pred = model.predict_normalized([samples[i] for i in idx])
            loss = ((pred - z[torch.as_tensor(idx)]) ** 2).mean()
            adam_step(model.params, compute_grads(loss, model.params), state)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return history


# ---------------------------------------------------------------------------
# cross-validation


def fold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    if n < k:
        raise TooFewRecords(f"{n} records cannot be split into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


@dataclass
class EvalReport:
    modality: str
    fold_rmse: list[float]
    fold_r2: list[float]
    fold_sizes: list[int]

    @staticmethod
    def _stats(xs: list[float]) -> tuple[float, float]:
        a = np.asarray(xs, dtype=np.float64)
        return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0

    @property
    def rmse(self) -> tuple[float, float]:
        return self._stats(self.fold_rmse)

    @property
    def r2(self) -> tuple[float, float]:
        return self._stats(self.fold_r2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rmse_mean"], d["rmse_std"] = self.rmse
        d["r2_mean"], d["r2_std"] = self.r2
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        lines = [f"modality: {self.modality}", f"{'fold':>6} {'n':>5} {'RMSE':>12} {'R2':>10}"]
        for i, (n, e, r) in enumerate(zip(self.fold_sizes, self.fold_rmse, self.fold_r2)):
            lines.append(f"{i:>6} {n:>5} {e:>12.6f} {r:>10.6f}")
        (em, es), (rm, rs) = self.rmse, self.r2
        lines.append(f"{'mean':>6} {sum(self.fold_sizes):>5} {em:>12.6f} {rm:>10.6f}")
        lines.append(f"{'std':>6} {'':>5} {es:>12.6f} {rs:>10.6f}")
        return "\n".join(lines) + "\n"


def run_cross_validation(
    dataset: PropertyDataset,
    pretrained: ParamStore,
    vocab: Vocabulary,
    seq_cfg: SeqConfig,
    struct_cfg: StructConfig,
    cfg: FinetuneConfig,
    conformers: Iterable[Conformer] | None = None,
) -> EvalReport:
    """k-fold fine-tuning and evaluation; metrics are in the dataset's original units."""
    modality = ModalityChoice(cfg.modality)
    folds = fold_indices(len(dataset), cfg.folds, cfg.seed)
    y = dataset.targets()
    samples = prepare_samples(dataset.psmiles, vocab, modality, conformers, cfg.strategy)
    errs, r2s, sizes = [], [], []
    for f, test in enumerate(folds):
        train = np.setdiff1d(np.arange(len(dataset)), test)
        model = build_model(pretrained, modality, seq_cfg, struct_cfg, cfg.hidden, cfg.seed + f, cfg.freeze_encoder)
        fit(model, [samples[i] for i in train], y[train], cfg, np.random.default_rng([cfg.seed, f]))
        pred = model.predict([samples[i] for i in test])
        errs.append(rmse(pred, y[test]))
        r2s.append(r_squared(pred, y[test]))
        sizes.append(len(test))
        log.info("fold %d/%d  rmse=%.4f  r2=%.4f", f + 1, len(folds), errs[-1], r2s[-1])
    return EvalReport(modality.value, errs, r2s, sizes)
