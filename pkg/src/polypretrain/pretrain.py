"""Multitask pretraining: masked prediction, coordinate denoising, contrastive alignment."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .conformer import (
    Conformer,
    NoisyConformer,
    VirtualizedConformer,
    add_virtual_atom,
    chain_embed,
    inject_noise,
)
from .errors import ConfigError, DataMisaligned, NumericFailure
from .numerics import (
    DTYPE,
    AdamState,
    ParamStore,
    adam_step,
    compute_grads,
    cross_entropy,
    pairwise_cosine,
    smooth_l1,
    softmax_rows,
)
from .psmiles import MaskedSequence, StarStrategy, Vocabulary, apply_masking, build_vocabulary, encode_ids, tokenize, transform_stars
from .seq_encoder import SeqConfig, encode_batch, init_seq_params, mlm_logits, pad_batch
from .struct_encoder import StructBatch, StructConfig, collate_structures, encode_structure, init_struct_params, reconstruct_coordinates

log = logging.getLogger(__name__)

TRACE_HEADER = ("step", "l_1d", "l_3d", "l_contrast", "total")


@dataclass(frozen=True)
class TaskToggles:
    mlm: bool = True
    denoise: bool = True
    contrast: bool = True

    @property
    def any(self) -> bool:
        return self.mlm or self.denoise or self.contrast

    @classmethod
    def parse(cls, text: str) -> TaskToggles:
        names = {t.strip() for t in text.split(",") if t.strip()}
        unknown = names - {"mlm", "denoise", "contrast"}
        if unknown:
            raise ConfigError(f"unknown task(s): {sorted(unknown)}")
        return cls("mlm" in names, "denoise" in names, "contrast" in names)

    def label(self) -> str:
        return ",".join(n for n, on in (("mlm", self.mlm), ("denoise", self.denoise), ("contrast", self.contrast)) if on) or "none"

    @classmethod
    def all_combinations(cls) -> list[TaskToggles]:
        """The eight on/off settings, in the order the ablation table lists them."""
        order = [
            (0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1),
            (1, 0, 1), (0, 1, 1), (1, 1, 0), (1, 1, 1),
        ]
        return [cls(bool(a), bool(b), bool(c)) for a, b, c in order]


@dataclass
class PretrainConfig:
    """Desk-scale defaults; :meth:`published_scale` gives the published optimizer settings."""

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
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigError("mask_rate must lie in [0, 1]")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        if self.contrast_dim < 1:
            raise ConfigError("contrast_dim must be >= 1")
        try:
            StarStrategy(self.strategy)
        except ValueError:
            raise ConfigError(f"unknown star strategy {self.strategy!r}") from None

    @classmethod
    def published_scale(cls, **overrides) -> PretrainConfig:
        return cls(**{"batch_size": 16, "lr": 1e-4, **overrides})


# ---------------------------------------------------------------------------
# model assembly


def init_projectors(seq_dim: int, atom_dim: int, contrast_dim: int, gen: torch.Generator, store: ParamStore) -> ParamStore:
    store.add("proj1d.w", torch.normal(0.0, seq_dim**-0.5, size=(seq_dim, contrast_dim), generator=gen, dtype=DTYPE))
    store.add("proj3d.w", torch.normal(0.0, atom_dim**-0.5, size=(atom_dim, contrast_dim), generator=gen, dtype=DTYPE))
    return store


def init_model(seq_cfg: SeqConfig, struct_cfg: StructConfig, contrast_dim: int, seed: int) -> ParamStore:
    gen = torch.Generator().manual_seed(seed)
    store = init_seq_params(seq_cfg, gen)
    init_struct_params(struct_cfg, gen, store)
    init_projectors(seq_cfg.dim, struct_cfg.atom_dim, contrast_dim, gen, store)
    return store


# ---------------------------------------------------------------------------
# data


@dataclass
class Sample:
    psmiles: str
    ids: list[int]
    conformer: VirtualizedConformer


@dataclass
class PairedBatch:
    """K aligned samples; row i of every field belongs to the same polymer."""

    ids: torch.Tensor  # (K, T) corrupted input ids
    clean_ids: torch.Tensor  # (K, T)
    mlm_positions: list[list[int]]  # per-sample mask set
    mlm_labels: list[list[int]]
    types: torch.Tensor  # (K, N)
    clean_coords: torch.Tensor  # (K, N, 3), virtual atom at row 0
    noisy_coords: torch.Tensor
    atom_mask: torch.Tensor  # (K, N)

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def real_mask(self) -> torch.Tensor:
        m = self.atom_mask.clone()
        m[:, 0] = False
        return m


def make_samples(
    corpus: Sequence[str],
    vocab: Vocabulary,
    conformers: Iterable[Conformer] | None = None,
    strategy: StarStrategy | str = StarStrategy.SUBSTITUTE,
) -> list[Sample]:
    """Pair each P-SMILES with its conformer, looked up by the star-transformed string.

    Without ``conformers`` the toy chain layout is used.
    """
    strategy = StarStrategy(strategy)
    table: dict[str, Conformer] = {}
    if conformers is not None:
        for c in conformers:
            table.setdefault(c.psmiles, c)
    out = []
    for s in corpus:
        key = transform_stars(s, strategy)
        if conformers is None:
            conf = chain_embed(key, allow_stars=strategy is StarStrategy.KEEP)
        else:
            conf = table.get(key) or table.get(s)
            if conf is None:
                raise DataMisaligned(f"no conformer for {s!r} (looked up as {key!r})")
        out.append(Sample(s, encode_ids(tokenize(s), vocab), add_virtual_atom(conf)))
    return out


def make_batch(
    samples: Sequence[Sample], vocab: Vocabulary, cfg: PretrainConfig, rng: np.random.Generator
) -> PairedBatch:
    masked: list[MaskedSequence] = [apply_masking(s.ids, vocab, cfg.mask_rate, rng) for s in samples]
    noisy: list[NoisyConformer] = [inject_noise(s.conformer, cfg.noise_scale, rng) for s in samples]
    sb_clean = collate_structures([s.conformer.type_ids() for s in samples], [s.conformer.coords for s in samples])
    sb_noisy = collate_structures([s.conformer.type_ids() for s in samples], [n.noisy_coords for n in noisy])
    return PairedBatch(
        ids=pad_batch([m.input_ids for m in masked]),
        clean_ids=pad_batch([s.ids for s in samples]),
        mlm_positions=[m.positions for m in masked],
        mlm_labels=[m.labels for m in masked],
        types=sb_clean.types,
        clean_coords=sb_clean.coords,
        noisy_coords=sb_noisy.coords,
        atom_mask=sb_clean.mask,
    )


# ---------------------------------------------------------------------------
# losses


def masked_prediction_loss(reps: torch.Tensor, batch: PairedBatch, params: ParamStore) -> torch.Tensor:
    """Cross-entropy over each sample's mask set, averaged over samples with a non-empty set."""
    flat = [(b, t) for b, pos in enumerate(batch.mlm_positions) for t in pos]
    probs = mlm_logits(reps, flat, params)
    losses, start = [], 0
    for pos, labels in zip(batch.mlm_positions, batch.mlm_labels):
        if pos:
            losses.append(cross_entropy(probs[start : start + len(pos)], labels))
            start += len(pos)
    if not losses:
        return torch.zeros((), dtype=DTYPE)
    return torch.stack(losses).mean()


def coordinate_denoising_loss(pred: torch.Tensor, batch: PairedBatch) -> torch.Tensor:
    """Smooth-L1 between predicted and clean coordinates over real atoms, averaged over the batch."""
    real = batch.real_mask
    per = [smooth_l1(pred[b], batch.clean_coords[b], real[b]) for b in range(batch.size)]
    return torch.stack(per).mean()


def contrastive_alignment_loss(x1d: torch.Tensor, x3d: torch.Tensor, params: ParamStore, tau: float) -> torch.Tensor:
    """InfoNCE with each 1D representation as anchor and all 3D representations as candidates."""
    z1 = x1d @ params["proj1d.w"]
    z3 = x3d @ params["proj3d.w"]
    probs = softmax_rows(pairwise_cosine(z1, z3) / tau)
    return cross_entropy(probs, torch.arange(x1d.shape[0]))


@dataclass
class LossBreakdown:
    total: torch.Tensor
    l_1d: torch.Tensor
    l_3d: torch.Tensor
    l_contrast: torch.Tensor

    def row(self) -> tuple[float, float, float, float]:
        return self.l_1d.item(), self.l_3d.item(), self.l_contrast.item(), self.total.item()


def total_loss(
    batch: PairedBatch,
    toggles: TaskToggles,
    params: ParamStore,
    seq_cfg: SeqConfig,
    struct_cfg: StructConfig,
    tau: float,
) -> LossBreakdown:
    """Unit-weighted sum of the enabled task losses; disabled ones are reported as 0.

    Corruption is only applied for the task that needs it: without masked
    prediction the sequence encoder sees clean ids, without denoising the
    structure encoder sees clean coordinates.
    """
    zero = torch.zeros((), dtype=DTYPE)
    l1 = l3 = lc = zero
    x1d = x3d = None
    if toggles.mlm or toggles.contrast:
        reps, x1d = encode_batch(batch.ids if toggles.mlm else batch.clean_ids, params, seq_cfg)
        if toggles.mlm:
            l1 = masked_prediction_loss(reps, batch, params)
    if toggles.denoise or toggles.contrast:
        coords = batch.noisy_coords if toggles.denoise else batch.clean_coords
        out = encode_structure(StructBatch(batch.types, coords, batch.atom_mask), params, struct_cfg)
        x3d = out.x3d
        if toggles.denoise:
            pred = reconstruct_coordinates(coords, out.pair, out.pair0, params, batch.atom_mask)
            l3 = coordinate_denoising_loss(pred, batch)
    if toggles.contrast:
        lc = contrastive_alignment_loss(x1d, x3d, params, tau)
    return LossBreakdown(l1 + l3 + lc, l1, l3, lc)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class PretrainResult:
    params: ParamStore
    vocab: Vocabulary
    trace: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def write_trace(self, path: str | Path) -> None:
        write_trace(self.trace, path)


def write_trace(trace, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for step, *vals in trace:
            w.writerow([step, *(repr(float(v)) for v in vals)])


def run_pretraining(
    corpus: Sequence[str],
    cfg: PretrainConfig,
    toggles: TaskToggles,
    seq_cfg: SeqConfig | None = None,
    struct_cfg: StructConfig | None = None,
    conformers: Iterable[Conformer] | None = None,
    vocab: Vocabulary | None = None,
    params: ParamStore | None = None,
    log_every: int = 50,
) -> PretrainResult:
    """Train both encoders on the enabled tasks with Adam; returns parameters and a loss trace.

    Each epoch reshuffles the corpus and draws fresh masks and noise.
    """
    if not toggles.any:
        raise ConfigError("at least one pretraining task must be enabled")
    vocab = vocab or build_vocabulary(corpus)
    seq_cfg = seq_cfg or SeqConfig(vocab_size=len(vocab))
    struct_cfg = struct_cfg or StructConfig()
    if seq_cfg.vocab_size != len(vocab):
        raise ConfigError(f"seq vocab_size {seq_cfg.vocab_size} != vocabulary size {len(vocab)}")
    samples = make_samples(corpus, vocab, conformers, cfg.strategy)
    if params is None:
        params = init_model(seq_cfg, struct_cfg, cfg.contrast_dim, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    trace = []
    step = 0
    while step < cfg.steps:
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            if step >= cfg.steps:
                break
            chunk = [samples[i] for i in order[start : start + cfg.batch_size]]
            batch = make_batch(chunk, vocab, cfg, rng)
            try:
                losses = total_loss(batch, toggles, params, seq_cfg, struct_cfg, cfg.tau)
            except NumericFailure as e:
                raise NumericFailure(str(e), step=step) from e
            if not bool(torch.isfinite(losses.total)):
                raise NumericFailure("non-finite pretraining loss", step=step)
            grads = compute_grads(losses.total, params)
            for name, g in grads.items():
                if g is not None and not bool(torch.isfinite(g).all()):
                    raise NumericFailure(f"non-finite gradient for {name}", step=step)
            adam_step(params, grads, state)
            trace.append((step, *losses.row()))
            if log_every and step % log_every == 0:
                log.info("step %d  l_1d=%.4f  l_3d=%.4f  l_contrast=%.4f  total=%.4f", step, *losses.row())
            step += 1
    return PretrainResult(params, vocab, trace)


@torch.no_grad()
def embed_pairs(samples: Sequence[Sample], params: ParamStore, seq_cfg: SeqConfig, struct_cfg: StructConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Projected clean 1D and 3D representations of ``samples``."""
    _, x1d = encode_batch(pad_batch([s.ids for s in samples]), params, seq_cfg)
    sb = collate_structures([s.conformer.type_ids() for s in samples], [s.conformer.coords for s in samples])
    x3d = encode_structure(sb, params, struct_cfg).x3d
    return x1d @ params["proj1d.w"], x3d @ params["proj3d.w"]


def retrieval_accuracy(samples: Sequence[Sample], params: ParamStore, seq_cfg: SeqConfig, struct_cfg: StructConfig) -> float:
    """Fraction of 1D anchors whose most similar 3D candidate is their own polymer."""
    z1, z3 = embed_pairs(samples, params, seq_cfg, struct_cfg)
    sims = pairwise_cosine(z1, z3)
    return float((sims.argmax(dim=1) == torch.arange(len(samples))).to(DTYPE).mean())


def config_dict(seq_cfg: SeqConfig, struct_cfg: StructConfig, cfg: PretrainConfig) -> dict:
    return {"seq": seq_cfg.to_dict(), "struct": struct_cfg.to_dict(), "pretrain": asdict(cfg)}
