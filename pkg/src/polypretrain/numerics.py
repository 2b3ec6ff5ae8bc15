"""Tensor kernels, parameter storage, Adam and finite-difference gradient checks.

Everything runs in float64 on top of torch, which supplies the reverse-mode
differentiation; the kernels themselves (softmax, losses, GELU, layer norm)
are written out explicitly so their formulas are visible and testable.
"""

from __future__ import annotations

import contextlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np
import torch

from .errors import NumericFailure, ShapeMismatch, ZeroVector

DTYPE = torch.float64
PROB_FLOOR = 1e-12
LN_EPS = 1e-5


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(data, dtype=DTYPE, requires_grad=requires_grad)


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericFailure(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# kernels


def softmax_rows(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last axis, stabilized by subtracting the row maximum.

    ``mask`` (broadcastable, True = keep) excludes entries, which then get
    probability exactly zero. Every row must keep at least one entry.
    """
    check_finite(x, "softmax input")
    if mask is not None:
        x = x.masked_fill(~mask, float("-inf"))
    shift = x.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(x - shift)
    return e / e.sum(dim=-1, keepdim=True)


def cross_entropy(probs: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-probability of ``labels``; zero for an empty set."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() == 0:
        return torch.zeros((), dtype=DTYPE)
    picked = probs.gather(-1, labels.reshape(-1, 1)).squeeze(-1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, include: torch.Tensor | None = None) -> torch.Tensor:
    """Smooth L1 (quadratic below unit error) averaged over included rows and components."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"smooth_l1 shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    err = (pred - target).abs()
    elem = torch.where(err < 1.0, 0.5 * err * err, err - 0.5)
    if include is None:
        return elem.mean()
    w = include.to(DTYPE).unsqueeze(-1).expand_as(elem)
    return (elem * w).sum() / w.sum()


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if na.item() == 0.0 or nb.item() == 0.0:
        raise ZeroVector("cosine similarity of a zero vector")
    return (a * b).sum() / (na * nb)


def pairwise_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(K, D) x (K', D) -> (K, K') matrix of cosine similarities."""
    na = torch.linalg.vector_norm(a, dim=-1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=-1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ZeroVector("cosine similarity of a zero vector")
    return (a / na) @ (b / nb).T


def gelu(x: torch.Tensor) -> torch.Tensor:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + torch.tanh(c * (x + 0.044715 * x**3)))


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Ordered collection of named float64 tensors.

    Shapes are fixed once a name is registered. Reads can be audited with
    :meth:`track_access`, which the fine-tuning code uses to prove that a
    single-modality model never touches the other encoder.
    """

    def __init__(self):
        self._tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
        self._trainable: dict[str, bool] = {}
        self._audit: list[set[str]] = []

    def add(self, name: str, value, trainable: bool = True) -> torch.Tensor:
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already exists")
        t = torch.as_tensor(value, dtype=DTYPE).detach().clone()
        t.requires_grad_(trainable)
        self._tensors[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        for seen in self._audit:
            seen.add(name)
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    def items(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self._tensors.items())

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag
        self._tensors[name].requires_grad_(flag)

    def trainable_items(self) -> list[tuple[str, torch.Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if self._trainable[n]]

    def assign(self, name: str, value) -> None:
        """Overwrite a tensor's values in place; the shape must not change."""
        t = self._tensors[name]
        v = torch.as_tensor(value, dtype=DTYPE)
        if v.shape != t.shape:
            raise ShapeMismatch(f"{name}: cannot assign shape {tuple(v.shape)} to {tuple(t.shape)}")
        with torch.no_grad():
            t.copy_(v)

    def clone(self) -> ParamStore:
        out = ParamStore()
        for n, t in self._tensors.items():
            out.add(n, t.detach(), self._trainable[n])
        return out

    def update(self, other: ParamStore, prefixes: tuple[str, ...] = ("",)) -> None:
        """Copy values for names present in both stores and matching a prefix."""
        for n, t in other.items():
            if n in self._tensors and n.startswith(prefixes):
                self.assign(n, t.detach())

    @contextlib.contextmanager
    def track_access(self) -> Iterator[set[str]]:
        seen: set[str] = set()
        self._audit.append(seen)
        try:
            yield seen
        finally:
            self._audit.remove(seen)

    def equal(self, other: ParamStore) -> bool:
        if list(self._tensors) != list(other._tensors):
            return False
        return all(torch.equal(t, other._tensors[n]) for n, t in self._tensors.items())


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-6
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: Mapping[str, torch.Tensor | None], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place. Names with a ``None`` gradient are skipped."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    with torch.no_grad():
        for name, g in grads.items():
            if g is None:
                continue
            p = params._tensors[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"{name}: gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    return state


def compute_grads(loss: torch.Tensor, params: ParamStore) -> dict[str, torch.Tensor | None]:
    """Reverse-mode gradients of ``loss`` for every trainable parameter (None if unreachable)."""
    items = params.trainable_items()
    if not loss.requires_grad:
        return {n: None for n, _ in items}
    gs = torch.autograd.grad(loss, [t for _, t in items], allow_unused=True)
    return {n: g for (n, _), g in zip(items, gs)}


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"gradcheck {status}: {len(self.entries)} coords, max rel err {self.max_rel_err:.3e} (tol {self.tol:g})"


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: ParamStore | Mapping[str, torch.Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    n_samples: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``loss_fn`` takes no arguments and must read the tensors in ``params``.
    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``
    so that coordinates with vanishing gradient are judged on absolute error.
    With ``n_samples`` set, that many coordinates are drawn uniformly over
    all parameters; otherwise every coordinate is checked.
    """
    if isinstance(params, ParamStore):
        named = params.trainable_items()
    else:
        named = [(n, t) for n, t in params.items() if t.requires_grad]
    loss = loss_fn()
    check_finite(loss.detach(), "loss")
    if loss.requires_grad:
        gs = torch.autograd.grad(loss, [t for _, t in named], allow_unused=True)
    else:
        gs = [None] * len(named)
    analytic = [torch.zeros_like(t) if g is None else g.detach() for (_, t), g in zip(named, gs)]

    coords = [(k, idx) for k, (_, t) in enumerate(named) for idx in np.ndindex(*t.shape)]
    if n_samples is not None and n_samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    entries = []
    with torch.no_grad():
        for k, idx in coords:
            name, t = named[k]
            orig = t[idx].item()
            t[idx] = orig + h
            f_plus = float(loss_fn())
            t[idx] = orig - h
            f_minus = float(loss_fn())
            t[idx] = orig
            num = (f_plus - f_minus) / (2 * h)
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericFailure(f"non-finite loss while perturbing {name}{list(idx)}")
            ana = float(analytic[k][idx])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            entries.append(GradCheckEntry(name, tuple(int(i) for i in idx), ana, num, rel))
    return GradCheckReport(entries, tol)
