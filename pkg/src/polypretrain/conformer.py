"""3D conformations of repeating units: loading, virtual atom, noise, distances."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import InvariantViolation, MalformedRecord, StarCountError, UnknownAtomType
from .psmiles import parse

VIRT = "[VIRT]"
STAR = "*"
# Atom-type vocabulary for the structure encoder. Index 0 doubles as padding.
ATOM_TYPES: tuple[str, ...] = (
    VIRT, STAR, "H", "B", "C", "N", "O", "F", "Na", "Mg", "Al", "Si", "P", "S",
    "Cl", "K", "Ca", "Ti", "Fe", "Zn", "Ge", "As", "Se", "Br", "Sn", "Te", "I",
)
ATOM_INDEX = {a: i for i, a in enumerate(ATOM_TYPES)}
VIRT_ID = 0

MIN_SEPARATION = 1e-6
BOND_LENGTH = 1.5


@dataclass
class Conformer:
    psmiles: str
    atoms: list[str]
    coords: np.ndarray  # (N, 3) float64, Angstrom

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        validate(self)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def type_ids(self) -> np.ndarray:
        return atom_type_ids(self.atoms)


@dataclass
class VirtualizedConformer:
    """Conformer with a virtual atom prepended at row 0."""

    psmiles: str
    atoms: list[str]
    coords: np.ndarray  # (N + 1, 3)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def type_ids(self) -> np.ndarray:
        return atom_type_ids(self.atoms)

    def real(self) -> Conformer:
        return Conformer(self.psmiles, self.atoms[1:], self.coords[1:].copy())


@dataclass
class NoisyConformer:
    clean: VirtualizedConformer
    noisy_coords: np.ndarray  # (N + 1, 3); row 0 is the centroid of the noisy real atoms
    noise: np.ndarray  # (N, 3), real atoms only

    @property
    def atoms(self) -> list[str]:
        return self.clean.atoms

    def noisy(self) -> VirtualizedConformer:
        return VirtualizedConformer(self.clean.psmiles, self.clean.atoms, self.noisy_coords)


def atom_type_ids(atoms: Iterable[str]) -> np.ndarray:
    try:
        return np.array([ATOM_INDEX[a] for a in atoms], dtype=np.int64)
    except KeyError as e:
        raise UnknownAtomType(f"atom type {e.args[0]!r} is not in the structure-encoder vocabulary") from None


def validate(c: Conformer) -> None:
    n = len(c.atoms)
    if n < 1:
        raise InvariantViolation("conformer has no atoms")
    if c.coords.shape != (n, 3):
        raise MalformedRecord(f"coords shape {c.coords.shape} does not match {n} atoms")
    if not np.all(np.isfinite(c.coords)):
        raise InvariantViolation(f"non-finite coordinates in {c.psmiles!r}")
    if n > 1:
        d = pair_distances(c.coords)
        d[np.diag_indices(n)] = np.inf
        if d.min() <= MIN_SEPARATION:
            i, j = np.unravel_index(np.argmin(d), d.shape)
            raise InvariantViolation(f"atoms {i} and {j} of {c.psmiles!r} overlap")


def _record_to_conformer(rec: object, lineno: int) -> Conformer:
    if not isinstance(rec, dict):
        raise MalformedRecord(f"line {lineno}: record is not a JSON object")
    for key in ("psmiles", "atoms", "coords"):
        if key not in rec:
            raise MalformedRecord(f"line {lineno}: missing field {key!r}")
    atoms, coords = rec["atoms"], rec["coords"]
    if not isinstance(rec["psmiles"], str) or not isinstance(atoms, list) or not isinstance(coords, list):
        raise MalformedRecord(f"line {lineno}: wrong field types")
    if len(coords) != len(atoms) or any(not isinstance(r, list) or len(r) != 3 for r in coords):
        raise MalformedRecord(f"line {lineno}: coords must be an N x 3 list matching atoms")
    try:
        arr = np.array(coords, dtype=np.float64)
    except (TypeError, ValueError):
        raise MalformedRecord(f"line {lineno}: non-numeric coordinates") from None
    return Conformer(rec["psmiles"], [str(a) for a in atoms], arr)


def load_conformers(path: str | Path) -> list[Conformer]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(f"line {lineno}: {e}") from None
            out.append(_record_to_conformer(rec, lineno))
    return out


def save_conformers(conformers: Iterable[Conformer], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in conformers:
            rec = {"psmiles": c.psmiles, "atoms": c.atoms, "coords": c.coords.tolist()}
            fh.write(json.dumps(rec) + "\n")


def add_virtual_atom(c: Conformer) -> VirtualizedConformer:
    center = c.coords.mean(axis=0, keepdims=True)
    return VirtualizedConformer(c.psmiles, [VIRT, *c.atoms], np.vstack([center, c.coords]))


def inject_noise(c: VirtualizedConformer, scale: float, rng: np.random.Generator) -> NoisyConformer:
    """Perturb every real-atom coordinate by independent Uniform(-scale, scale) noise."""
    if scale < 0:
        raise ValueError(f"noise scale must be >= 0, got {scale}")
    n_real = c.coords.shape[0] - 1
    noise = rng.uniform(-scale, scale, size=(n_real, 3)) if scale > 0 else np.zeros((n_real, 3))
    real = c.coords[1:] + noise
    noisy = np.vstack([real.mean(axis=0, keepdims=True), real])
    return NoisyConformer(clean=c, noisy_coords=noisy, noise=noise)


def pair_distances(coords) -> np.ndarray:
    """Euclidean distance matrix of an (N, 3) coordinate array or conformer."""
    p = np.asarray(getattr(coords, "coords", coords), dtype=np.float64)
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def _helix_step() -> tuple[float, float, float]:
    theta = math.radians(100.0)
    radius = 0.8
    chord = 2 * radius * math.sin(theta / 2)
    rise = math.sqrt(BOND_LENGTH**2 - chord**2)
    return theta, radius, rise


def chain_embed(psmiles: str, allow_stars: bool = False) -> Conformer:
    """Deterministic toy layout: atoms in order of appearance on a helical zig-zag.

    Successive atoms are exactly ``BOND_LENGTH`` apart. This is not a
    physical conformer; it exists so the pipeline runs without external
    chemistry tooling. Hydrogens written in the string are skipped. Stars are
    rejected unless ``allow_stars`` is set, in which case they become
    dummy atoms of type ``*``.
    """
    g = parse(psmiles)
    if g.stars and not allow_stars:
        raise StarCountError(f"chain_embed expects a star-free string, got {psmiles!r}")
    atoms = [a.symbol for a in g.atoms if a.symbol != "H"]
    theta, radius, rise = _helix_step()
    k = np.arange(len(atoms), dtype=np.float64)
    coords = np.stack([radius * np.cos(k * theta), radius * np.sin(k * theta), rise * k], axis=1)
    return Conformer(psmiles, atoms, coords)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
