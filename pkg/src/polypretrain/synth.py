"""Random P-SMILES generation for demos, tests and the desk-scale benchmarks."""

from __future__ import annotations

import numpy as np

from .psmiles import heavy_atom_count

# backbone pieces; the next piece attaches to the last atom written outside any branch
_BACKBONE = (
    "C", "C", "C", "CC", "O", "N", "S", "C(C)", "C(F)", "C(Cl)", "C(=O)",
    "C(=O)O", "C(=O)N", "c1ccc(cc1)", "c1ccc(cc1)", "C(F)(F)", "[Si](C)(C)",
    "C(C#N)", "C=C", "c1ccc(Br)c(c1)", "N(C)", "C(OC)",
)
_TAILS = ("*", "*", "*", "C(*)=O", "C(*)F", "C(*)C", "-*")
_EXOTIC = ("[nH]", "Se", "C%12CC%12", "C1CC1", "C/C=C/C", "[O-]", "[NH3+]")


def random_psmiles(rng: np.random.Generator, min_pieces: int = 2, max_pieces: int = 7) -> str:
    """Draw one P-SMILES string with a star at the start and one near the end."""
    n = int(rng.integers(min_pieces, max_pieces + 1))
    pieces = [_BACKBONE[int(rng.integers(len(_BACKBONE)))] for _ in range(n)]
    return "*" + "".join(pieces) + _TAILS[int(rng.integers(len(_TAILS)))]


def random_smiles_for_roundtrip(rng: np.random.Generator) -> str:
    """Like :func:`random_psmiles` but mixes in bracket atoms, ``%nn`` closures and stereo bonds."""
    n = int(rng.integers(1, 6))
    pool = _BACKBONE + _EXOTIC
    body = "".join(pool[int(rng.integers(len(pool)))] for _ in range(n))
    if rng.random() < 0.2:
        return body
    return "*" + body + _TAILS[int(rng.integers(len(_TAILS)))]


def synthetic_corpus(n: int, seed: int, exclude: set[str] | None = None) -> list[str]:
    """``n`` distinct random P-SMILES strings, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    seen = set(exclude or ())
    out: list[str] = []
    while len(out) < n:
        s = random_psmiles(rng)
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def heavy_atom_dataset(corpus: list[str]) -> list[tuple[str, float]]:
    return [(s, float(heavy_atom_count(s))) for s in corpus]
