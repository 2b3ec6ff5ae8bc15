"""P-SMILES parsing, tokenization, star rewriting and MLM masking.

A P-SMILES string is an ordinary SMILES string for a monomer with two ``*``
wildcard atoms marking the polymerization sites, e.g. ``*CC(*)C`` for
polypropylene.  The grammar handled here is a deliberately small subset of
SMILES: organic-subset and bracket atoms, bond symbols ``-=#:/\\``,
branches and ring closures (single digit and ``%nn``).  Dot-disconnected
fragments are rejected.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AdjacentStarsError,
    DanglingRingBond,
    DisconnectedError,
    EmptyBody,
    EmptyInput,
    InvalidCharacter,
    SmilesSyntaxError,
    StarCountError,
    StarDegreeError,
    UnbalancedParentheses,
    UnknownElement,
    UnterminatedBracketAtom,
)

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, MASK, UNK)
PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID = range(5)

ELEMENTS = frozenset(
    """H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co
    Ni Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te
    I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir
    Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu""".split()
)
ORGANIC = frozenset({"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"})
# Accepted bare as a convenience; common in polymer datasets.
LENIENT_BARE = frozenset({"Si", "Se"})
AROMATIC_BARE = frozenset({"b", "c", "n", "o", "p", "s"})
AROMATIC_BRACKET = AROMATIC_BARE | {"se", "as", "te"}
TWO_LETTER = ("Cl", "Br", "Si", "Se")
BOND_ORDERS = {"-": 1.0, "=": 2.0, "#": 3.0, ":": 1.5, "/": 1.0, "\\": 1.0}
_SINGLE_CHARS = frozenset("BCNOPSFIbcnops*()=#-+/\\.:@0123456789")

_BRACKET_RE = re.compile(
    r"^(?P<isotope>\d+)?"
    r"(?P<symbol>\*|[A-Z][a-z]?|[a-z]{1,2})"
    r"(?P<chiral>@@?|@[A-Z]{2}\d+)?"
    r"(?P<hcount>H\d*)?"
    r"(?P<charge>[+-]\d+|\++|-+)?"
    r"(?P<cls>:\d+)?$"
)


class StarStrategy(str, enum.Enum):
    KEEP = "keep"
    REMOVE = "remove"
    SUBSTITUTE = "substitute"


@dataclass(frozen=True)
class Atom:
    index: int
    symbol: str  # element symbol, capitalized ("C" for both "C" and "c"); "*" for stars
    aromatic: bool
    is_star: bool
    token: str  # text as written in the source string


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    order: float
    symbol: str = ""  # "" for an implicit bond


@dataclass
class MolGraph:
    atoms: list[Atom] = field(default_factory=list)
    bonds: list[Bond] = field(default_factory=list)

    def neighbors(self, idx: int) -> list[int]:
        out = []
        for b in self.bonds:
            if b.i == idx:
                out.append(b.j)
            elif b.j == idx:
                out.append(b.i)
        return out

    def degree(self, idx: int) -> int:
        return len(self.neighbors(idx))

    @property
    def stars(self) -> list[int]:
        return [a.index for a in self.atoms if a.is_star]

    def heavy_atom_count(self) -> int:
        return sum(1 for a in self.atoms if not a.is_star and a.symbol != "H")


# ---------------------------------------------------------------------------
# tokenization


def _split(text: str) -> list[str]:
    if not text:
        raise EmptyInput("empty P-SMILES string")
    tokens = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "[":
            end = text.find("]", i + 1)
            nested = text.find("[", i + 1)
            if end < 0 or (0 <= nested < end):
                raise UnterminatedBracketAtom(f"unterminated bracket atom at offset {i} in {text!r}")
            tokens.append(text[i : end + 1])
            i = end + 1
        elif ch == "%":
            chunk = text[i + 1 : i + 3]
            if len(chunk) != 2 or not chunk.isdigit():
                raise SmilesSyntaxError(f"'%' must be followed by two digits at offset {i} in {text!r}")
            tokens.append(text[i : i + 3])
            i += 3
        elif text[i : i + 2] in TWO_LETTER:
            tokens.append(text[i : i + 2])
            i += 2
        elif ch in _SINGLE_CHARS:
            tokens.append(ch)
            i += 1
        elif ch == "]":
            raise UnterminatedBracketAtom(f"stray ']' at offset {i} in {text!r}")
        elif ch.isalpha():
            raise UnknownElement(f"unknown element {ch!r} at offset {i} in {text!r}")
        else:
            raise InvalidCharacter(f"invalid character {ch!r} at offset {i} in {text!r}")
    return tokens


def tokenize(text: str) -> list[str]:
    """Split a P-SMILES string into chemically aware tokens.

    Bracket atoms, the two-letter elements ``Cl Br Si Se`` and ``%nn`` ring
    closures are single tokens; everything else is one character. The result
    is wrapped in ``[CLS]`` ... ``[SEP]``.

    >>> tokenize("*CC(*)F")
    ['[CLS]', '*', 'C', 'C', '(', '*', ')', 'F', '[SEP]']
    """
    return [CLS, *_split(text), SEP]


def detokenize(tokens: Sequence[str]) -> str:
    body = "".join(t for t in tokens if t not in SPECIAL_TOKENS)
    if not body:
        raise EmptyBody("token sequence has no non-special tokens")
    return body


def is_ring_token(tok: str) -> bool:
    return tok.isdigit() or tok.startswith("%")


def is_atom_token(tok: str) -> bool:
    return tok.startswith("[") or tok == "*" or tok[0].isalpha()


# ---------------------------------------------------------------------------
# parsing


def _atom_from_token(tok: str, index: int) -> Atom:
    if tok == "*":
        return Atom(index, "*", False, True, tok)
    if tok.startswith("["):
        m = _BRACKET_RE.match(tok[1:-1])
        if m is None:
            raise SmilesSyntaxError(f"malformed bracket atom {tok!r}")
        sym = m.group("symbol")
        if sym == "*":
            return Atom(index, "*", False, True, tok)
        if sym.islower():
            if sym not in AROMATIC_BRACKET:
                raise UnknownElement(f"unknown aromatic element {sym!r} in {tok!r}")
            return Atom(index, sym.capitalize(), True, False, tok)
        if sym not in ELEMENTS:
            raise UnknownElement(f"unknown element {sym!r} in {tok!r}")
        return Atom(index, sym, False, False, tok)
    if tok in ORGANIC or tok in LENIENT_BARE:
        return Atom(index, tok, False, False, tok)
    if tok in AROMATIC_BARE:
        return Atom(index, tok.upper(), True, False, tok)
    raise UnknownElement(f"unknown element {tok!r}")


def parse(text: str) -> MolGraph:
    """Parse a P-SMILES (or plain SMILES) string into a :class:`MolGraph`.

    Atoms are numbered in order of appearance. Raises a subclass of
    :class:`~polypretrain.errors.SmilesError` on malformed input.
    """
    tokens = _split(text)
    g = MolGraph()
    stack: list[int] = []
    prev: int | None = None
    pending_bond: str | None = None
    rings: dict[str, tuple[int, str | None]] = {}
    last_kind = "start"  # start | atom | bond | open | close | ring
    seen = set()

    def add_bond(i: int, j: int, sym: str | None) -> None:
        key = (min(i, j), max(i, j))
        if i == j or key in seen:
            raise SmilesSyntaxError(f"duplicate or self bond between atoms {i} and {j} in {text!r}")
        seen.add(key)
        g.bonds.append(Bond(i, j, BOND_ORDERS.get(sym, 1.0) if sym else 1.0, sym or ""))

    for tok in tokens:
        if tok == ".":
            raise DisconnectedError(f"dot-disconnected structures are not supported: {text!r}")
        if is_atom_token(tok):
            atom = _atom_from_token(tok, len(g.atoms))
            g.atoms.append(atom)
            if prev is not None:
                add_bond(prev, atom.index, pending_bond)
            elif pending_bond is not None:
                raise SmilesSyntaxError(f"bond symbol with no preceding atom in {text!r}")
            prev, pending_bond, last_kind = atom.index, None, "atom"
        elif tok in BOND_ORDERS:
            if prev is None or pending_bond is not None:
                raise SmilesSyntaxError(f"misplaced bond symbol {tok!r} in {text!r}")
            pending_bond, last_kind = tok, "bond"
        elif tok == "(":
            if prev is None or last_kind in ("open", "bond"):
                raise SmilesSyntaxError(f"misplaced '(' in {text!r}")
            stack.append(prev)
            last_kind = "open"
        elif tok == ")":
            if not stack:
                raise UnbalancedParentheses(f"unmatched ')' in {text!r}")
            if last_kind in ("open", "bond"):
                raise SmilesSyntaxError(f"empty branch or dangling bond in {text!r}")
            prev = stack.pop()
            last_kind = "close"
        elif is_ring_token(tok):
            if prev is None or last_kind not in ("atom", "ring", "bond"):
                raise SmilesSyntaxError(f"misplaced ring closure {tok!r} in {text!r}")
            label = tok.lstrip("%")
            if label in rings:
                other, sym = rings.pop(label)
                if sym and pending_bond and sym != pending_bond:
                    raise SmilesSyntaxError(f"conflicting ring-bond symbols for {tok!r} in {text!r}")
                add_bond(other, prev, sym or pending_bond)
            else:
                rings[label] = (prev, pending_bond)
            pending_bond, last_kind = None, "ring"
        else:
            # '+', '@' and friends are only legal inside brackets
            raise InvalidCharacter(f"unexpected token {tok!r} outside a bracket atom in {text!r}")

    if stack:
        raise UnbalancedParentheses(f"unclosed '(' in {text!r}")
    if pending_bond is not None:
        raise SmilesSyntaxError(f"trailing bond symbol in {text!r}")
    if rings:
        raise DanglingRingBond(f"unclosed ring bond(s) {sorted(rings)} in {text!r}")

    stars = g.stars
    if len(stars) not in (0, 2):
        raise StarCountError(f"expected 0 or 2 '*' atoms, found {len(stars)} in {text!r}")
    for s in stars:
        if g.degree(s) != 1:
            raise StarDegreeError(f"'*' atom {s} has degree {g.degree(s)} in {text!r}")
    return g


def heavy_atom_count(text: str) -> int:
    return parse(text).heavy_atom_count()


def to_smiles(g: MolGraph) -> str:
    """Serialize a graph back to SMILES by depth-first traversal from atom 0."""
    if not g.atoms:
        return ""
    adj: dict[int, list[tuple[int, Bond]]] = {a.index: [] for a in g.atoms}
    for b in g.bonds:
        adj[b.i].append((b.j, b))
        adj[b.j].append((b.i, b))
    for lst in adj.values():
        lst.sort(key=lambda nb: nb[0])

    # first pass: spanning tree and ring-closure edges
    visited: set[int] = set()
    children: dict[int, list[tuple[int, Bond]]] = {i: [] for i in adj}
    closures: dict[int, list[tuple[int, Bond]]] = {i: [] for i in adj}
    tree_edges: set[int] = set()

    def dfs(u: int) -> None:
        visited.add(u)
        for v, b in adj[u]:
            if v not in visited:
                tree_edges.add(id(b))
                children[u].append((v, b))
                dfs(v)
            elif id(b) not in tree_edges and all(b is not c for _, c in closures[u]):
                closures[u].append((v, b))
                closures[v].append((u, b))

    dfs(g.atoms[0].index)
    if len(visited) != len(g.atoms):
        raise DisconnectedError("graph is not connected")

    # second pass: emit, allocating ring labels in traversal order
    labels: dict[int, int] = {}
    free: list[int] = []
    next_label = [1]
    out: list[str] = []

    def ring_label(n: int) -> str:
        return str(n) if n < 10 else f"%{n:02d}"

    def emit(u: int) -> None:
        out.append(g.atoms[u].token)
        for _, b in closures[u]:
            if id(b) in labels:
                n = labels.pop(id(b))
                out.append(ring_label(n))
                free.append(n)
                free.sort()
            else:
                if free:
                    n = free.pop(0)
                else:
                    n = next_label[0]
                    next_label[0] += 1
                labels[id(b)] = n
                out.append(b.symbol + ring_label(n))
        kids = children[u]
        for k, (v, b) in enumerate(kids):
            last = k == len(kids) - 1
            if not last:
                out.append("(")
            out.append(b.symbol)
            emit(v)
            if not last:
                out.append(")")

    emit(g.atoms[0].index)
    return "".join(out)


# ---------------------------------------------------------------------------
# star handling


def _bare_symbol(atom: Atom) -> str:
    if atom.symbol in ORGANIC or atom.symbol in LENIENT_BARE:
        return atom.symbol
    return f"[{atom.symbol}]"


def _check_polymer(text: str, g: MolGraph) -> tuple[int, int]:
    stars = g.stars
    if len(stars) != 2:
        raise StarCountError(f"expected exactly 2 '*' atoms, found {len(stars)} in {text!r}")
    s1, s2 = stars
    if s2 in g.neighbors(s1):
        raise AdjacentStarsError(f"the two '*' atoms are bonded to each other in {text!r}")
    return s1, s2


def transform_stars(text: str, strategy: StarStrategy | str) -> str:
    """Rewrite the wildcard atoms of a P-SMILES string.

    ``keep`` returns the input unchanged. ``remove`` deletes both stars
    together with the bond symbol that attached them and any branch left
    empty. ``substitute`` replaces each star by the element of the atom that
    is bonded to the *other* star, so ``*NCCCCCC(*)=O`` becomes
    ``CNCCCCCC(N)=O``.
    """
    strategy = StarStrategy(strategy)
    if strategy is StarStrategy.KEEP:
        return text
    g = parse(text)
    s1, s2 = _check_polymer(text, g)
    body = _split(text)
    atom_pos = [k for k, t in enumerate(body) if is_atom_token(t)]

    if strategy is StarStrategy.SUBSTITUTE:
        (n1,), (n2,) = g.neighbors(s1), g.neighbors(s2)
        body[atom_pos[s1]] = _bare_symbol(g.atoms[n2])
        body[atom_pos[s2]] = _bare_symbol(g.atoms[n1])
        out = "".join(body)
    else:
        drop: set[int] = set()
        for s in (s1, s2):
            k = atom_pos[s]
            if k + 1 < len(body) and is_ring_token(body[k + 1]):
                raise SmilesSyntaxError(f"cannot remove a '*' that closes a ring in {text!r}")
            drop.add(k)
            if k == 0:
                if len(body) > 1 and body[1] in BOND_ORDERS:
                    drop.add(1)
            elif body[k - 1] in BOND_ORDERS:
                drop.add(k - 1)
        kept = [t for k, t in enumerate(body) if k not in drop]
        out = "".join(kept)
        while "()" in out:
            out = out.replace("()", "")
    parse(out)
    return out


# ---------------------------------------------------------------------------
# vocabulary and masking


class Vocabulary:
    """Bijective token <-> id map with ids 0-4 reserved for special tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, tok: str) -> int:
        return self.stoi.get(tok, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    @property
    def regular_ids(self) -> np.ndarray:
        return np.arange(len(SPECIAL_TOKENS), len(self.itos))

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> Vocabulary:
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the reserved special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        return cls(tokens[len(SPECIAL_TOKENS) :])


def build_vocabulary(corpus: Iterable[str]) -> Vocabulary:
    toks: set[str] = set()
    for s in corpus:
        toks.update(_split(s))
    return Vocabulary(sorted(toks))


def encode_ids(tokens: Sequence[str], vocab: Vocabulary) -> list[int]:
    return [vocab.id(t) for t in tokens]


class MaskBranch(enum.IntEnum):
    MASK = 0
    RANDOM = 1
    KEEP = 2


@dataclass
class MaskedSequence:
    input_ids: list[int]
    positions: list[int]  # the mask set M, ascending
    labels: list[int]  # original ids at ``positions``
    branches: list[int]  # MaskBranch per masked position


def apply_masking(
    ids: Sequence[int],
    vocab: Vocabulary,
    rate: float,
    rng: np.random.Generator,
    split: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> MaskedSequence:
    """BERT-style corruption of an encoded token sequence.

    Every non-special position is selected independently with probability
    ``rate``. Selected tokens become ``[MASK]``, a random regular token or stay
    unchanged according to ``split``.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate must lie in [0, 1], got {rate}")
    if abs(sum(split) - 1.0) > 1e-12 or min(split) < 0:
        raise ValueError(f"replacement split must be a probability vector, got {split}")
    ids = list(ids)
    n_special = len(SPECIAL_TOKENS)
    maskable = np.array([k for k, t in enumerate(ids) if t >= n_special], dtype=int)
    chosen = maskable[rng.random(len(maskable)) < rate]
    out = ids.copy()
    branches = []
    regular = vocab.regular_ids
    p_mask, p_rand = split[0], split[0] + split[1]
    for k in chosen:
        u = rng.random()
        if u < p_mask:
            out[k] = MASK_ID
            branches.append(MaskBranch.MASK)
        elif u < p_rand:
            out[k] = int(rng.choice(regular))
            branches.append(MaskBranch.RANDOM)
        else:
            branches.append(MaskBranch.KEEP)
    return MaskedSequence(
        input_ids=out,
        positions=[int(k) for k in chosen],
        labels=[ids[k] for k in chosen],
        branches=[int(b) for b in branches],
    )
