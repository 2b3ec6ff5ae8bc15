from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polypretrain import errors
from polypretrain.psmiles import (
    CLS,
    MASK_ID,
    PAD,
    SEP,
    SPECIAL_TOKENS,
    UNK_ID,
    MaskBranch,
    Vocabulary,
    apply_masking,
    build_vocabulary,
    detokenize,
    encode_ids,
    heavy_atom_count,
    parse,
    to_smiles,
    tokenize,
    transform_stars,
)
from polypretrain.synth import random_psmiles, random_smiles_for_roundtrip

polymers = st.integers(0, 2**32 - 1).map(lambda s: random_psmiles(np.random.default_rng(s)))
any_smiles = st.integers(0, 2**32 - 1).map(lambda s: random_smiles_for_roundtrip(np.random.default_rng(s)))


class TestParse:
    def test_single_atom(self):
        g = parse("C")
        assert len(g.atoms) == 1 and g.bonds == []

    def test_linear_polymer(self):
        g = parse("*CC*")
        assert len(g.atoms) == 4
        assert len(g.bonds) == 3
        assert g.stars == [0, 3]

    def test_star_neighbors(self):
        g = parse("*CC(*)F")
        s1, s2 = g.stars
        assert g.neighbors(s1) == [1]
        assert g.neighbors(s2) == [2]

    def test_ring_and_aromatic(self):
        g = parse("c1ccccc1")
        assert len(g.bonds) == 6
        assert all(a.aromatic and a.symbol == "C" for a in g.atoms)

    def test_percent_ring_closure(self):
        g = parse("C%12CC%12")
        assert len(g.bonds) == 3

    def test_bracket_atom(self):
        g = parse("[NH3+]C")
        assert g.atoms[0].symbol == "N"
        assert g.atoms[0].token == "[NH3+]"

    @pytest.mark.parametrize(
        "text, exc",
        [
            ("C(C", errors.UnbalancedParentheses),
            ("CC)", errors.UnbalancedParentheses),
            ("C1CC", errors.DanglingRingBond),
            ("CXC", errors.UnknownElement),
            ("[Xx]C", errors.UnknownElement),
            ("C*(C)C*", errors.StarDegreeError),
            ("*CC", errors.StarCountError),
            ("*C*C*", errors.StarCountError),
            ("CC.CC", errors.DisconnectedError),
            ("C[CH", errors.UnterminatedBracketAtom),
            ("C$C", errors.InvalidCharacter),
            ("", errors.EmptyInput),
            ("C==C", errors.SmilesSyntaxError),
        ],
    )
    def test_errors(self, text, exc):
        with pytest.raises(exc):
            parse(text)

    def test_errors_are_data_errors(self):
        with pytest.raises(errors.DataError):
            parse("C(C")

    @settings(max_examples=200, deadline=None)
    @given(any_smiles)
    def test_reserialization_preserves_atoms_and_bonds(self, s):
        g = parse(s)
        h = parse(to_smiles(g))
        assert Counter(a.token for a in g.atoms) == Counter(a.token for a in h.atoms)
        assert len(g.bonds) == len(h.bonds)


class TestStars:
    @pytest.mark.parametrize(
        "src, want",
        [
            ("*NCCCCCC(*)=O", "CNCCCCCC(N)=O"),
            ("*Oc1ccc(CC(*)=O)cc1", "COc1ccc(CC(O)=O)cc1"),
            ("*CC(*)F", "CCC(C)F"),
        ],
    )
    def test_substitute_examples(self, src, want):
        assert transform_stars(src, "substitute") == want

    def test_substitute_aromatic_neighbor_is_uppercase(self):
        assert transform_stars("*c1ccc(cc1)C*", "substitute") == "Cc1ccc(cc1)CC"

    def test_substitute_bracketed_element(self):
        assert transform_stars("*[Ge](C)(C)O*", "substitute") == "O[Ge](C)(C)O[Ge]"

    def test_keep_is_identity(self):
        assert transform_stars("*CC*", "keep") == "*CC*"

    def test_remove(self):
        assert transform_stars("*CC(*)F", "remove") == "CCF"
        assert transform_stars("*C(=O)CC-*", "remove") == "C(=O)CC"

    def test_wrong_star_count(self):
        with pytest.raises(errors.StarCountError):
            transform_stars("CCC", "substitute")

    def test_adjacent_stars(self):
        with pytest.raises(errors.AdjacentStarsError):
            transform_stars("**", "substitute")

    @settings(max_examples=200, deadline=None)
    @given(polymers)
    def test_substitute_properties(self, s):
        out = transform_stars(s, "substitute")
        assert "*" not in out
        assert heavy_atom_count(out) == heavy_atom_count(s) + 2
        parse(out)

    @settings(max_examples=200, deadline=None)
    @given(polymers)
    def test_remove_properties(self, s):
        out = transform_stars(s, "remove")
        assert "*" not in out
        assert heavy_atom_count(out) == heavy_atom_count(s)


class TestTokenize:
    def test_documented_example(self):
        assert tokenize("*CC(*)F") == [CLS, "*", "C", "C", "(", "*", ")", "F", SEP]

    def test_two_letter_element(self):
        assert tokenize("CCl") == [CLS, "C", "Cl", SEP]

    def test_bracket_and_percent_tokens(self):
        assert tokenize("[Si](C)C%10") == [CLS, "[Si]", "(", "C", ")", "C", "%10", SEP]

    def test_empty(self):
        with pytest.raises(errors.EmptyInput):
            tokenize("")

    def test_unterminated_bracket(self):
        with pytest.raises(errors.UnterminatedBracketAtom):
            tokenize("C[NH4")

    def test_detokenize(self):
        assert detokenize(tokenize("*CC(*)F")) == "*CC(*)F"
        assert detokenize(tokenize("CCl")) == "CCl"

    def test_detokenize_empty_body(self):
        with pytest.raises(errors.EmptyBody):
            detokenize([CLS, SEP])

    @settings(max_examples=300, deadline=None)
    @given(any_smiles)
    def test_round_trip(self, s):
        toks = tokenize(s)
        assert toks[0] == CLS and toks[-1] == SEP
        assert not set(toks[1:-1]) & set(SPECIAL_TOKENS)
        assert detokenize(toks) == s


class TestVocabulary:
    def test_build(self):
        v = build_vocabulary(["*CC*"])
        assert v.to_list() == [*SPECIAL_TOKENS, "*", "C"]

    def test_reserved_ids_stable(self):
        for corpus in (["C"], ["*Oc1ccc(CC(*)=O)cc1", "CCl"]):
            v = build_vocabulary(corpus)
            assert [v.id(t) for t in SPECIAL_TOKENS] == [0, 1, 2, 3, 4]

    def test_unknown_maps_to_unk(self):
        v = build_vocabulary(["*CC*"])
        assert encode_ids(["Br"], v) == [UNK_ID]

    def test_list_round_trip(self):
        v = build_vocabulary(["*CC(*)F", "CCl"])
        assert Vocabulary.from_list(v.to_list()) == v

    def test_from_list_requires_reserved_prefix(self):
        with pytest.raises(ValueError):
            Vocabulary.from_list(["C", PAD])


class TestMasking:
    def setup_method(self):
        self.vocab = build_vocabulary(["*CC(*)F", "*Oc1ccc(CC(*)=O)cc1"])
        self.ids = encode_ids(tokenize("*Oc1ccc(CC(*)=O)cc1"), self.vocab)

    def test_zero_rate(self, rng):
        m = apply_masking(self.ids, self.vocab, 0.0, rng)
        assert m.positions == [] and m.labels == []
        assert m.input_ids == self.ids

    def test_full_rate_forced_mask(self, rng):
        m = apply_masking(self.ids, self.vocab, 1.0, rng, split=(1.0, 0.0, 0.0))
        assert m.positions == list(range(1, len(self.ids) - 1))
        assert all(m.input_ids[p] == MASK_ID for p in m.positions)
        assert set(m.branches) == {MaskBranch.MASK}

    def test_labels_are_originals(self, rng):
        m = apply_masking(self.ids, self.vocab, 0.5, rng)
        assert m.labels == [self.ids[p] for p in m.positions]
        unmasked = set(range(len(self.ids))) - set(m.positions)
        assert all(m.input_ids[k] == self.ids[k] for k in unmasked)

    def test_keep_branch_leaves_token(self, rng):
        m = apply_masking(self.ids, self.vocab, 1.0, rng, split=(0.0, 0.0, 1.0))
        assert m.input_ids == self.ids and len(m.positions) == len(self.ids) - 2

    def test_random_branch_draws_regular_tokens(self, rng):
        m = apply_masking(self.ids, self.vocab, 1.0, rng, split=(0.0, 1.0, 0.0))
        assert all(m.input_ids[p] >= len(SPECIAL_TOKENS) for p in m.positions)

    def test_bad_rate(self, rng):
        with pytest.raises(ValueError):
            apply_masking(self.ids, self.vocab, 1.5, rng)

    @settings(max_examples=100, deadline=None)
    @given(polymers, st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
    def test_never_selects_special_tokens(self, s, rate, seed):
        ids = encode_ids(tokenize(s), self.vocab) + [0, 0]
        m = apply_masking(ids, self.vocab, rate, np.random.default_rng(seed))
        assert all(ids[p] >= len(SPECIAL_TOKENS) for p in m.positions)
        assert len(m.labels) == len(m.positions) == len(m.branches)
