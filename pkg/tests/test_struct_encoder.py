import math

import numpy as np
import pytest
import torch

from polypretrain import errors
from polypretrain.conformer import add_virtual_atom, chain_embed, random_rotation
from polypretrain.numerics import ParamStore, grad_check, smooth_l1, tensor
from polypretrain.struct_encoder import (
    StructConfig,
    atom_to_pair_layer,
    batch_from_conformers,
    encode_structure,
    gaussian,
    gaussian_pair_embedding,
    init_struct_params,
    reconstruct_coordinates,
)

CFG = StructConfig(atom_dim=8, pair_dim=2, layers=2, ff_dim=12)


def make(cfg=CFG, seed=0):
    return init_struct_params(cfg, torch.Generator().manual_seed(seed))


def np_ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + 1e-5) * g + b


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


def np_layer(xa, xp, P, p):
    """Reference atom-to-pair layer for one conformer, looping over heads and atoms."""
    N, da = xa.shape
    H = xp.shape[-1]
    dh = da // H
    q, k, v = xa @ P[p + "wq"], xa @ P[p + "wk"], xa @ P[p + "wv"]
    out = np.zeros_like(xa)
    scores = np.zeros((N, N, H))
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(N):
            s = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) + xp[i, j, h] for j in range(N)])
            scores[i, :, h] = s
            a = np.exp(s - s.max())
            a /= a.sum()
            out[i, sl] = a @ v[:, sl]
    xa = out @ P[p + "wo"] + xa
    f = np_ln(xa, P[p + "ln.g"], P[p + "ln.b"])
    return xa + np_gelu(f @ P[p + "w1"] + P[p + "b1"]) @ P[p + "w2"] + P[p + "b2"], scores


def virtualized(s="CC(C)OC"):
    return add_virtual_atom(chain_embed(s))


class TestGaussian:
    def test_peak(self):
        assert math.isclose(gaussian(tensor(0.0), tensor(1.0)).item(), 1 / math.sqrt(2 * math.pi))

    def test_pair_embedding_by_hand(self):
        cfg = StructConfig(atom_dim=2, pair_dim=1, layers=1, ff_dim=2)
        P = make(cfg)
        P.assign("struct.mu", tensor([1.0]))
        P.assign("struct.sigma", tensor([2.0]))
        types = torch.tensor([[0, 6]])
        coords = tensor([[[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]])
        xp = gaussian_pair_embedding(types, coords, P)[0, :, :, 0]
        g = lambda x: math.exp(-x * x / 8) / (2 * math.sqrt(2 * math.pi))
        assert math.isclose(xp[0, 1].item(), g(5.0 - 1.0), abs_tol=1e-15)
        assert math.isclose(xp[0, 0].item(), g(-1.0), abs_tol=1e-15)

    def test_type_pair_dependence(self):
        cfg = StructConfig(atom_dim=2, pair_dim=1, layers=1, ff_dim=2)
        P = make(cfg)
        v = P["struct.pair_v"].detach().clone()
        v[0 * cfg.n_types + 6] = 2.0
        P.assign("struct.pair_v", v)
        xp = gaussian_pair_embedding(torch.tensor([[0, 6]]), tensor([[[0.0, 0, 0], [1.0, 0, 0]]]), P)[0, :, :, 0]
        assert xp[0, 1].item() != xp[1, 0].item()


class TestLayer:
    def test_hand_weights_two_atoms(self):
        cfg = StructConfig(atom_dim=2, pair_dim=1, layers=1, ff_dim=2)
        P = make(cfg)
        hand = {
            "struct.l0.wq": [[1.0, 0.0], [0.0, 1.0]],
            "struct.l0.wk": [[0.5, -1.0], [1.0, 0.5]],
            "struct.l0.wv": [[2.0, 0.0], [1.0, 1.0]],
            "struct.l0.wo": [[1.0, 0.0], [0.0, -1.0]],
            "struct.l0.w1": [[1.0, 0.0], [0.0, 1.0]],
            "struct.l0.w2": [[0.5, 0.5], [-0.5, 0.5]],
        }
        for n, w in hand.items():
            P.assign(n, tensor(w))
        xa = np.array([[0.3, -0.2], [1.0, 0.5]])
        xp = np.array([[[0.1], [0.7]], [[-0.4], [0.2]]])
        got_a, got_p = atom_to_pair_layer(tensor(xa[None]), tensor(xp[None]), P, "struct.l0.")
        want_a, want_p = np_layer(xa, xp, {n: t.detach().numpy() for n, t in P.items()}, "struct.l0.")
        assert np.allclose(got_a[0].detach().numpy(), want_a, atol=1e-14)
        assert np.allclose(got_p[0].detach().numpy(), want_p, atol=1e-14)
        # one head of width 2, plus the incoming pair value
        q = xa @ np.array(hand["struct.l0.wq"])
        k = xa @ np.array(hand["struct.l0.wk"])
        assert math.isclose(got_p[0, 0, 1, 0].item(), q[0] @ k[1] / math.sqrt(2) + 0.7, abs_tol=1e-14)

    def test_random_against_reference(self):
        P = make(seed=5)
        v = virtualized()
        b = batch_from_conformers([v])
        xa = P["struct.atom_emb"][b.types]
        xp = gaussian_pair_embedding(b.types, b.coords, P)
        got_a, got_p = atom_to_pair_layer(xa, xp, P, "struct.l1.")
        ref = {n: t.detach().numpy() for n, t in P.items()}
        want_a, want_p = np_layer(xa[0].detach().numpy(), xp[0].detach().numpy(), ref, "struct.l1.")
        assert np.allclose(got_a[0].detach().numpy(), want_a, atol=1e-12)
        assert np.allclose(got_p[0].detach().numpy(), want_p, atol=1e-12)

    def test_zero_query_key_gives_uniform_attention(self):
        cfg = StructConfig(atom_dim=4, pair_dim=1, layers=1, ff_dim=4)
        P = make(cfg)
        for w in ("wq", "wk"):
            P.assign("struct.l0." + w, torch.zeros(4, 4, dtype=torch.float64))
        P.assign("struct.l0.w2", torch.zeros(4, 4, dtype=torch.float64))
        P.assign("struct.l0.wo", torch.eye(4, dtype=torch.float64))
        xa = torch.randn(1, 3, 4, dtype=torch.float64)
        xp = torch.zeros(1, 3, 3, 1, dtype=torch.float64)
        out, scores = atom_to_pair_layer(xa, xp, P, "struct.l0.")
        v = xa[0] @ P["struct.l0.wv"]
        assert torch.allclose(out[0], xa[0] + v.mean(0), atol=1e-14)
        assert scores.abs().max().item() == 0.0

    def test_shape_mismatch(self):
        P = make()
        with pytest.raises(errors.ShapeMismatch):
            atom_to_pair_layer(torch.zeros(1, 3, 8, dtype=torch.float64), torch.zeros(1, 3, 2, 2, dtype=torch.float64), P, "struct.l0.")

    def test_pair_output_is_the_score_tensor(self):
        P = make()
        out = encode_structure(batch_from_conformers([virtualized()]), P, CFG)
        assert torch.equal(out.pair, out.pair_layers[-1])
        assert out.pair.shape == (1, 6, 6, CFG.pair_dim)


class TestEncoder:
    def test_rigid_motion_invariance(self):
        P = make()
        v = virtualized("CCOC(=O)C")
        rng = np.random.default_rng(0)
        moved = v.coords @ random_rotation(rng).T + rng.normal(scale=5, size=3)
        a = encode_structure(batch_from_conformers([v]), P, CFG).x3d
        b = encode_structure(batch_from_conformers([v], [moved]), P, CFG).x3d
        assert (a - b).abs().max().item() <= 1e-9

    def test_permutation_equivariance(self):
        P = make()
        v = virtualized("CCOC(=O)N")
        perm = np.r_[0, 1 + np.random.default_rng(1).permutation(v.n_atoms - 1)]
        b1 = batch_from_conformers([v])
        b2 = type(b1)(b1.types[:, perm], b1.coords[:, perm], b1.mask[:, perm])
        o1, o2 = encode_structure(b1, P, CFG), encode_structure(b2, P, CFG)
        assert torch.allclose(o1.atoms[:, perm], o2.atoms, atol=1e-10)
        assert torch.allclose(o1.x3d, o2.x3d, atol=1e-10)

    def test_padding_invariance(self):
        P = make()
        small, big = virtualized("CCO"), virtualized("CCOCCOCC")
        solo = encode_structure(batch_from_conformers([small]), P, CFG)
        both = encode_structure(batch_from_conformers([small, big]), P, CFG)
        n = small.n_atoms
        assert (solo.atoms[0] - both.atoms[0, :n]).abs().max().item() <= 1e-10

    def test_config_divisibility(self):
        with pytest.raises(errors.ConfigError):
            StructConfig(atom_dim=10, pair_dim=4)


class TestDecoder:
    def test_zero_psi_is_identity(self):
        P = make()
        P.assign("psi.w2", torch.zeros_like(P["psi.w2"]))
        v = virtualized()
        b = batch_from_conformers([v])
        out = encode_structure(b, P, CFG)
        assert torch.equal(reconstruct_coordinates(b.coords, out.pair, out.pair0, P, b.mask), b.coords)

    def test_two_atoms_constant_weight(self):
        P = make()
        P.assign("psi.w2", torch.zeros_like(P["psi.w2"]))
        P.assign("psi.b2", tensor([0.6]))
        coords = tensor([[[0.0, 0.0, 0.0], [2.0, 1.0, 0.0]]])
        pair = torch.zeros(1, 2, 2, CFG.pair_dim, dtype=torch.float64)
        got = reconstruct_coordinates(coords, pair, pair, P)[0]
        assert torch.allclose(got[0], tensor([-0.6, -0.3, 0.0]), atol=1e-15)
        assert torch.allclose(got[1], tensor([2.6, 1.3, 0.0]), atol=1e-15)

    def test_rotation_equivariance(self):
        P = make()
        P.assign("psi.w2", torch.randn(CFG.pair_dim, 1, dtype=torch.float64, generator=torch.Generator().manual_seed(1)))
        v = virtualized("CCOCC")
        R = random_rotation(np.random.default_rng(4))
        outs = []
        for c in (v.coords, v.coords @ R.T):
            b = batch_from_conformers([v], [c])
            o = encode_structure(b, P, CFG)
            outs.append(reconstruct_coordinates(b.coords, o.pair, o.pair0, P, b.mask)[0].detach().numpy())
        assert np.allclose(outs[0] @ R.T, outs[1], atol=1e-9)

    def test_gradients_through_encoder_and_decoder(self):
        cfg = StructConfig(atom_dim=4, pair_dim=2, layers=1, ff_dim=4)
        P = make(cfg)
        P.assign("psi.w2", torch.randn(2, 1, dtype=torch.float64, generator=torch.Generator().manual_seed(2)))
        v = virtualized("CCO")
        b = batch_from_conformers([v])
        target = b.coords + 0.3

        def loss():
            o = encode_structure(b, P, cfg)
            return smooth_l1(reconstruct_coordinates(b.coords, o.pair, o.pair0, P, b.mask), target, b.real_mask)

        rep = grad_check(loss, P, n_samples=80, seed=0)
        assert rep.passed, rep.max_rel_err


def test_init_is_float64_and_deterministic():
    a, b = make(seed=2), make(seed=2)
    assert a.equal(b) and isinstance(a, ParamStore)
    assert all(t.dtype == torch.float64 for _, t in a.items())
