import json
import math

import numpy as np
import pytest
import torch

from polypretrain import errors
from polypretrain import finetune as ft
from polypretrain.finetune import (
    EvalReport,
    FinetuneConfig,
    ModalityChoice,
    Normalizer,
    PropertyDataset,
    build_model,
    fit,
    fold_indices,
    load_dataset,
    prepare_samples,
    predict_property,
    r_squared,
    representation,
    rmse,
    run_cross_validation,
    save_dataset,
)
from polypretrain.pretrain import init_model


@pytest.fixture
def pretrained(tiny_seq_cfg, tiny_struct_cfg):
    return init_model(tiny_seq_cfg, tiny_struct_cfg, 6, seed=0)


@pytest.fixture
def dataset(tiny_corpus):
    return PropertyDataset([(s, float(v)) for s, v in zip(tiny_corpus, (1.0, 4.0, 2.5, 7.0, 3.0, 5.5))])


def quick(**kw):
    return FinetuneConfig(**{"folds": 2, "epochs": 3, "batch_size": 2, "hidden": 4, **kw})


class TestMetrics:
    def test_rmse(self):
        assert math.isclose(rmse([0, 0], [5, 0]), math.sqrt(12.5))
        assert rmse([1.5, 2.0], [1.5, 2.0]) == 0.0

    def test_r_squared(self):
        assert math.isclose(r_squared([1, 2, 3, 3], [1, 2, 3, 4]), 1 - 1 / 5)
        assert r_squared([1.0, 2.0], [1.0, 2.0]) == 1.0

    def test_mean_prediction_scores_zero(self):
        t = np.array([1.0, 3.0, 8.0])
        assert abs(r_squared(np.full(3, t.mean()), t)) < 1e-15

    def test_half_explained(self):
        assert math.isclose(r_squared([0.5, 1.5], [0.0, 2.0]), 0.75)

    def test_constant_targets(self):
        with pytest.raises(errors.ConstantTargets):
            r_squared([1, 2], [3, 3])

    def test_length_mismatch(self):
        with pytest.raises(errors.ShapeMismatch):
            rmse([1, 2], [1])


class TestFolds:
    def test_partition(self):
        folds = fold_indices(100, 5, seed=0)
        assert [len(f) for f in folds] == [20] * 5
        allidx = np.concatenate(folds)
        assert sorted(allidx.tolist()) == list(range(100))

    def test_uneven(self):
        assert sorted(len(f) for f in fold_indices(7, 3, seed=1)) == [2, 2, 3]

    def test_seeded(self):
        assert all(np.array_equal(a, b) for a, b in zip(fold_indices(30, 5, 3), fold_indices(30, 5, 3)))

    def test_too_few(self):
        with pytest.raises(errors.TooFewRecords):
            fold_indices(3, 5, 0)


class TestNormalizer:
    def test_round_trip(self):
        n = Normalizer.fit(np.array([2.0, 4.0, 9.0]))
        y = np.array([1.0, 5.0])
        assert np.allclose(n.inverse(n.forward(y)), y, atol=1e-14)
        assert abs(n.forward(np.array([2.0, 4.0, 9.0])).mean()) < 1e-15

    def test_constant(self):
        n = Normalizer.fit(np.array([3.0, 3.0]))
        assert (n.mean, n.std) == (3.0, 1.0)


class TestData:
    def test_csv_round_trip(self, tmp_path, dataset):
        save_dataset(dataset, tmp_path / "d.csv")
        back = load_dataset(tmp_path / "d.csv")
        assert back.records == dataset.records and back.name == "d"

    def test_missing_value(self, tmp_path):
        (tmp_path / "d.csv").write_text("psmiles,value\n*CC*,\n")
        with pytest.raises(errors.MalformedRecord):
            load_dataset(tmp_path / "d.csv")
        assert load_dataset(tmp_path / "d.csv", require_values=False).records == [("*CC*", None)]

    def test_bad_number(self, tmp_path):
        (tmp_path / "d.csv").write_text("psmiles,value\n*CC*,abc\n")
        with pytest.raises(errors.MalformedRecord):
            load_dataset(tmp_path / "d.csv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "d.csv").write_text("smiles,y\n*CC*,1\n")
        with pytest.raises(errors.MalformedRecord):
            load_dataset(tmp_path / "d.csv")

    def test_value_range(self):
        with pytest.raises(errors.MalformedRecord):
            PropertyDataset([("*CC*", 12.0)], value_range=(0.0, 10.0))

    def test_non_finite(self):
        with pytest.raises(errors.MalformedRecord):
            PropertyDataset([("*CC*", float("nan"))])

    def test_one_d_needs_no_conformer(self, tiny_corpus, tiny_vocab):
        samples = prepare_samples(tiny_corpus, tiny_vocab, "1d", conformers=[])
        assert all(s.conformer is None for s in samples)

    def test_missing_conformer(self, tiny_corpus, tiny_vocab):
        with pytest.raises(errors.MissingConformer):
            prepare_samples(tiny_corpus, tiny_vocab, "3d", conformers=[])


class TestModel:
    def test_one_d_reads_no_structure_parameters(self, tiny_corpus, tiny_vocab, tiny_seq_cfg, tiny_struct_cfg, pretrained):
        model = build_model(pretrained, "1d", tiny_seq_cfg, tiny_struct_cfg, hidden=4, seed=0)
        assert not any(n.startswith(("struct.", "psi.", "mlm.", "proj")) for n, _ in model.params.items())
        samples = prepare_samples(tiny_corpus, tiny_vocab, "1d")
        with model.params.track_access() as seen:
            model.predict(samples)
        assert seen and not any(n.startswith("struct.") for n in seen)

    def test_both_concatenates(self, tiny_corpus, tiny_vocab, tiny_seq_cfg, tiny_struct_cfg, pretrained):
        samples = prepare_samples(tiny_corpus, tiny_vocab, "both")
        x = representation(samples, pretrained, "both", tiny_seq_cfg, tiny_struct_cfg)
        assert x.shape == (len(tiny_corpus), tiny_seq_cfg.dim + tiny_struct_cfg.atom_dim)
        x1 = representation(samples, pretrained, "1d", tiny_seq_cfg, tiny_struct_cfg)
        x3 = representation(samples, pretrained, "3d", tiny_seq_cfg, tiny_struct_cfg)
        assert torch.equal(x, torch.cat([x1, x3], -1))
        assert ModalityChoice.BOTH.input_dim(tiny_seq_cfg, tiny_struct_cfg) == x.shape[1]

    def test_zero_head_predicts_training_mean(self, tiny_corpus, tiny_vocab, tiny_seq_cfg, tiny_struct_cfg, pretrained):
        model = build_model(pretrained, "3d", tiny_seq_cfg, tiny_struct_cfg, hidden=4, seed=0)
        model.normalizer = Normalizer.fit(np.array([2.0, 6.0]))
        model.params.assign("head.w2", torch.zeros_like(model.params["head.w2"]))
        samples = prepare_samples(tiny_corpus, tiny_vocab, "3d")
        assert np.allclose(model.predict(samples), 4.0, atol=1e-15)
        assert predict_property(samples[0], model) == pytest.approx(4.0, abs=1e-15)

    def test_encoder_copied_not_shared(self, tiny_corpus, tiny_vocab, tiny_seq_cfg, tiny_struct_cfg, pretrained, dataset):
        before = pretrained.clone()
        model = build_model(pretrained, "both", tiny_seq_cfg, tiny_struct_cfg, hidden=4, seed=0)
        samples = prepare_samples(dataset.psmiles, tiny_vocab, "both")
        fit(model, samples, dataset.targets(), quick(), np.random.default_rng(0))
        assert pretrained.equal(before)
        assert not torch.equal(model.params["seq.l0.wq"], pretrained["seq.l0.wq"])

    def test_frozen_encoder(self, tiny_vocab, tiny_seq_cfg, tiny_struct_cfg, pretrained, dataset):
        model = build_model(pretrained, "1d", tiny_seq_cfg, tiny_struct_cfg, hidden=4, seed=0, freeze_encoder=True)
        samples = prepare_samples(dataset.psmiles, tiny_vocab, "1d")
        head = model.params["head.w1"].detach().clone()
        fit(model, samples, dataset.targets(), quick(), np.random.default_rng(0))
        assert torch.equal(model.params["seq.l0.wq"], pretrained["seq.l0.wq"])
        assert not torch.equal(model.params["head.w1"], head)

    def test_fit_reduces_loss(self, tiny_vocab, tiny_seq_cfg, tiny_struct_cfg, pretrained, dataset):
        model = build_model(pretrained, "1d", tiny_seq_cfg, tiny_struct_cfg, hidden=8, seed=0)
        samples = prepare_samples(dataset.psmiles, tiny_vocab, "1d")
        hist = fit(model, samples, dataset.targets(), quick(epochs=60, batch_size=6, lr=1e-2), np.random.default_rng(0))
        assert hist[-1] < 0.5 * hist[0]

    def test_head_input_check(self, pretrained, tiny_seq_cfg, tiny_struct_cfg):
        model = build_model(pretrained, "1d", tiny_seq_cfg, tiny_struct_cfg, hidden=4, seed=0)
        with pytest.raises(errors.ShapeMismatch):
            ft.apply_head(torch.zeros(2, tiny_seq_cfg.dim + 1, dtype=torch.float64), model.params)


class TestCrossValidation:
    def test_deterministic(self, dataset, pretrained, tiny_vocab, tiny_seq_cfg, tiny_struct_cfg):
        a = run_cross_validation(dataset, pretrained, tiny_vocab, tiny_seq_cfg, tiny_struct_cfg, quick())
        b = run_cross_validation(dataset, pretrained, tiny_vocab, tiny_seq_cfg, tiny_struct_cfg, quick())
        assert a == b and a.fold_sizes == [3, 3]

    def test_normalizer_sees_only_training_targets(self, monkeypatch, dataset, pretrained, tiny_vocab, tiny_seq_cfg, tiny_struct_cfg):
        seen = []
        orig = Normalizer.fit.__func__

        def spy(cls, y):
            seen.append(sorted(np.asarray(y).tolist()))
            return orig(cls, y)

        monkeypatch.setattr(Normalizer, "fit", classmethod(spy))
        cfg = quick(folds=3)
        run_cross_validation(dataset, pretrained, tiny_vocab, tiny_seq_cfg, tiny_struct_cfg, cfg)
        y = dataset.targets()
        for test, got in zip(fold_indices(len(dataset), 3, cfg.seed), seen):
            train = np.setdiff1d(np.arange(len(dataset)), test)
            assert got == sorted(y[train].tolist())

    def test_too_few_records(self, dataset, pretrained, tiny_vocab, tiny_seq_cfg, tiny_struct_cfg):
        with pytest.raises(errors.TooFewRecords):
            run_cross_validation(dataset, pretrained, tiny_vocab, tiny_seq_cfg, tiny_struct_cfg, quick(folds=7))

    def test_report(self):
        r = EvalReport("1d", [1.0, 2.0, 3.0], [0.5, 0.6, 0.7], [2, 2, 2])
        assert r.rmse == (2.0, 1.0)
        d = json.loads(r.to_json())
        assert d["r2_mean"] == pytest.approx(0.6) and d["modality"] == "1d"
        assert "mean" in r.to_table()

    @pytest.mark.parametrize("kw", [{"modality": "2d"}, {"folds": 1}, {"lr": 0.0}])
    def test_config_validation(self, kw):
        with pytest.raises(errors.ConfigError):
            FinetuneConfig(**kw)
