"""Metric tests against brute-force oracles, evaluation determinism, latent
extraction, and 2-D embedding."""

from __future__ import annotations

import dataclasses
import itertools

import numpy as np
import pytest
import torch

from trivol.backbone import init_model
from trivol.checkpoint import ModelWeights
from trivol.data import VolumeStore
from trivol.errors import EvaluationError, LabelError
from trivol.eval import (LatentTable, balanced_accuracy, confusion, embed_latents_2d, evaluate,
                         extract_latents, macro_f1, per_class_tpr)


# brute-force oracles: per-sample loops, no confusion matrix
def bacc_brute(y_true, y_pred, k=3):
    tprs = []
    for c in range(k):
        true_c = [i for i, y in enumerate(y_true) if y == c]
        if not true_c:
            continue
        hit = sum(1 for i in true_c if y_pred[i] == c)
        tprs.append(hit / len(true_c))
    return sum(tprs) / len(tprs)


def f1_brute(y_true, y_pred, k=3):
    f1s = []
    for c in range(k):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(f1s) / k


class TestConfusion:
    def test_perfect_predictions_diagonal(self):
        cm = confusion([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert np.all(cm.counts == np.diag([1, 2, 1]))

    def test_all_predicted_class0(self):
        cm = confusion([0, 1, 2], [0, 0, 0], 3)
        assert cm.counts[:, 0].tolist() == [1, 1, 1]
        assert cm.counts[:, 1:].sum() == 0

    def test_hand_case(self):
        cm = confusion([0, 0, 1, 2], [0, 1, 1, 0], 3)
        assert cm.counts.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 0]]

    def test_total_conservation(self):
        rng = np.random.default_rng(0)
        t = rng.integers(0, 3, size=57)
        p = rng.integers(0, 3, size=57)
        assert confusion(t, p, 3).total == 57

    def test_length_mismatch(self):
        with pytest.raises(EvaluationError):
            confusion([0, 1], [0], 3)

    def test_out_of_range(self):
        with pytest.raises(LabelError):
            confusion([0, 3], [0, 1], 3)


class TestBalancedAccuracy:
    def test_diagonal_is_one(self):
        cm = confusion([0, 1, 2], [0, 1, 2], 3)
        assert balanced_accuracy(cm) == 1.0

    def test_constructed_half(self):
        # TPRs (0.5, 0.5, 0.5)
        t = [0, 0, 1, 1, 2, 2]
        p = [0, 1, 1, 2, 2, 0]
        assert abs(balanced_accuracy(confusion(t, p, 3)) - 0.5) < 1e-12

    def test_hand_matrix(self):
        from trivol.eval import ConfusionMatrix

        cm = ConfusionMatrix(counts=np.array([[8, 2, 0], [1, 7, 2], [0, 3, 7]]),
                             class_names=("CN", "AD", "FTD"))
        assert abs(balanced_accuracy(cm) - 0.7333333333333334) < 1e-12

    def test_equals_mean_of_tprs(self):
        rng = np.random.default_rng(1)
        t = rng.integers(0, 3, size=60)
        p = rng.integers(0, 3, size=60)
        cm = confusion(t, p, 3)
        assert abs(balanced_accuracy(cm) - np.nanmean(per_class_tpr(cm))) < 1e-12

    def test_zero_support_class_excluded_with_warning(self):
        cm = confusion([0, 0, 1], [0, 1, 1], 3)  # class 2 never true
        with pytest.warns(UserWarning, match="zero true samples"):
            value = balanced_accuracy(cm)
        assert abs(value - (0.5 + 1.0) / 2) < 1e-12

    def test_class_size_invariance(self):
        # duplicating every class-1 sample (with its prediction) leaves BAcc unchanged
        t = [0, 0, 1, 1, 2, 2, 2]
        p = [0, 1, 1, 0, 2, 0, 2]
        base = balanced_accuracy(confusion(t, p, 3))
        dup_t = t + [y for y in t if y == 1]
        dup_p = p + [p[i] for i, y in enumerate(t) if y == 1]
        dup = balanced_accuracy(confusion(dup_t, dup_p, 3))
        assert abs(base - dup) < 1e-12


class TestMacroF1:
    def test_diagonal_is_one(self):
        assert macro_f1(confusion([0, 1, 2], [0, 1, 2], 3)) == 1.0

    def test_never_predicted_class_contributes_zero(self):
        value = macro_f1(confusion([0, 0, 1, 2], [0, 0, 1, 1], 3))
        assert abs(value - f1_brute([0, 0, 1, 2], [0, 0, 1, 1])) < 1e-12

    def test_hand_matrix_matches_brute_force(self):
        t = [0] * 10 + [1] * 10 + [2] * 10
        p = [0] * 8 + [1] * 2 + [0] * 1 + [1] * 7 + [2] * 2 + [1] * 3 + [2] * 7
        assert abs(macro_f1(confusion(t, p, 3)) - f1_brute(t, p)) < 1e-12
        assert abs(macro_f1(confusion(t, p, 3)) - 0.7384370015948963) < 1e-12


def test_metric_oracle_over_enumeration():
    """All 3^6 diagonal cases plus a random subsample of truth/prediction pairs,
    exact equality against the per-sample oracles."""
    import warnings

    labelings = list(itertools.product(range(3), repeat=6))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # zero-support warnings are expected here
        for t in labelings:
            cm = confusion(t, t, 3)
            present = len(set(t))
            assert balanced_accuracy(cm) == 1.0
            assert macro_f1(cm) == present / 3
        rng = np.random.default_rng(42)
        for _ in range(500):
            t = tuple(rng.integers(0, 3, size=6))
            p = tuple(rng.integers(0, 3, size=6))
            cm = confusion(t, p, 3)
            assert balanced_accuracy(cm) == bacc_brute(t, p)
            assert macro_f1(cm) == f1_brute(t, p)


class TestEvaluate:
    def test_constant_logits_give_chance_on_balanced_split(self, tiny_config, tiny_data, tiny_store):
        extractor, head = init_model(tiny_config, "cls", seed=0)
        with torch.no_grad():
            head.net[-1].weight.zero_()
            head.net[-1].bias.zero_()
            head.net[-1].bias[0] = 1.0  # constant prediction: class 0
        m = tiny_data.manifests["T"]
        labels = m.labels()
        idx = np.concatenate([np.nonzero(labels == c)[0][:6] for c in range(3)])
        report = evaluate(extractor, head, m, tiny_store, indices=idx)
        assert abs(report.balanced_accuracy - 1 / 3) < 1e-9

    def test_deterministic(self, tiny_config, tiny_data, tiny_store):
        extractor, head = init_model(tiny_config, "cls", seed=1)
        m = tiny_data.manifests["T"]
        a = evaluate(extractor, head, m, tiny_store)
        b = evaluate(extractor, head, m, tiny_store)
        assert a == b

    def test_empty_split_rejected(self, tiny_config, tiny_data, tiny_store):
        extractor, head = init_model(tiny_config, "cls", seed=0)
        with pytest.raises(EvaluationError):
            evaluate(extractor, head, tiny_data.manifests["T"], tiny_store, indices=np.array([], dtype=int))

    def test_report_fields(self, tiny_config, tiny_data, tiny_store):
        extractor, head = init_model(tiny_config, "cls", seed=2)
        report = evaluate(extractor, head, tiny_data.manifests["T"], tiny_store, fold_id=3,
                          dataset_tag="T")
        assert report.fold_id == 3 and report.dataset_tag == "T"
        assert len(report.tpr) == 3
        assert abs(report.balanced_accuracy - np.nanmean(report.tpr)) < 1e-12
        assert np.asarray(report.confusion).sum() == report.n_samples


class TestLatents:
    def test_extract_latents_coverage_and_determinism(self, tiny_config, tiny_data, tiny_store):
        extractor, head = init_model(tiny_config, "cls", seed=0)
        weights = ModelWeights.from_model(extractor, head, "psi_final", tiny_config, 0)
        manifests = {r: tiny_data.manifests[r] for r in ("U", "D", "T")}
        a = extract_latents(weights, tiny_config, manifests, tiny_store, max_unlabeled=10, seed=0)
        b = extract_latents(weights, tiny_config, manifests, tiny_store, max_unlabeled=10, seed=0)
        expected_rows = 10 + len(manifests["D"]) + len(manifests["T"])
        assert len(a.ids) == expected_rows
        assert a.latents.shape == (expected_rows, tiny_config.latent_dim)
        np.testing.assert_array_equal(a.latents, b.latents)
        assert a.ids == b.ids

    def test_incompatible_checkpoint_rejected(self, tiny_config, tiny_data, tiny_store):
        from trivol.errors import IncompatibilityError

        extractor, head = init_model(tiny_config, "cls", seed=0)
        weights = ModelWeights.from_model(extractor, head, "psi_final", tiny_config, 0)
        other = dataclasses.replace(tiny_config, latent_dim=tiny_config.latent_dim * 2)
        with pytest.raises(IncompatibilityError):
            extract_latents(weights, other, {"T": tiny_data.manifests["T"]}, tiny_store)


class TestEmbedding2D:
    @staticmethod
    def gaussian_table(n_per=40, seed=0):
        rng = np.random.default_rng(seed)
        centers = np.array([[0.0] * 16, [30.0] * 16, [-30.0] + [15.0] * 15])
        lat, roles, labels, ids = [], [], [], []
        for c in range(3):
            lat.append(centers[c] + rng.normal(size=(n_per, 16)))
            roles += ["T"] * n_per
            labels += [c] * n_per
            ids += [f"g{c}_{i}" for i in range(n_per)]
        return LatentTable(ids=ids, roles=roles, labels=labels,
                           latents=np.concatenate(lat), stage="psi_final")

    def test_separated_gaussians_silhouette(self, tmp_path):
        from sklearn.metrics import silhouette_score

        table = self.gaussian_table()
        coords = embed_latents_2d(table, out_png=tmp_path / "p.png", out_csv=tmp_path / "c.csv",
                                  seed=0)
        score = silhouette_score(coords, np.array(table.labels))
        assert score > 0.5
        assert (tmp_path / "p.png").exists()

    def test_deterministic_given_seed(self):
        table = self.gaussian_table()
        a = embed_latents_2d(table, seed=3)
        b = embed_latents_2d(table, seed=3)
        np.testing.assert_array_equal(a, b)

    def test_csv_row_count(self, tmp_path):
        table = self.gaussian_table(n_per=12)
        embed_latents_2d(table, out_csv=tmp_path / "c.csv", seed=0, method="pca")
        lines = (tmp_path / "c.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + len(table.ids)

    def test_pca_fallback_available(self):
        coords = embed_latents_2d(self.gaussian_table(), method="pca", seed=0)
        assert coords.shape == (120, 2)

    def test_too_few_rows(self):
        table = self.gaussian_table(n_per=2)
        table = LatentTable(ids=table.ids[:6], roles=table.roles[:6], labels=table.labels[:6],
                            latents=table.latents[:6], stage="x")
        with pytest.raises(EvaluationError):
            embed_latents_2d(table, seed=0)

    def test_unknown_method(self):
        with pytest.raises(EvaluationError):
            embed_latents_2d(self.gaussian_table(), method="sammon", seed=0)
