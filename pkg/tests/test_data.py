import json
import logging

import pytest
import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from multimodal_gpc.data import (Dataset, LabelSet, ModalityMatrix, apply_normalization, fit_normalization,
                                 generate_synthetic, load_dataset, make_folds, normalize_features,
                                 write_dataset)
from multimodal_gpc.errors import (BadK, DataError, NonFinite, ParseError, RowMismatch, TooFewRows,
                                   UnknownLabel, ZeroNormRow)


def write_manifest(directory, label_rows, feature_rows, classes=None):
    """Write labels.csv, gm.csv and manifest.json from lists of CSV lines."""
    (directory / "labels.csv").write_text("\n".join(["subject_id,label"] + label_rows) + "\n")
    (directory / "gm.csv").write_text("\n".join(["subject_id,x0,x1"] + feature_rows) + "\n")
    labels = {"path": "labels.csv"}
    if classes:
        labels["classes"] = classes
    manifest = {"labels": labels, "modalities": [{"modality_id": "gm", "path": "gm.csv"}]}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


class TestNormalization:
    def test_columns_standardized(self, rng):
        X = ModalityMatrix(rng.standard_normal((20, 5)) + 2.0, "gm")
        Z = normalize_features(X).values
        assert_allclose(Z.mean(axis=0), 0.0, atol=1e-12)
        assert_allclose(Z.std(axis=0, ddof=1), 1.0, rtol=1e-12)

    def test_rows_scaled_before_standardizing(self, rng):
        X = rng.standard_normal((10, 3))
        scaled = X * rng.uniform(0.5, 5.0, size=(10, 1))
        assert_allclose(normalize_features(ModalityMatrix(X, "a")).values,
                        normalize_features(ModalityMatrix(scaled, "a")).values, atol=1e-12)

    def test_constant_column_becomes_zero(self):
        X = np.array([[0.0, 1.0, 2.0], [0.0, 1.0, 3.0], [0.0, 1.0, 5.0]])
        Z = normalize_features(ModalityMatrix(X, "a")).values
        assert np.all(Z[:, 0] == 0.0)

    def test_zero_norm_row(self):
        X = ModalityMatrix(np.array([[1.0, 2.0], [0.0, 0.0], [3.0, 1.0]]), "a")
        with pytest.raises(ZeroNormRow) as excinfo:
            normalize_features(X)
        assert excinfo.value.row == 1

    def test_too_few_rows(self, rng):
        X = ModalityMatrix(rng.standard_normal((5, 2)), "a")
        with pytest.raises(TooFewRows):
            fit_normalization(X, rows=[3])

    def test_statistics_from_training_rows_only(self, rng):
        X = ModalityMatrix(rng.standard_normal((12, 4)), "a")
        train = np.arange(8)
        stats = fit_normalization(X, rows=train)
        Z = apply_normalization(X, stats).values
        assert_allclose(Z[train].mean(axis=0), 0.0, atol=1e-12)
        # Held-out rows are transformed, not refitted
        assert not np.allclose(Z[8:].mean(axis=0), 0.0)

    def test_non_finite_rejected(self):
        with pytest.raises(NonFinite):
            ModalityMatrix(np.array([[1.0, np.nan], [2.0, 1.0]]), "a")


class TestFolds:
    def test_stratified_counts(self):
        labels = LabelSet.from_indices([0] * 12 + [1] * 9 + [2] * 9, 3)
        folds = make_folds(labels, 3, seed=4)
        for fold in range(3):
            counts = labels.take(folds.test_rows(fold)).counts
            assert np.all(np.abs(counts - labels.counts / 3) <= 1)
        assert sorted(np.concatenate([folds.test_rows(f) for f in range(3)]).tolist()) == list(range(30))

    def test_reproducible(self):
        labels = LabelSet.from_indices(np.arange(20) % 2, 2)
        assert_array_equal(make_folds(labels, 4, 9).fold_index, make_folds(labels, 4, 9).fold_index)

    def test_train_and_test_disjoint(self):
        labels = LabelSet.from_indices(np.arange(16) % 4, 4)
        folds = make_folds(labels, 4, 0)
        for fold in range(4):
            assert not set(folds.train_rows(fold)) & set(folds.test_rows(fold))

    def test_bad_k(self):
        labels = LabelSet.from_indices(np.arange(10) % 2, 2)
        with pytest.raises(BadK):
            make_folds(labels, 1, 0)


class TestDataset:
    def test_row_mismatch(self, rng):
        with pytest.raises(RowMismatch):
            Dataset([ModalityMatrix(rng.standard_normal((4, 2)), "a")], LabelSet.from_indices([0, 1, 0], 2))

    def test_select_modalities(self, small_dataset):
        assert small_dataset.select_modalities(["wm"]).modality_ids == ["wm"]
        with pytest.raises(DataError):
            small_dataset.select_modalities(["dti"])

    def test_subset(self, small_dataset):
        sub = small_dataset.subset([0, 5, 7])
        assert sub.subject_ids == ["subj00", "subj05", "subj07"]
        assert_array_equal(sub.modalities[0].values, small_dataset.modalities[0].values[[0, 5, 7]])
        assert_array_equal(sub.labels.indices, [0, 2, 1])

    def test_empty_class_is_warned(self, caplog):
        with caplog.at_level(logging.WARNING, logger="multimodal_gpc.data"):
            labels = LabelSet.from_indices([0, 0, 1], 3, class_names=("A", "B", "C"))
        assert "Classes without members: ['C']" in caplog.text
        caplog.clear()
        with caplog.at_level(logging.WARNING, logger="multimodal_gpc.data"):
            labels.take([0, 1])
            LabelSet.from_indices([0, 0, 1], 3, warn_empty=False)
        assert "Classes without members: ['B', 'C']" in caplog.text
        assert len(caplog.records) == 1


class TestLoading:
    def test_write_then_load(self, tmp_path, small_dataset):
        manifest = write_dataset(tmp_path, small_dataset)
        loaded = load_dataset(manifest)
        assert loaded.subject_ids == small_dataset.subject_ids
        assert loaded.labels.class_names == ("A", "B", "C")
        assert_array_equal(loaded.labels.indices, small_dataset.labels.indices)
        for ours, theirs in zip(loaded.modalities, small_dataset.modalities):
            assert ours.modality_id == theirs.modality_id
            assert_array_equal(ours.values, theirs.values)

    def test_rows_aligned_by_subject_id(self, tmp_path):
        path = write_manifest(tmp_path, ["s1,A", "s2,B"], ["s2,3.0,4.0", "s1,1.0,2.0"])
        dataset = load_dataset(path)
        assert_array_equal(dataset.modalities[0].values, [[1.0, 2.0], [3.0, 4.0]])

    def test_parse_error_reports_line(self, tmp_path):
        path = write_manifest(tmp_path, ["s1,A", "s2,B", "s3,A"], ["s1,1.0,2.0", "s2,abc,1.0", "s3,0.5,0.5"])
        with pytest.raises(ParseError) as excinfo:
            load_dataset(path)
        assert excinfo.value.line == 3

    def test_unknown_label(self, tmp_path):
        path = write_manifest(tmp_path, ["s1,A", "s2,C"], ["s1,1.0,2.0", "s2,1.0,1.0"], classes=["A", "B"])
        with pytest.raises(UnknownLabel):
            load_dataset(path)

    def test_missing_subject(self, tmp_path):
        path = write_manifest(tmp_path, ["s1,A", "s2,B"], ["s1,1.0,2.0"])
        with pytest.raises(RowMismatch):
            load_dataset(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope.json")


class TestSynthetic:
    def test_reproducible(self):
        a = generate_synthetic(15, 3, 2, 4, seed=11)
        b = generate_synthetic(15, 3, 2, 4, seed=11)
        assert_array_equal(a.labels.indices, b.labels.indices)
        assert_array_equal(a.f, b.f)
        assert_array_equal(a.modalities[1].values, b.modalities[1].values)

    def test_shapes(self):
        data = generate_synthetic(10, 4, 3, [2, 3, 5], seed=0)
        assert data.theta.shape == (4, 3)
        assert data.f.shape == (40,)
        assert [m.n_features for m in data.modalities] == [2, 3, 5]
        assert data.labels.n_classes == 4

    def test_dirichlet_truth_has_concentration(self, dirichlet_prior):
        data = generate_synthetic(10, 2, 3, 4, seed=2, prior=dirichlet_prior)
        assert data.alpha > 0
        assert_allclose(np.exp(data.theta).sum(axis=1), 1.0)

    def test_invalid_sizes(self):
        with pytest.raises(DataError):
            generate_synthetic(10, 1, 2, 3, seed=0)
