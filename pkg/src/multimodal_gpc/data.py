"""Functions for loading, normalizing, splitting and simulating multi-modality data."""

import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from sklearn.model_selection import StratifiedKFold

from .errors import (BadK, DataError, NonFinite, ParseError, RowMismatch, TooFewRows,
                     UnknownLabel, ZeroNormRow)
from .utils import STREAM_GENERATE, create_class_mapping, load_json, rng_stream, save_json

logger = logging.getLogger(__name__)

# Columns whose sample variance falls below this are treated as constant
ZERO_VARIANCE_TOL = 1e-12


@dataclass(frozen=True)
class ModalityMatrix:
    """One data source: n subjects by d_s features."""
    values: np.ndarray
    modality_id: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] < 1:
            raise DataError(f"Modality {self.modality_id!r} must be a 2-d matrix with at least one feature")
        bad = np.argwhere(~np.isfinite(values))
        if len(bad):
            raise NonFinite(f"modality {self.modality_id!r} row {bad[0][0]} column {bad[0][1]}")
        object.__setattr__(self, "values", values)

    @property
    def n_subjects(self):
        return self.values.shape[0]

    @property
    def n_features(self):
        return self.values.shape[1]

    def take(self, rows):
        return ModalityMatrix(self.values[rows], self.modality_id)


@dataclass(frozen=True)
class LabelSet:
    """1-of-m coded class labels.

    An empty class is logged as a warning unless warn_empty is False.
    """
    onehot: np.ndarray
    class_names: Tuple[str, ...] = ()
    warn_empty: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        onehot = np.asarray(self.onehot)
        if onehot.ndim != 2 or onehot.shape[1] < 2:
            raise DataError("Labels must be an n x m one-hot matrix with m >= 2")
        if not np.all((onehot == 0) | (onehot == 1)) or not np.all(onehot.sum(axis=1) == 1):
            raise DataError("Every label row must contain exactly one active class")
        object.__setattr__(self, "onehot", onehot.astype(int))
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(f"class_{c}" for c in range(onehot.shape[1])))
        empty = [name for name, count in zip(self.class_names, self.counts) if count == 0]
        if empty and self.warn_empty:
            logger.warning(f"Classes without members: {empty}")

    @classmethod
    def from_indices(cls, indices, n_classes, class_names=(), warn_empty=True):
        indices = np.asarray(indices, dtype=int)
        onehot = np.zeros((len(indices), n_classes), dtype=int)
        onehot[np.arange(len(indices)), indices] = 1
        return cls(onehot, tuple(class_names), warn_empty)

    @property
    def indices(self):
        return self.onehot.argmax(axis=1)

    @property
    def n_subjects(self):
        return self.onehot.shape[0]

    @property
    def n_classes(self):
        return self.onehot.shape[1]

    @property
    def counts(self):
        return self.onehot.sum(axis=0)

    @property
    def frequencies(self):
        return self.counts / self.n_subjects

    def take(self, rows):
        onehot = self.onehot[rows]
        return LabelSet(onehot, self.class_names, self.warn_empty)


@dataclass(frozen=True)
class FoldAssignment:
    """Fold index in [0, k) for every subject."""
    fold_index: np.ndarray
    k: int

    def test_rows(self, fold):
        return np.flatnonzero(self.fold_index == fold)

    def train_rows(self, fold):
        return np.flatnonzero(self.fold_index != fold)


@dataclass(frozen=True)
class NormalizationStats:
    """Column statistics of row-normalized features, fitted on training rows."""
    mean: np.ndarray
    std: np.ndarray

    @property
    def constant_columns(self):
        return self.std <= ZERO_VARIANCE_TOL


@dataclass
class Dataset:
    """Row-aligned modalities and labels."""
    modalities: List[ModalityMatrix]
    labels: LabelSet
    subject_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.subject_ids:
            self.subject_ids = [f"S{i:04d}" for i in range(self.labels.n_subjects)]
        for modality in self.modalities:
            if modality.n_subjects != self.labels.n_subjects:
                raise RowMismatch(
                    f"Modality {modality.modality_id!r} has {modality.n_subjects} rows, "
                    f"labels have {self.labels.n_subjects}")

    @property
    def modality_ids(self):
        return [modality.modality_id for modality in self.modalities]

    def subset(self, rows):
        rows = np.asarray(rows)
        return Dataset(
            [modality.take(rows) for modality in self.modalities],
            self.labels.take(rows),
            [self.subject_ids[i] for i in rows])

    def select_modalities(self, modality_ids):
        by_id = {modality.modality_id: modality for modality in self.modalities}
        missing = [m for m in modality_ids if m not in by_id]
        if missing:
            raise DataError(f"Unknown modalities {missing}; available: {self.modality_ids}")
        return Dataset([by_id[m] for m in modality_ids], self.labels, list(self.subject_ids))


@dataclass
class SyntheticDataset(Dataset):
    """Dataset drawn from the model's own prior, with its ground truth."""
    theta: Optional[np.ndarray] = None
    f: Optional[np.ndarray] = None
    alpha: Optional[float] = None


def _row_normalize(values):
    norms = np.linalg.norm(values, axis=1)
    zero = np.flatnonzero(norms <= 0)
    if len(zero):
        raise ZeroNormRow(int(zero[0]))
    return values / norms[:, None]


def fit_normalization(X, rows=None):
    """Fit column statistics for the standardization stage.

    Rows are first scaled to unit Euclidean norm; mean and sample standard
    deviation of every column are then computed on `rows` only.

    Args:
        X (ModalityMatrix): Raw features
        rows (array-like, optional): Rows the statistics are fitted on
            (training rows under cross-validation). Defaults to all rows.

    Returns:
        NormalizationStats: Per-column mean and standard deviation
    """
    unit = _row_normalize(X.values)
    if rows is not None:
        unit = unit[np.asarray(rows)]
    if unit.shape[0] < 2:
        raise TooFewRows(unit.shape[0])
    return NormalizationStats(mean=unit.mean(axis=0), std=unit.std(axis=0, ddof=1))


def apply_normalization(X, stats):
    """Row-normalize X and standardize columns with previously fitted statistics.

    Columns that were constant on the fitting rows are set to zero.
    """
    unit = _row_normalize(X.values)
    constant = stats.constant_columns
    scale = np.where(constant, 1.0, stats.std)
    standardized = (unit - stats.mean) / scale
    standardized[:, constant] = 0.0
    return ModalityMatrix(standardized, X.modality_id)


def normalize_features(X, rows=None):
    """Divide each row by its Euclidean norm, then standardize each column.

    Args:
        X (ModalityMatrix): Raw features
        rows (array-like, optional): Rows used to fit the column statistics;
            all rows are transformed. Defaults to all rows.

    Returns:
        ModalityMatrix: Normalized features
    """
    return apply_normalization(X, fit_normalization(X, rows))


def make_folds(labels, k, seed):
    """Randomly partition subjects into k stratified folds.

    Per-fold class counts differ from the proportional share by at most
    one subject per class.

    Args:
        labels (LabelSet): Class labels
        k (int): Number of folds
        seed (int): Shuffling seed

    Returns:
        FoldAssignment: Fold index per subject
    """
    if k < 2:
        raise BadK(k)
    if k > labels.n_subjects:
        raise DataError(f"Cannot split {labels.n_subjects} subjects into {k} folds")

    small = [name for name, count in zip(labels.class_names, labels.counts) if count < k]
    if small:
        logger.warning(f"Classes {small} have fewer than {k} members; some folds will lack them")

    y = labels.indices
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    fold_index = np.empty(labels.n_subjects, dtype=int)
    try:
        for fold, (_, test) in enumerate(splitter.split(np.zeros(len(y)), y)):
            fold_index[test] = fold
    except ValueError as e:
        raise DataError(f"Could not stratify labels into {k} folds: {e}")

    return FoldAssignment(fold_index=fold_index, k=k)


def generate_synthetic(n, m, q, d, seed, prior=None, signal_scale=1.0):
    """Simulate a dataset from the model's prior.

    Features are standard normal and normalized like real data; weights are
    drawn from the weight prior, latent functions from N(0, K_c) and labels
    from the softmax probabilities.

    Args:
        n (int): Number of subjects
        m (int): Number of classes
        q (int): Number of modalities
        d (int or list): Features per modality
        seed (int): Top-level seed
        prior (PriorConfig, optional): Weight prior. Defaults to Gamma(2, 2).
        signal_scale (float): Multiplier on the latent functions; 0 gives
            uniform class probabilities.

    Returns:
        SyntheticDataset: Modalities, labels and the true theta, f (and alpha)
    """
    from .config import PriorConfig
    from .kernels import build_gram_set, class_covariance
    from .model import sample_prior_hyper, softmax_probs

    dims = list(d) if isinstance(d, (list, tuple)) else [int(d)] * q
    if n < 2 or m < 2 or q < 1 or len(dims) != q or min(dims) < 1:
        raise DataError(f"Invalid synthetic sizes n={n}, m={m}, q={q}, d={d}")
    prior = prior or PriorConfig()
    rng = rng_stream(seed, STREAM_GENERATE)

    raw = [ModalityMatrix(rng.standard_normal((n, dims[s])), f"source{s}") for s in range(q)]
    modalities = [normalize_features(X) for X in raw]
    grams = build_gram_set(modalities)

    hyper = sample_prior_hyper(prior, m, q, rng)
    f = np.empty(m * n)
    for c in range(m):
        cov = class_covariance(hyper.theta[c], grams)
        f[c * n:(c + 1) * n] = signal_scale * (cov.L @ rng.standard_normal(n))

    probs = softmax_probs(f, m)
    u = rng.random(n)
    indices = (np.cumsum(probs, axis=1) > u[:, None]).argmax(axis=1)
    labels = LabelSet.from_indices(indices, m)

    logger.info(f"Generated synthetic dataset: n={n}, m={m}, q={q}, class counts {labels.counts.tolist()}")
    return SyntheticDataset(raw, labels, [f"S{i:04d}" for i in range(n)],
                            theta=hyper.theta, f=f, alpha=hyper.alpha)


def _read_table(path, id_column):
    try:
        df = pd.read_csv(path, sep=",", encoding="utf-8", dtype={id_column: str},
                         float_precision="round_trip")
    except FileNotFoundError:
        raise FileNotFoundError(f"Data file not found: {path}")
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ParseError(path, int(match.group(1)) if match else None, str(e))
    if id_column not in df.columns:
        raise ParseError(path, 1, f"missing subject id column {id_column!r}")
    if df[id_column].duplicated().any():
        raise RowMismatch(f"Duplicate subject ids in {path}")
    return df


def _parse_features(df, path, id_column):
    features = df.drop(columns=[id_column])
    if features.shape[1] == 0:
        raise ParseError(path, 1, "no feature columns")
    numeric = features.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        # +2: header row and 1-based line numbers
        raise ParseError(path, int(row) + 2, f"non-numeric value in column {features.columns[col]!r}")
    values = numeric.to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        row, col = np.argwhere(~np.isfinite(values))[0]
        raise NonFinite(f"{path} line {int(row) + 2} column {features.columns[col]!r}")
    return values


def load_dataset(manifest_path):
    """Load a multi-modality dataset described by a JSON manifest.

    The manifest lists the label file and one CSV file per modality:

        {"labels": {"path": "labels.csv", "id_column": "subject_id",
                    "label_column": "label", "classes": ["A", "B"]},
         "modalities": [{"modality_id": "gm", "path": "gm.csv"}, ...]}

    Relative paths are resolved against the manifest's directory. Every
    modality is row-aligned to the label file by subject id. `classes` is
    optional; without it classes are numbered in order of first appearance.

    Args:
        manifest_path (str or Path): Path to the manifest

    Returns:
        Dataset: Raw (unnormalized) modalities, labels and subject ids
    """
    manifest_path = Path(manifest_path)
    manifest = load_json(manifest_path)
    base_dir = manifest_path.parent

    label_info = manifest.get("labels")
    modality_info = manifest.get("modalities")
    if not label_info or not modality_info:
        raise DataError(f"Manifest {manifest_path} must list 'labels' and 'modalities'")

    id_column = label_info.get("id_column", "subject_id")
    label_column = label_info.get("label_column", "label")
    label_path = base_dir / label_info["path"]
    label_df = _read_table(label_path, id_column)
    if label_column not in label_df.columns:
        raise ParseError(label_path, 1, f"missing label column {label_column!r}")
    label_values = label_df[label_column].astype(str).tolist()
    subject_ids = label_df[id_column].tolist()

    if label_info.get("classes"):
        class_map = {name: idx for idx, name in enumerate(label_info["classes"])}
        for value in label_values:
            if value not in class_map:
                raise UnknownLabel(value, class_map)
    else:
        class_map = create_class_mapping(label_values)
    labels = LabelSet.from_indices([class_map[v] for v in label_values], len(class_map),
                                   class_names=list(class_map))

    modalities = []
    for entry in modality_info:
        path = base_dir / entry["path"]
        entry_id_column = entry.get("id_column", id_column)
        df = _read_table(path, entry_id_column)
        if len(df) != len(subject_ids) or set(df[entry_id_column]) != set(subject_ids):
            raise RowMismatch(
                f"Modality {entry['modality_id']!r} has {len(df)} rows whose subject ids do not "
                f"match the {len(subject_ids)} labelled subjects")
        df = df.set_index(entry_id_column).loc[subject_ids].reset_index()
        values = _parse_features(df, path, entry_id_column)
        modalities.append(ModalityMatrix(values, entry["modality_id"]))

    logger.info(f"Loaded {labels.n_subjects} subjects, {labels.n_classes} classes and "
                f"{len(modalities)} modalities from {manifest_path}")
    return Dataset(modalities, labels, subject_ids)


def write_dataset(out_dir, dataset, truth=None):
    """Write a dataset as CSV files plus a manifest that load_dataset reads back.

    Args:
        out_dir (str or Path): Output directory
        dataset (Dataset): Data to write
        truth (dict, optional): Ground truth written to truth.json

    Returns:
        Path: Path of the written manifest
    """
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)

    names = [dataset.labels.class_names[i] for i in dataset.labels.indices]
    pd.DataFrame({"subject_id": dataset.subject_ids, "label": names}).to_csv(
        out_dir / "labels.csv", index=False)

    entries = []
    for modality in dataset.modalities:
        columns = [f"{modality.modality_id}_{j}" for j in range(modality.n_features)]
        df = pd.DataFrame(modality.values, columns=columns)
        df.insert(0, "subject_id", dataset.subject_ids)
        filename = f"{modality.modality_id}.csv"
        df.to_csv(out_dir / filename, index=False, float_format="%.17g")
        entries.append({"modality_id": modality.modality_id, "path": filename})

    manifest = {
        "labels": {"path": "labels.csv", "id_column": "subject_id", "label_column": "label",
                   "classes": list(dataset.labels.class_names)},
        "modalities": entries,
    }
    manifest_path = out_dir / "manifest.json"
    save_json(manifest, manifest_path)
    if truth is not None:
        save_json(truth, out_dir / "truth.json")

    logger.info(f"Dataset written to: {os.path.abspath(out_dir)}")
    logger.info(f"- Manifest: {manifest_path}")
    return manifest_path
