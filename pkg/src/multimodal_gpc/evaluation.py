"""Cross-validated scoring of predictive distributions and weight posterior summaries."""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.metrics import confusion_matrix
from tqdm import tqdm

from .config import PriorConfig
from .data import apply_normalization, fit_normalization, make_folds
from .diagnostics import summarize
from .errors import EmptySet, EmptyTrace, GPCError
from .kernels import build_gram_set
from .model import ModelContext
from .prediction import REJECT, PredictiveDistribution, decide, predict_subjects
from .samplers import run_chains

logger = logging.getLogger(__name__)

CURVE_THRESHOLDS = np.round(np.linspace(0.0, 1.0, 101), 2)
CHANCE_ALPHA = 0.05
MIN_EXPECTED_COUNT = 5


def _check_decisions(decisions, labels):
    decisions = np.asarray(decisions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if len(decisions) != len(labels):
        raise ValueError(f"{len(decisions)} decisions for {len(labels)} labels")
    if len(decisions) == 0:
        raise EmptySet("No decisions to score")
    if np.any(decisions == REJECT):
        raise ValueError("Rejected decisions must be filtered out before scoring")
    return decisions, labels


def per_class_recall(decisions, labels, n_classes=None):
    """Recall of every class; NaN for classes without evaluated members."""
    decisions, labels = _check_decisions(decisions, labels)
    n_classes = n_classes or int(max(decisions.max(), labels.max()) + 1)
    cm = confusion_matrix(labels, decisions, labels=np.arange(n_classes))
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(cm) / support, np.nan)


def balanced_accuracy(decisions, labels, n_classes=None):
    """Mean per-class recall over the classes present in `labels`."""
    return float(np.nanmean(per_class_recall(decisions, labels, n_classes)))


def plain_accuracy(decisions, labels):
    decisions, labels = _check_decisions(decisions, labels)
    return float(np.mean(decisions == labels))


def brier(probs, labels):
    """Multi-class Brier score, mean over subjects of sum_c (pi*_c - y*_c)^2.

    Args:
        probs (numpy.ndarray): n x m predicted probabilities
        labels (array-like): Class index per subject
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if probs.shape[0] == 0:
        raise EmptySet("No predictions to score")
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


@dataclass
class ChanceTest:
    """Chi-squared test of the number of correct decisions against chance."""
    statistic: float
    p_value: float
    n_decisions: int
    n_correct: int
    expected_correct: float
    low_power: bool

    @property
    def above_chance(self):
        return self.p_value < CHANCE_ALPHA and self.n_correct > self.expected_correct

    def to_dict(self):
        return {"statistic": self.statistic, "p_value": self.p_value, "n_decisions": self.n_decisions,
                "n_correct": self.n_correct, "expected_correct": self.expected_correct,
                "low_power": self.low_power, "above_chance": self.above_chance}


def chance_test(decisions, labels, n_classes=None):
    """Goodness of fit of (correct, incorrect) counts against chance agreement.

    The chance rate is sum_c p_c q_c with p the label frequencies and q the
    decision frequencies, i.e. the agreement expected if decisions were
    independent of labels. One degree of freedom. Rejected decisions are
    dropped first.
    """
    decisions = np.asarray(decisions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    kept = decisions != REJECT
    decisions, labels = _check_decisions(decisions[kept], labels[kept])
    n_classes = n_classes or int(max(decisions.max(), labels.max()) + 1)

    n = len(decisions)
    p = np.bincount(labels, minlength=n_classes) / n
    q = np.bincount(decisions, minlength=n_classes) / n
    rate = float(p @ q)
    correct = int(np.sum(decisions == labels))
    expected = np.array([n * rate, n * (1.0 - rate)])
    low_power = bool(expected.min() < MIN_EXPECTED_COUNT)
    if low_power:
        logger.warning(f"Chance test on {n} decisions has expected counts {expected.round(2).tolist()} below "
                       f"{MIN_EXPECTED_COUNT}; low power")

    if rate <= 0.0 or rate >= 1.0:
        # Chance agreement is certain either way; the observed count cannot differ
        return ChanceTest(0.0, 1.0, n, correct, n * rate, low_power)
    statistic, p_value = stats.chisquare([correct, n - correct], expected)
    return ChanceTest(float(statistic), float(p_value), n, correct, n * rate, low_power)


def accuracy_reject_curve(probs, labels, thresholds=CURVE_THRESHOLDS):
    """Rejection rate and accuracy of retained subjects at each threshold.

    A subject is rejected when its largest class probability does not
    exceed the threshold. Accuracy is NaN when every subject is rejected.

    Returns:
        pandas.DataFrame: threshold, rejection_rate, balanced_accuracy,
            accuracy, n_retained
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_classes = probs.shape[1]
    confidence = probs.max(axis=1)
    best = probs.argmax(axis=1)

    rows = []
    for t in thresholds:
        retained = confidence > t
        row = {"threshold": float(t), "rejection_rate": 1.0 - retained.mean(),
               "balanced_accuracy": np.nan, "accuracy": np.nan, "n_retained": int(retained.sum())}
        if retained.any():
            row["balanced_accuracy"] = balanced_accuracy(best[retained], labels[retained], n_classes)
            row["accuracy"] = plain_accuracy(best[retained], labels[retained])
        rows.append(row)
    return pd.DataFrame(rows)


@dataclass
class WeightSummary:
    """Posterior weight quartiles per (class, source) and the concentration summary."""
    table: pd.DataFrame
    alpha: Optional[Dict[str, float]] = None

    def to_dict(self):
        return {"weights": self.table.to_dict(orient="records"), "alpha": self.alpha}


def weight_posterior_summary(traces, class_names=None, modality_ids=None, alpha_rate=1.0):
    """Summaries of the weights exp(theta_cs), pooled over chains.

    For every (class, source): quartiles, mean, the posterior probability
    that the weight exceeds the mean of the class's other weights, and
    whether the lower quartile lies above the other sources' posterior means.
    With sampled concentrations the posterior IQR and mean of alpha are
    reported next to the Exp(alpha_rate) prior IQR.
    """
    traces = [trace for trace in traces if trace.n_samples > 0]
    if not traces:
        raise EmptyTrace("No samples to summarize")
    weights = np.concatenate([np.exp(trace.theta) for trace in traces])
    _, m, q = weights.shape
    class_names = class_names or [f"class_{c}" for c in range(m)]
    modality_ids = modality_ids or [f"source{s}" for s in range(q)]
    means = weights.mean(axis=0)

    rows = []
    for c in range(m):
        for s in range(q):
            w = weights[:, c, s]
            q25, q50, q75 = np.percentile(w, [25, 50, 75])
            row = {"class": class_names[c], "source": modality_ids[s], "q25": q25, "median": q50,
                   "q75": q75, "mean": w.mean(), "p_above_others": np.nan,
                   "q25_above_others_mean": None}
            if q > 1:
                others = np.delete(weights[:, c, :], s, axis=1).mean(axis=1)
                row["p_above_others"] = float(np.mean(w > others))
                row["q25_above_others_mean"] = bool(q25 > np.delete(means[c], s).mean())
            rows.append(row)

    alpha = None
    if traces[0].alpha is not None:
        draws = np.concatenate([trace.alpha for trace in traces])
        a25, a75 = np.percentile(draws, [25, 75])
        alpha = {"posterior_q25": a25, "posterior_q75": a75, "posterior_mean": draws.mean(),
                 "prior_q25": np.log(4.0 / 3.0) / alpha_rate, "prior_q75": np.log(4.0) / alpha_rate}
    return WeightSummary(pd.DataFrame(rows), alpha)


@dataclass
class FoldResult:
    fold: int
    n_test: int
    balanced_accuracy: float
    accuracy: float
    brier: float
    converged: bool


@dataclass
class ConfigurationResult:
    """Scores of one model configuration (weighted sum, unweighted sum, one source)."""
    name: str
    sources: List[str]
    folds: List[FoldResult] = field(default_factory=list)
    labels: Optional[np.ndarray] = None
    prediction: Optional[PredictiveDistribution] = None
    metrics: Dict[str, object] = field(default_factory=dict)
    chance: Optional[ChanceTest] = None
    curve: Optional[pd.DataFrame] = None
    weights: Optional[WeightSummary] = None
    failed: bool = False
    error: Optional[str] = None

    def fold_range(self, metric):
        values = [getattr(fold, metric) for fold in self.folds]
        return (min(values), max(values)) if values else (np.nan, np.nan)

    def to_dict(self):
        return {
            "name": self.name,
            "sources": self.sources,
            "metrics": self.metrics,
            "folds": [vars(fold) for fold in self.folds],
            "balanced_accuracy_range": self.fold_range("balanced_accuracy"),
            "brier_range": self.fold_range("brier"),
            "chance_test": self.chance.to_dict() if self.chance else None,
            "weights": self.weights.to_dict() if self.weights else None,
            "failed": self.failed,
            "error": self.error,
        }


@dataclass
class EvaluationReport:
    configurations: List[ConfigurationResult]
    class_names: List[str]
    k_folds: int
    reject_threshold: float
    sampler: str

    @property
    def complete(self):
        return not any(result.failed for result in self.configurations)

    def to_dict(self):
        return {"k_folds": self.k_folds, "reject_threshold": self.reject_threshold,
                "sampler": self.sampler, "class_names": self.class_names,
                "complete": self.complete,
                "configurations": [result.to_dict() for result in self.configurations]}

    def table_text(self):
        """Accuracy (min, max) and Brier score (min, max) per configuration."""
        header = f"{'Configuration':<32} {'Accuracy (min, max)':<28} {'Brier score (min, max)':<28} {'chi2 p':>8}"
        lines = [header, "-" * len(header)]
        for result in self.configurations:
            if not result.metrics:
                lines.append(f"{result.name:<32} failed: {result.error}")
                continue
            lo, hi = result.fold_range("balanced_accuracy")
            blo, bhi = result.fold_range("brier")
            accuracy = f"{result.metrics['balanced_accuracy']:.3f} ({lo:.3f}, {hi:.3f})"
            brier_text = f"{result.metrics['brier']:.3f} ({blo:.3f}, {bhi:.3f})"
            p_value = f"{result.chance.p_value:.2g}" if result.chance else "n/a"
            suffix = " (partial)" if result.failed else ""
            lines.append(f"{result.name + suffix:<32} {accuracy:<28} {brier_text:<28} {p_value:>8}")
        return "\n".join(lines)


def normalize_split(dataset, train_rows, test_rows, scope="train"):
    """Normalize train and test modalities with statistics from train rows (or all rows)."""
    fit_rows = train_rows if scope == "train" else None
    train, test = [], []
    for modality in dataset.modalities:
        norm_stats = fit_normalization(modality, fit_rows)
        normalized = apply_normalization(modality, norm_stats)
        train.append(normalized.take(train_rows))
        test.append(normalized.take(test_rows))
    return train, test


def _configurations(dataset, run_config):
    sampler, prior = run_config.sampler, run_config.prior
    ids = dataset.modality_ids
    configs = [("Weighted sum", ids, sampler, prior, None)]
    if run_config.baselines:
        fixed = replace(sampler, scheme=None, hyper_sampler="fixed")
        configs.append(("Unweighted sum", ids, fixed, PriorConfig(variant="flat"), 0.0))
        if len(ids) > 1:
            configs += [(f"Single source: {s}", [s], sampler, prior, None) for s in ids]
    return configs


def _score_configuration(index, name, sources, sampler, prior, initial_theta, dataset, folds, run_config,
                         progress):
    subset = dataset.select_modalities(sources)
    m = subset.labels.n_classes
    result = ConfigurationResult(name, list(sources))
    labels_all, probs_all, stderr_all, ids_all, traces_all = [], [], [], [], []

    for fold in tqdm(range(folds.k), desc=name, unit="fold", disable=not progress):
        train_rows, test_rows = folds.train_rows(fold), folds.test_rows(fold)
        try:
            train_mods, test_mods = normalize_split(subset, train_rows, test_rows, run_config.normalize_scope)
            train_labels = subset.labels.take(train_rows)
            missing = [subset.labels.class_names[c] for c in range(m) if train_labels.counts[c] == 0]
            if missing:
                logger.warning(f"{name} fold {fold}: no training subjects of classes {missing}")
            ctx = ModelContext(train_labels, build_gram_set(train_mods, run_config.cache_dir), prior)
            theta0 = None if initial_theta is None else np.full((m, len(sources)), initial_theta)
            traces = run_chains(ctx, sampler, seed_keys=(index, fold), initial_theta=theta0,
                                jobs=run_config.n_jobs, progress=False)
            if any(trace.failed for trace in traces):
                raise GPCError(f"chain failure in fold {fold}: "
                               f"{next(t.error for t in traces if t.failed)}")
            report = summarize(traces, sampler=sampler.label)
            prediction = predict_subjects(traces, ctx, train_mods, test_mods, n2=run_config.n2,
                                          seed=sampler.seed, seed_keys=(index, fold),
                                          subject_ids=[subset.subject_ids[i] for i in test_rows])
        except GPCError as e:
            logger.error(f"{name}: fold {fold} failed, keeping results of earlier folds: {e}")
            result.failed, result.error = True, str(e)
            break

        y = subset.labels.indices[test_rows]
        best = decide(prediction.probs)
        result.folds.append(FoldResult(fold, len(test_rows), balanced_accuracy(best, y, m),
                                       plain_accuracy(best, y), brier(prediction.probs, y), report.converged))
        labels_all.append(y)
        probs_all.append(prediction.probs)
        stderr_all.append(prediction.stderr)
        ids_all += prediction.subject_ids
        traces_all += traces
        logger.info(f"{name} fold {fold}: balanced accuracy {result.folds[-1].balanced_accuracy:.3f}, "
                    f"Brier {result.folds[-1].brier:.3f}")

    if not result.folds:
        return result

    y = np.concatenate(labels_all)
    probs = np.concatenate(probs_all)
    result.labels = y
    result.prediction = PredictiveDistribution(probs, np.concatenate(stderr_all), -1, run_config.n2, ids_all)
    best = decide(probs)
    at_threshold = decide(probs, run_config.reject_threshold)
    kept = at_threshold != REJECT
    result.metrics = {
        "balanced_accuracy": balanced_accuracy(best, y, m),
        "accuracy": plain_accuracy(best, y),
        "per_class_recall": dict(zip(subset.labels.class_names, per_class_recall(best, y, m))),
        "brier": brier(probs, y),
        "rejection_rate": float(1.0 - kept.mean()),
        "balanced_accuracy_at_threshold": balanced_accuracy(at_threshold[kept], y[kept], m) if kept.any() else None,
        "n_subjects": int(len(y)),
        "all_folds_converged": all(fold.converged for fold in result.folds),
    }
    if kept.any():
        result.chance = chance_test(at_threshold, y, m)
    result.curve = accuracy_reject_curve(probs, y)
    if sampler.hyper_sampler != "fixed":
        result.weights = weight_posterior_summary(traces_all, list(subset.labels.class_names), list(sources),
                                                  alpha_rate=prior.alpha_rate)
    return result


def run_cv_experiment(dataset, run_config, progress=True):
    """Stratified k-fold evaluation of the weighted-sum model and optional baselines.

    Folds run one after another; the chains of a fold run in parallel. A
    failing fold stops its configuration, and the folds scored so far are
    kept in the report.

    Args:
        dataset (Dataset): Raw modalities and labels
        run_config (RunConfig): Sampler, prior, CV and prediction settings

    Returns:
        EvaluationReport: Per-configuration pooled and per-fold metrics
    """
    if run_config.sources:
        dataset = dataset.select_modalities(run_config.sources)
    cv_seed = run_config.cv_seed if run_config.cv_seed is not None else run_config.sampler.seed
    folds = make_folds(dataset.labels, run_config.k_folds, cv_seed)

    results = []
    for index, (name, sources, sampler, prior, theta0) in enumerate(_configurations(dataset, run_config)):
        logger.info(f"Evaluating {name} over {folds.k} folds")
        results.append(_score_configuration(index, name, sources, sampler, prior, theta0, dataset, folds,
                                            run_config, progress))

    report = EvaluationReport(results, list(dataset.labels.class_names), folds.k,
                              run_config.reject_threshold, run_config.sampler.label)
    logger.info("\n" + report.table_text())
    return report
