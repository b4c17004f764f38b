"""Functions for writing and reading traces, diagnostics, predictions and evaluation reports."""

import dataclasses
import logging
import os
import re
from pathlib import Path

import numpy as np
import pandas as pd

from .config import PriorConfig, SamplerConfig
from .diagnostics import MIN_RHAT_LENGTH, rhat_evolution
from .errors import EmptyTrace
from .prediction import REJECT
from .samplers import BLOCKS, ChainTrace
from .utils import load_json, save_json

logger = logging.getLogger(__name__)

TRACE_METADATA = "traces.json"
FLOAT_FORMAT = "%.17g"


def _chain_file(chain_id):
    return f"chain_{chain_id}.csv"


def _slug(name):
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def trace_frame(trace, m, q):
    """One row per kept sample: iteration, acceptance flags, log-joint, theta, alpha, f."""
    columns = {"iteration": trace.iterations}
    for block in BLOCKS:
        if block in trace.accepted:
            columns[f"accepted_{block}"] = trace.accepted[block].astype(int)
    columns["log_joint"] = trace.log_joint
    for c in range(m):
        for s in range(q):
            columns[f"theta[{c},{s}]"] = trace.theta[:, c, s]
    if trace.alpha is not None:
        columns["alpha"] = trace.alpha
    if trace.f is not None:
        n = trace.f.shape[1] // m
        for c in range(m):
            for i in range(n):
                columns[f"f[{c},{i}]"] = trace.f[:, c * n + i]
    return pd.DataFrame(columns)


def write_traces(out_dir, traces, sampler, prior, modality_ids, class_names, n_subjects, manifest=None,
                 normalization=None):
    """Write one CSV per chain and a JSON sidecar with everything needed to reuse the fit.

    Args:
        out_dir (str or Path): Output directory
        traces (list of ChainTrace): Chains of one fit
        sampler (SamplerConfig): Settings the chains ran with
        prior (PriorConfig): Weight prior
        modality_ids (list): Source order of theta's columns
        class_names (list): Class order of theta's rows
        n_subjects (int): Training subjects (length of each class block of f)
        manifest (str, optional): Training manifest, resolved to an absolute path
        normalization (dict, optional): modality_id -> NormalizationStats of the training data

    Returns:
        Path: Path of the sidecar file
    """
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    m, q = len(class_names), len(modality_ids)

    chains = []
    for trace in traces:
        trace_frame(trace, m, q).to_csv(out_dir / _chain_file(trace.chain_id), index=False,
                                        float_format=FLOAT_FORMAT)
        chains.append({
            "chain_id": trace.chain_id,
            "file": _chain_file(trace.chain_id),
            "seed_keys": list(trace.seed_keys),
            "proposed_counts": trace.proposed_counts,
            "accepted_counts": trace.accepted_counts,
            "divergences": trace.divergences,
            "fixed_point_failures": trace.fixed_point_failures,
            "simplex_violations": trace.simplex_violations,
            "jitter_events": trace.jitter_events,
            "failed": trace.failed,
            "error": trace.error,
        })

    metadata = {
        "sampler": dataclasses.asdict(sampler),
        "sampler_label": sampler.label,
        "prior": dataclasses.asdict(prior),
        "modality_ids": list(modality_ids),
        "class_names": list(class_names),
        "n": int(n_subjects),
        "m": m,
        "q": q,
        "manifest": os.path.abspath(manifest) if manifest else None,
        "normalization": {
            modality_id: {"mean": stats.mean, "std": stats.std}
            for modality_id, stats in (normalization or {}).items()
        },
        "chains": chains,
    }
    path = out_dir / TRACE_METADATA
    save_json(metadata, path)
    logger.info(f"Wrote {len(traces)} chain traces to: {os.path.abspath(out_dir)}")
    return path


def _read_chain(path, entry, m, q):
    df = pd.read_csv(path, float_precision="round_trip")
    theta_columns = [f"theta[{c},{s}]" for c in range(m) for s in range(q)]
    f_columns = [column for column in df.columns if column.startswith("f[")]
    return ChainTrace(
        chain_id=entry["chain_id"],
        iterations=df["iteration"].to_numpy(dtype=int),
        theta=df[theta_columns].to_numpy(dtype=float).reshape(-1, m, q),
        log_joint=df["log_joint"].to_numpy(dtype=float),
        f=df[f_columns].to_numpy(dtype=float) if f_columns else None,
        alpha=df["alpha"].to_numpy(dtype=float) if "alpha" in df.columns else None,
        accepted={block: df[f"accepted_{block}"].to_numpy(dtype=bool)
                  for block in BLOCKS if f"accepted_{block}" in df.columns},
        proposed_counts=dict(entry["proposed_counts"]),
        accepted_counts=dict(entry["accepted_counts"]),
        divergences=entry["divergences"],
        fixed_point_failures=entry["fixed_point_failures"],
        simplex_violations=entry["simplex_violations"],
        jitter_events=entry["jitter_events"],
        seed_keys=tuple(entry["seed_keys"]),
        failed=entry["failed"],
        error=entry["error"],
    )


def read_traces(trace_dir):
    """Read traces written by write_traces.

    Returns:
        tuple: (list of ChainTrace, metadata dict); metadata carries
            'sampler' and 'prior' as config objects
    """
    trace_dir = Path(trace_dir)
    metadata = load_json(trace_dir / TRACE_METADATA)
    if not metadata.get("chains"):
        raise EmptyTrace(f"No chains listed in {trace_dir / TRACE_METADATA}")
    m, q = metadata["m"], metadata["q"]

    traces = []
    for entry in metadata["chains"]:
        path = trace_dir / entry["file"]
        if not path.exists():
            raise FileNotFoundError(f"Trace file not found: {path}")
        traces.append(_read_chain(path, entry, m, q))

    metadata["sampler"] = SamplerConfig(**metadata["sampler"])
    metadata["prior"] = PriorConfig(**metadata["prior"])
    logger.info(f"Read {len(traces)} chains from {trace_dir}")
    return traces, metadata


def write_diagnostics(out_dir, report, traces=None, include_latent=True):
    """Write the diagnostics report as CSV, JSON and text, plus the R-hat evolution when available.

    Returns:
        dict: Paths of the written files by kind
    """
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "csv": out_dir / "diagnostics.csv",
        "json": out_dir / "diagnostics.json",
        "text": out_dir / "diagnostics.txt",
    }
    report.to_frame().to_csv(paths["csv"], index=False, float_format=FLOAT_FORMAT)
    save_json(report.to_dict(), paths["json"])
    with open(paths["text"], "w", encoding="utf-8") as f:
        f.write(report.summary_text() + "\n")

    if traces is not None and report.rhat_available and report.n_samples >= MIN_RHAT_LENGTH:
        paths["rhat_evolution"] = out_dir / "rhat_evolution.csv"
        rhat_evolution(traces, include_latent=include_latent).to_csv(
            paths["rhat_evolution"], index=False, float_format=FLOAT_FORMAT)

    logger.info(f"Diagnostics written to: {os.path.abspath(out_dir)} (converged: {report.converged})")
    return paths


def prediction_frame(prediction, class_names, threshold=0.0, labels=None):
    """One row per subject: probabilities, standard errors and the decision."""
    df = pd.DataFrame({"subject_id": prediction.subject_ids or list(range(prediction.n_subjects))})
    if labels is not None:
        df["label"] = [class_names[y] for y in labels]
    for c, name in enumerate(class_names):
        df[f"p_{name}"] = prediction.probs[:, c]
    for c, name in enumerate(class_names):
        df[f"se_{name}"] = prediction.stderr[:, c]
    decisions = prediction.decisions(threshold)
    df["decision"] = [class_names[d] if d != REJECT else "" for d in decisions]
    df["rejected"] = decisions == REJECT
    return df


def write_predictions(out_dir, prediction, class_names, threshold=0.0):
    """Write predictions.csv for a held-out set.

    Returns:
        Path: Path of the written file
    """
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    path = out_dir / "predictions.csv"
    prediction_frame(prediction, class_names, threshold).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Predictions for {prediction.n_subjects} subjects written to: {path}")
    return path


def write_evaluation(out_dir, report):
    """Write the evaluation artifacts.

    evaluation.json and evaluation.txt hold the per-configuration metrics;
    reject_curve_<configuration>.csv the 101-point accuracy-reject curve;
    weights.csv the weight posterior summaries; cv_predictions.csv the
    pooled held-out predictions.

    Returns:
        dict: Paths of the written files by kind
    """
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    paths = {"json": out_dir / "evaluation.json", "text": out_dir / "evaluation.txt"}
    save_json(report.to_dict(), paths["json"])
    with open(paths["text"], "w", encoding="utf-8") as f:
        f.write(report.table_text() + "\n")

    weight_tables, prediction_tables = [], []
    for result in report.configurations:
        if result.curve is not None:
            path = out_dir / f"reject_curve_{_slug(result.name)}.csv"
            result.curve.to_csv(path, index=False, float_format=FLOAT_FORMAT)
            paths[f"curve_{_slug(result.name)}"] = path
        if result.weights is not None:
            weight_tables.append(result.weights.table.assign(configuration=result.name))
        if result.prediction is not None:
            frame = prediction_frame(result.prediction, report.class_names, report.reject_threshold,
                                     labels=result.labels)
            prediction_tables.append(frame.assign(configuration=result.name))

    if weight_tables:
        paths["weights"] = out_dir / "weights.csv"
        pd.concat(weight_tables, ignore_index=True).to_csv(paths["weights"], index=False,
                                                           float_format=FLOAT_FORMAT)
    if prediction_tables:
        paths["predictions"] = out_dir / "cv_predictions.csv"
        pd.concat(prediction_tables, ignore_index=True).to_csv(paths["predictions"], index=False,
                                                               float_format=FLOAT_FORMAT)

    logger.info(f"Evaluation report written to: {os.path.abspath(out_dir)}")
    for kind, path in paths.items():
        logger.info(f"- {kind}: {path}")
    return paths
