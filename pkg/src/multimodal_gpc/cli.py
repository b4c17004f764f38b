#!/usr/bin/env python
"""
Command-line entry point of multimodal-gpc.

Subcommands:
- generate: simulate a dataset from the model's prior and write it with a manifest
- fit: run the chains on a dataset and write traces plus convergence diagnostics
- diagnose: recompute diagnostics for previously written traces
- predict: predict held-out subjects from previously written traces
- evaluate: stratified cross-validation with accuracy, Brier score, reject curve and weight summaries

Exit codes: 0 success, 2 usage/config/input error, 3 not converged, 4 numerical failure.
"""

import argparse
import dataclasses
import logging
import sys

import numpy as np

from .config import RunConfig
from .data import NormalizationStats, apply_normalization, fit_normalization, generate_synthetic, load_dataset, \
    write_dataset
from .diagnostics import summarize
from .errors import ConfigError, DataError, NumericalError
from .evaluation import run_cv_experiment
from .export import read_traces, write_diagnostics, write_evaluation, write_predictions, write_traces
from .kernels import build_gram_set
from .model import ModelContext
from .prediction import predict_subjects
from .samplers import run_chains

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_NUMERICAL = 4

# flag dest -> (section, key) in RunConfig
FLAG_TARGETS = {
    "manifest": (None, "manifest"),
    "test_manifest": (None, "test_manifest"),
    "traces": (None, "traces"),
    "out": (None, "out"),
    "k_folds": (None, "k_folds"),
    "cv_seed": (None, "cv_seed"),
    "n2": (None, "n2"),
    "reject_threshold": (None, "reject_threshold"),
    "normalize_scope": (None, "normalize_scope"),
    "sources": (None, "sources"),
    "baselines": (None, "baselines"),
    "jobs": (None, "jobs"),
    "allow_nonconverged": (None, "allow_nonconverged"),
    "cache_dir": (None, "cache_dir"),
    "iterations": ("sampler", "n_iterations"),
    "burn_in": ("sampler", "burn_in"),
    "thin": ("sampler", "thin"),
    "chains": ("sampler", "n_chains"),
    "seed": ("sampler", "seed"),
    "leapfrog_steps": ("sampler", "leapfrog_steps"),
    "step_size_f": ("sampler", "step_size_f"),
    "step_size_theta": ("sampler", "step_size_theta"),
    "theta_metric": ("sampler", "theta_metric"),
    "prior": ("prior", "variant"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--seed", type=int, help="Top-level seed")
    common.add_argument("--prior", choices=["gamma", "dirichlet", "flat"], help="Weight prior")
    common.add_argument("--jobs", type=int, help="Worker processes (default: logical cores)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging level")

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--manifest", help="Dataset manifest (JSON)")
    sampling.add_argument("--scheme", choices=list("abcdef"), help="Sampling scheme")
    sampling.add_argument("--iterations", type=int, help="Iterations per chain")
    sampling.add_argument("--burn-in", type=int, help="Discarded leading iterations")
    sampling.add_argument("--thin", type=int, help="Keep every thin-th sample")
    sampling.add_argument("--chains", type=int, help="Number of chains")
    sampling.add_argument("--leapfrog-steps", type=int, help="Leapfrog steps per trajectory")
    sampling.add_argument("--step-size-f", type=float, help="Leapfrog step size for f")
    sampling.add_argument("--step-size-theta", type=float, help="Step size for theta")
    sampling.add_argument("--theta-metric", choices=["position", "frozen"], help="Metric of RM-HMC on theta")
    sampling.add_argument("--sources", nargs="+", help="Modalities to use (default: all)")
    sampling.add_argument("--cache-dir", help="Directory for cached Gram matrices")
    sampling.add_argument("--allow-nonconverged", action="store_true", default=None,
                          help="Exit 0 even when R-hat >= 1.1")

    parser = argparse.ArgumentParser(
        prog="multimodal-gpc",
        description="Bayesian multinomial logit classification with weighted multiple kernels")
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", parents=[common], help="Simulate a dataset from the prior")
    generate.add_argument("--n", type=int, help="Subjects")
    generate.add_argument("--m", type=int, help="Classes")
    generate.add_argument("--q", type=int, help="Modalities")
    generate.add_argument("--d", type=int, nargs="+", help="Features per modality (one value or one per modality)")
    generate.add_argument("--signal-scale", type=float, help="Multiplier on the latent functions")

    sub.add_parser("fit", parents=[common, sampling], help="Run the chains and write traces")

    diagnose = sub.add_parser("diagnose", parents=[common], help="Diagnostics for written traces")
    diagnose.add_argument("--traces", help="Directory written by 'fit'")
    diagnose.add_argument("--allow-nonconverged", action="store_true", default=None,
                          help="Exit 0 even when R-hat >= 1.1")

    predict = sub.add_parser("predict", parents=[common], help="Predict held-out subjects")
    predict.add_argument("--traces", help="Directory written by 'fit'")
    predict.add_argument("--manifest", help="Training manifest (default: the one recorded by 'fit')")
    predict.add_argument("--test-manifest", help="Manifest of the subjects to predict")
    predict.add_argument("--n2", type=int, help="Draws of f* per posterior sample")
    predict.add_argument("--reject-threshold", type=float, help="Reject when max probability is below this")

    evaluate = sub.add_parser("evaluate", parents=[common, sampling], help="Cross-validated evaluation")
    evaluate.add_argument("--k-folds", type=int, help="Number of folds")
    evaluate.add_argument("--cv-seed", type=int, help="Fold assignment seed (default: --seed)")
    evaluate.add_argument("--n2", type=int, help="Draws of f* per posterior sample")
    evaluate.add_argument("--reject-threshold", type=float, help="Reject when max probability is below this")
    evaluate.add_argument("--normalize-scope", choices=["train", "all"],
                          help="Rows the normalization statistics are fitted on")
    evaluate.add_argument("--baselines", action="store_true", default=None,
                          help="Also evaluate the unweighted sum and every single source")
    return parser


def build_run_config(args):
    """Merge the optional config file with the flags; flags win."""
    config = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    config.command = args.command

    scheme = getattr(args, "scheme", None)
    if scheme is not None:
        config.sampler = dataclasses.replace(config.sampler, scheme=scheme, latent_sampler=None,
                                             hyper_sampler=None, augmentation=None)

    for dest, (section, key) in FLAG_TARGETS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        target = config if section is None else getattr(config, section)
        setattr(target, key, value)

    if args.command == "generate":
        synthetic = dict(config.synthetic or {})
        for key in ("n", "m", "q", "signal_scale"):
            if getattr(args, key, None) is not None:
                synthetic[key] = getattr(args, key)
        if args.d is not None:
            synthetic["d"] = args.d[0] if len(args.d) == 1 else args.d
        if args.seed is not None or "seed" not in synthetic:
            synthetic["seed"] = config.sampler.seed
        config.synthetic = synthetic
    return config.validate()


def normalize_all(dataset, stats=None):
    """Normalize every modality with given statistics, or with statistics fitted on all rows."""
    stats = stats or {modality.modality_id: fit_normalization(modality) for modality in dataset.modalities}
    return [apply_normalization(modality, stats[modality.modality_id]) for modality in dataset.modalities], stats


def _converged_exit(converged, config):
    if converged or config.allow_nonconverged:
        return EXIT_OK
    logger.warning("Run did not converge (R-hat >= 1.1); rerun with --allow-nonconverged to accept it")
    return EXIT_NOT_CONVERGED


def cmd_generate(config):
    spec = config.synthetic
    dataset = generate_synthetic(spec["n"], spec["m"], spec["q"], spec["d"], spec["seed"], prior=config.prior,
                                 signal_scale=spec.get("signal_scale", 1.0))
    truth = {"spec": spec, "prior": dataclasses.asdict(config.prior), "theta": dataset.theta,
             "weights": np.exp(dataset.theta), "f": dataset.f, "alpha": dataset.alpha}
    write_dataset(config.out, dataset, truth=truth)
    return EXIT_OK


def cmd_fit(config):
    dataset = load_dataset(config.manifest)
    if config.sources:
        dataset = dataset.select_modalities(config.sources)
    modalities, stats = normalize_all(dataset)
    ctx = ModelContext(dataset.labels, build_gram_set(modalities, config.cache_dir), config.prior)

    traces = run_chains(ctx, config.sampler, jobs=config.n_jobs)
    write_traces(config.out, traces, config.sampler, config.prior, dataset.modality_ids,
                 list(dataset.labels.class_names), dataset.labels.n_subjects, manifest=config.manifest,
                 normalization=stats)

    notes = ["theta metric frozen at the trajectory start (approximate)"] \
        if config.sampler.hyper_sampler == "rmhmc" and config.sampler.theta_metric == "frozen" else []
    report = summarize(traces, sampler=config.sampler.label, notes=notes)
    write_diagnostics(config.out, report, traces)
    print(report.summary_text())
    if any(trace.failed for trace in traces):
        logger.error("At least one chain failed; partial traces were written")
        return EXIT_NUMERICAL
    return _converged_exit(report.converged, config)


def cmd_diagnose(config):
    traces, metadata = read_traces(config.traces)
    report = summarize(traces, sampler=metadata["sampler_label"])
    write_diagnostics(config.out, report, traces)
    print(report.summary_text())
    return _converged_exit(report.converged, config)


def cmd_predict(config):
    traces, metadata = read_traces(config.traces)
    manifest = config.manifest or metadata["manifest"]
    if manifest is None:
        raise ConfigError("No training manifest recorded with the traces; pass --manifest")
    sources = metadata["modality_ids"]
    train = load_dataset(manifest).select_modalities(sources)
    test = load_dataset(config.test_manifest).select_modalities(sources)
    if list(test.labels.class_names) != metadata["class_names"]:
        logger.warning(f"Test classes {list(test.labels.class_names)} differ from training classes "
                       f"{metadata['class_names']}; test labels are ignored")

    stats = None
    if metadata.get("normalization"):
        stats = {mid: NormalizationStats(np.asarray(entry["mean"]), np.asarray(entry["std"]))
                 for mid, entry in metadata["normalization"].items()}
    train_mods, stats = normalize_all(train, stats)
    test_mods, _ = normalize_all(test, stats)

    ctx = ModelContext(train.labels, build_gram_set(train_mods), metadata["prior"])
    prediction = predict_subjects(traces, ctx, train_mods, test_mods, n2=config.n2, seed=config.sampler.seed,
                                  subject_ids=test.subject_ids)
    write_predictions(config.out, prediction, metadata["class_names"], config.reject_threshold)
    return EXIT_OK


def cmd_evaluate(config):
    dataset = load_dataset(config.manifest)
    report = run_cv_experiment(dataset, config)
    write_evaluation(config.out, report)
    print(report.table_text())
    if not report.complete:
        logger.error("Evaluation stopped early for at least one configuration; partial results were written")
        return EXIT_NUMERICAL
    converged = all(result.metrics.get("all_folds_converged", False) for result in report.configurations)
    return _converged_exit(converged, config)


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "diagnose": cmd_diagnose,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    # Setup logging
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )

    try:
        config = build_run_config(args)
        return COMMANDS[args.command](config)
    except (ConfigError, DataError, FileNotFoundError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_CONFIG
    except NumericalError as e:
        logger.error(f"{args.command} failed with a numerical error: {e}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
