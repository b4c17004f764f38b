import logging

from multimodal_gpc.config import PriorConfig, SamplerConfig, SCHEMES
from multimodal_gpc.data import generate_synthetic, normalize_features
from multimodal_gpc.diagnostics import summarize
from multimodal_gpc.errors import GPCError
from multimodal_gpc.kernels import build_gram_set
from multimodal_gpc.model import ModelContext
from multimodal_gpc.samplers import run_chains


def setup_logging():
    """Set up logging configuration."""
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s'
    )
    return logging.getLogger(__name__)


def main():
    logger = setup_logging()

    # Configuration: a cohort-shaped synthetic dataset
    N_SUBJECTS = 62
    N_CLASSES = 4
    N_SOURCES = 5
    N_FEATURES = 20
    ITERATIONS = 2000
    BURN_IN = 1000
    SEED = 1

    try:
        prior = PriorConfig()
        dataset = generate_synthetic(N_SUBJECTS, N_CLASSES, N_SOURCES, N_FEATURES, SEED, prior=prior)
        modalities = [normalize_features(X) for X in dataset.modalities]
        ctx = ModelContext(dataset.labels, build_gram_set(modalities), prior)

        rows = []
        for scheme in sorted(SCHEMES):
            config = SamplerConfig(scheme=scheme, n_iterations=ITERATIONS, burn_in=BURN_IN, seed=SEED).validate()
            traces = run_chains(ctx, config, jobs=config.n_chains)
            report = summarize(traces, sampler=config.label)
            rows.append((config.label, report.block_summary(), report.converged))

        print(f"\n{'Scheme':<8} {'f %ESS':>8} {'theta %ESS':>11} {'max R-hat f':>12} {'max R-hat theta':>16} converged")
        for label, blocks, converged in rows:
            f, theta = blocks["f"], blocks["theta"]
            print(f"{label:<8} {f['ess_percent_mean']:8.2f} {theta['ess_percent_mean']:11.2f} "
                  f"{f['rhat_max']:12.3f} {theta['rhat_max']:16.3f} {converged}")

    except GPCError as e:
        logger.error(f"Comparison failed: {str(e)}")


if __name__ == "__main__":
    main()
