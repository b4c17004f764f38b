import logging

from multimodal_gpc.config import PriorConfig, SamplerConfig
from multimodal_gpc.diagnostics import geweke_test
from multimodal_gpc.errors import GPCError


def setup_logging():
    """Set up logging configuration."""
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s'
    )
    return logging.getLogger(__name__)


def main():
    logger = setup_logging()

    # Configuration
    SCHEMES = ["a", "c", "d", "e"]
    STEP_SIZE_THETA = {"d": 0.05}
    PASS_FRACTION = 0.95
    N_OUTER = 20000
    SEED = 0

    try:
        for variant in ("gamma", "dirichlet"):
            prior = PriorConfig(variant=variant)
            for scheme in SCHEMES:
                config = SamplerConfig(scheme=scheme, step_size_f=0.3,
                                       step_size_theta=STEP_SIZE_THETA.get(scheme, 0.1))
                try:
                    config.validate().check_prior(prior)
                except GPCError as e:
                    print(f"{variant:<10} ({scheme}) skipped: {e}")
                    continue
                result = geweke_test(config, prior, n_outer=N_OUTER, seed=SEED)
                verdict = "pass" if result.fraction_within(3.0) >= PASS_FRACTION else "FAIL"
                print(f"{variant:<10} {config.label:<6} {result.fraction_within(3.0):6.1%} of |z| < 3, "
                      f"max |z| {abs(result.z).max():5.2f}  {verdict}")

    except GPCError as e:
        logger.error(f"Geweke check failed: {str(e)}")


if __name__ == "__main__":
    main()
