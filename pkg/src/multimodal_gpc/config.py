"""Configuration objects for priors, samplers and command-line runs."""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional

from .errors import ConfigError
from .utils import load_json

logger = logging.getLogger(__name__)

PRIOR_VARIANTS = ("gamma", "dirichlet", "flat")
LATENT_SAMPLERS = ("hmc", "rmhmc_fixed", "rmhmc_position")
HYPER_SAMPLERS = ("hmc", "rmhmc", "mh", "dirichlet_mh", "fixed")
AUGMENTATIONS = ("SA", "AA")
THETA_METRICS = ("position", "frozen")

# Sampling schemes evaluated: (latent sampler, hyper sampler, augmentation)
SCHEMES = {
    "a": ("hmc", "hmc", "SA"),
    "b": ("rmhmc_fixed", "hmc", "SA"),
    "c": ("rmhmc_position", "hmc", "SA"),
    "d": ("rmhmc_position", "rmhmc", "SA"),
    "e": ("rmhmc_fixed", "mh", "AA"),
    "f": ("rmhmc_position", "mh", "AA"),
}


def _from_dict(cls, values, what):
    """Build a dataclass from a dict, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"Unknown {what} keys: {unknown}")
    return cls(**values)


@dataclass
class PriorConfig:
    """Prior over the log-weights theta.

    Args:
        variant (str): 'gamma' (independent Gamma on every exp(theta_cs)),
            'dirichlet' (per-class simplex weights, exponential hyper-prior
            on the concentration) or 'flat' (improper constant prior)
        shape (float): Gamma shape a
        rate (float): Gamma rate b
        alpha_rate (float): Rate of the exponential prior on the Dirichlet
            concentration
    """
    variant: str = "gamma"
    shape: float = 2.0
    rate: float = 2.0
    alpha_rate: float = 1.0

    def validate(self):
        if self.variant not in PRIOR_VARIANTS:
            raise ConfigError(f"prior variant must be one of {PRIOR_VARIANTS}, got {self.variant!r}")
        if self.shape <= 0 or self.rate <= 0 or self.alpha_rate <= 0:
            raise ConfigError("prior shape, rate and alpha_rate must be positive")
        return self

    @classmethod
    def from_dict(cls, values):
        return _from_dict(cls, values, "prior").validate()


@dataclass
class SamplerConfig:
    """Settings of the Metropolis-within-Gibbs sampler.

    `scheme` picks one row of the scheme table; the explicit
    latent_sampler/hyper_sampler/augmentation fields override it when set.
    """
    scheme: Optional[str] = "e"
    latent_sampler: Optional[str] = None
    hyper_sampler: Optional[str] = None
    augmentation: Optional[str] = None
    leapfrog_steps: int = 10
    step_size_f: float = 0.5
    step_size_theta: float = 0.2
    implicit_iters: int = 6
    implicit_tol: float = 1e-8
    theta_metric: str = "position"
    dirichlet_concentration: float = 200.0
    dirichlet_floor: float = 1e-3
    alpha_step: float = 0.5
    n_iterations: int = 2000
    n_chains: int = 4
    thin: int = 1
    burn_in: int = 1000
    seed: int = 0
    save_latent: bool = True

    def __post_init__(self):
        if self.scheme is not None:
            if self.scheme not in SCHEMES:
                raise ConfigError(f"scheme must be one of {sorted(SCHEMES)}, got {self.scheme!r}")
            latent, hyper, augmentation = SCHEMES[self.scheme]
            self.latent_sampler = self.latent_sampler or latent
            self.hyper_sampler = self.hyper_sampler or hyper
            self.augmentation = self.augmentation or augmentation

    def validate(self):
        if self.latent_sampler not in LATENT_SAMPLERS:
            raise ConfigError(f"latent_sampler must be one of {LATENT_SAMPLERS}, got {self.latent_sampler!r}")
        if self.hyper_sampler not in HYPER_SAMPLERS:
            raise ConfigError(f"hyper_sampler must be one of {HYPER_SAMPLERS}, got {self.hyper_sampler!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation must be one of {AUGMENTATIONS}, got {self.augmentation!r}")
        if self.theta_metric not in THETA_METRICS:
            raise ConfigError(f"theta_metric must be one of {THETA_METRICS}, got {self.theta_metric!r}")
        if self.step_size_f <= 0 or self.step_size_theta <= 0:
            raise ConfigError("step sizes must be positive")
        if self.leapfrog_steps < 1:
            raise ConfigError("leapfrog_steps must be at least 1")
        if self.thin < 1:
            raise ConfigError("thin must be at least 1")
        if self.implicit_iters < 1 or self.implicit_tol <= 0:
            raise ConfigError("implicit_iters must be >= 1 and implicit_tol > 0")
        if self.n_chains < 1:
            raise ConfigError("n_chains must be at least 1")
        if self.burn_in < 0 or self.n_iterations <= self.burn_in:
            raise ConfigError(
                f"n_iterations ({self.n_iterations}) must exceed burn_in ({self.burn_in})")
        if self.dirichlet_concentration <= 0 or self.dirichlet_floor <= 0 or self.alpha_step <= 0:
            raise ConfigError("dirichlet_concentration, dirichlet_floor and alpha_step must be positive")
        return self

    def check_prior(self, prior):
        """Reject hyper samplers that cannot move on the prior's parameter space."""
        if prior.variant == "dirichlet" and self.hyper_sampler in ("hmc", "rmhmc"):
            raise ConfigError("Dirichlet weights live on the simplex; use hyper_sampler 'dirichlet_mh' or 'mh'")
        if prior.variant == "dirichlet" and self.hyper_sampler == "mh":
            # MH on the simplex uses Dirichlet proposals
            logger.info("Dirichlet prior: hyper-parameter MH uses Dirichlet proposals")
            self.hyper_sampler = "dirichlet_mh"
        if prior.variant != "dirichlet" and self.hyper_sampler == "dirichlet_mh":
            raise ConfigError("hyper_sampler 'dirichlet_mh' requires the Dirichlet prior")
        if self.hyper_sampler in ("hmc", "rmhmc") and self.augmentation == "AA":
            raise ConfigError(f"hyper_sampler {self.hyper_sampler!r} is only defined for the SA parametrization")
        return self

    @property
    def n_kept(self):
        """Number of samples kept after burn-in and thinning."""
        return (self.n_iterations - self.burn_in) // self.thin

    @property
    def label(self):
        if self.scheme is not None:
            latent, hyper, augmentation = SCHEMES[self.scheme]
            if (self.latent_sampler, self.augmentation) == (latent, augmentation) and (
                    self.hyper_sampler == hyper
                    or (hyper == "mh" and self.hyper_sampler == "dirichlet_mh")):
                return f"({self.scheme})"
        return f"{self.latent_sampler}/{self.hyper_sampler}/{self.augmentation}"

    @classmethod
    def from_dict(cls, values):
        return _from_dict(cls, values, "sampler").validate()


@dataclass
class RunConfig:
    """Everything one command-line invocation needs.

    Flags override values read from a JSON config file; unknown keys in
    the file are rejected before any work starts.
    """
    command: str = "evaluate"
    manifest: Optional[str] = None
    synthetic: Optional[dict] = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    k_folds: int = 4
    cv_seed: Optional[int] = None
    n2: int = 32
    reject_threshold: float = 0.5
    normalize_scope: str = "train"
    sources: Optional[List[str]] = None
    baselines: bool = False
    jobs: Optional[int] = None
    out: str = "output"
    allow_nonconverged: bool = False
    traces: Optional[str] = None
    test_manifest: Optional[str] = None
    cache_dir: Optional[str] = None

    def validate(self):
        if self.command not in ("generate", "fit", "diagnose", "predict", "evaluate"):
            raise ConfigError(f"Unknown command {self.command!r}")
        self.sampler.validate().check_prior(self.prior.validate())
        if self.normalize_scope not in ("train", "all"):
            raise ConfigError(f"normalize_scope must be 'train' or 'all', got {self.normalize_scope!r}")
        if self.k_folds < 2:
            raise ConfigError(f"k_folds must be at least 2, got {self.k_folds}")
        if self.n2 < 1:
            raise ConfigError("n2 must be at least 1")
        if not 0.0 <= self.reject_threshold <= 1.0:
            raise ConfigError("reject_threshold must lie in [0, 1]")
        if self.jobs is not None and self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.command == "generate":
            validate_synthetic_spec(self.synthetic)
        if self.command in ("fit", "evaluate") and self.manifest is None:
            raise ConfigError(f"'{self.command}' requires a dataset manifest")
        if self.command in ("diagnose", "predict") and self.traces is None:
            raise ConfigError(f"'{self.command}' requires a traces directory")
        if self.command == "predict" and self.test_manifest is None:
            raise ConfigError("'predict' requires a test manifest")
        return self

    @property
    def n_jobs(self):
        return self.jobs or os.cpu_count() or 1

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        sampler = values.pop("sampler", {})
        prior = values.pop("prior", {})
        config = _from_dict(cls, values, "run config")
        config.sampler = _from_dict(SamplerConfig, sampler, "sampler")
        config.prior = _from_dict(PriorConfig, prior, "prior")
        return config

    @classmethod
    def from_file(cls, path):
        try:
            values = load_json(path)
        except (FileNotFoundError, ValueError) as e:
            raise ConfigError(str(e))
        if not isinstance(values, dict):
            raise ConfigError(f"Config file {path} must contain a JSON object")
        return cls.from_dict(values)


SYNTHETIC_KEYS = ("n", "m", "q", "d", "seed", "signal_scale")


def validate_synthetic_spec(spec):
    """Check a synthetic dataset spec {n, m, q, d, seed[, signal_scale]}."""
    if not isinstance(spec, dict):
        raise ConfigError("'generate' requires a synthetic spec with keys n, m, q, d, seed")
    unknown = sorted(set(spec) - set(SYNTHETIC_KEYS))
    if unknown:
        raise ConfigError(f"Unknown synthetic spec keys: {unknown}")
    missing = [key for key in ("n", "m", "q", "d", "seed") if key not in spec]
    if missing:
        raise ConfigError(f"Synthetic spec is missing keys: {missing}")
    if spec["n"] < 2 or spec["q"] < 1:
        raise ConfigError("synthetic spec needs n >= 2 and q >= 1")
    if spec["m"] < 2:
        raise ConfigError(f"synthetic spec needs m >= 2 classes, got {spec['m']}")
    d = spec["d"]
    dims = d if isinstance(d, list) else [d]
    if isinstance(d, list) and len(d) != spec["q"]:
        raise ConfigError("synthetic spec 'd' list must have one entry per modality")
    if any(int(x) < 1 for x in dims):
        raise ConfigError("synthetic spec needs d >= 1")
    return spec
