import pytest
import numpy as np

from multimodal_gpc.config import PriorConfig, SamplerConfig
from multimodal_gpc.data import Dataset, LabelSet, ModalityMatrix, generate_synthetic, write_dataset
from multimodal_gpc.kernels import GramSet
from multimodal_gpc.model import ModelContext
from multimodal_gpc.samplers import ChainTrace


def make_grams(n, q, seed=0, ridge=0.5):
    """Well-conditioned Gram matrices A A^T / d + ridge I."""
    rng = np.random.default_rng(seed)
    grams = []
    for _ in range(q):
        A = rng.standard_normal((n, n + 2))
        grams.append(A @ A.T / (n + 2) + ridge * np.eye(n))
    return GramSet(np.stack(grams), tuple(f"source{s}" for s in range(q)))


def make_labels(n, m):
    return LabelSet.from_indices(np.arange(n) % m, m)


def make_trace(chain_id=0, n_samples=50, m=2, q=2, n=4, seed=0, alpha=False, latent=True, shift=0.0):
    rng = np.random.default_rng(seed + 100 * chain_id)
    return ChainTrace(
        chain_id=chain_id,
        iterations=np.arange(n_samples) * 2 + 100,
        theta=rng.standard_normal((n_samples, m, q)) * 0.3 + shift,
        log_joint=rng.standard_normal(n_samples) - 20.0,
        f=rng.standard_normal((n_samples, m * n)) if latent else None,
        alpha=rng.exponential(1.0, n_samples) if alpha else None,
        accepted={"latent": rng.random(n_samples) < 0.8, "theta": rng.random(n_samples) < 0.3},
        proposed_counts={"latent": 200, "theta": 200},
        accepted_counts={"latent": 160, "theta": 60},
        divergences=1,
        seed_keys=(1, chain_id),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def gamma_prior():
    return PriorConfig()


@pytest.fixture
def dirichlet_prior():
    return PriorConfig(variant="dirichlet")


@pytest.fixture
def small_ctx(gamma_prior):
    # n=5 subjects, m=3 classes, q=2 sources
    return ModelContext(make_labels(5, 3), make_grams(5, 2), gamma_prior)


@pytest.fixture
def dirichlet_ctx(dirichlet_prior):
    return ModelContext(make_labels(5, 3), make_grams(5, 2, seed=1), dirichlet_prior)


@pytest.fixture
def small_dataset():
    rng = np.random.default_rng(7)
    modalities = [ModalityMatrix(rng.standard_normal((12, 4)) + 1.0, "gm"),
                  ModalityMatrix(rng.standard_normal((12, 3)), "wm")]
    labels = LabelSet.from_indices(np.arange(12) % 3, 3, class_names=("A", "B", "C"))
    return Dataset(modalities, labels, [f"subj{i:02d}" for i in range(12)])


@pytest.fixture
def synthetic_dataset():
    return generate_synthetic(24, 2, 2, 15, seed=3, signal_scale=3.0)


@pytest.fixture
def synthetic_manifest(tmp_path, synthetic_dataset):
    return write_dataset(tmp_path / "data", synthetic_dataset)


@pytest.fixture
def quick_sampler():
    return SamplerConfig(scheme="e", n_iterations=40, burn_in=20, n_chains=2, seed=5).validate()


@pytest.fixture
def traces():
    return [make_trace(chain_id=c) for c in range(3)]
