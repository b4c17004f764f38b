"""Convergence and efficiency diagnostics, and the Geweke joint-distribution test."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from .data import LabelSet, ModalityMatrix, normalize_features
from .errors import EmptyTrace
from .kernels import build_gram_set
from .model import ModelContext, sample_prior_hyper, sample_prior_latent, softmax_probs, whiten
from .samplers import ChainState, gibbs_scan
from .utils import STREAM_GEWEKE, rng_stream

logger = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.1
DIRECT_AUTOCOV_MAX = 10_000
MIN_RHAT_LENGTH = 10
MIN_ESS_LENGTH = 4


def rhat(chains):
    """Split-chain potential scale reduction factor.

    Every chain is cut in half and the halves are treated as separate
    chains. Returns 1.0 when all values are identical and inf when the
    halves are individually constant but differ from each other.

    Args:
        chains (array-like): (n_chains, n_samples) draws of one scalar

    Returns:
        float: R-hat
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2:
        raise ValueError("rhat needs at least two chains")
    if chains.shape[1] < MIN_RHAT_LENGTH:
        raise ValueError(f"rhat needs chains of length >= {MIN_RHAT_LENGTH}, got {chains.shape[1]}")

    half = chains.shape[1] // 2
    pieces = np.concatenate([chains[:, :half], chains[:, half:2 * half]])
    means = pieces.mean(axis=1)
    W = pieces.var(axis=1, ddof=1).mean()
    B = half * means.var(ddof=1)
    if W <= 0:
        return 1.0 if B <= 0 else np.inf
    var_plus = (half - 1) / half * W + B / half
    return float(np.sqrt(var_plus / W))


def autocovariance(x, method="auto"):
    """Biased autocovariance sequence (divided by N) at lags 0..N-1.

    Args:
        x (array-like): One chain of one scalar
        method (str): 'direct', 'fft', or 'auto' (direct up to 10^4 samples)
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    centered = x - x.mean()
    if method == "auto":
        method = "direct" if n <= DIRECT_AUTOCOV_MAX else "fft"
    if method == "direct":
        return np.correlate(centered, centered, mode="full")[n - 1:] / n
    if method == "fft":
        size = 1 << (2 * n - 1).bit_length()
        spectrum = np.fft.rfft(centered, size)
        return np.fft.irfft(spectrum * np.conj(spectrum), size)[:n] / n
    raise ValueError(f"Unknown autocovariance method {method!r}")


def ess(x, method="auto"):
    """Effective sample size with Geyer's initial monotone sequence.

    Autocorrelations are summed in adjacent pairs; the sum stops at the
    first non-positive pair and pair sums are forced non-increasing. The
    result is capped at N, and a constant chain has ESS = N.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < MIN_ESS_LENGTH:
        raise ValueError(f"ess needs at least {MIN_ESS_LENGTH} samples, got {n}")
    acov = autocovariance(x, method)
    if acov[0] <= 0:
        return float(n)
    rho = acov / acov[0]

    n_pairs = n // 2
    pairs = rho[:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    stop = np.flatnonzero(pairs <= 0)
    if len(stop):
        pairs = pairs[:stop[0]]
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    if tau <= 0:
        return float(n)
    return float(min(n / tau, n))


def trace_variables(traces, include_latent=True):
    """Stack the scalar variables of several traces.

    Chains of unequal length (an aborted chain) are cut to the shortest.

    Returns:
        tuple: (names, blocks, values) with values of shape
            (n_chains, n_samples, n_variables)
    """
    traces = [trace for trace in traces if trace.n_samples > 0]
    if not traces:
        raise EmptyTrace("No samples in the given traces")
    length = min(trace.n_samples for trace in traces)
    _, m, q = traces[0].theta.shape

    names = [f"theta[{c},{s}]" for c in range(m) for s in range(q)]
    blocks = ["theta"] * (m * q)
    columns = [np.stack([trace.theta[:length].reshape(length, -1) for trace in traces])]
    if traces[0].alpha is not None:
        names.append("alpha")
        blocks.append("alpha")
        columns.append(np.stack([trace.alpha[:length, None] for trace in traces]))
    if include_latent and traces[0].f is not None:
        n = traces[0].f.shape[1] // m
        names += [f"f[{c},{i}]" for c in range(m) for i in range(n)]
        blocks += ["f"] * (m * n)
        columns.append(np.stack([trace.f[:length] for trace in traces]))
    return names, blocks, np.concatenate(columns, axis=2)


@dataclass
class DiagnosticsReport:
    """Per-variable R-hat and ESS with per-block summaries."""
    variables: List[str]
    blocks: List[str]
    rhat: np.ndarray
    ess: np.ndarray
    n_chains: int
    n_samples: int
    rhat_available: bool
    converged: bool
    acceptance: Dict[str, float] = field(default_factory=dict)
    divergences: int = 0
    fixed_point_failures: int = 0
    failed_chains: List[int] = field(default_factory=list)
    sampler: Optional[str] = None
    notes: List[str] = field(default_factory=list)
    geweke: Optional["GewekeResult"] = None

    @property
    def ess_percent(self):
        return 100.0 * self.ess / (self.n_chains * self.n_samples)

    def block_summary(self):
        """min/mean/max of %ESS and max R-hat for each block."""
        summary = {}
        blocks = np.asarray(self.blocks)
        for block in dict.fromkeys(self.blocks):
            mask = blocks == block
            pct = self.ess_percent[mask]
            entry = {"ess_percent_min": pct.min(), "ess_percent_mean": pct.mean(),
                     "ess_percent_max": pct.max()}
            entry["rhat_max"] = float(np.max(self.rhat[mask])) if self.rhat_available else None
            summary[block] = entry
        return summary

    def to_frame(self):
        return pd.DataFrame({
            "variable": self.variables,
            "block": self.blocks,
            "rhat": self.rhat if self.rhat_available else np.full(len(self.variables), np.nan),
            "ess": self.ess,
            "ess_percent": self.ess_percent,
        })

    def to_dict(self):
        result = {
            "converged": self.converged,
            "rhat_available": self.rhat_available,
            "rhat_variant": "split",
            "n_chains": self.n_chains,
            "n_samples_per_chain": self.n_samples,
            "blocks": self.block_summary(),
            "acceptance": self.acceptance,
            "divergences": self.divergences,
            "fixed_point_failures": self.fixed_point_failures,
            "failed_chains": self.failed_chains,
            "sampler": self.sampler,
            "notes": self.notes,
        }
        if self.geweke is not None:
            result["geweke"] = self.geweke.to_dict()
        return result

    def summary_text(self):
        lines = [f"Sampler: {self.sampler or 'unknown'}",
                 f"Chains: {self.n_chains}, samples per chain: {self.n_samples}"]
        for block, entry in self.block_summary().items():
            rhat_text = f"{entry['rhat_max']:.3f}" if entry["rhat_max"] is not None else "n/a (single chain)"
            lines.append(
                f"  {block:<6} mean %ESS {entry['ess_percent_mean']:6.2f} "
                f"(min {entry['ess_percent_min']:.2f}, max {entry['ess_percent_max']:.2f}), "
                f"max R-hat {rhat_text}")
        for block, rate in self.acceptance.items():
            lines.append(f"  acceptance {block}: {rate:.3f}")
        lines.append(f"Divergences: {self.divergences}, fixed-point failures: {self.fixed_point_failures}")
        lines.extend(f"Note: {note}" for note in self.notes)
        lines.append(f"converged: {str(self.converged).lower()}")
        return "\n".join(lines)


def summarize(traces, sampler=None, notes=(), include_latent=True):
    """Build a DiagnosticsReport from the traces of one fit.

    Convergence requires every variable to have R-hat < 1.1; with a single
    usable chain R-hat is not computed and the run counts as not converged.
    """
    names, blocks, values = trace_variables(traces, include_latent)
    n_chains, n_samples, n_vars = values.shape

    rhat_available = n_chains >= 2 and n_samples >= MIN_RHAT_LENGTH
    rhats = np.array([rhat(values[:, :, k]) for k in range(n_vars)]) if rhat_available \
        else np.full(n_vars, np.nan)
    if n_samples >= MIN_ESS_LENGTH:
        ess_values = np.array([sum(ess(values[c, :, k]) for c in range(n_chains)) for k in range(n_vars)])
    else:
        ess_values = np.full(n_vars, float(n_chains * n_samples))
    converged = bool(rhat_available and np.all(rhats < RHAT_THRESHOLD))

    proposed, accepted = {}, {}
    for trace in traces:
        for block, count in trace.proposed_counts.items():
            proposed[block] = proposed.get(block, 0) + count
            accepted[block] = accepted.get(block, 0) + trace.accepted_counts[block]

    notes = list(notes)
    if not rhat_available:
        notes.append("R-hat omitted: needs at least two chains of length >= 10")
        logger.warning("Only one usable chain; convergence cannot be assessed")

    report = DiagnosticsReport(
        variables=names, blocks=blocks, rhat=rhats, ess=ess_values,
        n_chains=n_chains, n_samples=n_samples, rhat_available=rhat_available,
        converged=converged,
        acceptance={block: accepted[block] / proposed[block] for block in proposed},
        divergences=sum(trace.divergences for trace in traces),
        fixed_point_failures=sum(trace.fixed_point_failures for trace in traces),
        failed_chains=[trace.chain_id for trace in traces if trace.failed],
        sampler=sampler, notes=notes)
    if rhat_available and not converged:
        worst = names[int(np.nanargmax(rhats))]
        logger.warning(f"Not converged: max R-hat {np.nanmax(rhats):.3f} at {worst}")
    return report


def rhat_evolution(traces, n_points=20, include_latent=True):
    """Max R-hat per block for growing prefixes of the chains.

    Returns:
        pandas.DataFrame: One row per checkpoint with the number of samples
            per chain, the iteration reached and the max R-hat of each block
    """
    names, blocks, values = trace_variables(traces, include_latent)
    n_chains, n_samples, _ = values.shape
    if n_chains < 2:
        raise ValueError("rhat_evolution needs at least two chains")
    iterations = traces[0].iterations
    checkpoints = np.unique(np.linspace(MIN_RHAT_LENGTH, n_samples, n_points).astype(int))
    checkpoints = checkpoints[checkpoints >= MIN_RHAT_LENGTH]
    blocks = np.asarray(blocks)

    rows = []
    for length in checkpoints:
        row = {"n_samples": int(length), "iteration": int(iterations[length - 1])}
        for block in dict.fromkeys(blocks):
            idx = np.flatnonzero(blocks == block)
            row[f"max_rhat_{block}"] = max(rhat(values[:, :length, k]) for k in idx)
        rows.append(row)
    return pd.DataFrame(rows)


@dataclass
class GewekeResult:
    """z-scores comparing marginal-conditional and successive-conditional moments."""
    statistics: List[str]
    z: np.ndarray
    marginal_mean: np.ndarray
    successive_mean: np.ndarray

    def fraction_within(self, bound=3.0):
        return float(np.mean(np.abs(self.z) < bound))

    def to_frame(self):
        return pd.DataFrame({"statistic": self.statistics, "z": self.z,
                             "marginal_mean": self.marginal_mean,
                             "successive_mean": self.successive_mean})

    def to_dict(self):
        return {"fraction_within_3": self.fraction_within(3.0),
                "max_abs_z": float(np.max(np.abs(self.z)))}


def _geweke_statistics(hyper, f, labels, m):
    first = [*hyper.theta.ravel(), f.mean(), f.var(), *labels.frequencies]
    if hyper.alpha is not None:
        first.append(hyper.alpha)
    first = np.asarray(first, dtype=float)
    return np.concatenate([first, first ** 2])


def _geweke_names(m, q, dirichlet):
    base = [f"theta[{c},{s}]" for c in range(m) for s in range(q)] + ["mean_f", "var_f"]
    base += [f"freq[{c}]" for c in range(m)]
    if dirichlet:
        base.append("alpha")
    return base + [f"{name}^2" for name in base]


def _draw_labels(f, m, rng):
    probs = softmax_probs(f, m)
    u = rng.random(len(probs))
    indices = (np.cumsum(probs, axis=1) > u[:, None]).argmax(axis=1)
    # Small regenerated label sets leave a class empty now and then
    return LabelSet.from_indices(indices, m, warn_empty=False)


def geweke_test(config, prior, n=8, m=2, q=2, d=3, n_outer=20_000, n_inner=1, seed=0,
                use_likelihood=True, progress=True):
    """Getting-it-right test of one sampling scheme on a tiny model.

    (A) marginal-conditional: theta, f, y drawn directly from the model.
    (B) successive-conditional: n_inner Gibbs scans given y, then y
    redrawn from p(y | f). Both simulate the same joint, so the moments of
    each statistic must agree. The z-score uses the successive side's
    variance corrected by its ESS.

    Args:
        config (SamplerConfig): Scheme under test
        prior (PriorConfig): Weight prior
        n, m, q, d (int): Subjects, classes, modalities, features per modality
        n_outer (int): Draws on each side
        n_inner (int): Gibbs scans between label regenerations
        use_likelihood (bool): If False the sampler ignores y

    Returns:
        GewekeResult: One z-score per statistic
    """
    rng = rng_stream(seed, STREAM_GEWEKE)
    modalities = [normalize_features(ModalityMatrix(rng.standard_normal((n, d)), f"source{s}"))
                  for s in range(q)]
    grams = build_gram_set(modalities)
    labels = LabelSet.from_indices(np.arange(n) % m, m)
    ctx = ModelContext(labels, grams, prior, use_likelihood=use_likelihood,
                       class_frequencies=np.full(m, 1.0 / m))

    marginal = []
    for _ in tqdm(range(n_outer), desc="Geweke marginal", disable=not progress):
        hyper = sample_prior_hyper(prior, m, q, rng)
        f = sample_prior_latent(hyper.theta, ctx, rng)
        marginal.append(_geweke_statistics(hyper, f, _draw_labels(f, m, rng), m))

    hyper = sample_prior_hyper(prior, m, q, rng)
    f = sample_prior_latent(hyper.theta, ctx, rng)
    ctx.set_labels(_draw_labels(f, m, rng))
    state = ChainState(f, hyper, whiten(f, ctx.covariances(hyper.theta)))
    successive = []
    for _ in tqdm(range(n_outer), desc="Geweke successive", disable=not progress):
        for _ in range(n_inner):
            state, _ = gibbs_scan(state, ctx, config, rng)
        ctx.set_labels(_draw_labels(state.f, m, rng))
        successive.append(_geweke_statistics(state.hyper, state.f, ctx.labels, m))

    marginal = np.asarray(marginal)
    successive = np.asarray(successive)
    mc_mean, sc_mean = marginal.mean(axis=0), successive.mean(axis=0)
    z = np.empty(marginal.shape[1])
    for k in range(marginal.shape[1]):
        ess_k = ess(successive[:, k])
        se2 = marginal[:, k].var(ddof=1) / n_outer + successive[:, k].var(ddof=1) / ess_k
        diff = mc_mean[k] - sc_mean[k]
        z[k] = diff / np.sqrt(se2) if se2 > 0 else (0.0 if diff == 0 else np.inf)

    names = _geweke_names(m, q, prior.variant == "dirichlet")
    result = GewekeResult(names, z, mc_mean, sc_mean)
    logger.info(f"Geweke test {config.label}: {result.fraction_within(3.0):.1%} of |z| < 3, "
                f"max |z| = {np.max(np.abs(z)):.2f}")
    return result
