"""Metropolis-within-Gibbs samplers for latent functions and kernel weights.

Each update block returns a Transition. Numerical trouble inside a
trajectory (divergence, an implicit step that does not converge, a
proposal off the simplex) rejects the proposal and is flagged on the
Transition; it never propagates.
"""

import copy
import logging
import signal
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import special
from tqdm import tqdm

from .errors import FixedPointNoConvergence, GPCError, NumericalError, SimplexViolation
from .metrics import IdentityMetric
from .model import (HyperState, grad_f, grad_theta, homogeneous_metric, log_gp_prior, log_likelihood,
                    metric_f, prior_logdensity, sample_prior_hyper, sample_prior_latent,
                    theta_metric, unwhiten, whiten)
from .utils import STREAM_CHAIN, rng_stream

logger = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0
BLOCKS = ("latent", "theta", "alpha")


@dataclass
class Transition:
    """Outcome of one update block."""
    state: np.ndarray
    accepted: bool
    log_density: float = np.nan
    delta_h: float = np.nan
    divergent: bool = False
    fixed_point_failure: bool = False
    simplex_violation: bool = False


def metropolis_accept(log_ratio, rng):
    """Accept with probability min(1, exp(log_ratio)).

    One uniform is always drawn so the random stream does not depend on
    the outcome.
    """
    u = rng.random()
    if not np.isfinite(log_ratio):
        return bool(log_ratio > 0)
    return bool(np.log(u) < min(0.0, log_ratio))


def leapfrog(x, p, grad_fn, metric, step_size, n_steps):
    """Explicit leapfrog for H = -log pi(x) + 1/2 p^T M^{-1} p with constant M."""
    x = np.array(x, dtype=float)
    p = p + 0.5 * step_size * grad_fn(x)
    for step in range(n_steps):
        x = x + step_size * metric.solve(p)
        if step < n_steps - 1:
            p = p + step_size * grad_fn(x)
    p = p + 0.5 * step_size * grad_fn(x)
    return x, p


def _energy(x, p, logdens_fn, metric, include_logdet=False):
    kinetic = 0.5 * p @ metric.solve(p)
    potential = -logdens_fn(x)
    if include_logdet:
        potential += 0.5 * metric.logdet()
    return potential + kinetic


def _finish(x0, x1, h0, h1, rng, log_density_fn):
    delta_h = h1 - h0
    if not np.isfinite(delta_h) or abs(delta_h) > DIVERGENCE_THRESHOLD:
        metropolis_accept(-np.inf, rng)
        return Transition(x0, False, delta_h=delta_h, divergent=True)
    if metropolis_accept(-delta_h, rng):
        return Transition(x1, True, log_density=log_density_fn(x1), delta_h=delta_h)
    return Transition(x0, False, delta_h=delta_h)


def hmc_update(x, logdens_fn, grad_fn, step_size, n_steps, rng, metric=None):
    """HMC transition with a constant mass matrix (identity by default)."""
    x = np.asarray(x, dtype=float)
    metric = metric or IdentityMetric(x.size)
    p0 = metric.sample_momentum(rng)
    h0 = _energy(x, p0, logdens_fn, metric)
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            x1, p1 = leapfrog(x, p0, grad_fn, metric, step_size, n_steps)
            h1 = _energy(x1, p1, logdens_fn, metric) if np.all(np.isfinite(x1)) else np.inf
        except (FloatingPointError, OverflowError):
            x1, h1 = x, np.inf
    return _finish(x, x1, h0, h1, rng, logdens_fn)


def rmhmc_update_fixed_metric(x, metric, logdens_fn, grad_fn, step_size, n_steps, rng):
    """HMC whose mass matrix is a fixed metric: momenta from N(0, G), explicit leapfrog."""
    return hmc_update(x, logdens_fn, grad_fn, step_size, n_steps, rng, metric=metric)


def _converged(new, old, tol):
    return np.max(np.abs(new - old)) <= tol * (1.0 + np.max(np.abs(old)))


def generalized_leapfrog(x, p, grad_fn, metric_fn, step_size, n_steps, implicit_iters=6,
                         implicit_tol=1e-8, metric=None):
    """Generalized leapfrog for H = -log pi(x) + 1/2 log|G(x)| + 1/2 p^T G(x)^{-1} p.

    Per step: an implicit half step in p, an implicit full step in x (both
    solved by fixed-point iteration), then an explicit half step in p.

    Returns:
        tuple: (x, p, metric at the final x)

    Raises:
        FixedPointNoConvergence: If an implicit step does not converge or leaves
            the finite range
    """
    x = np.array(x, dtype=float)
    p = np.array(p, dtype=float)
    half = 0.5 * step_size
    metric = metric or metric_fn(x)

    def force(g, metric, p):
        # -dH/dx
        return g - 0.5 * metric.grad_logdet() + 0.5 * metric.grad_quadratic(metric.solve(p))

    for _ in range(n_steps):
        g = grad_fn(x)
        if metric.constant:
            p_half = p + half * force(g, metric, p)
        else:
            logdet_term = g - 0.5 * metric.grad_logdet()
            p_half = p
            for _ in range(implicit_iters):
                p_next = p + half * (logdet_term + 0.5 * metric.grad_quadratic(metric.solve(p_half)))
                if not np.all(np.isfinite(p_next)):
                    raise FixedPointNoConvergence("Implicit momentum step diverged")
                done = _converged(p_next, p_half, implicit_tol)
                p_half = p_next
                if done:
                    break
            else:
                raise FixedPointNoConvergence("Implicit momentum step did not converge")

        u0 = metric.solve(p_half)
        if metric.constant:
            x_new = x + step_size * u0
            new_metric = metric_fn(x_new)
        else:
            x_new = x + step_size * u0
            for _ in range(implicit_iters):
                new_metric = metric_fn(x_new)
                x_next = x + half * (u0 + new_metric.solve(p_half))
                if not np.all(np.isfinite(x_next)):
                    raise FixedPointNoConvergence("Implicit position step diverged")
                done = _converged(x_next, x_new, implicit_tol)
                x_new = x_next
                if done:
                    break
            else:
                raise FixedPointNoConvergence("Implicit position step did not converge")
            new_metric = metric_fn(x_new)

        x, metric = x_new, new_metric
        p = p_half + half * force(grad_fn(x), metric, p_half)
    return x, p, metric


def rmhmc_update_position_metric(x, logdens_fn, grad_fn, metric_fn, step_size, n_steps, rng,
                                 implicit_iters=6, implicit_tol=1e-8):
    """RM-HMC transition with a position-dependent metric G(x)."""
    x = np.asarray(x, dtype=float)
    metric0 = metric_fn(x)
    p0 = metric0.sample_momentum(rng)
    h0 = _energy(x, p0, logdens_fn, metric0, include_logdet=True)
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            x1, p1, metric1 = generalized_leapfrog(x, p0, grad_fn, metric_fn, step_size, n_steps,
                                                   implicit_iters, implicit_tol, metric=metric0)
        except (NumericalError, ValueError, np.linalg.LinAlgError) as e:
            logger.debug(f"Generalized leapfrog failed: {e}")
            metropolis_accept(-np.inf, rng)
            return Transition(x, False, fixed_point_failure=True)
        finite = np.all(np.isfinite(x1)) and np.all(np.isfinite(p1))
        h1 = _energy(x1, p1, logdens_fn, metric1, include_logdet=True) if finite else np.inf
    return _finish(x, x1, h0, h1, rng, logdens_fn)


def mh_update(x, step, logdens_fn, rng, current_logdens=None):
    """Gaussian random-walk Metropolis: x' = x + step * z."""
    x = np.asarray(x, dtype=float)
    current = logdens_fn(x) if current_logdens is None else current_logdens
    proposal = x + step * rng.standard_normal(x.shape)
    proposed = logdens_fn(proposal)
    if metropolis_accept(proposed - current, rng):
        return Transition(proposal, True, log_density=proposed)
    return Transition(x, False, log_density=current)


def dirichlet_logpdf(w, concentration):
    """log Dirichlet(w; concentration) for w strictly inside the simplex."""
    return float(special.gammaln(concentration.sum()) - special.gammaln(concentration).sum()
                 + np.sum((concentration - 1.0) * np.log(w)))


def mh_dirichlet_update(weights, logdens_fn, concentration, rng, floor=1e-3,
                        proposal_correction=True, current_logdens=None):
    """MH on the simplex with proposal w' ~ Dirichlet(concentration * w + floor).

    Args:
        weights (numpy.ndarray): Current simplex point
        logdens_fn (callable): Target log density over simplex points
        concentration (float): Proposal concentration scale; larger values
            keep proposals closer to the current point
        floor (float): Added to every proposal parameter
        proposal_correction (bool): Include the Hastings ratio of the
            asymmetric proposal; only disabled to demonstrate the bias
    """
    w = np.asarray(weights, dtype=float)
    current = logdens_fn(w) if current_logdens is None else current_logdens
    forward_params = concentration * w + floor
    try:
        proposal = rng.dirichlet(forward_params)
        if not np.all(np.isfinite(proposal)) or np.any(proposal <= 0):
            raise SimplexViolation(f"Proposed weights {proposal} left the open simplex")
    except SimplexViolation:
        metropolis_accept(-np.inf, rng)
        return Transition(w, False, log_density=current, simplex_violation=True)

    proposed = logdens_fn(proposal)
    log_ratio = proposed - current
    if proposal_correction:
        log_ratio += (dirichlet_logpdf(w, concentration * proposal + floor)
                      - dirichlet_logpdf(proposal, forward_params))
    if metropolis_accept(log_ratio, rng):
        return Transition(proposal, True, log_density=proposed)
    return Transition(w, False, log_density=current)


def mh_concentration_update(alpha, step, logdens_fn, rng):
    """Random walk on log(alpha); logdens_fn must include the log-scale Jacobian."""
    log_alpha = np.log(alpha)
    transition = mh_update(np.array([log_alpha]), step, lambda v: logdens_fn(float(np.exp(v[0]))), rng)
    transition.state = float(np.exp(transition.state[0]))
    return transition


@dataclass
class ChainState:
    """Current position of one chain; nu is kept in sync under AA."""
    f: np.ndarray
    hyper: HyperState
    nu: Optional[np.ndarray] = None


def latent_logdensity(f, theta, ctx):
    """log p(y|f) + log p(f|theta), the target of the latent block."""
    value = log_gp_prior(f, ctx.covariances(theta))
    if ctx.use_likelihood:
        value += log_likelihood(ctx.labels, f)
    return value


def update_latent(state, ctx, config, rng):
    """Update f given theta with the configured latent sampler."""
    theta = state.hyper.theta

    def logdens(f):
        return latent_logdensity(f, theta, ctx)

    def grad(f):
        return grad_f(f, theta, ctx)

    if config.latent_sampler == "hmc":
        transition = hmc_update(state.f, logdens, grad, config.step_size_f, config.leapfrog_steps, rng)
    elif config.latent_sampler == "rmhmc_fixed":
        transition = rmhmc_update_fixed_metric(state.f, homogeneous_metric(theta, ctx), logdens, grad,
                                               config.step_size_f, config.leapfrog_steps, rng)
    else:
        transition = rmhmc_update_position_metric(
            state.f, logdens, grad, lambda f: metric_f(f, theta, ctx), config.step_size_f,
            config.leapfrog_steps, rng, config.implicit_iters, config.implicit_tol)
    state.f = transition.state
    return transition


def _update_alpha(state, ctx, config, rng):
    theta = state.hyper.theta
    transition = mh_concentration_update(
        state.hyper.alpha, config.alpha_step,
        lambda alpha: prior_logdensity(theta, ctx.prior, alpha), rng)
    state.hyper = HyperState(theta, "dirichlet", transition.state)
    return transition


def _update_theta_mh(state, ctx, config, rng, target):
    """Random-walk or Dirichlet-proposal MH on theta for a given target(theta, alpha)."""
    hyper = state.hyper
    if config.hyper_sampler == "mh":
        shape = hyper.theta.shape
        transition = mh_update(hyper.theta.ravel(), config.step_size_theta,
                               lambda v: target(v.reshape(shape), hyper.alpha), rng)
        transition.state = transition.state.reshape(shape)
        state.hyper = HyperState(transition.state, hyper.variant, hyper.alpha)
        return transition, None

    # Dirichlet proposals, one class at a time
    theta = hyper.theta.copy()
    accepted = False
    flags = {"divergent": False, "fixed_point_failure": False, "simplex_violation": False}
    for c in range(theta.shape[0]):
        def class_target(w, c=c):
            candidate = theta.copy()
            candidate[c] = np.log(w)
            return target(candidate, hyper.alpha)

        transition = mh_dirichlet_update(np.exp(theta[c]), class_target, config.dirichlet_concentration,
                                         rng, floor=config.dirichlet_floor)
        if transition.accepted:
            theta[c] = np.log(transition.state)
            theta[c] -= special.logsumexp(theta[c])
            accepted = True
        flags["simplex_violation"] |= transition.simplex_violation
    state.hyper = HyperState(theta, "dirichlet", hyper.alpha)
    alpha_transition = _update_alpha(state, ctx, config, rng)
    return Transition(theta, accepted, **flags), alpha_transition


def update_theta_sa(state, ctx, config, rng):
    """Update theta given f (sufficient augmentation)."""
    f = state.f
    hyper = state.hyper
    if config.hyper_sampler == "fixed":
        return None, None

    def target(theta, alpha=None):
        return log_gp_prior(f, ctx.covariances(theta)) + prior_logdensity(theta, ctx.prior, alpha)

    if config.hyper_sampler in ("mh", "dirichlet_mh"):
        return _update_theta_mh(state, ctx, config, rng, target)

    shape = hyper.theta.shape

    def logdens(v):
        return target(v.reshape(shape))

    def grad(v):
        return grad_theta(f, v.reshape(shape), ctx).ravel()

    x = hyper.theta.ravel()
    if config.hyper_sampler == "hmc":
        transition = hmc_update(x, logdens, grad, config.step_size_theta, config.leapfrog_steps, rng)
    elif config.theta_metric == "frozen":
        transition = rmhmc_update_fixed_metric(
            x, theta_metric(hyper.theta, ctx, position_dependent=False), logdens, grad,
            config.step_size_theta, config.leapfrog_steps, rng)
    else:
        transition = rmhmc_update_position_metric(
            x, logdens, grad, lambda v: theta_metric(v.reshape(shape), ctx), config.step_size_theta,
            config.leapfrog_steps, rng, config.implicit_iters, config.implicit_tol)
    transition.state = transition.state.reshape(shape)
    state.hyper = HyperState(transition.state, hyper.variant, hyper.alpha)
    return transition, None


def update_theta_aa(state, ctx, config, rng):
    """Update theta with the whitened latents nu held fixed (ancillary augmentation).

    The target is log p(y | L(theta) nu) + log p(theta); p(nu) does not
    depend on theta. f is rebuilt from nu at the new theta.
    """
    if config.hyper_sampler == "fixed":
        return None, None
    nu = state.nu

    def target(theta, alpha=None):
        value = prior_logdensity(theta, ctx.prior, alpha)
        if ctx.use_likelihood:
            value += log_likelihood(ctx.labels, unwhiten(nu, ctx.covariances(theta)))
        return value

    transition, alpha_transition = _update_theta_mh(state, ctx, config, rng, target)
    state.f = unwhiten(nu, ctx.covariances(state.hyper.theta))
    return transition, alpha_transition


@dataclass
class ScanRecord:
    """Transitions of one Gibbs scan, by block."""
    latent: Transition
    theta: Optional[Transition] = None
    alpha: Optional[Transition] = None

    def items(self):
        return [(name, getattr(self, name)) for name in BLOCKS if getattr(self, name) is not None]


def gibbs_scan_SA(state, ctx, config, rng):
    """f | theta, y then theta | f."""
    latent = update_latent(state, ctx, config, rng)
    theta, alpha = update_theta_sa(state, ctx, config, rng)
    return state, ScanRecord(latent, theta, alpha)


def gibbs_scan_AA(state, ctx, config, rng):
    """f | theta, y (in f-space, then nu synced) then theta | nu, y."""
    latent = update_latent(state, ctx, config, rng)
    state.nu = whiten(state.f, ctx.covariances(state.hyper.theta))
    theta, alpha = update_theta_aa(state, ctx, config, rng)
    return state, ScanRecord(latent, theta, alpha)


def gibbs_scan(state, ctx, config, rng):
    if config.augmentation == "AA":
        return gibbs_scan_AA(state, ctx, config, rng)
    return gibbs_scan_SA(state, ctx, config, rng)


def initial_state(ctx, config, rng, initial_theta=None):
    """Overdispersed start: theta from its prior, f ~ N(0, K(theta))."""
    if initial_theta is not None:
        hyper = HyperState(np.asarray(initial_theta, dtype=float), "fixed")
    else:
        hyper = sample_prior_hyper(ctx.prior, ctx.m, ctx.q, rng)
    f = sample_prior_latent(hyper.theta, ctx, rng)
    nu = whiten(f, ctx.covariances(hyper.theta)) if config.augmentation == "AA" else None
    return ChainState(f, hyper, nu)


@dataclass
class ChainTrace:
    """Kept samples of one chain plus its acceptance bookkeeping."""
    chain_id: int
    iterations: np.ndarray
    theta: np.ndarray
    log_joint: np.ndarray
    f: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    accepted: Dict[str, np.ndarray] = field(default_factory=dict)
    proposed_counts: Dict[str, int] = field(default_factory=dict)
    accepted_counts: Dict[str, int] = field(default_factory=dict)
    divergences: int = 0
    fixed_point_failures: int = 0
    simplex_violations: int = 0
    jitter_events: int = 0
    seed_keys: Tuple[int, ...] = ()
    failed: bool = False
    error: Optional[str] = None

    @property
    def n_samples(self):
        return len(self.iterations)

    @property
    def acceptance_rates(self):
        return {block: self.accepted_counts[block] / self.proposed_counts[block]
                for block in self.proposed_counts if self.proposed_counts[block]}

    @property
    def weights(self):
        return np.exp(self.theta)


def _chain_log_joint(state, ctx):
    value = latent_logdensity(state.f, state.hyper.theta, ctx)
    if state.hyper.variant != "fixed":
        value += prior_logdensity(state.hyper.theta, ctx.prior, state.hyper.alpha)
    return value


def run_chain(ctx, config, chain_id=0, seed_keys=(), initial_theta=None, progress=False):
    """Run one chain and keep every thin-th sample after burn-in.

    A NumericalError that escapes the update blocks (a covariance that
    cannot be factorized) stops the chain; the samples kept so far are
    returned with failed=True.

    Args:
        ctx (ModelContext): Model of this chain (not shared)
        config (SamplerConfig): Sampler settings
        chain_id (int): Chain index, part of the seed path
        seed_keys (tuple): Leading seed path, e.g. (fold,)
        initial_theta (numpy.ndarray, optional): Fixed starting theta, used
            with hyper_sampler 'fixed'

    Returns:
        ChainTrace: Thinned post burn-in samples
    """
    keys = (STREAM_CHAIN,) + tuple(seed_keys) + (chain_id,)
    rng = rng_stream(config.seed, *keys)
    jitter_start = ctx.jitter_events
    state = initial_state(ctx, config, rng, initial_theta)

    kept_iterations, kept_theta, kept_f, kept_alpha, kept_lj = [], [], [], [], []
    kept_flags = {block: [] for block in BLOCKS}
    proposed = {block: 0 for block in BLOCKS}
    accepted = {block: 0 for block in BLOCKS}
    counts = {"divergent": 0, "fixed_point_failure": 0, "simplex_violation": 0}
    failed, error = False, None

    iterator = range(config.n_iterations)
    if progress:
        iterator = tqdm(iterator, desc=f"Chain {chain_id} {config.label}", unit="it")
    for it in iterator:
        try:
            state, record = gibbs_scan(state, ctx, config, rng)
        except NumericalError as e:
            logger.error(f"Chain {chain_id} aborted at iteration {it}: {e}")
            failed, error = True, str(e)
            break

        flags = {}
        for block, transition in record.items():
            proposed[block] += 1
            accepted[block] += int(transition.accepted)
            flags[block] = transition.accepted
            for name in counts:
                counts[name] += int(getattr(transition, name))

        if it >= config.burn_in and (it - config.burn_in + 1) % config.thin == 0:
            kept_iterations.append(it)
            kept_theta.append(state.hyper.theta.copy())
            if config.save_latent:
                kept_f.append(state.f.copy())
            if state.hyper.alpha is not None:
                kept_alpha.append(state.hyper.alpha)
            kept_lj.append(_chain_log_joint(state, ctx))
            for block in BLOCKS:
                kept_flags[block].append(flags.get(block, False))

    m, q = ctx.m, ctx.q
    trace = ChainTrace(
        chain_id=chain_id,
        iterations=np.asarray(kept_iterations, dtype=int),
        theta=np.asarray(kept_theta, dtype=float).reshape(-1, m, q),
        log_joint=np.asarray(kept_lj, dtype=float),
        f=np.asarray(kept_f, dtype=float).reshape(-1, m * ctx.n) if config.save_latent else None,
        alpha=np.asarray(kept_alpha, dtype=float) if kept_alpha else None,
        accepted={block: np.asarray(kept_flags[block], dtype=bool) for block in BLOCKS if proposed[block]},
        proposed_counts={block: proposed[block] for block in BLOCKS if proposed[block]},
        accepted_counts={block: accepted[block] for block in BLOCKS if proposed[block]},
        divergences=counts["divergent"],
        fixed_point_failures=counts["fixed_point_failure"],
        simplex_violations=counts["simplex_violation"],
        jitter_events=ctx.jitter_events - jitter_start,
        seed_keys=keys,
        failed=failed,
        error=error,
    )
    if not failed:
        rates = ", ".join(f"{block} {rate:.2f}" for block, rate in trace.acceptance_rates.items())
        logger.info(f"Chain {chain_id} finished: {trace.n_samples} samples kept, acceptance {rates}")
    return trace


def _ignore_sigint():
    signal.signal(signal.SIGINT, signal.SIG_IGN)


def _run_chain_job(args):
    ctx, config, chain_id, seed_keys, initial_theta = args
    try:
        return run_chain(ctx, config, chain_id, seed_keys, initial_theta)
    except GPCError as e:
        logger.error(f"Chain {chain_id} could not start: {e}")
        return ChainTrace(chain_id, np.zeros(0, dtype=int), np.zeros((0, ctx.m, ctx.q)), np.zeros(0),
                          seed_keys=(STREAM_CHAIN,) + tuple(seed_keys) + (chain_id,),
                          failed=True, error=str(e))


def run_chains(ctx, config, seed_keys=(), initial_theta=None, jobs=1, progress=True):
    """Run config.n_chains independent chains, in parallel when jobs > 1.

    Each chain gets its own copy of the model context and its own random
    stream (seed, STREAM_CHAIN, *seed_keys, chain).

    Returns:
        list of ChainTrace: One trace per chain, in chain order
    """
    args = [(copy.deepcopy(ctx), config, chain, tuple(seed_keys), initial_theta)
            for chain in range(config.n_chains)]
    workers = min(jobs or 1, config.n_chains)
    logger.info(f"Running {config.n_chains} chains of scheme {config.label} on {workers} worker(s)")
    if workers > 1:
        with Pool(workers, _ignore_sigint) as pool:
            traces = pool.map(_run_chain_job, args)
    else:
        traces = []
        for chain_args in tqdm(args, desc="Chains", unit="chain", disable=not progress):
            traces.append(_run_chain_job(chain_args))

    failed = [trace.chain_id for trace in traces if trace.failed]
    if failed:
        logger.error(f"Chains {failed} failed; their partial traces are kept")
    return traces
