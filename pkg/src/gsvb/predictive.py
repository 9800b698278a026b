"""Posterior-predictive draws and marginal credible sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .errors import BadLevel, PoissonRateOverflow
from .model import Family, VariationalState

POISSON_RATE_CAP = 1e15
DEFAULT_DRAWS = 10_000


@dataclass(frozen=True)
class PredictiveSample:
    draws: np.ndarray
    interval: tuple[float, float]

    @property
    def mean(self) -> float:
        return float(self.draws.mean())

    @property
    def median(self) -> float:
        return float(np.median(self.draws))


@dataclass(frozen=True)
class CredibleSet:
    """Marginal credible set: ``interval`` (or None) plus an optional atom at zero."""

    interval: tuple[float, float] | None
    has_atom: bool
    alpha: float

    def contains(self, x: float) -> bool:
        if self.has_atom and x == 0.0:
            return True
        if self.interval is None:
            return False
        return self.interval[0] <= x <= self.interval[1]

    def to_dict(self) -> dict:
        lo, hi = self.interval if self.interval is not None else (None, None)
        return {"lo": lo, "hi": hi, "zero_atom": self.has_atom, "alpha": self.alpha}


def set_size(cs: CredibleSet) -> float:
    """Lebesgue measure: the interval length, atoms count for nothing."""
    if cs.interval is None:
        return 0.0
    return float(cs.interval[1] - cs.interval[0])


def _block_sqrt(sigma):
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        # positive semidefinite (e.g. a collapsed slab): symmetric square root
        w, V = np.linalg.eigh(0.5 * (sigma + sigma.T))
        return V * np.sqrt(np.clip(w, 0.0, None))


def sample_variational_beta(state: VariationalState, rng: np.random.Generator,
                            size: int | None = None) -> np.ndarray:
    """Draw beta from the variational posterior; shape (p,) or (size, p)."""
    n = 1 if size is None else int(size)
    p = state.mu.shape[0]
    out = np.zeros((n, p))
    start = 0
    for k, sigma in enumerate(state.sigma_blocks):
        m = sigma.shape[0]
        sl = slice(start, start + m)
        start += m
        on = rng.random(n) < state.gamma[k]
        eps = rng.standard_normal((n, m))
        draw = state.mu[sl] + eps @ _block_sqrt(sigma).T
        out[:, sl] = np.where(on[:, None], draw, 0.0)
    return out[0] if size is None else out


def _interval(draws, alpha):
    lo, hi = np.quantile(draws, [alpha / 2.0, 1.0 - alpha / 2.0])
    return float(lo), float(hi)


def _draw_response(eta, family, rng, scale=None, dof=None):
    if family is Family.GAUSSIAN:
        return eta + scale * rng.standard_t(dof, size=eta.shape)
    if family is Family.BINOMIAL:
        return (rng.random(eta.shape) < expit(eta)).astype(float)
    if np.any(eta > np.log(POISSON_RATE_CAP)):
        raise PoissonRateOverflow(f"Poisson rate exp({eta.max():.3g}) exceeds {POISSON_RATE_CAP:g}")
    return rng.poisson(np.exp(eta)).astype(float)


def posterior_predictive(state: VariationalState, x_star, family: Family,
                         n_draws: int = DEFAULT_DRAWS, rng: np.random.Generator | None = None,
                         alpha: float = 0.05) -> PredictiveSample:
    """Predictive draws of y* at covariates ``x_star`` under the variational posterior.

    Gaussian draws use the Student-t form obtained by integrating the noise
    variance against its inverse-Gamma factor: ``x^T beta + sqrt(b'/a') T``
    with ``T ~ t(2a')``.
    """
    family = Family(family)
    if n_draws < 1:
        raise ValueError("n_draws must be at least 1")
    if not 0.0 < alpha < 1.0:
        raise BadLevel(f"alpha={alpha} not in (0, 1)")
    rng = rng if rng is not None else np.random.default_rng(0)
    beta = sample_variational_beta(state, rng, n_draws)
    eta = beta @ np.asarray(x_star, dtype=float)
    if family is Family.GAUSSIAN:
        y = _draw_response(eta, family, rng, np.sqrt(state.tau_b / state.tau_a), 2.0 * state.tau_a)
    else:
        y = _draw_response(eta, family, rng)
    return PredictiveSample(y, _interval(y, alpha))


def posterior_predictive_chain(chain, x_star, n_draws: int = DEFAULT_DRAWS,
                               rng: np.random.Generator | None = None,
                               alpha: float = 0.05) -> PredictiveSample:
    """Gaussian predictive draws from kept Gibbs samples (resampled uniformly)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    idx = rng.integers(0, chain.beta_samples.shape[0], size=n_draws)
    beta = chain.beta_samples[idx] * chain.z_samples[idx][:, chain.group_index]
    eta = beta @ np.asarray(x_star, dtype=float)
    y = eta + np.sqrt(chain.xi_samples[idx]) * rng.standard_normal(n_draws)
    return PredictiveSample(y, _interval(y, alpha))


def predict_rows(state: VariationalState, X_new, family: Family, n_draws: int = DEFAULT_DRAWS,
                 seed: int = 0, alpha: float = 0.05) -> np.ndarray:
    """Summaries (mean, median, lo, hi) for every row of ``X_new``.

    Each row draws from its own stream spawned from ``seed``, so results do
    not depend on how rows are batched.
    """
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    streams = np.random.SeedSequence(seed).spawn(X_new.shape[0])
    out = np.empty((X_new.shape[0], 4))
    for i, (x, ss) in enumerate(zip(X_new, streams)):
        ps = posterior_predictive(state, x, family, n_draws, np.random.default_rng(ss), alpha)
        out[i] = (ps.mean, ps.median, *ps.interval)
    return out


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise BadLevel(f"alpha={alpha} not in (0, 1)")


def credible_set_from_moments(gamma: float, mu: float, var: float, alpha: float = 0.05) -> CredibleSet:
    """Credible set for a spike-and-slab marginal ``(1-gamma) delta_0 + gamma N(mu, var)``.

    Excluded (``gamma < alpha``): the atom alone. Otherwise the slab interval
    carries mass ``gamma - alpha`` (central mass ``1 - alpha/gamma`` of the
    normal) and the atom, present whenever ``gamma < 1``, adds ``1 - gamma``,
    so the set holds exactly ``1 - alpha``.
    """
    _check_alpha(alpha)
    if gamma < alpha:
        return CredibleSet(None, True, alpha)
    central = 1.0 - alpha / gamma
    half = np.sqrt(var) * norm.ppf(0.5 * (1.0 + central))
    return CredibleSet((float(mu - half), float(mu + half)), bool(gamma < 1.0), alpha)


def marginal_credible_set(state: VariationalState, j: int, alpha: float = 0.05) -> CredibleSet:
    """Credible set for coordinate ``j`` (zero-based) under the variational marginal."""
    _check_alpha(alpha)
    p = state.mu.shape[0]
    if not 0 <= j < p:
        raise IndexError(f"coordinate {j} out of range for p={p}")
    start = 0
    for k, sigma in enumerate(state.sigma_blocks):
        m = sigma.shape[0]
        if j < start + m:
            return credible_set_from_moments(float(state.gamma[k]), float(state.mu[j]),
                                             float(sigma[j - start, j - start]), alpha)
        start += m
    raise AssertionError("unreachable")


def all_credible_sets(state: VariationalState, alpha: float = 0.05) -> list[CredibleSet]:
    gam = np.repeat(state.gamma, [s.shape[0] for s in state.sigma_blocks])
    var = state.sigma_diag()
    return [credible_set_from_moments(float(g), float(m), float(v), alpha)
            for g, m, v in zip(gam, state.mu, var)]


def chain_credible_sets(chain, alpha: float = 0.05) -> list[CredibleSet]:
    """Marginal sets from Gibbs draws of ``z_k * beta_j``, same three-way rule.

    The slab interval is the empirical central ``1 - alpha/PIP`` interval of
    the draws with ``z_k = 1``.
    """
    _check_alpha(alpha)
    out = []
    z = chain.z_samples[:, chain.group_index].astype(bool)
    for j in range(chain.beta_samples.shape[1]):
        pip = float(z[:, j].mean())
        if pip < alpha or not z[:, j].any():
            out.append(CredibleSet(None, True, alpha))
            continue
        central = 1.0 - alpha / pip
        lo, hi = np.quantile(chain.beta_samples[z[:, j], j], [0.5 - central / 2, 0.5 + central / 2])
        out.append(CredibleSet((float(lo), float(hi)), pip < 1.0, alpha))
    return out
