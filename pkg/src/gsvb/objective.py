"""Tractable surrogate of the negative ELBO for the three GLM families.

The surrogate is ``F = kl_surrogate + hyper_kl + expected_nll`` where the slab
norm expectation is replaced by its Jensen bound and, for the Binomial family,
the log-sigmoid by the Jaakkola-Jordan quadratic bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, xlogy

from .errors import MgfOverflow
from .model import Family, GroupedDesign, GsvbPrior, VariationalState, log_slab_constant

LOG_2PI = np.log(2.0 * np.pi)
MGF_CAP = 700.0


@dataclass(frozen=True)
class ObjectiveValue:
    total: float
    kl_surrogate: float
    hyper_kl: float
    expected_nll: float


def expected_cross_moment(state: VariationalState, i: int, j: int, design: GroupedDesign) -> float:
    """E[beta_i beta_j] under the variational posterior (zero-based indices)."""
    k, h = design.group_index[i], design.group_index[j]
    if k == h:
        s0 = design.groups[k][0]
        sig = state.sigma_blocks[k][i - s0, j - s0]
        return float(state.gamma[k] * (sig + state.mu[i] * state.mu[j]))
    return float(state.gamma[k] * state.gamma[h] * state.mu[i] * state.mu[j])


def group_linear_terms(state: VariationalState, design: GroupedDesign) -> tuple[np.ndarray, np.ndarray]:
    """Per-row, per-group slab means ``x_{i,G_k}^T mu_{G_k}`` and variances
    ``x_{i,G_k}^T Sigma_{G_k} x_{i,G_k}``, both shaped (n, M)."""
    n, M = design.n, design.n_groups
    lin = np.empty((n, M))
    quad = np.empty((n, M))
    X = design.X
    for k, sl in enumerate(design.slices):
        Xk = X[:, sl]
        lin[:, k] = Xk @ state.mu[sl]
        quad[:, k] = np.einsum("ij,jk,ik->i", Xk, state.sigma_blocks[k], Xk)
    return lin, quad


def row_second_moments(gamma, lin, quad) -> np.ndarray:
    """E[(x_i^T beta)^2] for every row, from the per-group terms."""
    mean = lin @ gamma
    var = (quad + lin**2) @ gamma - (lin**2) @ (gamma**2)
    return mean**2 + var


def _slab_terms(mu_k, sigma_k, lam: float) -> float:
    """Group-k bracket multiplying gamma_k in the KL surrogate."""
    m = mu_k.shape[0]
    sign, logdet = np.linalg.slogdet(sigma_k)
    if sign <= 0:
        return np.inf
    return (
        -0.5 * (m * LOG_2PI + logdet)
        - 0.5 * m
        - log_slab_constant(m)
        - m * np.log(lam)
        + lam * np.sqrt(np.trace(sigma_k) + mu_k @ mu_k)
    )


def kl_surrogate(state: VariationalState, prior: GsvbPrior, design: GroupedDesign) -> float:
    w = prior.w_bar
    total = 0.0
    for k, sl in enumerate(design.slices):
        g = float(state.gamma[k])
        total += xlogy(g, g / w) + xlogy(1.0 - g, (1.0 - g) / (1.0 - w))
        if g > 0.0:
            total += g * _slab_terms(state.mu[sl], state.sigma_blocks[k], prior.lam)
    return float(total)


def hyper_kl_gaussian(tau_a: float, tau_b: float, prior: GsvbPrior) -> float:
    """KL between inverse-Gamma(tau_a, tau_b) and inverse-Gamma(a, b)."""
    a, b = prior.a, prior.b
    return float(
        (tau_a - a) * digamma(tau_a)
        + a * np.log(tau_b / b)
        + gammaln(a)
        - gammaln(tau_a)
        + (b - tau_b) * tau_a / tau_b
    )


def expected_residual_ss(state: VariationalState, design: GroupedDesign, lin=None, quad=None) -> float:
    """E||y - X beta||^2 under the variational slab-and-spike."""
    if lin is None:
        lin, quad = group_linear_terms(state, design)
    second = row_second_moments(state.gamma, lin, quad).sum()
    cross = design.y @ (lin @ state.gamma)
    return float(design.yty - 2.0 * cross + second)


def expected_nll_gaussian(state: VariationalState, design: GroupedDesign, lin=None, quad=None) -> float:
    a, b = state.tau_a, state.tau_b
    rss = expected_residual_ss(state, design, lin, quad)
    return float(0.5 * design.n * (LOG_2PI + np.log(b) - digamma(a)) + 0.5 * a / b * rss)


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def jaakkola_a(t):
    """(s(t) - 1/2) / t, continued by its limit 1/4 at the origin."""
    t = np.abs(np.asarray(t, dtype=float))
    small = t < 1e-8
    safe = np.where(small, 1.0, t)
    return np.where(small, 0.25, np.tanh(0.5 * safe) / (2.0 * safe))


def jaakkola_pieces(x, t):
    """Return ``(bound, a(t))`` with ``bound <= log s(x)``, equality at x = +-t."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    a = jaakkola_a(t)
    bound = log_sigmoid(t) + 0.5 * (x - t) - 0.5 * a * (x**2 - t**2)
    return bound, a


def _jaakkola_t_terms(t):
    """t/2 - log s(t) - a(t) t^2 / 2 for each observation."""
    a = jaakkola_a(t)
    return 0.5 * t - log_sigmoid(t) - 0.5 * a * t**2, a


def expected_nll_binomial_bound(state: VariationalState, design: GroupedDesign, lin=None, quad=None) -> float:
    if lin is None:
        lin, quad = group_linear_terms(state, design)
    t = state.jaakkola_t
    const, a = _jaakkola_t_terms(t)
    second = row_second_moments(state.gamma, lin, quad)
    linear = (0.5 - design.y) * (lin @ state.gamma)
    return float(np.sum(linear + const + 0.5 * a * second))


def log_group_mgf(gamma, lin, quad, cap: float = MGF_CAP) -> np.ndarray:
    """log M_{Q_k}(x_{i,G_k}) for every row and group, shaped (n, M)."""
    expo = lin + 0.5 * quad
    active = gamma > 0.0
    if np.any(expo[:, active] > cap):
        raise MgfOverflow(
            f"MGF exponent {expo[:, active].max():.3g} exceeds cap {cap:g}"
        )
    with np.errstate(divide="ignore"):
        out = np.logaddexp(np.log(gamma) + expo, np.log1p(-gamma))
    out[:, gamma >= 1.0] = expo[:, gamma >= 1.0]
    out[:, ~active] = 0.0
    return out


def expected_nll_poisson(state: VariationalState, design: GroupedDesign, lin=None, quad=None,
                         cap: float = MGF_CAP) -> float:
    if lin is None:
        lin, quad = group_linear_terms(state, design)
    log_m = log_group_mgf(state.gamma, lin, quad, cap).sum(axis=1)
    if np.any(log_m > cap):
        raise MgfOverflow(f"MGF log value {log_m.max():.3g} exceeds cap {cap:g}")
    mean = lin @ state.gamma
    return float(design.log_y_factorial + np.exp(log_m).sum() - design.y @ mean)


def expected_nll(state: VariationalState, design: GroupedDesign, family: Family, lin=None, quad=None) -> float:
    family = Family(family)
    if lin is None:
        lin, quad = group_linear_terms(state, design)
    if family is Family.GAUSSIAN:
        return expected_nll_gaussian(state, design, lin, quad)
    if family is Family.BINOMIAL:
        return expected_nll_binomial_bound(state, design, lin, quad)
    return expected_nll_poisson(state, design, lin, quad)


def surrogate_objective(state: VariationalState, design: GroupedDesign, prior: GsvbPrior,
                        family: Family) -> ObjectiveValue:
    family = Family(family)
    kl = kl_surrogate(state, prior, design)
    hyper = hyper_kl_gaussian(state.tau_a, state.tau_b, prior) if family is Family.GAUSSIAN else 0.0
    nll = expected_nll(state, design, family)
    return ObjectiveValue(total=kl + hyper + nll, kl_surrogate=kl, hyper_kl=hyper, expected_nll=nll)
