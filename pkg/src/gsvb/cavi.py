"""Coordinate ascent fitting of the group spike-and-slab variational posterior."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, logit, polygamma

from .errors import InitFailure, MgfOverflow, NonPdBlock
from .model import (
    Family,
    GroupedDesign,
    GsvbPrior,
    VariationalKind,
    VariationalState,
    validate_grouped_design,
)
from .objective import (
    MGF_CAP,
    _slab_terms,
    expected_residual_ss,
    group_linear_terms,
    jaakkola_a,
    log_group_mgf,
    row_second_moments,
    surrogate_objective,
)
from .optim import lbfgs

log = logging.getLogger(__name__)

ETA_CLAMP = 500.0


@dataclass
class FitConfig:
    """Settings for :func:`fit`.

    ``init`` is ``"group_lasso"``, ``"zeros"`` or a :class:`VariationalState`
    to warm start from. ``init_reg=None`` picks a small group-LASSO penalty
    relative to the largest group gradient at zero.
    """

    max_sweeps: int = 1000
    tol: float = 1e-3
    kind: VariationalKind = VariationalKind.BLOCK
    init: Union[str, VariationalState] = "group_lasso"
    init_reg: float | None = None
    lbfgs_memory: int = 10
    lbfgs_tol: float = 1e-8
    lbfgs_max_iter: int = 200
    w_bounds: tuple[float, float] = (1e-8, 1e8)
    mgf_cap: float = MGF_CAP
    seed: int = 0

    def __post_init__(self):
        self.kind = VariationalKind(self.kind)
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not self.w_bounds[0] < self.w_bounds[1]:
            raise ValueError("w_bounds must satisfy lo < hi")


@dataclass
class FitResult:
    state: VariationalState
    objective_trace: list[float]
    sweeps_used: int
    converged: bool
    line_search_failures: int = 0
    eta_clamped: int = 0


@dataclass
class _Diagnostics:
    line_search_failures: int = 0
    eta_clamped: int = 0


@dataclass
class _Terms:
    """Cached per-row group terms, kept in sync with the state during a sweep."""

    lin: np.ndarray
    quad: np.ndarray
    diag: _Diagnostics = field(default_factory=_Diagnostics)

    @classmethod
    def build(cls, state, design):
        lin, quad = group_linear_terms(state, design)
        return cls(lin, quad)

    def refresh(self, k, state, design):
        sl = design.slices[k]
        Xk = design.X[:, sl]
        self.lin[:, k] = Xk @ state.mu[sl]
        self.quad[:, k] = np.einsum("ij,jk,ik->i", Xk, state.sigma_blocks[k], Xk)


def _terms(state, design, terms):
    return _Terms.build(state, design) if terms is None else terms


def _others_mean(state, terms, k):
    """sum_{h != k} gamma_h x_{i,G_h}^T mu_{G_h} for every row."""
    return terms.lin @ state.gamma - state.gamma[k] * terms.lin[:, k]


def _quadratic_model(k, state, design, family, terms):
    """Curvature Q and linear term g of the expected NLL in the slab of group k.

    For the Gaussian and Binomial families the group-k part of the expected
    NLL (with gamma_k = 1) is ``0.5 tr(Q (Sigma + mu mu^T)) + g^T mu``.
    """
    sl = design.slices[k]
    Xk = design.X[:, sl]
    c = _others_mean(state, terms, k)
    if family is Family.GAUSSIAN:
        r = state.tau_a / state.tau_b
        return r * design.gram_blocks[k], r * (Xk.T @ (c - design.y))
    a = jaakkola_a(state.jaakkola_t)
    Q = Xk.T @ (a[:, None] * Xk)
    g = Xk.T @ (0.5 - design.y + a * c)
    return Q, g


def _poisson_base(k, state, terms, cap):
    """log prod_{h != k} M_{Q_h}(x_{i,G_h}) for every row."""
    logm = log_group_mgf(state.gamma, terms.lin, terms.quad, cap)
    return logm.sum(axis=1) - logm[:, k]


def mu_objective(k, state, design, prior, family, config: FitConfig | None = None, terms=None):
    """``fun_grad(m)`` for the slab mean of group ``k`` with gamma_k set to 1.

    The value differs from the full surrogate by a constant that does not
    depend on ``m``.
    """
    config = config or FitConfig()
    family = Family(family)
    terms = _terms(state, design, terms)
    sl = design.slices[k]
    tr_sigma = float(np.trace(state.sigma_blocks[k]))
    lam = prior.lam

    if family is Family.POISSON:
        Xk = design.X[:, sl]
        base = _poisson_base(k, state, terms, config.mgf_cap)
        half_q = 0.5 * terms.quad[:, k]
        Xty = Xk.T @ design.y
        cap = config.mgf_cap

        def fun_grad(m):
            eta = Xk @ m + half_q
            if eta.max() > cap:
                return np.inf, np.zeros_like(m)
            w = np.exp(base + eta)
            nrm = np.sqrt(tr_sigma + m @ m)
            return w.sum() - Xty @ m + lam * nrm, Xk.T @ w - Xty + lam * m / nrm
    else:
        Q, g = _quadratic_model(k, state, design, family, terms)

        def fun_grad(m):
            Qm = Q @ m
            nrm = np.sqrt(tr_sigma + m @ m)
            return 0.5 * m @ Qm + g @ m + lam * nrm, Qm + g + lam * m / nrm
    return fun_grad


def update_mu_group(k, state, design, prior, family, config: FitConfig | None = None,
                    terms=None) -> np.ndarray:
    """Minimize the surrogate over the slab mean of group ``k`` (gamma_k set to 1)."""
    config = config or FitConfig()
    terms = _terms(state, design, terms)
    fun_grad = mu_objective(k, state, design, prior, family, config, terms)
    res = lbfgs(fun_grad, state.mu[design.slices[k]], memory=config.lbfgs_memory,
                gtol=config.lbfgs_tol, max_iter=config.lbfgs_max_iter)
    if res.line_search_failed and not res.converged:
        terms.diag.line_search_failures += 1
        log.debug("mu line search stalled in group %d (|g|=%.2e)", k, np.linalg.norm(res.grad))
    return res.x


def _solve_w(d, mu_sq, lam, bounds):
    """Root of w^2 (sum 1/(d+w) + ||mu||^2) = lam^2, the stationarity condition
    of the slab covariance objective along Sigma(w) = (Q + w I)^{-1}."""

    def h(u):
        w = np.exp(u)
        return 2.0 * u + np.log(np.sum(1.0 / (d + w)) + mu_sq) - 2.0 * np.log(lam)

    lo, hi = np.log(bounds[0]), np.log(bounds[1])
    if h(lo) >= 0.0:
        return bounds[0]
    if h(hi) <= 0.0:
        return bounds[1]
    return float(np.exp(brentq(h, lo, hi, xtol=1e-14, rtol=8.9e-16, maxiter=200)))


def update_sigma_group(k, state, design, prior, family, config: FitConfig | None = None,
                       terms=None) -> np.ndarray:
    """Minimize the surrogate over the slab covariance of group ``k``."""
    config = config or FitConfig()
    family = Family(family)
    terms = _terms(state, design, terms)
    sl = design.slices[k]
    mu_k = state.mu[sl]
    m = mu_k.shape[0]

    if family is not Family.POISSON:
        Q, _ = _quadratic_model(k, state, design, family, terms)
        if config.kind is VariationalKind.BLOCK:
            d, V = np.linalg.eigh(Q)
            d = np.clip(d, 0.0, None)
            w = _solve_w(d, mu_k @ mu_k, prior.lam, config.w_bounds)
            sigma = (V / (d + w)) @ V.T
            sigma = 0.5 * (sigma + sigma.T)
        else:
            d = np.clip(np.diag(Q), 0.0, None)
            w = _solve_w(d, mu_k @ mu_k, prior.lam, config.w_bounds)
            sigma = np.diag(1.0 / (d + w))
        try:
            np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError as exc:
            raise NonPdBlock(f"group {k}: covariance not positive definite (w={w:.3g})") from exc
        return sigma

    Xk = design.X[:, sl]
    base = _poisson_base(k, state, terms, config.mgf_cap)
    lin = terms.lin[:, k]
    lam = prior.lam
    mu_sq = mu_k @ mu_k
    cap = config.mgf_cap
    iu = np.triu_indices(m)
    diag_pos = np.flatnonzero(iu[0] == iu[1])

    def objective_and_sigma_grad(sigma):
        expo = lin + 0.5 * np.einsum("ij,jk,ik->i", Xk, sigma, Xk)
        if expo.max() > cap:
            return np.inf, None
        wts = np.exp(base + expo)
        nrm = np.sqrt(np.trace(sigma) + mu_sq)
        sign, logdet = np.linalg.slogdet(sigma)
        if sign <= 0:
            return np.inf, None
        f = wts.sum() - 0.5 * logdet + lam * nrm
        G = 0.5 * (Xk.T @ (wts[:, None] * Xk)) - 0.5 * np.linalg.inv(sigma) \
            + (0.5 * lam / nrm) * np.eye(m)
        return f, G

    if config.kind is VariationalKind.BLOCK:
        U0 = np.linalg.cholesky(state.sigma_blocks[k]).T
        theta0 = U0[iu].copy()
        theta0[diag_pos] = np.log(theta0[diag_pos])

        def unpack(theta):
            vals = theta.copy()
            vals[diag_pos] = np.exp(vals[diag_pos])
            U = np.zeros((m, m))
            U[iu] = vals
            return U

        # Sigma = U^T U, so x^T Sigma x = ||U x||^2 and log|Sigma| = 2 sum log U_jj
        def fun_grad(theta):
            U = unpack(theta)
            XU = Xk @ U.T
            expo = lin + 0.5 * np.einsum("ij,ij->i", XU, XU)
            if expo.max() > cap:
                return np.inf, np.zeros_like(theta)
            wts = np.exp(base + expo)
            nrm = np.sqrt(np.sum(U * U) + mu_sq)
            f = wts.sum() - theta[diag_pos].sum() + lam * nrm
            gU = (XU.T @ (wts[:, None] * Xk) + (lam / nrm) * U)[iu]
            gU[diag_pos] = gU[diag_pos] * U[iu][diag_pos] - 1.0
            return f, gU

        res = lbfgs(fun_grad, theta0, memory=config.lbfgs_memory,
                    gtol=config.lbfgs_tol, max_iter=config.lbfgs_max_iter)
        U = unpack(res.x)
        sigma = U.T @ U
    else:
        theta0 = np.log(np.diag(state.sigma_blocks[k]))

        def fun_grad(theta):
            s = np.exp(theta)
            f, G = objective_and_sigma_grad(np.diag(s))
            if G is None:
                return np.inf, np.zeros_like(theta)
            return f, np.diag(G) * s

        res = lbfgs(fun_grad, theta0, memory=config.lbfgs_memory,
                    gtol=config.lbfgs_tol, max_iter=config.lbfgs_max_iter)
        sigma = np.diag(np.exp(res.x))
    if res.line_search_failed and not res.converged:
        terms.diag.line_search_failures += 1
    return sigma


def gamma_logit(k, state, design, prior, family, config: FitConfig | None = None,
                terms=None) -> float:
    """Unclamped log-odds of the optimal inclusion probability of group ``k``.

    The surrogate is affine in gamma_k apart from the Bernoulli entropy, so
    the optimum is logistic(logit(w_bar) - c_k), where c_k is the coefficient
    of gamma_k: slab KL terms plus the change in expected NLL between
    gamma_k = 1 and gamma_k = 0.
    """
    config = config or FitConfig()
    family = Family(family)
    terms = _terms(state, design, terms)
    sl = design.slices[k]
    mu_k = state.mu[sl]
    sigma = state.sigma_blocks[k]
    slab = _slab_terms(mu_k, sigma, prior.lam)
    if family is Family.POISSON:
        base = _poisson_base(k, state, terms, config.mgf_cap)
        expo = terms.lin[:, k] + 0.5 * terms.quad[:, k]
        if expo.max() > config.mgf_cap:
            raise MgfOverflow(f"group {k}: MGF exponent {expo.max():.3g} exceeds cap")
        delta_nll = np.sum(np.expm1(expo) * np.exp(base)) - design.y @ terms.lin[:, k]
    else:
        Q, g = _quadratic_model(k, state, design, family, terms)
        delta_nll = 0.5 * (np.sum(Q * sigma) + mu_k @ Q @ mu_k) + g @ mu_k
    return float(logit(prior.w_bar) - slab - delta_nll)


def update_gamma_group(k, state, design, prior, family, config: FitConfig | None = None,
                       terms=None) -> float:
    terms = _terms(state, design, terms)
    eta = gamma_logit(k, state, design, prior, family, config, terms)
    if abs(eta) > ETA_CLAMP:
        terms.diag.eta_clamped += 1
        eta = float(np.clip(eta, -ETA_CLAMP, ETA_CLAMP))
    return float(expit(eta))


def update_tau_variational(state, design, prior, terms=None) -> tuple[float, float]:
    """Optimal inverse-Gamma parameters for the noise variance.

    Setting both partial derivatives of the surrogate to zero gives
    ``a' = a + n/2`` and ``b' = b + E||y - X beta||^2 / 2``; the stationary
    point is the unique minimizer.
    """
    if terms is None:
        rss = expected_residual_ss(state, design)
    else:
        rss = expected_residual_ss(state, design, terms.lin, terms.quad)
    return prior.a + 0.5 * design.n, prior.b + 0.5 * rss


def tau_gradient(state, design, prior, terms=None) -> np.ndarray:
    """Partial derivatives of the Gaussian surrogate in (tau_a, tau_b)."""
    if terms is None:
        rss = expected_residual_ss(state, design)
    else:
        rss = expected_residual_ss(state, design, terms.lin, terms.quad)
    a, b = state.tau_a, state.tau_b
    shape = prior.a + 0.5 * design.n
    rate = prior.b + 0.5 * rss
    return np.array([(a - shape) * polygamma(1, a) + rate / b - 1.0, shape / b - a * rate / b**2])


def update_jaakkola_t(state, design, terms=None) -> np.ndarray:
    """Tangent points minimizing the logistic bound: sqrt(E[(x_i^T beta)^2])."""
    terms = _terms(state, design, terms)
    second = row_second_moments(state.gamma, terms.lin, terms.quad)
    return np.sqrt(np.clip(second, 0.0, None))


def _family_loss(family, design):
    X, y, n = design.X, design.y, design.n

    if family is Family.GAUSSIAN:
        def loss(beta):
            r = X @ beta - y
            return 0.5 * (r @ r) / n, X.T @ r / n
    elif family is Family.BINOMIAL:
        def loss(beta):
            eta = X @ beta
            return np.mean(np.logaddexp(0.0, eta) - y * eta), X.T @ (expit(eta) - y) / n
    else:
        def loss(beta):
            eta = X @ beta
            if eta.max() > MGF_CAP:
                return np.inf, None
            mu = np.exp(eta)
            return np.mean(mu - y * eta), X.T @ (mu - y) / n
    return loss


def group_lasso(design: GroupedDesign, family: Family, reg: float | None = None,
                max_iter: int = 500, tol: float = 1e-8) -> np.ndarray:
    """Accelerated proximal gradient for mean NLL + reg * sum_k sqrt(m_k) ||beta_k||.

    With ``reg=None`` the penalty is 1% of the largest group gradient norm at
    zero, small enough that most groups stay active.
    """
    family = Family(family)
    loss = _family_loss(family, design)
    p = design.p
    weights = np.sqrt(design.sizes)
    if reg is None:
        _, g0 = loss(np.zeros(p))
        reg = 0.01 * max(np.linalg.norm(g0[sl]) for sl in design.slices)

    def prox(v, step):
        out = v.copy()
        for sl, wk in zip(design.slices, weights):
            nrm = np.linalg.norm(v[sl])
            thr = step * reg * wk
            out[sl] = 0.0 if nrm <= thr else (1.0 - thr / nrm) * v[sl]
        return out

    beta = np.zeros(p)
    z = beta.copy()
    t_acc = 1.0
    L = 1.0
    for _ in range(max_iter):
        fz, gz = loss(z)
        if gz is None:
            z = beta.copy()
            fz, gz = loss(z)
        while True:
            cand = prox(z - gz / L, 1.0 / L)
            fc, _ = loss(cand)
            diff = cand - z
            if np.isfinite(fc) and fc <= fz + gz @ diff + 0.5 * L * (diff @ diff) + 1e-12:
                break
            L *= 2.0
            if L > 1e20:
                raise InitFailure("group lasso backtracking did not find a step")
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_acc**2))
        z = cand + ((t_acc - 1.0) / t_next) * (cand - beta)
        change = np.linalg.norm(cand - beta)
        beta = cand
        t_acc = t_next
        if change <= tol * max(1.0, np.linalg.norm(beta)):
            break
    return beta


def _w_param_sigma(Q, w, kind):
    if kind is VariationalKind.BLOCK:
        return np.linalg.inv(Q + w * np.eye(Q.shape[0]))
    return np.diag(1.0 / (np.diag(Q) + w))


def initialize(design: GroupedDesign, prior: GsvbPrior, family: Family,
               config: FitConfig | None = None) -> VariationalState:
    config = config or FitConfig()
    family = Family(family)
    M = design.n_groups
    if isinstance(config.init, VariationalState):
        return config.init.copy()
    if config.init == "zeros":
        mu = np.zeros(design.p)
    elif config.init == "group_lasso":
        try:
            mu = group_lasso(design, family, config.init_reg)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            raise InitFailure(str(exc)) from exc
    else:
        raise ValueError(f"unknown init {config.init!r}")
    gamma = np.full(M, 0.5)
    state = VariationalState(mu=mu, sigma_blocks=[], gamma=gamma)
    if family is Family.POISSON:
        state.sigma_blocks = [0.2 * np.eye(m) for m in design.sizes]
        return state
    if family is Family.GAUSSIAN:
        state.tau_a = state.tau_b = 1e-3
        scale = state.tau_a / state.tau_b
    else:
        scale = 0.25  # a(t) at t = 0, the largest curvature of the logistic bound
    state.sigma_blocks = [_w_param_sigma(scale * B, 1.0, config.kind) for B in design.gram_blocks]
    if family is Family.BINOMIAL:
        lin, quad = group_linear_terms(state, design)
        state.jaakkola_t = np.sqrt((quad + lin**2) @ gamma)
    return state


def fit(design: GroupedDesign, prior: GsvbPrior, family: Family,
        config: FitConfig | None = None) -> FitResult:
    """Run coordinate ascent until the summed absolute parameter change < tol."""
    config = config or FitConfig()
    family = Family(family)
    validate_grouped_design(design, family)
    state = initialize(design, prior, family, config)
    terms = _Terms.build(state, design)
    trace: list[float] = []
    converged = False
    sweep = 0
    for sweep in range(1, config.max_sweeps + 1):
        before = state.flat()
        for k, sl in enumerate(design.slices):
            state.mu[sl] = update_mu_group(k, state, design, prior, family, config, terms)
            terms.refresh(k, state, design)
            state.sigma_blocks[k] = update_sigma_group(k, state, design, prior, family, config, terms)
            terms.refresh(k, state, design)
            state.gamma[k] = update_gamma_group(k, state, design, prior, family, config, terms)
        if family is Family.GAUSSIAN:
            state.tau_a, state.tau_b = update_tau_variational(state, design, prior, terms)
        elif family is Family.BINOMIAL:
            state.jaakkola_t = update_jaakkola_t(state, design, terms)
        trace.append(surrogate_objective(state, design, prior, family).total)
        change = float(np.abs(state.flat() - before).sum())
        log.debug("sweep %d: F=%.6f change=%.3e", sweep, trace[-1], change)
        if change < config.tol:
            converged = True
            break
    return FitResult(
        state=state,
        objective_trace=trace,
        sweeps_used=sweep,
        converged=converged,
        line_search_failures=terms.diag.line_search_failures,
        eta_clamped=terms.diag.eta_clamped,
    )
