"""Independent reference computations used only by the tests.

Nothing here imports the objective module: densities come from scipy.stats
and expectations from plain Monte Carlo with antithetic normal draws.
"""

import numpy as np
from scipy import stats
from scipy.special import gammaln

from gsvb.model import GroupedDesign, GsvbPrior, VariationalState


def random_design(rng, n, sizes, family, scale=1.0):
    p = int(np.sum(sizes))
    X = rng.standard_normal((n, p)) * scale
    if family == "gaussian":
        y = rng.standard_normal(n)
    elif family == "binomial":
        y = (rng.random(n) < 0.5).astype(float)
    else:
        y = rng.poisson(1.0, n).astype(float)
    return GroupedDesign.from_sizes(X, y, sizes)


def random_spd(rng, m, scale=0.3):
    A = rng.standard_normal((m, m)) * scale
    return A @ A.T + scale * np.eye(m)


def random_state(rng, design, family, sig_scale=0.3, mu_scale=0.5):
    sizes = design.sizes
    mu = rng.standard_normal(design.p) * mu_scale
    blocks = [random_spd(rng, m, sig_scale) for m in sizes]
    gamma = rng.uniform(0.05, 0.95, len(sizes))
    st = VariationalState(mu=mu, sigma_blocks=blocks, gamma=gamma)
    if family == "gaussian":
        st.tau_a = rng.uniform(2.0, 6.0)
        st.tau_b = rng.uniform(1.0, 4.0)
    if family == "binomial":
        st.jaakkola_t = rng.uniform(0.1, 2.0, design.n)
    return st


def draw_beta(state, n_draws, rng):
    """(n_draws, p) samples from the spike-and-slab variational family,
    antithetic in the normal part."""
    half = (n_draws + 1) // 2
    out = np.zeros((2 * half, state.mu.shape[0]))
    start = 0
    for k, S in enumerate(state.sigma_blocks):
        m = S.shape[0]
        sl = slice(start, start + m)
        start += m
        L = np.linalg.cholesky(S)
        e = rng.standard_normal((half, m)) @ L.T
        on = rng.random(2 * half) < state.gamma[k]
        slab = np.concatenate([state.mu[sl] + e, state.mu[sl] - e])
        out[:, sl] = np.where(on[:, None], slab, 0.0)
    return out[:n_draws]


def pair_average(v):
    """Average antithetic partners (first half against second half) so that
    the returned values are independent."""
    v = np.asarray(v, dtype=float)
    h = v.size // 2
    return 0.5 * (v[:h] + v[h:2 * h])


def mean_se(samples):
    samples = np.asarray(samples, dtype=float)
    return samples.mean(), samples.std(ddof=1) / np.sqrt(samples.size)


def _log_c(m):
    # normalizing constant of the multivariate double exponential, computed directly
    return -np.log(2.0 ** m * np.pi ** ((m - 1) / 2.0)) - gammaln((m + 1) / 2.0)


def mc_kl(state, prior: GsvbPrior, n_draws, rng):
    """MC estimate of KL(Q || prior) with the exact E||beta_k|| (no Jensen step).

    Returns pair-averaged contributions so the caller can form a standard error.
    """
    w = prior.w_bar
    lam = prior.lam
    n_draws += n_draws % 2
    total = np.zeros(n_draws)
    const = 0.0
    for k, S in enumerate(state.sigma_blocks):
        g = state.gamma[k]
        m = S.shape[0]
        start = int(sum(b.shape[0] for b in state.sigma_blocks[:k]))
        mu = state.mu[start:start + m]
        const += g * np.log(g / w) + (1 - g) * np.log((1 - g) / (1 - w))
        mvn = stats.multivariate_normal(mu, S)
        half = (n_draws + 1) // 2
        e = rng.standard_normal((half, m)) @ np.linalg.cholesky(S).T
        b = np.concatenate([mu + e, mu - e])[:n_draws]
        log_q = mvn.logpdf(b).reshape(-1)
        log_psi = _log_c(m) + m * np.log(lam) - lam * np.linalg.norm(b, axis=1)
        total += g * (log_q - log_psi)
    return pair_average(const + total)


def nll_samples(beta, design, family, tau2=None):
    """Negative log-likelihood of every beta row (and tau^2 draw for Gaussian)."""
    eta = beta @ design.X.T
    y = design.y
    if family == "gaussian":
        return -stats.norm.logpdf(y[None, :], eta, np.sqrt(tau2)[:, None]).sum(axis=1)
    if family == "binomial":
        return -stats.bernoulli.logpmf(y[None, :].astype(int), 1.0 / (1.0 + np.exp(-eta))).sum(axis=1)
    return -stats.poisson.logpmf(y[None, :].astype(int), np.exp(eta)).sum(axis=1)


def mc_expected_nll(state, design, family, n_draws, rng, chunk=20000):
    vals = []
    left = n_draws
    while left > 0:
        k = min(chunk, left)
        k += k % 2
        left -= k
        beta = draw_beta(state, k, rng)
        tau2 = None
        if family == "gaussian":
            tau2 = stats.invgamma(state.tau_a, scale=state.tau_b).rvs(size=k, random_state=rng)
        vals.append(pair_average(nll_samples(beta, design, family, tau2)))
    return np.concatenate(vals)


def mc_hyper_kl(tau_a, tau_b, prior, n_draws, rng):
    q = stats.invgamma(tau_a, scale=tau_b)
    pr = stats.invgamma(prior.a, scale=prior.b)
    x = q.rvs(size=n_draws, random_state=rng)
    return q.logpdf(x) - pr.logpdf(x)


def brute_force_second_moment(state, design):
    """sum_ij (X^T X)_ij E[beta_i beta_j] from an explicit p x p moment matrix."""
    p = design.p
    gidx = design.group_index
    E = np.zeros((p, p))
    starts = [s for s, _ in design.groups]
    for i in range(p):
        for j in range(p):
            k, h = gidx[i], gidx[j]
            if k == h:
                s0 = starts[k]
                E[i, j] = state.gamma[k] * (state.sigma_blocks[k][i - s0, j - s0] + state.mu[i] * state.mu[j])
            else:
                E[i, j] = state.gamma[k] * state.gamma[h] * state.mu[i] * state.mu[j]
    return E


def golden_section(f, lo, hi, tol=1e-12, max_iter=500):
    """Plain golden-section search for a unimodal function on [lo, hi]."""
    r = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - r * (b - a)
    d = a + r * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - r * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + r * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def fd_grad(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h * max(1.0, abs(x[i]))
        g[i] = (f(x + e) - f(x - e)) / (2.0 * e[i])
    return g
