"""Synthetic data generators, evaluation metrics and a replicate runner."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import linprog
from scipy.special import expit
from scipy.stats import rankdata

from .errors import AucUndefined, PoissonRateOverflow, WishartDegenerate
from .model import Family, GroupedDesign, GsvbPrior, VariationalKind
from .predictive import POISSON_RATE_CAP, CredibleSet, all_credible_sets, chain_credible_sets, set_size

log = logging.getLogger(__name__)

BETA_MAX = {Family.GAUSSIAN: 1.5, Family.BINOMIAL: 1.0, Family.POISSON: 0.45}
BLOCK_SIZE = 50
WISHART_NU = 3
WISHART_MIX = 0.9


@dataclass(frozen=True)
class SimSpec:
    n: int
    p: int
    M: int
    m: int
    s: int
    family: Family = Family.GAUSSIAN
    setting: int = 1
    beta_max: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.beta_max is None:
            object.__setattr__(self, "beta_max", BETA_MAX[self.family])
        if self.M * self.m != self.p:
            raise ValueError(f"M*m = {self.M * self.m} does not equal p = {self.p}")
        if not 1 <= self.s <= self.M:
            raise ValueError(f"s={self.s} must lie in [1, M={self.M}]")
        if self.setting not in (1, 2, 3, 4):
            raise ValueError(f"unknown setting {self.setting}")
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be positive")
        if not self.beta_max > 0.2:
            raise ValueError("beta_max must exceed 0.2")

    @classmethod
    def from_dict(cls, d: dict) -> "SimSpec":
        d = dict(d)
        if "M" not in d and "p" in d and "m" in d:
            d["M"] = d["p"] // d["m"]
        if "p" not in d:
            d["p"] = d["M"] * d["m"]
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["family"] = self.family.value
        return out


@dataclass
class MetricsReport:
    l2_error: float
    auc: float
    coverage: float
    mean_set_size: float
    n_selected_groups: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return d


def gen_coefficients(spec: SimSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """True coefficients: s random groups with entries uniform on
    [-beta_max, -0.2] U [0.2, beta_max]. Returns (beta0, sorted active groups)."""
    active = np.sort(rng.choice(spec.M, size=spec.s, replace=False))
    beta = np.zeros(spec.p)
    for k in active:
        sl = slice(k * spec.m, (k + 1) * spec.m)
        mag = rng.uniform(0.2, spec.beta_max, spec.m)
        sign = np.where(rng.random(spec.m) < 0.5, -1.0, 1.0)
        beta[sl] = sign * mag
    return beta, active


def bartlett_wishart(df: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Wishart(df, I_dim) draw via the Bartlett decomposition A A^T."""
    A = np.tril(rng.standard_normal((dim, dim)), -1)
    A[np.diag_indices(dim)] = np.sqrt(rng.chisquare(df - np.arange(dim)))
    return A @ A.T


def _inv_spd(W):
    L = np.linalg.cholesky(W)
    Linv = solve_triangular(L, np.eye(W.shape[0]), lower=True)
    return Linv.T @ Linv


def _wishart_inverse(df, dim, rng, retries=3, max_cond=1e12):
    for _ in range(retries + 1):
        W = bartlett_wishart(df, dim, rng)
        if np.linalg.cond(W) < max_cond:
            try:
                return _inv_spd(W)
            except np.linalg.LinAlgError:
                pass
    raise WishartDegenerate(f"Wishart({df}, I_{dim}) draw singular after {retries} retries")


def design_covariance(spec: SimSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    p = spec.p
    if spec.setting == 1:
        return np.eye(p)
    if spec.setting == 2:
        idx = np.arange(p)
        return 0.6 ** np.abs(idx[:, None] - idx[None, :])
    if spec.setting == 3:
        # full 50x50 blocks, the last one possibly shorter
        block = np.arange(p) // BLOCK_SIZE
        S = np.where(block[:, None] == block[None, :], 0.6, 0.0)
        np.fill_diagonal(S, 1.0)
        return S
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    Winv = _wishart_inverse(p + WISHART_NU, p, rng)
    Vinv = np.zeros((p, p))
    for k in range(spec.M):
        sl = slice(k * spec.m, (k + 1) * spec.m)
        Vinv[sl, sl] = _wishart_inverse(spec.m + WISHART_NU, spec.m, rng)
    S = (1.0 - WISHART_MIX) * Winv + WISHART_MIX * Vinv
    return 0.5 * (S + S.T)


def gen_design(spec: SimSpec, rng: np.random.Generator) -> np.ndarray:
    Z = rng.standard_normal((spec.n, spec.p))
    if spec.setting == 1:
        return Z
    L = np.linalg.cholesky(design_covariance(spec, rng))
    return Z @ L.T


def gen_response(X, beta0, family: Family, rng: np.random.Generator) -> np.ndarray:
    family = Family(family)
    eta = np.asarray(X) @ np.asarray(beta0)
    if family is Family.GAUSSIAN:
        return eta + rng.standard_normal(eta.shape[0])
    if family is Family.BINOMIAL:
        return (rng.random(eta.shape[0]) < expit(eta)).astype(float)
    if np.any(eta > np.log(POISSON_RATE_CAP)):
        raise PoissonRateOverflow(f"Poisson rate exp({eta.max():.3g}) exceeds {POISSON_RATE_CAP:g}")
    return rng.poisson(np.exp(eta)).astype(float)


@dataclass
class SimData:
    spec: SimSpec
    design: GroupedDesign
    beta0: np.ndarray
    active: np.ndarray


def simulate(spec: SimSpec, rng: np.random.Generator | None = None) -> SimData:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    beta0, active = gen_coefficients(spec, rng)
    X = gen_design(spec, rng)
    y = gen_response(X, beta0, spec.family, rng)
    return SimData(spec, GroupedDesign.from_sizes(X, y, [spec.m] * spec.M), beta0, active)


def is_separable(X, y) -> bool:
    """True when some w gives (2y_i - 1) x_i^T w >= 1 for every row (LP feasibility)."""
    X = np.asarray(X, dtype=float)
    sgn = 2.0 * np.asarray(y, dtype=float) - 1.0
    A = -(sgn[:, None] * X)
    res = linprog(np.zeros(X.shape[1]), A_ub=A, b_ub=-np.ones(X.shape[0]),
                  bounds=[(None, None)] * X.shape[1], method="highs")
    return res.status == 0


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n1 = int(labels.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        raise AucUndefined("AUC needs both positive and negative groups")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def evaluate_metrics(beta_hat, pip, sets: list[CredibleSet], beta0, active, M: int | None = None
                     ) -> MetricsReport:
    """The four evaluation metrics plus the number of groups with PIP > 0.5.

    Coverage and set size are averaged over the truly nonzero coordinates.
    """
    beta_hat = np.asarray(beta_hat, dtype=float)
    beta0 = np.asarray(beta0, dtype=float)
    pip = np.asarray(pip, dtype=float)
    truth = np.zeros(pip.shape[0] if M is None else M, dtype=bool)
    truth[np.asarray(active, dtype=int)] = True
    nz = np.flatnonzero(beta0 != 0.0)
    if nz.size:
        coverage = float(np.mean([sets[j].contains(beta0[j]) for j in nz]))
        size = float(np.mean([set_size(sets[j]) for j in nz]))
    else:
        coverage, size = float("nan"), float("nan")
    return MetricsReport(
        l2_error=float(np.linalg.norm(beta_hat - beta0)),
        auc=auc_score(pip, truth),
        coverage=coverage,
        mean_set_size=size,
        n_selected_groups=int(np.sum(pip > 0.5)),
    )


def metrics_for_fit(result, data: SimData, alpha: float = 0.05) -> MetricsReport:
    st = result.state
    sets = all_credible_sets(st, alpha)
    return evaluate_metrics(st.posterior_mean(data.design), st.gamma, sets, data.beta0, data.active)


def metrics_for_chain(chain, data: SimData, alpha: float = 0.05) -> MetricsReport:
    sets = chain_credible_sets(chain, alpha)
    return evaluate_metrics(chain.posterior_mean(), chain.pip, sets, data.beta0, data.active)


def default_grid(p: int = 1000, m: int = 5, s_values=(5, 10)) -> list[SimSpec]:
    """Experiment grid at p = 1000. Binomial Setting 1 is left out because the
    generated classes are perfectly separable."""
    sizes = {Family.GAUSSIAN: 200, Family.BINOMIAL: 400, Family.POISSON: 400}
    out = []
    for fam, n in sizes.items():
        for setting in (1, 2, 3, 4):
            if fam is Family.BINOMIAL and setting == 1:
                continue
            for s in s_values:
                out.append(SimSpec(n=n, p=p, M=p // m, m=m, s=s, family=fam, setting=setting))
    return out


def run_replicate(spec: SimSpec, seed_seq: np.random.SeedSequence, method: str = "vb",
                  kind: VariationalKind = VariationalKind.BLOCK, fit_config=None, gibbs_config=None,
                  alpha: float = 0.05, check_separation: bool = False) -> MetricsReport:
    """Simulate one dataset and score one method on it (``vb`` or ``gibbs``)."""
    from .cavi import FitConfig, fit
    from .mcmc import GibbsConfig, run_gibbs

    rng = np.random.default_rng(seed_seq)
    data = simulate(spec, rng)
    prior = GsvbPrior.default(spec.M)
    extra = {}
    if check_separation and spec.family is Family.BINOMIAL:
        extra["separable"] = is_separable(data.design.X, data.design.y)
    t0 = time.perf_counter()
    if method == "vb":
        cfg = fit_config or FitConfig(kind=kind)
        res = fit(data.design, prior, spec.family, cfg)
        rep = metrics_for_fit(res, data, alpha)
        extra.update(converged=res.converged, sweeps=res.sweeps_used)
    elif method == "gibbs":
        if spec.family is not Family.GAUSSIAN:
            raise ValueError("the Gibbs sampler supports the Gaussian family only")
        gseed = int(seed_seq.generate_state(1)[0])
        cfg = gibbs_config or GibbsConfig(seed=gseed)
        rep = metrics_for_chain(run_gibbs(data.design, prior, cfg), data, alpha)
    else:
        raise ValueError(f"unknown method {method!r}")
    extra["runtime"] = time.perf_counter() - t0
    rep.extra.update(extra)
    return rep


def run_replicates(spec: SimSpec, replicates: int, seed: int = 0, jobs: int = 1,
                   **kwargs) -> list[MetricsReport]:
    """Independent replicates, one spawned seed stream each; results are in
    replicate order regardless of ``jobs``."""
    streams = np.random.SeedSequence(seed).spawn(replicates)
    if jobs <= 1:
        return [run_replicate(spec, ss, **kwargs) for ss in streams]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda ss: run_replicate(spec, ss, **kwargs), streams))
