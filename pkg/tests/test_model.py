import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import gammaln

from gsvb.errors import (
    BadResponseDomain,
    CoverageGap,
    NonContiguousGroups,
    OverlappingGroups,
)
from gsvb.model import (
    Family,
    GroupedDesign,
    GsvbPrior,
    VariationalState,
    canonicalize_groups,
    check_partition,
    log_slab_constant,
    slab_log_density,
    validate_grouped_design,
)


def _design(p, sizes, y=None):
    X = np.arange(2.0 * p).reshape(2, p)
    y = np.zeros(2) if y is None else np.asarray(y, dtype=float)
    return GroupedDesign.from_sizes(X, y, sizes)


def test_valid_partition_passes():
    assert check_partition([[1, 2], [3, 4]], 4) == ((0, 2), (2, 2))


def test_overlap_names_index():
    with pytest.raises(OverlappingGroups) as err:
        check_partition([[1, 2], [2, 3, 4]], 4)
    assert err.value.index == 2


def test_gap_and_noncontiguous():
    with pytest.raises(CoverageGap):
        check_partition([[1, 2], [4]], 4)
    with pytest.raises(NonContiguousGroups):
        check_partition([[1, 3], [2, 4]], 4)
    with pytest.raises(NonContiguousGroups):
        check_partition([[3, 4], [1, 2]], 4)


def _is_valid(sets, p):
    flat = [j for g in sets for j in g]
    return all(len(g) > 0 for g in sets) and flat == list(range(1, p + 1))


@pytest.mark.parametrize("p", range(1, 5))
def test_partition_check_is_exact_on_small_p(p):
    # every ordered list of up to 3 nonempty index sets drawn from 1..p (plus a
    # stray index p+1) is accepted iff it is an ordered contiguous cover
    universe = list(range(1, p + 2))
    subsets = [list(c) for r in range(1, 3) for c in itertools.combinations(universe, r)]
    for n_groups in (1, 2, 3):
        for sets in itertools.product(subsets, repeat=n_groups):
            try:
                check_partition(sets, p)
                ok = True
            except (OverlappingGroups, CoverageGap, NonContiguousGroups):
                ok = False
            assert ok == _is_valid(sets, p), sets


@pytest.mark.parametrize("p", [5, 6])
def test_partition_contiguous_compositions_accepted(p):
    for cuts in itertools.product([0, 1], repeat=p - 1):
        sizes, cur = [], 1
        for c in cuts:
            if c:
                sizes.append(cur)
                cur = 1
            else:
                cur += 1
        sizes.append(cur)
        starts = np.cumsum([0] + sizes[:-1])
        sets = [list(range(s + 1, s + m + 1)) for s, m in zip(starts, sizes)]
        assert len(check_partition(sets, p)) == len(sizes)


def test_binomial_domain_reports_row():
    d = _design(2, [2], y=[0, 2])
    with pytest.raises(BadResponseDomain) as err:
        validate_grouped_design(d, Family.BINOMIAL)
    assert err.value.index == 2


def test_poisson_domain():
    with pytest.raises(BadResponseDomain):
        validate_grouped_design(_design(2, [2], y=[1.5, 0]), "poisson")
    with pytest.raises(BadResponseDomain):
        validate_grouped_design(_design(2, [2], y=[-1, 0]), "poisson")
    d = _design(2, [1, 1], y=[3, 1e-12])
    assert validate_grouped_design(d, "poisson") is d


def test_shape_and_finite_checks():
    with pytest.raises(ValueError):
        validate_grouped_design(GroupedDesign.from_sizes(np.ones((3, 2)), np.ones(2), [2]), "gaussian")
    X = np.ones((2, 2))
    X[0, 0] = np.nan
    with pytest.raises(ValueError):
        validate_grouped_design(GroupedDesign.from_sizes(X, np.ones(2), [2]), "gaussian")


def test_canonicalize_groups():
    perm, sizes = canonicalize_groups(["b", "a", "b", "c", "a"])
    assert sizes == [2, 2, 1]
    assert perm.tolist() == [0, 2, 1, 4, 3]


def test_slab_constant_values():
    assert np.isclose(slab_log_density([0.0], 1.0), -0.693147, atol=1e-6)
    assert np.isclose(slab_log_density([0.0, 0.0], 1.0), -1.837877, atol=1e-6)
    assert np.isclose(log_slab_constant(2), -np.log(2 * np.pi))


def test_slab_constant_large_m_is_finite():
    assert np.isfinite(log_slab_constant(5000))


@pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
def test_slab_normalizes_m1_m2(lam):
    w = 40.0 / lam
    v1, _ = integrate.quad(lambda b: np.exp(slab_log_density([b], lam)), -w, w)
    assert abs(v1 - 1.0) < 1e-4
    v2, _ = integrate.dblquad(lambda a, b: np.exp(slab_log_density([a, b], lam)), -w, w, -w, w,
                              epsabs=1e-9)
    assert abs(v2 - 1.0) < 1e-4


@pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
def test_slab_normalizes_m3_radially(lam):
    # integrate over spheres: area of the unit 2-sphere is 4 pi
    f = lambda r: 4 * np.pi * r**2 * np.exp(slab_log_density([r, 0.0, 0.0], lam))
    v, _ = integrate.quad(f, 0, 80.0 / lam)
    assert abs(v - 1.0) < 1e-4


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.floats(0.1, 5.0), st.randoms())
def test_slab_symmetry(beta, lam, rnd):
    b = np.array(beta)
    perm = list(range(len(b)))
    rnd.shuffle(perm)
    signs = np.array([rnd.choice([-1.0, 1.0]) for _ in b])
    a = slab_log_density(b, lam)
    assert slab_log_density(signs * b[perm], lam) == pytest.approx(a, rel=1e-12, abs=1e-12)
    assert a - slab_log_density(np.zeros_like(b), lam) == pytest.approx(-lam * np.linalg.norm(b), abs=1e-9)


def test_slab_constant_matches_formula():
    for m in range(1, 8):
        direct = -np.log(2.0**m * np.pi ** ((m - 1) / 2)) - gammaln((m + 1) / 2)
        assert log_slab_constant(m) == pytest.approx(direct, abs=1e-12)


def test_prior_validation_and_defaults():
    pr = GsvbPrior.default(10)
    assert (pr.lam, pr.a0, pr.b0, pr.a, pr.b) == (1.0, 1.0, 10.0, 1e-3, 1e-3)
    assert pr.w_bar == pytest.approx(1 / 11)
    with pytest.raises(ValueError):
        GsvbPrior(lam=0.0)


def test_state_check_and_flat():
    st_ = VariationalState(mu=np.zeros(3), sigma_blocks=[np.eye(2), np.eye(1)], gamma=np.array([0.2, 1.0]))
    st_.check()
    assert st_.flat().size == 3 + 2 + 4 + 1
    st_.gamma[0] = 1.5
    with pytest.raises(ValueError):
        st_.check()
    bad = VariationalState(mu=np.zeros(2), sigma_blocks=[np.array([[1.0, 2.0], [2.0, 1.0]])], gamma=np.ones(1))
    with pytest.raises(np.linalg.LinAlgError):
        bad.check()


def test_design_caches():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((5, 4))
    d = GroupedDesign.from_sizes(X, rng.standard_normal(5), [1, 3])
    assert d.group_index.tolist() == [0, 1, 1, 1]
    assert np.allclose(d.gram_blocks[1], X[:, 1:].T @ X[:, 1:])
    assert d.sizes.tolist() == [1, 3]
