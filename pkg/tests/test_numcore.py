import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from uapfp import numcore
from uapfp.numcore import RandomStream, auc, cosine, kmeans, svd, welch_ttest_one_sided


# ------------------------------------------------------------------ PRNG


def test_stream_is_reproducible_and_splits():
    a, b = RandomStream(42), RandomStream(42)
    assert np.array_equal(a.uniform(100), b.uniform(100))
    assert not np.array_equal(RandomStream(42).spawn(0).uniform(10), RandomStream(42).spawn(1).uniform(10))


def test_splitmix64_reference_values():
    # first outputs of splitmix64 seeded with 0 (published reference sequence)
    s = RandomStream(0)
    assert [int(x) for x in s.next_u64(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_uniform_range_and_choice_distinct():
    u = RandomStream(3).uniform(10_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    c = RandomStream(3).choice(50, 20)
    assert len(set(c.tolist())) == 20
    with pytest.raises(ValueError):
        RandomStream(3).choice(5, 6)


# ------------------------------------------------------------------- SVD


def test_svd_trivial_cases():
    assert np.allclose(svd(np.eye(3)).singular_values, [1, 1, 1])
    assert np.allclose(svd(np.diag([3.0, 2.0, 1.0])).singular_values, [3, 2, 1])


def _jacobi_eigenvalues(s, sweeps=100):
    """Independent cyclic Jacobi eigen-solver for symmetric matrices."""
    a = s.copy()
    n = a.shape[0]
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < 1e-15 * np.linalg.norm(a):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1)) if theta != 0 else 1.0
                c = 1 / np.sqrt(t * t + 1)
                sn = t * c
                j = np.eye(n)
                j[p, p] = j[q, q] = c
                j[p, q], j[q, p] = sn, -sn
                a = j.T @ a @ j
    return np.sort(np.diag(a))[::-1]


def test_svd_matches_independent_eigen_oracle():
    a = RandomStream(5).normal(20).reshape(5, 4)
    ref = np.sqrt(np.clip(_jacobi_eigenvalues(a.T @ a), 0, None))
    got = svd(a).singular_values
    assert np.allclose(got, ref, rtol=1e-8, atol=0)


def test_svd_reconstruction_200_random_matrices():
    rng = RandomStream(11)
    worst = 0.0
    for t in range(200):
        r = rng.spawn(t)
        m, n = 1 + int(r.integers(32, 1)[0]), 1 + int(r.integers(32, 1)[0])
        a = r.normal(m * n).reshape(m, n)
        if t % 10 == 0 and min(m, n) > 2:  # rank-deficient case
            a[:, -1] = a[:, 0] + a[:, 1]
        res = svd(a)
        rec = res.u @ np.diag(res.singular_values) @ res.vt
        worst = max(worst, np.linalg.norm(rec - a) / np.linalg.norm(a))
        k = len(res.singular_values)
        assert np.allclose(res.u.T @ res.u, np.eye(k), atol=1e-8)
        assert np.allclose(res.vt @ res.vt.T, np.eye(k), atol=1e-8)
        assert np.all(np.diff(res.singular_values) <= 1e-12)
    assert worst <= 1e-8


def test_svd_rejects_nonfinite():
    with pytest.raises(ValueError, match="non-finite"):
        svd(np.array([[1.0, np.nan], [0.0, 1.0]]))


# ---------------------------------------------------------------- kmeans


def _best_partition_objective(points, k):
    best = np.inf
    n = len(points)
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) < k:
            continue
        lab = np.array(labels)
        obj = sum(np.sum((points[lab == c] - points[lab == c].mean(0)) ** 2) for c in range(k))
        best = min(best, obj)
    return best


@pytest.mark.parametrize("seed", range(8))
def test_kmeans_matches_exhaustive_partition_on_six_points(seed):
    r = RandomStream(100 + seed)
    pts = np.concatenate([r.normal(6).reshape(3, 2) * 0.3, r.normal(6).reshape(3, 2) * 0.3 + [4.0, 1.0]])
    res = kmeans(pts, 2, rng=RandomStream(seed))
    assert res.objective == pytest.approx(_best_partition_objective(pts, 2), rel=1e-12)


def test_kmeans_saturated_and_degenerate():
    pts = RandomStream(1).normal(12).reshape(6, 2)
    res = kmeans(pts, 6, rng=RandomStream(0))
    assert res.objective == pytest.approx(0.0, abs=1e-20)
    same = np.ones((5, 3))
    assert np.allclose(kmeans(same, 1, rng=RandomStream(0)).centroids, [[1, 1, 1]])
    with pytest.raises(ValueError):
        kmeans(pts, 7)


def test_kmeans_objective_monotone_and_nearest_assignment():
    for seed in range(20):
        pts = RandomStream(seed).normal(200).reshape(100, 2)
        res = kmeans(pts, 5, rng=RandomStream(seed))
        assert all(b <= a + 1e-9 for a, b in zip(res.objective_trace, res.objective_trace[1:]))
        d = np.sum((pts[:, None, :] - res.centroids[None]) ** 2, axis=2)
        assert np.array_equal(res.assignments, np.argmin(d, axis=1))


# ---------------------------------------------------------- Welch t-test


def _permutation_p(a, b, n_perm=20000, seed=0):
    """One-sided permutation p for mean(a) - mean(b) (add-one estimator)."""
    pooled = np.concatenate([a, b])
    obs = a.mean() - b.mean()
    r = RandomStream(seed)
    hits = 0
    for i in range(n_perm):
        p = r.spawn(i).permutation(pooled.size)
        diff = pooled[p[: a.size]].mean() - pooled[p[a.size :]].mean()
        hits += diff >= obs
    return (hits + 1) / (n_perm + 1)


def test_welch_identical_samples_give_half():
    a = RandomStream(1).normal(20)
    assert welch_ttest_one_sided(a, a) == pytest.approx(0.5, abs=1e-12)


def test_welch_far_apart_matches_permutation_oracle():
    r = RandomStream(2)
    a = 10.0 + r.spawn(0).normal(20)
    b = r.spawn(1).normal(20)
    p = welch_ttest_one_sided(a, b)
    assert p < 1e-6
    assert abs(p - _permutation_p(a, b, 5000)) <= 1e-3


def test_welch_moderate_shift_close_to_permutation_oracle():
    r = RandomStream(4)
    a = 0.8 + r.spawn(0).normal(30)
    b = r.spawn(1).normal(30)
    p = welch_ttest_one_sided(a, b)
    # the permutation p carries Monte Carlo error ~ sqrt(p(1-p)/n); 20000 draws keep it near 1e-3
    assert abs(p - _permutation_p(a, b)) <= 5e-3


def test_welch_matches_scipy_reference():
    for seed in range(50):
        r = RandomStream(seed)
        a = r.spawn(0).normal(5 + seed % 7) * (1 + seed % 3) + 0.1 * seed
        b = r.spawn(1).normal(8 + seed % 5)
        ref = stats.ttest_ind(a, b, equal_var=False, alternative="greater").pvalue
        assert welch_ttest_one_sided(a, b) == pytest.approx(ref, rel=1e-9, abs=1e-14)


def test_welch_null_median_near_half():
    ps = [welch_ttest_one_sided(RandomStream(s).spawn(0).normal(20), RandomStream(s).spawn(1).normal(20)) for s in range(100)]
    assert 0.3 <= np.median(ps) <= 0.7


def test_welch_symmetry_and_degenerate():
    a, b = RandomStream(8).normal(12), RandomStream(9).normal(9) + 0.3
    assert welch_ttest_one_sided(a, b) + welch_ttest_one_sided(b, a) == pytest.approx(1.0, abs=1e-9)
    assert welch_ttest_one_sided([1.0, 1.0], [1.0, 1.0]) == 0.5
    with pytest.raises(ValueError):
        welch_ttest_one_sided([1.0], [1.0, 2.0])


# ------------------------------------------------------------------- AUC


def _pair_count_auc(pos, neg):
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_auc_examples():
    assert auc([0.9, 0.4], [0.5, 0.1]) == 0.75
    assert auc([3, 4], [1, 2]) == 1.0
    assert auc([1, 2, 3], [1, 2, 3]) == 0.5
    with pytest.raises(ValueError):
        auc([], [1.0])


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(-5, 5), min_size=1, max_size=15),
    st.lists(st.integers(-5, 5), min_size=1, max_size=15),
)
def test_auc_equals_pair_counting_and_is_rank_invariant(pos, neg):
    ref = _pair_count_auc(pos, neg)
    assert auc(pos, neg) == ref
    assert auc(np.exp(pos), np.exp(neg)) == ref


# ---------------------------------------------------------------- cosine


def test_cosine_examples():
    assert cosine([1, 1], [1, 0]) == pytest.approx(1 / np.sqrt(2), abs=1e-15)
    assert cosine([0, 1], [1, 0]) == 0.0
    a = RandomStream(3).normal(10)
    assert cosine(a, a) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        cosine([0, 0], [1, 0])


def test_check_finite_matrix():
    with pytest.raises(ValueError, match=r"\(0, 1\)"):
        numcore.check_finite_matrix([[1.0, np.inf]])
