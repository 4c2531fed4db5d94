import numpy as np
import pytest
from conftest import linear_net

from uapfp import nn, uap
from uapfp.fingerprint import BlackBox
from uapfp.numcore import RandomStream


# ---------------------------------------------------------------- DeepFool


def _closest_boundary_step(w, b, x):
    """Minimal step to the nearest linear decision boundary, by enumeration of classes."""
    f = x @ w + b
    k = int(np.argmax(f))
    best = None
    for l in range(w.shape[1]):
        if l == k:
            continue
        dw = w[:, k] - w[:, l]
        d = (f[k] - f[l]) / np.linalg.norm(dw)
        if best is None or d < best[0]:
            best = (d, (f[l] - f[k]) / np.dot(dw, dw) * dw)
    return best[1]


def test_deepfool_on_linear_model_matches_closed_form():
    for s in range(20):
        r = RandomStream(s)
        w, b = r.spawn(0).normal(15).reshape(5, 3), r.spawn(1).normal(3)
        x = r.spawn(2).normal(5)
        got, ok = uap.deepfool(linear_net(w, b), x)
        ref = _closest_boundary_step(w, b, x)
        assert ok
        assert np.linalg.norm(got - ref) <= 0.01 * np.linalg.norm(ref)


def test_deepfool_from_a_boundary_point_returns_nothing():
    net = linear_net(np.eye(2), np.zeros(2))
    x = np.array([0.7, 0.7])
    r, _ = uap.deepfool(net, x)
    assert np.linalg.norm(r) <= 1e-6 * np.linalg.norm(x)


def test_deepfool_flips_trained_net_labels(small_task):
    d, net = small_task
    correct = nn.predict(net, d.inputs) == d.labels
    x = d.inputs[correct]
    res = uap.deepfool_batch(net, x)
    flipped = nn.predict(net, x + 1.02 * res.perturbation) != d.labels[correct]
    assert flipped.mean() >= 0.95


def test_deepfool_rejects_zero_budget():
    with pytest.raises(ValueError):
        uap.deepfool_batch(linear_net(np.eye(2), np.zeros(2)), np.ones((1, 2)), max_iter=0)


# ----------------------------------------------------------- fooling rate


def test_fooling_rate_null_and_hand_fixture():
    net = linear_net(np.eye(2), np.zeros(2))
    x = np.array([[1.0, 0.0], [3.0, 0.0]])
    assert uap.fooling_rate(BlackBox(net), np.zeros(2), x) == 0.0
    # shifting by (-2, 0) moves only the first point across x0 = x1
    assert uap.fooling_rate(BlackBox(net), np.array([-2.0, 0.0]), x) == 0.5


def test_generate_uap_reaches_target_and_reports_honestly(small_task):
    d, net = small_task
    u = uap.generate_uap(net, d.inputs, uap.default_xi(d.inputs), 0.8, 10, RandomStream(0))
    assert np.linalg.norm(u.v) <= u.xi * (1 + 1e-12)
    recount = np.mean(nn.predict(net, d.inputs + u.v) != nn.predict(net, d.inputs))
    assert u.fooling_rate == recount
    assert u.reached_target and u.fooling_rate >= 0.8


def test_generate_uap_rejects_empty_budget(small_task):
    d, net = small_task
    with pytest.raises(ValueError):
        uap.generate_uap(net, d.inputs, 0.0)


def test_uap_file_round_trip(tmp_path, small_task):
    d, net = small_task
    u = uap.generate_uap(net, d.inputs[:50], 0.5, rng=RandomStream(1), max_epochs=1)
    u.v = u.v.astype(np.float32).astype(np.float64)
    uap.save_uap(u, tmp_path / "a.uap.json")
    back = uap.load_uap(tmp_path / "a.uap.json")
    assert np.array_equal(back.v, u.v) and back.xi == u.xi
    uap.save_uap(back, tmp_path / "b.uap.json")
    assert (tmp_path / "a.uap.json").read_bytes() == (tmp_path / "b.uap.json").read_bytes()


def test_uap_generator_estimator(small_task):
    d, net = small_task
    g = uap.UAPGenerator(model=net, seed=2).fit(d.inputs)
    assert np.allclose(g.transform(d.inputs[:3]), d.inputs[:3] + g.v_)
    assert g.fooling_rate_ == uap.fooling_rate(BlackBox(net), g.v_, d.inputs)


# ------------------------------------------------------ subspace analysis


def test_uap_matrix_rows_differ_between_seeds(small_task):
    d, net = small_task
    m = uap.uap_matrix(net, d.inputs[:80], 2, 0.6, RandomStream(5), max_epochs=2)
    assert m.L == 2 and not np.allclose(m.rows[0], m.rows[1])
    with pytest.raises(ValueError):
        uap.uap_matrix(net, d.inputs, 1, 0.6)


def test_energy_profile_self_match_and_parseval():
    v = RandomStream(3).normal(40).reshape(8, 5)
    prof = uap.principal_energy_profile(v, v, top=5)
    assert np.allclose(prof[:, 0], prof[:, 1])
    basis = uap.victim_basis(v)
    assert uap.energies(v, basis).sum() == pytest.approx(np.sum(v**2), rel=1e-12)


def test_inconsistency_hand_case_and_identity():
    victim = np.array([[1.0, 0.0], [0.0, 1.0]])
    suspect = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert uap.inconsistency(victim, suspect) == pytest.approx(2.0, abs=1e-12)
    a = RandomStream(4).normal(30).reshape(6, 5)
    assert uap.inconsistency(a, a) == 0.0


def test_inconsistency_ignores_row_order():
    r = RandomStream(6)
    a, b = r.spawn(0).normal(40).reshape(8, 5), r.spawn(1).normal(40).reshape(8, 5)
    p = r.spawn(2).permutation(8)
    base = uap.inconsistency(a, b)
    assert uap.inconsistency(a[p], b) == pytest.approx(base, rel=1e-9)
    assert uap.inconsistency(a, b[p]) == pytest.approx(base, rel=1e-9)


def test_inconsistency_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        uap.inconsistency(np.ones((2, 3)), np.ones((2, 4)))


# ------------------------------------------------------------ borderpoints


def test_borderpoint_of_symmetric_linear_model_is_the_midpoint():
    net = linear_net([[1.0, -1.0], [0.0, 0.0]], [0.0, 0.0])
    xa, xb = np.array([1.0, 0.3]), np.array([-1.0, 0.3])
    x, gap = uap.borderpoint(net, xa, xb)
    assert np.allclose(x, [0.0, 0.3])
    assert gap < 1e-6


def test_borderpoint_gap_rechecked_independently(small_task):
    d, net = small_task
    pred = nn.predict(net, d.inputs)
    a = int(np.flatnonzero(pred == 0)[0])
    b = int(np.flatnonzero(pred == 1)[0])
    x, gap = uap.borderpoint(net, d.inputs[a], d.inputs[b])
    p = np.sort(nn.forward(net, x))
    assert p[-1] - p[-2] == gap and gap < 1e-6
    with pytest.raises(ValueError):
        uap.borderpoint(net, d.inputs[a], d.inputs[a])
