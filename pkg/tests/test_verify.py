import numpy as np
import pytest

from uapfp import encoder as encmod
from uapfp import fingerprint as fpm
from uapfp import uap, verify, zoo
from uapfp.numcore import RandomStream, auc


@pytest.fixture(scope="module")
def package(small_task):
    d, victim = small_task
    u = uap.generate_uap(victim, d.inputs, uap.default_xi(d.inputs), rng=RandomStream(0))
    probes = fpm.select_probe_points(victim, d.inputs, 5, RandomStream(1))
    views = fpm.make_views(victim, d.inputs, probes, 30, RandomStream(2))
    bank = fpm.view_fingerprints(fpm.BlackBox(victim), u.v, d.inputs, views)
    enc = encmod.init_encoder(bank.shape[1], (32,), 8, rng=RandomStream(3))
    homo = -0.5 + 0.6 * RandomStream(4).uniform(40)
    return verify.VictimPackage(u.v, d.inputs, views, bank, enc, homo)


# ------------------------------------------------------------ similarities


def test_self_similarity_report():
    enc = encmod.init_encoder(6, (8,), 4, rng=RandomStream(0))
    fps = RandomStream(1).uniform(5 * 6).reshape(5, 6)
    rep = verify.model_similarity(enc, fps, fps, "self")
    assert rep.mean == pytest.approx(1.0, abs=1e-12) and rep.std == pytest.approx(0.0, abs=1e-12)
    other = RandomStream(2).uniform(5 * 6).reshape(5, 6)
    rep = verify.model_similarity(enc, fps, other)
    assert rep.mean == pytest.approx(sum(rep.sims.tolist()) / 5, abs=1e-15)
    with pytest.raises(ValueError):
        verify.model_similarity(enc, fps, other[:4])


# ----------------------------------------------------------- hypothesis test


def test_identical_samples_are_inconclusive():
    sims = RandomStream(0).uniform(20)
    v = verify.ownership_test(sims, sims)
    assert v.alpha == 0.05
    assert v.p_value == pytest.approx(0.5, abs=1e-12) and v.decision == "inconclusive"


def test_clear_piracy_gives_tiny_p():
    homo = 0.05 + 0.02 * RandomStream(1).normal(20)
    sus = 0.99 + 0.001 * RandomStream(2).normal(20)
    # Welch t with these spreads exceeds 100 on ~19 degrees of freedom
    v = verify.ownership_test(sus, homo)
    assert v.p_value < 1e-10 and v.decision == "piracy"


def test_verdict_decision_must_match_p():
    with pytest.raises(ValueError):
        verify.VerificationVerdict("s", 0.2, 0.05, "piracy", 20)
    with pytest.raises(ValueError):
        verify.ownership_test([0.5, 0.6], [0.1, 0.2], alpha=1.5)


def test_repeated_test_uses_the_mean_p():
    sus = 0.3 + 0.1 * RandomStream(5).normal(200)
    homo = 0.1 * RandomStream(6).normal(60)
    plan = verify.resampling_plan(200, 60, 20, 30, RandomStream(7))
    v = verify.repeated_ownership_test(sus, homo, plan=plan)
    ps = [verify.ownership_test(sus[a], homo[b]).p_value for a, b in plan]
    assert v.p_value == pytest.approx(np.mean(ps), rel=1e-15)
    assert len(v.p_values) == 30
    assert all(len(set(a.tolist())) == 20 for a, _ in plan)


# --------------------------------------------------------------------- AUC


def test_zoo_auc_matches_pair_counting():
    enc = encmod.init_encoder(4, (6,), 3, rng=RandomStream(0))
    base = RandomStream(1).uniform(3 * 4).reshape(3, 4)
    recs = [zoo.ModelRecord("victim", "victim", "arc_v", 0, "sgd", 64)]
    bank = {"victim": base}
    r = RandomStream(2)
    for i in range(4):
        recs.append(zoo.ModelRecord(f"p{i}", "piracy", "arc_a", 0, "sgd", 64, "test", extraction={}))
        bank[f"p{i}"] = base + 0.05 * (i + 1) * r.spawn(i).uniform(12).reshape(3, 4)
        recs.append(zoo.ModelRecord(f"h{i}", "homologous", "arc_a", 0, "sgd", 64, "test", overlap_rate=0.5))
        bank[f"h{i}"] = r.spawn(10 + i).uniform(12).reshape(3, 4)
    value, rows = verify.zoo_auc(enc, zoo.ZooManifest(recs, {}), bank)
    pos = [m for _, role, m, _ in rows if role == "piracy"]
    neg = [m for _, role, m, _ in rows if role == "homologous"]
    pairs = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg) / (len(pos) * len(neg))
    assert value == pairs == auc(pos, neg)
    assert len(rows) == 8


# ---------------------------------------------------------- end to end


def test_victim_verified_against_itself(small_task, package):
    _, victim = small_task
    box = fpm.BlackBox(victim)
    verdict, rep = verify.verify_ownership(package, box, verify.VerifyConfig())
    assert verdict.decision == "piracy"
    assert rep.mean == pytest.approx(1.0, abs=1e-9)
    assert verdict.n_queries == box.n_queries == 2 * 5 * verdict.fingerprints_used


def test_verify_refuses_model_objects(small_task, package):
    _, victim = small_task
    with pytest.raises(TypeError):
        verify.verify_ownership(package, victim, verify.VerifyConfig())


def test_failing_suspect_reports_partial_progress(small_task, package):
    _, victim = small_task
    calls = {"n": 0}

    def flaky(x):
        calls["n"] += 1
        if calls["n"] > 3:
            raise TimeoutError("suspect API down")
        return fpm.BlackBox(victim)(x)

    with pytest.raises(verify.VerificationError) as err:
        verify.verify_ownership(package, flaky, verify.VerifyConfig())
    assert err.value.partial["views_done"] == 3
    assert err.value.partial["n_queries"] == 3 * 2 * 5


def test_verify_config_validation():
    with pytest.raises(ValueError):
        verify.VerifyConfig(alpha=0.0).validate()
    with pytest.raises(ValueError):
        verify.VerifyConfig(n_fingerprints=1).validate()


# --------------------------------------------------------------------- I/O


def test_verdict_file_round_trip(tmp_path):
    v = verify.repeated_ownership_test(0.2 * RandomStream(1).normal(50), 0.2 * RandomStream(2).normal(30),
                                       rng=RandomStream(3), suspect_id="s1")
    v.n_queries = 4000
    verify.save_verdict(v, tmp_path / "a.json", sims=[0.25, -0.5])
    back, sims = verify.load_verdict(tmp_path / "a.json")
    assert back == v and sims == [0.25, -0.5]
    verify.save_verdict(back, tmp_path / "b.json", sims=sims)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    if v.decision == "inconclusive":
        assert "note" in (tmp_path / "a.json").read_text()


def test_verdicts_csv(tmp_path):
    v = verify.ownership_test([0.9, 0.95, 0.97], [0.1, 0.0, -0.1], suspect_id="p")
    rep = verify.SimilarityReport.from_sims("p", [0.9, 0.95, 0.97])
    path = verify.write_verdicts_csv([(v, "piracy", rep)], tmp_path / "v.csv")
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == verify.VERDICT_COLUMNS
    assert lines[1].startswith("p,piracy,0.940000,")
