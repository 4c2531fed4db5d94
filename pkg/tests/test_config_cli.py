import csv
import json
from pathlib import Path

import numpy as np
import pytest

from uapfp import cli, report
from uapfp.config import ConfigError, PipelineConfig, apply_overrides, config_from_dict, load_config

TINY = Path(__file__).resolve().parents[1] / "configs" / "tiny.json"


# ------------------------------------------------------------------ config


def test_defaults_validate_and_round_trip():
    cfg = PipelineConfig().validate()
    again = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    assert cfg.fingerprint.n == 100 and cfg.fingerprint.k == 200 and cfg.verify.alpha == 0.05


def test_field_errors_are_collected():
    with pytest.raises(ConfigError) as err:
        config_from_dict({"fingerprint": {"n": 0}, "zoo": {"bogus": 1}, "verify": {"alpha": 2}})
    fields = {f for f, _ in err.value.errors}
    assert {"fingerprint", "zoo.bogus", "verify"} <= fields


def test_overrides_and_missing_file(tmp_path):
    doc = apply_overrides({"fingerprint": {"n": 100}}, ["fingerprint.n=50", "uap.L=null", "run_id=abc"])
    assert doc == {"fingerprint": {"n": 50}, "uap": {"L": None}, "run_id": "abc"}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")
    cfg = load_config(TINY, ["fingerprint.k=12"], seed=3, out=str(tmp_path))
    assert (cfg.fingerprint.k, cfg.seed, cfg.run_dir) == (12, 3, tmp_path / "seed-3")


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("UAPFP_OUT", str(tmp_path / "env"))
    assert PipelineConfig(out="ignored").run_dir == tmp_path / "env" / "seed-0"


# --------------------------------------------------------------------- CLI


def test_missing_config_exits_2_without_outputs(tmp_path, capsys):
    out = tmp_path / "runs"
    code = cli.main(["verify", "--config", str(tmp_path / "missing.json"), "--out", str(out)])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config"
    assert not out.exists()


def test_invalid_field_exits_2(tmp_path, capsys):
    code = cli.main(["zoo", "--config", str(TINY), "--out", str(tmp_path), "--set", "fingerprint.n=0"])
    assert code == 2
    assert json.loads(capsys.readouterr().err)["fields"][0]["field"] == "fingerprint"
    assert not any(tmp_path.iterdir())


def test_verify_on_tiny_config_writes_one_row_per_suspect(tmp_path, capsys):
    code = cli.main(["verify", "--config", str(TINY), "--out", str(tmp_path)])
    assert code == 0
    run = tmp_path / "seed-7"
    with (run / "verify" / "verdicts.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    manifest = json.loads((run / "zoo" / "zoo.json").read_text())
    suspects = [e["id"] for e in manifest["entries"] if e["split"] == "test" and e["status"] == "ok"]
    assert sorted(r["suspect_id"] for r in rows) == sorted(suspects)
    for r in rows:
        assert r["decision"] == ("piracy" if float(r["p_value"]) < float(r["alpha"]) else "inconclusive")
        assert int(r["n_queries"]) == 2 * 10 * int(r["n_fingerprints"])
    status = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert status["command"] == "verify"


# ------------------------------------------------------------------ report


def test_empty_suspect_set_gives_header_only(tmp_path):
    run = tmp_path / "run"
    (run / "verify").mkdir(parents=True)
    (run / "verify" / "view_sims.csv").write_text("suspect_id,role,view,sim\n")
    report.emit_report(run, tmp_path / "out")
    assert (tmp_path / "out" / "similarity_cdf.csv").read_text() == "upper_edge,piracy_cdf,homologous_cdf\n"
    assert "ablate/n_sweep.csv" in json.loads((tmp_path / "out" / "missing.json").read_text())


def test_cdf_matches_recount():
    r = np.random.default_rng(0)
    sims = {"piracy": np.clip(r.normal(0.9, 0.1, 50), -1, 1), "homologous": r.uniform(-1, 1, 40)}
    rows = report.similarity_cdf(sims)
    assert len(rows) == 21 and rows[0][0] == "-1.0" and rows[-1][0] == "1.0"
    for row in rows:
        edge = float(row[0])
        assert float(row[1]) == pytest.approx(np.mean(sims["piracy"] <= edge + 1e-12), abs=5e-7)
        assert float(row[2]) == pytest.approx(np.mean(sims["homologous"] <= edge + 1e-12), abs=5e-7)
    assert rows[-1][1:] == ["1.000000", "1.000000"]
