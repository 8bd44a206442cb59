import csv
import json
import math

import numpy as np
import pytest

from pnrcam.cli import main
from pnrcam.errors import ConfigError, DataFormatError
from pnrcam.photon_model import DetectorParams
from pnrcam.pipeline import (ExperimentConfig, SceneSpec, SensingSpec, build_matrix, build_scene,
                             calibrate_scene, ingest, parse_config, run_experiment, sweep_snr,
                             write_sweep_csv)
from pnrcam.sampler import write_event_log
from pnrcam.scene import pattern_means

SMALL = """
# tiny experiment
scene.name = "block"
scene.width = 16
scene.height = 16
scene.pattern_n_bar = 0.8
sensing.fraction = 0.25
detector.nu_a = 0.3
detector.theta = 0.0
acquisition.bins_per_pattern = 4000
acquisition.seed = 2
rules = ["none", "post:1", "sub:0", "joint:1,0"]
solver.max_outer_iters = 40
"""


def small_cfg(**kw):
    cfg = parse_config(SMALL)
    from dataclasses import replace
    return replace(cfg, **kw) if kw else cfg


def test_parse_config():
    cfg = small_cfg()
    assert cfg.scene == SceneSpec("block", 16, 16, None, 0.8)
    assert cfg.params == DetectorParams(nu_a=0.3, theta=0.0)
    assert cfg.m_rows == 64
    assert [str(r) for r in cfg.rules] == ["none", "post:1", "sub:0", "joint:1,0"]
    assert cfg.solver.max_outer_iters == 40 and cfg.solver.mu == 256.0


@pytest.mark.parametrize("text,match", [
    ("scene.colour = 1", ":1: unknown key"),
    ("\nsensing.fraction = 0.25x", ":2: value"),
    ("rules", ":1: expected"),
    ("sensing.fraction = 1.5", "fraction"),
    ("scene.peak = 1\nscene.pattern_n_bar = 1", "at most one"),
    ('rules = ["sub:1", "sub:1"]', "distinct"),
    ("solver.mu = -1", "mu"),
])
def test_parse_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_calibration_hits_target():
    cfg = small_cfg()
    q = build_matrix(cfg)
    scene = calibrate_scene(build_scene(cfg.scene), q, 0.8)
    assert pattern_means(q, scene).n_bar.mean() == pytest.approx(0.8, rel=1e-12)


def test_run_experiment_outputs(tmp_path):
    cfg = small_cfg(out=str(tmp_path / "a"))
    rep = run_experiment(cfg)
    assert [r.rule for r in rep.rules] == ["none", "post:1", "sub:0", "joint:1,0"]
    for r in rep.rules:
        assert r.status == "ok" and r.trace_monotone
        assert (tmp_path / "a" / r.files["image"]).exists()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["config_hash"] == cfg.digest()
    assert report["rules"][0]["analytic_snr"] == pytest.approx((0.8 + 0.3) / 0.3)
    assert rep.rule("post:1").analytic_snr > 1
    assert rep.rule("joint:1,0").analytic_snr is None
    assert not (tmp_path / "a" / "events.csv").exists()


def test_run_experiment_reproducible(tmp_path):
    run_experiment(small_cfg(out=str(tmp_path / "a"), save_log=True))
    run_experiment(small_cfg(out=str(tmp_path / "b"), save_log=True, threads=3))
    for f in sorted((tmp_path / "a").iterdir()):
        other = tmp_path / "b" / f.name
        if f.name == "report.json":
            a, b = json.loads(f.read_text()), json.loads(other.read_text())
            a.pop("wall_time"), b.pop("wall_time")
            assert a == b
        else:
            assert f.read_bytes() == other.read_bytes(), f.name


def test_ingested_log_matches(tmp_path):
    cfg = small_cfg()
    rep = run_experiment(cfg)
    write_event_log(tmp_path / "e.csv", rep.log)
    again = run_experiment(cfg, log=ingest(tmp_path / "e.csv"))
    assert again.log_digest == rep.log_digest
    assert [r.metrics for r in again.rules] == [r.metrics for r in rep.rules]


def test_ingested_log_wrong_shape(tmp_path):
    rep = run_experiment(small_cfg())
    with pytest.raises(ConfigError, match="acquisition"):
        run_experiment(small_cfg(sensing=SensingSpec(0.5)), log=rep.log)


def test_starved_rule_is_flagged():
    rep = run_experiment(small_cfg(rules=("none", "post:40")))
    flat = rep.rule("post:40")
    assert flat.status == "degenerate" and flat.metrics is None and flat.events_total == 0
    rep = run_experiment(small_cfg(rules=("none", "sub:40")))
    r = rep.rule("sub:40")
    assert r.status == "starved" and r.missing == 64 and r.metrics is None


def test_zero_noise_control():
    cfg = ExperimentConfig(SceneSpec("hbar", 32, 32, pattern_n_bar=0.8), SensingSpec(0.25, 0.5, 1),
                           DetectorParams(), 200_000, 3, ("none",))
    assert run_experiment(cfg).rules[0].metrics["correlation"] > 0.99


def test_sweep_snr(tmp_path):
    p = DetectorParams(0.5, 1.0, 0.3, 0.0, 0.0)
    curves = sweep_snr([(0.0, p), (0.8, p)], "post", range(8))
    assert curves[0][0].snr == [1.0] * 8
    s = curves[1][0].snr
    assert all(b > a for a, b in zip(s, s[1:]))
    assert np.all(np.diff(np.log(s), 2) > 0)  # convex in log
    sub = sweep_snr([(0.08, DetectorParams(0.5, 0.5, 0.01, 0.001))], "sub", range(4))[0][0].snr
    assert all(b > a for a, b in zip(sub, sub[1:]))
    starved = sweep_snr([(0.08, DetectorParams(nu_a=0.1))], "sub", range(3))[0][0].snr
    assert not math.isnan(starved[0]) and math.isnan(starved[1])
    write_sweep_csv(tmp_path / "s.csv", curves)
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 16 and rows[0]["snr_analytic"] == "1.0"


def test_sweep_empirical_overlay():
    p = DetectorParams(0.5, 1.0, 0.3, 0.0, 0.0)
    rep = run_experiment(small_cfg(params=p, bins_per_pattern=20_000, rules=("none",)))
    (curve, emp), = sweep_snr([(0.8, p)], "post", range(4), rep.log)
    # pooled over patterns whose mean is 0.8, so close to the analytic curve
    np.testing.assert_allclose(emp, curve.snr, rtol=0.1)


def test_ingest_timetags(tmp_path):
    (tmp_path / "t.csv").write_text("arm,timestamp_ns\na,100\na,400\na,1200\n")
    log = ingest(tmp_path / "t.csv")
    assert list(log.n1.ravel()) == [2, 1]


def test_ingest_corrupted_header(tmp_path):
    (tmp_path / "e.csv").write_text('# {"M": 1, "X": 1, "params": {}, "seed": 0, "scene_hash": null}\n'
                                    "t,bin,n1,n2\n#total_bins 1\n")
    with pytest.raises(DataFormatError, match="bins_per_pattern"):
        ingest(tmp_path / "e.csv")


def test_cli_pipeline(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(SMALL)
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["condition", str(out / "events.csv"), "--rule", "post:1", "--out", str(out)]) == 0
    assert main(["reconstruct", str(out / "meas_post_1.csv"), "--matrix", str(out / "patterns.csv"),
                 "--out", str(out / "rec"), "--config", str(cfg)]) == 0
    assert (out / "rec.pgm").exists()
    assert main(["analyze", str(out / "events.csv"), "--rule", "sub:0", "--out", str(out)]) == 0
    assert main(["sweep", "--config", str(cfg), "--scheme", "post", "--out", str(out)]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"), "--seed", "9",
                 "--rule", "none", "--rule", "post:2"]) == 0
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report["config"]["acquisition"]["seed"] == 9
    assert [r["rule"] for r in report["rules"]] == ["none", "post:2"]


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("scene.colour = 3\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--rule", "post:x"]) == 2
    assert main(["condition", str(tmp_path / "missing.csv")]) == 4
    (tmp_path / "m.csv").write_text("not,a,measurement\n")
    assert main(["reconstruct", str(tmp_path / "m.csv"), "--matrix", str(tmp_path / "m.csv")]) == 4
    err = capsys.readouterr().err
    assert "config error" in err and "I/O error" in err
