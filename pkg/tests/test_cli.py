import json

import pytest

from dalab.cli import EXIT_CERT, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, compare, main, run
from dalab.config import parse_config
from dalab.errors import SchemaMismatch

SMALL = """
[perturbation 1]
kind = shear
target = 0
freq = 0 1 1
amplitude = {eps}

[run]
seed = 11

[exponents]
samples = 4
n = 200
burn_in = 20

[periodic]
count_cap = 600

[conjugacy]
resolution = 8
residual_samples = 500
fiber_samples = 500
ratio_samples = 50
ratio_k = 2

[foliation]
resolution = 8
residual_samples = 500
holonomy_points = 5

[disintegrate]
samples = {samples}
profile_samples = 5000
profile_lengths = 0.1 0.4
birkhoff_n = 2000

[mk]
k_max = 1
base_points = 1
exponent_n = 20
resolution = 8
"""


def write_cfg(tmp_path, eps=0.02, samples=40000, name="run.ini"):
    p = tmp_path / name
    p.write_text(SMALL.format(eps=eps, samples=samples))
    return p


@pytest.fixture(scope="module")
def survey(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("survey")
    cfg = write_cfg(tmp)
    outs = []
    for w in (1, 2):
        out = tmp / f"w{w}"
        assert main(["full-survey", "--config", str(cfg), "--out", str(out), "--workers", str(w)]) == 0
        outs.append(out)
    return outs


def test_survey_outputs(survey):
    out = survey[0]
    man = json.loads((out / "manifest.json").read_text())
    for name in ("summary.json", "certificate.json", "exponents.csv", "periodic.csv", "conjugacy.field",
                 "bundle_ss.field", "conditionals.csv", "mk_lengths.csv", "mk_pushforward.csv", "config.ini"):
        assert name in man["files"]
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"certify", "exponents", "periodic", "conjugacy", "foliation", "disintegrate", "mk"}
    assert summary["mk"]["mass_identity"] is True
    assert (out / "mk_pushforward.csv").read_text().splitlines()[0] == "base,k,mass_identity,hausdorff,endpoint_gap,route_gap"


def test_survey_worker_invariant(survey):
    a, b = survey
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["files"] == mb["files"]
    for name in ma["files"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_compare(survey, tmp_path, capsys):
    rep = compare(*survey)
    assert rep == {"numeric": {}, "categorical": {}, "files_differ": []}
    other = tmp_path / "seed"
    assert main(["exponents", "--config", str(write_cfg(tmp_path)), "--out", str(other), "--seed", "3"]) == 0
    with pytest.raises(SchemaMismatch):
        compare(survey[0], other)
    assert main(["compare", str(survey[0]), str(other)]) == EXIT_CONFIG
    assert main(["compare", str(survey[0] / "manifest.json"), str(survey[1]), "--out", str(tmp_path / "d.json")]) == 0
    assert json.loads((tmp_path / "d.json").read_text())["files_differ"] == []


def test_compare_reports_differences(tmp_path):
    cfg = write_cfg(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["exponents", "--config", str(cfg), "--out", str(a), "--seed", "1"]) == 0
    assert main(["exponents", "--config", str(cfg), "--out", str(b), "--seed", "2"]) == 0
    rep = compare(a, b)
    assert rep["numeric"] and "exponents.csv" in rep["files_differ"]
    assert all("timings" not in k for k in rep["numeric"])


def test_not_a_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("[]")
    with pytest.raises(SchemaMismatch):
        compare(tmp_path, tmp_path)


def test_certify_only(tmp_path):
    cfg = parse_config(SMALL.format(eps=0.02, samples=1000))
    cfg.scenario = "certify"
    man = run(cfg, tmp_path / "c")
    assert sorted(man.files) == ["certificate.json", "config.ini", "summary.json"]


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nseed = x\n")
    assert main(["exponents", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["exponents", "--config", str(tmp_path / "nope.ini")]) == EXIT_CONFIG
    cfg = write_cfg(tmp_path)
    assert main(["exponents", "--config", str(cfg), "--seed", "-1"]) == EXIT_CONFIG
    assert main(["exponents", "--config", str(cfg), "--workers", "0"]) == EXIT_CONFIG
    big = write_cfg(tmp_path, eps=10.0, name="big.ini")
    assert main(["certify", "--config", str(big), "--out", str(tmp_path / "big")]) == EXIT_CERT
    few = write_cfg(tmp_path, samples=300, name="few.ini")
    assert main(["disintegrate", "--config", str(few), "--out", str(tmp_path / "few")]) == EXIT_NUMERIC
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["certify", "--config", str(cfg), "--out", str(blocker)]) == EXIT_IO
    err = capsys.readouterr().err
    assert "config error" in err and "certification failed" in err and "InsufficientSamples" in err


def test_module_entry_point():
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "dalab", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "compare" in r.stdout
