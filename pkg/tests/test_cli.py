import json

import numpy as np
import pytest

from kamreduce import cli
from kamreduce.resonance import resonant_frequency

SMALL = """
[model]
J = 4
[schedule]
nu_max = 2
K_cap = 16
[verify]
T = 50.0
theta_samples = 8
[screen]
samples = 1000
K = 4
"""


def quiet(*a, **k):
    pass


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("reduce")
    cfg = cli.load_config(text=SMALL)
    assert cli.cmd_reduce(cfg, out, quiet) == cli.EXIT_OK
    return cfg, out


def test_defaults_and_unknown_keys():
    cfg = cli.load_config()
    assert cfg["model"]["J"] == 8 and cfg["model"]["omega"] == [1.3]
    with pytest.raises(cli.ConfigError):
        cli.load_config(text="[model]\nbogus = 1\n")
    with pytest.raises(cli.ConfigError):
        cli.load_config(text='[model]\nJ = "eight"\n')


def test_drawn_frequency_is_reproducible():
    a = cli.load_config(text='[model]\nomega = "draw"\nomega_seed = 5\n')
    b = cli.load_config(text='[model]\nomega = "draw"\nomega_seed = 5\n')
    assert a["model"]["omega"] == b["model"]["omega"] and 1 <= a["model"]["omega"][0] <= 2
    assert cli.config_hash(a) == cli.config_hash(b)


def test_config_hash_tracks_content():
    a = cli.load_config(text=SMALL)
    b = cli.load_config(text=SMALL + "[output]\ndirectory = 'elsewhere'\n")
    c = cli.load_config(text=SMALL.replace("J = 4", "J = 5"))
    assert cli.config_hash(a) != cli.config_hash(c)
    assert isinstance(cli.config_hash(b), str) and len(cli.config_hash(b)) == 64


def test_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tables = [("a", rng.normal(size=(3, 4))), ("b", rng.normal(size=5) + 1j * rng.normal(size=5)),
              ("empty", np.zeros((0, 2)))]
    h = cli.write_dump(tmp_path / "t.kamr", tables)
    assert len(h) == 64
    back = cli.read_dump(tmp_path / "t.kamr")
    for name, arr in tables:
        assert back[name].shape == arr.shape and np.array_equal(back[name], arr)


def test_dump_rejects_corruption(tmp_path):
    path = tmp_path / "t.kamr"
    cli.write_dump(path, [("a", np.arange(6.0))])
    raw = path.read_bytes()
    (tmp_path / "bad.kamr").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(cli.ArtifactMismatch):
        cli.read_dump(tmp_path / "bad.kamr")
    (tmp_path / "short.kamr").write_bytes(raw[:20])
    with pytest.raises(cli.ArtifactMismatch):
        cli.read_dump(tmp_path / "short.kamr")


def test_reduce_writes_artifacts(small_run):
    cfg, out = small_run
    doc = json.loads((out / "report.json").read_text())
    assert doc["config_hash"] == cli.config_hash(cfg)
    assert doc["result"]["status"] == "ok" and len(doc["result"]["steps"]) == 2
    assert doc["result_hash"] == cli.content_hash(doc["result"])
    assert (out / "steps.csv").read_text().startswith("nu,r_nu")
    tables = cli.read_dump(out / "transforms.kamr")
    nf, maps = cli.load_transforms(tables, 1, 4)
    assert len(maps) == 2 and len(nf.blocks) == 5


def test_reduce_is_deterministic(small_run, tmp_path):
    cfg, out = small_run
    assert cli.cmd_reduce(cfg, tmp_path, quiet) == cli.EXIT_OK
    a = json.loads((out / "report.json").read_text())
    b = json.loads((tmp_path / "report.json").read_text())
    assert a["result_hash"] == b["result_hash"]
    assert (out / "transforms.kamr").read_bytes() == (tmp_path / "transforms.kamr").read_bytes()


def test_verify_and_report(small_run, tmp_path):
    cfg, out = small_run
    assert cli.cmd_verify(cfg, out, tmp_path, quiet) == cli.EXIT_OK
    m = json.loads((tmp_path / "verify.json").read_text())["metrics"]
    assert m["all_green"] and m["gates"]["passed"]
    assert m["conjugacy"]["ablation_residual"] > m["conjugacy"]["residual"]
    assert (tmp_path / "timeseries.csv").exists()
    lines = []
    assert cli.cmd_report(out, lines.append) == cli.EXIT_OK
    assert any("r_final" in s for s in lines)


def test_verify_rejects_other_config(small_run, tmp_path):
    _, out = small_run
    other = cli.load_config(text=SMALL.replace("T = 50.0", "T = 60.0"))
    assert cli.cmd_verify(other, out, tmp_path, quiet) == cli.EXIT_MISMATCH


def test_verify_rejects_tampering(small_run, tmp_path):
    cfg, out = small_run
    for name in ("report.json", "steps.csv", "transforms.kamr"):
        (tmp_path / name).write_bytes((out / name).read_bytes())
    raw = bytearray((tmp_path / "transforms.kamr").read_bytes())
    raw[-3] ^= 0x01
    (tmp_path / "transforms.kamr").write_bytes(bytes(raw))
    assert cli.cmd_verify(cfg, tmp_path, tmp_path, quiet) == cli.EXIT_MISMATCH
    # an edited result no longer matches its hash
    (tmp_path / "transforms.kamr").write_bytes((out / "transforms.kamr").read_bytes())
    doc = json.loads((out / "report.json").read_text())
    doc["result"]["r_final"] = 0.0
    (tmp_path / "report.json").write_text(json.dumps(doc))
    assert cli.cmd_verify(cfg, tmp_path, tmp_path, quiet) == cli.EXIT_MISMATCH
    assert cli.cmd_verify(cfg, tmp_path / "missing.json", tmp_path, quiet) == cli.EXIT_MISMATCH


def test_resonant_frequency_exits_with_certificate(tmp_path):
    w = resonant_frequency(2, 0, 1, 1.0)
    cfg = cli.load_config(text=SMALL.replace("J = 4", f"J = 4\nomega = [{float(w)!r}]"))
    assert cli.cmd_reduce(cfg, tmp_path, quiet) == cli.EXIT_RESONANCE
    cert = json.loads((tmp_path / "certificate.json").read_text())["result"]["certificate"]
    assert cert["divisor"] < cert["floor"]


def test_unperturbed_config_reduces(tmp_path):
    cfg = cli.load_config(text=SMALL.replace("J = 4", "J = 4\neps = 0.0"))
    assert cli.cmd_reduce(cfg, tmp_path, quiet) == cli.EXIT_OK
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["result"]["r_final"] == 0.0


def test_screen_is_deterministic(tmp_path):
    cfg = cli.load_config(text=SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    assert cli.cmd_screen(cfg, a, quiet) == cli.EXIT_OK
    assert cli.cmd_screen(cfg, b, quiet) == cli.EXIT_OK
    assert (a / "screen.csv").read_bytes() == (b / "screen.csv").read_bytes()
    assert (a / "screen.csv").read_text().splitlines()[0] == "gamma,excluded_fraction,fit_slope,ci_lo,ci_hi"


def test_main_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[screen]\nsamples = 0\n")
    assert cli.main(["screen", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    bad.write_text('[potential.V]\npreset = "bogus"\n')
    assert cli.main(["reduce", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["reduce", "--config", str(tmp_path / "nope.toml")]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_main_reduce_with_overrides(tmp_path):
    cfg = tmp_path / "small.toml"
    cfg.write_text(SMALL)
    assert cli.main(["reduce", "--config", str(cfg), "--out", str(tmp_path), "--nu-max", "1"]) == cli.EXIT_OK
    doc = json.loads((tmp_path / "report.json").read_text())
    assert len(doc["result"]["steps"]) == 1 and doc["config"]["schedule"]["nu_max"] == 1


def test_selfcheck_passes():
    lines = []
    assert cli.cmd_selfcheck(0, lines.append) == cli.EXIT_OK
    assert len(lines) == len(cli.SUITES) and all("PASS" in s for s in lines)
