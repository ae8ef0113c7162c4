import json

import numpy as np
import pytest

from otlab import __version__
from otlab.cli import main
from otlab.config import load_config
from otlab.errors import ConfigError
from otlab.synth import density_hash, synth_density

SINUSOIDAL_F2_HASH = "7bd4aa987db235e340a78fc56db5e1d64a136121bd57957f74035da2a3c7c243"


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["solve", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 2
    assert error_of(capsys)["error"] == "ConfigError"


def test_bad_values_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, "[tilt]\ntheta = 1.5\n")
    assert main(["tilt", "--config", cfg, "--out", str(tmp_path)]) == 2
    err = error_of(capsys)
    assert err["exit_code"] == 2 and "theta" in err["message"]
    cfg = write(tmp_path, "[grid]\nn = 8\nunknown = 1\n")
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_mass_mismatch_exits_2(tmp_path, capsys):
    cfg = write(
        tmp_path,
        '[grid]\nn = 8\n[density.source]\nfamily = "uniform"\n'
        '[density.target]\nfamily = "bump"\ndelta = 0.5\n[solver]\nkind = "exact"\n',
    )
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert error_of(capsys)["error"] == "MassMismatch"


def test_unknown_family_is_config_error(tmp_path, capsys):
    with pytest.raises(ConfigError):
        synth_density("plaid", {}, 8)
    cfg = write(tmp_path, '[grid]\nn = 8\n[density.source]\nfamily = "plaid"\n')
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert error_of(capsys)["error"] == "ConfigError"


def test_bad_seed_and_threads(tmp_path):
    assert main(["solve", "--config", "uniform", "--seed", "-1", "--out", str(tmp_path)]) == 2
    assert main(["solve", "--config", "uniform", "--threads", "0", "--out", str(tmp_path)]) == 2


def test_synth_hash_frozen():
    rho = synth_density("sinusoidal", {"delta": 0.05, "frequency": 2.0}, 64)
    h = 2 / 64
    ax = -1 + h * (np.arange(64) + 0.5)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    assert np.allclose(rho.cells, 1 + 0.05 * np.sin(2 * np.pi * X) * np.sin(2 * np.pi * Y), atol=1e-15)
    assert density_hash(rho) == SINUSOIDAL_F2_HASH


def test_iterate_on_uniform_is_trivial(tmp_path):
    assert main(["iterate", "--config", "uniform", "--out", str(tmp_path)]) == 0
    body = json.loads((tmp_path / "trace.json").read_text())
    assert body["meta"]["otlab_version"] == __version__
    assert body["meta"]["config_hash"] == load_config("uniform").hash()
    assert body["steps"] == 3 and body["growth_constant"] == 0.0
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0].startswith(f"# otlab {__version__} config ")
    rows = [list(map(float, line.split(",")[1:3])) for line in lines[2:]]
    assert rows == [[0.0, 0.0]] * 4


def test_solve_writes_map(tmp_path):
    assert main(["solve", "--config", "uniform", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "map.csv").read_text().splitlines()
    assert lines[1] == "x1,x2,Tx1,Tx2" and len(lines) == 2 + 64 * 64
    assert json.loads((tmp_path / "solve.json").read_text())["solver"] == "identity"


@pytest.fixture(scope="module")
def sinusoidal_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("sin")
    for cmd in ("excess", "tilt", "seminorm", "certify", "scan"):
        assert main([cmd, "--config", "sinusoidal", "--out", str(out), "--threads", "2"]) == 0
    return out


def test_sinusoidal_scan_regression(sinusoidal_out):
    body = json.loads((sinusoidal_out / "scan.json").read_text())
    assert body["coverage"] == pytest.approx(1.0, abs=0.02)
    assert body["eps_cal"] == pytest.approx(0.21538398226722613)


def test_sinusoidal_excess_regression(sinusoidal_out):
    body = json.loads((sinusoidal_out / "excess.json").read_text())
    assert body["E"] == pytest.approx(1.0296e-3, rel=1e-4)
    assert body["D"] == pytest.approx(3.47687e-4, rel=1e-5)


def test_sinusoidal_artifacts(sinusoidal_out):
    step = json.loads((sinusoidal_out / "step.json").read_text())
    assert step["E_out"] < step["E_in"] and abs(np.linalg.det(step["M"]) - 1) < 1e-12
    cert = json.loads((sinusoidal_out / "certificate.json").read_text())
    assert cert["verdict"] == "pass" and cert["trace"] is not None
    sem = json.loads((sinusoidal_out / "seminorm.json").read_text())
    assert sem["seminorm"] == max(p["value"] for p in sem["profile"])
