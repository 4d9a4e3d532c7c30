import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mfgsolve.cli import main
from mfgsolve.config import load_config, make_coupling, make_term_function
from mfgsolve.errors import ConfigError
from mfgsolve.problem import LocalPower, NonlocalKernel, ZeroCoupling

CONFIG_TINY = """
[problem]
dim = 1
nu = 0.5
gamma = 2.0
T = 0.2
phi = cos:1:1
u0 = cos:0.5:1
mT = const:1, cos:0.3:1
V = power:2
V0 = zero

[solver]
order = 2
mode = multiscale
L0 = 4
L = 5
eps = 1e-6
eps_inner = 1e-7
alpha0 = 1.0

[output]
dir = {out}
fields = finest
"""


@pytest.fixture
def tiny_config(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(CONFIG_TINY.format(out=tmp_path / "out"))
    return cfg


def test_term_function_parsing():
    f = make_term_function("sin:1:2, cos:0.1:5", 1)
    x = np.linspace(0, 1, 7, endpoint=False)
    expected = np.sin(4 * np.pi * x) + 0.1 * np.cos(10 * np.pi * x)
    assert np.allclose(f(x), expected)
    g = make_term_function("const:1, cos:0.5:1", 1)
    assert np.allclose(g(x), 1 + 0.5 * np.cos(2 * np.pi * x))


def test_term_function_2d_axes():
    f = make_term_function("cos:1:2:0, sin:1:1:1", 2)
    x1 = np.array([0.25]); x2 = np.array([0.25])
    assert f(x1, x2)[0] == pytest.approx(np.cos(np.pi) + np.sin(np.pi / 2))


def test_term_function_bad_spec():
    with pytest.raises(ConfigError):
        make_term_function("wobble:1:2", 1)
    with pytest.raises(ConfigError):
        make_term_function("", 1)


def test_coupling_parsing():
    assert isinstance(make_coupling("zero"), ZeroCoupling)
    p = make_coupling("power:2")
    assert isinstance(p, LocalPower) and p.q == 2.0
    k = make_coupling("ksin:900:1")
    assert isinstance(k, NonlocalKernel) and k.factor == 900.0
    with pytest.raises(ConfigError):
        make_coupling("power")
    with pytest.raises(ConfigError):
        make_coupling("kernel:1:2")


def test_load_config_roundtrip(tiny_config):
    cfg = load_config(tiny_config)
    assert cfg.problem.nu == 0.5
    assert cfg.solver.l0 == 4 and cfg.solver.l == 5
    assert cfg.output.fields == "finest"
    assert len(cfg.sha) == 12


def test_load_config_missing_key(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[problem]\ndim = 1\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_load_config_bad_value(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text(CONFIG_TINY.format(out=tmp_path).replace("nu = 0.5", "nu = -1"))
    with pytest.raises(ConfigError):
        load_config(bad)


def test_cli_solve_writes_artifacts(tiny_config, tmp_path):
    rc = main(["solve", "--config", str(tiny_config)])
    assert rc == 0
    out = tmp_path / "out"
    assert (out / "fields_u_L5.csv").exists()
    assert (out / "fields_m_L5.csv").exists()
    assert (out / "sweep_log_L5.csv").exists()
    assert (out / "multiscale_levels.csv").exists()
    header = (out / "fields_u_L5.csv").read_text().splitlines()
    assert header[0].startswith("# config_sha256=")
    assert header[1] == "n,i,t,x,value"


def test_cli_fields_roundtrip(tiny_config, tmp_path):
    from mfgsolve._cli_impl import read_fields_csv

    assert main(["solve", "--config", str(tiny_config)]) == 0
    series = read_fields_csv(tmp_path / "out" / "fields_m_L5.csv")
    assert series.grid.n == 32 and series.grid.n_t == 32
    # values round-trip bit-exactly through 17 significant digits
    rt = read_fields_csv(tmp_path / "out" / "fields_m_L5.csv")
    assert np.array_equal(series.data, rt.data)
    assert np.isfinite(series.data).all()


def test_cli_determinism(tiny_config, tmp_path):
    def strip_times(path):
        # the wall-time column is the one non-reproducible output field
        return ["," .join(r.split(",")[:-1]) for r in path.read_text().splitlines()]

    assert main(["solve", "--config", str(tiny_config), "--threads", "1"]) == 0
    first = (tmp_path / "out" / "fields_m_L5.csv").read_bytes()
    first_u = (tmp_path / "out" / "fields_u_L5.csv").read_bytes()
    first_log = strip_times(tmp_path / "out" / "sweep_log_L5.csv")
    assert main(["solve", "--config", str(tiny_config), "--threads", "1"]) == 0
    assert (tmp_path / "out" / "fields_m_L5.csv").read_bytes() == first
    assert (tmp_path / "out" / "fields_u_L5.csv").read_bytes() == first_u
    assert strip_times(tmp_path / "out" / "sweep_log_L5.csv") == first_log


def test_cli_check_passes(tiny_config):
    assert main(["check", "--config", str(tiny_config)]) == 0


def test_cli_config_error_exit_code(tmp_path):
    missing = tmp_path / "nope.cfg"
    assert main(["solve", "--config", str(missing)]) == 2


def test_cli_spectra(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(CONFIG_TINY.format(out=tmp_path / "out")
                   .replace("L0 = 4", "L0 = 2").replace("L = 5", "L = 2"))
    assert main(["spectra", "--config", str(cfg)]) == 0
    text = (tmp_path / "out" / "spectra.csv").read_text().splitlines()
    assert text[1].startswith("rho,")


def test_cli_truncation_study(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(CONFIG_TINY.format(out=tmp_path / "out")
                   + "\n[study]\nlevels = 4,5,6\norders = 2\n")
    assert main(["truncation-study", "--config", str(cfg)]) == 0
    assert (tmp_path / "out" / "truncation.csv").exists()


def test_cli_mass_audit(tiny_config, tmp_path):
    assert main(["mass-audit", "--config", str(tiny_config)]) == 0
    rows = (tmp_path / "out" / "mass_audit.csv").read_text().splitlines()
    assert rows[1] == "n,t,mass,deviation"
    devs = [float(r.split(",")[-1]) for r in rows[2:]]
    assert max(devs) <= 1e-10


def test_cli_entry_point_installed():
    res = subprocess.run([sys.executable, "-m", "mfgsolve.cli", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "solve" in res.stdout
