import hashlib
import json
import os

import numpy as np
import pytest

from lapguide.cli import build_parser, config_from_args, main
from lapguide.errors import ConfigurationError, MissingArtifactError
from lapguide.harness import ConvergenceTable, emit_plot_data
from lapguide.spectral import loglog_slope


def _md5(path):
    with open(path, "rb") as fh:
        return hashlib.md5(fh.read()).hexdigest()


def test_solve_writes_field_contour_and_report(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["solve", "--example", "1", "--h", "0.1", "--N", "16", "--delta", "0.2",
                 "--cells=-1,0,1", "--out", str(out)])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["problem"] == "example1" and summary["norm_omega0"] > 0
    for name in ("field.csv", "field.svg", "contour.csv", "contour.svg", "report.json"):
        assert (out / name).exists()
    rep = json.loads((out / "report.json").read_text())
    assert rep["N"] == 16 and rep["method"] == "cci"
    cells = np.loadtxt(out / "field.csv", delimiter=",", skiprows=1)[:, 0]
    assert set(cells) == {-1, 0, 1}


def test_repeated_runs_are_bit_identical(tmp_path):
    sums = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["solve", "--example", "2", "--h", "0.1", "--N", "16", "--method", "decomp",
                     "--out", str(out), "--no-svg"]) == 0
        sums.append(_md5(out / "field.csv"))
    assert sums[0] == sums[1]


def test_config_file_values_yield_to_flags(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# damped guide\nexample = remark2\nh = 0.1\nN = 8, 16\nmethod = decomp\nsigma = 0.3\n")
    args = build_parser().parse_args(["solve", "--config", str(cfg), "--N", "32"])
    rc = config_from_args(args)
    assert rc.problem.name == "remark2"
    assert rc.h == (0.1,) and rc.N == (32,) and rc.method == "decomp" and rc.sigma == 0.3


def test_bad_input_maps_to_exit_codes(tmp_path, capsys):
    assert main(["solve", "--example", "nope", "--out", str(tmp_path)]) == ConfigurationError.exit_code
    assert main(["solve", "--example", "1", "--h", "0.7", "--out", str(tmp_path)]) == ConfigurationError.exit_code
    assert main(["converge", "--example", "1", "--axis", "N", "--out", str(tmp_path)]) == ConfigurationError.exit_code
    assert "error (ConfigurationError)" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["nonsense-verb"])


def test_plot_data_needs_its_csv(tmp_path):
    with pytest.raises(MissingArtifactError):
        emit_plot_data("dispersion", str(tmp_path))
    with pytest.raises(ConfigurationError):
        emit_plot_data("histogram", str(tmp_path))


def test_dispersion_and_exceptional_verbs(tmp_path):
    out = tmp_path / "disp"
    assert main(["dispersion", "--example", "1", "--h", "0.1", "--out", str(out)]) == 0
    data = np.loadtxt(out / "dispersion.csv", delimiter=",", skiprows=1)
    assert data.shape[0] == 121 and np.all(np.diff(data[:, 1:], axis=1) >= -1e-9)
    assert (out / "dispersion.svg").read_text().startswith("<svg")
    assert main(["exceptional", "--example", "1", "--h", "0.1", "--out", str(out)]) == 0
    lines = (out / "exceptional.csv").read_text().splitlines()
    assert lines[0] == "h,beta_hat,multiplicity,lambda,class" and len(lines) == 3


def test_convergence_table_slope_can_be_recomputed_from_csv(tmp_path):
    out = tmp_path / "conv"
    assert main(["converge", "--example", "remark2", "--h", "0.1", "--N", "16,32,64", "--ref-N", "128",
                 "--out", str(out), "--no-svg"]) == 0
    rep = json.loads((out / "report.json").read_text())
    data = np.loadtxt(out / "convergence.csv", delimiter=",", skiprows=1)
    assert np.allclose(data[:, 0], [16, 32, 64])
    assert loglog_slope(data[:, 0], data[:, 1]) == pytest.approx(rep["slope"], rel=1e-9)
    assert np.all(np.diff(data[:, 1]) < 0)


def test_convergence_table_orders_rows():
    t = ConvergenceTable("h", {}, [(0.04, 4e-3), (0.01, 2.5e-4), (0.02, 1e-3)], {})
    assert list(t.params) == [0.01, 0.02, 0.04]
    assert t.slope == pytest.approx(2.0)
    assert np.allclose(t.ratios(), [0.25, 0.25])


def test_oracle_verb_reports_indicators(tmp_path):
    out = tmp_path / "oracle"
    assert main(["oracle", "--example", "remark2", "--h", "0.1", "--epsilons", "4e-3,2e-3,1e-3",
                 "--out", str(out), "--no-svg"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert len(rep["decay_indicators"]) == 3 and max(rep["decay_indicators"]) < 1e-6
    assert os.path.exists(out / "field.csv")
