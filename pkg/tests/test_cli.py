import csv

import numpy as np
import pytest

from tidaladapt.cli import main, read_config
from tidaladapt.errors import ParseError
from tidaladapt.features import Dataset, write_dataset
from tidaladapt.mesh import read_mesh
from tidaladapt.network import load


def read_csv(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_mesh_init_and_solve(tmp_path, capsys):
    assert main(["mesh-init", "--h", "50", "--out", str(tmp_path / "m.txt")]) == 0
    m = read_mesh(tmp_path / "m.txt")
    assert m.n_elements > 0
    assert main(["solve", "--mesh", str(tmp_path / "m.txt"), "--out", str(tmp_path / "s.csv")]) == 0
    rows = read_csv(tmp_path / "s.csv")
    assert rows[0] == ["elements", "dofs", "newton_iterations", "qoi"]
    assert int(rows[1][0]) == m.n_elements and float(rows[1][3]) > 0


def test_adapt_csv(tmp_path):
    code = main(["adapt", "--h", "36", "--complexity", "800", "--max-iterations", "3", "--min-iterations", "3",
                 "--out", str(tmp_path / "a.csv"), "--mesh-out", str(tmp_path / "final.txt")])
    assert code == 2  # the iteration cap is reached before any convergence check
    rows = read_csv(tmp_path / "a.csv")
    assert rows[0][:5] == ["iteration", "dofs", "elements", "qoi", "newton"] and len(rows) == 4
    read_mesh(tmp_path / "final.txt").validate()


def test_train_command(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 32))
    write_dataset(Dataset(np.zeros(40), np.zeros(40), X, 1e-3 * X[:, 0]), tmp_path / "d.csv")
    code = main(["train", "--data", str(tmp_path / "d.csv"), "--out", str(tmp_path / "n.txt"), "--epochs", "3",
                 "--batch", "10", "--history", str(tmp_path / "h.csv")])
    assert code == 0
    assert load(tmp_path / "n.txt").dims == (32, 64, 1)
    rows = read_csv(tmp_path / "h.csv")
    assert rows[0] == ["epoch", "train_mse", "val_mse"] and len(rows) == 5


def test_config_file(tmp_path):
    (tmp_path / "c.cfg").write_text("# defaults\nh = 60\nout = %s\n" % (tmp_path / "m.txt"))
    assert main(["--config", str(tmp_path / "c.cfg"), "mesh-init"]) == 0
    assert read_mesh(tmp_path / "m.txt").n_elements == 2 * 20 * 8  # 1200 / 60 by round(500 / 60)


def test_config_errors(tmp_path):
    (tmp_path / "c.cfg").write_text("bogus = 1\n")
    assert main(["--config", str(tmp_path / "c.cfg"), "mesh-init", "--out", "x"]) == 1
    (tmp_path / "c.cfg").write_text("h = wide\n")
    assert main(["--config", str(tmp_path / "c.cfg"), "mesh-init", "--out", "x"]) == 1
    (tmp_path / "c.cfg").write_text("no equals sign\n")
    with pytest.raises(ParseError):
        read_config(tmp_path / "c.cfg")
    assert main(["--config", str(tmp_path / "missing.cfg"), "mesh-init"]) == 1


def test_usage_errors(tmp_path):
    assert main([]) == 1
    assert main(["adapt", "--preset", "nowhere"]) == 1
    assert main(["solve", "--scenario", str(tmp_path / "missing.cfg")]) == 1
    assert main(["--help"]) == 0
