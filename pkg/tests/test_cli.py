import csv
import json
import subprocess
import sys
from collections import defaultdict

import numpy as np
import pytest

from mmcount.binomial_model import transient_marginals
from mmcount.cli import (
    emit_config,
    execute,
    load_config,
    main,
    parse_config,
    shipped_configs,
)
from mmcount.exceptions import ColumnSumError, ConfigError, DimensionError

CANONICAL = """
model:
  type: binomial
  q: [[-1, 2], [1, -2]]
  lambda: [1, 3]
  n: 2
task:
  command: dist
  times: [0.5, 1.0]
"""


def write(tmp_path, text, name="run.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_parse_minimal():
    spec = parse_config(CANONICAL)
    assert spec.model.d == 2 and spec.model.n == 2
    assert spec.task.times == (0.5, 1.0)
    model = spec.model.build()
    np.testing.assert_array_equal(model.q_, [[-1, 2], [1, -2]])


def test_row_convention_transposed():
    spec = parse_config(CANONICAL.replace("[[-1, 2], [1, -2]]", "[[-1, 1], [2, -2]]")
                        .replace("lambda:", "q_convention: row\n  lambda:"))
    np.testing.assert_array_equal(spec.model.build().q_, [[-1, 2], [1, -2]])


def test_bad_generator_names_column():
    with pytest.raises(ColumnSumError, match="column 0") as info:
        parse_config(CANONICAL.replace("[[-1, 2], [1, -2]]", "[[-1, 2], [2, -2]]"))
    assert info.value.column == 0


def test_lambda_length_mismatch():
    with pytest.raises(DimensionError, match="model.lambda"):
        parse_config(CANONICAL.replace("[1, 3]", "[1, 3, 5]"))


@pytest.mark.parametrize("old,new,path", [
    ("type: binomial", "type: hawkes", "model.type"),
    ("n: 2", "n: 0", "model.n"),
    ("command: dist", "command: plot", "task.command"),
    ("times: [0.5, 1.0]", "times: [-1]", "task.times"),
    ("times: [0.5, 1.0]", "times: [1]\n  colour: red", "task.colour"),
    ("n: 2", "n: 2\n  x0: [0.5, 0.6]", "model.x0"),
    ("times: [0.5, 1.0]", "observations: missing.csv", "task.observations"),
])
def test_schema_errors_carry_field_path(old, new, path):
    with pytest.raises(ConfigError) as info:
        parse_config(CANONICAL.replace(old, new))
    assert info.value.path == path


def test_round_trip_shipped_configs():
    for path in shipped_configs():
        spec = load_config(path)
        again = parse_config(emit_config(spec), base_dir=path.parent)
        assert again == spec, path.name


def test_dist_rows_sum_to_one(tmp_path):
    cfg = write(tmp_path, CANONICAL)
    assert main(["--config", str(cfg), "--output-dir", str(tmp_path / "out")]) == 0
    rows = read_rows(tmp_path / "out" / "dist.csv")
    assert list(rows[0]) == ["t", "k", "state", "prob"]
    totals = defaultdict(float)
    for r in rows:
        totals[r["t"]] += float(r["prob"])
    assert set(totals) == {"0.5", "1.0"}
    assert all(abs(v - 1) < 1e-10 for v in totals.values())
    model = parse_config(CANONICAL).model.build()
    exact = transient_marginals(model, 1.0).blocks
    got = {(int(r["k"]), int(r["state"])): float(r["prob"]) for r in rows if r["t"] == "1.0"}
    for (k, j), p in got.items():
        assert p == exact[k, j - 1]
    meta = json.loads((tmp_path / "out" / "dist.meta.json").read_text())
    assert meta["seed"] == 12345 and "numpy" in meta["versions"]
    assert meta["precision"] == 1e-10


def test_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, CANONICAL.replace("[[-1, 2], [1, -2]]", "[[-1, 2], [2, -2]]"))
    assert main(["validate", "--config", str(bad), "--output-dir", str(tmp_path)]) == 1
    assert "column 0" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "nope.yaml")]) == 1
    assert main(["dist", "--output-dir", str(tmp_path)]) == 1
    tight = write(tmp_path, CANONICAL + "output:\n  precision: 1.0e-300\n", "tight.yaml")
    assert main(["--config", str(tight), "--output-dir", str(tmp_path / "t")]) == 2
    assert "numerical check failed" in capsys.readouterr().err


def test_console_script_exit_status(tmp_path):
    bad = write(tmp_path, CANONICAL.replace("[1, 3]", "[1]"))
    proc = subprocess.run([sys.executable, "-m", "mmcount.cli", "--config", str(bad)],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 1
    assert "model.lambda" in proc.stderr


@pytest.mark.parametrize("path", shipped_configs(), ids=lambda p: p.stem)
def test_shipped_configs_run(path, tmp_path):
    spec = load_config(path)
    out = tmp_path / "out"
    assert execute(spec, out) == 0
    command = spec.task.command
    assert (out / f"{command}.csv").exists()
    assert (out / f"{command}.meta.json").exists()


def test_command_outputs(tmp_path):
    by_name = {p.stem: load_config(p) for p in shipped_configs()}
    execute(by_name["binomial_cf"], tmp_path / "cf")
    rows = read_rows(tmp_path / "cf" / "cf.csv")
    assert list(rows[0]) == ["t", "u", "re", "im"]
    at_zero = [r for r in rows if float(r["u"]) == 0.0]
    assert all(float(r["re"]) == pytest.approx(1.0, abs=1e-12) for r in at_zero)
    execute(by_name["binomial_predict"], tmp_path / "pr")
    rows = read_rows(tmp_path / "pr" / "predict.csv")
    assert list(rows[0]) == ["elapsed", "k", "state", "prob"]
    assert sum(float(r["prob"]) for r in rows) == pytest.approx(1.0, abs=1e-10)
    assert all(float(r["prob"]) == 0.0 for r in rows if r["k"] == "0")
    execute(by_name["binomial_limit"], tmp_path / "lim")
    rows = read_rows(tmp_path / "lim" / "limit.csv")
    assert {"resolvent", "exp_k1"} <= {r["identity"] for r in rows}
    execute(by_name["binomial_filter"], tmp_path / "flt")
    rows = read_rows(tmp_path / "flt" / "filter.csv")
    assert list(rows[0])[:2] == ["time", "count"] and rows[-1]["count"] == "2"


def test_simulate_reproducible(tmp_path):
    spec = load_config([p for p in shipped_configs() if p.stem == "poisson_simulate"][0])
    execute(spec, tmp_path / "a")
    execute(spec, tmp_path / "b")
    execute(spec, tmp_path / "c", seed=spec.task.seed + 1)
    a = (tmp_path / "a" / "simulate.csv").read_bytes()
    assert a == (tmp_path / "b" / "simulate.csv").read_bytes()
    assert a != (tmp_path / "c" / "simulate.csv").read_bytes()
    rows = read_rows(tmp_path / "a" / "simulate.csv")
    assert list(rows[0]) == ["t", "k", "state", "estimate", "std_error", "ci_low", "ci_high"]


def test_floats_are_shortest_round_trip(tmp_path):
    cfg = write(tmp_path, CANONICAL)
    main(["--config", str(cfg), "--output-dir", str(tmp_path / "out")])
    for r in read_rows(tmp_path / "out" / "dist.csv"):
        assert repr(float(r["prob"])) == r["prob"]
