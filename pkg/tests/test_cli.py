import csv
import json
import re
from pathlib import Path

import pytest

from wideformer.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = """
[arch]
modality = "{modality}"
n = 32
H = 4
T = 3
n_in = {n_in}
n_out = {n_out}
blocks = {blocks}
{extra}

[strategy]
preset = "{preset}"

[run]
widths = [32, 64, 128]
n_inits = {n_inits}
n_samples = 512
"""


def small(tmp_path, modality="vision", preset="neural-tangent", n_inits=16, depth=2, name="c.toml", extra=""):
    blocks = ["mhsa", "mlp", "mhsa", "mlp"][:depth]
    if modality == "language":
        blocks = ["mhsa-masked" if b == "mhsa" else b for b in blocks]
        n_in = n_out = 10
        extra = extra or "weight_tying = true"
    else:
        n_in, n_out = 6, 3
    text = SMALL.format(modality=modality, n_in=n_in, n_out=n_out, blocks=json.dumps(blocks), extra=extra, preset=preset, n_inits=n_inits)
    p = tmp_path / name
    p.write_text(text)
    return p


def test_plan_writes_json_and_table(tmp_path):
    out = tmp_path / "o"
    assert main(["plan", "--config", str(small(tmp_path)), "--out", str(out)]) == 0
    plan = json.loads((out / "plan.json").read_text())
    assert plan["groups"]["HeadB"]["init_var"] == 0.0
    table = (out / "table.txt").read_text()
    assert "positional embedding: std 0.02, lr factor n^{-1/2}" in table


def test_language_plan_table_has_rescale(tmp_path):
    out = tmp_path / "o"
    assert main(["plan", "--config", str(small(tmp_path, "language")), "--out", str(out)]) == 0
    assert "word embedding: std 1, lr factor n^{-1/2}, rescale n^{-1/2}" in (out / "table.txt").read_text()


def test_standard_plan_has_unit_factors(tmp_path):
    out = tmp_path / "o"
    assert main(["plan", "--config", str(small(tmp_path, preset="standard")), "--out", str(out)]) == 0
    groups = json.loads((out / "plan.json").read_text())["groups"]
    assert {g["adamw_factor"] for g in groups.values()} == {1.0}


def test_propagate_is_byte_deterministic(tmp_path):
    cfg = small(tmp_path, depth=4)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["propagate", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["propagate", "--config", str(cfg), "--out", str(b)]) == 0
    for f in ("kernels.csv", "ntk.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    rows = list(csv.DictReader((a / "kernels.csv").open()))
    labels = []
    for r in rows:
        if r["label"] not in labels:
            labels.append(r["label"])
    assert labels == ["input", "stem", "block1:mhsa", "block2:mlp", "block3:mhsa", "block4:mlp", "head"]


def test_report_polylines_and_empty_csv(tmp_path):
    cfg = small(tmp_path, depth=4)
    out = tmp_path / "o"
    assert main(["propagate", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["report", "--in", str(out), "--out", str(out / "svg")]) == 0
    svg = (out / "svg" / "kernel_depth.svg").read_text()
    assert len(re.findall(r'<g id="pair-\d+"', svg)) == 6  # B=2, T=3
    first = svg
    assert main(["report", "--in", str(out), "--out", str(out / "svg")]) == 0
    assert (out / "svg" / "kernel_depth.svg").read_text() == first

    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "kernels.csv").write_text("")
    assert main(["report", "--in", str(empty), "--out", str(tmp_path / "x")]) == 2
    (empty / "kernels.csv").write_text("block,label,pair1,pair2,G,F,G_se\n0,input,0,0,abc,,\n")
    assert main(["report", "--in", str(empty), "--out", str(tmp_path / "x")]) == 2
    assert main(["report", "--in", str(tmp_path / "missing"), "--out", str(tmp_path / "x")]) == 2


@pytest.mark.slow
def test_verify_gradient_slope_plot(tmp_path):
    cfg = small(tmp_path, n_inits=32)
    out = tmp_path / "o"
    code = main(["verify", "--config", str(cfg), "--out", str(out), "--criteria", "8", "--quiet"])
    assert code in (0, 1)
    rows = list(csv.DictReader((out / "scaling.csv").open()))
    assert {r["width"] for r in rows} == {"32", "64", "128"}
    assert main(["report", "--in", str(out), "--out", str(out / "svg")]) == 0
    svg = (out / "svg" / "grad_width.svg").read_text()
    m = re.search(r"vision:Q \(slope ([+-][0-9.]+)\)", svg)
    assert m and abs(float(m.group(1)) + 0.5) < 0.1


def test_verify_writes_report_and_exit_codes(tmp_path):
    out = tmp_path / "o"
    code = main(["verify", "--config", str(small(tmp_path)), "--out", str(out), "--criteria", "10", "--quiet"])
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["verdict"] == "pass"
    assert all({"name", "value", "tolerance", "pass"} <= set(c) for c in rep["checks"])
    header = (out / "verify.csv").read_text().splitlines()[0]
    assert header.startswith("criterion,name,value,tolerance,pass")


def test_inconclusive_is_not_failure_unless_strict(tmp_path):
    cfg = small(tmp_path, n_inits=1)
    out = tmp_path / "o"
    args = ["verify", "--config", str(cfg), "--out", str(out), "--criteria", "3,8", "--quiet"]
    assert main(args) == 0
    rep = json.loads((out / "report.json").read_text())
    assert {c["verdict"] for c in rep["criteria"].values()} == {"inconclusive"}
    assert main(args + ["--strict"]) == 1


@pytest.mark.slow
def test_corrupted_plan_fails_flatness(tmp_path):
    text = (CONFIGS / "corrupted.toml").read_text().replace("[overrides", "[run]\nn_inits = 8\n\n[overrides")
    cfg = tmp_path / "bad.toml"
    cfg.write_text(text)
    out = tmp_path / "o"
    assert main(["verify", "--config", str(cfg), "--out", str(out), "--criteria", "9", "--quiet"]) == 1
    rep = json.loads((out / "report.json").read_text())
    verdicts = {c["name"]: c["verdict"] for c in rep["checks"]}
    assert verdicts["update-flatness:adamw"] == "fail"
    assert verdicts["update-flatness:sgd"] == "pass"


@pytest.mark.parametrize(
    "args",
    [
        ["plan", "--config", "/nonexistent.toml", "--out", "x"],
        ["verify", "--config", "CFG", "--out", "x", "--widths", "64"],
        ["verify", "--config", "CFG", "--out", "x", "--widths", "64,a"],
        ["verify", "--config", "CFG", "--out", "x", "--widths", "128,64"],
        ["verify", "--config", "CFG", "--out", "x", "--criteria", "11"],
        ["plan", "--config", "CFG"],
        ["frobnicate"],
    ],
)
def test_input_errors_exit_2(tmp_path, args, capsys):
    cfg = str(small(tmp_path))
    args = [cfg if a == "CFG" else a for a in args]
    args = [str(tmp_path / a) if a == "x" else a for a in args]
    assert main(args) == 2


def test_config_error_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text(small(tmp_path).read_text().replace("widths = [32, 64, 128]", "widths = [64, 32]"))
    assert main(["plan", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "run.widths" in err and "line" in err


def test_numeric_failure_names_stage(tmp_path, capsys):
    p = small(tmp_path, extra="eps_ln = 0.0")
    p.write_text(p.read_text() + '\n[constants.C]\nPatch = 0.0\nPosEmb = 0.0\n')
    assert main(["propagate", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "stem" in capsys.readouterr().err


def test_shipped_configs_parse():
    from wideformer.config import load_config

    for p in CONFIGS.glob("*.toml"):
        load_config(p)
