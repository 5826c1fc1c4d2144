import pytest

from wideformer.config import ConfigError, parse_config

BASE = """
[arch]
modality = "vision"
n = 32
H = 4
T = 3
n_in = 6
n_out = 3
"""


def test_minimal_config_defaults():
    cfg = parse_config(BASE)
    assert cfg.widths == (128, 256, 512)
    assert cfg.n_inits is None
    assert cfg.optimizer == "adamw"


def test_overrides_are_validated_and_kept():
    cfg = parse_config(BASE + "\n[overrides.adamw]\nPosEmb = 1.0\n")
    assert cfg.overrides == {"adamw": {"PosEmb": 1.0}}
    with pytest.raises(ConfigError, match="unknown group"):
        parse_config(BASE + "\n[overrides.adamw]\nWordEmb = 1.0\n")


@pytest.mark.parametrize(
    "extra,field,line",
    [
        ("\n[run]\nwidths = [256, 128]\n", "run.widths", 11),
        ("\n[run]\nn_inits = 0\n", "run.n_inits", 11),
        ("\n[run]\nseed = \"zero\"\n", "run.seed", 11),
        ("\n[tolerances]\nflatness = -1.0\n", "tolerances.flatness", 11),
        ("\n[run]\nbogus = 1\n", "run.bogus", 11),
    ],
)
def test_errors_name_field_and_line(extra, field, line):
    with pytest.raises(ConfigError) as exc:
        parse_config(BASE + extra)
    msg = str(exc.value)
    assert msg.startswith(field)
    assert f"line {line}" in msg


def test_arch_errors():
    with pytest.raises(ConfigError, match=r"arch\.(n|H) \(line \d\)"):
        parse_config(BASE.replace("H = 4", "H = 5"))
    with pytest.raises(ConfigError, match="missing required"):
        parse_config("[arch]\nmodality = 'vision'\nn = 8\n")
    with pytest.raises(ConfigError, match="TOML syntax"):
        parse_config("[arch\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(BASE + "\n[plots]\nx = 1\n")


def test_explicit_data_shape_checked():
    ok = parse_config(BASE.replace("T = 3", "T = 1").replace("n_in = 6", "n_in = 2") + "\n[inputs]\ndata = [[[1.0, 2.0]]]\n")
    assert ok.batch().shape == (1, 1, 2)
    with pytest.raises(ConfigError, match="inputs.data"):
        parse_config(BASE + "\n[inputs]\ndata = [[[1.0, 2.0]]]\n")


def test_readme_schema_example_parses():
    import re
    from pathlib import Path

    text = (Path(__file__).resolve().parent.parent / "README.md").read_text()
    block = re.search(r"## Config schema.*?```toml\n(.*?)```", text, re.S).group(1)
    cfg = parse_config(block)
    assert cfg.overrides == {"adamw": {"PosEmb": 1.0}}
    assert cfg.tolerances["wick_z"] == 4.0
