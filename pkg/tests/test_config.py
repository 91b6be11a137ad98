import shutil
import subprocess
from pathlib import Path

import pytest

from poclab.config import ConfigError, canonical_json, load_config, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def base(**over):
    raw = {"name": "t", "pipeline": "couple", "problem": {"preset": "he4", "d": 6},
           "schedule": {"eta": 0.01, "steps": 10}, "coupling": {"widths": [4, 8], "M": 32},
           "seeds": {"init": 0, "data": 1, "batch": 2}}
    raw.update(over)
    return raw


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert cfg.name and cfg.output_dir


def test_parse_basic():
    cfg = parse_config(base())
    assert cfg.widths == [4, 8] and cfg.M == 32 and cfg.problem.m == 4
    assert cfg.seeds == {"init": 0, "data": 1, "batch": 2} and cfg.repeats == 1
    assert cfg.output_dir == "runs/t"
    assert cfg.diagnostics["tau"] == 0.2 and cfg.reduce["kstar"] == 4


def test_explicit_problem_tables():
    raw = base(problem={"covariates": {"kind": "gaussian", "d": 4},
                        "target": {"kind": "single_index", "w_star": [1, 0, 0, 0], "link": {"hermite": [0, 0, 1]}},
                        "activation": {"hermite": [0, 0, 1]}, "second_layer": 2.0})
    cfg = parse_config(raw)
    assert cfg.problem.covariates.d == 4 and cfg.problem.second_layer == 2.0


@pytest.mark.parametrize("over,msg", [
    ({"pipeline": "train"}, "pipeline"),
    ({"problem": {"preset": "ring"}}, "preset"),
    ({"problem": None}, "problem"),
    ({"schedule": {"eta": 3.0}}, "schedule"),
    ({"schedule": {"mode": "empirical"}}, "n_train"),
    ({"coupling": {"widths": []}}, "widths"),
    ({"coupling": {"widths": [8], "M": 8}}, "exceed"),
    ({"seeds": {"init": 0}}, "seeds"),
    ({"seeds": {"init": 0, "data": "x", "batch": 0}}, "seeds"),
    ({"seeds": {"init": 0, "data": 0, "batch": 0, "repeats": 0}}, "repeats"),
    ({"problem": {"covariates": {"kind": "gaussian", "d": 4}}}, "problem"),
])
def test_config_errors(over, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(base(**over))


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    (tmp_path / "bad.toml").write_text("name = [")
    with pytest.raises(ConfigError, match="TOML"):
        load_config(tmp_path / "bad.toml")
    with pytest.raises(ConfigError):
        parse_config([1, 2])


def test_content_hash_is_key_order_independent():
    a = parse_config(base())
    raw = dict(reversed(list(base().items())))
    assert parse_config(raw).content_hash() == a.content_hash()
    assert parse_config(base(name="u")).content_hash() != a.content_hash()


@pytest.mark.skipif(shutil.which("git") is None, reason="git not installed")
def test_content_hash_matches_git_blob_hash():
    cfg = parse_config(base())
    ref = subprocess.run(["git", "hash-object", "--stdin"], input=canonical_json(cfg.raw).encode(),
                         capture_output=True, check=True).stdout.decode().strip()
    assert cfg.content_hash() == ref


def test_with_seeds():
    cfg = parse_config(base())
    b = cfg.with_seeds(5, 6, 7, repeats=2)
    assert b.seeds == {"init": 5, "data": 6, "batch": 7} and b.repeats == 2
    assert cfg.seeds["init"] == 0 and b.content_hash() != cfg.content_hash()
