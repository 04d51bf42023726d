"""
Test script for task presets, configuration validation and KEY=value config files
"""

import os
import tempfile

from config import PRESETS, TrainConfig, grid, load_config, preset, validate_config, with_overrides
from sketch_extract import SketchKind
from utils import ConfigError


def expect(error, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except error:
        return
    raise AssertionError(f"{fn.__name__} did not raise {error.__name__}")


def test_presets():
    geo = preset("geo")
    assert geo.kind is SketchKind.LAMBDA
    assert geo.parent_feeding and geo.label_smoothing == 0.1
    assert preset("django").copy_gate
    assert preset("wikisql").table_aware and preset("wikisql").kind is SketchKind.SQL
    assert preset("atis", hidden_size=300).hidden_size == 300
    assert set(PRESETS) == {"geo", "atis", "django", "wikisql"}
    expect(ConfigError, preset, "sparql")


def test_validate_config():
    assert validate_config(TrainConfig()) == (True, None)
    for bad in (
        TrainConfig(hidden_size=7),
        TrainConfig(dropout=1.0),
        TrainConfig(learning_rate=0.0),
        TrainConfig(patience=0),
        TrainConfig(table_aware=True),
        TrainConfig(task="wikisql", onestage=True),
        TrainConfig(task="sparql"),
    ):
        ok, error = validate_config(bad)
        assert not ok and error


def test_with_overrides():
    config = with_overrides(preset("geo"), seed=7, hidden_size=None)
    assert config.seed == 7 and config.hidden_size == preset("geo").hidden_size
    expect(ConfigError, with_overrides, preset("geo"), onestage=True, task="wikisql")


def test_load_config():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "run.env")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("HIDDEN_SIZE=128\nparent_feeding=off\nlearning_rate=0.002\nmystery=1\n")
        config = load_config(path, preset("geo"))
        assert config.hidden_size == 128
        assert config.parent_feeding is False
        assert config.learning_rate == 0.002
        assert config.label_smoothing == 0.1

        with open(path, "w", encoding="utf-8") as fh:
            fh.write("task=wikisql\nbatch_size=32\n")
        config = load_config(path, preset("geo"))
        assert config.task == "wikisql" and config.table_aware and config.batch_size == 32

        with open(path, "w", encoding="utf-8") as fh:
            fh.write("copy_gate=maybe\n")
        expect(ConfigError, load_config, path)
        expect(ConfigError, load_config, os.path.join(tmp, "missing.env"))


def test_grid():
    configs = grid(preset("geo"))
    assert len(configs) == 2 * 4 * 2 * 2
    assert {c.hidden_size for c in configs} == {250, 300}
    assert all(c.parent_feeding for c in configs)


if __name__ == "__main__":
    print("=" * 60)
    print("TESTING: config")
    print("=" * 60)
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✅ {name}")
