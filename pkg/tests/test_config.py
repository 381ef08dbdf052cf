import pytest

from d2sa.config import ConfigError, load_config, parse_config
from d2sa.losses import LossWeights
from d2sa.pipeline import Stage1Config, Stage2Config, method_grid

BASE = """
[scenario]
name = sampling
seed = 3
height = 32

[experiment]
methods = fine+mr-inr+sst, ssdu
n_target_slices = 4
"""


def test_defaults_and_overrides():
    run = parse_config(BASE + "\n[stage1]\nepochs = 3\nlambda_inr = 0.5\n[inr]\nhidden = 32\n")
    assert run.scenario.name == "sampling" and run.scenario.target.height == 32
    assert run.scenario.target.mask_seed == 3
    assert [m.name for m in run.methods] == ["fine+mr-inr+sst", "ssdu"]
    assert run.experiment.n_target_slices == 4
    assert run.experiment.stage1.epochs == 3
    assert run.experiment.stage1.weights == LossWeights(inr=0.5, self_=1.0, reg=1e-4)
    assert run.experiment.inr.hidden == 32
    assert run.experiment.stage2 == Stage2Config()


def test_stage_defaults():
    s1 = Stage1Config()
    assert (s1.batch_size, s1.epochs, s1.lr_weights, s1.lr_latent) == (2, 25, 1e-4, 1e-3)
    s2 = Stage2Config()
    assert (s2.lr, s2.max_steps, s2.val_frac, s2.window) == (1e-4, 1000, 0.05, 30)


def test_all_methods():
    run = parse_config(BASE.replace("fine+mr-inr+sst, ssdu", "all"))
    assert list(run.methods) == method_grid() and len(run.methods) == 12


@pytest.mark.parametrize("section,key", [("scenario", "name"), ("experiment", "methods")])
def test_missing_key_named(section, key):
    text = BASE.replace(f"{key} = ", f"#{key} = ")
    with pytest.raises(ConfigError, match=f"{section}.{key}"):
        parse_config(text)


@pytest.mark.parametrize(
    "extra,match",
    [
        ("[stage2]\nwindow = 0\n", "window"),
        ("[stage2]\nval_frac = 1.5\n", "fraction"),
        ("[stage1]\nepochs = many\n", "epochs"),
        ("[stage1]\nbogus = 1\n", "bogus"),
        ("[extras]\na = 1\n", "extras"),
        ("[stage1]\nssl = mse\n", "mse"),
    ],
)
def test_bad_values(extra, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(BASE + extra)


def test_unknown_method_and_scenario():
    with pytest.raises(ConfigError, match="method"):
        parse_config(BASE.replace("ssdu", "ssdu+tta"))
    with pytest.raises(ConfigError):
        parse_config(BASE.replace("name = sampling", "name = scanner"))


def test_override_and_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(BASE)
    run = load_config(path, {"stage2.max_steps": "7", "experiment.seed": "9"})
    assert run.experiment.stage2.max_steps == 7 and run.experiment.seed == 9
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.ini")


def test_shipped_config_matches_defaults():
    from pathlib import Path

    from d2sa.pipeline import ExperimentConfig

    run = load_config(Path(__file__).parents[1] / "configs" / "sampling.ini")
    assert [m.name for m in run.methods] == ["fine", "fine+mr-inr", "fine+mr-inr+sst"]
    assert run.experiment == ExperimentConfig()
