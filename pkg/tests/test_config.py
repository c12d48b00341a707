import dataclasses

import pytest

from splat4d import config
from splat4d.errors import ContractError, FormatError


def test_defaults_round_trip():
    c = config.Config()
    assert config.parse(config.serialize(c)) == c


def test_custom_round_trip(tmp_path):
    text = """
    # a comment
    seed = 7
    threads = 3
    fit.iterations = 123
    fit.freeze = pose, h
    fit.lr.mu = 0.005
    loss.w_smooth = 0.0
    raster.eps_reg = 0.25
    raster.background = 0.1 0.2 0.3
    eval.mode = per-valid-pixel
    eval.align = false
    eval.statistic = norm
    """
    c = config.parse(text)
    assert c.seed == 7 and c.threads == 3 and c.fit.iterations == 123
    assert c.fit.freeze == {"q", "tau", "h"}
    assert c.fit.lr["mu"] == 0.005 and c.fit.lr["v"] == 1e-2
    assert c.fit.weights.w_smooth == 0.0 and c.raster.background == (0.1, 0.2, 0.3)
    assert c.eval.mode == "per-valid-pixel" and c.eval.align is False
    config.save(c, tmp_path / "c.txt")
    assert config.load(tmp_path / "c.txt") == c
    # awkward floats survive exactly
    c2 = dataclasses.replace(c, raster=dataclasses.replace(c.raster, eps_reg=0.1 + 0.2))
    assert config.parse(config.serialize(c2)) == c2


@pytest.mark.parametrize("text, err", [
    ("fit.iteration = 5", ContractError),
    ("seed = 1\nseed = 2", ContractError),
    ("seed = one", ContractError),
    ("eval.mode = sometimes", ContractError),
    ("threads = 0", ContractError),
    ("fit.iterations = -3", ContractError),
    ("eval.align = maybe", ContractError),
    ("just words", FormatError),
])
def test_rejects_bad_input(text, err):
    with pytest.raises(err):
        config.parse(text)


def test_every_key_is_serialized():
    assert set(config.to_pairs(config.Config())) == set(config.KEYS)


def test_documented_defaults():
    c = config.Config()
    assert c.fit.lr["mu"] == 1e-2 and c.fit.lr["o"] == 1e-3
    assert c.fit.weights.w_lpips == 0.05 and c.fit.weights.w_smooth == 0.1
    assert c.raster.eps_reg == 0.3 and c.raster.cutoff_sigma == 3.0
    assert c.eval.alpha_threshold == 0.5 and c.eval.moving_threshold == 0.05


def test_run_record_omits_threads():
    c = config.parse("threads = 4\nseed = 2")
    text = config.serialize(c, include_threads=False)
    assert "threads" not in text
    assert config.parse(text) == dataclasses.replace(c, threads=1)
