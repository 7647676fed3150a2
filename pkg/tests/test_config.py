import json

import pytest

from radarslam.config import PipelineConfig


def test_defaults_are_valid():
    c = PipelineConfig()
    assert c.s_threshold == 0.5
    assert c.scale_tolerance == 0.05
    assert c.bias_states


def test_round_trip(tmp_path):
    c = PipelineConfig(odom_sigma=(0.2, 0.1, 0.01), cauchy_schedule=(5.0,), sim_stop=5.0)
    c.save(tmp_path / "c.json")
    loaded = PipelineConfig.load(tmp_path / "c.json")
    assert loaded == c
    assert isinstance(loaded.odom_sigma, tuple)


def test_partial_file_overrides_defaults(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"alpha": 0.5}))
    c = PipelineConfig.load(tmp_path / "c.json")
    assert c.alpha == 0.5 and c.resolution == PipelineConfig().resolution


def test_unknown_keys_rejected():
    with pytest.raises(ValueError, match="unknown config keys: bogus"):
        PipelineConfig.from_dict({"bogus": 1})


def test_non_object_file_rejected(tmp_path):
    (tmp_path / "c.json").write_text("[1, 2]")
    with pytest.raises(ValueError):
        PipelineConfig.load(tmp_path / "c.json")


@pytest.mark.parametrize(
    "override",
    [
        {"resolution": 0.0},
        {"alpha": 0.0},
        {"alpha": 1.5},
        {"odom_sigma": (0.1, 0.1)},
        {"odom_sigma": (0.1, -0.1, 0.01)},
        {"n_freqs": 100},
        {"s_threshold": 1.5},
        {"cauchy_schedule": (1.0, 0.0)},
        {"bias_sign": 0},
        {"min_inliers": 1},
        {"grid_steps": (9, 0, 7)},
        {"sim_stop": -1.0},
    ],
)
def test_validation(override):
    with pytest.raises(ValueError, match="invalid config"):
        PipelineConfig(**override)


def test_ablations():
    c = PipelineConfig()
    assert not c.ablated(no_gyro=True).use_gyro
    assert not c.ablated(no_gyro=True).bias_states
    assert c.ablated(no_bias=True).use_gyro and not c.ablated(no_bias=True).bias_states
    assert c.ablated(coarse_only=True).coarse_only
    assert c.ablated(no_local_map=True).alpha == 1.0
    # the original is left untouched
    assert c == PipelineConfig()


def test_odometry_config_mirrors_settings():
    c = PipelineConfig(alpha=0.4, use_gyro=False, output_drift=1e-3)
    o = c.odometry_config()
    assert (o.alpha, o.use_gyro, o.output_drift) == (0.4, False, 1e-3)
