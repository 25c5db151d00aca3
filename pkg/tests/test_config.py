"""Tests for run configuration loading and validation."""

import json

import pytest

from kinalign.config import THREADS_ENV, RunConfig, config_fields, load_config, save_config
from kinalign.exceptions import ConfigError
from kinalign.geomcore import PinholeCamera


def _write(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def test_defaults():
    """Test the built-in defaults."""
    config = load_config(None)
    assert config.chain_file is None
    assert config.optimizer.max_iters == 100
    assert config.optimizer.loss == "acs"
    assert config.extractor.kind == "filterbank"
    assert config.build_renderer().sigma == pytest.approx(16.0)
    assert config.optimize_spec().step_size == pytest.approx(2e-3)
    assert config.optimize_spec().gradient_scale == "initial"
    assert config.build_chain().dof == 6


def test_partial_config_fills_defaults(tmp_path):
    """Test that omitted keys keep their defaults."""
    config = load_config(_write(tmp_path, {"optimizer": {"max_iters": 7, "target": "base_frame"}}))
    assert config.optimizer.max_iters == 7
    assert config.optimize_spec().step_size == pytest.approx(1e-3)
    assert config.camera.width == 320


def test_unknown_key_names_its_path(tmp_path):
    """Test that unknown keys are reported with their dotted path."""
    with pytest.raises(ConfigError, match=r"optimizer\.bogus"):
        load_config(_write(tmp_path, {"optimizer": {"bogus": 1}}))
    with pytest.raises(ConfigError, match="telemetry"):
        load_config(_write(tmp_path, {"telemetry": {}}))


def test_wrong_type_names_its_path(tmp_path):
    """Test that a value of the wrong type is reported with its dotted path."""
    with pytest.raises(ConfigError, match=r"optimizer\.max_iters"):
        load_config(_write(tmp_path, {"optimizer": {"max_iters": "ten"}}))
    with pytest.raises(ConfigError, match=r"optimizer\.clamp_to_limits"):
        load_config(_write(tmp_path, {"optimizer": {"clamp_to_limits": 1}}))


@pytest.mark.parametrize(
    "data",
    [
        {"optimizer": {"step_size": -1.0}},
        {"optimizer": {"target": "wrist"}},
        {"optimizer": {"gradient_scale": "adam"}},
        {"renderer": {"sigma": 0.0}},
        {"losses": {"threshold": 1.5}},
        {"extractor": {"kind": "vgg16"}},
        {"camera": {"width": 0}},
    ],
)
def test_invalid_values_are_config_errors(tmp_path, data):
    """Test that out-of-range values fail at load time."""
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, data))


def test_missing_files(tmp_path):
    """Test a missing config file and a missing chain file."""
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.json"))
    with pytest.raises(ConfigError, match="chain_file"):
        load_config(_write(tmp_path, {"chain_file": "chain/none.json"}))


def test_malformed_json(tmp_path):
    """Test that unparsable JSON is a configuration error."""
    path = tmp_path / "config.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_save_and_load_round_trip(tmp_path):
    """Test that the effective configuration reloads to an equal configuration."""
    config = load_config(_write(tmp_path, {"renderer": {"sigma": 3.0}, "losses": {"dilation_radius": 5}}))
    path = save_config(config, str(tmp_path / "effective.json"))
    assert load_config(path) == config


def test_threads_precedence(monkeypatch):
    """Test override, then environment, then config, then CPU count."""
    config = RunConfig.from_dict({"parallel": {"threads": 3}})
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert config.threads() == 3
    monkeypatch.setenv(THREADS_ENV, "5")
    assert config.threads() == 5
    assert config.threads(override=2) == 2
    monkeypatch.delenv(THREADS_ENV)
    assert RunConfig().threads() >= 1


def test_bad_threads_env(monkeypatch):
    """Test that a non-integer thread count in the environment is a configuration error."""
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ConfigError):
        RunConfig().threads()


def test_renderer_default_follows_camera():
    """Test that the derived edge sharpness uses the camera the optimizer settings are built for."""
    config = RunConfig()
    camera = PinholeCamera(fx=100.0, fy=100.0, cx=32.0, cy=24.0, width=64, height=48)
    assert config.optimize_spec(camera).renderer.sigma == pytest.approx(1e-4 * (64**2 + 48**2))
    assert config.optimize_spec(max_iters=3).max_iters == 3


def test_config_fields():
    """Test the documented section keys."""
    sections = config_fields()
    assert "max_iters" in sections["optimizer"]
    assert "threads" in sections["parallel"]


def test_unscaled_steps_from_config(tmp_path):
    """Test that the gradient scaling can be switched off from the config file."""
    config = load_config(_write(tmp_path, {"optimizer": {"gradient_scale": "none"}}))
    assert config.optimize_spec().gradient_scale == "none"
