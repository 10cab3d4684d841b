import json

import pytest

from vibroimpact import presets
from vibroimpact.config import DEFAULTS, ConfigError, load_config


def write(tmp_path, data, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


class TestDefaults:
    def test_defaults_validate(self):
        cfg = load_config()
        assert cfg["reduction"]["n_modes"] == presets.N_MODES
        assert cfg["contact"]["mu"] == 0.4
        assert cfg["integrator"]["steps_per_period"] == 1000
        assert cfg["seed"] == 0

    def test_test_order(self):
        tests = load_config()["excitation"]["tests"]
        assert [(t["level"], t["direction"], t["clearance"]) for t in tests] == list(
            presets.TEST_SEQUENCE)

    def test_default_grid(self):
        grid = load_config().frequency_grid()
        assert grid[0] == 0.95 and grid[-1] == 1.1 and len(grid) == 31

    def test_length_scale_is_beam_length(self):
        assert load_config().length_scale == presets.TwinBeamSpec().length

    def test_defaults_are_not_mutated(self):
        load_config(overrides=["contact.mu=0.1"])
        assert DEFAULTS["contact"]["mu"] == 0.4


class TestMerging:
    def test_file_then_overrides(self, tmp_path):
        p = write(tmp_path, {"reduction": {"n_modes": 20}, "contact": {"mu": 0.2}})
        cfg = load_config(p, ["contact.mu=0.3"])
        assert cfg["reduction"]["n_modes"] == 20
        assert cfg["contact"]["mu"] == 0.3
        assert cfg["contact"]["tol_rel"] == DEFAULTS["contact"]["tol_rel"]

    def test_override_parses_json_values(self):
        cfg = load_config(overrides=['excitation.grid=[1.0, 0.98]', "outputs.series=false"])
        assert cfg.frequency_grid() == [0.98, 1.0]
        assert cfg["outputs"]["series"] is False

    def test_override_of_generator_field(self):
        cfg = load_config(overrides=["model.twin_beam.n_elements=16"])
        assert cfg.twin_beam_spec().n_elements == 16

    def test_relative_paths_follow_config(self, tmp_path):
        p = write(tmp_path, {})
        assert load_config(p).path("a.mtx") == tmp_path / "a.mtx"

    @pytest.mark.parametrize("source", [{"bogus": 1}, {"contact": {"mu_s": 0.2}}])
    def test_unknown_keys(self, tmp_path, source):
        with pytest.raises(ConfigError, match="unknown configuration key"):
            load_config(write(tmp_path, source))

    def test_unknown_override(self):
        with pytest.raises(ConfigError, match="contact.friction"):
            load_config(overrides=["contact.friction=1"])

    def test_malformed_override(self):
        with pytest.raises(ConfigError, match="key.path=value"):
            load_config(overrides=["contact.mu"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(p)


class TestValidation:
    @pytest.mark.parametrize("override,msg", [
        ("version=2", "version"),
        ("format=\"other\"", "format"),
        ("reduction.n_modes=0", "n_modes"),
        ("reduction.n_modes=2.5", "n_modes"),
        ("damping.ratios=[1.2]", "damping"),
        ("contact.mu=-1", "contact"),
        ("contact.rho=2", "contact"),
        ("excitation.grid={\"start\": 1.1, \"stop\": 0.9, \"step\": 0.01}", "grid"),
        ("excitation.grid=[]", "grid"),
        ("excitation.tests=[{\"level\": 1e-5, \"direction\": \"left\", \"clearance\": 0}]",
         "direction"),
        ("excitation.tests=[{\"level\": -1, \"direction\": \"up\", \"clearance\": 0}]", "level"),
        ("excitation.wait_periods=0", "wait_periods"),
        ("integrator.steps_per_period=1", "steps_per_period"),
        ("outputs.stride=0", "stride"),
        ("workers=0", "workers"),
        ("seed=\"now\"", "seed"),
        ("model.source=\"cad\"", "source"),
        ("model.twin_beam={\"n_elem\": 3}", "twin_beam"),
        ("model.length_scale=-1", "length_scale"),
    ])
    def test_rejected(self, override, msg):
        with pytest.raises(ConfigError, match=msg):
            load_config(overrides=[override])

    def test_missing_model_files(self, tmp_path):
        files = {"M": "m.mtx", "K": "k.mtx", "metadata": "meta.json"}
        p = write(tmp_path, {"model": {"source": "files", "files": files}})
        with pytest.raises(ConfigError, match="model file not found"):
            load_config(p)
        # the same configuration is structurally fine when files are not required yet
        assert load_config(p, require_files=False)["model"]["files"] == files

    def test_incomplete_file_list(self, tmp_path):
        p = write(tmp_path, {"model": {"source": "files", "files": {"M": "m.mtx"}}})
        with pytest.raises(ConfigError, match="model.files.K"):
            load_config(p)
