"""Tests for layered pipeline configuration: defaults, TOML files, overrides and seeds."""

import json

import pytest

import config
from data_model import ClassCatalog
from errors import ConfigurationError
from pipeline_config import SEEDED_SECTIONS, load_pipeline_config, parse_override


@pytest.fixture(autouse=True)
def no_env_config(monkeypatch):
    monkeypatch.delenv(config.CONFIG_ENV_VAR, raising=False)


def _write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestParseOverride:

    @pytest.mark.parametrize("item, expected", [
        ("pyramid.factor=2", ('pyramid', 'factor', 2)),
        ("detect.threshold=0.35", ('detect', 'threshold', 0.35)),
        ("fcn.final_kernel=[7, 5]", ('fcn', 'final_kernel', [7, 5])),
        ("refine.use_pyramid=false", ('refine', 'use_pyramid', False)),
        ("paths.manifest=data/external/grocery", ('paths', 'manifest', 'data/external/grocery')),
        ('synth.background_mode="black"', ('synth', 'background_mode', 'black')),
    ])
    def test_values_read_as_toml(self, item, expected):
        assert parse_override(item) == expected

    def test_inline_table(self):
        assert parse_override("detect.class_thresholds={ cola = 0.7 }")[2] == {'cola': 0.7}

    @pytest.mark.parametrize("item", ["threshold=0.3", "detect.threshold", "nodot"])
    def test_malformed(self, item):
        with pytest.raises(ConfigurationError):
            parse_override(item)


class TestLoadPipelineConfig:

    def test_defaults(self):
        cfg = load_pipeline_config()
        assert cfg.seed == config.DEFAULT_SEED
        assert cfg.source is None
        assert all(cfg.section(s)['seed'] == config.DEFAULT_SEED for s in SEEDED_SECTIONS)
        assert cfg.eval_config().iou_threshold == 0.1
        assert cfg.working_resolution() is None
        assert cfg.path('manifest') is None
        assert cfg.path('manifest', 'fallback').name == 'fallback'

    def test_file_values_and_seed_propagation(self, tmp_path):
        path = _write(tmp_path, 'seed = 7\noutput_dir = "out"\n'
                                '[training]\nlearning_rate = 0.05\n'
                                '[synth]\nseed = 3\n')
        cfg = load_pipeline_config(path)
        assert cfg.source == path
        assert cfg.training_hyperparams().learning_rate == 0.05
        assert cfg.training_hyperparams().seed == 7
        assert cfg.section('synth')['seed'] == 3
        assert cfg.section('refine')['seed'] == 7
        assert cfg.run_dir('detect').as_posix() == 'out/detect'

    def test_overrides_win(self, tmp_path):
        path = _write(tmp_path, '[training]\npatience = 9\n')
        cfg = load_pipeline_config(path, overrides=['training.patience=4', 'global.seed=11'],
                                   output_dir=tmp_path / "runs")
        assert cfg.training_hyperparams().patience == 4
        assert cfg.seed == 11
        assert cfg.output_dir == tmp_path / "runs"

    def test_seed_argument_beats_file(self, tmp_path):
        cfg = load_pipeline_config(_write(tmp_path, 'seed = 7\n'), seed=5)
        assert cfg.seed == 5
        assert cfg.section('fcn')['seed'] == 5

    def test_environment_variable(self, tmp_path, monkeypatch):
        path = _write(tmp_path, '[eval]\niou_threshold = 0.5\n')
        monkeypatch.setenv(config.CONFIG_ENV_VAR, str(path))
        assert load_pipeline_config().eval_config().iou_threshold == 0.5

    def test_class_thresholds_by_name(self):
        cfg = load_pipeline_config(overrides=['detect.class_thresholds={ chips = 0.7 }'])
        params = cfg.detect_params(ClassCatalog(names=('cola', 'chips')))
        assert params.class_thresholds == {2: 0.7}
        assert cfg.detect_params(ClassCatalog(names=('cola', 'chips')), threshold=0.3).threshold == 0.3

    @pytest.mark.parametrize("text", ['[fcn]\nkernel = [2, 4]\n', '[catalog]\nnames = ["a"]\n', 'colour = "red"\n'])
    def test_unknown_names_rejected(self, tmp_path, text):
        with pytest.raises(ConfigurationError):
            load_pipeline_config(_write(tmp_path, text))

    def test_unknown_override_key(self):
        with pytest.raises(ConfigurationError):
            load_pipeline_config(overrides=['detect.treshold=0.3'])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            load_pipeline_config(tmp_path / "absent.toml")

    def test_invalid_toml(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_pipeline_config(_write(tmp_path, '[fcn\nfinal_kernel = '))

    def test_snapshot(self, tmp_path):
        cfg = load_pipeline_config(overrides=['fcn.final_kernel=[7, 5]'])
        path = cfg.write_snapshot(tmp_path / "run")
        tree = json.loads(path.read_text())
        assert tree['seed'] == config.DEFAULT_SEED
        assert tree['fcn']['final_kernel'] == [7, 5]
        assert tree['pyramid']['factor'] == 1.5
        assert set(tree) >= {'fcn', 'training', 'pyramid', 'synth', 'refine', 'detect', 'baseline',
                             'eval', 'sweep', 'toy', 'paths'}


class TestShippedProfiles:

    @pytest.mark.parametrize("name", ['toy', 'cigarette', 'grocery'])
    def test_profile_builds_every_section(self, name):
        cfg = load_pipeline_config(config.PROFILES_DIR / f"{name}.toml")
        catalog = ClassCatalog(names=tuple(f"c{i}" for i in range(6)))
        assert cfg.fcn_config(catalog).num_classes == 6
        cfg.training_hyperparams()
        cfg.refine_hyperparams()
        cfg.convae_config(catalog)
        cfg.pyramid_config((64, 128))
        cfg.sliding_window_params()
        cfg.detect_params(catalog)
        assert cfg.eval_config().iou_threshold == 0.1
        assert cfg.sweep_thresholds()[0] == 0.1

    def test_toy_training_settings_reach_the_builders(self):
        cfg = load_pipeline_config(config.PROFILES_DIR / "toy.toml")
        assert cfg.training_hyperparams().resize_policy == 'stretch'
        assert cfg.refine_hyperparams().class_weighting == 'inverse_sqrt'
        assert cfg.pyramid_config((32, 32)).max_levels == 4
        defaults = load_pipeline_config()
        assert defaults.training_hyperparams().resize_policy == 'letterbox'
        assert defaults.refine_hyperparams().class_weighting == 'none'

    def test_toy_geometry(self):
        cfg = load_pipeline_config(config.PROFILES_DIR / "toy.toml")
        fcn = cfg.fcn_config(ClassCatalog(names=tuple('abcdef')))
        assert fcn.stride == 8
        assert fcn.input_hw == (32, 32)
        assert cfg.working_resolution() == (120, 200)
