import pytest

from ctbert.config import AugmentConfig, ClassifierConfig, RunConfig, dump_config, load_config
from ctbert.exceptions import ConfigurationError


def test_defaults():
    cfg = load_config()
    assert cfg.compose.channels == "RML"
    assert cfg.compose.crop_bbox is False
    assert cfg.classifier.layers == (3, 4, 6, 3)
    assert cfg.classifier.lr == 1e-5
    assert cfg.preprocess.set_length == 32 and cfg.preprocess.min_keep == 8
    assert (cfg.mlp.pooling, cfg.mlp.activation) == ("both", "sigmoid")


def test_augment_defaults():
    a = AugmentConfig()
    assert (a.rotation_deg, a.scale_range, a.translate_frac, a.shear_deg) == (10.0, (0.8, 1.2), 0.1, 10.0)
    assert (a.brightness, a.contrast, a.enlarge_frac, a.hflip_prob) == (0.5, 0.3, 0.25, 0.5)


def test_plateau_defaults():
    c = ClassifierConfig()
    assert (c.plateau_factor, c.plateau_patience, c.early_stopping) == (0.1, 5, 15)


def test_yaml_and_overrides(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: 3\ncompose: {channels: rrr}\nmlp: {activation: relu}\n")
    cfg = load_config(tmp_path / "c.yaml", seed=9, **{"classifier.use_bert": False})
    assert cfg.seed == 9
    assert cfg.compose.channels == "RRR"
    assert cfg.classifier.use_bert is False
    assert cfg.mlp.learning_rate == 1e-5


@pytest.mark.parametrize("text", ["bogus: 1\n", "compose: {channels: RGB}\n", "mlp: {pooling: median}\n",
                                  "- a\n- b\n", "unet: {work_size: 100}\n"])
def test_invalid(tmp_path, text):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "c.yaml")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "nope.yaml")


def test_fingerprint():
    a = RunConfig()
    assert a.fingerprint() == RunConfig(output_dir="elsewhere", workers=3).fingerprint()
    assert a.fingerprint() != RunConfig(seed=1).fingerprint()


def test_dump_round_trip(tmp_path):
    cfg = load_config(seed=4)
    dump_config(cfg, tmp_path / "out.yaml")
    assert load_config(tmp_path / "out.yaml") == cfg
