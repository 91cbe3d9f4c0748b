import json

import numpy as np
import pytest

from avsk import nn
from avsk.checkpoint import load_checkpoint, restore, save_checkpoint
from avsk.cli import PRESET_DIR
from avsk.config import ModelConfig
from avsk.errors import ConfigError, InputError, StateMismatchError
from avsk.model import Recognizer


def tiny_config(**train):
    raw = json.loads((PRESET_DIR / "vsr-desk.json").read_text())
    raw["encoder"].update(depth=1, model_dim=16, heads=2, conv_kernel=3)
    raw["frontend"].update(out_dim=16, input_hw=[8, 8])
    raw["decoder"].update(cell_size=8, joint_dim=8, embedding_dim=4, lstm_layers=1)
    raw["train"].update(train)
    return ModelConfig.from_dict(raw)


@pytest.mark.parametrize("name", ["vsr-desk", "avsr-desk", "diar-desk"])
def test_presets_load_and_roundtrip(name):
    cfg = ModelConfig.load(PRESET_DIR / f"{name}.json")
    assert ModelConfig.from_json(cfg.to_json()) == cfg
    assert ModelConfig.from_json(cfg.to_json()).config_hash() == cfg.config_hash()


def test_hash_ignores_key_order_and_whitespace():
    cfg = ModelConfig.load(PRESET_DIR / "vsr-desk.json")
    raw = cfg.to_dict()
    shuffled = json.dumps(dict(reversed(list(raw.items()))), indent=7)
    assert ModelConfig.from_json(shuffled).config_hash() == cfg.config_hash()
    assert cfg.replace(seed=1).config_hash() != cfg.config_hash()


def test_config_errors_name_the_field():
    raw = ModelConfig().to_dict()
    raw["encoder"]["heads"] = 5
    with pytest.raises(ConfigError) as err:
        ModelConfig.from_dict(raw)
    assert err.value.field.startswith("encoder")
    raw = ModelConfig().to_dict()
    raw["encoder"]["model_dim"] = "64"
    with pytest.raises(ConfigError, match="encoder.model_dim"):
        ModelConfig.from_dict(raw)
    with pytest.raises(ConfigError, match="bogus"):
        ModelConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ModelConfig.from_json("{not json")


def test_vsr_rejects_audio_section():
    raw = ModelConfig.load(PRESET_DIR / "avsr-desk.json").to_dict()
    raw["fusion"] = "vsr"
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(raw)


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config()
    model = Recognizer(cfg).initialize()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, cfg, model.params_, step=7)
    cfg2, flat, step = load_checkpoint(path, cfg.config_hash())
    assert cfg2 == cfg and step == 7
    for name, t in nn.flatten(model.params_).items():
        assert np.array_equal(flat[name], t.data.astype(np.float32))
    back = restore(path)
    data = back.eval_data(3)
    assert back.transcribe(data) == model.transcribe(data)


def test_checkpoint_hash_mismatch(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, cfg, Recognizer(cfg).initialize().params_)
    with pytest.raises(StateMismatchError):
        load_checkpoint(path, cfg.replace(seed=3).config_hash())


def test_checkpoint_corruption(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, cfg, Recognizer(cfg).initialize().params_)
    blob = path.read_bytes()
    (tmp_path / "short").write_bytes(blob[:60])
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "short")
    (tmp_path / "junk").write_bytes(b"nope" * 10)
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "junk")


def test_training_is_deterministic():
    cfg = tiny_config(steps=3, batch=4, warmup_steps=1)
    data = Recognizer(cfg).training_data()[:12]
    a = Recognizer(cfg).fit(data)
    b = Recognizer(cfg).fit(data)
    assert a.loss_history_ == b.loss_history_
    for x, y in zip(nn.flatten(a.params_).values(), nn.flatten(b.params_).values()):
        assert np.array_equal(x.data, y.data)


def test_split_training_matches_single_run():
    cfg = tiny_config(steps=4, batch=4, warmup_steps=1)
    data = Recognizer(cfg).training_data()[:12]
    whole = Recognizer(cfg).fit(data)
    split = Recognizer(cfg).fit(data, steps=2).fit(data, steps=2)
    assert split.step_ == 4
    assert np.allclose(whole.loss_history_, split.loss_history_)
