"""Model/run configuration records with JSON round-tripping and stable hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

from avsk.errors import ConfigError

FRONTEND_KINDS = ("lp", "vit", "vgg21d")


@dataclass
class FrontEndConfig:
    kind: str = "lp"
    input_hw: tuple = (16, 16)
    out_dim: int = 64
    channels: int = 3
    lp_bias: bool = True
    vit_patch: tuple = (1, 8, 8)
    vit_depth: int = 1
    vit_heads: int = 2
    vit_ffn_expansion: int = 2
    vgg_channels: tuple = (8, 16)
    vgg_kernel: int = 3
    vgg_temporal_kernel: int = 3

    def validate(self, path="frontend"):
        if self.kind not in FRONTEND_KINDS:
            raise ConfigError(f"must be one of {FRONTEND_KINDS}, got {self.kind!r}", f"{path}.kind")
        if len(self.input_hw) != 2 or min(self.input_hw) < 1:
            raise ConfigError(f"must be two positive extents, got {self.input_hw}", f"{path}.input_hw")
        if self.out_dim < 1:
            raise ConfigError("must be >= 1", f"{path}.out_dim")
        if self.channels != 3:
            raise ConfigError("video clips are RGB, channels must be 3", f"{path}.channels")
        if self.kind == "vit":
            pt, ph, pw = self.vit_patch
            h, w = self.input_hw
            if pt < 1 or ph < 1 or pw < 1:
                raise ConfigError("patch extents must be positive", f"{path}.vit_patch")
            if h % ph or w % pw:
                raise ConfigError(f"patch {ph}x{pw} must divide frame {h}x{w}", f"{path}.vit_patch")
            if self.vit_depth < 0:
                raise ConfigError("must be >= 0", f"{path}.vit_depth")
            if self.vit_depth and self.out_dim % self.vit_heads:
                raise ConfigError("out_dim must be divisible by heads", f"{path}.vit_heads")
        if self.kind == "vgg21d":
            if not self.vgg_channels:
                raise ConfigError("channel list must be non-empty", f"{path}.vgg_channels")
            if self.vgg_temporal_kernel % 2 == 0:
                raise ConfigError("temporal kernel must be odd", f"{path}.vgg_temporal_kernel")
        return self


@dataclass
class ConformerConfig:
    depth: int = 2
    model_dim: int = 64
    ffn_expansion: int = 4
    heads: int = 4
    conv_kernel: int = 5
    dropout: float = 0.0

    def validate(self, path="encoder"):
        if self.depth < 0:
            raise ConfigError("must be >= 0", f"{path}.depth")
        if self.model_dim < 1:
            raise ConfigError("must be >= 1", f"{path}.model_dim")
        if self.heads < 1 or self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}",
                              f"{path}.heads")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError(f"must be odd, got {self.conv_kernel}", f"{path}.conv_kernel")
        if self.ffn_expansion < 1:
            raise ConfigError("must be >= 1", f"{path}.ffn_expansion")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("must lie in [0, 1)", f"{path}.dropout")
        return self


@dataclass
class DecoderConfig:
    lstm_layers: int = 2
    cell_size: int = 64
    embedding_dim: int = 16
    beam_width: int = 8
    joint_dim: int = 64

    def validate(self, path="decoder"):
        for name in ("lstm_layers", "cell_size", "embedding_dim", "beam_width", "joint_dim"):
            if getattr(self, name) < 1:
                raise ConfigError("must be positive", f"{path}.{name}")
        return self


@dataclass
class AudioConfig:
    n_mels: int = 80
    stack: int = 3
    train_snr_db: tuple = (5.0, 20.0)
    eval_snr_db: float = 10.0
    video_encoder_depth: int = 2

    def validate(self, path="audio"):
        if self.n_mels < 1 or self.stack < 1:
            raise ConfigError("n_mels and stack must be positive", path)
        if self.video_encoder_depth < 0:
            raise ConfigError("must be >= 0", f"{path}.video_encoder_depth")
        if len(self.train_snr_db) != 2 or self.train_snr_db[0] > self.train_snr_db[1]:
            raise ConfigError("must be (low, high)", f"{path}.train_snr_db")
        return self

    @property
    def feature_dim(self):
        return self.n_mels * self.stack


@dataclass
class DataConfig:
    n_train: int = 500
    n_eval: int = 100
    charset_size: int = 8
    frame_hw: tuple = (32, 32)
    min_len: int = 3
    max_len: int = 6
    frames_per_char: int = 3
    gap_frames: int = 1
    audio_ambiguity: int = 1
    n_faces: int = 1

    def validate(self, path="data"):
        if not 1 <= self.charset_size <= 26:
            raise ConfigError("must lie in [1, 26]", f"{path}.charset_size")
        if self.n_train < 1:
            raise ConfigError("must be positive", f"{path}.n_train")
        if self.n_eval < 0:
            raise ConfigError("must be >= 0", f"{path}.n_eval")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len", f"{path}.min_len")
        if self.frames_per_char < 1 or self.gap_frames < 0:
            raise ConfigError("frames_per_char >= 1 and gap_frames >= 0", f"{path}.frames_per_char")
        if self.audio_ambiguity < 1:
            raise ConfigError("must be >= 1", f"{path}.audio_ambiguity")
        if self.frame_hw[0] % 8 or self.frame_hw[1] % 8:
            raise ConfigError("frame extents must be multiples of 8", f"{path}.frame_hw")
        return self


@dataclass
class TrainConfig:
    steps: int = 1500
    batch: int = 16
    peak_lr: float = 2e-3
    warmup_steps: int = 100
    schedule: str = "cosine"
    final_lr_ratio: float = 0.1
    video_drop_prob: float = 0.0
    clip_norm: float = 5.0
    dtype: str = "f32"
    face_loss_weight: float = 1.0

    def validate(self, path="train"):
        if self.steps < 0:
            raise ConfigError("must be >= 0", f"{path}.steps")
        if self.batch < 1:
            raise ConfigError("must be positive", f"{path}.batch")
        if self.peak_lr <= 0:
            raise ConfigError("must be positive", f"{path}.peak_lr")
        if self.warmup_steps < 0:
            raise ConfigError("must be >= 0", f"{path}.warmup_steps")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("must be 'cosine' or 'constant'", f"{path}.schedule")
        if not 0.0 <= self.video_drop_prob <= 1.0:
            raise ConfigError("must lie in [0, 1]", f"{path}.video_drop_prob")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError("must be 'f32' or 'f64'", f"{path}.dtype")
        return self


@dataclass
class ModelConfig:
    frontend: FrontEndConfig = field(default_factory=FrontEndConfig)
    encoder: ConformerConfig = field(default_factory=ConformerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    fusion: str = "vsr"
    audio: Optional[AudioConfig] = None
    face_select: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def validate(self):
        self.frontend.validate()
        self.encoder.validate()
        self.decoder.validate()
        self.data.validate()
        self.train.validate()
        if self.fusion not in ("vsr", "avsr"):
            raise ConfigError(f"must be 'vsr' or 'avsr', got {self.fusion!r}", "fusion")
        if self.fusion == "vsr":
            if self.audio is not None:
                raise ConfigError("vsr models take no audio settings", "audio")
            if self.face_select:
                raise ConfigError("face selection needs audio (avsr)", "face_select")
            if self.frontend.out_dim != self.encoder.model_dim:
                raise ConfigError(
                    f"vsr front-end output {self.frontend.out_dim} must equal model_dim "
                    f"{self.encoder.model_dim}", "frontend.out_dim")
        else:
            if self.audio is None:
                raise ConfigError("avsr models need an audio section", "audio")
            self.audio.validate()
            if self.frontend.kind != "lp":
                raise ConfigError("avsr fusion uses the lp front-end", "frontend.kind")
        if self.data.n_faces > 1 and not self.face_select:
            raise ConfigError("several face tracks need face_select", "data.n_faces")
        return self

    @property
    def vocab_size(self):
        return self.data.charset_size + 1

    # -- serialisation ----------------------------------------------------
    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        raw = dict(raw)
        kwargs = {}
        sub = {"frontend": FrontEndConfig, "encoder": ConformerConfig,
               "decoder": DecoderConfig, "data": DataConfig, "train": TrainConfig,
               "audio": AudioConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        for key, value in raw.items():
            if key not in known:
                raise ConfigError("unknown field", key)
            if key in sub:
                kwargs[key] = None if value is None else _build(sub[key], value, key)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        _check_types(cfg)
        return cfg.validate()

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(klass, value, path):
    if not isinstance(value, dict):
        raise ConfigError("must be an object", path)
    names = {f.name: f for f in dataclasses.fields(klass)}
    kwargs = {}
    for key, v in value.items():
        if key not in names:
            raise ConfigError("unknown field", f"{path}.{key}")
        default = names[key].default
        if isinstance(default, tuple):
            if not isinstance(v, (list, tuple)):
                raise ConfigError("must be a list", f"{path}.{key}")
            v = tuple(v)
        kwargs[key] = v
    return klass(**kwargs)


_SCALAR_TYPES = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _check_types(cfg, path=""):
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        where = f"{path}{f.name}"
        if dataclasses.is_dataclass(value):
            _check_types(value, where + ".")
            continue
        default = f.default
        if default is dataclasses.MISSING or default is None:
            continue
        expected = _SCALAR_TYPES.get(type(default))
        if expected is None:
            continue
        if isinstance(value, bool) and type(default) is not bool:
            raise ConfigError(f"expected {type(default).__name__}, got bool", where)
        if not isinstance(value, expected):
            raise ConfigError(f"expected {type(default).__name__}, got {type(value).__name__}", where)
