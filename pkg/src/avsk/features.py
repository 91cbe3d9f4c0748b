"""Acoustic features, frame stacking, video downsampling, and audio-visual fusion."""
from __future__ import annotations

import numpy as np
from scipy.signal import get_window
from sklearn.base import BaseEstimator, TransformerMixin

from avsk.autodiff import Tensor, ops
from avsk.autodiff.tensor import make_result
from avsk.data import SAMPLE_RATE, AudioFeatures, VideoClip
from avsk.errors import ConfigError, ContractError

WIN = 400  # 25 ms
HOP = 160  # 10 ms
N_FFT = 512
LOG_FLOOR = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges(n_mels=80, fmin=0.0, fmax=SAMPLE_RATE / 2):
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_centers(n_mels=80):
    return mel_edges(n_mels)[1:-1]


def mel_filterbank(n_mels=80, n_fft=N_FFT, sr=SAMPLE_RATE):
    """Triangular filters (peak 1) on the rfft bin frequencies, shape (bins, n_mels)."""
    edges = mel_edges(n_mels, 0.0, sr / 2)
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down)).T


_FBANK = mel_filterbank()
_WINDOW = get_window("hann", WIN, fftbins=True)


def n_logmel_frames(n_samples):
    return 1 + (n_samples - WIN) // HOP


def logmel(wave):
    """80-dim log-mel frames from a 16 kHz waveform: 25 ms Hann window, 10 ms hop."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1 or wave.size < WIN:
        raise ContractError(f"need at least {WIN} samples (25 ms), got {wave.size}")
    n = n_logmel_frames(wave.size)
    idx = np.arange(WIN)[None, :] + HOP * np.arange(n)[:, None]
    frames = wave[idx] * _WINDOW
    mag = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))
    return np.log(np.maximum(mag @ _FBANK, LOG_FLOOR))


def stack_frames(x, factor=3):
    """Concatenate groups of ``factor`` frames; the tail repeats the final frame."""
    x = np.asarray(x)
    if factor < 1:
        raise ConfigError("stack factor must be >= 1", "stack")
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"need (N>=1, D) frames, got {x.shape}")
    n, d = x.shape
    groups = -(-n // factor)
    pad = groups * factor - n
    if pad:
        x = np.concatenate([x, np.repeat(x[-1:], pad, axis=0)], axis=0)
    return AudioFeatures(x.reshape(groups, factor * d), hop_ms=10 * factor)


def unstack_frames(feats, factor=3):
    arr = feats.frames if isinstance(feats, AudioFeatures) else np.asarray(feats)
    return arr.reshape(arr.shape[0] * factor, arr.shape[1] // factor)


def add_white_noise(wave, snr_db, rng):
    wave = np.asarray(wave, dtype=np.float64)
    power = float(np.mean(wave ** 2))
    if power <= 0.0:
        power = 1e-4
    noise_var = power / (10.0 ** (snr_db / 10.0))
    return wave + rng.normal(0.0, np.sqrt(noise_var), size=wave.shape)


def acoustic_features(wave, n_mels=80, stack=3):
    if n_mels != 80:
        raise ConfigError("only the 80-bin filterbank is provided", "audio.n_mels")
    return stack_frames(logmel(wave), stack)


def downsample_frame(frame, target):
    frame = np.asarray(frame)
    h, w = frame.shape[:2]
    th, tw = target
    if th < 1 or tw < 1 or h % th or w % tw:
        raise ConfigError(f"cannot block-pool {h}x{w} to {th}x{tw}", "input_hw")
    fh, fw = h // th, w // tw
    return frame.reshape(th, fh, tw, fw, *frame.shape[2:]).mean(axis=(1, 3))


def downsample_clip(clip, target):
    frames = clip.frames
    t, h, w, c = frames.shape
    th, tw = target
    if (h, w) == (th, tw):
        return clip
    if th < 1 or tw < 1 or h % th or w % tw:
        raise ConfigError(f"cannot block-pool {h}x{w} to {th}x{tw}", "input_hw")
    out = frames.reshape(t, th, h // th, tw, w // tw, c).mean(axis=(2, 4))
    return VideoClip(out.astype(frames.dtype), clip.frame_rate_hz, clip.mask)


def av_index_map(t_video, t_audio):
    """Video frame covering the centre of each acoustic frame (lengths span the same clip)."""
    if t_audio < 1:
        raise ContractError("audio has no frames")
    k = np.arange(t_audio)
    return np.minimum((2 * k + 1) * t_video // (2 * t_audio), t_video - 1)


def take_time(x, idx):
    """Gather along the time axis (second to last) with an index array."""
    idx = np.asarray(idx, dtype=np.int64)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(np.moveaxis(full, -2, 0), idx, np.moveaxis(g, -2, 0))
        return (full,)
    return make_result(np.take(x.data, idx, axis=-2), (x,), bw, "take_time")


def fuse_av(video_emb, audio):
    """Resample video embeddings onto the acoustic timeline and concatenate.

    ``video_emb`` is (..., Tv, Dv); ``audio`` is AudioFeatures or a tensor
    (..., Ta, Da). Output is (..., Ta, Dv + Da).
    """
    if isinstance(audio, AudioFeatures):
        audio = Tensor(audio.frames.astype(video_emb.dtype))
    if audio.ndim < 2 or audio.shape[-2] < 1:
        raise ContractError("audio features are empty")
    tv, ta = video_emb.shape[-2], audio.shape[-2]
    if video_emb.shape[:-2] != audio.shape[:-2]:
        raise ContractError(f"batch dims differ: {video_emb.shape} vs {audio.shape}")
    v = video_emb if tv == ta else take_time(video_emb, av_index_map(tv, ta))
    return ops.concat([v, audio], axis=-1)


class LogMelFeaturizer(BaseEstimator, TransformerMixin):
    """Waveforms -> stacked log-mel frames (``AudioFeatures``).

    Stateless; ``fit`` only validates parameters.
    """

    def __init__(self, n_mels=80, stack=3, snr_db=None, random_state=None):
        self.n_mels = n_mels
        self.stack = stack
        self.snr_db = snr_db
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.n_mels != 80:
            raise ConfigError("only the 80-bin filterbank is provided", "n_mels")
        if self.stack < 1:
            raise ConfigError("must be >= 1", "stack")
        self.hop_ms_ = 10 * self.stack
        return self

    def transform(self, X):
        rng = np.random.default_rng(self.random_state)
        out = []
        for wave in X:
            if self.snr_db is not None:
                wave = add_white_noise(wave, self.snr_db, rng)
            out.append(acoustic_features(wave, self.n_mels, self.stack))
        return out


class ClipDownsampler(BaseEstimator, TransformerMixin):
    """Block-mean pool every frame of each clip to ``target_hw``."""

    def __init__(self, target_hw=(16, 16)):
        self.target_hw = target_hw

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return [downsample_clip(clip, tuple(self.target_hw)) for clip in X]

