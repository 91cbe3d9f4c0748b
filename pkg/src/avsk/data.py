"""Plain data records passed between stages."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from avsk.errors import ContractError, InputError

VIDEO_FPS = 100.0 / 3.0  # one video frame per stacked 30 ms acoustic frame
SAMPLE_RATE = 16000
HOP_MS = 30


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) in [0, 1]
    frame_rate_hz: float = VIDEO_FPS
    mask: Optional[np.ndarray] = None  # (T,) bool, True = frame present

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or self.frames.shape[0] < 1:
            raise ContractError(f"video frames must be (T>=1, H, W, 3), got {self.frames.shape}")
        if self.frame_rate_hz <= 0:
            raise ContractError("frame rate must be positive")
        if self.mask is None:
            self.mask = np.ones(self.frames.shape[0], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.frames.shape[0],):
            raise ContractError(f"mask shape {self.mask.shape} vs {self.frames.shape[0]} frames")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def hw(self):
        return self.frames.shape[1:3]

    def masked(self, keep):
        """Copy with frames where ``keep`` is False zeroed and flagged missing."""
        keep = np.asarray(keep, dtype=bool) & self.mask
        frames = self.frames * keep[:, None, None, None].astype(self.frames.dtype)
        return VideoClip(frames, self.frame_rate_hz, keep)


@dataclass
class AudioFeatures:
    frames: np.ndarray  # (T_a, 240)
    hop_ms: int = HOP_MS

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ContractError(f"audio features must be (T_a>=1, D), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ContractError("audio features contain NaN or Inf")

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class SpeakerSegment:
    speaker: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.start_s < self.end_s:
            raise InputError(f"segment needs start < end, got [{self.start_s}, {self.end_s})")

    @property
    def duration(self):
        return self.end_s - self.start_s


@dataclass
class WordHyp:
    word: str
    speaker: str
    align: Optional[str] = None  # correct / substituted / inserted, set by the scorer


@dataclass
class SynthExample:
    video: VideoClip
    audio: np.ndarray  # waveform @ 16 kHz
    transcript: List[int]
    speaker_spans: List[SpeakerSegment] = field(default_factory=list)
    face_tracks: List[VideoClip] = field(default_factory=list)
    face_speakers: List[str] = field(default_factory=list)
    frame_labels: Optional[np.ndarray] = None  # per frame char id, -1 for no glyph
    token_frames: Optional[np.ndarray] = None  # first frame of each transcript token
    token_speakers: List[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.transcript) == 0:
            raise ContractError("transcript must be non-empty")
        duration = len(self.audio) / SAMPLE_RATE
        for seg in self.speaker_spans:
            if seg.start_s < 0 or seg.end_s > duration + 1e-9:
                raise ContractError(f"speaker span {seg} outside clip duration {duration:.3f}s")

    @property
    def duration_s(self):
        return len(self.audio) / SAMPLE_RATE

    def active_face(self):
        """Per-frame index of the speaking face track (-1 where nobody speaks)."""
        t = self.video.n_frames
        labels = np.full(t, -1, dtype=np.int64)
        index = {spk: i for i, spk in enumerate(self.face_speakers)}
        for seg in self.speaker_spans:
            a = int(round(seg.start_s * 1000 / HOP_MS))
            b = int(round(seg.end_s * 1000 / HOP_MS))
            labels[a:b] = index[seg.speaker]
        return labels
