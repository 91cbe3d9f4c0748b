"""Synthetic audio-visual speech data and the binary shard format.

Every character is a glyph (a coloured rectangle on a 4x4 cell grid) shown
for a fixed number of frames, and a pure tone of the same duration. Between
characters the face shows a neutral "closed mouth" bar and the audio is
silent. Generation is a pure function of the seed; example ``i`` draws from
its own derived generator so shards can be built in parallel.
"""
from __future__ import annotations

import io
import json
import string
import struct

import numpy as np

from avsk.data import SAMPLE_RATE, VIDEO_FPS, SpeakerSegment, SynthExample, VideoClip
from avsk.errors import ContractError, InputError

SAMPLES_PER_FRAME = 480  # 30 ms at 16 kHz
LEAD_FRAMES = 2
TAIL_FRAMES = 1
SEGMENT_GAP_FRAMES = 3
CHARSET = string.ascii_lowercase
SHARD_MAGIC = b"AVSK1"
SHARD_VERSION = 1

_COLOURS = np.array([[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.3, 1.0]])


def _glyph_cells():
    cells = []
    for h, w in ((2, 2), (1, 2), (2, 1), (1, 1)):
        for r in range(0, 5 - h):
            for c in range(0, 5 - w):
                cells.append((r, c, h, w))
    return cells


_GLYPHS = _glyph_cells()[:26]


def tone_frequencies(n=26):
    """Distinct tone per tone-class, spread evenly on the mel scale (300-3400 Hz)."""
    from avsk.features import hz_to_mel, mel_to_hz
    return mel_to_hz(np.linspace(hz_to_mel(300.0), hz_to_mel(3400.0), n))


_TONES = tone_frequencies()


def speaker_tint(speaker_idx):
    rng = np.random.default_rng(1000 + speaker_idx)
    return 0.08 + 0.2 * rng.random(3)


def render_glyph(char_id, hw=(32, 32), tint=None):
    h, w = hw
    frame = np.empty((h, w, 3), dtype=np.float32)
    frame[:] = speaker_tint(0) if tint is None else tint
    r, c, gh, gw = _GLYPHS[char_id]
    ch, cw = h // 4, w // 4
    frame[r * ch:(r + gh) * ch, c * cw:(c + gw) * cw] = _COLOURS[char_id % 3]
    return frame


def render_neutral(hw=(32, 32), tint=None):
    h, w = hw
    frame = np.empty((h, w, 3), dtype=np.float32)
    frame[:] = speaker_tint(0) if tint is None else tint
    frame[h // 2 - h // 16:h // 2 + h // 16, w // 4:3 * w // 4] = 0.45
    return frame


def tone(char_id, n_samples, audio_ambiguity=1, start_sample=0):
    freq = _TONES[char_id // audio_ambiguity]
    t = (start_sample + np.arange(n_samples)) / SAMPLE_RATE
    return 0.5 * np.sin(2 * np.pi * freq * t)


def _render_track(labels, hw, tint, rng, pixel_noise):
    frames = np.stack([render_glyph(c, hw, tint) if c >= 0 else render_neutral(hw, tint)
                       for c in labels])
    if pixel_noise > 0:
        frames = frames + rng.normal(0.0, pixel_noise, frames.shape).astype(np.float32)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def _utterance_labels(transcript, frames_per_char, gap_frames):
    labels, starts = [], []
    for c in transcript:
        starts.append(len(labels))
        labels.extend([c] * frames_per_char + [-1] * gap_frames)
    return labels, starts


def _audio_for_labels(labels, audio_ambiguity):
    wave = np.zeros(len(labels) * SAMPLES_PER_FRAME)
    for t, c in enumerate(labels):
        if c >= 0:
            a = t * SAMPLES_PER_FRAME
            wave[a:a + SAMPLES_PER_FRAME] = tone(c, SAMPLES_PER_FRAME, audio_ambiguity, a)
    return wave.astype(np.float32)


def _single_example(rng, charset_size, min_len, max_len, frames_per_char, gap_frames,
                    frame_hw, audio_ambiguity, pixel_noise, n_identities):
    length = int(rng.integers(min_len, max_len + 1))
    transcript = [int(c) for c in rng.integers(0, charset_size, size=length)]
    spk = int(rng.integers(0, n_identities))
    body, starts = _utterance_labels(transcript, frames_per_char, gap_frames)
    labels = [-1] * LEAD_FRAMES + body + [-1] * TAIL_FRAMES
    starts = np.array(starts) + LEAD_FRAMES
    frames = _render_track(labels, frame_hw, speaker_tint(spk), rng, pixel_noise)
    video = VideoClip(frames, VIDEO_FPS)
    wave = _audio_for_labels(labels, audio_ambiguity)
    name = f"spk{spk}"
    first, last = LEAD_FRAMES, LEAD_FRAMES + len(body) - gap_frames
    span = SpeakerSegment(name, first * 3 / 100, last * 3 / 100)
    return SynthExample(video=video, audio=wave, transcript=transcript, speaker_spans=[span],
                        face_tracks=[video], face_speakers=[name],
                        frame_labels=np.array(labels), token_frames=starts,
                        token_speakers=[name] * length)


def _diarization_example(rng, charset_size, min_len, max_len, frames_per_char, gap_frames,
                         frame_hw, audio_ambiguity, pixel_noise, n_speakers, n_identities):
    n_seg = int(rng.integers(2, 5))
    n_spk = int(rng.integers(2, n_speakers + 1))
    identities = [int(i) for i in rng.choice(n_identities, size=n_spk, replace=False)]
    order = [0, 1]
    while len(order) < n_seg:
        order.append(int(rng.choice([s for s in range(n_spk) if s != order[-1]])))
    labels = [-1] * LEAD_FRAMES
    owner = [-1] * LEAD_FRAMES
    transcript, token_frames, token_speakers, spans = [], [], [], []
    for i, s in enumerate(order):
        if i:
            labels += [-1] * SEGMENT_GAP_FRAMES
            owner += [-1] * SEGMENT_GAP_FRAMES
        length = int(rng.integers(min_len, max_len + 1))
        seg = [int(c) for c in rng.integers(0, charset_size, size=length)]
        body, starts = _utterance_labels(seg, frames_per_char, gap_frames)
        body = body[:len(body) - gap_frames] if gap_frames else body
        offset = len(labels)
        token_frames += [offset + st for st in starts]
        token_speakers += [f"spk{identities[s]}"] * length
        transcript += seg
        spans.append(SpeakerSegment(f"spk{identities[s]}", offset * 3 / 100,
                                    (offset + len(body)) * 3 / 100))
        labels += body
        owner += [s] * len(body)
    labels += [-1] * TAIL_FRAMES
    owner += [-1] * TAIL_FRAMES
    labels, owner = np.array(labels), np.array(owner)
    tracks = []
    for s in range(n_spk):
        own = np.where(owner == s, labels, -1)
        tracks.append(VideoClip(_render_track(own, frame_hw, speaker_tint(identities[s]), rng,
                                              pixel_noise), VIDEO_FPS))
    wave = _audio_for_labels(labels, audio_ambiguity)
    return SynthExample(video=tracks[0], audio=wave, transcript=transcript,
                        speaker_spans=spans, face_tracks=tracks,
                        face_speakers=[f"spk{i}" for i in identities],
                        frame_labels=labels, token_frames=np.array(token_frames),
                        token_speakers=token_speakers)


def synth_generate(seed, n_examples, n_speakers=1, charset_size=8, *, min_len=3, max_len=6,
                   frames_per_char=3, gap_frames=1, frame_hw=(32, 32), audio_ambiguity=1,
                   pixel_noise=0.02, n_identities=8, start_index=0):
    """Generate ``n_examples`` synthetic clips.

    ``n_speakers == 1`` gives single-speaker utterances; larger values give
    diarization clips made of 2-4 segments from 2..n_speakers speakers, one
    face track per speaker, where only the active speaker's track animates.
    """
    if not 1 <= charset_size <= 26:
        raise ContractError(f"charset_size must lie in [1, 26], got {charset_size}")
    if n_speakers < 1:
        raise ContractError("n_speakers must be >= 1")
    if n_speakers > n_identities:
        raise ContractError("n_speakers exceeds the identity pool")
    out = []
    for i in range(start_index, start_index + n_examples):
        rng = np.random.default_rng([seed, i])
        common = (rng, charset_size, min_len, max_len, frames_per_char, gap_frames,
                  tuple(frame_hw), audio_ambiguity, pixel_noise)
        if n_speakers == 1:
            out.append(_single_example(*common, n_identities))
        else:
            out.append(_diarization_example(*common, n_speakers, n_identities))
    return out


def transcript_text(ids):
    return "".join(CHARSET[i] for i in ids)


def text_to_ids(text, charset_size=26):
    ids = []
    for ch in text:
        i = CHARSET.find(ch)
        if i < 0 or i >= charset_size:
            raise InputError(f"character {ch!r} outside the {charset_size}-letter charset")
        ids.append(i)
    return ids


# -- shards -------------------------------------------------------------------

def _clip_header(clip):
    return {"shape": list(clip.frames.shape), "fps": clip.frame_rate_hz}


def _encode_example(ex):
    meta = {
        "transcript": list(ex.transcript),
        "spans": [[s.speaker, s.start_s, s.end_s] for s in ex.speaker_spans],
        "face_speakers": list(ex.face_speakers),
        "token_speakers": list(ex.token_speakers),
        "token_frames": [] if ex.token_frames is None else [int(t) for t in ex.token_frames],
        "frame_labels": [] if ex.frame_labels is None else [int(t) for t in ex.frame_labels],
        "n_samples": int(len(ex.audio)),
        "video": _clip_header(ex.video),
        "tracks": [_clip_header(t) for t in ex.face_tracks],
        "video_is_track0": bool(ex.face_tracks and ex.face_tracks[0] is ex.video),
    }
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    clips = [] if meta["video_is_track0"] else [ex.video]
    for clip in clips + list(ex.face_tracks):
        buf.write(clip.frames.astype("<f4").tobytes())
        buf.write(clip.mask.astype(np.uint8).tobytes())
    buf.write(np.asarray(ex.audio, dtype="<f4").tobytes())
    return buf.getvalue()


def _decode_example(blob):
    (n,) = struct.unpack_from("<I", blob, 0)
    meta = json.loads(blob[4:4 + n].decode("utf-8"))
    pos = 4 + n

    def read_clip(header):
        nonlocal pos
        shape = tuple(header["shape"])
        count = int(np.prod(shape))
        frames = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        mask = np.frombuffer(blob, dtype=np.uint8, count=shape[0], offset=pos).astype(bool)
        pos += shape[0]
        return VideoClip(frames.astype(np.float32), header["fps"], mask)

    video = None if meta["video_is_track0"] else read_clip(meta["video"])
    tracks = [read_clip(h) for h in meta["tracks"]]
    if video is None:
        video = tracks[0]
    wave = np.frombuffer(blob, dtype="<f4", count=meta["n_samples"], offset=pos).copy()
    return SynthExample(
        video=video, audio=wave, transcript=meta["transcript"],
        speaker_spans=[SpeakerSegment(s, a, b) for s, a, b in meta["spans"]],
        face_tracks=tracks, face_speakers=meta["face_speakers"],
        frame_labels=np.array(meta["frame_labels"]) if meta["frame_labels"] else None,
        token_frames=np.array(meta["token_frames"]) if meta["token_frames"] else None,
        token_speakers=meta["token_speakers"])


def write_shard(path, examples):
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<II", SHARD_VERSION, len(examples)))
        for ex in examples:
            blob = _encode_example(ex)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def read_shard(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != SHARD_MAGIC:
        raise InputError(f"{path}: not an AVSK1 shard")
    version, count = struct.unpack_from("<II", data, 5)
    if version != SHARD_VERSION:
        raise InputError(f"{path}: unsupported shard version {version}")
    pos = 13
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        out.append(_decode_example(data[pos:pos + n]))
        pos += n
    if pos != len(data):
        raise InputError(f"{path}: {len(data) - pos} trailing bytes")
    return out
