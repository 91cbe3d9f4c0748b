"""End-to-end recognizer: visual (and optionally acoustic) encoder + RNN-T decoder.

Three wirings share one class:

* ``vsr``: frames -> front-end -> Conformer -> transducer.
* ``avsr``: frames -> LP -> small Conformer -> resample onto the 30 ms
  acoustic timeline -> concat with stacked log-mels -> linear -> Conformer
  -> transducer.
* ``avsr`` with ``face_select``: every face track goes through the video
  branch; an attention head picks the speaking face per acoustic frame and
  its weighted embedding replaces the single video stream.
"""
from __future__ import annotations

import csv
import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from avsk import nn
from avsk.autodiff import Tensor, backward, no_grad, ops
from avsk.config import ConformerConfig, ModelConfig
from avsk.conformer import count_encoder_params, encode, init_encoder
from avsk.data import HOP_MS, WordHyp
from avsk.errors import ConfigError, ContractError
from avsk.features import acoustic_features, add_white_noise, downsample_clip, fuse_av
from avsk.frontends import _count_frontend, frontend_forward, init_frontend, output_length
from avsk.metrics import (batch_distractor_mix, corpus_wer, face_attention_select,
                          face_selection_loss, frames_to_segments, init_face_select)
from avsk.synth import SAMPLES_PER_FRAME, synth_generate
from avsk.validation import check_examples, check_masks
from avsk.transducer import (beam_decode, count_decoder_params, greedy_decode, init_decoder,
                             joint_logits, prediction_network, rnnt_loss)

FACE_ATTN_DIM = 32
LOSS_LOG_FIELDS = ["step", "loss", "lr", "grad_norm", "masked_clips", "batch"]


def _dtype(cfg):
    return np.float64 if cfg.train.dtype == "f64" else np.float32


def video_encoder_config(cfg):
    enc = cfg.encoder
    return ConformerConfig(depth=cfg.audio.video_encoder_depth, model_dim=cfg.frontend.out_dim,
                           ffn_expansion=enc.ffn_expansion, heads=_video_heads(cfg),
                           conv_kernel=enc.conv_kernel)


def _video_heads(cfg):
    h = cfg.encoder.heads
    while cfg.frontend.out_dim % h:
        h -= 1
    return h


def init_model(cfg: ModelConfig, rng, dtype=np.float32):
    cfg.validate()
    d = cfg.encoder.model_dim
    p = {"frontend": init_frontend(cfg.frontend, rng, dtype)}
    if cfg.fusion == "avsr":
        dv, da = cfg.frontend.out_dim, cfg.audio.feature_dim
        p["video_encoder"] = init_encoder(video_encoder_config(cfg), rng, dtype)
        p["fuse"] = nn.init_linear(rng, dv + da, d, dtype)
        if cfg.face_select:
            p["face"] = init_face_select(rng, da, dv, FACE_ATTN_DIM, dtype)
    p["encoder"] = init_encoder(cfg.encoder, rng, dtype)
    p["decoder"] = init_decoder(cfg.decoder, cfg.vocab_size, d, rng, dtype)
    return p


def count_model_params(cfg: ModelConfig):
    """Exact parameter count of :func:`init_model` without allocating anything."""
    d = cfg.encoder.model_dim
    n = _count_frontend(cfg.frontend)
    if cfg.fusion == "avsr":
        dv, da = cfg.frontend.out_dim, cfg.audio.feature_dim
        n += count_encoder_params(video_encoder_config(cfg))
        n += (dv + da) * d + d
        if cfg.face_select:
            n += (da * FACE_ATTN_DIM + FACE_ATTN_DIM) + (dv * FACE_ATTN_DIM + FACE_ATTN_DIM)
    n += count_encoder_params(cfg.encoder)
    return n + count_decoder_params(cfg.decoder, cfg.vocab_size, d)


# -- batches -------------------------------------------------------------------------


def _cmvn(x):
    return (x - x.mean(axis=0)) / (x.std(axis=0) + 1e-5)


def audio_features_for(wave, cfg, snr_db, rng):
    if snr_db is not None:
        wave = add_white_noise(wave, snr_db, rng)
    feats = acoustic_features(wave, cfg.audio.n_mels, cfg.audio.stack).frames
    return _cmvn(feats)


def _frames(clip, hw, mask=None):
    clip = downsample_clip(clip, hw)
    keep = clip.mask if mask is None else (clip.mask & np.asarray(mask, dtype=bool))
    return clip.frames * keep[:, None, None, None]


class Prepared:
    """Per-example arrays reused across training steps."""

    def __init__(self, ex, cfg):
        hw = tuple(cfg.frontend.input_hw)
        self.example = ex
        self.video = _frames(ex.video, hw).astype(np.float32)
        self.labels = np.asarray(ex.transcript, dtype=np.int64) + 1
        self.wave = np.asarray(ex.audio, dtype=np.float64)
        self.t = self.video.shape[0]
        self.key = (self.t, len(self.labels))


def forward(params, cfg, video, audio=None, faces=None):
    """Encoder output ``(B, T, D)`` and face-attention weights (or None)."""
    weights = None
    if cfg.fusion == "vsr":
        x = frontend_forward(video, cfg.frontend, params["frontend"])
    else:
        vcfg = video_encoder_config(cfg)

        def branch(frames):
            emb = frontend_forward(frames, cfg.frontend, params["frontend"])
            return encode(emb, vcfg, params["video_encoder"])

        audio_t = Tensor._wrap(audio)
        if cfg.face_select:
            b, f = faces.shape[:2]
            stacked = branch(Tensor._wrap(faces.reshape((b * f,) + faces.shape[2:])))
            stacked = ops.reshape(stacked, (b, f) + stacked.shape[1:])
            embs = [fuse_time(ops.index_axis(stacked, 1, k), audio_t) for k in range(f)]
            weights, _, v = face_attention_select(audio_t, embs, params["face"])
        else:
            v = fuse_time(branch(video), audio_t)
        x = nn.linear(ops.concat([v, audio_t], axis=-1), params["fuse"])
    return encode(x, cfg.encoder, params["encoder"]), weights


def fuse_time(video_emb, audio_t):
    """Video embeddings resampled onto the acoustic timeline (no concatenation)."""
    if video_emb.shape[-2] == audio_t.shape[-2]:
        return video_emb
    dv = video_emb.shape[-1]
    return ops.slice_axis(fuse_av(video_emb, audio_t), -1, 0, dv)


def _pad_faces(tracks, t):
    f = max(len(x) for x in tracks)
    shape = tracks[0][0].shape[1:]
    out = np.zeros((len(tracks), f, t) + shape, dtype=np.float32)
    for i, lst in enumerate(tracks):
        for k, arr in enumerate(lst):
            out[i, k] = arr
    return out


# -- estimator ------------------------------------------------------------------------


class Recognizer(BaseEstimator):
    """Trainable speech recognizer over :class:`SynthExample` lists.

    ``predict`` returns 0-based character ids per example; ``score`` is the
    negative corpus WER (higher is better, as sklearn expects).
    """

    def __init__(self, config=None, log_path=None, verbose=False):
        self.config = config
        self.log_path = log_path
        self.verbose = verbose

    # -- setup ---------------------------------------------------------------
    def _cfg(self):
        cfg = self.config if self.config is not None else ModelConfig()
        if isinstance(cfg, dict):
            cfg = ModelConfig.from_dict(cfg)
        return cfg.validate()

    def initialize(self):
        cfg = self._cfg()
        self.config_ = cfg
        self.dtype_ = _dtype(cfg)
        self.params_ = init_model(cfg, np.random.default_rng([cfg.seed, 1]), self.dtype_)
        self.n_params_ = nn.count(self.params_)
        self.step_ = 0
        self.loss_history_ = []
        return self

    def set_parameters(self, params, step=0):
        check_is_fitted(self, "params_")
        flat, new = nn.flatten(self.params_), nn.flatten(params)
        if set(flat) != set(new):
            raise ContractError("parameter names do not match this configuration")
        for name, t in flat.items():
            arr = new[name].data if isinstance(new[name], Tensor) else np.asarray(new[name])
            if arr.shape != t.shape:
                raise ContractError(f"{name}: shape {arr.shape} vs {t.shape}")
            t.data[...] = arr
        self.step_ = step
        return self

    def training_data(self):
        cfg = self._cfg()
        return synth_for(cfg, cfg.seed, cfg.data.n_train)

    def eval_data(self, n=None):
        cfg = self._cfg()
        return synth_for(cfg, cfg.seed + 10_000, cfg.data.n_eval if n is None else n)

    # -- training --------------------------------------------------------------
    def fit(self, X=None, y=None, steps=None):
        """Train on ``X`` (synthetic training set from the config when None).

        ``steps`` limits how many optimiser steps this call runs, so training
        can be split across calls (``step_`` keeps the schedule position).
        """
        if not hasattr(self, "params_"):
            self.initialize()
        cfg = self.config_
        tc = cfg.train
        data = self.training_data() if X is None else check_examples(X)
        prepared = [Prepared(ex, cfg) for ex in data]
        buckets = {}
        for i, p in enumerate(prepared):
            buckets.setdefault(p.key, []).append(i)
        keys = sorted(buckets)
        sizes = np.array([len(buckets[k]) for k in keys], dtype=np.float64)
        opt = getattr(self, "optimizer_", None)
        if opt is None:
            opt = nn.Adam(self.params_, tc.peak_lr, clip_norm=tc.clip_norm)
            self.optimizer_ = opt
        end = tc.steps if steps is None else min(tc.steps, self.step_ + steps)
        log = None
        if self.log_path:
            new = self.step_ == 0
            log = open(self.log_path, "w" if new else "a", newline="", encoding="utf-8")
            writer = csv.writer(log, lineterminator="\n")
            if new:
                writer.writerow(LOSS_LOG_FIELDS)
        t0 = time.time()
        try:
            while self.step_ < end:
                step = self.step_
                rng = np.random.default_rng([cfg.seed, 2, step])
                key = keys[int(rng.choice(len(keys), p=sizes / sizes.sum()))]
                pool = buckets[key]
                idx = rng.choice(len(pool), size=min(tc.batch, len(pool)), replace=False)
                batch = [prepared[pool[i]] for i in sorted(idx)]
                loss, masked = self._train_step(batch, rng)
                lr = self._lr(step)
                opt.zero_grad()
                backward(loss)
                gnorm = opt.grad_norm()
                opt.step(lr)
                value = loss.item()
                self.loss_history_.append(value)
                self.step_ += 1
                if log is not None:
                    writer.writerow([step, f"{value:.6f}", f"{lr:.6g}", f"{gnorm:.4f}", masked,
                                     len(batch)])
                if self.verbose and (step % 100 == 0 or self.step_ == end):
                    print(f"step {step:5d} loss {value:.4f} lr {lr:.2e} "
                          f"({time.time() - t0:.0f}s)", flush=True)
        finally:
            if log is not None:
                log.close()
        return self

    def _lr(self, step):
        tc = self.config_.train
        if tc.schedule == "constant":
            return tc.peak_lr if step >= tc.warmup_steps or tc.warmup_steps == 0 else \
                tc.peak_lr * (step + 1) / tc.warmup_steps
        return nn.warmup_cosine(step, tc.steps, tc.peak_lr, tc.warmup_steps, tc.final_lr_ratio)

    def _train_step(self, batch, rng):
        cfg = self.config_
        tc = cfg.train
        drop = rng.random(len(batch)) < tc.video_drop_prob
        video = np.stack([p.video for p in batch]).astype(self.dtype_)
        video[drop] = 0.0
        audio = faces = None
        if cfg.fusion == "avsr":
            lo, hi = cfg.audio.train_snr_db
            audio = np.stack([audio_features_for(p.wave, cfg, rng.uniform(lo, hi), rng)
                              for p in batch]).astype(self.dtype_)
        active = None
        if cfg.face_select:
            examples = [p.example for p in batch]
            if len(examples) > 1:
                examples = batch_distractor_mix(examples, int(rng.integers(2 ** 31)))
            hw = tuple(cfg.frontend.input_hw)
            tracks = [[_frames(c, hw) for c in ex.face_tracks] for ex in examples]
            faces = _pad_faces(tracks, batch[0].t).astype(self.dtype_)
            faces[drop] = 0.0
            active = np.stack([ex.active_face() for ex in examples])
        enc, weights = forward(self.params_, cfg, Tensor._wrap(video), audio, faces)
        labels = np.stack([p.labels for p in batch])
        pred = prediction_network(labels, self.params_["decoder"])
        lattice = joint_logits(enc, pred, self.params_["decoder"]["joint"])
        loss = rnnt_loss(lattice, labels)
        if weights is not None and tc.face_loss_weight > 0:
            loss = ops.add(loss, ops.scale(face_selection_loss(weights, active),
                                           tc.face_loss_weight))
        return loss, int(drop.sum())

    # -- inference ----------------------------------------------------------------
    def _encode_group(self, items, masks, seed, mode):
        cfg = self.config_
        hw = tuple(cfg.frontend.input_hw)
        video = np.stack([_frames(ex.video, hw, m) for (_, ex), m in zip(items, masks)])
        if mode == "ao":
            video[:] = 0.0
        audio = faces = None
        if cfg.fusion == "avsr":
            audio = np.stack([
                audio_features_for(ex.audio, cfg, cfg.audio.eval_snr_db,
                                   np.random.default_rng([seed, i, 7919]))
                for i, ex in items]).astype(self.dtype_)
        if cfg.face_select:
            tracks = [[_frames(c, hw, m) for c in ex.face_tracks]
                      for (_, ex), m in zip(items, masks)]
            faces = _pad_faces(tracks, video.shape[1]).astype(self.dtype_)
            if mode == "ao":
                faces[:] = 0.0
        with no_grad():
            enc, weights = forward(self.params_, cfg, Tensor._wrap(video.astype(self.dtype_)),
                                   audio, faces)
        return enc.data, None if weights is None else weights.data

    def _run(self, X, masks=None, seed=0, beam_width=None, mode=None, group_size=64):
        check_is_fitted(self, "params_")
        cfg = self.config_
        X = check_examples(X)
        if mode not in (None, "vsr", "avsr", "ao"):
            raise ConfigError(f"unknown mode {mode!r}", "mode")
        if mode in ("avsr", "ao") and cfg.fusion != "avsr":
            raise ConfigError(f"mode {mode!r} needs an audio-visual model", "mode")
        if mode == "vsr" and cfg.fusion != "vsr":
            raise ConfigError("mode 'vsr' needs a video-only model", "mode")
        masks = check_masks(masks, X)
        beam = cfg.decoder.beam_width if beam_width is None else beam_width
        groups = {}
        for i, ex in enumerate(X):
            groups.setdefault((ex.video.n_frames, len(ex.face_tracks)), []).append(i)
        results = [None] * len(X)
        dec = self.params_["decoder"]
        for key in sorted(groups):
            idx = groups[key]
            for a in range(0, len(idx), group_size):
                chunk = idx[a:a + group_size]
                enc, weights = self._encode_group([(i, X[i]) for i in chunk],
                                                  [masks[i] for i in chunk], seed, mode)
                if beam == 1:
                    decoded = greedy_decode(enc, dec)
                else:
                    decoded = [beam_decode(e, dec, beam) for e in enc]
                for k, i in enumerate(chunk):
                    toks, times, score = decoded[k]
                    results[i] = {"tokens": [t - 1 for t in toks], "times": times,
                                  "score": score,
                                  "weights": None if weights is None else weights[k]}
        return results

    def transcribe(self, X, masks=None, seed=0, beam_width=None, mode=None):
        return [r["tokens"] for r in self._run(X, masks, seed, beam_width, mode)]

    def predict(self, X, beam_width=None):
        return self.transcribe(X, beam_width=beam_width)

    def score(self, X, y=None):
        X = list(X)
        return -corpus_wer([ex.transcript for ex in X], self.predict(X))

    def evaluate(self, X, mode=None, beam_width=None, seed=0):
        X = list(X)
        hyps = self.transcribe(X, seed=seed, beam_width=beam_width, mode=mode)
        return corpus_wer([ex.transcript for ex in X], hyps), hyps

    # -- diarization -------------------------------------------------------------------
    def diarize(self, X, seed=0, beam_width=None, min_gap_frames=3):
        """Per example: transcript, per-word speakers, hypothesis segments and
        face-selection accuracy on frames where a glyph is shown.

        Models without face selection attribute all speech to the first track.
        """
        X = list(X)
        runs = self._run(X, seed=seed, beam_width=beam_width)
        out = []
        hop = HOP_MS / 1000.0
        for ex, r in zip(X, runs):
            if r["weights"] is None:  # one face: only voice activity can be wrong
                ids = np.zeros(ex.video.n_frames, dtype=np.int64)
            else:
                ids = r["weights"].argmax(axis=-1)
            voiced = voice_activity(ex.audio, len(ids), min_gap_frames)
            labels = np.where(voiced, ids, -1)
            segs = frames_to_segments(labels, ex.face_speakers, hop)
            words = [WordHyp(str(tok), ex.face_speakers[ids[min(t, len(ids) - 1)]])
                     for tok, t in zip(r["tokens"], r["times"])]
            truth = ex.active_face()
            shown = ex.frame_labels >= 0 if ex.frame_labels is not None else truth >= 0
            acc = float(np.mean(ids[shown] == truth[shown])) if shown.any() else 1.0
            out.append({"tokens": r["tokens"], "words": words, "segments": segs,
                        "frame_accuracy": acc})
        return out


def voice_activity(wave, n_frames, min_gap_frames=3):
    """Energy VAD on 30 ms frames; silences shorter than ``min_gap_frames`` are bridged."""
    wave = np.asarray(wave, dtype=np.float64)
    e = np.array([np.mean(wave[k * SAMPLES_PER_FRAME:(k + 1) * SAMPLES_PER_FRAME] ** 2)
                  if k * SAMPLES_PER_FRAME < len(wave) else 0.0 for k in range(n_frames)])
    loge = np.log(e + 1e-12)
    thr = 0.5 * (loge.min() + loge.max())
    voiced = loge > thr
    k = 0
    while k < n_frames:
        if voiced[k]:
            k += 1
            continue
        j = k
        while j < n_frames and not voiced[j]:
            j += 1
        if 0 < k and j < n_frames and j - k < min_gap_frames:
            voiced[k:j] = True
        k = j
    return voiced


def n_encoder_frames(cfg, t):
    return t if cfg.fusion == "avsr" else output_length(cfg.frontend, t)


def synth_for(cfg, seed, n):
    d = cfg.data
    return synth_generate(seed, n, n_speakers=max(1, d.n_faces), charset_size=d.charset_size,
                          min_len=d.min_len, max_len=d.max_len,
                          frames_per_char=d.frames_per_char, gap_frames=d.gap_frames,
                          frame_hw=d.frame_hw, audio_ambiguity=d.audio_ambiguity)


def lattice_shape(cfg, t, u):
    return (n_encoder_frames(cfg, t), u + 1, cfg.vocab_size)

