"""Recognition and diarization scoring, plus the face-selection attention head.

DER here has no collar. Its denominator is total reference speaker time.
WDER counts hypothesis words (correct, substituted, inserted) whose speaker
is wrong after the best one-to-one speaker mapping; deletions are excluded.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from avsk import nn
from avsk.autodiff import Tensor, ops
from avsk.data import SpeakerSegment, SynthExample, WordHyp
from avsk.errors import ContractError, DimensionError, InputError

# -- WER ---------------------------------------------------------------------------

MATCH, SUB, DEL, INS = "C", "S", "D", "I"


def align(ref, hyp):
    """Levenshtein alignment as a list of ``(op, ref_index, hyp_index)``.

    On equal cost the backtrace prefers the diagonal step (match or
    substitution), then deletion, then insertion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(diag, d[i - 1, j] + 1, d[i, j - 1] + 1)
    ops_ = []
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops_.append((MATCH if ref[i - 1] == hyp[j - 1] else SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            ops_.append((DEL, i - 1, None))
            i -= 1
        else:
            ops_.append((INS, None, j - 1))
            j -= 1
    return ops_[::-1]


@dataclass
class WerResult:
    wer: float
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int


def wer_details(ref, hyp):
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ContractError("reference must be non-empty")
    counts = {MATCH: 0, SUB: 0, DEL: 0, INS: 0}
    for op, _, _ in align(ref, hyp):
        counts[op] += 1
    errors = counts[SUB] + counts[DEL] + counts[INS]
    return WerResult(errors / len(ref), counts[SUB], counts[DEL], counts[INS], len(ref))


def wer(ref, hyp):
    """(S + D + I) / len(ref). Strings are split on whitespace."""
    if isinstance(ref, str):
        ref = ref.split()
    if isinstance(hyp, str):
        hyp = hyp.split()
    return wer_details(ref, hyp).wer


def corpus_wer(refs, hyps):
    """Total edit count over total reference length."""
    if len(refs) != len(hyps):
        raise ContractError("refs and hyps differ in length")
    if not refs:
        raise ContractError("empty corpus")
    errs = tot = 0
    for r, h in zip(refs, hyps):
        res = wer_details(r, h)
        errs += res.substitutions + res.deletions + res.insertions
        tot += res.ref_len
    return errs / tot


# -- DER -----------------------------------------------------------------------------


@dataclass
class DerResult:
    der: float
    false_alarm: float
    missed: float
    confusion: float
    total: float
    mapping: dict = field(default_factory=dict)


def _check_segments(segs, what):
    by_spk = {}
    for s in segs:
        if not isinstance(s, SpeakerSegment):
            s = SpeakerSegment(*s)
        by_spk.setdefault(s.speaker, []).append(s)
    for spk, lst in by_spk.items():
        lst.sort(key=lambda s: s.start_s)
        for a, b in zip(lst, lst[1:]):
            if b.start_s < a.end_s:
                raise InputError(f"{what}: overlapping segments for speaker {spk!r}")
    return by_spk


def injective_maps(n_ref, n_hyp):
    """Every one-to-one pairing that covers the smaller side, as (ref, hyp) index pairs."""
    if n_hyp <= n_ref:
        for refs in itertools.permutations(range(n_ref), n_hyp):
            yield list(zip(refs, range(n_hyp)))
    else:
        for hyps in itertools.permutations(range(n_hyp), n_ref):
            yield list(zip(range(n_ref), hyps))


def _best_mapping(overlap, exhaustive=False):
    """One-to-one map maximising total overlap; returns sorted (ref_idx, hyp_idx) pairs."""
    nr, nh = overlap.shape
    if nr == 0 or nh == 0:
        return []
    if exhaustive:
        best = max(injective_maps(nr, nh), key=lambda pairs: sum(overlap[r, h] for r, h in pairs))
        return sorted(best)
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return sorted((int(r), int(c)) for r, c in zip(rows, cols))


def _frame_matrix(by_spk, names, n_frames, res):
    out = np.zeros((len(names), n_frames), dtype=bool)
    for i, spk in enumerate(names):
        for s in by_spk[spk]:
            a = int(math.floor(s.start_s / res + 0.5))
            b = int(math.floor(s.end_s / res + 0.5))
            out[i, a:b] = True
    return out


def _frame_scores(r, h, pairs):
    nref, nhyp = r.sum(axis=0), h.sum(axis=0)
    correct = np.zeros(r.shape[1], dtype=np.int64)
    for i, j in pairs:
        correct += r[i] & h[j]
    miss = np.maximum(0, nref - nhyp).sum()
    fa = np.maximum(0, nhyp - nref).sum()
    conf = (np.minimum(nref, nhyp) - correct).sum()
    return int(fa), int(miss), int(conf), int(nref.sum())


def der(ref, hyp, resolution_s=0.01):
    """Frame-level DER at ``resolution_s`` with an optimal one-to-one speaker map."""
    if resolution_s <= 0:
        raise ContractError("resolution must be positive")
    rb, hb = _check_segments(ref, "reference"), _check_segments(hyp, "hypothesis")
    rn, hn = sorted(rb), sorted(hb)
    end = max([s.end_s for lst in rb.values() for s in lst]
              + [s.end_s for lst in hb.values() for s in lst] + [0.0])
    n = int(math.floor(end / resolution_s + 0.5)) + 1
    r, h = _frame_matrix(rb, rn, n, resolution_s), _frame_matrix(hb, hn, n, resolution_s)
    overlap = (r[:, None, :] & h[None, :, :]).sum(axis=2).astype(float)
    pairs = _best_mapping(overlap)
    fa, miss, conf, total = _frame_scores(r, h, pairs)
    return _result(fa, miss, conf, total, resolution_s, pairs, rn, hn)


def _result(fa, miss, conf, total, unit, pairs, rn, hn):
    if total == 0:
        raise ContractError("reference contains no speech")
    return DerResult((fa + miss + conf) / total, fa * unit, miss * unit, conf * unit,
                     total * unit, {hn[j]: rn[i] for i, j in pairs})


def der_bruteforce(ref, hyp, resolution_s=0.01):
    """Oracle: explicit per-frame loop and exhaustive search over speaker maps."""
    rb, hb = _check_segments(ref, "reference"), _check_segments(hyp, "hypothesis")
    rn, hn = sorted(rb), sorted(hb)
    if max(len(rn), len(hn)) > 8:
        raise ContractError("exhaustive mapping is limited to 8 speakers")
    end = max([s.end_s for lst in rb.values() for s in lst]
              + [s.end_s for lst in hb.values() for s in lst] + [0.0])
    n = int(math.floor(end / resolution_s + 0.5)) + 1

    def active(by_spk, spk, k):
        centre = (k + 0.5) * resolution_s
        return any(s.start_s <= centre < s.end_s for s in by_spk[spk])

    frames = [({s for s in rn if active(rb, s, k)}, {s for s in hn if active(hb, s, k)})
              for k in range(n)]
    best = None
    for pairs in injective_maps(len(rn), len(hn)):
        m = {hn[j]: rn[i] for i, j in pairs}
        fa = miss = conf = total = 0
        for rs, hs in frames:
            correct = sum(1 for hspk in hs if m.get(hspk) in rs)
            fa += max(0, len(hs) - len(rs))
            miss += max(0, len(rs) - len(hs))
            conf += min(len(rs), len(hs)) - correct
            total += len(rs)
        key = fa + miss + conf
        if best is None or key < best[0]:
            best = (key, fa, miss, conf, total, m)
    _, fa, miss, conf, total, m = best
    if total == 0:
        raise ContractError("reference contains no speech")
    return DerResult((fa + miss + conf) / total, fa * resolution_s, miss * resolution_s,
                     conf * resolution_s, total * resolution_s, dict(m))


def der_exact(ref, hyp):
    """Continuous-time DER by sweeping over every segment boundary."""
    rb, hb = _check_segments(ref, "reference"), _check_segments(hyp, "hypothesis")
    rn, hn = sorted(rb), sorted(hb)
    cuts = sorted({t for b in (rb, hb) for lst in b.values() for s in lst
                   for t in (s.start_s, s.end_s)})
    pieces = list(zip(cuts, cuts[1:]))
    dur = np.array([b - a for a, b in pieces])

    def occupancy(by_spk, names):
        out = np.zeros((len(names), len(pieces)), dtype=bool)
        for i, spk in enumerate(names):
            for s in by_spk[spk]:
                for k, (a, b) in enumerate(pieces):
                    if s.start_s <= a and b <= s.end_s:
                        out[i, k] = True
        return out

    r, h = occupancy(rb, rn), occupancy(hb, hn)
    overlap = ((r[:, None, :] & h[None, :, :]) * dur).sum(axis=2)
    pairs = _best_mapping(overlap)
    nref, nhyp = r.sum(axis=0), h.sum(axis=0)
    correct = np.zeros(len(pieces))
    for i, j in pairs:
        correct += r[i] & h[j]
    miss = float((np.maximum(0, nref - nhyp) * dur).sum())
    fa = float((np.maximum(0, nhyp - nref) * dur).sum())
    conf = float(((np.minimum(nref, nhyp) - correct) * dur).sum())
    total = float((nref * dur).sum())
    if total <= 0:
        raise ContractError("reference contains no speech")
    return DerResult((fa + miss + conf) / total, fa, miss, conf, total,
                     {hn[j]: rn[i] for i, j in pairs})


def n_boundaries(ref, hyp):
    return 2 * (len(list(ref)) + len(list(hyp)))


# -- WDER -------------------------------------------------------------------------------


@dataclass
class WderResult:
    wder: float
    c_is: int
    s_is: int
    i_is: int
    correct: int
    substituted: int
    inserted: int
    mapping: dict = field(default_factory=dict)


def _aligned_hyp_speakers(ref_words, hyp_words):
    """For every hypothesis word: (align tag, reference speaker or None)."""
    steps = align([w for w, _ in ref_words], [h.word for h in hyp_words])
    tags = [None] * len(hyp_words)
    prev_ref = None
    pending = []
    for op, i, j in steps:
        if i is not None:
            prev_ref = ref_words[i][1]
            for jj in pending:  # leading insertions take the first reference speaker
                tags[jj] = (tags[jj][0], prev_ref)
            pending = []
        if op == DEL:
            continue
        if op == INS:
            tags[j] = ("inserted", prev_ref)
            if prev_ref is None:
                pending.append(j)
        else:
            tags[j] = ("correct" if op == MATCH else "substituted", ref_words[i][1])
    return tags


def _wder_counts(tags, hyp_words, mapping):
    counts = {"correct": [0, 0], "substituted": [0, 0], "inserted": [0, 0]}
    for (tag, rspk), h in zip(tags, hyp_words):
        counts[tag][0] += 1
        if rspk is None or mapping.get(h.speaker) != rspk:
            counts[tag][1] += 1
    return counts


def wder(ref_words, hyp_words, exhaustive=None):
    """Word diarization error rate.

    ``ref_words`` is a list of ``(word, speaker)``; ``hyp_words`` a list of
    ``WordHyp`` (or ``(word, speaker)`` pairs). Each hypothesis word gets its
    alignment tag written back. An inserted word is attributed to the speaker
    of the nearest preceding aligned reference word (the first one if there
    is none before it).
    """
    ref_words = [tuple(r) for r in ref_words]
    hyp_words = [h if isinstance(h, WordHyp) else WordHyp(*h) for h in hyp_words]
    if not hyp_words:
        raise ContractError("hypothesis must contain at least one word")
    tags = _aligned_hyp_speakers(ref_words, hyp_words)
    for (tag, _), h in zip(tags, hyp_words):
        h.align = tag
    hn = sorted({h.speaker for h in hyp_words})
    rn = sorted({spk for _, spk in ref_words})
    counts = np.zeros((len(rn), len(hn)))
    for (_, rspk), h in zip(tags, hyp_words):
        if rspk is not None:
            counts[rn.index(rspk), hn.index(h.speaker)] += 1
    if exhaustive is None:
        exhaustive = max(len(rn), len(hn)) <= 8
    pairs = _best_mapping(counts, exhaustive=exhaustive)
    mapping = {hn[j]: rn[i] for i, j in pairs}
    c = _wder_counts(tags, hyp_words, mapping)
    num = c["correct"][1] + c["substituted"][1] + c["inserted"][1]
    den = c["correct"][0] + c["substituted"][0] + c["inserted"][0]
    return WderResult(num / den, c["correct"][1], c["substituted"][1], c["inserted"][1],
                      c["correct"][0], c["substituted"][0], c["inserted"][0], mapping)


def wder_bruteforce(ref_words, hyp_words):
    """Oracle: try every one-to-one map explicitly and count wrong-speaker words."""
    ref_words = [tuple(r) for r in ref_words]
    hyp_words = [h if isinstance(h, WordHyp) else WordHyp(*h) for h in hyp_words]
    tags = _aligned_hyp_speakers(ref_words, hyp_words)
    hn = sorted({h.speaker for h in hyp_words})
    rn = sorted({spk for _, spk in ref_words})
    best = None
    for pairs in injective_maps(len(rn), len(hn)):
        c = _wder_counts(tags, hyp_words, {hn[j]: rn[i] for i, j in pairs})
        num = sum(v[1] for v in c.values())
        if best is None or num < best:
            best = num
    return best / len(hyp_words)


# -- face selection -------------------------------------------------------------------


def init_face_select(rng, audio_dim, face_dim, attn_dim=32, dtype=np.float32):
    return {"a": nn.init_linear(rng, audio_dim, attn_dim, dtype),
            "v": nn.init_linear(rng, face_dim, attn_dim, dtype)}


def face_attention_select(audio_emb, face_embs, params):
    """Attend over F face tracks per acoustic frame.

    ``audio_emb`` is (..., T, Da) and every face embedding (..., T, Dv).
    Returns ``(weights (..., T, F), speaker_ids (..., T), fused (..., T, Dv))``.
    """
    if len(face_embs) == 0:
        raise ContractError("need at least one face track")
    for f in face_embs:
        if f.shape[:-1] != audio_emb.shape[:-1]:
            raise DimensionError(f"face track {f.shape} not aligned with audio {audio_emb.shape}")
    faces = ops.stack(list(face_embs), axis=audio_emb.ndim - 1)  # (..., T, F, Dv)
    q = nn.linear(audio_emb, params["a"])  # (..., T, d)
    k = nn.linear(faces, params["v"])  # (..., T, F, d)
    d = q.shape[-1]
    scores = ops.bmm(k, ops.reshape(q, q.shape + (1,)))
    scores = ops.scale(ops.reshape(scores, scores.shape[:-1]), 1.0 / math.sqrt(d))
    weights = ops.softmax(scores)
    fused = ops.bmm(ops.reshape(weights, weights.shape[:-1] + (1, weights.shape[-1])), faces)
    fused = ops.reshape(fused, fused.shape[:-2] + (fused.shape[-1],))
    return weights, weights.data.argmax(axis=-1), fused


def face_selection_loss(weights, active):
    """Mean negative log attention weight on the active face over voiced frames."""
    active = np.asarray(active)
    voiced = active >= 0
    if not voiced.any():
        return ops.scale(ops.sum(weights), 0.0)
    logw = ops.log(ops.add_const(weights, np.full(weights.shape, 1e-9, weights.dtype)))
    picked = ops.pick(logw, np.where(voiced, active, 0))
    masked = ops.mask_mul(picked, voiced.astype(weights.dtype))
    return ops.scale(ops.sum(masked), -1.0 / voiced.sum())


def _fit_length(clip_frames, t):
    if len(clip_frames) >= t:
        return clip_frames[:t]
    pad = np.repeat(clip_frames[-1:], t - len(clip_frames), axis=0)
    return np.concatenate([clip_frames, pad], axis=0)


def batch_distractor_mix(batch, seed):
    """Give each example 1..3 extra face tracks borrowed from other batch members.

    Borrowed tracks are cut or padded (repeating their last, idle frame) to the
    host's length and never belong to a speaker of the host example. The
    active-speaker labels keep pointing at the original tracks.
    """
    from avsk.data import VideoClip
    if len(batch) < 2:
        raise ContractError("distractor mixing needs a batch of at least 2")
    out = []
    for i, ex in enumerate(batch):
        rng = np.random.default_rng([seed, i])
        own = set(ex.face_speakers)
        pool = [(j, k) for j, other in enumerate(batch) if j != i
                for k, spk in enumerate(other.face_speakers) if spk not in own]
        n = min(len(pool), int(rng.integers(1, 4)))
        picks = [pool[p] for p in sorted(rng.choice(len(pool), size=n, replace=False))] if n else []
        tracks, speakers = list(ex.face_tracks), list(ex.face_speakers)
        t = ex.video.n_frames
        for j, k in picks:
            src = batch[j].face_tracks[k]
            tracks.append(VideoClip(_fit_length(src.frames, t), src.frame_rate_hz,
                                    _fit_length(src.mask, t)))
            speakers.append(batch[j].face_speakers[k])
        out.append(SynthExample(video=ex.video, audio=ex.audio, transcript=ex.transcript,
                                speaker_spans=ex.speaker_spans, face_tracks=tracks,
                                face_speakers=speakers, frame_labels=ex.frame_labels,
                                token_frames=ex.token_frames, token_speakers=ex.token_speakers))
    return out


# -- hypothesis segments -------------------------------------------------------------------


def frames_to_segments(labels, names, hop_s):
    """Run-length encode per-frame speaker indices (-1 = silence) into segments."""
    segs = []
    labels = list(labels)
    k = 0
    while k < len(labels):
        if labels[k] < 0:
            k += 1
            continue
        j = k
        while j < len(labels) and labels[j] == labels[k]:
            j += 1
        segs.append(SpeakerSegment(names[labels[k]], round(k * hop_s, 6), round(j * hop_s, 6)))
        k = j
    return segs


# -- file formats ------------------------------------------------------------------------


def write_segments(path, segments):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["speaker", "start_s", "end_s"])
        for s in segments:
            w.writerow([s.speaker, repr(float(s.start_s)), repr(float(s.end_s))])


def read_segments(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [SpeakerSegment(r["speaker"], float(r["start_s"]), float(r["end_s"])) for r in rows]
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{path}: expected columns speaker,start_s,end_s ({exc})") from exc


def write_words(path, words):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["word", "speaker"])
        for item in words:
            word, spk = (item.word, item.speaker) if isinstance(item, WordHyp) else item
            w.writerow([word, spk])


def read_words(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [(r["word"], r["speaker"]) for r in rows]
    except KeyError as exc:
        raise InputError(f"{path}: expected columns word,speaker") from exc
