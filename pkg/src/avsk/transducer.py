"""RNN-T decoder: LSTM prediction network, joint network, loss, and search.

Lattice convention: ``log_probs[t, u, v]`` is the log-probability of
emitting ``v`` at encoder frame ``t`` after ``u`` labels. Blank (id 0)
advances ``t``; a label advances ``u``. A complete alignment ends with a
blank emitted from ``(T-1, U)``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from avsk import nn
from avsk.autodiff import Tensor, no_grad, ops
from avsk.autodiff.tensor import make_result
from avsk.config import DecoderConfig
from avsk.errors import ContractError, DimensionError, VocabError

BLANK = 0
MAX_BRUTEFORCE = 12


@dataclass
class Vocab:
    tokens: list = field(default_factory=list)  # characters; id = index + 1
    blank_id: int = BLANK

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabError("duplicate tokens")
        if "" in self.tokens or "<b>" in self.tokens:
            raise VocabError("blank may not appear among the characters")

    @classmethod
    def from_charset(cls, charset):
        return cls(list(charset))

    @property
    def size(self):
        return len(self.tokens) + 1

    def encode(self, text):
        try:
            return [self.tokens.index(ch) + 1 for ch in text]
        except ValueError as exc:
            raise VocabError(f"unknown character in {text!r}") from exc

    def decode(self, ids):
        return "".join(self.tokens[i - 1] for i in ids if i != self.blank_id)


# -- LSTM ------------------------------------------------------------------------


def init_lstm_cell(rng, din, hidden, dtype=np.float32):
    lim = 1.0 / math.sqrt(hidden)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return {"w": nn.param(rng.uniform(-lim, lim, (din + hidden, 4 * hidden)), dtype),
            "b": nn.param(b, dtype)}


def lstm_step(x, state, p):
    """One LSTM cell step, gate order (i, f, g, o). Returns ``(y, (h', c'))``."""
    h, c = state
    hidden = p["w"].shape[1] // 4
    if h.shape[-1] != hidden or c.shape != h.shape:
        raise DimensionError(f"lstm state {h.shape}/{c.shape} vs hidden size {hidden}")
    if x.shape[-1] + hidden != p["w"].shape[0]:
        raise DimensionError(f"lstm input {x.shape} vs weight rows {p['w'].shape[0]}")
    z = nn.linear(ops.concat([x, h], axis=-1), p)
    zi, zf, zg, zo = ops.split(z, [hidden] * 4, axis=-1)
    i, f, o = ops.sigmoid(zi), ops.sigmoid(zf), ops.sigmoid(zo)
    g = ops.tanh(zg)
    c_new = ops.add(ops.mul(f, c), ops.mul(i, g))
    h_new = ops.mul(o, ops.tanh(c_new))
    return h_new, (h_new, c_new)


def init_decoder(cfg: DecoderConfig, vocab_size, enc_dim, rng, dtype=np.float32):
    cfg.validate()
    p = {"embed": nn.param(0.1 * rng.standard_normal((vocab_size, cfg.embedding_dim)), dtype)}
    din = cfg.embedding_dim
    for i in range(cfg.lstm_layers):
        p[f"lstm{i}"] = init_lstm_cell(rng, din, cfg.cell_size, dtype)
        din = cfg.cell_size
    p["joint"] = {"enc": nn.init_linear(rng, enc_dim, cfg.joint_dim, dtype),
                  "pred": nn.init_linear(rng, cfg.cell_size, cfg.joint_dim, dtype, bias=False),
                  "out": nn.init_linear(rng, cfg.joint_dim, vocab_size, dtype)}
    return p


def count_decoder_params(cfg: DecoderConfig, vocab_size, enc_dim):
    n = vocab_size * cfg.embedding_dim
    din = cfg.embedding_dim
    for _ in range(cfg.lstm_layers):
        n += (din + cfg.cell_size) * 4 * cfg.cell_size + 4 * cfg.cell_size
        din = cfg.cell_size
    j = cfg.joint_dim
    return n + (enc_dim * j + j) + cfg.cell_size * j + (j * vocab_size + vocab_size)


def zero_state(p, batch_shape, dtype):
    layers = sorted(k for k in p if k.startswith("lstm"))
    hidden = p[layers[0]]["w"].shape[1] // 4
    z = np.zeros(tuple(batch_shape) + (hidden,), dtype=dtype)
    return [(Tensor._wrap(z), Tensor._wrap(z)) for _ in layers]


def pred_step(token_ids, states, p):
    """Advance the prediction network by one token for a batch of hypotheses."""
    x = ops.embedding(p["embed"], token_ids)
    new = []
    for i, st in enumerate(states):
        x, st = lstm_step(x, st, p[f"lstm{i}"])
        new.append(st)
    return x, new


def prediction_network(labels, p):
    """Outputs for the label prefixes ``[blank, y1..yU]``: shape ``(B, U+1, H)``."""
    labels = np.asarray(labels, dtype=np.int64)
    b, u = labels.shape
    inputs = np.concatenate([np.zeros((b, 1), dtype=np.int64), labels], axis=1)
    states = zero_state(p, (b,), p["embed"].dtype)
    outs = []
    for step in range(u + 1):
        y, states = pred_step(inputs[:, step], states, p)
        outs.append(y)
    return ops.stack(outs, axis=1)


def joint_logits(enc, pred, p):
    """log_softmax(W tanh(A enc[t] + B pred[u] + b)) over the vocabulary.

    ``enc`` is (..., T, De) and ``pred`` is (..., U+1, Dp); the result is the
    lattice ``(..., T, U+1, V)``.
    """
    a = nn.linear(enc, p["enc"])
    b = nn.linear(pred, p["pred"])
    hidden = ops.tanh(ops.outer_add(a, b))
    return ops.log_softmax(nn.linear(hidden, p["out"]))


# -- loss --------------------------------------------------------------------------


def _check_lattice(lp, labels):
    if lp.ndim != 4:
        raise DimensionError(f"lattice must be (B, T, U+1, V), got {lp.shape}")
    b, t, u1, v = lp.shape
    if t == 0:
        raise ContractError("lattice has no encoder frames (T == 0)")
    if labels.shape != (b, u1 - 1):
        raise DimensionError(f"labels {labels.shape} vs lattice {lp.shape}")
    if labels.size:
        if labels.min() < 0 or labels.max() >= v:
            raise VocabError(f"label id outside vocabulary of size {v}")
        if np.any(labels == BLANK):
            raise ContractError("labels must not contain blank")


def _batchify(lattice, labels):
    lp = lattice.data
    labels = np.asarray(labels, dtype=np.int64)
    single = lp.ndim == 3
    if single:
        lp = lp[None]
        labels = labels.reshape(1, -1)
    return lp, labels, single


def _alpha_beta(blank, emit):
    """Forward/backward log-variables. blank: (B,T,U+1); emit: (B,T,U)."""
    b, t, u1 = blank.shape
    alpha = np.full((b, t, u1), -np.inf)
    beta = np.full((b, t, u1), -np.inf)
    alpha[:, 0, 0] = 0.0
    for u in range(1, u1):
        alpha[:, 0, u] = alpha[:, 0, u - 1] + emit[:, 0, u - 1]
    for ti in range(1, t):
        stay = alpha[:, ti - 1, :] + blank[:, ti - 1, :]
        alpha[:, ti, 0] = stay[:, 0]
        for u in range(1, u1):
            alpha[:, ti, u] = np.logaddexp(stay[:, u], alpha[:, ti, u - 1] + emit[:, ti, u - 1])
    beta[:, t - 1, u1 - 1] = blank[:, t - 1, u1 - 1]
    for u in range(u1 - 2, -1, -1):
        beta[:, t - 1, u] = beta[:, t - 1, u + 1] + emit[:, t - 1, u]
    for ti in range(t - 2, -1, -1):
        nxt = beta[:, ti + 1, :] + blank[:, ti, :]
        beta[:, ti, u1 - 1] = nxt[:, u1 - 1]
        for u in range(u1 - 2, -1, -1):
            beta[:, ti, u] = np.logaddexp(nxt[:, u], beta[:, ti, u + 1] + emit[:, ti, u])
    return alpha, beta


def rnnt_loss(lattice, labels, reduction="mean"):
    """Negative log-likelihood of ``labels`` summed over all monotone alignments.

    ``lattice`` is a (T, U+1, V) or (B, T, U+1, V) tensor of log-probabilities;
    ``labels`` holds U non-blank ids (per batch row). Exact gradients come from
    the backward variables. ``reduction`` is ``mean``/``sum`` over the batch or
    ``none`` for a (B,) vector.
    """
    lp, labels, single = _batchify(lattice, labels)
    _check_lattice(lp, labels)
    lp64 = lp.astype(np.float64)
    bsz, t, u1, v = lp.shape
    blank = lp64[..., BLANK]
    emit = np.take_along_axis(lp64[:, :, :-1, :], labels[:, None, :, None], axis=-1)[..., 0]
    alpha, beta = _alpha_beta(blank, emit)
    loglik = alpha[:, t - 1, u1 - 1] + blank[:, t - 1, u1 - 1]
    losses = -loglik

    if reduction == "mean":
        out = np.asarray(losses.mean())
    elif reduction == "sum":
        out = np.asarray(losses.sum())
    elif reduction == "none":
        out = losses if not single else losses[0]
    else:
        raise ContractError(f"unknown reduction {reduction!r}")
    dtype = lattice.dtype

    def bw(g):
        g = np.asarray(g, dtype=np.float64)
        if reduction == "mean":
            scale = np.full(bsz, float(g) / bsz)
        elif reduction == "sum":
            scale = np.full(bsz, float(g))
        else:
            scale = g.reshape(bsz)
        norm = loglik[:, None, None]
        grad = np.zeros((bsz, t, u1, v))
        gb = np.zeros((bsz, t, u1))
        gb[:, :-1, :] = -np.exp(alpha[:, :-1, :] + blank[:, :-1, :] + beta[:, 1:, :] - norm)
        gb[:, -1, -1] = -np.exp(alpha[:, -1, -1] + blank[:, -1, -1] - loglik)
        ge = -np.exp(alpha[:, :, :-1] + emit + beta[:, :, 1:] - norm)
        grad[..., BLANK] = gb
        sub = grad[:, :, :-1, :]
        np.put_along_axis(sub, labels[:, None, :, None],
                          np.take_along_axis(sub, labels[:, None, :, None], axis=-1)
                          + ge[..., None], axis=-1)
        grad *= scale[:, None, None, None]
        if single:
            grad = grad[0]
        return (grad.astype(dtype),)
    return make_result(np.asarray(out, dtype=dtype), (lattice,), bw, "rnnt_loss")


def alignment_count(t, u):
    """Number of monotone alignments through a (T, U+1) lattice ending in a final blank."""
    return math.comb(t + u - 1, u)


def enumerate_alignments(t, u):
    """Every alignment as a symbol string: 'b' = blank, 'y' = next label."""
    steps = t + u - 1  # the final blank from (T-1, U) is fixed
    for label_pos in itertools.combinations(range(steps), u):
        seq = ["b"] * steps
        for i in label_pos:
            seq[i] = "y"
        yield "".join(seq) + "b"


def rnnt_loss_bruteforce(lattice, labels, return_count=False):
    """Reference loss by explicit enumeration of alignments (T + U <= 12)."""
    lp = lattice.data if isinstance(lattice, Tensor) else np.asarray(lattice)
    lp = lp.astype(np.float64)
    labels = [int(y) for y in labels]
    if lp.ndim != 3:
        raise DimensionError(f"brute force takes a single (T, U+1, V) lattice, got {lp.shape}")
    t, u1, v = lp.shape
    u = len(labels)
    if u1 != u + 1:
        raise DimensionError(f"labels of length {u} vs lattice {lp.shape}")
    if t + u > MAX_BRUTEFORCE:
        raise ContractError(f"T+U = {t + u} exceeds the enumeration guard {MAX_BRUTEFORCE}")
    if any(y <= 0 or y >= v for y in labels):
        raise VocabError("label id outside vocabulary or blank")
    path_logps = []
    for seq in enumerate_alignments(t, u):
        ti = ui = 0
        total = 0.0
        for sym in seq:
            if sym == "b":
                total += lp[ti, ui, BLANK]
                ti += 1
            else:
                total += lp[ti, ui, labels[ui]]
                ui += 1
        path_logps.append(total)
    m = max(path_logps)
    loss = -(m + math.log(sum(math.exp(x - m) for x in path_logps)))
    return (loss, len(path_logps)) if return_count else loss


# -- decoding ------------------------------------------------------------------------


@dataclass
class Hypothesis:
    tokens: tuple
    score: float
    times: tuple
    states: list
    pred_out: np.ndarray

    def key(self):
        return (-self.score, self.tokens)


def _pred_advance(p, token, states):
    with no_grad():
        y, new = pred_step(np.array([token]), states, p)
    return y.data[0], new


def _joint_row(enc_t, pred_out, p):
    with no_grad():
        a = nn.linear(Tensor._wrap(enc_t[None]), p["joint"]["enc"])
        b = nn.linear(Tensor._wrap(pred_out[None]), p["joint"]["pred"])
        h = ops.tanh(ops.add(a, b))
        return ops.log_softmax(nn.linear(h, p["joint"]["out"])).data[0].astype(np.float64)


def greedy_decode(enc, p, max_symbols=1):
    """Batched greedy search over ``(B, T, D)`` (or ``(T, D)``) encoder output.

    Returns a list of ``(tokens, times, score)`` per utterance; ``score`` is the
    log-probability of the chosen alignment path.
    """
    enc = enc.data if isinstance(enc, Tensor) else np.asarray(enc)
    single = enc.ndim == 2
    if single:
        enc = enc[None]
    bsz, t, _ = enc.shape
    dtype = p["embed"].dtype
    tokens = [[] for _ in range(bsz)]
    times = [[] for _ in range(bsz)]
    scores = np.zeros(bsz)
    with no_grad():
        states = zero_state(p, (bsz,), dtype)
        pred_out, states = pred_step(np.zeros(bsz, dtype=np.int64), states, p)
        enc_proj = nn.linear(Tensor._wrap(enc.astype(dtype)), p["joint"]["enc"]).data
        for ti in range(t):
            active = np.ones(bsz, dtype=bool)
            for n in range(max_symbols + 1):
                b = nn.linear(pred_out, p["joint"]["pred"]).data
                h = np.tanh(enc_proj[:, ti] + b)
                logits = h @ p["joint"]["out"]["w"].data + p["joint"]["out"]["b"].data
                lp = ops.log_softmax(Tensor._wrap(logits.astype(dtype))).data.astype(np.float64)
                if n == max_symbols:
                    choice = np.zeros(bsz, dtype=np.int64)
                else:
                    choice = lp.argmax(axis=1)
                scores[active] += lp[active, choice[active]]
                emit = active & (choice != BLANK)
                if not emit.any():
                    break
                for i in np.flatnonzero(emit):
                    tokens[i].append(int(choice[i]))
                    times[i].append(ti)
                new_out, new_states = pred_step(np.where(emit, choice, 0), states, p)
                sel = emit[:, None]
                pred_out = Tensor._wrap(np.where(sel, new_out.data, pred_out.data))
                states = [(Tensor._wrap(np.where(sel, nh.data, oh.data)),
                           Tensor._wrap(np.where(sel, nc.data, oc.data)))
                          for (nh, nc), (oh, oc) in zip(new_states, states)]
                active = emit
    out = [(tokens[i], times[i], float(scores[i])) for i in range(bsz)]
    return out[0] if single else out


def beam_decode(enc, p, beam_width=4, max_symbols=1):
    """Beam search over one utterance's ``(T, D)`` encoder output.

    Within a frame, each round expands every live hypothesis by every symbol;
    blank-extended candidates finish the frame, label-extended ones stay live
    for another round (at most ``max_symbols`` labels per frame). Each round
    keeps the best ``beam_width`` of finished and live candidates together,
    ranked by path log-probability and then by token sequence, so
    ``beam_width=1`` reproduces greedy search exactly.

    Returns ``(tokens, times, score)`` for the best hypothesis.
    """
    if beam_width < 1:
        raise ContractError("beam_width must be >= 1")
    enc = enc.data if isinstance(enc, Tensor) else np.asarray(enc)
    if enc.ndim != 2:
        raise DimensionError(f"beam_decode takes one (T, D) utterance, got {enc.shape}")
    dtype = p["embed"].dtype
    with no_grad():
        states = zero_state(p, (1,), dtype)
        out, states = pred_step(np.zeros(1, dtype=np.int64), states, p)
    beam = [Hypothesis((), 0.0, (), states, out.data[0])]
    for ti in range(enc.shape[0]):
        finished = {}
        live = beam
        for n in range(max_symbols + 1):
            pool = dict(finished)
            cands = []
            for hyp in live:
                lp = _joint_row(enc[ti].astype(dtype), hyp.pred_out, p)
                done = Hypothesis(hyp.tokens, hyp.score + lp[BLANK], hyp.times, hyp.states,
                                  hyp.pred_out)
                if done.tokens not in pool or pool[done.tokens].score < done.score:
                    pool[done.tokens] = done
                if n < max_symbols:
                    for k in range(1, lp.shape[0]):
                        cands.append((hyp, k, hyp.score + lp[k]))
            ranked = sorted(
                [(h.key(), "f", h) for h in pool.values()]
                + [((-s, hyp.tokens + (k,)), "l", (hyp, k, s)) for hyp, k, s in cands],
                key=lambda item: item[0])[:beam_width]
            finished = {h.tokens: h for _, kind, h in ranked if kind == "f"}
            live = []
            for _, kind, item in ranked:
                if kind != "l":
                    continue
                hyp, k, s = item
                out, st = _pred_advance(p, k, hyp.states)
                live.append(Hypothesis(hyp.tokens + (k,), s, hyp.times + (ti,), st, out))
            if not live:
                break
        beam = sorted(finished.values(), key=Hypothesis.key)[:beam_width]
    best = beam[0]
    return list(best.tokens), list(best.times), float(best.score)
