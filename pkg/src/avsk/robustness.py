"""Missing-video test suites and the train-time / test-time robustness checks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from avsk.errors import ContractError, InputError
from avsk.metrics import corpus_wer

SUITES = ("utterance", "frame", "start", "middle", "end")
DEFAULT_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class DropSpec:
    suite: str
    fraction: float
    seed: int = 0

    def __post_init__(self):
        if self.suite not in SUITES:
            raise ContractError(f"unknown suite {self.suite!r}; expected one of {SUITES}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ContractError(f"drop fraction must lie in [0, 1], got {self.fraction}")


def n_dropped(t, p):
    """round(p*T) with halves rounded up."""
    return int(math.floor(p * t + 0.5))


def make_drop_mask(t, spec, rng=None):
    """Boolean keep-mask of length ``t`` (False = frame dropped).

    ``rng`` overrides the generator derived from ``spec.seed``; the two
    Bernoulli suites draw from it, the contiguous suites are deterministic.
    """
    if t < 1:
        raise ContractError("clip must have at least one frame")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    keep = np.ones(t, dtype=bool)
    p = spec.fraction
    if spec.suite == "utterance":
        if rng.random() < p:
            keep[:] = False
    elif spec.suite == "frame":
        keep = rng.random(t) >= p
    else:
        k = n_dropped(t, p)
        if spec.suite == "start":
            keep[:k] = False
        elif spec.suite == "end":
            keep[t - k:] = False
        else:
            a = (t - k) // 2
            keep[a:a + k] = False
    return keep


@dataclass
class WerRow:
    fraction: float
    model: str
    wer: float
    ci: float


@dataclass
class WerTable:
    suite: str
    rows: list = field(default_factory=list)

    def __post_init__(self):
        fr = [r.fraction for r in self.rows]
        if fr != sorted(fr):
            raise InputError(f"{self.suite}: fractions must be sorted ascending")
        if any(r.wer < 0 for r in self.rows):
            raise InputError(f"{self.suite}: negative WER")

    @classmethod
    def from_lists(cls, suite, fractions, wers, cis=None, model="AV"):
        cis = [0.0] * len(wers) if cis is None else cis
        return cls(suite, [WerRow(p, model, w, c) for p, w, c in zip(fractions, wers, cis)])

    @property
    def fractions(self):
        return [r.fraction for r in self.rows]

    @property
    def wers(self):
        return [r.wer for r in self.rows]


@dataclass
class Verdict:
    robust: bool
    violations: list = field(default_factory=list)

    def describe(self):
        if self.robust:
            return "PASS"
        return "FAIL " + "; ".join(self.violations)


def check_train_time_robustness(av, ao):
    """AV must not be worse than its audio-only twin at any test point,
    allowing the sum of both confidence half-widths as slack."""
    if av.fractions != ao.fractions:
        raise InputError("tables cover different test points")
    bad = []
    for k, (a, o) in enumerate(zip(av.rows, ao.rows)):
        if a.wer > o.wer + a.ci + o.ci:
            bad.append(f"p={a.fraction:g} (point {k + 1}): AV {a.wer:.4f} > AO {o.wer:.4f}")
    return Verdict(not bad, bad)


def check_test_time_robustness(av):
    """WER must not decrease as more video is dropped, up to combined half-widths."""
    fr = av.fractions
    if fr != sorted(fr):
        raise InputError("fractions must be sorted ascending")
    bad = []
    rows = av.rows
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            a, b = rows[i], rows[j]
            if a.wer > b.wer + a.ci + b.ci:
                bad.append(f"p={a.fraction:g} -> p={b.fraction:g}: {a.wer:.4f} > {b.wer:.4f}")
    return Verdict(not bad, bad)


def half_width(values):
    """1.96 standard errors of the mean (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


def suite_masks(dataset, spec):
    """Keep-masks for every clip; clip ``i`` draws from its own derived generator."""
    suite_id = SUITES.index(spec.suite)
    return [make_drop_mask(ex.video.n_frames, spec,
                           np.random.default_rng([spec.seed, i, suite_id]))
            for i, ex in enumerate(dataset)]


def run_robustness_eval(model, dataset, suites=SUITES, fractions=DEFAULT_FRACTIONS,
                        seeds=(0, 1, 2), tag="AV"):
    """WER tables (one per suite) for ``model`` under each drop condition.

    ``model.transcribe(dataset, masks, seed)`` must return token lists; the
    seed drives any evaluation-time noise and is shared across suites so
    identical masks give identical results.
    """
    dataset = list(dataset)
    if not dataset:
        raise ContractError("empty evaluation set")
    fractions = sorted(fractions)
    refs = [list(ex.transcript) for ex in dataset]
    cache = {}
    tables = []
    for suite in suites:
        rows = []
        for p in fractions:
            wers = []
            for seed in seeds:
                masks = suite_masks(dataset, DropSpec(suite, p, seed))
                key = (seed, b"".join(len(m).to_bytes(4, "little") + np.packbits(m).tobytes()
                                      for m in masks))
                if key not in cache:
                    cache[key] = corpus_wer(refs, model.transcribe(dataset, masks, seed))
                wers.append(cache[key])
            rows.append(WerRow(p, tag, float(np.mean(wers)), half_width(wers)))
        tables.append(WerTable(suite, rows))
    return tables


def write_tables(path, tables):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["suite", "fraction", "model", "wer", "ci"])
        for t in tables:
            for r in t.rows:
                w.writerow([t.suite, f"{r.fraction:g}", r.model, f"{r.wer:.6f}", f"{r.ci:.6f}"])


def read_tables(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    grouped = {}
    for r in rows:
        key = (r["suite"], r["model"])
        grouped.setdefault(key, []).append(
            WerRow(float(r["fraction"]), r["model"], float(r["wer"]), float(r["ci"])))
    return {key: WerTable(key[0], sorted(v, key=lambda row: row.fraction))
            for key, v in grouped.items()}
