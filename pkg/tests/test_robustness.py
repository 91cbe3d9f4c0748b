import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avsk.errors import ContractError, InputError
from avsk.robustness import (SUITES, DropSpec, WerTable, check_test_time_robustness,
                             check_train_time_robustness, half_width, make_drop_mask, n_dropped,
                             read_tables, run_robustness_eval, suite_masks, write_tables)
from avsk.synth import synth_generate


# -- masks -------------------------------------------------------------------------------------


def test_start_drop_example():
    keep = make_drop_mask(10, DropSpec("start", 0.5))
    assert keep.tolist() == [False] * 5 + [True] * 5


def test_middle_drop_example():
    keep = make_drop_mask(10, DropSpec("middle", 0.4))
    assert np.flatnonzero(~keep).tolist() == [3, 4, 5, 6]
    # odd slack: the block leans left
    assert np.flatnonzero(~make_drop_mask(5, DropSpec("middle", 0.4))).tolist() == [1, 2]


def test_end_drop():
    keep = make_drop_mask(8, DropSpec("end", 0.25))
    assert np.flatnonzero(~keep).tolist() == [6, 7]


@pytest.mark.parametrize("t", [1, 3, 17])
def test_utterance_full_drop(t):
    for seed in range(5):
        assert not make_drop_mask(t, DropSpec("utterance", 1.0, seed)).any()


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.floats(0, 1), st.sampled_from(["start", "middle", "end"]),
       st.integers(0, 5))
def test_contiguous_drop_counts(t, p, suite, seed):
    keep = make_drop_mask(t, DropSpec(suite, p, seed))
    k = n_dropped(t, p)
    assert (~keep).sum() == k == int(math.floor(p * t + 0.5))
    gone = np.flatnonzero(~keep)
    if k:
        assert gone[-1] - gone[0] == k - 1


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.sampled_from(SUITES), st.integers(0, 100))
def test_extreme_fractions(t, suite, seed):
    assert make_drop_mask(t, DropSpec(suite, 0.0, seed)).all()
    assert not make_drop_mask(t, DropSpec(suite, 1.0, seed)).any()


@pytest.mark.parametrize("suite", SUITES)
def test_masks_deterministic(suite):
    a = make_drop_mask(30, DropSpec(suite, 0.5, 9))
    b = make_drop_mask(30, DropSpec(suite, 0.5, 9))
    assert np.array_equal(a, b)


def test_frame_drop_rate_is_binomial():
    keep = make_drop_mask(20000, DropSpec("frame", 0.3, 1))
    dropped = (~keep).sum()
    assert abs(dropped - 6000) < 4 * math.sqrt(20000 * 0.3 * 0.7)


def test_utterance_drop_rate_is_binomial():
    hits = sum(not make_drop_mask(4, DropSpec("utterance", 0.5), np.random.default_rng([i])).any()
               for i in range(4000))
    assert abs(hits - 2000) < 4 * math.sqrt(1000)


def test_drop_spec_validation():
    with pytest.raises(ContractError):
        DropSpec("sideways", 0.5)
    with pytest.raises(ContractError):
        DropSpec("start", 1.5)
    with pytest.raises(ContractError):
        make_drop_mask(0, DropSpec("start", 0.5))


def test_suite_masks_use_per_clip_streams():
    data = synth_generate(0, 6)
    masks = suite_masks(data, DropSpec("frame", 0.5, 3))
    assert [len(m) for m in masks] == [ex.video.n_frames for ex in data]
    again = suite_masks(data, DropSpec("frame", 0.5, 3))
    assert all(np.array_equal(a, b) for a, b in zip(masks, again))


# -- checks ------------------------------------------------------------------------------------


def table(wers, fractions=None, cis=None, model="AV"):
    fractions = fractions or [i / max(1, len(wers) - 1) for i in range(len(wers))]
    return WerTable.from_lists("frame", fractions, wers, cis, model)


def test_train_time_examples():
    assert check_train_time_robustness(table([5, 6, 7]), table([7, 7, 7])).robust
    v = check_train_time_robustness(table([5, 8]), table([7, 7]))
    assert not v.robust and len(v.violations) == 1 and "point 2" in v.violations[0]
    assert check_train_time_robustness(table([7.1], [0.0], [0.2]),
                                       table([7.0], [0.0], [0.2])).robust


def test_train_time_mismatched_points():
    with pytest.raises(InputError):
        check_train_time_robustness(table([1, 2], [0, 1]), table([1, 2], [0, 0.5]))


def test_test_time_examples():
    assert check_test_time_robustness(table([2, 3, 5, 9], [0, .25, .5, 1])).robust
    v = check_test_time_robustness(table([2, 5, 4], [0, .5, 1]))
    assert not v.robust and v.violations == ["p=0.5 -> p=1: 5.0000 > 4.0000"]
    assert check_test_time_robustness(table([2.0, 1.9], [0, 1], [0.3, 0.3])).robust


def test_unsorted_table_rejected():
    with pytest.raises(InputError):
        table([1, 2], [0.5, 0.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=6))
def test_checks_are_pure_and_consistent(wers):
    t = table(wers)
    first = check_test_time_robustness(t)
    assert first == check_test_time_robustness(t)
    assert first.robust == all(a <= b for a, b in zip(wers, wers[1:]))
    assert check_train_time_robustness(t, t).robust


def test_half_width():
    assert half_width([0.3]) == 0.0
    assert half_width([1.0, 2.0, 3.0]) == pytest.approx(1.96 * 1.0 / math.sqrt(3))


# -- evaluation driver -------------------------------------------------------------------------


class KeptShareModel:
    """Deletes one token per clip when under half of its frames survive; seed adds noise."""

    def __init__(self):
        self.calls = 0

    def transcribe(self, dataset, masks, seed):
        self.calls += 1
        out = []
        for i, ex in enumerate(dataset):
            keep = np.ones(ex.video.n_frames, bool) if masks is None else masks[i]
            toks = list(ex.transcript)
            if keep.mean() < 0.5:
                toks = toks[:-1]
            if (seed + i) % 7 == 0 and keep.mean() < 1.0:
                toks = toks + [0]
            out.append(toks)
        return out


def test_run_eval_contract():
    from avsk.metrics import corpus_wer
    data = synth_generate(1, 12)
    model = KeptShareModel()
    tables = run_robustness_eval(model, data, seeds=(0, 1, 2))
    assert [t.suite for t in tables] == list(SUITES)
    clean = corpus_wer([ex.transcript for ex in data], model.transcribe(data, None, 0))
    for t in tables:
        assert t.rows[0].fraction == 0.0 and t.rows[0].wer == clean and t.rows[0].ci == 0.0
    last = {(t.rows[-1].wer, t.rows[-1].ci) for t in tables}
    assert len(last) == 1
    # p=0 and p=1 masks coincide across suites, so those evaluations are shared
    assert model.calls - 1 < len(SUITES) * 5 * 3
    assert all(check_test_time_robustness(t).robust for t in tables)


def test_run_eval_long_clips():
    data = synth_generate(2, 3, min_len=80, max_len=90)
    assert data[0].video.n_frames > 255
    tables = run_robustness_eval(KeptShareModel(), data, suites=("frame",), seeds=(0,))
    assert len(tables[0].rows) == 5


def test_run_eval_empty():
    with pytest.raises(ContractError):
        run_robustness_eval(KeptShareModel(), [])


def test_tables_csv_roundtrip(tmp_path):
    av = WerTable.from_lists("start", [0, 0.5, 1], [0.1, 0.2, 0.4], [0.01, 0, 0.02])
    ao = WerTable.from_lists("start", [0, 0.5, 1], [0.3, 0.3, 0.3], model="AO")
    write_tables(tmp_path / "t.csv", [av, ao])
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "suite,fraction,model,wer,ci"
    back = read_tables(tmp_path / "t.csv")
    assert back[("start", "AV")].wers == [0.1, 0.2, 0.4]
    assert back[("start", "AO")].rows[1].ci == 0.0
