"""Forward-pass latency vs. batch size, peak tensor memory, and parameter accounting.

Timed regions contain only the forward call; inputs are built beforehand.
Peak memory comes from the counting allocator (tensor buffers), plus the
static parameter and input bytes. A run that exceeds an allocator cap becomes
a ``capacity`` record instead of an exception.
"""
from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from avsk import nn
from avsk.autodiff import Tensor, no_grad, track_allocations
from avsk.config import ConformerConfig, FrontEndConfig
from avsk.conformer import count_encoder_params, encode, init_encoder
from avsk.errors import CapacityError, ContractError, InputError
from avsk.frontends import count_params, frontend_forward, init_frontend

GIB = 2 ** 30
MIN_TRIALS = 5
MIN_WARMUP = 2
CSV_FIELDS = ["arch", "batch", "wall_ns", "relative", "peak_bytes", "params", "bytes_per_param",
              "status"]


@dataclass
class BenchRecord:
    arch: str
    batch: int
    wall_ns: int
    trials: int
    peak_bytes: int
    params: int
    status: str = "ok"  # or "capacity"

    def __post_init__(self):
        if self.trials < MIN_TRIALS:
            raise ContractError(f"need at least {MIN_TRIALS} trials, got {self.trials}")
        if self.status == "ok" and self.wall_ns <= 0:
            raise ContractError("wall time must be positive")


@dataclass
class LatencyCurve:
    arch: str
    batches: list = field(default_factory=list)
    relative: list = field(default_factory=list)

    def at(self, batch):
        return self.relative[self.batches.index(batch)]


def bytes_per_param(memory_bytes, params):
    if params <= 0:
        raise ContractError("parameter count must be positive")
    return memory_bytes / params


@dataclass
class BenchModel:
    """A forward function with its parameters and an input factory."""

    arch: str
    params: dict
    forward: object
    input_shape: tuple  # per-example shape
    n_params: int
    dtype: object = np.float32

    def make_input(self, batch, seed=0):
        rng = np.random.default_rng(seed)
        return Tensor(rng.random((batch,) + tuple(self.input_shape)).astype(self.dtype))


def build_model(arch, cfg, seq_len=16, dtype=np.float32, seed=0):
    """Bench wrapper for a front-end config or for a Conformer config (on LP features)."""
    rng = np.random.default_rng(seed)
    if isinstance(cfg, FrontEndConfig):
        params = init_frontend(cfg, rng, dtype)
        h, w = cfg.input_hw
        n = count_params(cfg)
        return BenchModel(arch, params, lambda x: frontend_forward(x, cfg, params),
                          (seq_len, h, w, cfg.channels), n, dtype)
    if isinstance(cfg, ConformerConfig):
        params = init_encoder(cfg, rng, dtype)
        return BenchModel(arch, params, lambda x: encode(x, cfg, params),
                          (seq_len, cfg.model_dim), count_encoder_params(cfg), dtype)
    raise ContractError(f"cannot benchmark {type(cfg).__name__}")


def _static_bytes(model, x):
    return sum(t.data.nbytes for t in nn.flatten(model.params).values()) + x.data.nbytes


def time_forward(model, batch_size, trials=MIN_TRIALS, warmup=MIN_WARMUP, cap_bytes=None):
    """Median forward wall time over ``trials`` runs after ``warmup`` discarded runs."""
    if trials < MIN_TRIALS:
        raise ContractError(f"need at least {MIN_TRIALS} trials, got {trials}")
    if warmup < 1:
        raise ContractError("need at least one warmup run")
    x = model.make_input(batch_size)
    static = _static_bytes(model, x)
    budget = None if cap_bytes is None else cap_bytes - static
    times = []
    peak = 0
    try:
        if budget is not None and budget < 0:
            raise CapacityError(f"parameters and input alone exceed cap {cap_bytes}")
        with no_grad():
            for i in range(warmup + trials):
                with track_allocations(budget) as tracker:
                    t0 = time.perf_counter_ns()
                    model.forward(x)
                    dt = time.perf_counter_ns() - t0
                peak = max(peak, tracker.peak_bytes)
                if i >= warmup:
                    times.append(dt)
    except CapacityError:
        return BenchRecord(model.arch, batch_size, 0, trials, int(cap_bytes), model.n_params,
                           "capacity")
    wall = max(1, int(statistics.median(times)))
    return BenchRecord(model.arch, batch_size, wall, trials, int(static + peak), model.n_params)


def relative_latency_curve(records):
    """Amortised per-example latency normalised to batch 1: (wall(b)/b)/wall(1)."""
    ok = sorted((r for r in records if r.status == "ok"), key=lambda r: r.batch)
    base = [r for r in ok if r.batch == 1]
    if not base:
        raise InputError("relative latency needs a batch-1 record")
    w1 = base[0].wall_ns
    arch = base[0].arch
    return LatencyCurve(arch, [r.batch for r in ok], [(r.wall_ns / r.batch) / w1 for r in ok])


@dataclass
class BenchReport:
    records: list
    curves: dict

    def csv(self):
        return render_csv(self.records)

    def text(self):
        return render_text(self.records)


def compare_frontends(configs, batches=(1, 2, 4, 8), trials=MIN_TRIALS, warmup=MIN_WARMUP,
                      seq_len=16, cap_bytes=None):
    """Benchmark every ``arch -> config`` entry over ``batches`` (run sequentially)."""
    if 1 not in batches:
        raise InputError("batch grid must include 1")
    records = []
    for arch in sorted(configs):
        model = build_model(arch, configs[arch], seq_len)
        for b in sorted(batches):
            records.append(time_forward(model, b, trials, warmup, cap_bytes))
    return report_from_records(records)


def report_from_records(records):
    records = sorted(records, key=lambda r: (r.arch, r.batch))
    curves = {}
    for arch in sorted({r.arch for r in records}):
        rows = [r for r in records if r.arch == arch]
        if any(r.batch == 1 and r.status == "ok" for r in rows):
            curves[arch] = relative_latency_curve(rows)
    return BenchReport(records, curves)


def _relative_lookup(records):
    rel = {}
    report_curves = report_from_records(records).curves
    for arch, curve in report_curves.items():
        for b, v in zip(curve.batches, curve.relative):
            rel[(arch, b)] = v
    return rel


def _rows(records):
    rel = _relative_lookup(records)
    for r in sorted(records, key=lambda r: (r.arch, r.batch)):
        ok = r.status == "ok"
        rv = rel.get((r.arch, r.batch))
        yield [r.arch, str(r.batch), str(r.wall_ns) if ok else "",
               "" if rv is None else f"{rv:.6f}", str(r.peak_bytes), str(r.params),
               f"{bytes_per_param(r.peak_bytes, r.params):.3f}" if r.params else "",
               r.status]


def render_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for row in _rows(records):
        w.writerow(row)
    return buf.getvalue()


def render_text(records):
    rows = [CSV_FIELDS] + list(_rows(records))
    widths = [max(len(row[i]) for row in rows) for i in range(len(CSV_FIELDS))]
    lines = ["  ".join(cell.rjust(wd) for cell, wd in zip(row, widths)).rstrip() for row in rows]
    lines.append("")
    lines.append("batch-size scaling is recorded, not asserted; orderings at the largest batch:")
    rel = _relative_lookup(records)
    top = max((r.batch for r in records), default=1)
    ranked = sorted((v, a) for (a, b), v in rel.items() if b == top)
    if ranked:
        lines.append("  " + " < ".join(f"{a} ({v:.3f})" for v, a in ranked))
    else:
        lines.append("  (no completed runs at that batch size)")
    return "\n".join(lines) + "\n"


def save_records(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in sorted(records, key=lambda r: (r.arch, r.batch)):
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def load_records(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(BenchRecord(**json.loads(line)))
    return out


def default_configs(kinds=("lp", "vit", "vgg21d", "conformer"), input_hw=(16, 16), dim=64):
    out = {}
    for kind in kinds:
        if kind == "conformer":
            out[kind] = ConformerConfig(depth=2, model_dim=dim)
        elif kind in ("lp", "vit", "vgg21d"):
            out[kind] = FrontEndConfig(kind=kind, input_hw=tuple(input_hw), out_dim=dim)
        else:
            raise ContractError(f"unknown architecture {kind!r}")
    return out
