"""Per-phase inference latency over a range of batch sizes."""

import contextlib
import csv
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .seeding import rng_for
from .vae import _decode, _encode, as_batch, bce_loss, cast_params, check_params, kld_loss

PHASES = ("encoder", "decoder", "kld", "bce", "total")
DEFAULT_BATCHES = (1, 2, 4, 8, 16, 32, 64)
TIMER_RESOLUTION_LIMIT = 1e-6


@dataclass
class TimingCell:
    phase: str
    batch_size: int
    samples_ms: list

    @property
    def n_runs(self):
        return len(self.samples_ms)

    @property
    def mean(self):
        return statistics.fmean(self.samples_ms)

    @property
    def std(self):
        if self.n_runs < 2:
            return 0.0
        return statistics.stdev(self.samples_ms)

    @property
    def median(self):
        return statistics.median(self.samples_ms)


@dataclass
class TimingReport:
    """Per-frame wall time in milliseconds for every (phase, batch size)."""

    cells: dict = field(default_factory=dict)
    batch_sizes: tuple = ()
    n_runs: int = 0
    label: str = "serial"
    warnings: list = field(default_factory=list)

    def cell(self, phase, batch_size):
        return self.cells[(phase, batch_size)]

    def rows(self):
        """Cells in phase-major, batch-ascending order."""
        return [self.cells[(p, b)] for p in PHASES for b in sorted(self.batch_sizes)]


def _sample_batch(batch_size, config, seed, density=2e-3):
    rng = rng_for(seed, f"bench/batch/{batch_size}")
    shape = (batch_size, config.input_height, config.input_width)
    return (rng.random(shape) < density).astype(np.uint8)


def _time(fn, n_runs, warmup_runs, batch_size):
    for _ in range(warmup_runs):
        fn()
    out = []
    for _ in range(n_runs):
        t0 = time.perf_counter_ns()
        fn()
        out.append((time.perf_counter_ns() - t0) / 1e6 / batch_size)
    return out


def _thread_limit(parallel):
    if parallel:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def time_phases(ckpt, batch_sizes=DEFAULT_BATCHES, n_runs=1000, warmup_runs=10, seed=0,
                dtype=np.float32, parallel=False):
    """Time encoder, decoder, KLD, BCE and the full scoring pass per batch size.

    Each phase is timed on its own; ``total`` runs encode, decode and both
    losses end to end.  By default BLAS is held to one thread; ``parallel``
    lifts that and labels the report accordingly.
    """
    batch_sizes = tuple(int(b) for b in batch_sizes)
    if not batch_sizes:
        raise ValueError("need at least one batch size")
    if min(batch_sizes) < 1:
        raise ValueError("batch sizes must be >= 1")
    if n_runs < 1 or warmup_runs < 0:
        raise ValueError("n_runs must be >= 1 and warmup_runs >= 0")
    cfg = ckpt.config
    params = cast_params(ckpt.params, dtype)
    check_params(params, cfg)
    report = TimingReport(batch_sizes=batch_sizes, n_runs=n_runs,
                          label="parallel" if parallel else "serial")
    res = time.get_clock_info("perf_counter").resolution
    if res > TIMER_RESOLUTION_LIMIT:
        report.warnings.append(f"timer resolution {res:g} s is coarser than 1 us")

    with _thread_limit(parallel):
        for b in batch_sizes:
            x = as_batch(_sample_batch(b, cfg, seed), dtype)
            stats = _encode(x, params, cfg, None)
            recon = _decode(stats.mu, params, cfg, None)

            def total():
                s = _encode(x, params, cfg, None)
                r = _decode(s.mu, params, cfg, None)
                return bce_loss(x, r), kld_loss(s)

            phases = {
                "encoder": lambda: _encode(x, params, cfg, None),
                "decoder": lambda: _decode(stats.mu, params, cfg, None),
                "kld": lambda: kld_loss(stats),
                "bce": lambda: bce_loss(x, recon),
                "total": total,
            }
            for p in PHASES:
                report.cells[(p, b)] = TimingCell(p, b, _time(phases[p], n_runs, warmup_runs, b))
    return report


def render_timing_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "batch_size", "mean_ms_per_frame", "std_ms_per_frame", "n_runs"])
        for c in report.rows():
            w.writerow([c.phase, c.batch_size, f"{c.mean:.4f}", f"{c.std:.4f}", c.n_runs])


def write_raw_samples(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "batch_size", "run_index", "ms"])
        for c in report.rows():
            for i, ms in enumerate(c.samples_ms):
                w.writerow([c.phase, c.batch_size, i, repr(ms)])
