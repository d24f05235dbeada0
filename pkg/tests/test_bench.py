import csv
import statistics

import numpy as np
import pytest

from spadvae.bench import PHASES, render_timing_csv, time_phases, write_raw_samples


@pytest.fixture(scope="module")
def report(tiny_ckpt):
    return time_phases(tiny_ckpt, (1, 2, 4), n_runs=5, warmup_runs=1)


def test_report_structure(report):
    assert len(report.cells) == 5 * 3
    for c in report.rows():
        assert c.n_runs == 5
        assert c.mean >= 0 and c.std >= 0
    assert [c.phase for c in report.rows()[:3]] == ["encoder"] * 3
    assert report.label == "serial"


def test_stats_recomputed_from_samples(report):
    for c in report.rows():
        assert abs(c.mean - statistics.fmean(c.samples_ms)) < 1e-9
        assert abs(c.std - np.std(c.samples_ms, ddof=1)) < 1e-9


def test_single_run_has_zero_std(tiny_ckpt):
    r = time_phases(tiny_ckpt, (2,), n_runs=1, warmup_runs=0)
    assert all(c.std == 0.0 for c in r.rows())


def test_bad_batch_sizes(tiny_ckpt):
    with pytest.raises(ValueError):
        time_phases(tiny_ckpt, (0, 4), n_runs=1)
    with pytest.raises(ValueError):
        time_phases(tiny_ckpt, (), n_runs=1)


def test_csv_rows_and_order(tmp_path, tiny_ckpt):
    batches = (1, 2, 4, 8, 16, 32, 64)
    r = time_phases(tiny_ckpt, batches[::-1], n_runs=2, warmup_runs=0)
    render_timing_csv(r, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["phase", "batch_size", "mean_ms_per_frame", "std_ms_per_frame", "n_runs"]
    assert len(rows) == 36
    assert [(row[0], int(row[1])) for row in rows[1:]] == [(p, b) for p in PHASES for b in batches]
    for row in rows[1:]:
        assert len(row[2].split(".")[1]) == 4
        c = r.cell(row[0], int(row[1]))
        assert float(row[2]) == pytest.approx(c.mean, abs=5e-5)


def test_raw_dump(tmp_path, report):
    write_raw_samples(report, tmp_path / "raw.csv")
    rows = list(csv.reader(open(tmp_path / "raw.csv")))
    assert rows[0] == ["phase", "batch_size", "run_index", "ms"]
    assert len(rows) == 1 + 15 * 5
    first = report.cell("encoder", 1).samples_ms[0]
    assert float(rows[1][3]) == first


def test_parallel_label(tiny_ckpt):
    assert time_phases(tiny_ckpt, (1,), n_runs=1, warmup_runs=0, parallel=True).label == "parallel"
