import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spadvae.anomaly import (
    ScoreSet,
    SelectionMode,
    Thresholds,
    calibrate,
    divergence_point,
    divergence_threshold,
    export_latent,
    max_threshold,
    per_count_report,
    percentile_threshold,
    read_pgm,
    score_frames,
    select,
    summed_image,
    write_image_csv,
    write_latent_csv,
    write_pgm,
    write_report_csv,
)
from spadvae.errors import ConfigMismatchError
from spadvae.vae import as_batch, bce_loss, encode, forward


def scores(bce, kld, count=None):
    bce = np.asarray(bce, float)
    return ScoreSet(bce, np.asarray(kld, float), np.zeros(len(bce), int) if count is None else np.asarray(count))


def th(kind="p98", bce=4.0, kld=3.0):
    return Thresholds({kind: {"bce": bce, "kld": kld}})


# -- scoring -------------------------------------------------------------------


def test_deterministic_scoring_repeats(tiny_ckpt, tiny_dataset):
    a = score_frames(tiny_ckpt, tiny_dataset.frames)
    b = score_frames(tiny_ckpt, tiny_dataset.frames)
    assert a.bce.tobytes() == b.bce.tobytes()
    assert a.kld.tobytes() == b.kld.tobytes()
    assert np.all(a.bce >= 0) and np.all(a.kld >= 0)
    # other batch sizes change BLAS blocking, so agreement is to rounding only
    c = score_frames(tiny_ckpt, tiny_dataset.frames, batch_size=7)
    np.testing.assert_allclose(c.bce, a.bce, rtol=1e-12)
    np.testing.assert_allclose(c.kld, a.kld, rtol=1e-10)


def test_scores_match_standalone_losses(tiny_ckpt, tiny_dataset):
    s = score_frames(tiny_ckpt, tiny_dataset.frames[:20])
    fp = forward(as_batch(tiny_dataset.frames[:20]), tiny_ckpt.params, tiny_ckpt.config)
    np.testing.assert_array_equal(s.bce, bce_loss(as_batch(tiny_dataset.frames[:20]), fp.recon))
    np.testing.assert_array_equal(s.count, tiny_dataset.frames[:20].reshape(20, -1).sum(1))


def test_sampled_scoring_is_seeded(tiny_ckpt, tiny_dataset):
    a = score_frames(tiny_ckpt, tiny_dataset.frames, seed=3)
    b = score_frames(tiny_ckpt, tiny_dataset.frames, seed=3)
    c = score_frames(tiny_ckpt, tiny_dataset.frames)
    assert a.bce.tobytes() == b.bce.tobytes()
    assert not np.array_equal(a.bce, c.bce)
    np.testing.assert_array_equal(a.kld, c.kld)  # KLD depends on encoder stats only


def test_config_mismatch(tiny_ckpt):
    with pytest.raises(ConfigMismatchError):
        score_frames(tiny_ckpt, np.zeros((2, 64, 64), np.uint8))
    with pytest.raises(ConfigMismatchError):
        export_latent(tiny_ckpt, np.zeros((2, 8, 8), np.uint8))


# -- thresholds ----------------------------------------------------------------


def test_percentile_examples():
    assert percentile_threshold(np.arange(1, 101)) == 98
    assert percentile_threshold([2.5] * 17) == 2.5
    assert percentile_threshold([7.0]) == 7.0
    # nearest rank is ceil(q N): q N = 98.0000...01 in floating point must still pick rank 98
    assert percentile_threshold(np.arange(1, 101), q=0.98) == 98
    with pytest.raises(ValueError):
        percentile_threshold([])
    with pytest.raises(ValueError):
        percentile_threshold([1.0], q=1.0)


def test_max_examples():
    assert max_threshold([3, 1, 2]) == 3
    assert max_threshold([-4.0]) == -4.0
    with pytest.raises(ValueError):
        max_threshold([])


def test_divergence_separated_tail(rng):
    bg = rng.uniform(0, 1, 5000)
    mixed = np.concatenate([bg, rng.uniform(2, 3, 1000)])
    t = divergence_threshold(bg, mixed)
    assert 1 < t <= 2
    assert not divergence_point(bg, mixed).fallback


def test_divergence_brute_force_agrees(rng):
    # independent scan: smallest b with every populated mixed bin >= b in excess
    bg = rng.gamma(2.0, 1.0, 3000)
    mixed = np.concatenate([rng.gamma(2.0, 1.0, 2000), rng.normal(9, 1, 600)])
    edges = np.linspace(min(bg.min(), mixed.min()), max(bg.max(), mixed.max()), 201)
    dbg = np.histogram(bg, edges, density=True)[0]
    dmx = np.histogram(mixed, edges, density=True)[0]
    ok = [b for b in range(200)
          if any(dmx[b:] > 0) and all(dmx[j] > dbg[j] for j in range(b, 200) if dmx[j] > 0)]
    assert divergence_threshold(bg, mixed) == pytest.approx(edges[min(ok)], abs=0)


def test_divergence_identical_sets_fall_back(rng):
    bg = rng.normal(size=1000)
    res = divergence_point(bg, bg.copy())
    assert res.fallback
    assert res.threshold == percentile_threshold(bg, 0.98)


def test_divergence_hand_histogram():
    t = divergence_threshold([0, 0, 0], [0, 0, 10])
    assert 0 < t <= 10
    assert t == pytest.approx(10 / 200)


def test_calibrate_writes_all_requested(rng):
    bg = scores(rng.gamma(2, 1, 2000), rng.gamma(1, 1, 2000))
    mixed = scores(np.concatenate([bg.bce, rng.normal(15, 1, 300)]),
                   np.concatenate([bg.kld, rng.normal(9, 1, 300)]))
    t = calibrate(bg, mixed=mixed, config_hash=123)
    for loss in ("bce", "kld"):
        assert t.get("p98", loss) <= t.get("max", loss)
        # the divergence cut is a bin edge and may sit just above the background maximum
        assert t.get("divergence", loss) > t.get("p98", loss)
    back = Thresholds.from_dict(t.to_dict())
    assert back.values == t.values and back.config_hash == 123
    assert set(calibrate(bg, kinds=["p98"]).values) == {"p98"}
    with pytest.raises(ValueError):
        calibrate(bg, kinds=["divergence"])


# -- selection -----------------------------------------------------------------


def test_select_examples():
    s = scores([1, 5], [2, 2])
    assert select(s, th(), SelectionMode.EITHER, "p98").tolist() == [False, True]
    assert select(s, th(), SelectionMode.KLD_ONLY, "p98").tolist() == [False, False]
    assert select(s, th(), "bce", "p98").tolist() == [False, True]


def test_max_self_selection_is_empty(rng):
    s = scores(rng.normal(size=500), rng.normal(size=500))
    t = calibrate(s, kinds=["max"])
    for mode in SelectionMode:
        assert not select(s, t, mode, "max").any()


def test_p98_self_selection_fraction(rng):
    s = scores(rng.normal(size=10_000), rng.normal(size=10_000))
    t = calibrate(s, kinds=["p98"])
    frac = select(s, t, "bce", "p98").mean()
    assert 0.018 <= frac <= 0.020


@settings(max_examples=60, deadline=None)
@given(
    bce=arrays(np.float64, 30, elements=st.floats(0, 100)),
    kld=arrays(np.float64, 30, elements=st.floats(0, 100)),
    tb=st.floats(0, 100),
    tk=st.floats(0, 100),
    bump=st.floats(0, 50),
)
def test_mode_algebra_and_threshold_monotonicity(bce, kld, tb, tk, bump):
    s = scores(bce, kld)
    t = th(bce=tb, kld=tk)
    either = select(s, t, "either", "p98")
    np.testing.assert_array_equal(either, select(s, t, "bce", "p98") | select(s, t, "kld", "p98"))
    higher = th(bce=tb + bump, kld=tk + bump)
    for mode in SelectionMode:
        assert select(s, higher, mode, "p98").sum() <= select(s, t, mode, "p98").sum()


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1000, 5000), seed=st.integers(0, 2**31))
def test_percentile_self_selection_property(n, seed):
    s = np.random.default_rng(seed).normal(size=n)
    frac = np.mean(s > percentile_threshold(s))
    assert 0.018 <= frac <= 0.02


# -- reports and images -----------------------------------------------------------


def test_report_percentages_known_counts(tmp_path):
    c = np.array([7] * 109 + [4] * 23396)
    mask = np.zeros(len(c), bool)
    mask[:95] = True
    mask[109 : 109 + 104] = True
    rep = per_count_report(c, mask)
    assert rep.row(7).percent_str == "87.16"
    assert rep.row(4).percent_str == "0.44"
    assert rep.row(5).frames == 0 and rep.row(5).percent_str == ""
    write_report_csv(tmp_path / "r.csv", rep)
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["count", "frames", "selected", "percent"]
    assert [r[0] for r in rows[1:]] == ["4", "5", "6", "7", "8", "9"]
    assert rows[2] == ["5", "0", "0", ""]


def test_report_conservation_and_errors(rng):
    c = rng.integers(0, 15, 2000)
    mask = rng.random(2000) < 0.3
    rep = per_count_report(c, mask, 4, 9)
    assert sum(r.frames for r in rep.rows) == np.sum((c >= 4) & (c <= 9))
    assert all(0 <= r.selected <= r.frames for r in rep.rows)
    with pytest.raises(ValueError):
        per_count_report(c, mask, 9, 4)
    with pytest.raises(ValueError):
        per_count_report(c, mask[:10])


def test_report_accepts_frames(tiny_dataset):
    f = tiny_dataset.frames
    mask = np.ones(len(f), bool)
    a = per_count_report(f, mask)
    b = per_count_report(f.reshape(len(f), -1).sum(1), mask)
    assert [vars(r) for r in a.rows] == [vars(r) for r in b.rows]


def test_summed_image_examples(rng):
    f = (rng.random((1, 4, 4)) < 0.5).astype(np.uint8)
    sel, unsel = summed_image(f, [True])
    np.testing.assert_array_equal(sel, f[0])
    assert not unsel.any()
    twin = np.stack([f[0], f[0]])
    a, b = summed_image(twin, [True, False])
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        summed_image(twin, [True])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(0, 50))
def test_summed_image_conservation(seed, n):
    r = np.random.default_rng(seed)
    f = (r.random((n, 6, 5)) < 0.4).astype(np.uint8)
    mask = r.random(n) < 0.5
    sel, unsel = summed_image(f, mask)
    assert np.array_equal(sel + unsel, f.astype(np.int64).sum(axis=0))


def test_pgm_and_csv(tmp_path):
    img = np.array([[0, 300], [70000 // 2, 12]])
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n35000\n")
    assert raw[-2:] == (12).to_bytes(2, "big")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)
    write_pgm(tmp_path / "z.pgm", np.zeros((2, 3), int))
    assert (tmp_path / "z.pgm").read_bytes().startswith(b"P5\n3 2\n1\n")
    write_image_csv(tmp_path / "a.csv", img)
    assert (tmp_path / "a.csv").read_text() == "0,300\n35000,12\n"


# -- latent export ----------------------------------------------------------------


def test_latent_export_shape_and_consistency(tmp_path, tiny_ckpt, tiny_dataset):
    f = tiny_dataset.frames[:30]
    f = np.concatenate([f, f[:1]])
    mask = np.arange(31) % 2 == 0
    t = export_latent(tiny_ckpt, f, mask, tiny_dataset.labels[:31])
    d = tiny_ckpt.config.latent_dim
    assert len(t.header) == d + 3 and len(t) == 31
    np.testing.assert_array_equal(t.mu[0], t.mu[30])
    mu = encode(as_batch(f[5:6]), tiny_ckpt.params, tiny_ckpt.config).mu[0]
    assert mu.tobytes() == t.mu[5].tobytes()
    write_latent_csv(tmp_path / "l.csv", t)
    rows = list(csv.reader(open(tmp_path / "l.csv")))
    assert rows[0][:2] == ["mu_0", "mu_1"] and rows[0][-3:] == ["count", "selected", "label"]
    assert len(rows) == 32 and all(len(r) == d + 3 for r in rows)
    assert np.array_equal(np.array(rows[6][:d], float), t.mu[5])
    wide = export_latent(tiny_ckpt, f, with_logvar=True)
    assert len(wide.header) == 2 * d + 3
