"""Loss-based anomaly scoring, threshold calibration and frame selection.

Scores are the per-frame BCE and KLD sums of a trained VAE (no beta weight).
Thresholds are calibrated on background scores; a frame is selected when a
score is strictly greater than its threshold.
"""

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .datagen import counts as frame_counts
from .errors import ConfigMismatchError
from .vae import as_batch, cast_params, encode, forward
from .seeding import rng_for

LOSSES = ("bce", "kld")
THRESHOLD_KINDS = ("divergence", "p98", "max")


class SelectionMode(str, enum.Enum):
    BCE_ONLY = "bce"
    KLD_ONLY = "kld"
    EITHER = "either"


@dataclass
class ScoreSet:
    bce: np.ndarray
    kld: np.ndarray
    count: np.ndarray
    label: np.ndarray = None

    def __post_init__(self):
        n = len(self.bce)
        if len(self.kld) != n or len(self.count) != n:
            raise ValueError("score arrays must have equal length")
        if self.label is not None and len(self.label) != n:
            raise ValueError("label array length differs from scores")

    def __len__(self):
        return len(self.bce)

    def subset(self, idx):
        label = None if self.label is None else self.label[idx]
        return ScoreSet(self.bce[idx], self.kld[idx], self.count[idx], label)

    def loss(self, name):
        return {"bce": self.bce, "kld": self.kld}[name]


def _check_config(ckpt, frames):
    cfg = ckpt.config
    shape = np.shape(frames)[-2:]
    if shape != (cfg.input_height, cfg.input_width):
        raise ConfigMismatchError(
            f"frames are {shape[0]}x{shape[1]} but the model expects "
            f"{cfg.input_height}x{cfg.input_width}"
        )


def score_frames(ckpt, frames, seed=None, labels=None, batch_size=512, dtype=np.float64):
    """Per-frame BCE and KLD under ``ckpt``.

    ``seed=None`` scores deterministically (z = mu); otherwise z is sampled
    from a stream derived from ``seed``.
    """
    frames = np.asarray(frames)
    _check_config(ckpt, frames)
    cfg = ckpt.config
    params = cast_params(ckpt.params, dtype)
    rng = None if seed is None else rng_for(seed, "score/noise")
    bce = np.empty(len(frames))
    kld = np.empty(len(frames))
    for a in range(0, len(frames), batch_size):
        x = as_batch(frames[a : a + batch_size], dtype)
        eps = None if rng is None else rng.standard_normal((len(x), cfg.latent_dim)).astype(dtype)
        fp = forward(x, params, cfg, eps=eps)
        bce[a : a + len(x)] = fp.losses.bce
        kld[a : a + len(x)] = fp.losses.kld
    return ScoreSet(bce, kld, frame_counts(frames), None if labels is None else np.asarray(labels))


def _nonempty(scores, what="scores"):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError(f"{what} must be non-empty")
    return scores


def percentile_threshold(bg_scores, q=0.98):
    """Nearest-rank percentile: the ``ceil(q * N)``-th smallest score."""
    s = np.sort(_nonempty(bg_scores))
    if not 0 < q < 1:
        raise ValueError("q must be in (0, 1)")
    rank = max(1, math.ceil(round(q * len(s), 9)))
    return float(s[rank - 1])


def max_threshold(bg_scores):
    return float(np.max(_nonempty(bg_scores)))


@dataclass
class DivergenceResult:
    threshold: float
    fallback: bool
    bin_index: int = None


def divergence_point(bg_scores, mixed_scores, bins=200):
    """Where the mixed-sample score density starts to exceed background for good.

    Both samples are histogrammed on shared equal-width bins over the pooled
    range and normalised to unit area.  The threshold is the lower edge of the
    smallest bin ``b`` such that every bin ``j >= b`` holding mixed entries has
    mixed density strictly above background density (at least one such bin
    must exist).  Without one, falls back to the background 98th percentile.
    """
    bg = _nonempty(bg_scores, "background scores")
    mixed = _nonempty(mixed_scores, "mixed scores")
    lo = min(bg.min(), mixed.min())
    hi = max(bg.max(), mixed.max())
    if lo == hi:
        return DivergenceResult(percentile_threshold(bg, 0.98), True)
    edges = np.linspace(lo, hi, bins + 1)
    h_bg, _ = np.histogram(bg, edges)
    h_mx, _ = np.histogram(mixed, edges)
    # density_mx > density_bg  <=>  h_mx * N_bg > h_bg * N_mx  (equal widths)
    exceeds = h_mx * len(bg) > h_bg * len(mixed)
    start = None
    for j in range(bins - 1, -1, -1):
        if h_mx[j] == 0:
            if start is not None:
                start = j
            continue
        if not exceeds[j]:
            break
        start = j
    if start is None:
        return DivergenceResult(percentile_threshold(bg, 0.98), True)
    return DivergenceResult(float(edges[start]), False, start)


def divergence_threshold(bg_scores, mixed_scores, bins=200):
    return divergence_point(bg_scores, mixed_scores, bins).threshold


@dataclass
class Thresholds:
    """Cut values ``values[kind][loss]`` with provenance.

    ``kind`` is one of ``divergence``, ``p98``, ``max``; ``loss`` is ``bce`` or
    ``kld``.
    """

    values: dict = field(default_factory=dict)
    config_hash: int = None
    provenance: dict = field(default_factory=dict)

    def get(self, kind, loss):
        try:
            return self.values[kind][loss]
        except KeyError:
            raise KeyError(f"no {kind!r} threshold for {loss!r}; have {sorted(self.values)}") from None

    def to_dict(self):
        return {
            "config_hash": None if self.config_hash is None else f"{self.config_hash:016x}",
            "thresholds": self.values,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d):
        h = d.get("config_hash")
        return cls(d["thresholds"], None if h is None else int(h, 16), d.get("provenance", {}))


def calibrate(bg, kinds=THRESHOLD_KINDS, mixed=None, q=0.98, bins=200, config_hash=None):
    """Thresholds of each requested kind for both losses from background scores."""
    values, prov = {}, {}
    for kind in kinds:
        if kind not in THRESHOLD_KINDS:
            raise ValueError(f"unknown threshold kind {kind!r}")
        if kind == "divergence" and mixed is None:
            raise ValueError("divergence thresholds need mixed-sample scores")
        values[kind] = {}
        for loss in LOSSES:
            if kind == "p98":
                values[kind][loss] = percentile_threshold(bg.loss(loss), q)
                prov[f"{kind}.{loss}"] = {"rule": "nearest-rank percentile", "q": q}
            elif kind == "max":
                values[kind][loss] = max_threshold(bg.loss(loss))
                prov[f"{kind}.{loss}"] = {"rule": "maximum"}
            else:
                res = divergence_point(bg.loss(loss), mixed.loss(loss), bins)
                values[kind][loss] = res.threshold
                prov[f"{kind}.{loss}"] = {"rule": "histogram divergence", "bins": bins,
                                          "fallback_p98": res.fallback}
    return Thresholds(values, config_hash, prov)


def select(scores, thresholds, mode, kind):
    """Boolean mask of frames whose score strictly exceeds the threshold."""
    mode = SelectionMode(mode)
    over_bce = scores.bce > thresholds.get(kind, "bce") if mode != SelectionMode.KLD_ONLY else None
    over_kld = scores.kld > thresholds.get(kind, "kld") if mode != SelectionMode.BCE_ONLY else None
    if mode == SelectionMode.BCE_ONLY:
        return over_bce
    if mode == SelectionMode.KLD_ONLY:
        return over_kld
    return over_bce | over_kld


@dataclass
class ReportRow:
    count: int
    frames: int
    selected: int

    @property
    def percent(self):
        if self.frames == 0:
            return None
        return 100.0 * self.selected / self.frames

    @property
    def percent_str(self):
        p = self.percent
        return "" if p is None else f"{p:.2f}"


@dataclass
class SelectionReport:
    rows: list

    def row(self, c):
        for r in self.rows:
            if r.count == c:
                return r
        raise KeyError(c)


def per_count_report(frame_counts_, mask, c_min=4, c_max=9):
    """Frames and selected frames per lit-pixel count in ``[c_min, c_max]``.

    ``frame_counts_`` is either the per-frame counts or the frames themselves.
    """
    if c_min > c_max:
        raise ValueError(f"c_min {c_min} > c_max {c_max}")
    c = np.asarray(frame_counts_)
    if c.ndim == 3:
        c = frame_counts(c)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != c.shape:
        raise ValueError(f"mask length {mask.shape} != frame count {c.shape}")
    rows = []
    for v in range(c_min, c_max + 1):
        at = c == v
        rows.append(ReportRow(v, int(at.sum()), int((at & mask).sum())))
    return SelectionReport(rows)


def write_report_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["count", "frames", "selected", "percent"])
        for r in report.rows:
            w.writerow([r.count, r.frames, r.selected, r.percent_str])


def summed_image(frames, mask):
    """Integer pixel sums of the selected and unselected frames."""
    frames = np.asarray(frames)
    mask = np.asarray(mask, dtype=bool)
    if frames.ndim != 3:
        raise ValueError(f"frames must be [N, H, W], got {frames.shape}")
    if mask.shape != (len(frames),):
        raise ValueError(f"mask length {mask.shape} != number of frames {len(frames)}")
    return frames[mask].sum(axis=0, dtype=np.int64), frames[~mask].sum(axis=0, dtype=np.int64)


def write_pgm(path, image):
    """16-bit binary PGM (P5, big-endian); maxval is the image maximum.

    Values above 65535 are clipped in the preview; the CSV keeps raw sums.
    """
    img = np.asarray(image)
    top = int(img.max()) if img.size else 0
    maxval = min(max(top, 1), 65535)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(np.clip(img, 0, maxval).astype(">u2").tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != b"P5":
        raise ValueError("not a binary PGM")
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.int64)


def write_image_csv(path, image):
    np.savetxt(path, np.asarray(image, dtype=np.int64), fmt="%d", delimiter=",", newline="\n")


def export_latent(ckpt, frames, mask=None, labels=None, with_logvar=False, batch_size=512):
    """Rows of ``(mu_0..mu_{d-1}, count, selected, label)`` per frame (z = mu).

    Returns ``(header, mu, count, selected, label, logvar)``; use
    :func:`write_latent_csv` for the on-disk form.
    """
    frames = np.asarray(frames)
    _check_config(ckpt, frames)
    cfg = ckpt.config
    mus, lvs = [], []
    for a in range(0, len(frames), batch_size):
        stats = encode(as_batch(frames[a : a + batch_size]), ckpt.params, cfg)
        mus.append(stats.mu)
        lvs.append(stats.logvar)
    d = cfg.latent_dim
    mu = np.concatenate(mus) if mus else np.zeros((0, d))
    lv = np.concatenate(lvs) if lvs else np.zeros((0, d))
    header = [f"mu_{i}" for i in range(d)] + ["count", "selected", "label"]
    if with_logvar:
        header += [f"logvar_{i}" for i in range(d)]
    sel = np.zeros(len(frames), bool) if mask is None else np.asarray(mask, dtype=bool)
    return LatentTable(header, mu, frame_counts(frames), sel,
                       None if labels is None else np.asarray(labels), lv if with_logvar else None)


@dataclass
class LatentTable:
    header: list
    mu: np.ndarray
    count: np.ndarray
    selected: np.ndarray
    label: np.ndarray = None
    logvar: np.ndarray = None

    def __len__(self):
        return len(self.mu)


def write_latent_csv(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.header)
        for i in range(len(table)):
            row = [repr(float(v)) for v in table.mu[i]]
            row += [int(table.count[i]), int(table.selected[i]),
                    "" if table.label is None else int(table.label[i])]
            if table.logvar is not None:
                row += [repr(float(v)) for v in table.logvar[i]]
            w.writerow(row)

