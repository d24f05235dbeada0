"""Synthetic SPAD-style binary frames.

Background frames carry dark counts (independent Bernoulli pixels) plus
single-generation crosstalk into one 4-neighbour.  Signal frames add an
electron track that enters at the top row and walks downward with a small
horizontal drift, lighting each visited pixel with probability ``hit_p``.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .seeding import derive_seed

BACKGROUND = 0
SIGNAL = 1

_NEIGHBOURS = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])


@dataclass(frozen=True)
class TrackConfig:
    hit_p: float = 0.55
    max_drift: int = 1
    length_min: int = 1
    length_max: int = None  # None: frame height
    entry_jitter: int = None  # half-width around the centre column; None: full width

    def lengths(self, height):
        hi = height if self.length_max is None else self.length_max
        return self.length_min, hi


@dataclass(frozen=True)
class GenConfig:
    width: int = 64
    height: int = 64
    dcr_p: float = 1.2e-3
    crosstalk_p: float = 0.05
    track: TrackConfig = field(default_factory=TrackConfig)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("frame extents must be positive")
        for name, p in (("dcr_p", self.dcr_p), ("crosstalk_p", self.crosstalk_p),
                        ("hit_p", self.track.hit_p)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability in [0, 1], got {p}")
        lo, hi = self.track.lengths(self.height)
        if not 0 <= lo <= hi <= self.height:
            raise ValueError(f"track length range [{lo}, {hi}] must lie within [0, {self.height}]")
        if self.track.max_drift < 0:
            raise ValueError("max_drift must be non-negative")
        if self.track.entry_jitter is not None and self.track.entry_jitter < 0:
            raise ValueError("entry_jitter must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        track = TrackConfig(**d.pop("track", {}))
        return cls(track=track, **d)


@dataclass
class LabeledSet:
    """Frames as a ``uint8 [N, H, W]`` array with optional per-frame labels.

    ``labels`` holds ``BACKGROUND``/``SIGNAL`` codes and is only ever used for
    evaluation.
    """

    frames: np.ndarray
    labels: np.ndarray = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be [N, H, W], got shape {self.frames.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != (len(self.frames),):
                raise ValueError("labels length must equal the number of frames")

    def __len__(self):
        return len(self.frames)

    def subset(self, idx):
        labels = None if self.labels is None else self.labels[idx]
        return LabeledSet(self.frames[idx], labels, dict(self.provenance))


def count(frame):
    """Number of lit pixels."""
    return int(np.count_nonzero(frame))


def counts(frames):
    frames = np.asarray(frames)
    return np.count_nonzero(frames.reshape(len(frames), -1), axis=1)


def gen_background(cfg, rng):
    h, w = cfg.height, cfg.width
    frame = np.zeros(h * w, dtype=np.uint8)
    # Binomial count + uniform positions: same law as i.i.d. Bernoulli pixels.
    n_dark = rng.binomial(h * w, cfg.dcr_p)
    lit = rng.choice(h * w, size=n_dark, replace=False)
    frame[lit] = 1
    frame = frame.reshape(h, w)
    if cfg.crosstalk_p > 0 and n_dark:
        fires = rng.random(n_dark) < cfg.crosstalk_p
        dirs = rng.integers(0, 4, size=n_dark)
        src = lit[fires]
        step = _NEIGHBOURS[dirs[fires]]
        rows = src // w + step[:, 0]
        cols = src % w + step[:, 1]
        inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        frame[rows[inside], cols[inside]] = 1
    return frame


def _entry_column(cfg, rng):
    w = cfg.width
    j = cfg.track.entry_jitter
    if j is None:
        return int(rng.integers(0, w))
    centre = w // 2
    return int(rng.integers(max(0, centre - j), min(w - 1, centre + j) + 1))


def gen_signal(cfg, rng):
    frame = gen_background(cfg, rng)
    t = cfg.track
    lo, hi = t.lengths(cfg.height)
    length = int(rng.integers(lo, hi + 1))
    col0 = _entry_column(cfg, rng)
    if length == 0:
        return frame
    steps = rng.integers(-t.max_drift, t.max_drift + 1, size=length - 1)
    cols = np.clip(col0 + np.concatenate(([0], np.cumsum(steps))), 0, cfg.width - 1)
    hits = rng.random(length) < t.hit_p
    rows = np.arange(length)
    frame[rows[hits], cols[hits]] = 1
    return frame


def _frame_rng(seed, kind, index):
    return np.random.default_rng(np.random.SeedSequence(derive_seed(seed, f"gen/{kind}"),
                                                        spawn_key=(index,)))


def _gen_block(kind, start, stop, cfg, seed):
    make = gen_background if kind == "background" else gen_signal
    return [make(cfg, _frame_rng(seed, kind, i)) for i in range(start, stop)]


def gen_dataset(n_bg, n_sig, cfg, seed, workers=1, chunk=2048):
    """``n_bg`` background frames followed by ``n_sig`` signal frames.

    Frame ``i`` of each kind draws from its own stream keyed by
    ``(seed, kind, i)``, so the output does not depend on ``workers``.
    """
    if n_bg < 0 or n_sig < 0:
        raise ValueError("frame counts must be non-negative")
    jobs = []
    for kind, n in (("background", n_bg), ("signal", n_sig)):
        jobs += [(kind, a, min(a + chunk, n)) for a in range(0, n, chunk)]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(lambda j: _gen_block(*j, cfg, seed), jobs))
    else:
        blocks = [_gen_block(*j, cfg, seed) for j in jobs]
    frames = [f for b in blocks for f in b]
    if frames:
        arr = np.stack(frames)
    else:
        arr = np.zeros((0, cfg.height, cfg.width), dtype=np.uint8)
    labels = np.concatenate([np.full(n_bg, BACKGROUND, np.uint8), np.full(n_sig, SIGNAL, np.uint8)])
    return LabeledSet(arr, labels, {"gen": cfg.to_dict(), "seed": int(seed),
                                    "n_background": n_bg, "n_signal": n_sig})
