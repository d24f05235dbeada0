"""Background-only VAE training with per-iteration metrics."""

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .errors import NonFiniteLossError
from .optim import AdamWState, ScheduleConfig, adamw_step, beta_at, lr_at
from .seeding import derive_seed, rng_for
from .vae import ModelConfig, as_batch, backward, forward, init_params

log = logging.getLogger(__name__)

METRIC_FIELDS = ("iter", "epoch", "lr", "beta", "train_bce", "train_kld", "val_bce", "val_kld")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    base_lr: float = 1e-3
    split: tuple = (0.6, 0.1, 0.3)
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    weight_decay: float = 1e-2
    eta_min: float = 0.0
    beta_cycles: int = 5
    ramp_fraction: float = 0.5
    sigmoid_steepness: float = 6.0
    eval_batch_size: int = 512

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split must be three non-negative ratios summing to 1, got {self.split}")

    @classmethod
    def full_scale(cls, **kw):
        """Full-scale recipe: 50 epochs at batch size 256."""
        return cls(epochs=50, batch_size=256, **kw)

    def schedule(self, n_train):
        ipe = iters_per_epoch(n_train, self.batch_size)
        return ScheduleConfig(
            warmup_iters=ipe,
            total_iters=ipe * self.epochs,
            base_lr=self.base_lr,
            eta_min=self.eta_min,
            beta_cycles=self.beta_cycles,
            ramp_fraction=self.ramp_fraction,
            sigmoid_steepness=self.sigmoid_steepness,
        )

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["split"] = tuple(d["split"])
        return cls(**d)


@dataclass
class MetricRecord:
    iter: int
    epoch: int
    lr: float
    beta: float
    train_bce: float
    train_kld: float
    val_bce: float = None
    val_kld: float = None


def iters_per_epoch(n_train, batch_size):
    return math.ceil(n_train / batch_size)


def split_sizes(n, ratios):
    """Floor allocation for validation and test; the remainder goes to training."""
    # round() first so that e.g. 0.3 * 10 == 3.0000000000000004 floors to 3
    n_val = math.floor(round(ratios[1] * n, 9))
    n_test = math.floor(round(ratios[2] * n, 9))
    return n - n_val - n_test, n_val, n_test


def split_dataset(frames, ratios=(0.6, 0.1, 0.3), seed=0):
    """Shuffle-partition frame indices into sorted (train, val, test) index arrays.

    ``frames`` may be an array of frames or a frame count.
    """
    n = frames if isinstance(frames, (int, np.integer)) else len(frames)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three values summing to 1")
    n_train, n_val, _ = split_sizes(n, ratios)
    perm = rng_for(seed, "train/split").permutation(n)
    return (
        np.sort(perm[:n_train]),
        np.sort(perm[n_train : n_train + n_val]),
        np.sort(perm[n_train + n_val :]),
    )


def _round_f32(params):
    for p in params.values():
        p[...] = p.astype(np.float32)


def evaluate(params, config, frames, batch_size=512):
    """Mean per-frame BCE and KLD over ``frames`` with z = mu."""
    if len(frames) == 0:
        return None, None
    bce_sum = kld_sum = 0.0
    for a in range(0, len(frames), batch_size):
        fp = forward(as_batch(frames[a : a + batch_size]), params, config)
        bce_sum += float(np.sum(fp.losses.bce))
        kld_sum += float(np.sum(fp.losses.kld))
    return bce_sum / len(frames), kld_sum / len(frames)


def new_checkpoint(cfg):
    params = init_params(cfg.model, rng_for(cfg.seed, "train/init"))
    _round_f32(params)
    noise = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, "train/noise")))
    return Checkpoint(
        cfg.model,
        params,
        AdamWState.zeros_like(params, weight_decay=cfg.weight_decay),
        iteration=0,
        rng_state=noise.bit_generator.state,
        train_config=cfg.to_dict(),
    )


def train(train_frames, val_frames, cfg, resume=None, stop_after_epoch=None, on_epoch=None):
    """Train on ``train_frames`` (background only; labels are never consulted).

    Returns the final :class:`Checkpoint` and one :class:`MetricRecord` per
    iteration; the last record of each epoch carries validation losses.

    ``resume`` continues a checkpoint saved at an epoch boundary of the same
    run; ``stop_after_epoch`` ends early (the schedule still spans
    ``cfg.epochs``), which together make a run resumable bit for bit.
    """
    train_frames = np.asarray(train_frames)
    n = len(train_frames)
    if n == 0:
        raise ValueError("training set is empty")
    model = cfg.model
    sched = cfg.schedule(n)
    ipe = sched.warmup_iters

    ckpt = resume if resume is not None else new_checkpoint(cfg)
    if ckpt.config != model:
        raise ValueError("resume checkpoint was built for a different ModelConfig")
    if ckpt.iteration % ipe:
        raise ValueError(f"resume iteration {ckpt.iteration} is not an epoch boundary")
    params = {k: np.array(v, dtype=np.float64) for k, v in ckpt.params.items()}
    adam = copy.deepcopy(ckpt.adam)
    noise = np.random.Generator(np.random.PCG64())
    noise.bit_generator.state = ckpt.rng_state

    last_epoch = cfg.epochs if stop_after_epoch is None else min(stop_after_epoch, cfg.epochs)
    records = []
    it = ckpt.iteration
    for epoch in range(it // ipe, last_epoch):
        order = rng_for(cfg.seed, f"train/shuffle/{epoch}").permutation(n)
        for b in range(ipe):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x = as_batch(train_frames[idx])
            lr, beta = lr_at(it, sched), beta_at(it, sched)
            eps = noise.standard_normal((len(idx), model.latent_dim))
            fp = forward(x, params, model, eps=eps, beta=beta, record=True)
            bce, kld = float(np.mean(fp.losses.bce)), float(np.mean(fp.losses.kld))
            if not math.isfinite(bce):
                raise NonFiniteLossError(it, "bce")
            if not math.isfinite(kld):
                raise NonFiniteLossError(it, "kld")
            adamw_step(params, backward(fp, params), adam, lr)
            _round_f32(params)
            records.append(MetricRecord(it, epoch, lr, beta, bce, kld))
            it += 1
        val_bce, val_kld = evaluate(params, model, val_frames, cfg.eval_batch_size)
        records[-1].val_bce, records[-1].val_kld = val_bce, val_kld
        log.info("epoch %d: train bce %.3f kld %.3f | val bce %s kld %s",
                 epoch, records[-1].train_bce, records[-1].train_kld, val_bce, val_kld)
        if on_epoch is not None:
            on_epoch(epoch, records[-1])

    out = Checkpoint(model, params, adam, iteration=it, rng_state=noise.bit_generator.state,
                     train_config=cfg.to_dict())
    return out, records


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_metrics_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in records:
            w.writerow([_fmt(getattr(r, f)) for f in METRIC_FIELDS])


def read_metrics_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {k: (None if row[k] == "" else float(row[k])) for k in METRIC_FIELDS}
            vals["iter"], vals["epoch"] = int(vals["iter"]), int(vals["epoch"])
            out.append(MetricRecord(**vals))
    return out
