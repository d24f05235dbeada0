"""Convolutional VAE for binary sensor frames.

Encoder: ``n`` stride-2 convolutions with LeakyReLU, flatten, then two linear
heads giving the latent mean and log-variance.  Decoder: a linear layer,
reshape, and ``n`` transposed convolutions mirroring the encoder (LeakyReLU
between stages, sigmoid at the end).

Parameters are held in a plain ``dict`` keyed by layer name; the key order
returned by :func:`param_shapes` is the canonical order used for
serialization.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import BackwardError, NonFiniteError, ShapeError

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    input_height: int = 64
    input_width: int = 64
    encoder_channels: tuple = (8, 16, 24, 32, 48, 64)
    latent_dim: int = 32
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if not self.encoder_channels or min(self.encoder_channels) < 1:
            raise ValueError("encoder_channels must be a non-empty list of positive ints")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.input_height < 1 or self.input_width < 1:
            raise ValueError("input extents must be positive")
        # raises ShapeError if the extents do not survive the conv stack
        self.bottleneck_shape  # noqa: B018

    @property
    def n_layers(self):
        return len(self.encoder_channels)

    @property
    def encoder_specs(self):
        chans = (1,) + self.encoder_channels
        return [
            nn.ConvSpec(chans[i], chans[i + 1], self.kernel, self.stride, self.padding)
            for i in range(self.n_layers)
        ]

    @property
    def decoder_specs(self):
        chans = self.encoder_channels[::-1] + (1,)
        return [
            nn.ConvSpec(chans[i], chans[i + 1], self.kernel, self.stride, self.padding)
            for i in range(self.n_layers)
        ]

    @property
    def bottleneck_shape(self):
        """``(C, h, w)`` of the last encoder feature map."""
        h, w = self.input_height, self.input_width
        for spec in self.encoder_specs:
            h = nn.conv_output_extent(h, spec.kernel, spec.stride, spec.padding, "height")
            w = nn.conv_output_extent(w, spec.kernel, spec.stride, spec.padding, "width")
        # the decoder must land back on the input grid
        hh, ww = h, w
        for spec in self.decoder_specs:
            hh = nn.conv_transposed_output_extent(hh, spec.kernel, spec.stride, spec.padding)
            ww = nn.conv_transposed_output_extent(ww, spec.kernel, spec.stride, spec.padding)
        if (hh, ww) != (self.input_height, self.input_width):
            raise ShapeError(
                f"decoder maps {h}x{w} back to {hh}x{ww}, not "
                f"{self.input_height}x{self.input_width}",
                dim="height" if hh != self.input_height else "width",
            )
        return self.encoder_channels[-1], h, w

    @property
    def flat_features(self):
        return math.prod(self.bottleneck_shape)

    def to_dict(self):
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def config_hash(self):
        """Stable 64-bit fingerprint of the architecture."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def param_shapes(config):
    """Ordered mapping ``name -> shape`` for every trainable tensor."""
    shapes = {}
    k = config.kernel
    for i, spec in enumerate(config.encoder_specs):
        shapes[f"enc{i}.weight"] = (spec.out_channels, spec.in_channels, k, k)
        shapes[f"enc{i}.bias"] = (spec.out_channels,)
    f, d = config.flat_features, config.latent_dim
    shapes["mu.weight"] = (d, f)
    shapes["mu.bias"] = (d,)
    shapes["logvar.weight"] = (d, f)
    shapes["logvar.bias"] = (d,)
    shapes["dec_fc.weight"] = (f, d)
    shapes["dec_fc.bias"] = (f,)
    for i, spec in enumerate(config.decoder_specs):
        shapes[f"dec{i}.weight"] = (spec.in_channels, spec.out_channels, k, k)
        shapes[f"dec{i}.bias"] = (spec.out_channels,)
    return shapes


def param_count(config):
    return sum(math.prod(s) for s in param_shapes(config).values())


def _fan_in(name, shape):
    if name.startswith("dec") and not name.startswith("dec_fc") and len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return math.prod(shape[1:])


def init_params(config, rng, dtype=np.float64):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
    params = {}
    shapes = param_shapes(config)
    for name, shape in shapes.items():
        wname = name.rsplit(".", 1)[0] + ".weight"
        bound = 1.0 / math.sqrt(_fan_in(wname, shapes[wname]))
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def zero_params(config, dtype=np.float64):
    return {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(config).items()}


def cast_params(params, dtype):
    return {name: np.asarray(p, dtype=dtype) for name, p in params.items()}


def check_params(params, config):
    for name, shape in param_shapes(config).items():
        if name not in params:
            raise ShapeError(f"missing parameter {name!r}", dim=name)
        p = params[name]
        if p.shape != shape:
            raise ShapeError(f"parameter {name!r} has shape {p.shape}, expected {shape}", dim=name)
        if not np.all(np.isfinite(p)):
            raise NonFiniteError(f"parameter {name!r} contains non-finite values", name=name)


def as_batch(frames, dtype=np.float64):
    """``[N, H, W]`` or ``[N, 1, H, W]`` frames -> float ``[N, 1, H, W]``."""
    x = np.asarray(frames)
    if x.ndim == 3:
        x = x[:, None]
    return x.astype(dtype, copy=False)


def _check_frames(x, config):
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"frames must be [N, 1, H, W], got {x.shape}", dim="channels")
    if x.shape[2] != config.input_height:
        raise ShapeError(
            f"frame height {x.shape[2]} != config {config.input_height}", dim="height"
        )
    if x.shape[3] != config.input_width:
        raise ShapeError(f"frame width {x.shape[3]} != config {config.input_width}", dim="width")


@dataclass
class LatentStats:
    mu: np.ndarray
    logvar: np.ndarray

    @property
    def sigma(self):
        return np.exp(self.logvar / 2)


@dataclass
class LossBreakdown:
    bce: np.ndarray
    kld: np.ndarray
    beta: float
    total: np.ndarray = field(init=False)

    def __post_init__(self):
        self.total = total_loss(self.bce, self.kld, self.beta)


def _encode(x, params, config, cache):
    slope = config.leaky_slope
    n = x.shape[0]
    # [N, 1, H, W] -> channel-major [1, N, H, W] is a free reshape
    h = x.reshape((1,) + x.shape[:1] + x.shape[2:])
    for i, spec in enumerate(config.encoder_specs):
        pre = nn.conv2d_forward_cn(h, params[f"enc{i}.weight"], params[f"enc{i}.bias"], spec)
        if cache is not None:
            cache[f"enc{i}.in"] = h
            cache[f"enc{i}.pre"] = pre
        h = nn.leaky_relu(pre, slope)
    flat = np.ascontiguousarray(np.swapaxes(h, 0, 1)).reshape(n, -1)
    if cache is not None:
        cache["flat"] = flat
    mu = nn.fully_connected(flat, params["mu.weight"], params["mu.bias"])
    logvar = nn.fully_connected(flat, params["logvar.weight"], params["logvar.bias"])
    return LatentStats(mu, logvar)


def _decode(z, params, config, cache):
    slope = config.leaky_slope
    n = z.shape[0]
    h = nn.fully_connected(z, params["dec_fc.weight"], params["dec_fc.bias"])
    h = np.ascontiguousarray(np.swapaxes(h.reshape((n,) + config.bottleneck_shape), 0, 1))
    specs = config.decoder_specs
    last = len(specs) - 1
    for i, spec in enumerate(specs):
        pre = nn.conv2d_transposed_forward_cn(
            h, params[f"dec{i}.weight"], params[f"dec{i}.bias"], spec
        )
        if cache is not None:
            cache[f"dec{i}.in"] = h
            cache[f"dec{i}.pre"] = pre
        h = nn.sigmoid(pre) if i == last else nn.leaky_relu(pre, slope)
    # final map has one channel: [1, N, H, W] -> [N, 1, H, W] is free
    return h.reshape((n, 1) + h.shape[2:])


def encode(frames, params, config):
    """Encode ``[N, 1, H, W]`` frames to per-frame latent mean and log-variance."""
    x = np.asarray(frames)
    _check_frames(x, config)
    check_params(params, config)
    return _encode(x, params, config, None)


def reparameterize(stats, eps):
    """``z = mu + exp(logvar / 2) * eps``."""
    eps = np.asarray(eps)
    if eps.shape != stats.mu.shape:
        raise ShapeError(f"noise shape {eps.shape} != latent shape {stats.mu.shape}", dim="latent")
    return stats.mu + np.exp(stats.logvar / 2) * eps


def decode(z, params, config):
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] != config.latent_dim:
        raise ShapeError(f"z must be [N, {config.latent_dim}], got {z.shape}", dim="latent")
    check_params(params, config)
    return _decode(z, params, config, None)


def bce_loss(x, xhat):
    """Per-frame binary cross-entropy summed over pixels (64-bit accumulation)."""
    x = np.asarray(x)
    xhat = np.asarray(xhat)
    if x.shape != xhat.shape:
        raise ShapeError(f"target shape {x.shape} != reconstruction shape {xhat.shape}", dim="pixels")
    c = np.clip(xhat, PROB_CLAMP, 1 - PROB_CLAMP)
    terms = x * np.log(c) + (1 - x) * np.log(1 - c)
    if terms.ndim <= 1:
        return -np.sum(terms, dtype=np.float64)
    return -np.sum(terms.reshape(terms.shape[0], -1), axis=1, dtype=np.float64)


def kld_loss(stats):
    """Per-frame KL divergence of N(mu, sigma^2) from N(0, I), summed over latent dims.

    ``1 + logvar - exp(logvar)`` is evaluated as ``-(expm1(logvar) - logvar)``,
    which is non-negative in floating point as well as exactly.
    """
    mu = np.asarray(stats.mu)
    lv = np.asarray(stats.logvar)
    terms = np.expm1(lv) - lv + mu * mu
    return 0.5 * np.sum(terms, axis=-1, dtype=np.float64)


def total_loss(bce, kld, beta):
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    return bce + beta * kld


@dataclass
class ForwardPass:
    recon: np.ndarray
    stats: LatentStats
    z: np.ndarray
    losses: LossBreakdown
    eps: np.ndarray = None
    cache: dict = None
    frames: np.ndarray = None
    config: ModelConfig = None

    @property
    def batch_loss(self):
        """Mean over frames of ``bce + beta * kld``."""
        return float(np.mean(self.losses.total))


def forward(frames, params, config, eps=None, beta=1.0, record=False):
    """Encode, reparameterize, decode and score a batch.

    ``eps=None`` is deterministic mode (``z = mu``).  With ``record=True`` the
    intermediates needed by :func:`backward` are kept on the result.
    """
    x = np.asarray(frames)
    _check_frames(x, config)
    check_params(params, config)
    cache = {} if record else None
    stats = _encode(x, params, config, cache)
    if eps is None:
        z = stats.mu
    else:
        z = reparameterize(stats, eps)
    recon = _decode(z, params, config, cache)
    losses = LossBreakdown(bce_loss(x, recon), kld_loss(stats), beta)
    return ForwardPass(recon, stats, z, losses, eps=eps, cache=cache, frames=x if record else None,
                       config=config)


def backward(fp, params):
    """Gradients of ``fp.batch_loss`` w.r.t. every parameter.

    Requires a forward pass made with ``record=True``.  Exact wherever the
    reconstruction lies inside the BCE clamp range.
    """
    if fp is None or fp.cache is None:
        raise BackwardError("backward called without a recorded forward pass")
    config = fp.config
    cache = fp.cache
    slope = config.leaky_slope
    x = fp.frames
    n = x.shape[0]
    beta = fp.losses.beta
    grads = {}

    # d(BCE)/d(logit) = xhat - x.  The probability clamp is passed straight
    # through: its true derivative is zero, which would leave a pixel lit
    # under a saturated output with no restoring gradient at all.
    g = (fp.recon - x) / n

    g = g.reshape((1, n) + g.shape[2:])
    specs = config.decoder_specs
    last = len(specs) - 1
    for i in range(last, -1, -1):
        if i != last:
            g = nn.leaky_relu_backward(g, cache[f"dec{i}.pre"], slope)
        g, grads[f"dec{i}.weight"], grads[f"dec{i}.bias"] = nn.conv2d_transposed_backward_cn(
            g, cache[f"dec{i}.in"], params[f"dec{i}.weight"], specs[i]
        )
    g = np.swapaxes(g, 0, 1).reshape(n, -1)
    dz, grads["dec_fc.weight"], grads["dec_fc.bias"] = nn.fully_connected_backward(
        g, fp.z, params["dec_fc.weight"]
    )

    mu, lv = fp.stats.mu, fp.stats.logvar
    d_mu = dz + (beta / n) * mu
    d_lv = (beta / n) * 0.5 * np.expm1(lv)
    if fp.eps is not None:
        d_lv = d_lv + dz * fp.eps * 0.5 * np.exp(lv / 2)

    flat = cache["flat"]
    d_flat, grads["mu.weight"], grads["mu.bias"] = nn.fully_connected_backward(
        d_mu, flat, params["mu.weight"]
    )
    d_flat2, grads["logvar.weight"], grads["logvar.bias"] = nn.fully_connected_backward(
        d_lv, flat, params["logvar.weight"]
    )
    c, bh, bw = config.bottleneck_shape
    g = np.ascontiguousarray(np.swapaxes((d_flat + d_flat2).reshape(n, c, bh, bw), 0, 1))

    enc_specs = config.encoder_specs
    for i in range(len(enc_specs) - 1, -1, -1):
        g = nn.leaky_relu_backward(g, cache[f"enc{i}.pre"], slope)
        g, grads[f"enc{i}.weight"], grads[f"enc{i}.bias"] = nn.conv2d_backward_cn(
            g, cache[f"enc{i}.in"], params[f"enc{i}.weight"], enc_specs[i], input_grad=i > 0
        )
    return {name: grads[name] for name in param_shapes(config)}
