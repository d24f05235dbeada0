"""Labelled sub-seed derivation.

Every random stream in the package is keyed by ``(root seed, label)`` so that
adding a new consumer never shifts the numbers another consumer sees.

Labels in use:

``gen/background``, ``gen/signal``
    per-frame streams in :func:`spadvae.datagen.gen_dataset` (index appended
    as a spawn key)
``train/split``, ``train/init``, ``train/noise``, ``train/shuffle/<epoch>``
    dataset split, weight init, reparameterization noise, per-epoch shuffle
``score/noise``
    sampled-mode anomaly scoring
``bench/batch/<size>``
    synthetic benchmark batches
"""

import hashlib

import numpy as np


def derive_seed(seed, label):
    """64-bit sub-seed for ``label`` under root ``seed``."""
    blob = f"{int(seed)}/{label}".encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def rng_for(seed, label):
    return np.random.default_rng(derive_seed(seed, label))
