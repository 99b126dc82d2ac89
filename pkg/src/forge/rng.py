"""Labeled, splittable random substreams.

One 64-bit master seed fans out into independent substreams addressed by
string labels. The derivation is a SHA-256 hash of ``"<master>\\x1f<label>"``,
so changing the draws in one stage (e.g. ``"split"``) can never perturb
another (e.g. ``"batch-order"``). The scheme is platform-independent and
stable across runs, which is what the byte-identical-rerun guarantee of the
experiment harness rests on.

Well-known labels used by the toolkit:

=====================  ====================================================
``split``              train/test partition of a dataset
``subsample:{p}:{r}``  low-data subset, percentage ``p``, repeat ``r``
``init``               parameter initialization of the main student
``init:aux``           fresh classifier head of the auxiliary student
``select``             random element-selection strategies
``batch-order``        minibatch shuffling during training
``synth:{kind}``       synthetic dataset generation
=====================  ====================================================
"""

import hashlib

import numpy as np

__all__ = ["derive_seed", "substream"]


def derive_seed(master_seed: int, label: str) -> int:
    """Map (master seed, label) to a 64-bit substream seed."""
    payload = f"{master_seed}\x1f{label}".encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


def substream(master_seed: int, label: str) -> np.random.Generator:
    """Independent generator for one labeled stage of a pipeline."""
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, label)))
