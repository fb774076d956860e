from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import DataError
from .manifest import Manifest

CHUNK = 4096


def class_balanced_weights(targets) -> np.ndarray:
    """Per-record probability proportional to 1 / count(record's class)."""
    y = np.asarray(targets, dtype=np.int64)
    counts = np.bincount(y, minlength=2)
    if counts[0] == 0 or counts[1] == 0:
        raise DataError(f"balanced sampling needs both classes, got counts {counts.tolist()}")
    w = 1.0 / counts[y]
    return w / w.sum()


def balanced_sampler(m: Manifest, seed: int) -> Iterator[int]:
    """Endless with-replacement index stream; each class drawn half the time."""
    p = class_balanced_weights(m.targets)
    rng = np.random.default_rng(seed)
    n = len(p)
    while True:
        yield from rng.choice(n, size=CHUNK, p=p).tolist()


def take(stream: Iterator[int], k: int) -> list:
    return [next(stream) for _ in range(k)]
