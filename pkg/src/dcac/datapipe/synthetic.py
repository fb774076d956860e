"""Synthetic stand-ins for dermoscopy data used by tests and the toy task."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .images import save_image
from .manifest import Manifest, SampleRecord, write_manifest


def disk_image(rng: np.random.Generator, size: int, bright: bool) -> np.ndarray:
    """A noisy mid-grey field with one lesion-like disk, bright or dark."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    r = rng.uniform(0.18, 0.3) * size
    mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float64)
    level = rng.uniform(0.8, 0.95) if bright else rng.uniform(0.05, 0.2)
    base = rng.uniform(0.4, 0.6)
    img = base + (level - base) * mask
    img = np.broadcast_to(img, (3, size, size)) * rng.uniform(0.9, 1.1, size=(3, 1, 1))
    img = img + rng.normal(0.0, 0.03, size=(3, size, size))
    return np.clip(img, 0.0, 1.0)


def disk_dataset(n: int = 64, size: int = 32, seed: int = 0,
                 patients: int = 0) -> Tuple[Manifest, Dict[str, np.ndarray]]:
    """Half bright disks (target 1), half dark disks (target 0).

    ``patients`` > 0 spreads images round-robin over that many patient ids;
    the default gives each image its own patient.
    """
    rng = np.random.default_rng(seed)
    records, images = [], {}
    for i in range(n):
        target = int(i % 2 == 0)
        name = f"SYN_{i:05d}"
        pid = f"P{(i % patients) if patients else i:05d}"
        records.append(SampleRecord(image_name=name, patient_id=pid, target=target,
                                    benign_malignant="malignant" if target else "benign"))
        images[name] = disk_image(rng, size, bool(target))
    return Manifest(records), images


def random_manifest(rng: np.random.Generator, n_patients: int, max_images: int = 6,
                    pos_rate: float = 0.1) -> Manifest:
    """Patients with 1..max_images images each; labels Bernoulli(pos_rate)."""
    records = []
    k = 0
    for p in range(n_patients):
        for _ in range(int(rng.integers(1, max_images + 1))):
            records.append(SampleRecord(image_name=f"IMG_{k:07d}", patient_id=f"P{p:05d}",
                                        target=int(rng.random() < pos_rate)))
            k += 1
    return Manifest(records)


def write_disk_dataset(out_dir, n: int = 64, size: int = 32, seed: int = 0,
                       ext: str = ".png") -> Manifest:
    """Write ``train.csv`` plus ``images/<name><ext>`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    m, images = disk_dataset(n, size, seed)
    for name, img in images.items():
        save_image(out / "images" / f"{name}{ext}", img)
    write_manifest(m, out / "train.csv")
    return m
