"""Patient-disjoint train/validation splitting."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Tuple

import numpy as np

from ..errors import DataError
from .manifest import Manifest, write_manifest


def patient_split(m: Manifest, val_frac: float, seed: int) -> Tuple[Manifest, Manifest]:
    """Assign whole patients to train or validation.

    Patients with at least one malignant image are placed first, greedily
    steering the validation malignant count toward ``val_frac`` of the total;
    benign-only patients then steer the validation image count. Within each
    pass patients are visited in a seeded random order and go to validation
    only if that moves the running count closer to its target.
    """
    if not 0.0 < val_frac < 1.0:
        raise ValueError(f"val_frac must lie in (0, 1), got {val_frac}")
    patients = list(m.by_patient)
    if len(patients) < 2:
        raise DataError(f"cannot split {len(patients)} patient(s) into two disjoint sets")
    rng = np.random.default_rng(seed)
    size = {p: len(ix) for p, ix in m.by_patient.items()}
    pos = {p: sum(m.records[i].target for i in ix) for p, ix in m.by_patient.items()}
    order = [patients[i] for i in rng.permutation(len(patients))]
    target_n = val_frac * len(m)
    target_pos = val_frac * m.n_pos

    val = set()
    n_val = pos_val = 0
    for p in (q for q in order if pos[q] > 0):
        if abs(pos_val + pos[p] - target_pos) < abs(pos_val - target_pos):
            val.add(p)
            n_val += size[p]
            pos_val += pos[p]
    for p in (q for q in order if pos[q] == 0):
        if abs(n_val + size[p] - target_n) < abs(n_val - target_n):
            val.add(p)
            n_val += size[p]

    if not val:
        val.add(min(patients, key=lambda q: (size[q], order.index(q))))
    elif len(val) == len(patients):
        val.discard(min(patients, key=lambda q: (size[q], order.index(q))))

    train_ix = [i for i, r in enumerate(m.records) if r.patient_id not in val]
    val_ix = [i for i, r in enumerate(m.records) if r.patient_id in val]
    return m.subset(train_ix), m.subset(val_ix)


def split_summary(train: Manifest, val: Manifest, seed: int, val_frac: float) -> dict:
    total = len(train) + len(val)
    return {
        "seed": seed,
        "val_frac": val_frac,
        "train": train.counts(),
        "val": val.counts(),
        "val_image_fraction": len(val) / total if total else 0.0,
        "val_malignant_fraction": (val.n_pos / (train.n_pos + val.n_pos)
                                   if train.n_pos + val.n_pos else 0.0),
    }


def write_split(out_dir, train: Manifest, val: Manifest, seed: int, val_frac: float) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(train, out / "train.csv")
    write_manifest(val, out / "val.csv")
    summary = split_summary(train, val, seed, val_frac)
    (out / "split_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def check_patient_disjoint(train: Manifest, val: Manifest) -> list:
    """Patients present on both sides (empty when the split is valid)."""
    return sorted(set(train.by_patient) & set(val.by_patient))
