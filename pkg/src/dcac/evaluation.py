"""AUROC scoring and the simulated 30/70 public/private leaderboard split."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from . import tensor as T
from .datapipe.augment import preprocess
from .datapipe.images import ImageSource
from .datapipe.manifest import Manifest
from .errors import DataError, ShapeError


@dataclass
class ScoredSet:
    image_names: List[str]
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.image_names) == len(self.scores) == len(self.labels)):
            raise ShapeError("image_names, scores and labels must have equal lengths", dim="length")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise DataError("labels must be 0 or 1")

    def __len__(self):
        return len(self.labels)

    def subset(self, names: Sequence[str]) -> "ScoredSet":
        pos = {n: i for i, n in enumerate(self.image_names)}
        ix = [pos[n] for n in names]
        return ScoredSet([self.image_names[i] for i in ix], self.scores[ix], self.labels[ix])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_name", "score", "label"])
            for n, s, y in zip(self.image_names, self.scores, self.labels):
                w.writerow([n, repr(float(s)), int(y)])

    @classmethod
    def from_csv(cls, path) -> "ScoredSet":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([r["image_name"] for r in rows], [float(r["score"]) for r in rows],
                   [int(r["label"]) for r in rows])


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], len(values)]
    mean_rank = (starts + ends + 1) / 2.0  # mean of starts+1 .. ends
    ranks = np.empty(len(values))
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def auroc(scores, labels=None) -> float:
    """Mann-Whitney AUROC with ties counted as one half.

    Accepts a ScoredSet or parallel ``scores``/``labels`` arrays.
    """
    if isinstance(scores, ScoredSet):
        scores, labels = scores.scores, scores.labels
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError("scores and labels must be equal-length vectors", dim="length")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos + n_neg != len(y):
        raise DataError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise DataError(f"AUROC needs both classes (n_pos={n_pos}, n_neg={n_neg})")
    r_pos = average_ranks(s)[y == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def public_private_split(ids: Sequence[str], public_frac: float = 0.30,
                         seed: int = 0) -> Tuple[List[str], List[str]]:
    """Seeded uniform partition; ``round(public_frac * n)`` ids go public.

    Both sides keep the input order.
    """
    if not 0.0 < public_frac < 1.0:
        raise ValueError(f"public_frac must lie in (0, 1), got {public_frac}")
    ids = list(ids)
    n_pub = int(math.floor(public_frac * len(ids) + 0.5))
    chosen = np.random.default_rng(seed).permutation(len(ids))[:n_pub]
    mask = np.zeros(len(ids), dtype=bool)
    mask[chosen] = True
    return ([i for i, m in zip(ids, mask) if m], [i for i, m in zip(ids, mask) if not m])


@dataclass
class EvalReport:
    auroc_full: float
    auroc_public: Optional[float]
    auroc_private: Optional[float]
    n_pos: int
    n_neg: int
    seed: int
    public_frac: float = 0.30
    scored: Optional[ScoredSet] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"auroc_full": self.auroc_full, "auroc_public": self.auroc_public,
                "auroc_private": self.auroc_private, "n_pos": self.n_pos, "n_neg": self.n_neg,
                "seed": self.seed}

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        paths = {"report": str(out / "eval_report.json")}
        if self.scored is not None:
            self.scored.to_csv(out / "scores.csv")
            with open(out / "submission.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["image_name", "target"])
                for n, s in zip(self.scored.image_names, self.scored.scores):
                    w.writerow([n, repr(float(s))])
            paths.update(scores=str(out / "scores.csv"), submission=str(out / "submission.csv"))
        return paths


def _auroc_or_none(s: ScoredSet) -> Optional[float]:
    try:
        return auroc(s)
    except DataError:
        return None


def report_from_scores(scored: ScoredSet, seed: int, public_frac: float = 0.30) -> EvalReport:
    public, private = public_private_split(scored.image_names, public_frac, seed)
    return EvalReport(
        auroc_full=auroc(scored),
        auroc_public=_auroc_or_none(scored.subset(public)),
        auroc_private=_auroc_or_none(scored.subset(private)),
        n_pos=int(scored.labels.sum()),
        n_neg=int(len(scored) - scored.labels.sum()),
        seed=seed,
        public_frac=public_frac,
        scored=scored,
    )


def predict_logits(model: Callable, images: Sequence[np.ndarray], batch_size: int = 32) -> np.ndarray:
    """Run ``model`` over [3, S, S] images without recording, in fixed-size batches."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            x = T.Tensor(np.stack(images[i : i + batch_size]))
            out.append(model(x).data.reshape(-1))
    return np.concatenate(out) if out else np.zeros(0)


def score_manifest(model: Callable, manifest: Manifest, images: ImageSource,
                   image_size: int = 160, batch_size: int = 32) -> ScoredSet:
    missing = images.missing(manifest.image_names)
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise DataError(f"{len(missing)} image file(s) missing: {shown}")
    if hasattr(model, "eval"):
        model.eval()
    imgs = [preprocess(images[n], image_size) for n in manifest.image_names]
    logits = predict_logits(model, imgs, batch_size)
    return ScoredSet(manifest.image_names, expit(logits), manifest.targets)


def evaluate(model: Callable, manifest: Manifest, images: ImageSource, seed: int = 0,
             image_size: int = 160, public_frac: float = 0.30) -> EvalReport:
    """Score unaugmented, resized images and report full/public/private AUROC."""
    return report_from_scores(score_manifest(model, manifest, images, image_size), seed, public_frac)
