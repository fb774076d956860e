import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcac.datapipe import ImageSource, disk_dataset
from dcac.errors import DataError
from dcac.evaluation import (ScoredSet, auroc, average_ranks, evaluate, public_private_split,
                             report_from_scores)
from dcac.tensor import Tensor


def pairwise_auroc(scores, labels):
    """O(n^2) oracle: mean over positive/negative pairs, ties count one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def brightness_model(sign=1.0):
    def model(x: Tensor) -> Tensor:
        return Tensor(sign * (x.data.mean(axis=(1, 2, 3)) - 0.5)[:, None] * 10)
    return model


def test_perfect_separation():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_all_ties_is_half():
    assert auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_single_class_rejected():
    with pytest.raises(DataError):
        auroc([0.1, 0.2], [1, 1])


def test_matches_pairwise_oracle_on_200_scores():
    rng = np.random.default_rng(0)
    s, y = rng.uniform(size=200), rng.integers(0, 2, 200)
    assert abs(auroc(s, y) - pairwise_auroc(s, y)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 60), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_matches_pairwise_oracle_with_ties(n, levels, seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, levels, n) / levels
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    assert abs(auroc(s, y) - pairwise_auroc(s, y)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_monotone_transform_and_label_flip(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.01, 0.99, 50)
    y = rng.integers(0, 2, 50)
    y[:2] = [0, 1]
    assert auroc(p, y) == auroc(np.log(p / (1 - p)), y)
    assert auroc(p, 1 - y) == pytest.approx(1 - auroc(p, y), abs=1e-15)


def test_average_ranks_share_ties():
    np.testing.assert_array_equal(average_ranks([3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0])


def test_public_private_sizes_and_partition():
    pub, priv = public_private_split([str(i) for i in range(10)], 0.3, seed=1)
    assert (len(pub), len(priv)) == (3, 7)
    assert public_private_split([str(i) for i in range(10)], 0.3, seed=1) == (pub, priv)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 500), st.floats(0.01, 0.99), st.integers(0, 2**32 - 1))
def test_public_private_disjoint_exhaustive(n, frac, seed):
    ids = [f"id{i}" for i in range(n)]
    pub, priv = public_private_split(ids, frac, seed)
    assert set(pub).isdisjoint(priv) and sorted(pub + priv) == sorted(ids)
    assert len(pub) == int(np.floor(frac * n + 0.5))


def test_public_frac_bounds():
    with pytest.raises(ValueError):
        public_private_split(["a"], 1.0)


def test_random_scorer_near_half_on_both_sides():
    rng = np.random.default_rng(0)
    names = [f"i{k}" for k in range(1000)]
    scored = ScoredSet(names, rng.uniform(size=1000), rng.integers(0, 2, 1000))
    r = report_from_scores(scored, seed=0)
    assert 0.45 <= r.auroc_public <= 0.55 and 0.45 <= r.auroc_private <= 0.55


@pytest.fixture(scope="module")
def disks():
    # flat images whose grey level encodes the label
    m, _ = disk_dataset(40, 32, seed=1)
    imgs = {r.image_name: np.full((3, 32, 32), 0.8 if r.target else 0.2) for r in m}
    return m, ImageSource(images=imgs)


def test_label_encoding_model_scores_perfectly(disks):
    m, src = disks
    assert evaluate(brightness_model(), m, src, seed=0, image_size=32).auroc_full == 1.0
    assert evaluate(brightness_model(-1.0), m, src, seed=0, image_size=32).auroc_full == 0.0


def test_report_files(tmp_path, disks):
    m, src = disks
    r = evaluate(brightness_model(), m, src, seed=3, image_size=32)
    r.write(tmp_path)
    d = json.loads((tmp_path / "eval_report.json").read_text())
    assert set(d) == {"auroc_full", "auroc_public", "auroc_private", "n_pos", "n_neg", "seed"}
    assert (d["n_pos"], d["n_neg"], d["seed"]) == (20, 20, 3)
    back = ScoredSet.from_csv(tmp_path / "scores.csv")
    assert back.image_names == m.image_names and np.array_equal(back.scores, r.scored.scores)
    assert (tmp_path / "submission.csv").read_text().splitlines()[0] == "image_name,target"


def test_missing_images_listed(disks):
    m, _ = disks
    with pytest.raises(DataError, match="40 image file"):
        evaluate(brightness_model(), m, ImageSource(images={}), seed=0, image_size=32)
