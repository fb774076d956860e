import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcac.datapipe import (AugmentConfig, ImageSource, Manifest, SampleRecord, augment,
                           balanced_sampler, check_patient_disjoint, class_balanced_weights,
                           dedup_report, disk_dataset, load_image, load_manifest, patient_split,
                           preprocess, random_manifest, read_duplicate_list, remove_duplicates,
                           resize_bilinear, sample_rng, save_image, write_manifest, write_split)
from dcac.datapipe.augment import adjust_hue, hsv_to_rgb, rgb_to_hsv
from dcac.datapipe.sampler import take
from dcac.errors import ConfigError, DataError, ImageFormatError

CSV = """image_name,patient_id,sex,age_approx,anatom_site_general_challenge,diagnosis,benign_malignant,target
ISIC_0000001,IP_1,male,45.0,torso,nevus,benign,0
ISIC_0000002,IP_1,female,,,melanoma,malignant,1
ISIC_0000003,IP_2,,60.0,head/neck,unknown,benign,0
"""


def write(tmp_path, text, name="m.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------- manifest

def test_manifest_parses_and_roundtrips(tmp_path):
    m = load_manifest(write(tmp_path, CSV))
    assert len(m) == 3 and m.n_pos == 1
    assert m[0] == SampleRecord("ISIC_0000001", "IP_1", 0, "male", 45.0, "torso", "nevus", "benign")
    assert m[1].age_approx is None and m[2].sex is None
    write_manifest(m, tmp_path / "out.csv")
    assert load_manifest(tmp_path / "out.csv") == m
    assert (tmp_path / "out.csv").read_text() == CSV


def test_missing_column_reported_on_header_row(tmp_path):
    with pytest.raises(DataError) as exc:
        load_manifest(write(tmp_path, "image_name,target\na,0\n"))
    assert exc.value.row == 1 and "patient_id" in str(exc.value)


@pytest.mark.parametrize("row, needle", [
    ("x,P,male,,,,,2", "target"),
    ("x,P,other,,,,,0", "sex"),
    ("x,P,male,old,,,,0", "age_approx"),
    (",P,male,,,,,0", "image_name"),
])
def test_bad_row_names_line(tmp_path, row, needle):
    text = CSV.splitlines()[0] + "\n" + CSV.splitlines()[1] + "\n" + row + "\n"
    with pytest.raises(DataError, match=needle) as exc:
        load_manifest(write(tmp_path, text))
    assert exc.value.row == 3


def test_duplicate_image_name_rejected():
    with pytest.raises(DataError, match="duplicate"):
        Manifest([SampleRecord("a", "p", 0), SampleRecord("a", "q", 1)])


def test_dedup_counts(tmp_path):
    m = load_manifest(write(tmp_path, CSV))
    dups = write(tmp_path, "# removed\nISIC_0000002\n\nISIC_9999999\n", "dups.txt")
    ids = read_duplicate_list(dups)
    out = remove_duplicates(m, ids)
    assert (len(out), out.n_pos) == (2, 0)
    assert dedup_report(m, ids) == {"requested": 2, "removed": 1, "absent": ["ISIC_9999999"]}


def test_isic_2020_counts_are_consistent():
    # 33,126 images, 584 malignant; 425 duplicates of which 3 malignant
    assert 33_126 - 425 == 32_701 == 32_120 + 581
    assert 32_542 + 584 == 33_126
    assert 22_860 + 9_841 == 32_701 and 437 + 144 == 581


# ------------------------------------------------------------------- split

@settings(max_examples=60, deadline=None)
@given(st.integers(2, 120), st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
def test_split_is_patient_disjoint_and_exhaustive(n_patients, frac, seed):
    m = random_manifest(np.random.default_rng(seed), n_patients)
    train, val = patient_split(m, frac, seed)
    assert check_patient_disjoint(train, val) == []
    assert sorted(train.image_names + val.image_names) == sorted(m.image_names)
    assert len(train) > 0 and len(val) > 0


def test_split_hits_val_fraction_on_many_patients():
    m = random_manifest(np.random.default_rng(0), 2000, max_images=30, pos_rate=0.02)
    train, val = patient_split(m, 0.3, seed=4)
    assert abs(len(val) / len(m) - 0.3) <= 0.02
    assert abs(val.n_pos / m.n_pos - 0.3) <= 0.02


def test_split_deterministic_files(tmp_path):
    m = random_manifest(np.random.default_rng(1), 50)
    for d in ("a", "b"):
        write_split(tmp_path / d, *patient_split(m, 0.3, 7), seed=7, val_frac=0.3)
    for f in ("train.csv", "val.csv", "split_summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_split_needs_two_patients():
    with pytest.raises(DataError):
        patient_split(Manifest([SampleRecord("a", "p", 0), SampleRecord("b", "p", 1)]), 0.3, 0)


# ----------------------------------------------------------------- sampler

@pytest.mark.parametrize("ratio", [1, 10, 100, 1000])
def test_sampler_balances_classes(ratio):
    recs = [SampleRecord(f"n{i}", f"p{i}", 0) for i in range(ratio)] + [SampleRecord("pos", "pp", 1)]
    m = Manifest(recs)
    draws = np.array(take(balanced_sampler(m, seed=ratio), 100_000))
    frac = np.mean(np.array(m.targets)[draws])
    assert abs(frac - 0.5) <= 0.02


def test_sampler_weights_sum_to_one_per_class():
    w = class_balanced_weights([0, 0, 0, 1])
    assert w[:3].sum() == pytest.approx(0.5) and w[3] == pytest.approx(0.5)


def test_sampler_rejects_single_class():
    with pytest.raises(DataError):
        class_balanced_weights([0, 0])


def test_sampler_is_seeded():
    m, _ = disk_dataset(16, 32)
    assert take(balanced_sampler(m, 3), 50) == take(balanced_sampler(m, 3), 50)
    assert take(balanced_sampler(m, 3), 50) != take(balanced_sampler(m, 4), 50)


# ------------------------------------------------------------------ images

def test_png_and_ppm_roundtrip_exactly(tmp_path):
    img = np.round(np.random.default_rng(0).uniform(size=(3, 9, 7)) * 255) / 255
    for ext in ("png", "ppm"):
        save_image(tmp_path / f"i.{ext}", img)
        np.testing.assert_array_equal(load_image(tmp_path / f"i.{ext}"), img)


def test_unsupported_image_rejected(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "bad.png")
    with pytest.raises(ImageFormatError):
        save_image(tmp_path / "x.bmp", np.zeros((3, 4, 4)))


def test_image_source_lists_missing(tmp_path):
    save_image(tmp_path / "a.png", np.zeros((3, 4, 4)))
    src = ImageSource(tmp_path)
    assert src.missing(["a", "b"]) == ["b"]
    assert src["a"].shape == (3, 4, 4)


# ----------------------------------------------------------------- augment

def rand_img(seed=0, h=48, w=40):
    return np.random.default_rng(seed).uniform(size=(3, h, w))


def test_identity_config_reproduces_resize():
    img = rand_img()
    out = augment(img, AugmentConfig.identity(32), sample_rng(0))
    np.testing.assert_allclose(out, resize_bilinear(img, 32, 32), atol=1e-12)


def test_augment_output_size_and_range():
    for seed in range(10):
        out = augment(rand_img(seed), AugmentConfig(), sample_rng(seed))
        assert out.shape == (3, 160, 160)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_same_substream_same_output():
    img = rand_img()
    a = augment(img, AugmentConfig(output_size=48), sample_rng(5, 1, 2))
    b = augment(img, AugmentConfig(output_size=48), sample_rng(5, 1, 2))
    c = augment(img, AugmentConfig(output_size=48), sample_rng(5, 1, 3))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_augment_rejects_bad_images():
    with pytest.raises(DataError):
        augment(rand_img(h=16), AugmentConfig(), sample_rng(0))
    with pytest.raises(DataError):
        augment(rand_img() * 2, AugmentConfig(), sample_rng(0))


def test_augment_config_validation():
    with pytest.raises(ConfigError) as exc:
        AugmentConfig(max_rotation_deg=200)
    assert exc.value.field == "max_rotation_deg"
    cfg = AugmentConfig()
    assert AugmentConfig.from_dict(cfg.to_dict()) == cfg


def test_hsv_roundtrip_and_full_hue_turn():
    img = rand_img(3, 8, 8)
    np.testing.assert_allclose(hsv_to_rgb(rgb_to_hsv(img)), img, atol=1e-12)
    np.testing.assert_allclose(adjust_hue(img, 1.0), img, atol=1e-12)


def test_preprocess_resizes_only_when_needed():
    img = rand_img(h=32, w=32)
    assert preprocess(img, 32) is img
    assert preprocess(img, 16).shape == (3, 16, 16)


def test_disk_dataset_is_balanced_and_seeded():
    m, imgs = disk_dataset(64, 32, seed=2)
    _, imgs2 = disk_dataset(64, 32, seed=2)
    assert m.n_pos == 32 and len(m.patients) == 64
    assert all(np.array_equal(imgs[k], imgs2[k]) for k in imgs)
