"""Dataset ingestion, patient-disjoint splitting, balanced sampling, augmentation."""

from .augment import AugmentConfig, augment, preprocess, resize_bilinear, sample_rng
from .images import ImageSource, load_image, save_image
from .manifest import (
    Manifest,
    SampleRecord,
    dedup_report,
    load_manifest,
    read_duplicate_list,
    remove_duplicates,
    write_manifest,
)
from .sampler import balanced_sampler, class_balanced_weights
from .synthetic import disk_dataset, random_manifest, write_disk_dataset
from .split import check_patient_disjoint, patient_split, split_summary, write_split

__all__ = [
    "AugmentConfig",
    "ImageSource",
    "Manifest",
    "SampleRecord",
    "augment",
    "balanced_sampler",
    "check_patient_disjoint",
    "class_balanced_weights",
    "dedup_report",
    "disk_dataset",
    "load_image",
    "load_manifest",
    "patient_split",
    "preprocess",
    "random_manifest",
    "read_duplicate_list",
    "remove_duplicates",
    "resize_bilinear",
    "sample_rng",
    "save_image",
    "split_summary",
    "write_disk_dataset",
    "write_manifest",
    "write_split",
]
