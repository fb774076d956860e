"""ISIC 2020 style manifests: parsing, writing and duplicate removal."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from ..errors import DataError

REQUIRED_COLUMNS = ("image_name", "patient_id", "target")
ISIC_COLUMNS = ("image_name", "patient_id", "sex", "age_approx",
                "anatom_site_general_challenge", "diagnosis", "benign_malignant", "target")
SEXES = ("male", "female")


@dataclass(frozen=True)
class SampleRecord:
    image_name: str
    patient_id: str
    target: int
    sex: Optional[str] = None
    age_approx: Optional[float] = None
    anatom_site: Optional[str] = None
    diagnosis: Optional[str] = None
    benign_malignant: Optional[str] = None


class Manifest:
    """Ordered, immutable collection of records with a patient index."""

    def __init__(self, records: Iterable[SampleRecord] = ()):
        self.records = tuple(records)
        seen = set()
        for i, r in enumerate(self.records):
            if r.image_name in seen:
                raise DataError(f"duplicate image_name {r.image_name!r}", row=i + 2)
            if r.target not in (0, 1):
                raise DataError(f"target must be 0 or 1, got {r.target!r}", row=i + 2)
            seen.add(r.image_name)
        index: Dict[str, List[int]] = defaultdict(list)
        for i, r in enumerate(self.records):
            index[r.patient_id].append(i)
        self.by_patient = dict(index)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.records == other.records

    @property
    def image_names(self) -> List[str]:
        return [r.image_name for r in self.records]

    @property
    def targets(self) -> List[int]:
        return [r.target for r in self.records]

    @property
    def n_pos(self) -> int:
        return sum(r.target for r in self.records)

    @property
    def n_neg(self) -> int:
        return len(self.records) - self.n_pos

    @property
    def patients(self) -> List[str]:
        return list(self.by_patient)

    def subset(self, indices: Iterable[int]) -> "Manifest":
        return Manifest(self.records[i] for i in indices)

    def counts(self) -> dict:
        return {"n": len(self), "n_pos": self.n_pos, "n_neg": self.n_neg,
                "n_patients": len(self.by_patient)}

    def to_csv(self, path) -> None:
        write_manifest(self, path)


def _optional(row: dict, key: str) -> Optional[str]:
    v = (row.get(key) or "").strip()
    return v or None


def _parse_row(row: dict, line: int) -> SampleRecord:
    name = (row.get("image_name") or "").strip()
    patient = (row.get("patient_id") or "").strip()
    if not name:
        raise DataError("empty image_name", row=line)
    if not patient:
        raise DataError("empty patient_id", row=line)
    raw_target = (row.get("target") or "").strip()
    if raw_target not in ("0", "1"):
        raise DataError(f"target must be 0 or 1, got {raw_target!r}", row=line)
    sex = _optional(row, "sex")
    if sex is not None and sex not in SEXES:
        raise DataError(f"sex must be one of {SEXES} or empty, got {sex!r}", row=line)
    age = _optional(row, "age_approx")
    if age is not None:
        try:
            age = float(age)
        except ValueError:
            raise DataError(f"age_approx is not numeric: {age!r}", row=line) from None
    site = _optional(row, "anatom_site_general_challenge") or _optional(row, "anatom_site")
    return SampleRecord(image_name=name, patient_id=patient, target=int(raw_target), sex=sex,
                        age_approx=age, anatom_site=site, diagnosis=_optional(row, "diagnosis"),
                        benign_malignant=_optional(row, "benign_malignant"))


def load_manifest(csv_path) -> Manifest:
    """Parse a manifest CSV; missing optional fields become ``None``."""
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise DataError(f"missing required column {col!r}", row=1)
        records = [_parse_row(row, line) for line, row in enumerate(reader, start=2)]
    return Manifest(records)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_manifest(m: Manifest, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ISIC_COLUMNS)
        for r in m.records:
            w.writerow([r.image_name, r.patient_id, _fmt(r.sex), _fmt(r.age_approx),
                        _fmt(r.anatom_site), _fmt(r.diagnosis), _fmt(r.benign_malignant),
                        r.target])


def read_duplicate_list(path) -> List[str]:
    """Newline-delimited image names; blank lines and ``#`` comments skipped."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    return out


def remove_duplicates(m: Manifest, duplicate_ids: Sequence[str]) -> Manifest:
    drop = set(duplicate_ids)
    return Manifest(r for r in m.records if r.image_name not in drop)


def dedup_report(m: Manifest, duplicate_ids: Sequence[str]) -> dict:
    present = set(m.image_names)
    requested = set(duplicate_ids)
    return {"requested": len(requested), "removed": len(requested & present),
            "absent": sorted(requested - present)}
