"""Layer area and volume biomarkers with uncertainty taken from the sample stack.

A slice's area for class ``c`` is the pixel count of ``c`` in the mean
segmentation. Its uncertainty is the class's summed total-variance map. A
second estimate, the spread of the per-sample areas across the ``T`` draws,
is exported next to it as ``area_sample_std``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .evaluation import mean_segmentation
from .uncertainty import total

SLICE_FIELDS = ["patient_id", "cohort", "class", "slice_index", "area_px", "uncertainty",
                "area_sample_std"]
VOLUME_FIELDS = ["patient_id", "cohort", "class", "num_slices", "volume_px", "volume_uncertainty",
                 "volume_mm3"]
COHORT_FIELDS = ["cohort", "class", "num_patients", "mean_volume_px", "std_volume_px",
                 "mean_volume_uncertainty"]


@dataclass
class SliceArea:
    patient_id: str
    cohort: str
    class_index: int
    slice_index: int
    area: float
    uncertainty: float
    area_sample_std: float = 0.0


@dataclass
class BiomarkerRecord:
    patient_id: str
    cohort: str
    class_index: int
    slices: list = field(default_factory=list)  # SliceArea, ordered by slice_index

    @property
    def areas(self):
        return [s.area for s in self.slices]

    @property
    def volume(self) -> float:
        return float(sum(self.areas))

    @property
    def volume_uncertainty(self) -> float:
        return float(sum(s.uncertainty for s in self.slices))


def layer_area(stack, maps, c: int):
    """``(area, uncertainty)`` of class ``c`` for one slice."""
    if not 0 <= c < maps.per_class_total.shape[0]:
        raise ValueError(f"class {c} outside [0, {maps.per_class_total.shape[0]})")
    area = int((mean_segmentation(stack) == c).sum())
    return float(area), float(maps.per_class_total[c])


def area_sample_std(stack, c: int) -> float:
    """Population std over samples of the per-sample argmax area of class ``c``."""
    p = getattr(stack, "probs", stack)
    counts = (np.asarray(p).argmax(axis=1) == c).sum(axis=(1, 2))
    return float(counts.std())


def slice_area(stack, c, patient_id, cohort, slice_index, maps=None) -> SliceArea:
    maps = total(stack) if maps is None else maps
    area, unc = layer_area(stack, maps, c)
    return SliceArea(patient_id, cohort, c, slice_index, area, unc, area_sample_std(stack, c))


def patient_volume(slices) -> BiomarkerRecord:
    """Combine one patient's per-slice areas for one class into a volume."""
    slices = list(slices)
    if not slices:
        raise ValueError("patient_volume needs at least one slice")
    keys = {(s.patient_id, s.cohort, s.class_index) for s in slices}
    if len(keys) != 1:
        raise ValueError(f"slices mix patients or classes: {sorted(keys)}")
    pid, cohort, c = keys.pop()
    return BiomarkerRecord(pid, cohort, c, sorted(slices, key=lambda s: s.slice_index))


def volumes_by_patient(slices):
    """Group slice areas by (patient, class) and build one record per group."""
    groups = {}
    for s in slices:
        groups.setdefault((s.patient_id, s.class_index), []).append(s)
    return [patient_volume(g) for _, g in sorted(groups.items())]


def cohort_report(records):
    """Per cohort and class: patient count, mean and population std of volume.

    Returns ``(rows, notes)``. HC and MS are always expected; an empty one is
    left out and mentioned in ``notes``.
    """
    if not records:
        raise ValueError("cohort_report needs at least one record")
    rows, notes = [], []
    present = {r.cohort for r in records}
    classes = sorted({r.class_index for r in records})
    for cohort in sorted(present | {"HC", "MS"}):
        if cohort not in present:
            notes.append(f"cohort {cohort} has no patients; omitted")
            continue
        for c in classes:
            vols = [r.volume for r in records if r.cohort == cohort and r.class_index == c]
            if not vols:
                notes.append(f"cohort {cohort} has no patients for class {c}; omitted")
                continue
            uncs = [r.volume_uncertainty for r in records if r.cohort == cohort and r.class_index == c]
            rows.append({"cohort": cohort, "class": c, "num_patients": len(vols),
                         "mean_volume_px": float(np.mean(vols)), "std_volume_px": float(np.std(vols)),
                         "mean_volume_uncertainty": float(np.mean(uncs))})
    return rows, notes


def pixel_area_mm2(spacing_mm):
    """Area of one pixel from ``(row_spacing, col_spacing)`` in millimetres."""
    dy, dx = spacing_mm
    if dy <= 0 or dx <= 0:
        raise ValueError("pixel spacing must be positive")
    return float(dy) * float(dx)


def write_slice_csv(path, slices):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(SLICE_FIELDS)
        for s in slices:
            wr.writerow([s.patient_id, s.cohort, s.class_index, s.slice_index, repr(s.area),
                         repr(s.uncertainty), repr(s.area_sample_std)])


def write_volume_csv(path, records, spacing_mm=None, slice_gap_mm=None):
    """Volume rows; ``volume_mm3`` is filled only when both spacings are known."""
    px = pixel_area_mm2(spacing_mm) if spacing_mm else None
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(VOLUME_FIELDS)
        for r in records:
            mm3 = repr(r.volume * px * slice_gap_mm) if px and slice_gap_mm else ""
            wr.writerow([r.patient_id, r.cohort, r.class_index, len(r.slices), repr(r.volume),
                         repr(r.volume_uncertainty), mm3])


def write_cohort_csv(path, rows):
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, COHORT_FIELDS)
        wr.writeheader()
        for row in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_slice_csv(path):
    with open(path, newline="") as f:
        return [SliceArea(r["patient_id"], r["cohort"], int(r["class"]), int(r["slice_index"]),
                          float(r["area_px"]), float(r["uncertainty"]), float(r["area_sample_std"]))
                for r in csv.DictReader(f)]
