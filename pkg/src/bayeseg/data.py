"""Dataset construction: boundary rasterization, preprocessing, splitting and
the synthetic layered phantom used for desk-scale experiments."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .evaluation import resize

log = logging.getLogger(__name__)

COHORTS = ("HC", "MS", "SYNTH")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class CrossingBoundaryError(DataError):
    pass


@dataclass
class Boundaries:
    """Surface row coordinates, one array entry per image column, top to bottom."""

    rows: np.ndarray
    names: list = None

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if self.names is None:
            self.names = [f"surface{k}" for k in range(len(self.rows))]
        if len(self.names) != len(self.rows):
            raise DataError("one name per surface required")

    def check(self):
        diff = np.diff(self.rows, axis=0)
        bad = np.argwhere(diff < 0)
        if len(bad):
            k, col = bad[0]
            raise CrossingBoundaryError(
                f"surfaces {self.names[k]!r} and {self.names[k + 1]!r} cross at column {col} "
                f"({self.rows[k, col]:g} > {self.rows[k + 1, col]:g})"
            )


@dataclass
class LabeledSample:
    image: np.ndarray  # [1, H, W]
    mask: np.ndarray  # [H, W] integer labels
    patient_id: str
    cohort: str
    slice_index: int
    original_size: tuple = None
    sample_id: str = None

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.image.shape[1:] != self.mask.shape:
            raise DataError(
                f"{self.patient_id}/{self.slice_index}: image {self.image.shape[1:]} "
                f"and mask {self.mask.shape} differ"
            )
        if self.cohort not in COHORTS:
            raise DataError(f"unknown cohort {self.cohort!r}")
        if self.original_size is None:
            self.original_size = tuple(self.mask.shape)
        if self.sample_id is None:
            self.sample_id = f"{self.patient_id}_s{self.slice_index:03d}"


def masks_from_boundaries(b: Boundaries, dims) -> np.ndarray:
    """Rasterize the band between each consecutive surface pair.

    Band ``k`` (1-based) covers rows ``round(b[k-1]) <= r < round(b[k])``;
    everything above the first or below the last surface is background.
    Rounding is half-up.
    """
    h, w = dims
    if b.rows.shape[1] != w:
        raise DataError(f"boundaries have {b.rows.shape[1]} columns, image has {w}")
    b.check()
    edges = np.floor(b.rows + 0.5).astype(np.int64)
    r = np.arange(h)[:, None]
    mask = np.zeros((h, w), dtype=np.int64)
    for k in range(len(edges) - 1):
        mask[(r >= edges[k]) & (r < edges[k + 1])] = k + 1
    return mask


def normalize(image, mean=0.5, var=0.5) -> np.ndarray:
    """Affine per-image rescale to the target mean and (population) variance."""
    image = np.asarray(image, dtype=np.float64)
    m, s = image.mean(), image.std()
    if s == 0:
        warnings.warn("constant image: variance cannot be normalized, mean-shifted only")
        return image - m + mean
    return (image - m) * (math.sqrt(var) / s) + mean


def split_dataset(samples, ratio=0.8, seed=0):
    """Patient-level split, done independently per cohort then combined.

    Each cohort contributes ``floor(n_patients * ratio + 0.5)`` patients to
    the training set; all slices of a patient stay together.
    """
    if not samples:
        raise DataError("cannot split an empty dataset")
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    by_cohort = {}
    for s in samples:
        by_cohort.setdefault(s.cohort, set()).add(s.patient_id)
    rng = np.random.default_rng(seed)
    train_ids = set()
    for cohort in sorted(by_cohort):
        patients = sorted(by_cohort[cohort])
        if not patients:
            raise DataError(f"cohort {cohort} has no patients")
        order = rng.permutation(len(patients))
        n_train = int(math.floor(len(patients) * ratio + 0.5))
        train_ids.update(patients[i] for i in order[:n_train])
    train = [s for s in samples if s.patient_id in train_ids]
    test = [s for s in samples if s.patient_id not in train_ids]
    if not test:
        warnings.warn("split produced an empty test set")
    return train, test


# -- synthetic phantom -------------------------------------------------------
ARTIFACTS = ("none", "additive_noise", "shadow", "low_contrast")


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    num_layers: int = 3
    layer_intensities: list = field(default_factory=lambda: [0.95, 0.4, 0.7])
    background_intensity: float = 0.05
    layer_thickness: list = field(default_factory=lambda: [13.0, 14.0, 13.0])
    top_row: float = 10.0
    noise_std: float = 0.04
    amplitude: tuple = (1.0, 4.0)
    frequency: tuple = (0.5, 2.0)
    harmonics: int = 2
    slices_per_patient: int = 5
    seed: int = 0
    artifact: dict = field(default_factory=lambda: {"kind": "none"})

    def validate(self):
        if len(self.layer_intensities) != self.num_layers:
            raise ValueError("layer_intensities needs one entry per layer")
        if len(self.layer_thickness) != self.num_layers:
            raise ValueError("layer_thickness needs one entry per layer")
        vals = list(self.layer_intensities) + [self.background_intensity]
        if min(vals) < 0 or max(vals) > 1:
            raise ValueError("intensities must lie in [0, 1]")
        if self.artifact.get("kind", "none") not in ARTIFACTS:
            raise ValueError(f"artifact kind must be one of {ARTIFACTS}")
        if self.slices_per_patient < 1 or self.harmonics < 1:
            raise ValueError("slices_per_patient and harmonics must be positive")
        return self

    @property
    def num_classes(self):
        return self.num_layers + 1

    def to_dict(self):
        d = asdict(self)
        d["amplitude"] = list(self.amplitude)
        d["frequency"] = list(self.frequency)
        return d


def synth_boundaries(cfg: SynthConfig, rng, patient_rng=None) -> Boundaries:
    """Smooth, non-crossing surfaces: a shared undulation plus per-surface wiggle."""
    patient_rng = rng if patient_rng is None else patient_rng
    w = cfg.width
    x = np.arange(w) / w * 2 * np.pi
    scale = patient_rng.uniform(0.85, 1.15, size=cfg.num_layers)

    def wave(amp_range):
        y = np.zeros(w)
        for h in range(1, cfg.harmonics + 1):
            amp = rng.uniform(*amp_range) / h
            freq = rng.uniform(*cfg.frequency) * h
            y += amp * np.sin(freq * x + rng.uniform(0, 2 * np.pi))
        return y

    top = cfg.top_row + rng.uniform(-3, 3) + wave(cfg.amplitude)
    rows = [top]
    for k in range(cfg.num_layers):
        thick = cfg.layer_thickness[k] * scale[k] + wave((0.3, 1.2))
        rows.append(rows[-1] + np.maximum(thick, 1.0))
    rows = np.clip(np.array(rows), 0, cfg.height)
    return Boundaries(rows, [f"surface{k}" for k in range(len(rows))])


def apply_artifact(signal, artifact, rng):
    """Corrupt the noise-free signal (shadow, low contrast); returns the image
    and extra recording-noise std to add afterwards."""
    kind = artifact.get("kind", "none")
    out = signal.copy()
    extra_noise = 0.0
    if kind == "none":
        pass
    elif kind == "additive_noise":
        extra_noise = float(artifact.get("std", 0.2))
    elif kind == "shadow":
        att = float(artifact.get("attenuation", 0.2))
        if "columns" in artifact and artifact["columns"] is not None:
            c0, c1 = artifact["columns"]
        else:
            width = int(artifact.get("width", signal.shape[1] // 3))
            c0 = int(rng.integers(0, signal.shape[1] - width + 1))
            c1 = c0 + width
        out[:, c0:c1] *= att
    elif kind == "low_contrast":
        gain = float(artifact.get("gain", 0.3))
        m = out.mean()
        out = m + gain * (out - m)
    else:
        raise ValueError(f"unknown artifact kind {kind!r}")
    return out, extra_noise


def synth_sample(cfg: SynthConfig, index: int) -> LabeledSample:
    patient = index // cfg.slices_per_patient
    rng = np.random.default_rng([cfg.seed, 0, index])
    patient_rng = np.random.default_rng([cfg.seed, 1, patient])
    b = synth_boundaries(cfg, rng, patient_rng)
    mask = masks_from_boundaries(b, (cfg.height, cfg.width))
    levels = np.array([cfg.background_intensity] + list(cfg.layer_intensities))
    signal = levels[mask]
    signal, extra = apply_artifact(signal, cfg.artifact, rng)
    noise_std = math.hypot(cfg.noise_std, extra)
    image = signal + noise_std * rng.standard_normal(signal.shape) if noise_std else signal
    image = np.clip(image, 0.0, 1.0)
    return LabeledSample(
        image=image[None], mask=mask, patient_id=f"SYN{patient:04d}", cohort="SYNTH",
        slice_index=index % cfg.slices_per_patient,
    )


def synth_generate(cfg: SynthConfig, n: int, start: int = 0):
    """``n`` phantom slices; sample ``i`` depends only on ``(cfg, start + i)``."""
    cfg.validate()
    return [synth_sample(cfg, start + i) for i in range(n)]


def fit_sample(s: LabeledSample, size) -> LabeledSample:
    """Resample to the model's ``(H, W)``: bilinear image, nearest-neighbour mask.

    ``original_size`` is carried over so predictions can be resized back.
    """
    size = tuple(int(v) for v in size)
    if s.mask.shape == size:
        return s
    return LabeledSample(resize(s.image, size, "bilinear"), resize(s.mask, size, "nearest"),
                         s.patient_id, s.cohort, s.slice_index, s.original_size, s.sample_id)


def fit_samples(samples, size):
    return [fit_sample(s, size) for s in samples]


def to_arrays(samples, normalized=True):
    """Stack samples into ``images[N,1,H,W]`` and ``masks[N,H,W]``."""
    imgs = np.stack([normalize(s.image) if normalized else s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return imgs, masks


# -- ingest ------------------------------------------------------------------
INGEST_LAYOUT = """expected layout:
  <root>/<patient_id>/<slice>.pgm | <slice>.tnsr       image (8/16-bit PGM or TNSR)
  <root>/<patient_id>/<slice>_boundaries.csv            one row per surface, one value per column
patient ids start with HC or MS"""


def read_boundaries_csv(path) -> Boundaries:
    names, rows = [], []
    with open(path, newline="") as f:
        for k, row in enumerate(csv.reader(f)):
            if not row:
                continue
            try:
                vals = [float(v) for v in row]
                name = f"surface{k}"
            except ValueError:
                name, vals = row[0], [float(v) for v in row[1:]]
            names.append(name)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no surfaces")
    if len({len(r) for r in rows}) != 1:
        raise DataError(f"{path}: surfaces have differing column counts")
    return Boundaries(np.array(rows), names)


def write_boundaries_csv(path, b: Boundaries):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        for name, row in zip(b.names, b.rows):
            wr.writerow([name] + [repr(float(v)) for v in row])


def ingest_hcms(root, num_surfaces=None):
    """Load every patient directory under ``root`` into labeled samples.

    All files are checked first; any problem aborts the whole ingest with a
    list of per-file diagnostics.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory\n{INGEST_LAYOUT}")
    patients = sorted(p for p in root.iterdir() if p.is_dir())
    if not patients:
        raise DataError(f"{root} contains no patient directories\n{INGEST_LAYOUT}")
    samples, problems = [], []
    for pdir in patients:
        pid = pdir.name
        cohort = pid[:2].upper()
        if cohort not in ("HC", "MS"):
            problems.append(f"{pdir}: patient id must start with HC or MS")
            continue
        images = sorted(p for p in pdir.iterdir() if p.suffix in (".pgm", ".tnsr"))
        if not images:
            problems.append(f"{pdir}: no images")
        for idx, img_path in enumerate(images):
            bpath = img_path.with_name(img_path.stem + "_boundaries.csv")
            if not bpath.exists():
                problems.append(f"{img_path}: missing {bpath.name}")
                continue
            try:
                img = io.read_image(img_path)
                b = read_boundaries_csv(bpath)
                if num_surfaces is not None and len(b.rows) != num_surfaces:
                    raise DataError(f"expected {num_surfaces} surfaces, found {len(b.rows)}")
                mask = masks_from_boundaries(b, img.shape)
            except (DataError, ValueError, OSError) as exc:
                problems.append(f"{bpath}: {exc}")
                continue
            samples.append(LabeledSample(
                image=img[None], mask=mask, patient_id=pid, cohort=cohort, slice_index=idx,
                original_size=tuple(img.shape), sample_id=f"{pid}_{img_path.stem}"))
    if problems:
        raise DataError("ingest refused:\n  " + "\n  ".join(problems))
    log.info("ingested %d slices from %d patients", len(samples), len(patients))
    return samples
