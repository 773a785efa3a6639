"""Point-estimate segmentation, Dice scoring, label aggregation and resizing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OCT_CLASSES = ("Background", "RNFL", "GCP", "IPL", "INL", "OPL", "ONL", "IS", "OS", "RPE")


def default_class_names(num_classes):
    if num_classes == len(OCT_CLASSES):
        return list(OCT_CLASSES)
    return ["Background"] + [f"Layer{k}" for k in range(1, num_classes)]


@dataclass
class AggregationScheme:
    """Relabelling ``source -> target`` applied to both prediction and truth."""

    mapping: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mapping = {int(k): int(v) for k, v in self.mapping.items()}
        for k, v in self.mapping.items():
            if self.mapping.get(v, v) != v:
                raise ValueError(f"mapping not idempotent: {k}->{v}->{self.mapping[v]}")

    @classmethod
    def five_layer(cls, class_names=OCT_CLASSES):
        """Merge the nine layers into RNFL, GCP, INL, ONL and RPE."""
        idx = {n: i for i, n in enumerate(class_names)}
        pairs = [("IPL", "GCP"), ("OPL", "INL"), ("IS", "ONL"), ("OS", "ONL")]
        return cls({idx[a]: idx[b] for a, b in pairs})

    @classmethod
    def from_names(cls, mapping, class_names):
        idx = {n: i for i, n in enumerate(class_names)}
        return cls({idx[a]: idx[b] for a, b in mapping.items()})

    def apply(self, labels):
        labels = np.asarray(labels)
        lut = np.arange(max([labels.max(initial=0)] + list(self.mapping) + list(self.mapping.values())) + 1)
        for k, v in self.mapping.items():
            lut[k] = v
        return lut[labels]

    def removed(self):
        return set(self.mapping)


def mean_segmentation(stack) -> np.ndarray:
    """Argmax over classes of the sample-mean probability (ties -> lowest index)."""
    p = getattr(stack, "probs", stack)
    return np.asarray(p).mean(axis=0).argmax(axis=0)


def dice(pred, truth, c, empty=1.0) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"dice: shape mismatch {pred.shape} vs {truth.shape}")
    a, b = pred == c, truth == c
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return empty
    return 2.0 * int((a & b).sum()) / denom


@dataclass
class DiceReport:
    class_names: list
    classes: list  # reported class indices
    mean: dict
    std: dict
    per_image: list  # one dict per image
    average: float
    average_std: float

    def rows(self):
        head = ["Layer"] + [self.class_names[c] for c in self.classes] + ["Average"]
        vals = ["Dice"] + [_fmt(self.mean[c], self.std[c]) for c in self.classes]
        vals.append(_fmt(self.average, self.average_std))
        return head, vals

    def to_text(self, label="Proposed"):
        head, vals = self.rows()
        vals[0] = label
        widths = [max(len(h), len(v)) for h, v in zip(head, vals)]
        line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths))
        return line(head) + "\n" + line(vals) + "\n"

    def to_csv_rows(self):
        rows = [["class", "name", "mean", "std", "n"]]
        for c in self.classes:
            n = sum(1 for d in self.per_image if c in d)
            rows.append([c, self.class_names[c], repr(self.mean[c]), repr(self.std[c]), n])
        rows.append(["", "Average", repr(self.average), repr(self.average_std), len(self.per_image)])
        return rows


def _fmt(m, s):
    return f"{100 * m:.1f}±{100 * s:.1f}"


def per_layer_report(preds, truths, scheme=None, class_names=None, num_classes=None,
                     include_background=False, skip_absent=True) -> DiceReport:
    """Per-class mean and population std of Dice over images.

    With ``skip_absent`` a class missing from an image's ground truth does not
    contribute for that image. The overall average is the mean over the
    reported classes of their per-class means (its std likewise).
    """
    preds, truths = list(preds), list(truths)
    if not preds or len(preds) != len(truths):
        raise ValueError("need a non-empty set of paired label maps")
    if num_classes is None:
        num_classes = int(max(max(p.max() for p in preds), max(t.max() for t in truths))) + 1
        if class_names is not None:
            num_classes = max(num_classes, len(class_names))
    class_names = list(class_names or default_class_names(num_classes))
    classes = [c for c in range(num_classes) if include_background or c != 0]
    if scheme is not None:
        preds = [scheme.apply(p) for p in preds]
        truths = [scheme.apply(t) for t in truths]
        classes = [c for c in classes if c not in scheme.removed()]
    per_image = []
    for p, t in zip(preds, truths):
        d = {}
        for c in classes:
            if skip_absent and not (t == c).any():
                continue
            d[c] = dice(p, t, c)
        per_image.append(d)
    mean, std = {}, {}
    for c in classes:
        vals = [d[c] for d in per_image if c in d]
        mean[c] = float(np.mean(vals)) if vals else float("nan")
        std[c] = float(np.std(vals)) if vals else float("nan")
    present = [c for c in classes if not np.isnan(mean[c])]
    avg = float(np.mean([mean[c] for c in present])) if present else float("nan")
    avg_std = float(np.mean([std[c] for c in present])) if present else float("nan")
    return DiceReport(class_names, classes, mean, std, per_image, avg, avg_std)


def mean_foreground_dice(preds, truths, num_classes) -> float:
    return per_layer_report(preds, truths, num_classes=num_classes).average


def resize(array, size, mode="nearest"):
    """Resize the trailing two axes to ``size = (H, W)``.

    ``nearest`` maps output pixel ``i`` to source ``floor(i * in / out)``;
    ``bilinear`` samples at half-pixel centres with edge clamping.
    """
    a = np.asarray(array)
    oh, ow = int(size[0]), int(size[1])
    if oh <= 0 or ow <= 0:
        raise ValueError("target size must be positive")
    ih, iw = a.shape[-2:]
    if (ih, iw) == (oh, ow):
        return a.copy()
    if mode == "nearest":
        ri = (np.arange(oh) * ih) // oh
        ci = (np.arange(ow) * iw) // ow
        return a[..., ri[:, None], ci[None, :]]
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    a = a.astype(np.float64)

    def coords(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    r0, r1, fr = coords(oh, ih)
    c0, c1, fc = coords(ow, iw)
    top = a[..., r0, :] * (1 - fr)[:, None] + a[..., r1, :] * fr[:, None]
    return top[..., c0] * (1 - fc) + top[..., c1] * fc
