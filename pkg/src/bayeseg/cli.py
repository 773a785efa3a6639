"""``bayeseg`` command line: synth, train, infer, evaluate, flag, biomarkers, lambda-sweep.

Every command reads the same run configuration (defaults, then ``--config``,
then ``--set key.path=value`` overrides and the shortcut flags), writes its
outputs under ``run_dir`` together with the resolved config, and exits with
0 on success, 2 on a config error, 3 on a data error and 4 on a numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import biomarkers as bm
from . import checkpoint, io
from .config import ConfigError, model_config, resolve, synth_config, train_config
from .data import (DataError, LabeledSample, fit_samples, ingest_hcms, normalize, split_dataset, synth_generate,
                   to_arrays)
from .evaluation import AggregationScheme, default_class_names, mean_segmentation, per_layer_report, resize
from .tensor import NonFiniteError
from .training import NumericalError, train
from .uncertainty import SampleStack, flag_anomalies, mc_sample_batch, nearest_rank, total
from .unet import BayesUNet

log = logging.getLogger("bayeseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATASET_MANIFEST = "manifest.json"
SCORE_FIELDS = ["image_id", "image_total", "foreground_total", "aleatoric_total", "epistemic_total"]

# fixed palette for label-map sidecars; cycles for more classes
PALETTE = [(0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
           (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60)]


# -- datasets on disk ----------------------------------------------------------
def _with_splits(cfg, samples):
    """``(samples, {sample_id: "train" | "val"})`` using the configured patient-level split."""
    train_s = split_dataset(samples, cfg["data"]["split_ratio"], cfg["data"]["split_seed"])[0] if samples else []
    train_ids = {s.sample_id for s in train_s}
    return samples, {s.sample_id: ("train" if s.sample_id in train_ids else "val") for s in samples}


def _synth_samples(cfg):
    return _with_splits(cfg, synth_generate(synth_config(cfg), cfg["data"]["n_samples"]))


def write_dataset(out, samples, splits, meta):
    """Images as TNSR ``[1,H,W]`` and masks as 8-bit PGM, listed in a manifest."""
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        io.save_tnsr(out / "images" / f"{s.sample_id}.tnsr", s.image)
        io.write_pgm(out / "masks" / f"{s.sample_id}.pgm", s.mask, maxval=255)
        entries.append({"id": s.sample_id, "patient_id": s.patient_id, "cohort": s.cohort,
                        "slice_index": s.slice_index, "split": splits[s.sample_id],
                        "original_size": list(s.original_size),
                        "image": f"images/{s.sample_id}.tnsr", "mask": f"masks/{s.sample_id}.pgm"})
    counts = {k: sum(e["split"] == k for e in entries) for k in ("train", "val")}
    io.write_json(out / DATASET_MANIFEST, {"format": "bayeseg-dataset", **meta, "split_counts": counts,
                                           "samples": entries})
    return entries


def read_dataset(root):
    root = Path(root)
    try:
        manifest = io.read_json(root / DATASET_MANIFEST)
    except FileNotFoundError:
        raise DataError(f"{root}: no {DATASET_MANIFEST}; create one with `bayeseg synth`") from None
    samples, splits = [], {}
    for e in manifest["samples"]:
        image = io.read_image(root / e["image"])
        mask, _ = io.read_pgm(root / e["mask"])
        s = LabeledSample(image[None] if image.ndim == 2 else image, mask, e["patient_id"], e["cohort"],
                          e["slice_index"], tuple(e["original_size"]), e["id"])
        samples.append(s)
        splits[s.sample_id] = e["split"]
    return samples, splits


def load_data(cfg, data_dir=None):
    """Synthetic data, a dataset directory with a manifest, or an HCMS-layout tree.

    Samples keep their stored size; :func:`fit_samples` adapts them to the model.
    """
    path = data_dir or cfg["data"]["path"]
    if path is None:
        return _synth_samples(cfg)
    if not (Path(path) / DATASET_MANIFEST).exists() and Path(path).is_dir():
        return _with_splits(cfg, ingest_hcms(path))
    return read_dataset(path)


def _select(samples, splits, which):
    return [s for s in samples if which == "all" or splits[s.sample_id] == which]


# -- commands ---------------------------------------------------------------------
def cmd_synth(cfg, args):
    samples, splits = _synth_samples(cfg)
    out = Path(args.out or Path(cfg["run_dir"]) / "data")
    meta = {"synth": synth_config(cfg).to_dict(), "num_classes": synth_config(cfg).num_classes,
            "split": {k: cfg["data"][k] for k in ("n_samples", "split_ratio", "split_seed")}}
    entries = write_dataset(out, samples, splits, meta)
    print(f"wrote {len(entries)} samples to {out} "
          f"({sum(e['split'] == 'train' for e in entries)} train / {sum(e['split'] == 'val' for e in entries)} val)")
    return EXIT_OK


def _train_run(cfg, run_dir, samples, splits):
    tc = train_config(cfg)
    mc = model_config(cfg)
    train_s, val_s = (fit_samples(_select(samples, splits, w), mc.image_size) for w in ("train", "val"))
    if not train_s:
        raise DataError("no training samples")
    net = BayesUNet(mc, np.random.default_rng([cfg["seed"], 99]))
    _, history = train(net, train_s, val_s, tc, checkpoint_dir=run_dir / "checkpoint", progress=print)
    history.to_csv(run_dir / "history.csv")
    return net, history


def cmd_train(cfg, args):
    run_dir = Path(cfg["run_dir"])
    samples, splits = load_data(cfg, args.data)
    _, history = _train_run(cfg, run_dir, samples, splits)
    if len(history):
        print(f"final val_dice {history[-1].val_dice:.4f}")
    return EXIT_OK


def export_label_map(path, labels, class_names):
    io.write_pgm(path, labels, maxval=255)
    sidecar = {"classes": [{"index": c, "name": n, "color": list(PALETTE[c % len(PALETTE)])}
                           for c, n in enumerate(class_names)]}
    io.write_json(Path(path).with_suffix(".json"), sidecar)


def write_scores(path, rows):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(SCORE_FIELDS)
        for r in rows:
            wr.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


def read_scores(path):
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if not rd.fieldnames or "image_id" not in rd.fieldnames:
            raise DataError(f"{path}: expected a scores CSV with an image_id column")
        col = "image_total" if "image_total" in rd.fieldnames else rd.fieldnames[1]
        return [(r["image_id"], float(r[col])) for r in rd]


def infer_images(net, images, ids, T, seed, threads, out, class_names, original_sizes=None):
    """Sample stacks, maps, heatmaps and label maps for ``images[N,1,H,W]``.

    Stacks and maps stay at model resolution; label maps are resized back to
    ``original_sizes[i]`` (nearest neighbour) when given.
    """
    out = Path(out)
    for sub in ("stacks", "maps", "heatmaps", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for start in range(0, len(images), 8):
        probs = mc_sample_batch(net, images[start:start + 8], T, seed, threads)
        for i, (image_id, p) in enumerate(zip(ids[start:start + 8], probs), start):
            stack = SampleStack(p, image_id)
            maps = total(stack)
            io.save_tnsr(out / "stacks" / f"{image_id}.tnsr", stack.probs)
            for name in ("aleatoric", "epistemic", "total"):
                arr = getattr(maps, name)
                io.save_tnsr(out / "maps" / f"{image_id}_{name}.tnsr", arr)
                scale = io.heatmap_pgm(out / "heatmaps" / f"{image_id}_{name}.pgm", arr.sum(axis=0))
                io.write_json(out / "heatmaps" / f"{image_id}_{name}.json",
                              {"image_id": image_id, "map": name, "reduction": "sum over classes", **scale})
            labels = mean_segmentation(stack)
            if original_sizes is not None:
                labels = resize(labels, original_sizes[i], "nearest")
            export_label_map(out / "labels" / f"{image_id}.pgm", labels, class_names)
            rows.append((image_id, maps.image_total, maps.foreground_total(),
                         float(maps.aleatoric.sum()), float(maps.epistemic.sum())))
    write_scores(out / "scores.csv", rows)
    return rows


def cmd_infer(cfg, args):
    run_dir = Path(cfg["run_dir"])
    ck = Path(args.checkpoint or run_dir / "checkpoint")
    net = checkpoint.load(ck, expect=model_config(cfg))
    size = net.config.image_size
    if args.images:
        images, ids, sizes = [], [], []
        for p in args.images:
            img = io.read_image(p)
            if img.ndim != 2:
                raise DataError(f"{p}: expected a single-channel 2-d image, got shape {list(img.shape)}")
            sizes.append(img.shape)
            images.append(normalize(resize(img, size, "bilinear"))[None])
            ids.append(Path(p).stem)
        images = np.stack(images)
    else:
        samples, splits = load_data(cfg, args.data)
        chosen = _select(samples, splits, cfg["inference"]["split"])
        if not chosen:
            raise DataError(f"no samples in split {cfg['inference']['split']!r}")
        sizes = [s.original_size for s in chosen]
        images, _ = to_arrays(fit_samples(chosen, size))
        ids = [s.sample_id for s in chosen]
    if images.shape[1:] != (net.config.in_channels,) + net.config.image_size:
        raise DataError(f"images are {list(images.shape[1:])}, checkpoint expects "
                        f"{[net.config.in_channels, *net.config.image_size]}")
    names = cfg["evaluation"]["class_names"] or default_class_names(net.config.num_classes)
    out = Path(args.out or run_dir / "infer")
    rows = infer_images(net, images, ids, cfg["inference"]["T"], cfg["inference"]["seed"], args.threads,
                        out, names, sizes)
    print(f"inferred {len(rows)} images with T={cfg['inference']['T']} into {out}")
    return EXIT_OK


def _label_dir(path):
    """``{id: labels}`` from a dataset dir (manifest masks) or a dir of label PGMs."""
    path = Path(path)
    if (path / DATASET_MANIFEST).exists():
        manifest = io.read_json(path / DATASET_MANIFEST)
        return {e["id"]: io.read_pgm(path / e["mask"])[0] for e in manifest["samples"]}
    files = sorted(path.glob("*.pgm"))
    if not files and path.is_dir() and any(p.is_dir() for p in path.iterdir()):
        return {s.sample_id: s.mask for s in ingest_hcms(path)}
    if not files:
        raise DataError(f"{path}: no label maps (*.pgm) or {DATASET_MANIFEST}")
    return {f.stem: io.read_pgm(f)[0] for f in files}


def cmd_evaluate(cfg, args):
    preds, truths = _label_dir(args.pred), _label_dir(args.truth)
    ids = sorted(set(preds) & set(truths))
    if not ids:
        raise DataError("no image ids shared by the prediction and truth directories")
    missing = sorted(set(preds) - set(truths))
    if missing:
        log.warning("%d predictions have no ground truth and are skipped", len(missing))
    names = cfg["evaluation"]["class_names"]
    num_classes = len(names) if names else model_config(cfg).num_classes
    names = names or default_class_names(num_classes)
    agg = cfg["evaluation"]["aggregation"]
    scheme = None
    if agg == "five_layer":
        scheme = AggregationScheme.five_layer(names)
    elif agg:
        scheme = AggregationScheme.from_names(agg, names)
    report = per_layer_report([preds[i] for i in ids], [truths[i] for i in ids], scheme, names, num_classes)
    out = Path(args.out or Path(cfg["run_dir"]) / "evaluation")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as f:
        csv.writer(f).writerows(report.to_csv_rows())
    text = report.to_text("Proposed (agg)" if scheme else "Proposed")
    (out / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_flag(cfg, args):
    if args.scores:
        scores = read_scores(args.scores)
    elif args.maps:
        files = sorted(Path(args.maps).glob("*_total.tnsr"))
        if not files:
            raise DataError(f"{args.maps}: no *_total.tnsr maps")
        scores = [(f.name[:-len("_total.tnsr")], float(io.load_tnsr(f).sum())) for f in files]
    else:
        raise ConfigError("flag needs --scores or --maps")
    threshold = cfg["flag"]["threshold"]
    if threshold is None:
        ref = read_scores(args.clean) if args.clean else scores
        if not ref:
            raise DataError("no reference scores for the percentile threshold")
        threshold = nearest_rank([s for _, s in ref], cfg["flag"]["percentile"])
    flagged = flag_anomalies(scores, threshold)
    lookup = dict(scores)
    out = Path(args.out or Path(cfg["run_dir"]) / "flagged.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["image_id", "image_total", "threshold"])
        for i in flagged:
            wr.writerow([i, repr(lookup[i]), repr(float(threshold))])
    print(f"threshold {threshold:.6g}: flagged {len(flagged)} of {len(scores)}")
    for i in flagged:
        print(f"  {i}  {lookup[i]:.6g}")
    return EXIT_OK


def cmd_biomarkers(cfg, args):
    stacks_dir = Path(args.stacks)
    manifest = io.read_json(args.manifest) if args.manifest else None
    meta = {e["id"]: e for e in manifest["samples"]} if manifest else {}
    files = sorted(stacks_dir.glob("*.tnsr"))
    if not files:
        raise DataError(f"{stacks_dir}: no stack files")
    slices = []
    for f in files:
        stack = SampleStack(io.load_tnsr(f), f.stem)
        if f.stem not in meta and manifest is not None:
            raise DataError(f"{f.stem} is not listed in {args.manifest}")
        e = meta.get(f.stem, {"patient_id": f.stem, "cohort": "SYNTH", "slice_index": 0})
        maps = total(stack)
        classes = cfg["biomarkers"]["classes"] or list(range(1, stack.num_classes))
        for c in classes:
            if c >= stack.num_classes:
                raise ConfigError(f"biomarker class {c} outside the stack's {stack.num_classes} classes")
            slices.append(bm.slice_area(stack, c, e["patient_id"], e["cohort"], e["slice_index"], maps))
    records = bm.volumes_by_patient(slices)
    rows, notes = bm.cohort_report(records)
    out = Path(args.out or Path(cfg["run_dir"]) / "biomarkers")
    out.mkdir(parents=True, exist_ok=True)
    bm.write_slice_csv(out / "slices.csv", slices)
    bm.write_volume_csv(out / "volumes.csv", records, cfg["biomarkers"]["spacing_mm"],
                        cfg["biomarkers"]["slice_gap_mm"])
    bm.write_cohort_csv(out / "cohorts.csv", rows)
    (out / "notes.txt").write_text("".join(n + "\n" for n in notes))
    print(f"{len(records)} patient/class volumes from {len(files)} slices written to {out}")
    for n in notes:
        print(f"  note: {n}")
    return EXIT_OK


def cmd_lambda_sweep(cfg, args):
    lambdas = args.lambdas if args.lambdas is not None else cfg["lambda_sweep"]["lambdas"]
    if any(l < 0 for l in lambdas):
        raise ConfigError("lambda values must be >= 0")
    samples, splits = load_data(cfg, args.data)
    run_dir = Path(cfg["run_dir"])
    summary = []
    for lam in lambdas:
        sub = dict(cfg, train={**cfg["train"], "lambda_kl": float(lam)})
        d = run_dir / f"lambda_{lam:g}"
        d.mkdir(parents=True, exist_ok=True)
        print(f"== lambda {lam:g}")
        _, h = _train_run(sub, d, samples, splits)
        last = h[-1] if len(h) else None
        summary.append((lam, last.val_dice if last else float("nan"), last.kl if last else float("nan")))
    with open(run_dir / "lambda_summary.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["lambda", "final_val_dice", "final_kl"])
        for lam, d, k in summary:
            wr.writerow([repr(float(lam)), repr(d), repr(k)])
    for lam, d, k in summary:
        print(f"lambda {lam:g}: val_dice {d:.4f}  kl {k:.1f}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "evaluate": cmd_evaluate,
            "flag": cmd_flag, "biomarkers": cmd_biomarkers, "lambda-sweep": cmd_lambda_sweep}


def _lambda_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad lambda list {text!r}") from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=3 (value parsed as JSON)")
    common.add_argument("--seed", type=int, help="shortcut for seed=")
    common.add_argument("--run-dir", help="shortcut for run_dir=")
    common.add_argument("--epochs", type=int, help="shortcut for train.epochs=")
    common.add_argument("--lambda-kl", type=float, help="shortcut for train.lambda_kl=")
    common.add_argument("--T", type=int, help="shortcut for inference.T=")
    common.add_argument("--threshold", type=float, help="shortcut for flag.threshold=")
    common.add_argument("--percentile", type=float, help="shortcut for flag.percentile=")
    common.add_argument("--threads", type=int, default=1, help="worker threads for MC sampling (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bayeseg", description="Bayesian U-Net segmentation with MC uncertainty.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="write a synthetic phantom dataset")
    s.add_argument("--out", help="dataset directory (default <run_dir>/data)")
    s = sub.add_parser("train", parents=[common], help="train and checkpoint a model")
    s.add_argument("--data", help="dataset directory (default: synthesize from config)")
    s = sub.add_parser("infer", parents=[common], help="MC sampling, uncertainty maps and label maps")
    s.add_argument("--checkpoint", help="checkpoint directory (default <run_dir>/checkpoint)")
    s.add_argument("--data", help="dataset directory (default: synthesize from config)")
    s.add_argument("--images", nargs="+", help="individual PGM/TNSR images instead of a dataset")
    s.add_argument("--out", help="output directory (default <run_dir>/infer)")
    s = sub.add_parser("evaluate", parents=[common], help="per-layer Dice report")
    s.add_argument("--pred", required=True, help="directory of predicted label PGMs")
    s.add_argument("--truth", required=True, help="dataset directory or directory of label PGMs")
    s.add_argument("--out", help="output directory (default <run_dir>/evaluation)")
    s = sub.add_parser("flag", parents=[common], help="flag images by total uncertainty")
    s.add_argument("--scores", help="scores CSV written by infer")
    s.add_argument("--maps", help="directory of *_total.tnsr maps")
    s.add_argument("--clean", help="scores CSV of clean reference images for --percentile")
    s.add_argument("--out", help="output CSV (default <run_dir>/flagged.csv)")
    s = sub.add_parser("biomarkers", parents=[common], help="layer areas and volumes")
    s.add_argument("--stacks", required=True, help="directory of stack TNSR files")
    s.add_argument("--manifest", help="dataset manifest giving patient, cohort and slice per image")
    s.add_argument("--out", help="output directory (default <run_dir>/biomarkers)")
    s = sub.add_parser("lambda-sweep", parents=[common], help="train once per KL weight")
    s.add_argument("--lambdas", type=_lambda_list, help="comma-separated list, e.g. 0,0.1,1")
    s.add_argument("--data", help="dataset directory (default: synthesize from config)")
    return p


def _overrides(args):
    out = list(args.set)
    shortcuts = [("seed", "seed"), ("run_dir", "run_dir"), ("epochs", "train.epochs"),
                 ("lambda_kl", "train.lambda_kl"), ("T", "inference.T"),
                 ("threshold", "flag.threshold"), ("percentile", "flag.percentile")]
    for attr, key in shortcuts:
        value = getattr(args, attr)
        if value is not None:
            node = value
            for part in reversed(key.split(".")):
                node = {part: node}
            out.append(node)
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = resolve(args.config, _overrides(args))
        run_dir = Path(cfg["run_dir"])
        run_dir.mkdir(parents=True, exist_ok=True)
        io.write_json(run_dir / f"config.{args.command}.json", cfg)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, io.FormatError, checkpoint.CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
