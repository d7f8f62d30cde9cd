"""Command-line entry point: ``sharknet <subcommand> [options]``.

Every subcommand resolves the run configuration, derives a content-addressed
run id and writes its artifacts under ``<output_dir>/<run_id>/<stage>/``.
Exit codes: 1 configuration error, 2 data error, 3 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as rc
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ImageSet, SplitPlan, load_images, load_manifest, stratified_split
from .errors import ConfigError, DataError, SharkNetError
from .explain import (CoalitionMasker, foreground_mass_fraction, gradient_path_attribution, kernel_shap,
                      sample_background)
from .metrics import compute_metrics, confusion_matrix
from .model import build_sharknet, extract_features, predict_logits
from .plots import render_confusion, render_curves, render_heatmap, render_scatter
from .synth import SynthSpec, synthesize_tooth_dataset
from .train import SearchSpace, TrainConfig, hyperparameter_search, kfold_cv, train, write_trials_csv
from .tsne import TsneConfig, calibrate_affinities, standardize, tsne

logger = logging.getLogger("sharknet")

STAGES = ("synth", "train", "cv", "search", "eval", "features", "tsne", "explain", "report")


class Run:
    def __init__(self, cfg: dict, run_id: str | None, force: bool):
        self.cfg = cfg
        self.id = run_id or rc.run_id(cfg)
        self.dir = Path(cfg["output_dir"]) / self.id
        self.force = force
        self.dir.mkdir(parents=True, exist_ok=True)
        cfg_path = self.dir / "config.json"
        text = rc.dumps(cfg)
        if cfg_path.exists() and cfg_path.read_text() != text and not force:
            raise ConfigError(f"{cfg_path} holds a different configuration; use --force to replace it")
        cfg_path.write_text(text)

    def stage(self, name: str) -> Path:
        d = self.dir / name
        if d.exists() and any(d.iterdir()) and not self.force:
            raise ConfigError(f"{d} already exists; rerun with --force to overwrite")
        d.mkdir(parents=True, exist_ok=True)
        return d

    # -- shared inputs --

    def manifest_path(self) -> Path:
        m = self.cfg["data"]["manifest"]
        path = Path(m) if m else self.dir / "synth" / "manifest.csv"
        if not path.is_file():
            raise DataError(f"manifest not found: {path} (run 'synth' first or set data.manifest)")
        return path

    def images(self) -> ImageSet:
        size = self.cfg["model"]["input_size"]
        return load_images(load_manifest(self.manifest_path()), (size, size), self.cfg["data"]["mask_background"])

    def split(self, data: ImageSet) -> SplitPlan:
        path = self.dir / "split.json"
        if path.exists():
            return SplitPlan.from_json(path.read_text())
        d = self.cfg["data"]
        plan = stratified_split(data, d["test_fraction"], self.cfg["seed"], d["val_fraction"])
        path.write_text(plan.to_json())
        return plan

    def train_config(self, **override) -> TrainConfig:
        return TrainConfig(seed=self.cfg["seed"], **{**self.cfg["train"], **override})

    def build(self, data: ImageSet):
        size = self.cfg["model"]["input_size"]
        return build_sharknet((size, size, 3), len(data.class_names), self.cfg["model"]["dropout"],
                              self.cfg["seed"], data.class_names)

    def checkpoint(self):
        path = self.dir / "train" / "model.snx"
        if not path.is_file():
            raise DataError(f"checkpoint not found: {path} (run 'train' first)")
        return load_checkpoint(path)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_synth(run: Run, args) -> None:
    out = run.stage("synth")
    s = run.cfg["data"]["synth"]
    manifest = synthesize_tooth_dataset(SynthSpec(s["num_classes"], s["per_class"], s["image_size"], run.cfg["seed"]), out)
    print(f"wrote {len(manifest)} images to {out}")


def cmd_train(run: Run, args) -> None:
    data = run.images()
    plan = run.split(data)
    out = run.stage("train")
    model, curve = train(run.build(data), data.subset(plan.train), data.subset(plan.val), run.train_config())
    save_checkpoint(model, out / "model.snx")
    (out / "model_config.json").write_text(model.config.to_json() + "\n")
    curve.write_csv(out / "learning_curve.csv")
    render_curves(curve, out / "learning_curve.png", "Training and validation")
    print(f"trained {len(curve.records)} epochs, best epoch {curve.best_epoch}")


def cmd_eval(run: Run, args) -> None:
    model = run.checkpoint()
    data = run.images()
    plan = run.split(data)
    out = run.stage("eval")
    test = data.subset(plan.test)
    pred = predict_logits(model, test.images).argmax(axis=1)
    cm = confusion_matrix(test.labels, pred, len(data.class_names), data.class_names)
    report = compute_metrics(cm)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    report.write_per_class_csv(out / "per_class.csv")
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + data.class_names)
        for name, row in zip(data.class_names, cm.to_list()):
            w.writerow([name] + row)
    render_confusion(cm, out / "confusion.png", "Confusion matrix (test set)")
    print(f"accuracy {report.accuracy:.4f} balanced accuracy {report.balanced_accuracy:.4f}")


def cmd_cv(run: Run, args) -> None:
    data = run.images()
    out = run.stage("cv")
    k = args.k or run.cfg["cv"]["k"]
    res = kfold_cv(data, lambda: run.build(data), run.train_config(), k=k,
                   topology=run.cfg["cv"]["topology"], val_fraction=run.cfg["data"]["val_fraction"],
                   test_fraction=run.cfg["data"]["test_fraction"])
    res.write_csv(out / "folds.csv")
    for f in res.folds:
        f.curve.write_csv(out / f"fold_{f.fold}_curve.csv")
    render_curves([f.curve for f in res.folds], out / "cv_curves.png", "Cross-validation learning curves")
    _write_json(out / "summary.json", res.summary())
    print((out / "folds.csv").read_text().strip().splitlines()[-1])


def cmd_search(run: Run, args) -> None:
    data = run.images()
    out = run.stage("search")
    s = run.cfg["search"]
    space = SearchSpace(tuple(s["batch_sizes"]), tuple(s["epochs"]), tuple(s["learning_rates"]),
                        args.trials or s["trials"], run.cfg["seed"])
    trials, best = hyperparameter_search(space, data, lambda: run.build(data), run.train_config(),
                                         run.cfg["data"]["val_fraction"])
    write_trials_csv(trials, out / "trials.csv")
    _write_json(out / "best.json", asdict(best))
    print(f"best: batch {best.batch_size}, epochs {best.max_epochs}, lr {best.learning_rate}")


def cmd_features(run: Run, args) -> None:
    model = run.checkpoint()
    data = run.images()
    out = run.stage("features")
    feats = extract_features(model, data.images)
    with open(out / "features.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(feats.shape[1])] + ["label"])
        for row, lab in zip(feats, data.labels):
            w.writerow([repr(float(v)) for v in row] + [data.class_names[lab]])
    print(f"extracted {feats.shape[0]} x {feats.shape[1]} features")


def _read_features(path: Path) -> tuple:
    if not path.is_file():
        raise DataError(f"feature file not found: {path} (run 'features' first)")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    x = np.array([[float(v) for v in r[:-1]] for r in rows[1:]])
    names = [r[-1] for r in rows[1:]]
    return x, names


def cmd_tsne(run: Run, args) -> None:
    x, names = _read_features(run.dir / "features" / "features.csv")
    out = run.stage("tsne")
    t = run.cfg["tsne"]
    cfg = TsneConfig(perplexity=t["perplexity"], exaggeration_factor=t["exaggeration_factor"],
                     exaggeration_iters=t["exaggeration_iters"], constant_exaggeration=t["constant_exaggeration"],
                     total_iters=t["total_iters"], learning_rate=t["learning_rate"],
                     momentum_switch_iter=t["exaggeration_iters"], seed=run.cfg["seed"])
    xs, _, _ = standardize(x)
    emb = tsne(calibrate_affinities(xs, cfg.perplexity), cfg)
    classes = sorted(set(names))
    labels = np.array([classes.index(n) for n in names])
    emb.write_csv(out / "embedding.csv", labels, classes)
    emb.write_trace_csv(out / "kl_trace.csv")
    render_scatter(emb.coords, labels, classes, out / "tsne.png",
                   f"t-SNE (perplexity {cfg.perplexity:g}, exaggeration {cfg.exaggeration_factor:g})")
    print(f"final KL {emb.kl:.4f}")


def foreground_mask(image: np.ndarray, threshold: float = 0.05, dilate: int = 2) -> np.ndarray:
    from scipy import ndimage

    mask = image.max(axis=-1) > threshold
    return ndimage.binary_dilation(mask, iterations=dilate) if dilate else mask


def cmd_explain(run: Run, args) -> None:
    model = run.checkpoint()
    data = run.images()
    plan = run.split(data)
    out = run.stage("explain")
    s = run.cfg["shap"]
    n_images = args.images or s["n_images"]
    test = np.asarray(plan.test)
    chosen, seen = [], set()
    for i in test:
        if data.labels[i] not in seen:
            chosen.append(int(i))
            seen.add(data.labels[i])
        if len(chosen) == n_images:
            break
    train_idx = np.asarray(plan.train)
    bg = sample_background(data.labels[train_idx], data.images[train_idx], s["background_per_class"], run.cfg["seed"])
    method = args.method or s["method"]
    attrs, summary = [], []
    for i in chosen:
        img = data.images[i]
        if method == "kernel":
            masker = CoalitionMasker(img.shape, s["grid"], "black")
            a = kernel_shap(model, img, bg, masker, s["samples"], run.cfg["seed"], s["output"])
        else:
            a = gradient_path_attribution(model, img, bg, s["n_steps"], run.cfg["seed"], s["output"])
        a.write_csv(out, f"image_{i:05d}")
        attrs.append(a)
        summary.append({"index": i, "label": data.class_names[data.labels[i]],
                        "foreground_fraction": foreground_mass_fraction(a.pixels, foreground_mask(img)),
                        "local_accuracy_residual": float(np.abs(a.local_accuracy_residual()).max())})
    render_heatmap(attrs, [data.images[i] for i in chosen], out / "heatmaps.png",
                   [data.class_names[data.labels[i]] for i in chosen])
    _write_json(out / "summary.json", {"method": method, "images": summary})
    print(f"explained {len(chosen)} images with {method} attribution")


def cmd_report(run: Run, args) -> None:
    path = run.dir / "report.md"
    if path.exists() and not run.force:
        raise ConfigError(f"{path} already exists; rerun with --force to overwrite")
    lines = [f"# Run {run.id}", "", "Resolved configuration: `config.json`.", ""]
    d = run.dir
    if (d / "train" / "learning_curve.csv").exists():
        lines += ["## Training", "", "Learning curve data: `train/learning_curve.csv`.", "",
                  "![learning curves](train/learning_curve.png)", ""]
    if (d / "eval" / "metrics.json").exists():
        m = json.loads((d / "eval" / "metrics.json").read_text())
        lines += ["## Test-set metrics", "", "| Accuracy | Balanced Accuracy | Precision | Recall | f1 |",
                  "|---|---|---|---|---|",
                  f"| {m['accuracy']:.2f} | {m['balanced_accuracy']:.2f} | {m['precision']:.2f} | "
                  f"{m['recall']:.2f} | {m['f1']:.2f} |", "", "![confusion matrix](eval/confusion.png)", ""]
    if (d / "cv" / "folds.csv").exists():
        rows = list(csv.reader(open(d / "cv" / "folds.csv")))
        lines += ["## Cross-validation", "", "| " + " | ".join(rows[0]) + " |", "|---|---|---|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
        lines += ["", "![cv curves](cv/cv_curves.png)", ""]
    if (d / "search" / "trials.csv").exists():
        rows = list(csv.reader(open(d / "search" / "trials.csv")))
        lines += ["## Hyperparameter search", "", "| " + " | ".join(rows[0]) + " |",
                  "|" + "---|" * len(rows[0])]
        lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
        lines += [""]
    if (d / "tsne" / "embedding.csv").exists():
        lines += ["## Feature embedding", "", "![t-SNE](tsne/tsne.png)", ""]
    if (d / "explain" / "summary.json").exists():
        ex = json.loads((d / "explain" / "summary.json").read_text())
        lines += ["## Attribution", "", f"Method: {ex['method']}.", ""]
        lines += [f"- image {e['index']} ({e['label']}): {100 * e['foreground_fraction']:.1f}% of attribution "
                  f"mass on the tooth" for e in ex["images"]]
        lines += ["", "![heatmaps](explain/heatmaps.png)", ""]
    path.write_text("\n".join(lines))
    print(f"wrote {path}")


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "cv": cmd_cv, "search": cmd_search, "eval": cmd_eval,
    "features": cmd_features, "tsne": cmd_tsne, "explain": cmd_explain, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--output-dir", help=f"output root (default: ${rc.OUTPUT_ENV} or ./runs)")
    common.add_argument("--run-id", help="use this run directory name instead of the content hash")
    common.add_argument("--force", action="store_true", help="overwrite existing stage outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sharknet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "render the synthetic tooth dataset", "train": "train on the holdout split",
        "cv": "stratified k-fold cross-validation", "search": "random hyperparameter search",
        "eval": "test-set metrics and confusion matrix", "features": "extract Dense(128) features",
        "tsne": "embed extracted features", "explain": "per-class attribution heatmaps",
        "report": "collate the run into report.md",
    }
    for name in STAGES:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "cv":
            p.add_argument("--k", type=int, help="number of folds")
        if name == "search":
            p.add_argument("--trials", type=int)
        if name == "explain":
            p.add_argument("--method", choices=("kernel", "gradient"))
            p.add_argument("--images", type=int)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors are configuration errors
        return 1 if exc.code == 2 else (exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        override = rc.load(args.config) if args.config else {}
        if args.seed is not None:
            override["seed"] = args.seed
        if args.output_dir is not None:
            override["output_dir"] = args.output_dir
        cfg = rc.resolve(override)
        run = Run(cfg, args.run_id, args.force)
        COMMANDS[args.command](run, args)
    except SharkNetError as exc:
        print(f"sharknet {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        print(f"sharknet {args.command}: configuration error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"sharknet {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"sharknet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
