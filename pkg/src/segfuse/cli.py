"""End-user pipeline commands and the ``segfuse`` entry point.

Commands: harmonize, depth-from-cloud, resize, evaluate, train-toy, report.
Every command is deterministic given config + inputs + seed and overwrites
its outputs bit-identically.  Exit codes: 0 success, 1 usage error, 2 data
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, nn, synth
from . import tensor as T
from .config import ConfigError, PipelineConfig, default_config, load_config, load_manifest
from .geometry import (
    densify_maxpool,
    load_calibration,
    load_depth_png,
    load_point_cloud,
    project_cloud,
    save_depth_png,
)
from .imgio import load_label_png, load_rgb_png, save_label_png, save_rgb_png
from .metrics import (
    ConfusionMatrix,
    accumulate,
    format_report,
    iou_scores,
    merge_confusion,
    report_to_dict,
)
from .resize import plan_size, resize_sample
from .taxonomy import (
    TaxonomyError,
    class_count_report,
    merge_standard,
    merge_thrifty,
    relabel_image,
    save_relabel_maps,
    save_taxonomy,
)

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


def _write_run_metadata(out_dir: Path, command: str, config_digest: str) -> None:
    doc = {
        "command": command,
        "config_sha256": config_digest,
        "segfuse_version": __version__,
        "numpy_version": np.__version__,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_metadata.json", "w", encoding="utf-8") as fp:
        json.dump(doc, fp, indent=2, sort_keys=True)
        fp.write("\n")


def _config_digest(config_path) -> str:
    if config_path is None:
        return "builtin-default"
    return hashlib.sha256(Path(config_path).read_bytes()).hexdigest()


def _merge_for(config: PipelineConfig):
    main, supplements = config.merge_inputs()
    merge = merge_thrifty if config.relabel_method == "thrifty" else merge_standard
    return merge(main, supplements)


# ---------------------------------------------------------------------------
# harmonize
# ---------------------------------------------------------------------------

def _print_growth(taxonomy, method: str) -> None:
    print(f"class-set growth under {method} relabeling:")
    running = 0
    for row in class_count_report(taxonomy):
        added = row["added"] + row["conflict"]
        running += row["original"] + len(added)
        if row["dataset"] == taxonomy.main_dataset:
            print(f"  {row['dataset']} (main): {row['original']} classes")
        else:
            names = f" ({', '.join(added)})" if added else ""
            print(f"  + {row['dataset']}: +{len(added)}{names}")
    conflicts = ", ".join(taxonomy.classes[i] for i in sorted(taxonomy.conflict_indices)) or "none"
    print(f"  total: {running} classes; conflict classes: {conflicts}")


def cmd_harmonize(config: PipelineConfig, config_digest: str = "builtin-default"):
    """Merge class sets, export the taxonomy and maps, relabel label images."""
    taxonomy, maps = _merge_for(config)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    save_taxonomy(out / "taxonomy.classes", taxonomy)
    _print_growth(taxonomy, config.relabel_method)
    if config.supplements:
        save_relabel_maps(out / "relabel_maps.tsv", maps)
        written = 0
        for manifest in config.manifests:
            mapping = maps[manifest.dataset]
            for rec in manifest.samples:
                relabeled = relabel_image(load_label_png(rec.label), mapping)
                save_label_png(out / "relabeled" / manifest.dataset / f"{rec.stem}.png",
                               relabeled)
                written += 1
        print(f"relabeled {written} label images")
    _write_run_metadata(out, "harmonize", config_digest)
    return taxonomy, maps


# ---------------------------------------------------------------------------
# depth-from-cloud
# ---------------------------------------------------------------------------

def cmd_depth_from_cloud(manifests, out_dir: Path, window: int = 7, fill: str = "max",
                         config_digest: str = "builtin-default"):
    """Project + densify every point-cloud sample to a 16-bit depth PNG.

    Unreadable samples are skipped and reported; returns (written, failures).
    """
    out_dir = Path(out_dir)
    written, failures = 0, []
    for manifest in manifests:
        for rec in manifest.samples:
            if rec.cloud is None:
                continue
            dest = out_dir / "depth" / manifest.dataset / f"{rec.stem}.png"
            try:
                cloud = load_point_cloud(rec.cloud)
                cam = load_calibration(rec.calibration)
                depth = densify_maxpool(project_cloud(cloud, cam), window=window, fill=fill)
            except (ValueError, OSError) as exc:
                failures.append((rec.cloud, str(exc)))
                logger.error("skipping %s: %s", rec.cloud, exc)
                continue
            dest.parent.mkdir(parents=True, exist_ok=True)
            save_depth_png(dest, depth)
            coverage = float(np.count_nonzero(depth)) / depth.size
            logger.info("%s: coverage %.4f", dest, coverage)
            if coverage == 0.0:
                logger.warning("%s: empty projection (no points landed)", dest)
            written += 1
    _write_run_metadata(out_dir, "depth-from-cloud", config_digest)
    print(f"wrote {written} depth maps, {len(failures)} failures")
    return written, failures


# ---------------------------------------------------------------------------
# resize
# ---------------------------------------------------------------------------

def cmd_resize(config: PipelineConfig, config_digest: str = "builtin-default"):
    """Apply the configured resizing policy to every sample.

    Cloud-source samples read the depth PNG that depth-from-cloud wrote
    under ``<output_dir>/depth/<dataset>/``.
    """
    out = config.output_dir
    written = 0
    for manifest in config.manifests:
        for rec in manifest.samples:
            depth_path = rec.depth
            if depth_path is None:
                depth_path = out / "depth" / manifest.dataset / f"{rec.stem}.png"
                if not depth_path.exists():
                    raise ConfigError(
                        f"sample {rec.rgb}: no depth PNG at {depth_path}; "
                        "run depth-from-cloud first"
                    )
            rgb = load_rgb_png(rec.rgb)
            depth = load_depth_png(depth_path)
            label = load_label_png(rec.label)
            size = plan_size(config.resize_policy, label.shape[0], label.shape[1],
                             dataset=manifest.dataset)
            rgb_r, depth_r, label_r = resize_sample(rgb.astype(np.float64) / 255.0,
                                                    depth, label, size)
            base = out / "resized" / manifest.dataset
            save_rgb_png(base / "rgb" / f"{rec.stem}.png", rgb_r)
            save_depth_png(_mkparent(base / "depth" / f"{rec.stem}.png"), depth_r)
            save_label_png(base / "label" / f"{rec.stem}.png", label_r)
            written += 1
    _write_run_metadata(out, "resize", config_digest)
    print(f"resized {written} samples")
    return written


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _resolve_excluded(excluded, taxonomy):
    ids = set()
    for item in excluded:
        ids.add(item if isinstance(item, int) else taxonomy.index_of(item))
    return ids


def _write_report_files(out_dir: Path, report, class_names) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    rendered = format_report(report, class_names)
    (out_dir / "eval_report.md").write_text(rendered["markdown"], encoding="utf-8")
    (out_dir / "eval_report.csv").write_text(rendered["csv"], encoding="utf-8")
    with open(out_dir / "eval_report.json", "w", encoding="utf-8") as fp:
        json.dump(report_to_dict(report, class_names), fp, indent=2, sort_keys=True)
        fp.write("\n")


def cmd_evaluate(config: PipelineConfig, predictions_dir, workers: int = 1,
                 config_digest: str = "builtin-default"):
    """Score unified-id prediction PNGs against relabeled validation ground truth.

    Predictions live at ``<predictions_dir>/<dataset>/<label stem>.png``.
    Accumulation fans out to ``workers`` threads, one confusion matrix each,
    merged exactly; any worker count yields byte-identical reports.
    """
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    predictions_dir = Path(predictions_dir)
    taxonomy, maps = _merge_for(config)
    n = taxonomy.num_classes

    tasks = []
    for manifest in config.manifests_for(split="val"):
        mapping = maps[manifest.dataset]
        for rec in manifest.samples:
            pred_path = predictions_dir / manifest.dataset / f"{rec.stem}.png"
            if not pred_path.exists():
                raise ConfigError(f"missing prediction {pred_path} for label {rec.label}")
            tasks.append((rec.label, pred_path, mapping))
    if not tasks:
        raise ConfigError("no validation samples in the manifest set")

    def score(task):
        label_path, pred_path, mapping = task
        gt = relabel_image(load_label_png(label_path), mapping)
        pred = load_label_png(pred_path)
        if pred.shape != gt.shape:
            raise ConfigError(
                f"prediction {pred_path} is {pred.shape}, ground truth {label_path} "
                f"is {gt.shape}"
            )
        return accumulate(ConfusionMatrix(n), pred, gt)

    if workers == 1:
        matrices = [score(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            matrices = list(pool.map(score, tasks))
    conf = ConfusionMatrix(n)
    for m in matrices:
        conf = merge_confusion(conf, m)

    report = iou_scores(conf, excluded=_resolve_excluded(config.excluded, taxonomy))
    out = config.output_dir / "eval"
    _write_report_files(out, report, taxonomy.classes)
    _write_run_metadata(config.output_dir, "evaluate", config_digest)
    miou = "undefined" if np.isnan(report.miou) else f"{100.0 * report.miou:.2f}"
    print(f"evaluated {len(tasks)} samples over {n} classes: mIoU {miou}")
    return report


# ---------------------------------------------------------------------------
# train-toy
# ---------------------------------------------------------------------------

def _toy_net_config(train) -> nn.FusionNetConfig:
    return nn.FusionNetConfig(
        variant=train.variant,
        num_classes=len(synth.CLASS_NAMES),
        stage_channels=train.stage_channels,
        input_h=train.input_h,
        input_w=train.input_w,
        spp_heights=train.spp_heights,
    )


def cmd_train_toy(config: PipelineConfig, seed: int = None, debug_dump=None,
                  config_digest: str = "builtin-default"):
    """Train the configured variant on seeded synthetic scenes and score it.

    Writes checkpoint, loss log, and evaluation report under
    ``<output_dir>/train``.  On a non-finite loss the run aborts with the
    last good checkpoint on disk and the error propagates (exit code 3).
    """
    train = config.training
    if seed is None:
        seed = train.seed
    net_config = _toy_net_config(train)
    params = nn.init_params(net_config, seed=seed)
    train_set = [synth.to_network_inputs(s, train.depth_scale)
                 for s in synth.generate_dataset(seed, train.train_samples,
                                                 train.input_h, train.input_w)]
    val_set = [synth.to_network_inputs(s, train.depth_scale)
               for s in synth.generate_dataset(seed + 1, train.val_samples,
                                               train.input_h, train.input_w)]

    out = config.output_dir / "train"
    out.mkdir(parents=True, exist_ok=True)
    losses = []
    failure = None
    for step in range(train.steps):
        batch = [train_set[(step * train.batch_size + j) % len(train_set)]
                 for j in range(train.batch_size)]
        try:
            _, loss = nn.train_step(params, batch, train.learning_rate)
        except nn.NumericalError as exc:
            failure = exc
            logger.error("aborting at step %d: %s", step, exc)
            break
        losses.append(loss)
        if (step + 1) % 100 == 0 or step + 1 == train.steps:
            print(f"step {step + 1}/{train.steps}: loss {loss!r}")

    nn.save_checkpoint(out / "checkpoint.ckpt", params)
    with open(out / "loss_log.txt", "w", encoding="utf-8") as fp:
        for step, loss in enumerate(losses):
            fp.write(f"{step}\t{loss!r}\n")

    conf = ConfusionMatrix(net_config.num_classes)
    for rgb, depth, label in val_set:
        logits = nn.network_forward(rgb, depth, params)
        accumulate(conf, nn.predict(logits, net_config.conflict_indices, "test"), label)
    report = iou_scores(conf)
    _write_report_files(out, report, list(synth.CLASS_NAMES))
    _write_run_metadata(config.output_dir, "train-toy", config_digest)

    if debug_dump is not None:
        dump_dir = Path(debug_dump)
        dump_dir.mkdir(parents=True, exist_ok=True)
        rgb, depth, _ = val_set[0]
        T.dump_tensor(rgb, dump_dir / "val0_rgb.tensor")
        T.dump_tensor(depth, dump_dir / "val0_depth.tensor")
        T.dump_tensor(nn.network_forward(rgb, depth, params), dump_dir / "val0_logits.tensor")

    if failure is not None:
        raise failure
    miou = "undefined" if np.isnan(report.miou) else f"{100.0 * report.miou:.2f}"
    print(f"{train.variant}: synthetic-val mIoU {miou} after {len(losses)} steps")
    return {
        "losses": losses,
        "report": report,
        "checkpoint": out / "checkpoint.ckpt",
        "net_config": net_config,
    }


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(run_dirs, out_dir):
    """Side-by-side per-class IoU and mIoU tables across evaluation runs."""
    runs = []
    for d in run_dirs:
        path = Path(d) / "eval_report.json"
        if not path.exists():
            raise ConfigError(f"missing evaluation report {path}")
        with open(path, "r", encoding="utf-8") as fp:
            runs.append((str(d), json.load(fp)))
    classes = runs[0][1]["classes"]
    for name, doc in runs[1:]:
        if doc["classes"] != classes:
            raise ConfigError(
                f"run {name} evaluates a different taxonomy than {runs[0][0]}"
            )

    def cell(doc, i):
        if i in doc["excluded"]:
            return "excluded"
        v = doc["per_class_iou"][i]
        return "undefined" if v is None else f"{100.0 * v:.2f}"

    headers = [name for name, _ in runs]
    md = ["| class | " + " | ".join(headers) + " |",
          "| --- |" + " --- |" * len(runs)]
    csv = ["class," + ",".join(headers)]
    for i, cname in enumerate(classes):
        cells = [cell(doc, i) for _, doc in runs]
        md.append(f"| {cname} | " + " | ".join(cells) + " |")
        csv.append(f"{cname}," + ",".join(cells))
    mious = ["undefined" if doc["miou"] is None else f"{100.0 * doc['miou']:.2f}"
             for _, doc in runs]
    md.append("| **mIoU** | " + " | ".join(f"**{m}**" for m in mious) + " |")
    csv.append("mIoU," + ",".join(mious))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    md_text = "\n".join(md) + "\n"
    csv_text = "\n".join(csv) + "\n"
    (out_dir / "comparison.md").write_text(md_text, encoding="utf-8")
    (out_dir / "comparison.csv").write_text(csv_text, encoding="utf-8")
    print(md_text, end="")
    return md_text, csv_text


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="segfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="pipeline config JSON (default: built-in four-dataset setup)")
        p.add_argument("--out", help="override the config's output directory")

    p = sub.add_parser("harmonize", help="merge class sets and relabel label images")
    common(p)
    p = sub.add_parser("depth-from-cloud", help="project point clouds to dense depth PNGs")
    common(p)
    p.add_argument("--manifest", help="process one manifest file instead of the config's")
    p.add_argument("--window", type=int, default=7, help="densification window (odd)")
    p.add_argument("--fill", choices=("max", "min_nonzero"), default="max",
                   help="window statistic; min_nonzero keeps the nearest hit instead")
    p = sub.add_parser("resize", help="apply the resizing policy to all samples")
    common(p)
    p = sub.add_parser("evaluate", help="score prediction PNGs against relabeled ground truth")
    common(p)
    p.add_argument("--predictions", required=True, help="directory of prediction PNGs")
    p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("train-toy", help="train the toy fusion network on synthetic scenes")
    common(p)
    p.add_argument("--seed", type=int, help="override the config's training seed")
    p.add_argument("--debug-dump", help="directory for binary tensor dumps")
    p = sub.add_parser("report", help="compare evaluation runs side by side")
    p.add_argument("runs", nargs="+", help="directories containing eval_report.json")
    p.add_argument("--out", required=True, help="output directory for comparison tables")
    return parser


def _load(args) -> tuple:
    if getattr(args, "config", None):
        config = load_config(args.config)
        digest = _config_digest(args.config)
    else:
        config = default_config()
        digest = _config_digest(None)
    if getattr(args, "out", None):
        config.output_dir = Path(args.out)
    return config, digest


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "report":
            cmd_report(args.runs, args.out)
            return 0
        config, digest = _load(args)
        if args.command == "harmonize":
            cmd_harmonize(config, config_digest=digest)
        elif args.command == "depth-from-cloud":
            manifests = ([load_manifest(args.manifest)] if args.manifest
                         else config.manifests)
            _, failures = cmd_depth_from_cloud(manifests, config.output_dir,
                                               window=args.window, fill=args.fill,
                                               config_digest=digest)
            if failures:
                return 2
        elif args.command == "resize":
            cmd_resize(config, config_digest=digest)
        elif args.command == "evaluate":
            cmd_evaluate(config, args.predictions, workers=args.workers,
                         config_digest=digest)
        elif args.command == "train-toy":
            cmd_train_toy(config, seed=args.seed, debug_dump=args.debug_dump,
                          config_digest=digest)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except nn.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, TaxonomyError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
