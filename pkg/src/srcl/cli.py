"""Command-line entry point: synth, train, sweep, evaluate, saliency."""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import sys
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from . import data, evaluation, nn, train
from .config import ConfigParseError, RunConfig, parse_config

RESULT_COLUMNS = ("regime", "labeled_fraction", "seed", "auroc", "accuracy", "sensitivity", "specificity")


class CliError(Exception):
    pass


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def _write_logs(path: Path, logs) -> None:
    path.write_text("".join(log.to_json() + "\n" for log in logs))


def load_data(cfg: RunConfig) -> data.Dataset:
    if cfg.data_dir:
        labels_csv = cfg.labels_csv or str(Path(cfg.data_dir) / "labels.csv")
        names = cfg.class_names or [f"class{i}" for i in range(cfg.num_classes)]
        return data.load_dataset(cfg.data_dir, labels_csv, names)
    return data.generate_synthetic(cfg.num_images, cfg.num_classes, cfg.image_size, cfg.imbalance_ratio, cfg.seed)


def prepare_splits(cfg: RunConfig):
    ds = load_data(cfg)
    return data.split(ds, tuple(cfg.split), cfg.seed)


def run_cell(cfg: RunConfig, splits, regime: str, fraction: float, seed: int):
    """Mask, train and test one (regime, fraction, seed) cell."""
    tr, va, te = splits
    masked = data.mask_labels(tr, fraction, seed)
    model, logs = train.run_regime(regime, masked, va, cfg.train_config(seed))
    scores = evaluation.predict_proba(model, data.normalize(te.pixels, cfg.augment))
    return model, logs, evaluation.metrics_report(scores, te.labels)


def _cell_job(args):
    cfg, splits, regime, fraction, seed = args
    _, logs, report = run_cell(cfg, splits, regime, fraction, seed)
    return logs, report


def per_class_rows(report: evaluation.MetricsReport, class_names, labels):
    support = np.bincount(labels, minlength=len(class_names))
    return [
        (name, _fmt(report.per_class_auroc[c]), _fmt(report.per_class_sensitivity[c]),
         _fmt(report.per_class_specificity[c]), int(support[c]))
        for c, name in enumerate(class_names)
    ]


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    ds = data.generate_synthetic(cfg.num_images, cfg.num_classes, cfg.image_size, cfg.imbalance_ratio, cfg.seed)
    data.save_dataset(ds, out)
    print(f"wrote {len(ds)} images and labels.csv to {out}")
    return 0


def cmd_train(cfg: RunConfig, out: Path) -> int:
    splits = prepare_splits(cfg)
    model, logs, report = run_cell(cfg, splits, cfg.regime, cfg.labeled_fraction, cfg.seed)
    nn.save_checkpoint(model, out / "model.ckpt")
    _write_logs(out / "train_log.jsonl", logs)
    te = splits[2]
    _write_csv(out / "per_class.csv", ("class", "auroc", "sensitivity", "specificity", "support"),
               per_class_rows(report, te.class_names, te.labels))
    _write_csv(out / "metrics.csv", RESULT_COLUMNS,
               [(cfg.regime, _fmt(cfg.labeled_fraction), cfg.seed, *(_fmt(v) for v in report.as_dict().values()))])
    print(f"{cfg.regime} @ {cfg.labeled_fraction:.0%} labels: " + "  ".join(f"{k}={_fmt(v)}" for k, v in report.as_dict().items()))
    return 0


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    splits = prepare_splits(cfg)
    seeds = cfg.sweep_seeds or [cfg.seed]
    cells = list(itertools.product(cfg.regimes, cfg.fractions, seeds))
    jobs = [(cfg, splits, r, f, s) for r, f, s in cells]
    if cfg.jobs > 1:
        with Pool(cfg.jobs) as pool:
            results = pool.map(_cell_job, jobs, chunksize=1)
    else:
        results = [_cell_job(j) for j in jobs]
    rows = []
    log_dir = out / "logs"
    log_dir.mkdir(exist_ok=True)
    for (regime, fraction, seed), (logs, report) in zip(cells, results):
        m = report.as_dict()
        rows.append((regime, _fmt(fraction), seed, _fmt(m["auroc"]), _fmt(m["accuracy"]),
                     _fmt(m["sensitivity"]), _fmt(m["specificity"])))
        _write_logs(log_dir / f"{regime}_{fraction:g}_{seed}.jsonl", logs)
        print(f"{regime:>10} {fraction:6.2f} seed={seed}  acc={_fmt(m['accuracy'])}  auroc={_fmt(m['auroc'])}")
    _write_csv(out / "results.csv", RESULT_COLUMNS, rows)
    return 0


def cmd_evaluate(cfg: RunConfig, out: Path, checkpoint: str) -> int:
    model = nn.load_checkpoint(checkpoint)
    ds = load_data(cfg) if cfg.data_dir else prepare_splits(cfg)[2]
    labeled = ds.labeled_mask
    scores = evaluation.predict_proba(model, data.normalize(ds.pixels[labeled], cfg.augment))
    report = evaluation.metrics_report(scores, ds.labels[labeled])
    _write_csv(out / "per_class.csv", ("class", "auroc", "sensitivity", "specificity", "support"),
               per_class_rows(report, ds.class_names, ds.labels[labeled]))
    _write_csv(out / "metrics.csv", ("auroc", "accuracy", "sensitivity", "specificity"),
               [tuple(_fmt(v) for v in report.as_dict().values())])
    print("  ".join(f"{k}={_fmt(v)}" for k, v in report.as_dict().items()))
    return 0


def cmd_saliency(cfg: RunConfig, out: Path, checkpoint: str, images) -> int:
    model = nn.load_checkpoint(checkpoint)
    for path in images:
        try:
            pixels = data.read_image(path)
        except OSError as exc:
            raise CliError(f"cannot read image {path}: {exc}") from None
        smap = evaluation.saliency_map(model, data.normalize(pixels, cfg.augment))
        target = out / f"{Path(path).stem}_saliency.pgm"
        data.write_pgm(target, smap)
        print(f"wrote {target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")

    parser = argparse.ArgumentParser(
        prog="srcl", description="Contrastive pre-training and relation-consistency fine-tuning for image classification"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic PPM dataset")
    sub.add_parser("train", parents=[common], help="train one regime and test it")
    sub.add_parser("sweep", parents=[common], help="regime x label-fraction x seed sweep to results.csv")
    ev = sub.add_parser("evaluate", parents=[common], help="metrics for a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    sal = sub.add_parser("saliency", parents=[common], help="saliency maps as PGM")
    sal.add_argument("--checkpoint", required=True)
    sal.add_argument("images", nargs="+")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = []
        for item in args.set:
            if "=" not in item:
                raise ConfigParseError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            overrides.append((key.strip(), value.strip()))
        if args.seed is not None:
            overrides.append(("seed", str(args.seed)))
        cfg = parse_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out, args.checkpoint)
        return cmd_saliency(cfg, out, args.checkpoint, args.images)
    except (CliError, ConfigParseError, data.DataError, nn.CheckpointError, train.TrainingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
