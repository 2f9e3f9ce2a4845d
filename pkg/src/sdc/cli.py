"""Command-line entry point: ``sdc train | eval-miscls | eval-ood | report-merge | repeat | noise-idx``.

Every command accepts ``--config FILE`` (flat ``key=value`` lines) and one
flag per config key; flags override the file. Exit codes: 0 success,
2 configuration error, 3 data/checkpoint error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import nn
from .data import (
    CheckpointError,
    IdxFormatError,
    REPORT_HEADER,
    SCORE_HEADER,
    checkpoint_num_classes,
    csv_text,
    load_checkpoint,
    load_dataset,
    read_csv_rows,
    save_checkpoint,
    write_idx,
)
from .experiment import (
    ConfigError,
    ExperimentConfig,
    load_config,
    load_sets,
    make_ensemble,
    parse_config,
    repeat_runs,
    train,
)
from .masks import MaskConfigError
from .metrics import DetectionReport, ScoredSample, aggregate, misclassification_detection, ood_detection
from .rng import stream

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4

log = logging.getLogger("sdc")


def _config_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("experiment config (overrides --config)")
    g.add_argument("--config", help="key=value config file")
    for f in fields(ExperimentConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=f.name.upper())


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = [f"{f.name}={getattr(args, f.name)}" for f in fields(ExperimentConfig) if getattr(args, f.name) is not None]
    return parse_config("\n".join(overrides), cfg).validate()


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def score_rows(samples: list[ScoredSample]) -> list[list]:
    return [[s.id, s.pred, s.label, s.max_p, s.ent, s.d_ent, s.positive] for s in samples]


def report_text(report: DetectionReport) -> str:
    return csv_text(REPORT_HEADER, report.rows())


def read_report(path) -> DetectionReport:
    rows = read_csv_rows(path)
    if not rows:
        raise IdxFormatError(f"{path}: empty report")
    first = rows[0]
    return DetectionReport(
        first["task"],
        {r["metric"]: float(r["auroc_mean"]) for r in rows},
        0,
        0,
        seed=int(first["seed"]),
        runs=int(first["runs"]),
        std={r["metric"]: float(r["auroc_std"]) for r in rows},
    )


def _load_model(config: ExperimentConfig, path: str):
    state, mask_set = load_checkpoint(path)
    specs, _ = nn.build_lenet5(checkpoint_num_classes(state))
    load_checkpoint(path, specs)  # shape check against the architecture
    if config.mode == "sdc" and mask_set is None:
        raise CheckpointError(f"{path} carries no structured masks; needed for mode=sdc")
    if mask_set is not None and mask_set.rho != config.rho:
        log.warning("checkpoint masks use rho=%d; config rho=%d applies to training/MC only", mask_set.rho, config.rho)
    return specs, state, mask_set


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    train_set = load_dataset(cfg.train_images, cfg.train_labels, num_classes=cfg.num_classes, split="train")
    log_path = args.log or str(args.out) + ".log.csv"
    lines = [f"# {ln}" for ln in cfg.lines()] + ["epoch,loss,train_acc"]
    with open(log_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        fh.flush()

        def progress(epoch, loss, acc):
            fh.write(f"{epoch},{loss!r},{acc!r}\n")
            fh.flush()
            print(f"epoch {epoch}/{cfg.epochs} loss {loss:.5f} train_acc {acc:.4f}", file=sys.stderr)

        result = train(cfg, train_set, progress)
    save_checkpoint(args.out, result.state, result.mask_set)
    print(f"wrote {args.out} and {log_path}", file=sys.stderr)
    return 0


METHOD_LABELS = {"sdc": "SDC", "baseline": "Baseline", "mc": "MC-DropConnect"}


def _echo(cfg: ExperimentConfig) -> None:
    for ln in cfg.lines():
        print(f"# {ln}", file=sys.stderr)
    print(f"# method: {METHOD_LABELS[cfg.mode]}", file=sys.stderr)


def cmd_eval_miscls(args) -> int:
    cfg = resolve_config(args)
    _echo(cfg)
    specs, state, mask_set = _load_model(cfg, args.checkpoint)
    _, test_set, _ = load_sets(cfg, need_train=False)
    ens = make_ensemble(cfg, specs, state, mask_set)
    report, samples = misclassification_detection(ens, test_set, cfg.scoring, seed=cfg.seed)
    _finish(args, report, samples)
    print(f"accuracy={report.accuracy!r} positives={report.n_positive} negatives={report.n_negative}", file=sys.stderr)
    return 0


def cmd_eval_ood(args) -> int:
    cfg = resolve_config(args)
    if not cfg.ood_images:
        raise ConfigError("eval-ood needs --ood-images")
    _echo(cfg)
    specs, state, mask_set = _load_model(cfg, args.checkpoint)
    _, test_set, ood_set = load_sets(cfg, need_train=False, need_ood=True)
    ens = make_ensemble(cfg, specs, state, mask_set)
    report, samples = ood_detection(ens, test_set, ood_set, cfg.scoring, seed=cfg.seed)
    _finish(args, report, samples)
    print(f"positives={report.n_positive} negatives={report.n_negative}", file=sys.stderr)
    return 0


def _finish(args, report: DetectionReport, samples) -> None:
    if args.scores:
        _write(args.scores, csv_text(SCORE_HEADER, score_rows(samples)))
    _write(args.report, report_text(report))


def cmd_report_merge(args) -> int:
    merged = aggregate([read_report(p) for p in args.reports])
    _write(args.out, report_text(merged))
    return 0


def cmd_repeat(args) -> int:
    cfg = resolve_config(args)
    _echo(cfg)
    reports = repeat_runs(cfg)
    rows = [row for task in sorted(reports) for row in reports[task].rows()]
    _write(args.out, csv_text(REPORT_HEADER, rows))
    return 0


def cmd_noise_idx(args) -> int:
    rng = stream(args.seed, "noise")
    images = rng.integers(0, 256, size=(args.count, args.size, args.size), dtype=np.uint8)
    write_idx(args.out, images)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdc", description="Structured DropConnect uncertainty experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train LeNet5 with DropConnect and write a checkpoint")
    _config_flags(t)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("eval-miscls", help="misclassification detection on the labeled test set")
    _config_flags(m)
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--report", default="-", help="report CSV path ('-' for stdout)")
    m.add_argument("--scores", help="per-sample score CSV path")
    m.set_defaults(func=cmd_eval_miscls)

    o = sub.add_parser("eval-ood", help="OOD detection: test set (negatives) vs OOD images (positives)")
    _config_flags(o)
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--report", default="-")
    o.add_argument("--scores")
    o.set_defaults(func=cmd_eval_ood)

    r = sub.add_parser("report-merge", help="mean and sample std over single-run report CSVs")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out", default="-")
    r.set_defaults(func=cmd_report_merge)

    a = sub.add_parser("repeat", help="train+evaluate `repeats` times and write the aggregated report")
    _config_flags(a)
    a.add_argument("--out", default="-")
    a.set_defaults(func=cmd_repeat)

    n = sub.add_parser("noise-idx", help="write uniform-noise images as an IDX file (OOD control set)")
    n.add_argument("--out", required=True)
    n.add_argument("--count", type=int, default=10000)
    n.add_argument("--size", type=int, default=28)
    n.add_argument("--seed", type=int, default=0)
    n.set_defaults(func=cmd_noise_idx)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, MaskConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (IdxFormatError, CheckpointError, FileNotFoundError, IsADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
