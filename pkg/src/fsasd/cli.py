"""``fsasd`` command line: synth, train, test, evaluate, report.

Exit codes: 0 success, 1 partial failure (some sections failed), 2 invalid
input. Log verbosity comes from ``FSASD_LOG_LEVEL`` (default INFO).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import resolve
from .dataset import SynthSpec
from .errors import FsasdError, InvalidInput
from . import pipeline

log = logging.getLogger("fsasd")


def _run_flags(p, backend=True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--dataset", help="dataset root (<machine>/{train,test}/*.wav)")
    p.add_argument("--out", help="run output directory")
    if backend:
        p.add_argument("--backend", choices=["mse", "selective_mahalanobis"])
    p.add_argument("--seed", type=int, action="append", dest="seeds",
                   help="training seed; repeat for several (default 13711 13591 13267)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsasd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic DCASE-layout dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--force", action="store_true", help="replace a previously generated tree")
    p.add_argument("--sections", type=int, default=1)
    p.add_argument("--train-target", type=int, default=1,
                   help="target-domain training clips per section (source gets 99x)")
    p.add_argument("--test-normal", type=int, default=20, help="per domain")
    p.add_argument("--test-anomaly", type=int, default=20, help="per domain")
    p.add_argument("--duration", type=float, default=2.0, help="seconds per clip")
    p.add_argument("--pitch-factor", type=float, default=1.25, help="target-domain shift")
    p.add_argument("--snr-db", type=float, default=0.0, help="noise-burst anomaly SNR")
    p.add_argument("--labeled-test", action="store_true",
                   help="keep domain/label in test filenames instead of blind names")

    p = sub.add_parser("train", help="train one model per machine type and section")
    _run_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("test", help="score blind test clips")
    _run_flags(p)

    p = sub.add_parser("evaluate", help="AUC/pAUC/total-score reports from score CSVs")
    _run_flags(p)
    p.add_argument("--ground-truth", help="default: <dataset>/ground_truth.csv")

    p = sub.add_parser("report", help="print evaluated report tables")
    _run_flags(p)
    return parser


def _config(args):
    return resolve(args.config, dataset=args.dataset, out=args.out,
                   backend=getattr(args, "backend", None), seeds=args.seeds,
                   epochs=getattr(args, "epochs", None),
                   batch_size=getattr(args, "batch_size", None),
                   learning_rate=getattr(args, "lr", None))


def _require(cfg, *names):
    for name in names:
        if getattr(cfg, name) is None:
            raise InvalidInput(f"--{name} is required (flag or config file)")


def run(args) -> int:
    if args.command == "synth":
        spec = SynthSpec(sections=args.sections, train_source=99 * args.train_target,
                         train_target=args.train_target, test_normal=args.test_normal,
                         test_anomaly=args.test_anomaly, duration=args.duration,
                         pitch_factor=args.pitch_factor, anomaly_snr_db=args.snr_db,
                         blind_test=not args.labeled_test)
        manifest = pipeline.cmd_synth(spec, args.out, args.seed, args.force)
        print(pipeline.manifest_summary(manifest))
        return 0

    cfg = _config(args)
    if args.command == "train":
        _require(cfg, "dataset", "out")
        result = pipeline.cmd_train(cfg)
    elif args.command == "test":
        _require(cfg, "dataset", "out")
        result = pipeline.cmd_test(cfg)
    elif args.command == "evaluate":
        _require(cfg, "out")
        reports, result = pipeline.cmd_evaluate(cfg, args.ground_truth)
        from .metrics import render_text
        print(render_text(reports["average"]))
    else:
        _require(cfg, "out")
        print(pipeline.cmd_report(cfg, [cfg.backend] if args.backend else None))
        return 0
    for label, msg in result.failures.items():
        print(f"FAILED {label}: {msg}", file=sys.stderr)
    return result.exit_code


def main(argv=None) -> int:
    level = logging.getLevelName(os.environ.get("FSASD_LOG_LEVEL", "INFO").upper())
    logging.basicConfig(level=level if isinstance(level, int) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except InvalidInput as exc:
        log.error("%s", exc)
        return 2
    except FsasdError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
