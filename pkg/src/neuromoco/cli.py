"""``neuromoco`` command-line entry point.

Exit codes: 0 success, 1 validation / config error, 2 data-format error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from neuromoco.errors import ConfigError, NeuroMoCoError, NumericalError, ValidationError

log = logging.getLogger("neuromoco")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would read as a data-format error
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _load_config(args):
    from neuromoco.config import RunConfig

    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig.from_overrides()
    extra = {}
    if getattr(args, "seed", None) is not None:
        extra["seed"] = args.seed
    if getattr(args, "out_dir", None):
        extra["out_dir"] = args.out_dir
    return cfg.with_overrides(**extra) if extra else cfg


def cmd_gen(args) -> int:
    from neuromoco.data import write_synthetic_corpus

    cfg = _load_config(args)
    params = cfg.synthetic_params()
    if args.classes is not None:
        from dataclasses import replace

        params = replace(params, num_classes=args.classes)
    rows = write_synthetic_corpus(args.out_dir, params, args.per_class, cfg["seed"])
    print(f"wrote {len(rows)} event files and manifest.csv to {args.out_dir}")
    return EXIT_OK


def cmd_bin(args) -> int:
    from neuromoco.data import read_manifest, write_manifest
    from neuromoco.events import BinningConfig, bin_events, parse_event_file, write_frame_file

    src, out = Path(args.in_dir), Path(args.out_dir)
    rows = read_manifest(src)
    out.mkdir(parents=True, exist_ok=True)
    cfg = BinningConfig(args.T)
    new_rows, bad = [], 0
    for name, label in rows:
        stream = parse_event_file(src / name)
        res = bin_events(stream, cfg)
        total = int(res.frames.data.sum())
        ok = total + res.dropped == len(stream.events)
        bad += not ok
        target = Path(name).with_suffix(".frmt").name
        write_frame_file(res.frames, out / target)
        new_rows.append((target, label))
        print(f"{name}\tevents={len(stream.events)}\tbinned={total}\tdropped={res.dropped}\t{'ok' if ok else 'MISMATCH'}")
    write_manifest(out, new_rows)
    print(f"binned {len(new_rows)} of {len(rows)} files at T={args.T}")
    if bad:
        raise NumericalError(f"{bad} files failed the conservation check")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from neuromoco.experiment import run_pretrain

    cfg = _load_config(args)
    res = run_pretrain(cfg)
    last = res.metrics.records[-1]
    print(f"pretrained {res.steps_done} steps, final loss {last['loss']:.4f}; outputs in {cfg['out_dir']}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from neuromoco.experiment import run_finetune

    cfg = _load_config(args)
    if args.checkpoint is not None and not Path(args.checkpoint).is_file():
        raise ValidationError(f"checkpoint not found: {args.checkpoint}")
    res = run_finetune(cfg, args.checkpoint)
    print(f"test accuracy {res.test_accuracy:.4f}; outputs in {cfg['out_dir']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from neuromoco.data import load_corpus
    from neuromoco.experiment import load_datasets
    from neuromoco.tensor import read_checkpoint
    from neuromoco.training import evaluate, load_classifier

    cfg = _load_config(args)
    state = read_checkpoint(args.checkpoint)
    head = state.get("model.cls.fc.weight")
    if head is None:
        raise ConfigError(f"{args.checkpoint} is not a fine-tuned classifier checkpoint")
    model = load_classifier(state, cfg.backbone_config(), head.shape[0])
    data = load_corpus(args.data, cfg["data.steps"]) if args.data else load_datasets(cfg)[1]
    acc = evaluate(model, data)
    print(json.dumps({"accuracy": acc, "samples": len(data)}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from neuromoco.tensor.gradcheck import run_suite

    results = run_suite(seeds=args.seeds)
    failed = 0
    print(f"{'op':<18}{'max_rel_error':>16}  status")
    for op, err in results.items():
        tol = args.spike_tol if op == "spike_surrogate" else args.tol
        ok = err < tol
        failed += not ok
        print(f"{op:<18}{err:>16.3e}  {'pass' if ok else 'FAIL'}")
    if failed:
        raise NumericalError(f"{failed} gradient checks failed")
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_ablation(args) -> int:
    from neuromoco.experiment import ablation_medians, run_ablation
    from neuromoco.report import plot_ablation

    cfg = _load_config(args)
    rows = run_ablation(cfg, args.seeds, args.workers)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "arm", "accuracy"])
        w.writerows((r.seed, r.arm, f"{r.accuracy:.4f}") for r in rows)
    plot_ablation(rows, out / "ablation.png")
    for arm, med in ablation_medians(rows).items():
        print(f"{arm:<12} median accuracy {med:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    from neuromoco.report import render_report

    for path in render_report(args.metrics, args.out_dir):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neuromoco", description="Momentum-contrast pretraining for spiking networks on event data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, out=True):
        sp.add_argument("--config", help="key = value config file (default: desk preset)")
        sp.add_argument("--seed", type=int, help="override the root seed")
        if out:
            sp.add_argument("--out-dir", help="override out_dir")

    s = sub.add_parser("gen", help="write a synthetic EVST corpus")
    with_config(s, out=False)
    s.add_argument("--classes", type=int)
    s.add_argument("--per-class", type=int, default=10)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("bin", help="bin an EVST corpus into FRMT frame files")
    s.add_argument("--in-dir", required=True)
    s.add_argument("--T", type=int, default=16)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_bin)

    s = sub.add_parser("pretrain", help="self-supervised pretraining")
    with_config(s)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="supervised fine-tuning (random init without --checkpoint)")
    with_config(s)
    s.add_argument("--checkpoint")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="test accuracy of a fine-tuned checkpoint")
    with_config(s, out=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="corpus directory (default: the configured test set)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--spike-tol", type=float, default=1e-10)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablation", help="random-init MBC / mix vs pretrained fine-tuning over seeds")
    with_config(s)
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--workers", type=int, help="parallel seed runs (default: NMC_THREADS or all cores)")
    s.set_defaults(func=cmd_ablation)

    s = sub.add_parser("report", help="CSV table and PNG figures from metrics files")
    s.add_argument("metrics", nargs="+", help="*_metrics.jsonl files")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NeuroMoCoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
