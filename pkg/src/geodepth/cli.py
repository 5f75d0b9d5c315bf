"""Command-line entry point: ``geodepth <command> [options]``.

Exit status is 0 on success, 1 for bad input (files, flags, configs) and 2
when a numeric failure such as a NaN loss aborts the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, HarnessError, InputError, NumericError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON file overriding profile fields")
    p.add_argument("--profile", choices=["desk", "paper"], default="desk")
    p.add_argument("--seed", type=int)
    p.add_argument("--aca", choices=["none", "knn", "ball", "adaptive"], help="neighbour aggregation strategy")
    p.add_argument("--gcmf", help="comma-separated fusion scales (1/4,1/2,1/1), 'all' or 'none'")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="geodepth", description="RGB-D depth completion for transparent objects")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    p.add_argument("--out", type=Path)
    p.add_argument("-n", "--num", type=int)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common], help="masked metrics of a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--csv", type=Path)

    p = sub.add_parser("complete", parents=[common], help="complete one depth image")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--rgb", type=Path, required=True)
    p.add_argument("--depth", type=Path, required=True)
    p.add_argument("--camera", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--case", action="append", help="restrict to named cases")

    p = sub.add_parser("bench", parents=[common], help="spatial and attention throughput")
    p.add_argument("--csv", type=Path)

    p = sub.add_parser("ablate", parents=[common], help="fusion-scale and aggregation-strategy sweeps")
    p.add_argument("--sweep", choices=["gcmf", "strategy", "both"], default="both")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--data", type=Path, help="training split")
    p.add_argument("--eval-data", type=Path, help="evaluation split (defaults to the training split)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--csv", type=Path)
    return parser


def _config(args):
    from .config import load_config, parse_gcmf

    over = {"seed": args.seed, "strategy": args.aca}
    if args.gcmf is not None:
        over["gcmf"] = parse_gcmf(args.gcmf)
    if getattr(args, "epochs", None) is not None:
        over["epochs"] = args.epochs
    return load_config(args.config, args.profile, **over)


def _emit(rows: list[dict], path: Path | None) -> None:
    from .train import write_rows

    if path is not None:
        write_rows(path, rows)
    if rows:
        keys = list(rows[0])
        print(",".join(keys))
        for r in rows:
            print(",".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in keys))


def cmd_gen_data(args) -> int:
    from .data import generate_dataset

    cfg = _config(args)
    out = args.out or Path(cfg.data_dir)
    paths = generate_dataset(out, args.num or cfg.n_samples, cfg.seed, cfg.scene_spec())
    print(f"wrote {len(paths)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .config import save_config
    from .data import load_dataset
    from .train import train

    cfg = _config(args)
    out = args.out or Path(cfg.out_dir)
    samples = load_dataset(args.data or cfg.data_dir)
    resume = load_checkpoint(args.resume) if args.resume else None
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    res = train(cfg, samples, out_dir=out, resume=resume)
    last = res.epoch_log[-1] if res.epoch_log else {}
    print(json.dumps({"checkpoint": str(res.checkpoint), **last}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .train import evaluate, load_model

    cfg = _config(args)
    model = load_model(cfg, args.checkpoint)
    row = {"checkpoint": str(args.checkpoint), **evaluate(model, load_dataset(args.data or cfg.data_dir))}
    _emit([row], args.csv)
    return EXIT_OK


def cmd_complete(args) -> int:
    from .train import complete_files, load_model

    model = load_model(_config(args), args.checkpoint)
    d, c = complete_files(model, args.rgb, args.depth, args.camera, args.out)
    print(f"wrote {d} and {c}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CASES, TOLERANCE, passed, run_suite, summarize

    names = args.case or list(CASES)
    unknown = set(names) - set(CASES)
    if unknown:
        raise InputError(f"unknown gradient cases {sorted(unknown)}")
    results = run_suite(names, range(args.seeds))
    for name, err in summarize(results).items():
        print(f"{'ok  ' if err < TOLERANCE else 'FAIL'} {name:<20s} max rel err {err:.3e}")
    if not passed(results):
        raise NumericError("gradient check exceeded tolerance")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import attention_rows, spatial_rows

    spatial = spatial_rows()
    attention = attention_rows()
    _emit(spatial, None)
    _emit(attention, None)
    if args.csv is not None:
        import csv

        fields = sorted({k for r in spatial + attention for k in r})
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(spatial + attention)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .data import load_dataset
    from .train import ablate

    cfg = _config(args)
    train_set = load_dataset(args.data or cfg.data_dir)
    eval_set = load_dataset(args.eval_data) if args.eval_data else train_set
    kinds = ["gcmf", "strategy"] if args.sweep == "both" else [args.sweep]
    cache: dict = {}
    rows = []
    for kind in kinds:
        rows += ablate(cfg, train_set, eval_set, kind, args.seeds, cache=cache)
    _emit(rows, args.csv)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "complete": cmd_complete,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ConfigError, HarnessError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
