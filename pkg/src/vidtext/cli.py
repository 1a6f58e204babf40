"""Command-line entry point.

Every experiment key is exposed as a flag (``--batch-size 8``,
``--fusion/--no-fusion``) that overrides ``--config``.

Exit codes: 0 success, 1 configuration error, 2 training aborted,
3 I/O or file-format error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from vidtext import data as synth
from vidtext import metrics, training
from vidtext.config import KEYS, SECTIONS, field_type, parse_config
from vidtext.errors import ConfigError, FormatError, TrainingAborted

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_IO = 0, 1, 2, 3


def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="sectioned key-value config file")
    g = p.add_argument_group("experiment keys (override the config file)")
    for key, (section, f) in KEYS.items():
        flag = "--" + key.replace("_", "-")
        if field_type(SECTIONS[section], f) is bool:
            g.add_argument(flag, dest=f"cfg:{key}", action=argparse.BooleanOptionalAction, default=None)
        else:
            g.add_argument(flag, dest=f"cfg:{key}", metavar=key.upper(), default=None, help=f"[{section}]")


def _config(args):
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    return parse_config(args.config, overrides)


def cmd_generate_data(args):
    cfg = _config(args)
    ds = synth.generate(training.synth_spec(cfg), cfg.data.data_seed)
    synth.save(ds, args.out)
    print(f"wrote {len(ds)} pairs ({len(ds.vocab)} words) to {args.out}")


def cmd_train(args):
    cfg = _config(args)
    result = training.train(cfg)
    last = result.evals[-1] if result.evals else None
    print(f"checkpoint: {result.checkpoint}")
    if last:
        print(f"epoch {last['epoch']}: t2v R@1 {last['t2v']['r1']:.3f}  v2t R@1 {last['v2t']['r1']:.3f}")


def _load_dataset(path):
    return synth.load(path) if path else None


def cmd_evaluate(args):
    ds = _load_dataset(args.dataset)
    out = args.out_dir or Path(args.checkpoint).parent
    duals = (False, True) if args.both else (args.dual,)
    for dual in duals:
        t2v, v2t, _ = training.evaluate_checkpoint(args.checkpoint, ds, dual=dual, out_dir=out)
        for r in (t2v, v2t):
            print(json.dumps({"dual_softmax": dual, **r.to_dict()}, sort_keys=True))


def cmd_ablate(args):
    cfg = _config(args)
    table = training.ablation_suite(cfg)
    print(training.format_table(table))
    print(f"table: {Path(cfg.paths.out_dir) / 'ablation.json'}")


def cmd_export_sim(args):
    ds = _load_dataset(args.dataset)
    _, _, S = training.evaluate_checkpoint(args.checkpoint, ds)
    if args.dual:
        S = metrics.dual_softmax(S)
    fmt = args.format or ("csv" if str(args.out).endswith(".csv") else "bin")
    (metrics.save_sim_csv if fmt == "csv" else metrics.save_sim_binary)(args.out, S)
    print(f"wrote {S.shape[0]}x{S.shape[1]} matrix to {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="vidtext", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render a synthetic dataset to a file")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="retrieval reports for a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, help="dataset file (default: rebuilt from the checkpoint's config)")
    p.add_argument("--dual", action="store_true", help="apply dual softmax before ranking")
    p.add_argument("--both", action="store_true", help="write plain and dual reports")
    p.add_argument("--out-dir", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate every ablation row")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-sim", help="write a checkpoint's similarity matrix")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", choices=("bin", "csv"), help="default: from the file extension")
    p.add_argument("--dual", action="store_true", help="export the dual-softmax revised matrix")
    p.set_defaults(func=cmd_export_sim)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc} (last checkpoint: {exc.last_checkpoint})", file=sys.stderr)
        return EXIT_ABORT
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
