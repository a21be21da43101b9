"""Command-line front end.

Subcommands: generate (dataset to JSONL), train (config to run artifacts),
analyze (two feature CSVs to a report), report (aggregate runs into a
comparison table), project (feature CSV to 2-D coordinates). The output root
defaults to $GRAPHSHIFT_OUT, then to ./runs for training and the current
directory for analysis commands.
"""

import argparse
import csv
import json
import os
import sys

from .errors import ConfigError, GraphshiftError
from .genmetrics import (
    analyze,
    logits_sidecar_path,
    pca_project_2d,
    read_feature_csv,
    read_logits_csv,
    report_to_json,
    write_report,
)
from .graphdata import generate_dataset, save_bundle
from .harness import (
    OUT_ENV_VAR,
    aggregate_runs,
    config_from_dict,
    render_table,
    run_seed_grid,
    run_training,
)


def _load_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}",
                              path="config") from None


def _out_root(args, fallback="."):
    return args.out or os.environ.get(OUT_ENV_VAR) or fallback


def _cmd_generate(args):
    raw = _load_json(args.config)
    spec = dict(raw.get("dataset", raw))
    if args.seed is not None:
        spec["seed"] = args.seed
    elif "seed" not in spec and raw.get("seed") is not None:
        spec["seed"] = int(raw["seed"])  # inherit the experiment seed
    if "seed" not in spec:
        raise ConfigError("seed is required", path="dataset.seed")
    bundle = generate_dataset(spec)
    out_dir = _out_root(args, "runs")
    path = os.path.join(out_dir, "dataset.jsonl")
    save_bundle(bundle, path)
    counts = ", ".join(f"{name}={len(graphs)}" for name, graphs in bundle.items())
    print(f"wrote {path} ({counts})")
    return 0


def _cmd_train(args):
    raw = _load_json(args.config)
    out_root = _out_root(args, "runs")
    if args.seed is not None:
        seeds = [args.seed]
    elif raw.get("seeds"):
        seeds = [int(s) for s in raw["seeds"]]
    elif raw.get("seed") is not None:
        seeds = [int(raw["seed"])]
    else:
        raise ConfigError("seed is required", path="seed")

    if len(seeds) == 1:
        # validate before any directory is created
        cfg = config_from_dict(raw, seed_override=seeds[0],
                               out_override=out_root)
        artifacts = run_training(cfg)
        run_dirs = [artifacts.out_dir]
    else:
        config_from_dict(raw, seed_override=seeds[0], out_override=out_root)
        run_dirs = run_seed_grid(raw, seeds, out_root,
                                 parallel=args.parallel)
    for run_dir in run_dirs:
        with open(os.path.join(run_dir, "report.json")) as fh:
            print(f"{run_dir}: {fh.read().strip()}")
    print(render_table(aggregate_runs(run_dirs)), end="")
    return 0


def _maybe_logits(feature_csv):
    path = logits_sidecar_path(feature_csv)
    if not os.path.exists(path):
        return None
    _, _, logits = read_logits_csv(path)
    return logits


def _cmd_analyze(args):
    id_fm = read_feature_csv(args.id_csv)
    ood_fm = read_feature_csv(args.ood_csv)
    report = analyze(id_fm, ood_fm,
                     id_logits=_maybe_logits(args.id_csv),
                     ood_logits=_maybe_logits(args.ood_csv))
    out_dir = _out_root(args)
    path = os.path.join(out_dir, "report.json")
    write_report(report, path)
    print(report_to_json(report), end="")
    print(f"wrote {path}")
    return 0


def _cmd_report(args):
    rows = aggregate_runs(args.run_dirs)
    text = render_table(rows)
    print(text, end="")
    if args.out:
        path = os.path.join(args.out, "aggregate.json")
        os.makedirs(args.out, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {path}")
    return 0


def _cmd_project(args):
    fm = read_feature_csv(args.csv)
    coords = pca_project_2d(fm.rows)
    out_dir = _out_root(args, os.path.dirname(os.path.abspath(args.csv)))
    stem = os.path.splitext(os.path.basename(args.csv))[0]
    path = os.path.join(out_dir, f"{stem}.coords.csv")
    os.makedirs(out_dir, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "label", "p0", "p1"])
        for label, row in zip(fm.labels, coords):
            w.writerow([fm.split_tag, int(label), repr(float(row[0])),
                        repr(float(row[1]))])
    print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="graphshift",
        description="Distribution-shift experiments for graph classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a dataset bundle to JSONL")
    p.add_argument("--config", required=True, help="JSON config path")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train one config, write run artifacts")
    p.add_argument("--config", required=True, help="JSON config path")
    p.add_argument("--seed", type=int, help="override the config seed(s)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--parallel", type=int, default=1,
                   help="worker processes for a seed grid")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("analyze", help="report from two feature CSVs")
    p.add_argument("id_csv", help="in-distribution feature CSV")
    p.add_argument("ood_csv", help="out-of-distribution feature CSV")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("report", help="aggregate run directories into a table")
    p.add_argument("run_dirs", nargs="+", help="run output directories")
    p.add_argument("--out", help="directory for aggregate.json")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("project", help="2-D projection of a feature CSV")
    p.add_argument("csv", help="feature CSV path")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_project)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        # message already names the offending key
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GraphshiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
