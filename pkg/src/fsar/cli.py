"""Command-line driver: train, eval, census, gen-data."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from fsar.config import ConfigError, RunConfig, dump_config, load_config
from fsar.data import save_embedding_file, synth_dataset
from fsar.training import (
    FewShotModel,
    build_manifest,
    evaluate,
    load_checkpoint,
    param_census,
    save_checkpoint,
    train,
)


def _write_records_csv(records: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "query", "true", "predicted", "correct"])
        for rec in records:
            for qi, (t, p) in enumerate(zip(rec["true"], rec["predicted"])):
                writer.writerow([rec["episode"], qi, t, p, int(t == p)])


def cmd_train(args) -> int:
    config = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(config)
    save_checkpoint(result.model.registry, out / "checkpoint.bin")
    with open(out / "train_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(result.log[0].keys()))
        writer.writeheader()
        writer.writerows(result.log)
    (out / "config.echo").write_text(dump_config(config), encoding="utf-8")
    print(f"trained {config.episodes_train} episodes; checkpoint at {out / 'checkpoint.bin'}")
    print(f"final loss {result.log[-1]['loss']:.4f}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config)
    manifest = build_manifest(config)
    model = FewShotModel(config, num_classes=len(manifest.class_vocabulary))
    load_checkpoint(model.registry, args.checkpoint)
    report = evaluate(config, model, manifest, episodes=args.episodes)
    if args.json:
        print(report.to_json())
    else:
        print(f"accuracy {report.mean_accuracy:.4f} +/- {report.ci95:.4f} over {report.episodes} episodes")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        _write_records_csv(report.records, out / "episodes.csv")
    return 0


def cmd_census(args) -> int:
    config = load_config(args.config)
    census = param_census(config)
    if args.json:
        print(json.dumps(census, indent=2))
        return 0
    print(f"{'group':<16}{'total':>14}{'tunable':>14}")
    for group, counts in sorted(census["groups"].items()):
        print(f"{group:<16}{counts['total']:>14}{counts['tunable']:>14}")
    print(f"{'all':<16}{census['total']:>14}{census['tunable']:>14}")
    ratio = census["tunable"] / census["total"] if census["total"] else 0.0
    print(f"tunable/total ratio: {ratio:.4f}")
    return 0


def cmd_gen_data(args) -> int:
    manifest = synth_dataset(
        classes=args.classes,
        videos_per_class=args.videos,
        frames=args.frames,
        grid=(args.grid_rows, args.grid_cols, args.patch_dim),
        seed=args.seed,
        noise=args.noise,
        drift=args.drift,
    )
    save_embedding_file(manifest, args.out)
    print(f"wrote {len(manifest.records)} records to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on episodes from the train split")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=None)
    p_eval.add_argument("--json", action="store_true")
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(fn=cmd_eval)

    p_census = sub.add_parser("census", help="parameter census for a config")
    p_census.add_argument("--config", required=True)
    p_census.add_argument("--json", action="store_true")
    p_census.set_defaults(fn=cmd_census)

    p_gen = sub.add_parser("gen-data", help="generate a synthetic embedding file")
    p_gen.add_argument("--classes", type=int, required=True)
    p_gen.add_argument("--videos", type=int, required=True)
    p_gen.add_argument("--frames", type=int, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--grid-rows", type=int, default=2)
    p_gen.add_argument("--grid-cols", type=int, default=2)
    p_gen.add_argument("--patch-dim", type=int, default=16)
    p_gen.add_argument("--noise", type=float, default=0.0)
    p_gen.add_argument("--drift", type=float, default=3.0)
    p_gen.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
