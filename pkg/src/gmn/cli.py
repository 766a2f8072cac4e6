"""``gmn`` command line: generate, train, eval, ablate, diagnose, bench.

Every subcommand reads an optional ``--config`` file, applies ``--set
section.key=value`` overrides, copies the config file verbatim into the output
directory and writes the effective configuration next to it.

Exit codes: 0 success, 1 other library error, 2 config, 3 data, 4 numeric,
5 report/checkpoint I/O.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from . import pipeline, reporting
from .checkpoint import load_checkpoint
from .config import PRESETS, ExperimentConfig, load_config
from .data import load_embeddings
from .errors import ConfigError, GMNError, ReportIOError

log = logging.getLogger("gmn")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="sectioned key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--out", help="output directory (default: experiment.output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gmn", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic train/probe/gallery embedding files")
    _common(p)

    p = sub.add_parser("train", help="train a model; writes checkpoint, log and loss figure")
    _common(p)
    p.add_argument("--preset", help="ablation preset: baseline, a, ab, abc or full "
                                    "(overrides train.use_* switches)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--until-epoch", type=int, help="stop after this epoch (resume later)")
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                   help="also checkpoint every N epochs")

    p = sub.add_parser("eval", help="evaluate a checkpoint on probe/gallery")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe", help="probe embedding file (default: from config)")
    p.add_argument("--gallery", help="gallery embedding file (default: from config)")
    p.add_argument("--protocol", default="auto",
                   help="auto (both when the checkpoint has a metric net), feature_euclidean, "
                        "feature_cosine or mnet")

    p = sub.add_parser("ablate", help="run the four presets over paired seeds, plus optional sweeps")
    _common(p)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at the config seed")
    p.add_argument("--sweep", action="append", default=[], metavar="FIELD=V1,V2",
                   help="extra configurations on the full model, e.g. lam=0.1,1,2 or "
                        "pair_scheme=random,intra_domain (repeatable)")
    p.add_argument("--presets", default=",".join(PRESETS),
                   help="comma-separated subset of presets to run")

    p = sub.add_parser("diagnose", help="domain-gap diagnostic: instance vs pair feature separability")
    _common(p)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--pairs-per-domain", type=int, default=200)

    p = sub.add_parser("bench", help="evaluation wall time against gallery size")
    _common(p)
    p.add_argument("--sizes", default=",".join(str(s) for s in pipeline.BENCH_SIZES))
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--repeats", type=int, default=3)
    return ap


def _prepare(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config, args.overrides)
    out = Path(args.out or cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.config:
            shutil.copyfile(args.config, out / "config.ini")
    except OSError as exc:
        raise ReportIOError(f"cannot prepare output directory {out}: {exc}") from exc
    reporting.write_text(out / "config_effective.ini", cfg.to_ini())
    return cfg, out


def _print(text: str):
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_generate(args, cfg, out):
    paths = pipeline.generate(cfg, out)
    for name, path in paths.items():
        _print(f"{name}\t{path}")


def cmd_train(args, cfg, out):
    if args.preset:
        cfg = cfg.with_preset(args.preset)
        reporting.write_text(out / "config_effective.ini", cfg.to_ini())
    splits = pipeline.build_splits(cfg)
    state = pipeline.train_model(cfg, splits, out, resume=args.resume, until_epoch=args.until_epoch,
                                 checkpoint_every=args.checkpoint_every)
    rows = pipeline.history_table(state)
    if rows:
        _print(reporting.aligned_table(rows[-1:], ["epoch", "lr", "l_cls", "l_tri", "l_gmn",
                                                   "l_pic_pos", "l_pic_neg", "total"]))
    _print(f"checkpoint\t{out / 'checkpoint.gmnc'}")


def cmd_eval(args, cfg, out):
    state = load_checkpoint(args.checkpoint)
    if args.probe or args.gallery:
        if not (args.probe and args.gallery):
            raise ConfigError("--probe and --gallery must be given together")
        probe, gallery = load_embeddings(args.probe), load_embeddings(args.gallery)
    else:
        splits = pipeline.build_splits(cfg)
        probe, gallery = splits.probe, splits.gallery
    label = Path(args.checkpoint).stem
    reports = pipeline.evaluate_model(cfg, state.model, probe, gallery, [args.protocol], out, label)
    rows = [pipeline.eval_row(label, r) for r in reports]
    _print(reporting.aligned_table(rows, ["protocol", "mAP"] + [f"R{r}" for r in cfg.eval.ranks]))


def cmd_ablate(args, cfg, out):
    presets = [p for p in args.presets.split(",") if p.strip()]
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    _, summary = pipeline.run_ablation(cfg, seeds, args.sweep, out, presets)
    _print(reporting.aligned_table(summary, ["config", "protocol", "seeds", "mAP", "R1", "R5", "R10"]))


def cmd_diagnose(args, cfg, out):
    rows = pipeline.run_diagnose(cfg, range(cfg.seed, cfg.seed + args.seeds),
                                 args.pairs_per_domain, out)
    _print(reporting.aligned_table(rows, ["seed", "instance_space_accuracy", "pair_space_accuracy",
                                          "chance_level"]))
    wins = sum(r["pair_space_accuracy"] < r["instance_space_accuracy"] for r in rows)
    _print(f"pair-space accuracy below instance-space accuracy in {wins}/{len(rows)} seeds")


def cmd_bench(args, cfg, out):
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sizes must be comma-separated integers: {args.sizes!r}") from None
    if len(sizes) < 2:
        raise ConfigError("bench needs at least two gallery sizes for the scaling fit")
    result = pipeline.run_bench(cfg, sizes, args.probes, args.repeats, out)
    _print(pipeline.bench_text(result))


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "diagnose": cmd_diagnose, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, out = _prepare(args)
        COMMANDS[args.command](args, cfg, out)
    except GMNError as exc:
        sys.stderr.write(f"gmn {args.command}: {type(exc).__name__}: {exc}\n")
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
