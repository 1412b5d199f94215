"""Command-line entry point.

Subcommands: ``sample`` (run a sampler, write archive + reports), ``train``
(fit the strategy networks, write checkpoint + loss trace), ``compare``
(run an experiment manifest into a comparison table), ``diagnose``
(re-report an existing archive).  Exit codes: 0 success, 1 configuration
error, 2 divergence abort, 3 archive/I-O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ArchiveError, ConfigError, DivergenceAbort
from .harness import (ExperimentManifest, RunSpec, execute_run,
                      load_config_tree, mean_ess, read_archive,
                      run_comparison, write_archive, write_compare_csv,
                      write_csv_mirror, write_report_csv, write_timing)


class _Parser(argparse.ArgumentParser):
    # argparse usage problems are configuration errors (exit 1, not 2)
    def error(self, message):
        raise ConfigError(message)


def _progress(step: int, total: int) -> None:
    print(f"\rstep {step}/{total}", end="", file=sys.stderr)
    if step + 500 >= total:
        print(file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcsghmc",
                     description="adaptively rotated SGHMC sampling harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sample = sub.add_parser("sample", help="run one sampler")
    p_sample.add_argument("--config", help="YAML run config")
    p_sample.add_argument("--target", help="target name")
    p_sample.add_argument("--method", choices=("apm", "hmc"))
    p_sample.add_argument("--seed", type=int)
    p_sample.add_argument("--checkpoint", help="trained strategy file")
    p_sample.add_argument("--out", help="output directory")
    p_sample.add_argument("--csv", action="store_const", const=True,
                          default=None, help="also write the CSV mirror")
    p_sample.add_argument("--thin", type=int, help="keep every k-th step")
    p_sample.set_defaults(func=cmd_sample)

    p_train = sub.add_parser("train", help="train the strategy networks")
    p_train.add_argument("--config", help="YAML training config")
    p_train.add_argument("--checkpoint", help="resume from this checkpoint")
    p_train.add_argument("--out", help="output directory")
    p_train.add_argument("--seed", type=int)
    p_train.set_defaults(func=cmd_train)

    p_cmp = sub.add_parser("compare", help="run a manifest of experiments")
    p_cmp.add_argument("manifest", help="YAML experiment manifest")
    p_cmp.add_argument("--out", help="override the output directory")
    p_cmp.set_defaults(func=cmd_compare)

    p_diag = sub.add_parser("diagnose", help="report on an archive")
    p_diag.add_argument("archive", help="binary chain archive")
    p_diag.add_argument("--out", help="report path (default: alongside)")
    p_diag.add_argument("--csv", action="store_const", const=True,
                        default=None, help="also write the CSV mirror")
    p_diag.set_defaults(func=cmd_diagnose)
    return parser


def cmd_sample(args) -> int:
    tree = load_config_tree(args.config) if args.config else {}
    spec = RunSpec.resolve(tree, method=args.method, target=args.target,
                           seed=args.seed, out=args.out, csv=args.csv,
                           thin=args.thin, checkpoint=args.checkpoint)
    spec.out.mkdir(parents=True, exist_ok=True)
    print(f"sampling {spec.stem()}", file=sys.stderr)
    archive = execute_run(spec, progress=_progress)
    stem = spec.out / spec.stem()
    write_archive(stem.with_suffix(".bin"), archive)
    write_timing(stem.with_suffix(".bin"), archive)
    if spec.csv:
        write_csv_mirror(stem.parent / f"{stem.name}_mirror.csv", archive)
    write_report_csv(stem.parent / f"{stem.name}_diagnostics.csv", archive)
    print(f"{stem.with_suffix('.bin')} mean_ess={mean_ess(archive):.2f} "
          f"runtime_s={archive.runtime_s:.2f}")
    return 0


def cmd_train(args) -> int:
    from . import training   # heavy import kept off the fast paths

    tree = load_config_tree(args.config) if args.config else {}
    tree_out = tree.pop("out", ".")
    out = Path(args.out or tree_out)
    out.mkdir(parents=True, exist_ok=True)
    if args.seed is not None:
        tree["seed"] = args.seed
    if args.checkpoint is not None:
        tree["resume_from"] = args.checkpoint
    config = training.trainconfig_from_mapping(tree)
    result = training.train(config, progress=_progress)
    ckpt = out / "strategy.ckpt"
    result.save_checkpoint(ckpt)
    result.save_state(out / "train_state.npz")
    trace = out / "loss_trace.csv"
    training.write_loss_csv(trace, result)
    print(f"{ckpt} windows={len(result.loss_rows)} "
          f"skipped={result.skipped_windows}")
    return 0


def cmd_compare(args) -> int:
    manifest = ExperimentManifest.from_file(args.manifest)
    if args.out:
        manifest.out = Path(args.out)
    manifest.out.mkdir(parents=True, exist_ok=True)

    def progress(done, total, row):
        print(f"[{done}/{total}] {row[0]} {row[1]} seed={row[2]} "
              f"{row[-1]}", file=sys.stderr)

    rows = run_comparison(manifest, progress=progress)
    path = manifest.out / manifest.report
    write_compare_csv(path, rows)
    print(path)
    return 0


def cmd_diagnose(args) -> int:
    archive = read_archive(args.archive)
    base = Path(args.archive)
    report = Path(args.out) if args.out else base.with_name(
        base.stem + "_diagnostics.csv")
    write_report_csv(report, archive)
    if args.csv:
        write_csv_mirror(base.with_name(base.stem + "_mirror.csv"), archive)
    print(f"{report} mean_ess={mean_ess(archive):.2f}")
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DivergenceAbort as exc:
        print(f"divergence abort: {exc}", file=sys.stderr)
        return 2
    except (ArchiveError, OSError) as exc:
        print(f"archive error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
