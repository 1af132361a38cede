"""Command-line front end: ``run``, ``sweep`` and ``selftest``.

Exit codes: 0 success, 1 bad usage or config, 2 engine abort, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import colorspace as cs
from . import config as cfgmod
from . import report
from .engine import EngineAbort, GuidanceConfig, RunLog, run_guided_inpaint

log = logging.getLogger(__name__)

OUT_ENV = "CHROMANUDGE_OUT"
EXIT_OK, EXIT_USAGE, EXIT_ABORT, EXIT_IO = 0, 1, 2, 3

SWEEP_COLUMNS = ("seed", "status", "mean_de", "p95_de", "median_de", "max_de") + tuple(
    f"frac_T{t:g}" for t in report.DEFAULT_THRESHOLDS
)


@dataclass(frozen=True)
class RunOutcome:
    seed: int
    code: int
    stats: report.DeltaEStats | None = None
    thresholds: report.ThresholdReport | None = None
    p95: float = float("nan")
    message: str = ""


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def resolve_config(preset: str | None, config_path: str | None, sets, seed: int | None = None) -> GuidanceConfig:
    """Preset, then config file, then ``--set`` overrides, then ``--seed``."""
    cfg = cfgmod.preset(preset) if preset else GuidanceConfig()
    if config_path:
        cfg = cfgmod.load_config(config_path, cfg)
    cfg = cfgmod.apply_overrides(cfg, cfgmod.parse_set_flags(sets))
    if seed is not None:
        cfg = cfg.with_(seed=seed)
    return cfg


def evaluate(final: cs.PixelImage, cfg: GuidanceConfig, mask: np.ndarray):
    stats = report.roi_delta_e_stats(final, cfg.target_srgb, mask)
    thresholds = report.threshold_satisfaction(final, cfg.target_srgb, mask)
    p95 = report.roi_percentile(final, cfg.target_srgb, mask, 95.0)
    return stats, thresholds, p95


def write_outputs(out: Path, cfg: GuidanceConfig, final: cs.PixelImage, runlog: RunLog, mask: np.ndarray):
    stats, thresholds, p95 = evaluate(final, cfg, mask)
    out.mkdir(parents=True, exist_ok=True)
    report.write_png(final, out / "final.png")
    for name, img in report.render_heatmap(final, cfg.target_srgb, mask).items():
        report.write_png(img, out / f"heatmap_{name}.png")
    report.write_png(report.render_thresholds(thresholds, mask), out / "thresholds.png")
    snaps = out / "snapshots"
    snaps.mkdir(exist_ok=True)
    for i, img in runlog.snapshots:
        report.write_png(img, snaps / f"{i:03d}.png")
    report.write_run_summary(runlog, stats, thresholds, cfg, out)
    (out / "config.resolved").write_text(cfgmod.serialize(cfg), encoding="utf-8")
    (out / "timing.txt").write_text(f"runtime_seconds = {runlog.runtime_seconds:.3f}\n", encoding="utf-8")
    return stats, thresholds, p95


def execute(cfg: GuidanceConfig, out: Path) -> RunOutcome:
    """One run plus its output files; errors become exit codes."""
    from .engine import prepare

    try:
        final, runlog = run_guided_inpaint(cfg)
    except EngineAbort as exc:
        return RunOutcome(cfg.seed, EXIT_ABORT, message=f"engine abort: {exc}")
    except OSError as exc:
        return RunOutcome(cfg.seed, EXIT_IO, message=f"cannot read input: {exc}")
    try:
        stats, thresholds, p95 = write_outputs(out, cfg, final, runlog, prepare(cfg).mask)
    except OSError as exc:
        return RunOutcome(cfg.seed, EXIT_IO, message=f"cannot write outputs: {exc}")
    return RunOutcome(cfg.seed, EXIT_OK, stats, thresholds, p95)


def cmd_run(cfg: GuidanceConfig, out_dir) -> int:
    outcome = execute(cfg, Path(out_dir))
    if outcome.code != EXIT_OK:
        print(f"error: {outcome.message}", file=sys.stderr)
        return outcome.code
    s = outcome.stats
    print(f"seed {cfg.seed}: mean {report.DE_LABEL} {s.mean:.2f}, p95 {outcome.p95:.2f} -> {out_dir}")
    return EXIT_OK


def _sweep_row(o: RunOutcome) -> list[str]:
    if o.code != EXIT_OK:
        return [str(o.seed), f"exit{o.code}"] + [""] * (len(SWEEP_COLUMNS) - 2)
    s = o.stats
    row = [str(o.seed), "ok", f"{s.mean:.9g}", f"{o.p95:.9g}", f"{s.median:.9g}", f"{s.max:.9g}"]
    return row + [f"{f:.9g}" for f in o.thresholds.fraction_satisfied]


def _sweep_job(cfg: GuidanceConfig, out: str) -> RunOutcome:
    return execute(cfg, Path(out))


def cmd_sweep(cfg: GuidanceConfig, seeds, out_dir, workers: int | None = None) -> int:
    """Independent runs over ``seeds``; one subdirectory each plus ``sweep.csv``."""
    seeds = list(seeds)
    if not seeds:
        print("error: sweep needs at least one seed", file=sys.stderr)
        return EXIT_USAGE
    out = Path(out_dir)
    workers = max(1, min(workers or os.cpu_count() or 1, len(seeds)))
    outcomes: dict[int, RunOutcome] = {}
    jobs = [(cfg.with_(seed=s), str(out / f"seed_{s:04d}")) for s in seeds]
    if workers == 1:
        for c, o in jobs:
            outcomes[c.seed] = _sweep_job(c, o)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_sweep_job, c, o): c.seed for c, o in jobs}
            for fut in as_completed(futures):
                seed = futures[fut]
                try:
                    outcomes[seed] = fut.result()
                except Exception as exc:  # worker crashed outright
                    outcomes[seed] = RunOutcome(seed, EXIT_ABORT, message=str(exc))
    worst = EXIT_OK
    try:
        out.mkdir(parents=True, exist_ok=True)
        with (out / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SWEEP_COLUMNS)
            for s in seeds:
                writer.writerow(_sweep_row(outcomes[s]))
    except OSError as exc:
        print(f"error: cannot write sweep table: {exc}", file=sys.stderr)
        return EXIT_IO
    for s in seeds:
        o = outcomes[s]
        if o.code != EXIT_OK:
            print(f"seed {s}: {o.message}", file=sys.stderr)
        worst = max(worst, o.code)
    ok = [outcomes[s].stats.mean for s in seeds if outcomes[s].code == EXIT_OK]
    if ok:
        print(f"{len(ok)}/{len(seeds)} seeds ok, mean {report.DE_LABEL} {np.mean(ok):.2f} -> {out / 'sweep.csv'}")
    return worst


def read_sweep_csv(path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_selftest(white=None) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest(white=white) else EXIT_USAGE


def _parse_seeds(text: str) -> list[int]:
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="start from a built-in configuration")
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")

    parser = argparse.ArgumentParser(prog="chromanudge", description="Color-guided latent inpainting on a toy diffusion model.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="one guided run")
    run.add_argument("--seed", type=int)

    sweep = sub.add_parser("sweep", parents=[common], help="independent runs over several seeds")
    sweep.add_argument("--seeds", type=_parse_seeds, default=list(range(10)), help="e.g. 0-9 or 1,4,7")
    sweep.add_argument("--workers", type=int, default=None, help="parallel runs (default: CPU count)")

    st = sub.add_parser("selftest", help="run the built-in invariant checks")
    st.add_argument("--perturb-white", type=float, default=None, metavar="DELTA", help=argparse.SUPPRESS)

    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "selftest":
        white = None
        if args.perturb_white is not None:
            white = cs.D65_WHITE + np.array([args.perturb_white, 0.0, 0.0])
        return cmd_selftest(white)

    try:
        cfg = resolve_config(args.preset, args.config, args.set, getattr(args, "seed", None))
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO

    if args.command == "show-config":
        sys.stdout.write(cfgmod.serialize(cfg))
        return EXIT_OK
    name = args.preset or "custom"
    if args.command == "run":
        out = Path(args.out) if args.out else default_out_root() / f"{name}_seed{cfg.seed}"
        return cmd_run(cfg, out)
    out = Path(args.out) if args.out else default_out_root() / f"{name}_sweep"
    return cmd_sweep(cfg, args.seeds, out, args.workers)


if __name__ == "__main__":
    sys.exit(main())
