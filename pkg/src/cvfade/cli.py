"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 computation
failure, 3 some solve did not reach optimality (outputs are still written).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import __version__, pipeline
from .channel import read_histogram
from .config import ConfigError, RunConfig, load_config
from .detection import read_moments

EXIT_OK, EXIT_INVALID, EXIT_FAILED, EXIT_NONOPTIMAL = 0, 1, 2, 3

log = logging.getLogger("cvfade")


class InputError(Exception):
    pass


def _sigmas(text: str) -> tuple:
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sigma list {text!r}") from None
    if not vals or any(v < 0 or not math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError("sigma levels must be finite and >= 0")
    return vals


def _log_base(text: str) -> float:
    if text == "e":
        return math.e
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("log base must be 2, e or a number > 1") from None
    if v <= 1:
        raise argparse.ArgumentTypeError("log base must be > 1")
    return v


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace("detection", seed=args.seed)
    if getattr(args, "sigma", None) is not None:
        cfg = cfg.replace("certify", sigma=args.sigma)
    if getattr(args, "log_base", None) is not None:
        cfg = cfg.replace("certify", log_base=args.log_base)
    if getattr(args, "out", None) is not None:
        cfg = cfg.replace(output=str(args.out))
    return cfg


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} {p} not found")
    return p


def _nonoptimal(results) -> int:
    bad = [r for r in results if r.status != "optimal"]
    for r in bad:
        log.warning("bin [%g, %g) sigma %g: %s", r.bin_lo, r.bin_hi, r.sigma, r.status)
    return EXIT_NONOPTIMAL if bad else EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    rec, hist = pipeline.simulate_to_files(cfg)
    print(f"wrote {rec} ({cfg.detection.n_slots} slots)")
    print(f"histogram: {hist.n_bins} bins, mean T {hist.mean:.4f}, retained mass {hist.retained_mass:.4f}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output)
    records = _need(args.records or out / pipeline.FILES["records"], "record file")
    hist = _need(args.histogram or out / pipeline.FILES["histogram"], "histogram file")
    ing = pipeline.ingest_files(records, hist, cfg)
    st = ing.stats
    print(f"ingested {st.records} records ({st.skipped} unparseable lines skipped)")
    print(f"retained bins with moments: {len(ing.binned.bins)}; out of range: {ing.binned.out_of_range}")
    for b, why in ing.binned.rejected.items():
        print(f"rejected bin {b}: {why}")
    return EXIT_OK


def cmd_certify(args) -> int:
    cfg = _config(args)
    default = Path(cfg.output) / pipeline.FILES["moments"]
    if args.moments:
        table = read_moments(_need(args.moments, "moments file"))
    elif args.ideal or cfg.channel.source == "fixed":
        table = pipeline.ideal_table(cfg)
    else:
        table = read_moments(_need(default, "moments file"))
    results, _ = pipeline.certify_table(cfg, table, args.workers)
    path = pipeline.write_results(cfg, results)
    for r in results:
        print(f"[{r.bin_lo:.4f}, {r.bin_hi:.4f}) sigma {r.sigma:g}: N_min {r.negativity:.8f} E_N {r.log_negativity:.6f} {r.status}")
    print(f"wrote {path}")
    return _nonoptimal(results)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.amplitudes:
        cfg = cfg.replace("sweep", amplitudes=args.amplitudes)
    if args.epsilons:
        cfg = cfg.replace("sweep", epsilons=args.epsilons)
    out = pipeline.sweep(cfg, args.workers)
    for fam, t in out["thresholds"].items():
        print(f"{fam}-state zero-negativity threshold: eps = {t:g}")
    return EXIT_OK


def cmd_rate(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output)
    results, base = pipeline.rates.read_results(_need(args.results or out / pipeline.FILES["results"], "results file"))
    hpath = args.histogram or out / pipeline.FILES["histogram"]
    hist = read_histogram(_need(hpath, "histogram file")) if Path(hpath).exists() or args.histogram else None
    log_base = args.log_base if args.log_base is not None else (base or cfg.certify.log_base)
    rep = pipeline.rate_report(cfg, results, hist, state_rate=args.state_rate, log_base=log_base)
    print(rep.summary())
    return _nonoptimal(results)


def cmd_report(args) -> int:
    cfg = _config(args)
    print(pipeline.report(cfg.output), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    res = pipeline.run_all(cfg, args.workers)
    print(res["report"].summary())
    return _nonoptimal(res["results"])


def _floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="override the detection seed")
    common.add_argument("--workers", type=int, default=1, help="worker processes for solves")
    common.add_argument("--sigma", type=_sigmas, help="comma-separated sigma levels, e.g. 0,1,2,3")
    common.add_argument("--log-base", type=_log_base, help="2, e, or a number > 1")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cvfade", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"cvfade {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a record file and histogram")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", parents=[common], help="bin records into normalized moments")
    s.add_argument("--records")
    s.add_argument("--histogram")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("certify", parents=[common], help="certify moments per bin and sigma level")
    s.add_argument("--moments", help="moments CSV (default: the run directory's, else ideal moments)")
    s.add_argument("--ideal", action="store_true", help="certify noise-free moments at the fixed transmission")
    s.set_defaults(func=cmd_certify)

    s = sub.add_parser("sweep", parents=[common], help="theoretical curves and alphabet comparison")
    s.add_argument("--amplitudes", type=_floats)
    s.add_argument("--epsilons", type=_floats)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("rate", parents=[common], help="aggregate results into a rate report")
    s.add_argument("--results")
    s.add_argument("--histogram")
    s.add_argument("--state-rate", type=float)
    s.set_defaults(func=cmd_rate)

    s = sub.add_parser("report", parents=[common], help="summarize a run directory")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", parents=[common], help="simulate, bin, certify and rate in one go")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ConfigError, InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # computation failure
        log.exception("computation failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
