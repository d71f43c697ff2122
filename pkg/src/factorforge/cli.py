"""Command-line entry points.

Subcommands: fit, eval, synth, complete, dictlearn.  Every run is driven by
a TOML config (see config.DEFAULTS); a handful of flags override the config
in place.  Exit codes: 0 success (fit: converged), 2 fit stopped at the
outer iteration cap, 1 runtime failure (bad data, numeric breakdown),
64 usage errors (bad flags, missing or invalid config).
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

from . import config as cfgmod
from . import plots
from .admm import InitializationError
from .driver import FitResult, evaluate, fit, fit_two_stage
from .harness import (CompletionVariant, SplitSpec, SynthSpec, gen_synthetic,
                      run_completion_cv, run_dictlearn)
from .tensorio import (TensorFormatError, load_factors, load_tensor,
                       save_factors, save_tensor)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MAX_ITER = 2
EXIT_USAGE = 64

TRACE_COLUMNS = ("iteration", "objective", "rel_error", "inner_iterations",
                 "elapsed_s", "mu", "violation")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="factorforge",
                     description="Constrained matrix/tensor factorization")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML run config")
        p.add_argument("--input", help="override run.input")
        p.add_argument("--output", help="override run.output")
        p.add_argument("--format", dest="fmt", help="override run.format")
        p.add_argument("--seed", type=int, help="override problem.seed")
        p.add_argument("--no-plots", action="store_true",
                       help="skip figure rendering")
        p.add_argument("--verbose", action="store_true",
                       help="per-iteration progress on stdout")
        return p

    p_fit = add("fit", "factor a tensor")
    p_fit.add_argument("--rank", type=int, help="override problem.rank")
    p_fit.add_argument("--outer-max-iter", type=int,
                       help="override problem.outer_max_iter")
    p_fit.add_argument("--resume", help="previous output dir to continue from")

    p_eval = add("eval", "score saved factors against a tensor")
    p_eval.add_argument("--factors", required=True,
                        help="factor directory (save_factors layout)")

    add("synth", "generate a planted synthetic tensor")
    add("complete", "cross-validated matrix completion study")
    add("dictlearn", "sparse dictionary learning study")
    return parser


def _apply_thread_cap():
    raw = os.environ.get("FACTORFORGE_THREADS")
    if raw is None or raw == "":
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        sys.stderr.write(
            "warning: ignoring invalid FACTORFORGE_THREADS=%r\n" % raw)
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except Exception as exc:  # cap is best-effort
        sys.stderr.write("warning: could not cap threads: %s\n" % exc)


def _load_config(args):
    cfg = cfgmod.load_config(args.config)
    if args.input:
        cfg["run"]["input"] = args.input
    if args.output:
        cfg["run"]["output"] = args.output
    if args.fmt:
        cfg["run"]["format"] = args.fmt
    if args.seed is not None:
        cfg["problem"]["seed"] = args.seed
        cfg["synth"]["seed"] = args.seed
        cfg["completion"]["seed"] = args.seed
    if getattr(args, "rank", None) is not None:
        cfg["problem"]["rank"] = args.rank
    if getattr(args, "outer_max_iter", None) is not None:
        cfg["problem"]["outer_max_iter"] = args.outer_max_iter
    if args.no_plots:
        cfg["run"]["plots"] = False
    return cfg


def _load_input(cfg):
    path = cfg["run"]["input"]
    if not path:
        raise cfgmod.ConfigError("run.input is not set (use --input or the config)")
    fmt = cfg["run"]["format"] or None
    return load_tensor(path, fmt)


def _identity_hash(cfg):
    # the run section is I/O plumbing (paths, cadence, plots); only the
    # sections that determine the computed results feed the recorded hash
    return cfgmod.config_hash({k: v for k, v in cfg.items() if k != "run"})


def _fmt_cell(value):
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return "|".join(str(v) for v in value)
    return str(value)


def _record_row(rec):
    return [_fmt_cell(rec.iteration), _fmt_cell(rec.objective),
            _fmt_cell(rec.rel_error), _fmt_cell(rec.inner_iterations),
            _fmt_cell(rec.elapsed_s), _fmt_cell(rec.mu),
            _fmt_cell(rec.violation)]


def _write_trace(path, records, cadence, prior_rows=None):
    cadence = max(1, int(cadence))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in prior_rows or []:
            writer.writerow(row)
        last = len(records) - 1
        for i, rec in enumerate(records):
            if i == last or rec.iteration % cadence == 0:
                writer.writerow(_record_row(rec))


def _read_trace_rows(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_COLUMNS:
            raise TensorFormatError("%s: not a trace file" % path)
        return [row for row in reader if row]


def _cmd_fit(args):
    cfg = _load_config(args)
    data = _load_input(cfg)
    pcfg = cfgmod.problem_from_config(cfg)
    prior_rows = []
    iter_offset = 0
    time_offset = 0.0
    if args.resume:
        factors, _manifest = load_factors(os.path.join(args.resume, "factors"))
        pcfg = replace(pcfg, init="provided", init_factors=factors)
        old_trace = os.path.join(args.resume, "trace.csv")
        if os.path.exists(old_trace):
            prior_rows = _read_trace_rows(old_trace)
            if prior_rows:
                iter_offset = int(prior_rows[-1][0])
                time_offset = float(prior_rows[-1][4])
    verbose = args.verbose
    cadence = max(1, int(cfg["run"]["log_cadence"]))

    def progress(rec):
        if verbose and (rec.iteration % cadence == 0):
            print("iter %4d  objective %.6e  rel_error %.6e" %
                  (rec.iteration + iter_offset, rec.objective, rec.rel_error))

    two_stage = bool(cfg["problem"]["two_stage"]) and pcfg.loss.needs_split
    runner = fit_two_stage if two_stage else fit
    result = runner(data, pcfg, callback=progress)
    if iter_offset or time_offset:
        result = FitResult(
            result.factors,
            [replace(r, iteration=r.iteration + iter_offset,
                     elapsed_s=r.elapsed_s + time_offset) for r in result.trace],
            result.converged, result.mu, result.counters)
    outdir = cfg["run"]["output"]
    os.makedirs(outdir, exist_ok=True)
    chash = _identity_hash(cfg)
    _write_trace(os.path.join(outdir, "trace.csv"), result.trace, cadence,
                 prior_rows)
    save_factors(result.factors, os.path.join(outdir, "factors"),
                 seed=pcfg.seed, config_hash=chash,
                 extra={"converged": result.converged,
                        "outer_iterations": iter_offset + len(result.trace),
                        "counters": {
                            "factorizations": result.counters.factorizations,
                            "inner_iterations": result.counters.inner_iterations,
                            "mttkrp_calls": result.counters.mttkrp_calls}})
    with open(os.path.join(outdir, "config.toml"), "w", encoding="utf-8") as fh:
        fh.write(cfgmod.serialize_config(cfg))
    if cfg["run"]["plots"] and result.trace:
        plots.convergence_figure(result.trace,
                                 os.path.join(outdir, "convergence.png"))
    final = result.trace[-1] if result.trace else None
    status = "converged" if result.converged else "stopped at iteration cap"
    if final is not None:
        print("fit %s after %d outer iterations: objective %.6e, rel_error %.6e"
              % (status, final.iteration, final.objective, final.rel_error))
    else:
        print("fit ran zero outer iterations")
    print("outputs in %s" % outdir)
    return EXIT_OK if result.converged else EXIT_MAX_ITER


def _cmd_eval(args):
    cfg = _load_config(args)
    data = _load_input(cfg)
    factors, manifest = load_factors(args.factors)
    pcfg = cfgmod.problem_from_config(cfg)
    metrics = evaluate(data, factors, pcfg)
    outdir = cfg["run"]["output"]
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "metrics.csv"), "w", encoding="utf-8",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key in ("objective", "rel_error", "violation"):
            writer.writerow([key, repr(float(metrics[key]))])
    print("objective %.6e  rel_error %.6e  violation %.3e"
          % (metrics["objective"], metrics["rel_error"], metrics["violation"]))
    if manifest.get("config_hash"):
        print("factors config hash: %s" % manifest["config_hash"])
    return EXIT_OK


def _cmd_synth(args):
    cfg = _load_config(args)
    s = cfg["synth"]
    spec = SynthSpec(dims=tuple(s["dims"]), k_true=int(s["k_true"]),
                     sparsify=float(s["sparsify"]),
                     noise_var=float(s["noise_var"]), seed=int(s["seed"]),
                     nonneg=bool(s["nonneg"]))
    data, truth = gen_synthetic(spec)
    outdir = cfg["run"]["output"]
    os.makedirs(outdir, exist_ok=True)
    fmt = cfg["run"]["format"] or "dense-binary"
    ext = {"dense-binary": ".npy", "matrix-market": ".mtx", "coo": ".coo"}[fmt]
    path = os.path.join(outdir, "data" + ext)
    save_tensor(data, path, fmt)
    manifest = None
    if s["with_truth"]:
        manifest = save_factors(truth, os.path.join(outdir, "truth"),
                                seed=spec.seed,
                                config_hash=_identity_hash(cfg))
    print("wrote %s (dims %s, k_true %d)" %
          (path, "x".join(str(n) for n in spec.dims), spec.k_true))
    if manifest:
        print("truth factors in %s" % os.path.join(outdir, "truth"))
    return EXIT_OK


_COMPLETION_VARIANTS = {
    "plain": dict(constraint="none", loss="missing"),
    "tikhonov": dict(constraint="tikhonov", loss="missing"),
    "nonneg": dict(constraint="nonneg", loss="missing"),
    "biases": dict(constraint="nonneg-biases", loss="missing"),
    "kl": dict(constraint="nonneg", loss="kl", two_stage=True),
}


def _cmd_complete(args):
    cfg = _load_config(args)
    data = _load_input(cfg)
    c = cfg["completion"]
    variants = []
    for name in c["variants"]:
        if name not in _COMPLETION_VARIANTS:
            raise cfgmod.ConfigError(
                "unknown completion variant %r (known: %s)"
                % (name, ", ".join(sorted(_COMPLETION_VARIANTS))))
        base = _COMPLETION_VARIANTS[name]
        for rank in c["ranks"]:
            variants.append(CompletionVariant(
                name="%s-k%d" % (name, rank), rank=int(rank),
                lam=float(c["lambda"]),
                outer_max_iter=int(c["outer_max_iter"]),
                seed=int(c["seed"]), **base))
    split = SplitSpec(train_fraction=float(c["train_fraction"]),
                      folds=int(c["folds"]), seed=int(c["seed"]))
    clamp = (float(c["clamp_lo"]), float(c["clamp_hi"]))
    progress = None
    if args.verbose:
        progress = lambda row: print(
            "fold %s %s: train MAE %.4f, test MAE %.4f"
            % (row["fold"], row["variant"], row["train_mae"], row["test_mae"]))
    rows = run_completion_cv(data, split, variants, clamp=clamp,
                             progress=progress)
    outdir = cfg["run"]["output"]
    os.makedirs(outdir, exist_ok=True)
    mae_path = os.path.join(outdir, "mae.csv")
    with open(mae_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "variant", "rank", "train_mae", "test_mae",
                         "converged"])
        for row in rows:
            writer.writerow([row["fold"], row["variant"], row["rank"],
                             repr(row["train_mae"]), repr(row["test_mae"]),
                             row["converged"]])
    if cfg["run"]["plots"]:
        plots.mae_figure(rows, os.path.join(outdir, "mae.png"))
    for row in rows:
        if row["fold"] == "mean":
            print("%-18s rank %-3d test MAE %.4f (train %.4f)"
                  % (row["variant"], row["rank"], row["test_mae"],
                     row["train_mae"]))
    print("outputs in %s" % outdir)
    return EXIT_OK


def _cmd_dictlearn(args):
    cfg = _load_config(args)
    data = _load_input(cfg)
    c = cfg["dictlearn"]
    d, s, stats, result = run_dictlearn(
        data, k=int(c["k"]), lam=float(c["lambda"]), nonneg=bool(c["nonneg"]),
        iters=int(c["iters"]), seed=int(cfg["problem"]["seed"]),
        lemma_ratio=float(c["lemma_ratio"]))
    outdir = cfg["run"]["output"]
    os.makedirs(outdir, exist_ok=True)
    save_factors([d, s.T], os.path.join(outdir, "factors"),
                 seed=int(cfg["problem"]["seed"]),
                 config_hash=_identity_hash(cfg))
    with open(os.path.join(outdir, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if cfg["run"]["plots"]:
        shape = tuple(int(x) for x in c["patch_shape"]) or None
        plots.atoms_figure(d, os.path.join(outdir, "atoms.png"),
                           patch_shape=shape)
    print("dictionary: %d atoms, %.2f atoms/sample, %.1f%% energy captured"
          % (d.shape[1], stats["atoms_per_sample"],
             100.0 * stats["energy_fraction"]))
    print("outputs in %s" % outdir)
    return EXIT_OK


_COMMANDS = {
    "fit": _cmd_fit,
    "eval": _cmd_eval,
    "synth": _cmd_synth,
    "complete": _cmd_complete,
    "dictlearn": _cmd_dictlearn,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write("usage error: %s\n" % exc)
        return EXIT_USAGE
    _apply_thread_cap()
    try:
        return _COMMANDS[args.command](args)
    except (cfgmod.ConfigError, UsageError) as exc:
        sys.stderr.write("usage error: %s\n" % exc)
        return EXIT_USAGE
    except (TensorFormatError, InitializationError, FloatingPointError,
            ValueError, TypeError, OSError) as exc:
        sys.stderr.write("error: %s\n" % exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
