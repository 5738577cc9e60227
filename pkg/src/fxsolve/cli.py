"""Command-line experiment runner.

Subcommands ``invert``, ``deconvolve``, ``tomo`` and ``emulate`` rebuild the
test problems, run the fixed-point solvers and write one trace CSV per solve,
a summary CSV per command and a metadata record of the resolved config.
Settings come from per-command defaults, then an optional INI file
(``--config``), then flags.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import math
import os
import sys
import tempfile
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigInvalid, FxError, InsufficientData
from .fxlinalg import eta_empirical
from .fxnum import parse_policy
from .imageio import BUNDLED, bundled_image, load_image
from .problems import (convolution_spectrum, dct_inversion_problem, deconvolution_problem,
                       gaussian_kernel, tomography_problem)
from .residual import ResidualConfig, concat_traces, residual_solve
from .richardson import (SolverConfig, build_iteration, convergence_criteria,
                         fit_convergence_rate, float_richardson, invert_matrix,
                         richardson_solve, theta_bound)

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("", "default", "none"):
        return None
    return float(text)


def _policy(text):
    parse_policy(text)  # validate early
    return str(text)


# key -> (parser, help)
PARAMS = {
    "problem": (str, "input: 'dct', a bundled image name or an image path; for emulate "
                     "the experiment to replay (invert, deconvolve, tomo)"),
    "bits": (_ints, "comma-separated bit widths"),
    "chi": (float, "step-size safety margin"),
    "epsilon": (_opt_float, "stop threshold on ||x_k - x_{k-1}||; 'default' = 2^(2-L) sqrt(N)"),
    "max_iters": (int, "iteration cap for plain solves"),
    "outer_loops": (int, "residue updates M"),
    "inner_iters": (int, "iteration cap per inner loop of the residual solver"),
    "exponent_policy": (_policy, "plain-solve exponent policy (maxabs, fixed:V, dist:P, "
                                 "decrement:S,I,F, schedule:K=V,...)"),
    "b_policy": (_policy, "exponent policy of the right-hand side b"),
    "schedule": (_policy, "exponent schedule of the residual solver"),
    "period": (int, "refresh period of the adaptive (distribution) schedule"),
    "backend": (str, "direct or systolic"),
    "rounding": (str, "requantization rounding: trunc, floor or auto"),
    "seed": (int, "random seed"),
    "eta_samples": (int, "samples for the empirical eta estimate"),
    "kappas": (_floats, "target condition numbers (invert)"),
    "sigmas": (_floats, "Gaussian kernel widths (deconvolve)"),
    "support": (_ints, "kernel support rows,cols (deconvolve)"),
    "measurement_bits": (int, "measurement quantization bits (deconvolve)"),
    "image_bits": (int, "ground-truth quantization bits"),
    "projections": (int, "number of projection angles (tomo)"),
    "beams": (int, "beams per projection (tomo)"),
    "angle_span": (float, "angular range in degrees (tomo)"),
    "threshold": (float, "theta level for the iteration-count comparison (tomo)"),
    "out_dir": (str, "output directory"),
}

COMMON = {"chi": "0.2", "epsilon": "default", "max_iters": "200", "outer_loops": "5",
          "inner_iters": "200", "exponent_policy": "maxabs", "b_policy": "maxabs",
          "schedule": "maxabs", "period": "5", "backend": "direct", "rounding": "auto",
          "seed": "0", "eta_samples": "200", "out_dir": "out"}

DEFAULTS = {
    "invert": dict(COMMON, problem="dct", bits="6,7,8,52", kappas="25.0,11.1"),
    "deconvolve": dict(COMMON, problem="planet", bits="8", sigmas="0.70,0.75,0.80,0.85",
                       support="5,5", measurement_bits="8", image_bits="8", epsilon="0"),
    "tomo": dict(COMMON, problem="sprite", bits="8,9,10", chi="0.3", epsilon="0",
                 max_iters="400", inner_iters="80", exponent_policy="fixed:2",
                 b_policy="fixed:0", schedule="decrement:2,80,-2", image_bits="3",
                 projections="60", beams="31", angle_span="180", threshold="0.25"),
}
DEFAULTS["emulate"] = dict(DEFAULTS["tomo"], problem="tomo", rounding="floor",
                           kappas="25.0,11.1", sigmas="0.70", support="5,5",
                           measurement_bits="8")

# keys each command reads (anything else in a config file is rejected)
USED = {
    "invert": {"problem", "bits", "chi", "epsilon", "max_iters", "exponent_policy", "b_policy",
               "backend", "rounding", "seed", "eta_samples", "kappas", "out_dir"},
    "deconvolve": {"problem", "bits", "chi", "epsilon", "max_iters", "exponent_policy",
                   "b_policy", "backend", "rounding", "seed", "eta_samples", "sigmas",
                   "support", "measurement_bits", "image_bits", "out_dir"},
    "tomo": {"problem", "bits", "chi", "epsilon", "max_iters", "outer_loops", "inner_iters",
             "exponent_policy", "b_policy", "schedule", "period", "backend", "rounding", "seed",
             "eta_samples", "image_bits", "projections", "beams", "angle_span", "threshold",
             "out_dir"},
}
USED["emulate"] = set(PARAMS)


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def read_config_file(path) -> dict:
    """Flatten an INI file into ``{key: text}``; section names are ignored."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[key.replace("-", "_")] = value
    return flat


def resolve_config(command: str, file_values: dict, flag_values: dict) -> dict:
    """Merge defaults, file and flags, then parse and validate every value."""
    unknown = set(file_values) - set(PARAMS)
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {', '.join(sorted(unknown))}")
    unused = set(file_values) - USED[command]
    if unused:
        raise ConfigInvalid(f"keys not used by '{command}': {', '.join(sorted(unused))}")
    raw = dict(DEFAULTS[command])
    raw.update(file_values)
    raw.update({k: v for k, v in flag_values.items() if v is not None})
    cfg = {}
    for key in sorted(USED[command]):
        if key not in raw:
            continue
        try:
            cfg[key] = PARAMS[key][0](raw[key])
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"bad value for {key}: {raw[key]!r} ({exc})") from exc
    _validate(command, cfg)
    cfg["_raw"] = {k: str(raw[k]) for k in sorted(USED[command]) if k in raw}
    return cfg


def _validate(command, cfg):
    if not cfg.get("bits"):
        raise ConfigInvalid("bits must list at least one width")
    if cfg.get("backend") not in ("direct", "systolic"):
        raise ConfigInvalid("backend must be direct or systolic")
    if cfg.get("rounding") not in ("auto", "trunc", "floor"):
        raise ConfigInvalid("rounding must be auto, trunc or floor")
    for bits in cfg["bits"]:
        _solver(cfg, bits)  # raises ConfigInvalid on bad knobs
    if command == "emulate" and cfg["problem"] not in ("invert", "deconvolve", "tomo"):
        raise ConfigInvalid("emulate --problem must be invert, deconvolve or tomo")
    if command == "invert" and cfg["problem"] != "dct":
        raise ConfigInvalid("invert supports --problem dct only")
    for key in ("outer_loops", "inner_iters", "period", "eta_samples", "projections", "beams"):
        if key in cfg and cfg[key] < 1:
            raise ConfigInvalid(f"{key} must be >= 1")


def _solver(cfg, bits, **overrides) -> SolverConfig:
    rounding = None if cfg.get("rounding", "auto") == "auto" else cfg["rounding"]
    kwargs = dict(bits=bits, chi=cfg["chi"], epsilon=cfg["epsilon"],
                  max_iters=cfg["max_iters"],
                  exponent_policy=parse_policy(cfg["exponent_policy"]),
                  b_policy=parse_policy(cfg["b_policy"]), backend=cfg["backend"],
                  rounding=rounding)
    kwargs.update(overrides)
    return SolverConfig(**kwargs)


def _image(cfg):
    name = cfg["problem"]
    bits = cfg.get("image_bits")
    if name in BUNDLED:
        return bundled_image(name, bits)
    return load_image(name, bits)


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(float(v))
    return v


def table_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_meta(out: Path, command: str, cfg: dict, extra: dict | None = None):
    lines = [f"command = {command}", f"version = {__version__}"]
    lines += [f"{k} = {v}" for k, v in cfg["_raw"].items()]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k} = {v}")
    write_atomic(out / f"{command}_meta.txt", "\n".join(lines) + "\n")


def _gamma(trace):
    try:
        return fit_convergence_rate(trace)
    except InsufficientData:
        return math.nan, math.nan


def _bits_label(bits):
    return f"{bits}-bit"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_invert(cfg, out: Path, dry_run: bool = False, log=print):
    """Column-by-column inversion of the DCT test matrices."""
    rows, traces = [], {}
    for kappa in cfg["kappas"]:
        p = dct_inversion_problem(kappa, seed=cfg["seed"])
        for bits in cfg["bits"]:
            sc = _solver(cfg, bits)
            tau = sc.resolved_tau(p.op_norm)
            tag = f"kappa{kappa:g}_L{bits}"
            if dry_run:
                it = build_iteration(p.a, p.y, sc, gram=p.gram, op_norm=p.op_norm, kappa=p.kappa)
                eta = eta_empirical(p.a, it.b, p.x_star, bits, cfg["eta_samples"], cfg["seed"],
                                    gram=it.gram)
                _, eta_max = convergence_criteria(tau, p.op_norm, p.kappa, eta)
                log(f"{tag}: tau={tau:.6g} eta={eta:.4g} eta_max={eta_max:.4g}")
                continue
            inv, trace, eta = invert_matrix(p.a, sc, n_samples=cfg["eta_samples"],
                                            seed=cfg["seed"])
            # the rate is fitted on a run without the step-change stop
            _, long_trace, _ = invert_matrix(p.a, replace(sc, epsilon=0.0), n_samples=1,
                                             seed=cfg["seed"])
            gamma, ci = _gamma(long_trace)
            bound = theta_bound(eta, tau, p.op_norm, p.kappa)
            traces[f"invert_{tag}.csv"] = trace.to_csv()
            traces[f"invert_{tag}_long.csv"] = long_trace.to_csv()
            rows.append([kappa, _bits_label(bits), eta, trace.terminal_theta, bound, gamma, ci,
                         trace.status, " ".join(trace.flags)])
            log(f"{tag}: theta={trace.terminal_theta:.4f} bound={bound:.4f} "
                f"gamma={gamma:.4f}±{ci:.4f} [{trace.status}]")
    if dry_run:
        return EXIT_OK
    for name, text in traces.items():
        write_atomic(out / "invert" / name, text)
    write_atomic(out / "invert_summary.csv", table_csv(
        ["kappa", "precision", "eta", "theta", "theta_bound", "gamma", "gamma_ci95", "status",
         "flags"], rows))
    write_meta(out, "invert", cfg)
    return EXIT_OK


def cmd_deconvolve(cfg, out: Path, dry_run: bool = False, log=print):
    """Gaussian deconvolution sweep over sigma."""
    image = _image(cfg)
    support = tuple(cfg["support"])
    if len(support) != 2:
        raise ConfigInvalid("support needs two values: rows,cols")
    rows, files = [], {}
    for sigma in cfg["sigmas"]:
        p = deconvolution_problem(image, sigma, cfg["measurement_bits"], support)
        ev, _, _ = convolution_spectrum(gaussian_kernel(sigma, support), image.shape)
        for bits in cfg["bits"]:
            sc = _solver(cfg, bits)
            it = build_iteration(p.a, p.y, sc, gram=p.gram, op_norm=p.op_norm, kappa=p.kappa)
            eta = eta_empirical(p.a, it.b, p.x_star, bits, cfg["eta_samples"], cfg["seed"],
                                gram=it.gram)
            ok, eta_max = convergence_criteria(it.tau, p.op_norm, p.kappa, eta)
            tag = f"sigma{sigma:g}_L{bits}"
            if dry_run:
                log(f"{tag}: kappa={p.kappa:.4g} tau={it.tau:.6g} eta={eta:.4g} "
                    f"eta_max={eta_max:.4g}")
                continue
            x, trace = richardson_solve(replace(it, eta=eta), sc, p.x_star)
            bound = theta_bound(eta, it.tau, p.op_norm, p.kappa)
            files[f"deconvolve/deconvolve_{tag}.csv"] = trace.to_csv()
            files[f"deconvolve/image_{tag}.csv"] = table_csv(
                [f"c{j}" for j in range(image.shape[1])], x.dequantize().reshape(image.shape))
            rows.append([sigma, p.kappa, _bits_label(bits), eta, eta_max,
                         trace.terminal_theta, bound, trace.status, " ".join(trace.flags)])
            log(f"{tag}: kappa={p.kappa:.2f} theta={trace.terminal_theta:.4f} "
                f"bound={bound:.4f} [{trace.status}]")
        norm = ev / ev.max()
        files[f"deconvolve/spectrum_sigma{sigma:g}.csv"] = table_csv(
            ["p", "q", "eigenvalue", "normalized"],
            [[i, j, float(ev[i, j]), float(norm[i, j])]
             for i in range(ev.shape[0]) for j in range(ev.shape[1])])
    if dry_run:
        return EXIT_OK
    for name, text in files.items():
        write_atomic(out / name, text)
    write_atomic(out / "deconvolve_summary.csv", table_csv(
        ["sigma", "kappa", "precision", "eta", "eta_max", "theta", "theta_bound", "status",
         "flags"], rows))
    write_meta(out, "deconvolve", cfg)
    return EXIT_OK


def _first_below(thetas, ks, level):
    idx = np.flatnonzero(np.asarray(thetas) < level)
    return int(np.asarray(ks)[idx[0]]) if idx.size else -1


def tomo_runs(cfg, p, bits):
    """Plain, scheduled-residual and adaptive-residual solves at one precision."""
    sc = _solver(cfg, bits)
    it = build_iteration(p.a, p.y, sc, gram=p.gram, op_norm=p.op_norm, kappa=p.kappa)
    eta = eta_empirical(p.a, it.b, p.x_star, bits, cfg["eta_samples"], cfg["seed"],
                        gram=it.gram)
    _, plain = richardson_solve(replace(it, eta=eta), sc, p.x_star)
    inner = replace(sc, max_iters=cfg["inner_iters"])
    runs = {"richardson": [plain]}
    for name, schedule in (("residual", cfg["schedule"]), ("adaptive", f"dist:{cfg['period']}")):
        rc = ResidualConfig(inner=inner, outer_loops=cfg["outer_loops"],
                            exponent_schedule=parse_policy(schedule))
        _, runs[name] = residual_solve(p.a, p.y, rc, p.x_star, gram=p.gram, op_norm=p.op_norm,
                                       kappa=p.kappa)
    return it, eta, runs


def cmd_tomo(cfg, out: Path, dry_run: bool = False, log=print):
    """Plain and residual tomographic reconstructions."""
    image = _image(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p = tomography_problem(image, cfg["projections"], cfg["beams"], cfg["angle_span"])
    log(f"tomography: {p.a.shape[0]} rays, kappa={p.kappa:.2f}")
    rows, files = [], {}
    steps = cfg["outer_loops"] * cfg["inner_iters"]
    for bits in cfg["bits"]:
        sc = _solver(cfg, bits)
        if dry_run:
            it = build_iteration(p.a, p.y, sc, gram=p.gram, op_norm=p.op_norm, kappa=p.kappa)
            eta = eta_empirical(p.a, it.b, p.x_star, bits, cfg["eta_samples"], cfg["seed"],
                                gram=it.gram)
            _, eta_max = convergence_criteria(it.tau, p.op_norm, p.kappa, eta)
            log(f"L{bits}: tau={it.tau:.6g} eta={eta:.4g} eta_max={eta_max:.4g}")
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            it, eta, runs = tomo_runs(cfg, p, bits)
        _, eta_max = convergence_criteria(it.tau, p.op_norm, p.kappa, eta)
        bound = theta_bound(eta, it.tau, p.op_norm, p.kappa)
        plain = runs["richardson"][0]
        res = concat_traces(runs["residual"])
        ada = concat_traces(runs["adaptive"])
        for name in runs:
            files[f"tomo/tomo_{name}_L{bits}.csv"] = concat_traces(runs[name]).to_csv()
        rows.append([_bits_label(bits), eta, eta_max, plain.terminal_theta, bound,
                     res.terminal_theta, ada.terminal_theta,
                     _first_below(ada.theta, ada.k, cfg["threshold"]),
                     plain.status, " ".join(plain.flags)])
        log(f"L{bits}: theta={plain.terminal_theta:.4f} bound={bound:.4f} "
            f"residual={res.terminal_theta:.4f} adaptive={ada.terminal_theta:.4f}")
    if dry_run:
        return EXIT_OK
    sc = _solver(cfg, cfg["bits"][0])
    it = build_iteration(p.a, p.y, sc, gram=p.gram, op_norm=p.op_norm, kappa=p.kappa)
    _, ref = float_richardson(it.gram, it.b, steps, p.x_star)
    files["tomo/tomo_reference.csv"] = table_csv(["k", "theta"], enumerate(ref.tolist()))
    ref_steps = _first_below(ref, np.arange(ref.size), cfg["threshold"])
    write_atomic_all(out, files)
    write_atomic(out / "tomo_summary.csv", table_csv(
        ["precision", "eta", "eta_max", "theta", "theta_bound", "theta_residual",
         "theta_adaptive", "adaptive_steps_below_threshold", "status", "flags"], rows))
    write_meta(out, "tomo", cfg, {"kappa": repr(float(p.kappa)), "rays": p.a.shape[0],
                                  "reference_steps_below_threshold": ref_steps})
    return EXIT_OK


def write_atomic_all(out: Path, files: dict):
    for name, text in files.items():
        write_atomic(out / name, text)


def trace_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def emulate_traces(cfg, backend: str) -> dict:
    """Re-run an experiment on one backend and return ``{run: trace CSV}``."""
    local = dict(cfg, backend=backend)
    which = cfg["problem"]
    traces = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if which == "invert":
            for kappa in cfg["kappas"]:
                p = dct_inversion_problem(kappa, seed=cfg["seed"])
                for bits in cfg["bits"]:
                    _, tr, _ = invert_matrix(p.a, _solver(local, bits), n_samples=1)
                    traces[f"kappa{kappa:g}_L{bits}"] = (tr.to_csv(), tr.stats)
        elif which == "tomo":
            p = tomography_problem(_image(dict(cfg, problem="sprite")),
                                   cfg["projections"], cfg["beams"], cfg["angle_span"])
            local["eta_samples"] = 1
            for bits in cfg["bits"]:
                _, _, runs = tomo_runs(local, p, bits)
                for name, trs in runs.items():
                    tr = concat_traces(trs)
                    traces[f"{name}_L{bits}"] = (tr.to_csv(), tr.stats)
        else:
            raise ConfigInvalid("the systolic backend multiplies dense matrices; "
                                "deconvolution uses a stencil operator")
    return traces


def cmd_emulate(cfg, out: Path, dry_run: bool = False, log=print):
    """Replay an experiment on the systolic model and compare traces with the direct path."""
    if dry_run:
        log(f"would replay '{cfg['problem']}' at bits {cfg['bits']} with rounding "
            f"{cfg['rounding']}")
        return EXIT_OK
    direct = emulate_traces(cfg, "direct")
    systolic = emulate_traces(cfg, "systolic")
    rows, status = [], EXIT_OK
    for run in direct:
        hd, hs = trace_hash(direct[run][0]), trace_hash(systolic[run][0])
        stats = systolic[run][1]
        same = hd == hs
        rows.append([run, hd, hs, same, stats.get("block_issues", 0), stats.get("saturated", 0)])
        log(f"{run}: {'identical' if same else 'MISMATCH'} block_issues="
            f"{stats.get('block_issues', 0)} saturated={stats.get('saturated', 0)}")
        if not same:
            status = EXIT_SOLVER
    write_atomic(out / "emulate_summary.csv", table_csv(
        ["run", "direct_sha256", "systolic_sha256", "identical", "block_issues", "saturated"],
        rows))
    write_meta(out, "emulate", cfg)
    if status != EXIT_OK:
        print("systolic trace differs from direct trace", file=sys.stderr)
    return status


COMMANDS = {"invert": cmd_invert, "deconvolve": cmd_deconvolve, "tomo": cmd_tomo,
            "emulate": cmd_emulate}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fxsolve", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        sp = sub.add_parser(name, help=func.__doc__.splitlines()[0])
        sp.add_argument("--config", help="INI file with settings (flags override it)")
        sp.add_argument("--dry-run", action="store_true",
                        help="validate the config and print derived tau and eta_max")
        for key in sorted(USED[name]):
            sp.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                            help=f"{PARAMS[key][1]} (default: {DEFAULTS[name].get(key, '-')})")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k in PARAMS}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_values, flags)
    except (ConfigInvalid, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, Path(cfg["out_dir"]), args.dry_run)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FxError, OSError) as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
