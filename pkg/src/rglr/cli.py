"""Command-line front end.

Exit codes: 0 success, 2 bad arguments or unparsable input, 3 I/O failure,
4 automatic gamma requested without a calibrated model.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager, nullcontext
from pathlib import Path

import numpy as np

from rglr import __version__
from rglr.errors import NoFlatPatches, ParseError, RGLRError

log = logging.getLogger("rglr")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NO_MODEL = 0, 2, 3, 4
DEFAULT_GAMMA = 0.1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive(name):
    def check(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"--{name} must be a number, got {text!r}") from None
        if not (np.isfinite(v) and v > 0):
            raise argparse.ArgumentTypeError(f"--{name} must be positive, got {text!r}")
        return v
    return check


def _non_negative(name):
    def check(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"--{name} must be a number, got {text!r}") from None
        if not (np.isfinite(v) and v >= 0):
            raise argparse.ArgumentTypeError(f"--{name} must be non-negative, got {text!r}")
        return v
    return check


def _gamma_arg(text):
    if text == "auto":
        return text
    return _non_negative("gamma")(text)


def _sigma_list(text):
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--sigmas must be comma-separated numbers, got {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("--sigmas must list positive values")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rglr", description="Point cloud denoising with a reweighted graph Laplacian regularizer.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on worker threads (default: $RGLR_THREADS or library default)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--config", default=None,
                   help="JSON file of subcommand options (keys as flag names); flags override it")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("add-noise", help="add Gaussian or Laplacian noise to a cloud")
    a.add_argument("input")
    a.add_argument("output")
    a.add_argument("--kind", choices=("gaussian", "laplacian"), default="gaussian")
    a.add_argument("--sigma", type=_non_negative("sigma"), required=True, help="per-coordinate SD")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--rescale", type=_positive("rescale"), default=None,
                   help="rescale to this bounding-box diagonal before adding noise")

    d = sub.add_parser("denoise", help="denoise a cloud")
    d.add_argument("input")
    d.add_argument("output")
    d.add_argument("--fidelity", choices=("l2", "l1"), default="l2")
    d.add_argument("--backend", choices=("cg", "lanczos"), default="cg", help="l2 inner solver")
    d.add_argument("--lanczos-m", type=int, default=30)
    d.add_argument("--gamma", type=_gamma_arg, default=DEFAULT_GAMMA, help="prior weight, or 'auto'")
    d.add_argument("--gamma-model", default=None, help="calibrated model file, required by --gamma auto")
    d.add_argument("--noise-kind", choices=("gaussian", "laplacian"), default=None,
                   help="estimator used by --gamma auto (default: gaussian for l2, laplacian for l1)")
    d.add_argument("--outer-iters", type=int, default=3)
    d.add_argument("--reweight-iters", type=int, default=5)
    d.add_argument("--apg-iters", type=int, default=200)
    d.add_argument("--k", type=int, default=6)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--report", default=None, help="write a JSON report here")

    e = sub.add_parser("estimate-noise", help="estimate the noise SD from flat patches")
    e.add_argument("input")
    e.add_argument("--kind", choices=("gaussian", "laplacian"), default="gaussian")
    e.add_argument("--sigma-true", type=_positive("sigma-true"), default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", default=None)

    m = sub.add_parser("metrics", help="C2C and C2P between ground truth and a denoised cloud")
    m.add_argument("gt")
    m.add_argument("den")
    m.add_argument("--plane-k", type=int, default=6)
    m.add_argument("--json", action="store_true", help="also print a JSON line")

    f = sub.add_parser("fit-gamma", help="calibrate gamma_opt = slope * sigma^2 on clean surfaces")
    f.add_argument("corpus", help="directory of clean .xyz/.ply clouds")
    f.add_argument("out_model")
    f.add_argument("--kind", choices=("gaussian", "laplacian"), default="gaussian")
    f.add_argument("--sigmas", type=_sigma_list, default=[0.1, 0.2, 0.3, 0.4, 0.5])
    f.add_argument("--gamma-step", type=_positive("gamma-step"), default=0.01)
    f.add_argument("--outer-iters", type=int, default=3)
    f.add_argument("--reweight-iters", type=int, default=5)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--report", default=None)

    g = sub.add_parser("graph-dump", help="write the k-NN graph and bipartite split")
    g.add_argument("input")
    g.add_argument("edges_out")
    g.add_argument("--partition-out", default=None)
    g.add_argument("--k", type=int, default=6)
    g.add_argument("--seed", type=int, default=0)
    return p


@contextmanager
def _thread_cap(n):
    if not n:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=n):
        yield


def _write_report(path, payload):
    text = json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n"
    if path:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        from dataclasses import asdict
        return asdict(obj)
    return str(obj)


def _base_report(args, command):
    echo = {k: v for k, v in vars(args).items() if k not in ("func",)}
    return {"version": __version__, "command": command, "seed": getattr(args, "seed", None),
            "config": echo, "stages": {}}


class _Stage:
    def __init__(self, report, name):
        self.report, self.name = report, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.report["stages"][self.name] = time.perf_counter() - self.t0


def _load(path):
    from rglr.pointcloud import load
    return load(path)


# ----------------------------------------------------------------- commands


def cmd_add_noise(args):
    from rglr.pointcloud import NoiseSpec, add_noise, rescale_to_diagonal, save

    cloud = _load(args.input)
    if args.rescale:
        cloud, _ = rescale_to_diagonal(cloud, args.rescale)
    noisy = add_noise(cloud, NoiseSpec(args.kind, args.sigma, args.seed))
    save(noisy, args.output)
    return EXIT_OK


def _auto_gamma(args, cloud, report):
    from rglr.noise_est import GammaModel, estimate_noise, gamma_opt

    if not args.gamma_model:
        print("error: --gamma auto requires --gamma-model (run fit-gamma first)", file=sys.stderr)
        return None, EXIT_NO_MODEL
    try:
        model = GammaModel.load(args.gamma_model)
    except FileNotFoundError:
        print(f"error: gamma model {args.gamma_model} not found", file=sys.stderr)
        return None, EXIT_NO_MODEL
    except (ValueError, KeyError) as exc:
        print(f"error: bad gamma model: {exc}", file=sys.stderr)
        return None, EXIT_CONFIG
    kind = args.noise_kind or ("gaussian" if args.fidelity == "l2" else "laplacian")
    try:
        with _Stage(report, "estimate_noise"):
            est = estimate_noise(_canonical(cloud), kind)
    except NoFlatPatches as exc:
        log.warning("no flat patches (%s); using default gamma %g", exc, DEFAULT_GAMMA)
        report["noise"] = {"kind": kind, "warning": "NoFlatPatches"}
        return DEFAULT_GAMMA, EXIT_OK
    gamma = gamma_opt(est.sigma2, model)
    report["noise"] = {"kind": kind, "sigma_hat": est.sigma, "sigma2_hat": est.sigma2,
                       "patches_used": est.patches_used, "gamma": gamma, "slope": model.slope}
    return gamma, EXIT_OK


def _canonical(cloud):
    from rglr.pointcloud import rescale_to_diagonal
    return rescale_to_diagonal(cloud)[0]


def cmd_denoise(args):
    from rglr.bipartite import GmrfConfig
    from rglr.pointcloud import save
    from rglr.solver_l1 import ApgConfig, denoise_l1
    from rglr.solver_l2 import L2Config, denoise_l2

    report = _base_report(args, "denoise")
    cloud = _load(args.input)
    gamma = args.gamma
    if gamma == "auto":
        gamma, code = _auto_gamma(args, cloud, report)
        if code != EXIT_OK:
            return code
    gmrf = GmrfConfig(seed=args.seed)
    try:
        if args.fidelity == "l2":
            cfg = L2Config(gamma=gamma, outer_iters=args.outer_iters, reweight_iters=args.reweight_iters,
                           backend=args.backend, lanczos_m=args.lanczos_m, k=args.k, seed=args.seed, gmrf=gmrf)
        else:
            cfg = ApgConfig(gamma=gamma, outer_iters=args.outer_iters, reweight_iters=args.reweight_iters,
                            apg_iters=args.apg_iters, k=args.k, seed=args.seed, gmrf=gmrf)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    with _Stage(report, "denoise"):
        out, rep = (denoise_l2 if args.fidelity == "l2" else denoise_l1)(cloud, cfg)
    save(out, args.output)
    report["gamma"] = gamma
    report["solver"] = json.loads(rep.to_json())
    report["cond_bound"] = max(rep.cond_bounds) if rep.cond_bounds else None
    _write_report(args.report, report)
    print(f"denoised {len(out)} points with {args.fidelity}, gamma={gamma:.6g}")
    return EXIT_OK


def cmd_estimate_noise(args):
    from rglr.metrics import rel_error
    from rglr.noise_est import estimate_noise

    report = _base_report(args, "estimate-noise")
    cloud = _load(args.input)
    try:
        with _Stage(report, "estimate_noise"):
            est = estimate_noise(cloud, args.kind)
    except NoFlatPatches as exc:
        log.warning("no flat patches: %s", exc)
        print(f"warning: NoFlatPatches: {exc}", file=sys.stderr)
        report["warning"] = "NoFlatPatches"
        _write_report(args.report, report)
        return EXIT_OK
    line = f"kind={args.kind} sigma={est.sigma:.6g} patches={est.patches_used}"
    report.update({"kind": args.kind, "sigma_hat": est.sigma, "sigma2_hat": est.sigma2,
                   "patches_used": est.patches_used})
    if args.sigma_true:
        eps = rel_error(args.sigma_true, est.sigma)
        line += f" eps={eps:.2f}%"
        report["eps_percent"] = eps
    print(line)
    _write_report(args.report, report)
    return EXIT_OK


def cmd_metrics(args):
    from rglr.metrics import evaluate

    r = evaluate(_load(args.gt), _load(args.den), args.plane_k)
    print(r.line())
    if args.json:
        print(json.dumps({"c2c": r.c2c, "c2p": r.c2p, "direction_used": r.direction_used}, sort_keys=True))
    return EXIT_OK


def cmd_fit_gamma(args):
    from rglr.calibrate import calibrate, default_gammas
    from rglr.solver_l1 import ApgConfig
    from rglr.solver_l2 import L2Config

    corpus = Path(args.corpus)
    if not corpus.is_dir():
        print(f"error: corpus {corpus} is not a directory", file=sys.stderr)
        return EXIT_CONFIG
    files = sorted(f for f in corpus.iterdir() if f.suffix.lower() in (".xyz", ".ply"))
    if not files:
        print(f"error: corpus {corpus} holds no .xyz/.ply files", file=sys.stderr)
        return EXIT_CONFIG
    surfaces = {f.name: _load(f).points for f in files}
    report = _base_report(args, "fit-gamma")
    fidelity = "l2" if args.kind == "gaussian" else "l1"
    cfg = (L2Config if fidelity == "l2" else ApgConfig)(
        outer_iters=args.outer_iters, reweight_iters=args.reweight_iters, seed=args.seed)
    with _Stage(report, "calibrate"):
        cal = calibrate(surfaces, args.kind, args.sigmas, default_gammas(args.gamma_step),
                        fidelity, cfg, args.seed)
    cal.model.save(args.out_model)
    report.update({"slope": cal.model.slope, "r2_sqrt_gamma_vs_sigma": cal.r2,
                   "points": [{"surface": p.surface, "sigma": p.sigma, "gamma_opt": p.gamma_opt,
                               "c2p": p.c2p_opt} for p in cal.points]})
    _write_report(args.report, report)
    print(f"slope={cal.model.slope:.6g} R2={cal.r2:.4f} surfaces={len(surfaces)}")
    return EXIT_OK


def cmd_graph_dump(args):
    from rglr.bipartite import GmrfConfig, approximate
    from rglr.graph import knn_graph

    cloud = _load(args.input)
    graph = knn_graph(cloud.points, args.k)
    graph.dump(args.edges_out)
    if args.partition_out:
        approximate(graph, GmrfConfig(seed=args.seed)).dump(args.partition_out)
    return EXIT_OK


COMMANDS = {
    "add-noise": cmd_add_noise,
    "denoise": cmd_denoise,
    "estimate-noise": cmd_estimate_noise,
    "metrics": cmd_metrics,
    "fit-gamma": cmd_fit_gamma,
    "graph-dump": cmd_graph_dump,
}


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise UsageError(f"unknown command {command!r}")


def _config_argv(path, command, parser):
    """Turn a JSON option file into flag tokens for ``command``."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    if isinstance(data.get(command), dict):
        data = data[command]
    known = _subparser(parser, command)._option_string_actions
    tokens = []
    for key, value in data.items():
        flag = "--" + str(key).replace("_", "-")
        if flag not in known:
            raise UsageError(f"config {path}: unknown option {key!r} for {command}")
        if isinstance(value, bool):
            tokens += [flag] if value else []
        elif isinstance(value, list):
            tokens += [flag, ",".join(str(v) for v in value)]
        else:
            tokens += [flag, str(value)]
    return tokens


def _parse(parser, argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    config, at = None, None
    i = 0
    while i < len(argv):  # global options precede the subcommand
        tok = argv[i]
        if tok in COMMANDS:
            at = i + 1
            break
        if tok == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
            i += 1
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
        i += 1
    if config is None or at is None:
        return parser.parse_args(argv)
    # file options go right after the subcommand so later flags win
    return parser.parse_args(argv[:at] + _config_argv(config, argv[at - 1], parser) + argv[at:])


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads
    if threads is None and os.environ.get("RGLR_THREADS"):
        try:
            threads = int(os.environ["RGLR_THREADS"])
        except ValueError:
            print("error: RGLR_THREADS must be an integer", file=sys.stderr)
            return EXIT_CONFIG
    if threads is not None and threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with _thread_cap(threads) if threads else nullcontext():
            return COMMANDS[args.command](args)
    except ParseError as exc:
        print(f"error: cannot parse input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RGLRError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
