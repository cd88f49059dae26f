"""Command-line entry point: ``ikfcg <subcommand> ...``.

Exit codes: 0 success, 1 usage or input error, 2 verification failure,
3 convergence failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_CONVERGENCE = 0, 1, 2, 3

log = logging.getLogger("ikfcg")

MODEL_NAMES = {
    "unnormalized-vicsek": "unnormalized_vicsek",
    "modified-vicsek": "modified_vicsek",
    "cell": "cell",
}


class UsageError(Exception):
    pass


class ConvergenceFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _interval(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}")
    if not lo < hi:
        raise argparse.ArgumentTypeError("interval needs LO < HI")
    return lo, hi


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"missing input file: {p}")
    return p


def _set_threads(n: int | None) -> None:
    import numba

    if n is None:
        return
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


# --------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    from .particles import SimConfig, simulate, write_trajectory_csv

    cfg = SimConfig(model=MODEL_NAMES[args.model], n_p=args.np, n_tau=args.ntau, h=args.h,
                    sigma0=args.sigma0, radius=args.radius, radius2=args.radius2, seed=args.seed)
    traj = simulate(cfg)
    write_trajectory_csv(traj, args.out)
    print(f"simulated {args.model}: n_p={cfg.n_p} n_tau={cfg.n_tau} seed={cfg.seed} "
          f"rows={traj.frame.size} -> {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# estimate


def _radius_candidates(kind: str, radii, radii2):
    if kind == "modified_vicsek":
        return [(r, r2) for r in radii for r2 in radii2]
    return [(r,) for r in radii]


def cmd_estimate(args) -> int:
    from .estimation import SearchSpace, cv_search, fit, schema_builder
    from .particles import build_design, read_trajectory_csv
    from .structured import CgConfig

    kind = MODEL_NAMES[args.model]
    if kind == "cell" and args.direction is None:
        raise UsageError("--model cell needs --direction 0 or 1")
    traj = read_trajectory_csv(_existing(args.trajectory), h=args.h)
    search = SearchSpace.default(_radius_candidates(kind, args.radii, args.radius2),
                                 roughness=args.roughness, gammas=args.gammas, ratios=args.ratios)
    cfg = CgConfig(rel_tol=args.cg_tol, max_iter=args.cg_max_iter)
    res = cv_search(schema_builder(kind, args.direction), traj, search,
                    train_fraction=args.train_fraction, cfg=cfg, seed=args.seed)
    fitted = fit(build_design(traj, res.params.schema()), res.params, cfg)
    res.params.save(args.out)
    print(f"estimated {len(res.params.kernels)} interaction(s) with {res.n_evals} CV evaluations; "
          f"cv_loss={res.loss:.6g} nugget={res.params.nugget:.6g} -> {args.out}")
    if not fitted.converged:
        raise ConvergenceFailure("CG did not converge on the full data")
    return EXIT_OK


# --------------------------------------------------------------------------
# predict


PRED_HEADER = ["interaction", "d_star", "mean", "var", "ci_lo", "ci_hi"]
METRICS_HEADER = ["interaction", "nrmse", "len95", "cov95", "n_test"]


def write_predictions(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        for j, pred in rows:
            for d, m, v, lo, hi in zip(pred.d_star, pred.mean, pred.variance, pred.ci_lower, pred.ci_upper):
                w.writerow([j, repr(float(d)), repr(float(m)), repr(float(v)), repr(float(lo)), repr(float(hi))])


def read_predictions(path) -> dict:
    """``{interaction: dict(column -> array)}`` from a predictions CSV."""
    out: dict = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"interaction", "d_star"} <= set(reader.fieldnames):
            raise UsageError(f"{path}: not a predictions file")
        for row in reader:
            j = int(row["interaction"])
            cols = out.setdefault(j, {})
            for k, v in row.items():
                if k != "interaction" and k is not None and v not in (None, ""):
                    cols.setdefault(k, []).append(float(v))
    return {j: {k: np.array(v) for k, v in cols.items()} for j, cols in out.items()}


def _truth_functions(hyper):
    from .particles import true_functions

    if hyper.kind == "cell":
        return None
    return true_functions(hyper.schema())


def _plot_predictions(path, rows, hyper) -> None:
    from .svgplot import Figure

    truth = _truth_functions(hyper)
    path = Path(path)
    for j, pred in rows:
        fig = Figure(title=f"interaction {j}", xlabel="d", ylabel="z(d)")
        fig.band(pred.d_star, pred.ci_lower, pred.ci_upper, color="#1f77b4", label="95% interval")
        fig.line(pred.d_star, pred.mean, label="predictive mean", color="#1f77b4")
        if truth is not None:
            fig.line(pred.d_star, truth[j - 1](pred.d_star), label="truth", color="#d62728", dashed=True)
        target = path if len(rows) == 1 else path.with_name(f"{path.stem}_{j}{path.suffix or '.svg'}")
        fig.save(target)


def cmd_predict(args) -> int:
    from .estimation import HyperParams, fit, representative_grid
    from .particles import build_design, read_trajectory_csv
    from .structured import CgConfig

    traj = read_trajectory_csv(_existing(args.trajectory), h=args.h)
    hyper = HyperParams.load(_existing(args.params))
    design = build_design(traj, hyper.schema())
    cfg = CgConfig(rel_tol=args.cg_tol, max_iter=args.cg_max_iter)
    fitted = fit(design, hyper, cfg)
    n_int = len(hyper.kernels)
    grids = args.grid or []
    if len(grids) not in (0, 1, n_int):
        raise UsageError(f"give --grid once or once per interaction ({n_int})")
    rows = []
    for j in range(n_int):
        if grids:
            lo, hi = grids[j if len(grids) > 1 else 0]
            d_star = np.linspace(lo, hi, args.n_star)
        else:
            d_star = representative_grid(design.factors[j].inputs, args.n_star)
        rows.append((j + 1, fitted.predict(j, d_star)))
    write_predictions(args.out, rows)
    if args.plot:
        _plot_predictions(args.plot, rows, hyper)
    print(f"predicted {n_int} interaction(s) x {args.n_star} inputs -> {args.out}")
    if not fitted.converged or not all(p.converged.all() for _, p in rows):
        raise ConvergenceFailure("CG did not converge")
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate


def write_metrics(path, reports) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for j, r in reports:
            w.writerow([j, repr(r.nrmse), repr(r.interval_length_95), repr(r.coverage_95), r.n_test])


def cmd_evaluate(args) -> int:
    from .estimation import HyperParams, metrics
    from .structured import PredictiveResult

    preds = read_predictions(_existing(args.predictions))
    if args.truth:
        truth_tab = read_predictions(_existing(args.truth))
        truth_fns = None
    else:
        if not args.params:
            raise UsageError("evaluate needs --truth FILE or --params of a simulated model")
        truth_fns = _truth_functions(HyperParams.load(_existing(args.params)))
        if truth_fns is None:
            raise UsageError("no known truth for this model; pass --truth FILE")
    reports = []
    for j in sorted(preds):
        cols = preds[j]
        if not {"mean", "var"} <= set(cols):
            raise UsageError(f"{args.predictions}: needs mean and var columns")
        d = cols["d_star"]
        if truth_fns is not None:
            truth = truth_fns[j - 1](d)
        else:
            if j not in truth_tab:
                raise UsageError(f"truth file has no interaction {j}")
            t = truth_tab[j]
            truth = t["truth"] if "truth" in t else t["mean"]
            if t["d_star"].shape != d.shape or not np.allclose(t["d_star"], d):
                raise UsageError(f"truth inputs of interaction {j} differ from the predictions")
        pred = PredictiveResult(d, cols["mean"], cols["var"], np.ones(d.size, dtype=bool))
        reports.append((j, metrics(pred, truth)))
    write_metrics(args.out, reports)
    for j, r in reports:
        print(f"interaction {j}: nrmse={r.nrmse:.4g} len95={r.interval_length_95:.4g} "
              f"cov95={r.coverage_95:.3f} n_test={r.n_test}")
    return EXIT_OK


# --------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    from .verify import run_all

    checks = run_all(seed=args.seed, perturb=args.perturb)
    width = max(len(c.name) for c in checks)
    print(f"{'check':<{width}}  {'max_error':>10}  {'tol':>8}  status")
    for c in checks:
        print(f"{c.name:<{width}}  {c.max_error:10.3e}  {c.tol:8.1e}  {'pass' if c.passed else 'FAIL'}")
    failed = [c.name for c in checks if not c.passed]
    print("all checks passed" if not failed else f"{len(failed)} check(s) failed: {', '.join(failed)}")
    return EXIT_OK if not failed else EXIT_VERIFY


# --------------------------------------------------------------------------
# bench


DEFAULT_LADDER = (1_000, 2_000, 5_000, 10_000, 20_000, 50_000, 100_000, 200_000, 500_000, 1_000_000)


def time_ikf(n: int, params, rng, repeats: int = 3) -> float:
    """Best-of-``repeats`` seconds for filter construction plus one ``Sigma u``."""
    from .ikf import IkfOperator
    from .matern import SortedInputs, build_dlm

    spec = build_dlm(params, SortedInputs.from_unordered(rng.uniform(0.0, 1.0, n)))
    u = rng.standard_normal(n)
    IkfOperator(build_dlm(params, np.linspace(0, 1, 8))).sigma_matvec(np.ones(8))  # compile
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        IkfOperator(spec).sigma_matvec(u)
        best = min(best, time.perf_counter() - t0)
    return best


def time_dense(n: int, params, rng, repeats: int = 3) -> float:
    from .matern import kernel_matrix

    x = np.sort(rng.uniform(0.0, 1.0, n))
    u = rng.standard_normal(n)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        kernel_matrix(params, x) @ u
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    from .dlm import oracle_cap
    from .matern import MaternParams

    params = MaternParams(1.0, args.gamma, args.roughness)
    cap = oracle_cap()
    rows = []
    for n in args.sizes:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([args.seed, n])))
        rows.append((n, "ikf", time_ikf(n, params, rng, args.repeats)))
        if n <= cap:
            rows.append((n, "direct", time_dense(n, params, rng, args.repeats)))
        else:
            rows.append((n, "direct", "skipped"))
    out = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["N", "method", "seconds"])
        for n, m, s in rows:
            w.writerow([n, m, s if isinstance(s, str) else f"{s:.6g}"])
    finally:
        if args.out:
            out.close()
    if args.plot:
        from .svgplot import Figure

        fig = Figure(title="covariance matrix-vector product", xlabel="N", ylabel="seconds",
                     logx=True, logy=True)
        for m, color in (("ikf", "#1f77b4"), ("direct", "#d62728")):
            pts = [(n, s) for n, mm, s in rows if mm == m and not isinstance(s, str)]
            if pts:
                fig.line([p[0] for p in pts], [p[1] for p in pts], label=m, color=color)
                fig.points([p[0] for p in pts], [p[1] for p in pts], color=color)
        fig.save(args.plot)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ikfcg", description="Scalable latent-factor GP estimation of particle interactions.")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker threads for compiled kernels (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common_cg(sp):
        sp.add_argument("--cg-tol", type=float, default=1e-6)
        sp.add_argument("--cg-max-iter", type=_positive_int, default=1000)

    s = sub.add_parser("simulate", help="simulate particle trajectories to CSV")
    s.add_argument("--model", choices=["unnormalized-vicsek", "modified-vicsek"], default="unnormalized-vicsek")
    s.add_argument("--np", type=_positive_int, default=100, help="number of particles")
    s.add_argument("--ntau", type=_positive_int, default=10, help="number of time steps after frame 0")
    s.add_argument("--sigma0", type=float, default=0.1)
    s.add_argument("--h", type=float, default=0.1, help="time step")
    s.add_argument("--radius", type=float, default=0.5)
    s.add_argument("--radius2", type=float, default=1.0, help="distance-interaction radius (modified model)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="trajectory.csv")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="cross-validated hyperparameters to a params file")
    e.add_argument("--trajectory", required=True)
    e.add_argument("--model", choices=sorted(MODEL_NAMES), default="unnormalized-vicsek")
    e.add_argument("--direction", type=int, choices=[0, 1], default=None, help="cell model direction")
    e.add_argument("--radii", type=_floats, default=[0.25, 0.5, 1.0], help="candidate radii, comma-separated")
    e.add_argument("--radius2", type=_floats, default=[1.0], help="candidate distance radii (modified model)")
    e.add_argument("--gammas", type=_floats, default=[0.2, 2 / 3, 2.0],
                   help="range candidates as multiples of each interaction's input spread")
    e.add_argument("--ratios", type=_floats, default=[10.0, 100.0, 1e3, 1e4],
                   help="signal-to-noise variance ratio candidates")
    e.add_argument("--roughness", type=float, choices=[0.5, 2.5], default=2.5)
    e.add_argument("--train-fraction", type=float, default=0.8)
    e.add_argument("--h", type=float, default=0.1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="params.txt")
    common_cg(e)
    e.set_defaults(func=cmd_estimate)

    r = sub.add_parser("predict", help="predict interaction functions to CSV")
    r.add_argument("--trajectory", required=True)
    r.add_argument("--params", required=True)
    r.add_argument("--n-star", type=_positive_int, default=200)
    r.add_argument("--grid", type=_interval, action="append",
                   help="LO:HI test interval; repeat once per interaction (default: central 98%% of inputs)")
    r.add_argument("--h", type=float, default=0.1)
    r.add_argument("--out", default="predictions.csv")
    r.add_argument("--plot", default=None, help="SVG output path")
    r.add_argument("--seed", type=int, default=0, help="accepted for symmetry; prediction is deterministic")
    common_cg(r)
    r.set_defaults(func=cmd_predict)

    v = sub.add_parser("evaluate", help="NRMSE, interval length and coverage to CSV")
    v.add_argument("--predictions", required=True)
    src = v.add_mutually_exclusive_group()
    src.add_argument("--truth", help="CSV with interaction,d_star and a truth (or mean) column")
    src.add_argument("--params", help="params file of a simulated model; truth is the simulator's function")
    v.add_argument("--out", default="metrics.csv")
    v.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("verify", help="dense-oracle equivalence suites")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--perturb", type=float, default=0.0,
                   help="add this to one innovation variance (negative control, e.g. 1e-3)")
    c.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="timing ladder for the covariance product")
    b.add_argument("--sizes", type=lambda t: [int(float(v)) for v in t.split(",")], default=list(DEFAULT_LADDER))
    b.add_argument("--roughness", type=float, choices=[0.5, 2.5], default=2.5)
    b.add_argument("--gamma", type=float, default=0.1)
    b.add_argument("--repeats", type=_positive_int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None, help="CSV path (default: stdout)")
    b.add_argument("--plot", default=None, help="SVG output path")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ikfcg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConvergenceFailure, FloatingPointError) as exc:
        print(f"ikfcg: convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ValueError, OSError) as exc:
        print(f"ikfcg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
