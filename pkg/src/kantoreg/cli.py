"""Command-line front end.

Exit codes: 0 ok, 2 infeasible constraints, 3 domain violation (knot span,
non-monotone prediction, grid mismatch), 4 usage error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INFEASIBLE, EXIT_DOMAIN, EXIT_USAGE = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads(args):
    from ._kernels import set_threads

    n = args.threads if args.threads is not None else os.environ.get("KR_THREADS")
    if n is not None:
        set_threads(int(n))


def _fit_config(args):
    from .fit import FitConfig

    d = {}
    if args.config:
        with open(args.config) as fh:
            d.update(json.load(fh))
    for key in ("max_iters", "n_knots", "n_psi_knots", "tol", "step_size"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if args.signs:
        d["sign_configs"] = [tuple(s) for s in args.signs.split(",")]
    return FitConfig.from_dict(d)


def _curve_rows(fn, lo, hi, n=401):
    t = np.linspace(lo, hi, n)
    return list(zip(t, fn(t)))


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    from . import io
    from .errors import NonMonotoneMapError
    from .fit import fit
    from .model import check_feasibility
    from .objective import empirical_loss
    from .ot2d import fit_2d

    m = io.load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _fit_config(args)
    summary = {"manifest": str(args.manifest), "dimension": m.dimension, "seed": args.seed}
    if m.dimension == 2:
        if m.q:
            raise UsageError("scalar covariates are not supported for 2D manifests")
        data = io.load_dataset_2d(m)
        if args.config is None and args.max_iters is None:
            config.max_iters = 100
        if args.config is None and args.n_knots is None:
            config.n_knots = 10
        res = fit_2d(data, config)
        summary["loss"] = float(res.loss_trace[-1])
    else:
        data = io.load_dataset_1d(m, centering=args.centering)
        res = fit(data, config)
        summary["loss_quadratic"] = empirical_loss(res.model, data, "quadratic")
        if args.mode == "exact":
            try:
                summary["loss_exact"] = empirical_loss(res.model, data, "exact")
            except NonMonotoneMapError as e:
                summary["loss_exact"] = None
                summary["loss_exact_error"] = str(e)
        ok, slack = check_feasibility(res.model.constants, res.chosen_delta)
        summary["feasibility"] = {"ok": ok, "slack": slack,
                                  "lhs": 1.0 - slack if math.isfinite(slack) else slack}
        summary["constants"] = res.model.constants.to_dict()
        for k, s in enumerate(res.model.psi_params):
            io.write_rows(out / f"psiprime_{k + 1}.csv", ["x", "psiprime"],
                          zip(data.grid.nodes, s.psi_prime(data.grid.nodes)))
    io.save_model(out / "model.json", res.model)
    io.write_rows(out / "loss_trace.csv", ["iteration", "loss"], enumerate(res.loss_trace))
    for j, f in enumerate(res.model.step_params):
        lo, hi = f.span
        io.write_rows(out / f"fprime_{j + 1}.csv", ["t", "fprime"], _curve_rows(f.fprime, lo, hi))
    io.write_rows(out / "delta_losses.csv", ["delta", "loss"], sorted(res.per_delta_losses.items()))
    summary.update({"chosen_delta": "".join(res.chosen_delta), "iterations": res.iterations,
                    "step_size": res.step_size, "grad_norm_final": res.grad_norm_final,
                    "config": config.to_dict(), "mode": args.mode, "centering": args.centering})
    io.write_json(out / "summary.json", summary)
    print(f"chosen sign configuration {''.join(res.chosen_delta)}, "
          f"final loss {res.loss_trace[-1]:.6g}, {res.iterations} iterations")
    if args.enforce_feasibility and m.dimension == 1 and not summary["feasibility"]["ok"]:
        f = summary["feasibility"]
        print(f"infeasible: feasibility inequality LHS {f['lhs']:.6g} > 1 (slack {f['slack']:.6g})",
              file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def cmd_predict(args) -> int:
    from . import io
    from .model import predict
    from .ot2d import ModelSpec2D, TransportField2D, model_displacements_2d, predict_2d

    model = io.load_model(args.model)
    out = Path(args.out)
    stem = out.with_suffix("")
    if isinstance(model, ModelSpec2D):
        preds = [io.read_density2d(p) for p in args.predictors]
        dens = predict_2d(model, preds)
        io.write_density2d(out, dens)
        # displacement field of the prediction, evaluated on the reference support
        from .ot2d import ot_solve_2d

        g = model.grid
        phi = np.zeros((model.p, 1) + g.shape)
        grad = np.zeros((model.p, 1) + g.shape + (2,))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for j, (mb, d) in enumerate(zip(model.mu_bars, preds)):
                pot = ot_solve_2d(mb, d).potential
                phi[j, 0], grad[j, 0] = pot.values, pot.grad
        disp = model_displacements_2d(model, phi, grad, model.nu_bar.masses > 1e-12)[0]
        io.write_field2d(Path(f"{stem}_displacement.csv"), g, -disp[..., 0], -disp[..., 1])
        return EXIT_OK
    g = model.grid
    preds = [io.read_density_or_samples(p, g) for p in args.predictors]
    scalars = np.array(args.scalars or [], dtype=float)
    if scalars.size != model.q:
        raise UsageError(f"model expects {model.q} scalar covariates, got {scalars.size}")
    dens, pot = predict(model, preds, scalars)
    io.write_density(out, dens)
    io.write_rows(Path(f"{stem}_displacement.csv"), ["x", "displacement"],
                  zip(g.nodes, -pot.deriv))
    return EXIT_OK


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------

def cmd_check(args) -> int:
    from . import io
    from .model import FeasibilityConstants, estimate_constants

    m = io.load_manifest(args.manifest)
    if m.dimension != 1:
        raise UsageError("check is defined for 1D manifests")
    if m.p == 0 and m.q == 0:
        c = FeasibilityConstants.zeros(0, 0)
    else:
        c = estimate_constants(io.load_dataset_1d(m, centering=args.centering))
    report = {"constants": c.to_dict(), "max_kappa1": []}
    for j in range(c.p):
        row = {}
        for s in "+-":
            k = c.max_kappa1(j, s)
            row[s] = "unbounded" if math.isinf(k) else k
        report["max_kappa1"].append(row)
        print(f"predictor {j + 1}: eta={c.eta[j]:.6g} lambda={c.lam[j]:.6g} "
              f"gamma-={c.gamma_minus[j]:.6g} gamma+={c.gamma_plus[j]:.6g} "
              f"max kappa1(+)={_kfmt(row['+'])} max kappa1(-)={_kfmt(row['-'])}")
    for k in range(c.q):
        print(f"covariate {k + 1}: l={c.l_bounds[k]:.6g}")
    if c.p == 0 and c.q == 0:
        print("no predictors: all constants are zero")
    if args.out:
        io.write_json(args.out, report)
    return EXIT_OK


def _kfmt(v):
    return "unbounded" if v == "unbounded" else f"{v:.6g}"


# ---------------------------------------------------------------------------
# barycenter
# ---------------------------------------------------------------------------

def cmd_barycenter(args) -> int:
    from . import io
    from .ot1d import barycenter
    from .ot2d import barycenter_2d

    with open(args.inputs[0]) as fh:
        header = fh.readline().strip().split(",")
    if header[:2] == ["x", "y"]:
        ds = [io.read_density2d(p) for p in args.inputs]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            io.write_density2d(args.out, barycenter_2d(ds, iters=args.iters))
    else:
        ds = [io.read_density(p) for p in args.inputs]
        g = ds[0].grid
        from .ot1d import align_density

        ds = [d if d.grid.same_as(g) else align_density(d, g) for d in ds]
        io.write_density(args.out, barycenter(ds))
    return EXIT_OK


# ---------------------------------------------------------------------------
# synthetic data and experiments
# ---------------------------------------------------------------------------

def write_dataset_1d(data, out: Path) -> Path:
    """Write a dataset's densities and a manifest referencing them."""
    from . import io

    out.mkdir(parents=True, exist_ok=True)
    recs = []
    for i in range(data.n):
        r = f"response_{i:04d}.csv"
        io.write_density(out / r, data.responses[i])
        ps = []
        for j, d in enumerate(data.dist_predictors[i] if data.dist_predictors else ()):
            name = f"predictor{j + 1}_{i:04d}.csv"
            io.write_density(out / name, d)
            ps.append(name)
        recs.append({"response": r, "predictors": ps, "scalars": data.scalars[i].tolist()})
    path = out / "manifest.json"
    io.save_manifest(path, io.Manifest(recs, data.grid.to_dict(), 1))
    return path


def cmd_synth(args) -> int:
    from .synth import SynthConfig1D, gen_mixed_dataset

    data = gen_mixed_dataset(SynthConfig1D(args.n, seed=args.seed))
    path = write_dataset_1d(data, Path(args.out))
    print(f"wrote {data.n} records to {path}")
    return EXIT_OK


def cmd_convergence(args) -> int:
    from .synth import run_convergence

    ns = [int(v) for v in args.ns.split(",") if v.strip()]
    seeds = list(range(args.seed, args.seed + args.seeds))
    rows, _ = run_convergence(ns, seeds, args.out, config=_fit_config(args))
    for r in rows:
        print(f"{r[0]:>5} log n={r[1]:.4f} log L2 error={r[2]:.4f}")
    return EXIT_OK


FIGURES = ("fig1d-plus", "fig1d-minus", "fig2d-plus", "fig2d-minus")


def cmd_demo(args) -> int:
    from . import io

    if args.figure not in FIGURES:
        print(f"unknown figure {args.figure!r}; choose from {', '.join(FIGURES)}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sign = "+" if args.figure.endswith("plus") else "-"
    if args.figure.startswith("fig1d"):
        panels = demo_panels_1d(sign)
    else:
        panels = demo_panels_2d(sign, args.grid or 64)
    files = []
    for name, (header, rows) in panels.items():
        io.write_rows(out / f"{name}.csv", header, rows)
        files.append(f"{name}.csv")
    io.write_json(out / "panels.json", {"figure": args.figure, "files": files})
    print(f"wrote {len(files)} panel files to {out}")
    return EXIT_OK


def demo_panels_1d(sign: str):
    """Column 1: reference and predictors; columns 2-4: one per link setting."""
    from .grid import Density1D
    from .model import compose_values
    from .ot1d import TransportMap1D, pushforward
    from .synth import demo_links, gen_demo_1d

    mbar, mus, pots = gen_demo_1d()
    g = mbar.grid
    x = g.nodes
    panels = {"col1_densities": (["x", "mu_bar", "mu1", "mu2", "mu3"],
                                 zip(x, mbar.values, *[m.values for m in mus])),
              "col1_potentials": (["x", "phi1", "phi2", "phi3"],
                                  zip(x, *[p.values for p in pots]))}
    phi = np.array([p.values for p in pots])
    dphi = np.array([p.deriv for p in pots])
    for c, f in enumerate(demo_links(sign), start=2):
        vals, scale = compose_values(f, phi)
        vals = vals - vals.mean(axis=0)
        F = scale * dphi
        F = F - F.mean(axis=0)
        nus = [pushforward(mbar, TransportMap1D(g, x - d)) for d in F]
        panels[f"col{c}_densities"] = (["x", "nu_bar", "nu1", "nu2", "nu3"],
                                       zip(x, mbar.values, *[v.values for v in nus]))
        panels[f"col{c}_potentials"] = (["x", "varphi1", "varphi2", "varphi3"], zip(x, *vals))
        panels[f"col{c}_maps"] = (["x", "T1", "T2", "T3"], zip(x, *(x - F)))
        lo, hi = f.span
        panels[f"col{c}_fprime"] = (["t", "fprime"], _curve_rows(f.fprime, lo, hi))
    return panels


def demo_panels_2d(sign: str, n: int):
    from .ot2d import ModelSpec2D, TransportField2D, model_displacements_2d, pushforward_2d
    from .synth import demo_dataset_2d, demo_links, gen_demo_2d

    fixture = gen_demo_2d(n)
    d1, d2, bary = fixture
    g = bary.grid
    X, Y = g.mesh()
    panels = {"col1_densities": (["x", "y", "mu_bar", "mu1", "mu2"],
                                 zip(X.ravel(), Y.ravel(), bary.values.ravel(),
                                     d1.values.ravel(), d2.values.ravel()))}
    for c, f in enumerate(demo_links(sign), start=2):
        data = demo_dataset_2d(link=f, fixture=fixture)
        disp = data.meta["displacements"]
        sup = data.support
        panels[f"col{c}_densities"] = (["x", "y", "nu_bar", "nu1", "nu2"],
                                       zip(X.ravel(), Y.ravel(), bary.values.ravel(),
                                           *[r.values.ravel() for r in data.responses]))
        ux, uy = -disp[..., 0], -disp[..., 1]
        rows = [(X[s], Y[s], ux[0][s], uy[0][s], ux[1][s], uy[1][s])
                for s in zip(*np.nonzero(sup))]
        panels[f"col{c}_arrows"] = (["x", "y", "dx1", "dy1", "dx2", "dy2"], rows)
        lo, hi = f.span
        panels[f"col{c}_fprime"] = (["t", "fprime"], _curve_rows(f.fprime, lo, hi))
    return panels


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kantoreg", description="Regression between probability distributions "
                                             "through optimal transport potentials.")
    p.add_argument("--threads", type=int, default=None,
                   help="cap worker threads (default: $KR_THREADS or all cores)")
    p.add_argument("--seed", type=int, default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def fit_opts(q):
        q.add_argument("--config", help="flat JSON file of fit settings")
        q.add_argument("--max-iters", dest="max_iters", type=int)
        q.add_argument("--knots", dest="n_knots", type=int)
        q.add_argument("--psi-knots", dest="n_psi_knots", type=int)
        q.add_argument("--tol", type=float)
        q.add_argument("--step-size", dest="step_size", type=float)
        q.add_argument("--signs", help="comma-separated sign configurations, e.g. ++,+-")

    q = sub.add_parser("fit", help="fit a model to a manifest")
    q.add_argument("manifest")
    q.add_argument("--out", default="fit_out")
    q.add_argument("--mode", choices=("quadratic", "exact"), default="quadratic",
                   help="also report the exact Wasserstein loss with 'exact'")
    q.add_argument("--centering", choices=("predictor", "response"), default="predictor")
    q.add_argument("--enforce-feasibility", action="store_true")
    fit_opts(q)
    q.set_defaults(func=cmd_fit)

    q = sub.add_parser("predict", help="predict a response density")
    q.add_argument("model")
    q.add_argument("predictors", nargs="*")
    q.add_argument("--scalars", type=float, nargs="*")
    q.add_argument("--out", default="prediction.csv")
    q.set_defaults(func=cmd_predict)

    q = sub.add_parser("check", help="report feasibility constants of a manifest")
    q.add_argument("manifest")
    q.add_argument("--centering", choices=("predictor", "response"), default="predictor")
    q.add_argument("--out")
    q.set_defaults(func=cmd_check)

    q = sub.add_parser("barycenter", help="Wasserstein barycenter of density files")
    q.add_argument("inputs", nargs="+")
    q.add_argument("--out", default="barycenter.csv")
    q.add_argument("--iters", type=int, default=10)
    q.set_defaults(func=cmd_barycenter)

    q = sub.add_parser("synth", help="generate the synthetic mixed-predictor dataset")
    q.add_argument("--n", type=int, default=50)
    q.add_argument("--out", default="synth")
    q.set_defaults(func=cmd_synth)

    q = sub.add_parser("convergence", help="run the error-versus-n experiment")
    q.add_argument("--ns", default="50,100,150,200")
    q.add_argument("--seeds", type=int, default=5)
    q.add_argument("--out", default="convergence.csv")
    fit_opts(q)
    q.set_defaults(func=cmd_convergence)

    q = sub.add_parser("demo", help="panel data for the illustrative figures")
    q.add_argument("figure", help=", ".join(FIGURES))
    q.add_argument("--out", default="demo")
    q.add_argument("--grid", type=int, default=None, help="2D grid size (default 64)")
    q.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    from .errors import DomainError, NonMonotoneMapError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits on --help and on usage errors
        return int(e.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    _threads(args)
    for opt in ("config", "max_iters", "n_knots", "n_psi_knots", "tol", "step_size", "signs"):
        if not hasattr(args, opt):
            setattr(args, opt, None)
    try:
        return args.func(args)
    except (DomainError, NonMonotoneMapError) as e:
        print(f"domain error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except (UsageError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
