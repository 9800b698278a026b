"""Command-line front end.

Exit codes: 0 success, 1 error, 2 fit finished without converging (the
result is still written). Set ``GSVB_LOG`` (e.g. ``DEBUG``) for log output.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import secrets
import sys

import numpy as np

from .errors import CoverageGap, GsvbError
from .model import Family, GroupedDesign, GsvbPrior, VariationalKind, VariationalState

log = logging.getLogger("gsvb")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


class InputError(GsvbError, ValueError):
    pass


def fmt(x) -> str:
    return format(float(x), ".17g")


# ----------------------------------------------------------------------------
# file helpers

def read_numeric_csv(path) -> tuple[list[str], np.ndarray]:
    """Header plus a float matrix; errors carry the line and column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty file, expected a header row")
    header = rows[0]
    data = []
    for ln, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InputError(f"{path}: line {ln}: expected {len(header)} columns, got {len(row)}")
        vals = []
        for col, cell in enumerate(row, start=1):
            try:
                vals.append(float(cell))
            except ValueError:
                raise InputError(f"{path}: line {ln}, column {col}: cannot parse {cell!r} as a number") from None
        data.append(vals)
    if not data:
        raise InputError(f"{path}: no data rows")
    return header, np.array(data, dtype=float)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([c if isinstance(c, str) else fmt(c) if isinstance(c, float) else c for c in r])


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_groups(path, p: int) -> list[int]:
    sizes = read_json(path)
    if not isinstance(sizes, list) or not all(isinstance(s, int) and s >= 1 for s in sizes):
        raise InputError(f"{path}: groups must be a JSON list of positive integer sizes")
    if sum(sizes) != p:
        raise CoverageGap(f"{path}: group sizes sum to {sum(sizes)} but the data has {p} covariates")
    return sizes


def read_design(data_path, groups_path) -> GroupedDesign:
    _, arr = read_numeric_csv(data_path)
    if arr.shape[1] < 2:
        raise InputError(f"{data_path}: need a response column and at least one covariate")
    y, X = arr[:, 0], arr[:, 1:]
    return GroupedDesign.from_sizes(X, y, read_groups(groups_path, X.shape[1]))


def _check_distinct(*paths) -> None:
    seen = {}
    for p in paths:
        if p is None:
            continue
        key = os.path.abspath(p)
        if key in seen:
            raise InputError(f"path {p} used for both input and output")
        seen[key] = p


def _resolve_seed(seed):
    if seed is None:
        seed = secrets.randbits(32)
        log.warning("no --seed given, using %d", seed)
    return int(seed)


def state_to_json(state: VariationalState) -> dict:
    return {
        "gamma": state.gamma.tolist(),
        "mu": state.mu.tolist(),
        "sigma_blocks": [s.tolist() for s in state.sigma_blocks],
        "tau_a": state.tau_a,
        "tau_b": state.tau_b,
        "jaakkola_t": None if state.jaakkola_t is None else state.jaakkola_t.tolist(),
    }


def state_from_json(d: dict) -> VariationalState:
    try:
        st = VariationalState(
            mu=np.array(d["mu"], dtype=float),
            sigma_blocks=[np.array(s, dtype=float).reshape(len(s), len(s)) for s in d["sigma_blocks"]],
            gamma=np.array(d["gamma"], dtype=float),
            tau_a=d.get("tau_a"),
            tau_b=d.get("tau_b"),
            jaakkola_t=None if d.get("jaakkola_t") is None else np.array(d["jaakkola_t"], dtype=float),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"fit file is missing or has malformed fields: {exc}") from None
    if sum(s.shape[0] for s in st.sigma_blocks) != st.mu.shape[0] or len(st.sigma_blocks) != st.gamma.shape[0]:
        raise InputError("fit file: mu, gamma and sigma_blocks have inconsistent shapes")
    return st


def _prior_from_args(args, M: int, cfg: dict) -> GsvbPrior:
    default = GsvbPrior.default(M)
    vals = {}
    for name in ("lam", "a0", "b0", "a", "b"):
        v = getattr(args, name, None)
        if v is None:
            v = cfg.get(name, getattr(default, name))
        vals[name] = float(v)
    return GsvbPrior(**vals)


# ----------------------------------------------------------------------------
# commands

def cmd_fit(args) -> int:
    from .cavi import FitConfig, fit

    _check_distinct(args.data, args.groups, args.out, args.config)
    cfg = read_json(args.config) if args.config else {}
    family = Family(args.family or cfg.get("family", "gaussian"))
    kind = VariationalKind(args.kind or cfg.get("kind", "block"))
    seed = _resolve_seed(args.seed if args.seed is not None else cfg.get("seed"))
    design = read_design(args.data, args.groups)
    prior = _prior_from_args(args, design.n_groups, cfg)
    config = FitConfig(
        max_sweeps=int(args.max_sweeps or cfg.get("max_sweeps", 1000)),
        tol=float(args.tol or cfg.get("tol", 1e-3)),
        kind=kind,
        init=args.init or cfg.get("init", "group_lasso"),
        init_reg=cfg.get("init_reg"),
        seed=seed,
    )
    res = fit(design, prior, family, config)
    out = {
        "family": family.value,
        "kind": kind.value,
        "groups": design.sizes.tolist(),
        "prior": {"lam": prior.lam, "a0": prior.a0, "b0": prior.b0, "a": prior.a, "b": prior.b},
        **state_to_json(res.state),
        "objective_trace": list(map(float, res.objective_trace)),
        "sweeps_used": res.sweeps_used,
        "converged": bool(res.converged),
        "seed": seed,
    }
    write_json(args.out, out)
    if not res.converged:
        log.warning("fit did not converge in %d sweeps", res.sweeps_used)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_gibbs(args) -> int:
    from .mcmc import GibbsConfig, run_gibbs

    family = Family(args.family)
    if family is not Family.GAUSSIAN:
        print(f"error: unsupported family {family.value!r} for the Gibbs sampler (gaussian only)",
              file=sys.stderr)
        return EXIT_ERROR
    _check_distinct(args.data, args.groups, args.chain, args.summary)
    seed = _resolve_seed(args.seed)
    design = read_design(args.data, args.groups)
    prior = _prior_from_args(args, design.n_groups, {})
    config = GibbsConfig(n_iter=args.iters, burn_in=args.burn, thin=args.thin, seed=seed,
                         kernel_param=args.kernel_param)
    chain = run_gibbs(design, prior, config)
    p, M = design.p, design.n_groups
    header = ([f"beta_{j + 1}" for j in range(p)] + [f"z_{k + 1}" for k in range(M)]
              + [f"theta_{k + 1}" for k in range(M)] + ["xi"])
    with open(args.chain, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for b, z, t, xi in zip(chain.beta_samples, chain.z_samples, chain.theta_samples, chain.xi_samples):
            w.writerow([fmt(v) for v in b] + [str(int(v)) for v in z] + [fmt(v) for v in t] + [fmt(xi)])
    write_json(args.summary, {
        "pip": chain.pip.tolist(),
        "posterior_mean": chain.posterior_mean().tolist(),
        "acceptance_rate": chain.acceptance_rate.tolist(),
        "xi_mean": float(chain.xi_samples.mean()),
        "n_kept": int(chain.beta_samples.shape[0]),
        "groups": design.sizes.tolist(),
        "iters": args.iters,
        "burn_in": args.burn,
        "thin": args.thin,
        "seed": seed,
    })
    return EXIT_OK


def cmd_predict(args) -> int:
    from .predictive import all_credible_sets, predict_rows

    _check_distinct(args.fit, args.data, args.out, args.credible_sets)
    fitd = read_json(args.fit)
    state = state_from_json(fitd)
    family = Family(fitd.get("family", "gaussian"))
    _, X_new = read_numeric_csv(args.data)
    p = state.mu.shape[0]
    if X_new.shape[1] != p:
        raise InputError(f"{args.data}: expected {p} covariate columns, got {X_new.shape[1]}")
    seed = _resolve_seed(args.seed)
    summ = predict_rows(state, X_new, family, n_draws=args.draws, seed=seed, alpha=args.alpha)
    write_csv(args.out, ["row", "mean", "median", "lo", "hi"],
              [[i + 1, *map(float, r)] for i, r in enumerate(summ)])
    if args.credible_sets:
        sets = all_credible_sets(state, args.alpha)
        write_json(args.credible_sets, [{"coordinate": j + 1, **s.to_dict()} for j, s in enumerate(sets)])
    return EXIT_OK


def _write_truth(path, beta0, sizes, active):
    group = np.repeat(np.arange(len(sizes)), sizes)
    act = set(int(a) for a in active)
    write_csv(path, ["coordinate", "group", "beta0", "active"],
              [[j + 1, int(g) + 1, float(b), int(g in act)] for j, (g, b) in enumerate(zip(group, beta0))])


def read_truth(path):
    header, arr = read_numeric_csv(path)
    cols = {h: i for i, h in enumerate(header)}
    for need in ("group", "beta0", "active"):
        if need not in cols:
            raise InputError(f"{path}: missing column {need!r}")
    group = arr[:, cols["group"]].astype(int) - 1
    beta0 = arr[:, cols["beta0"]]
    active = np.unique(group[arr[:, cols["active"]] > 0])
    return beta0, group, active


def cmd_simulate(args) -> int:
    from .simulation import SimSpec, run_replicates, simulate

    spec_d = read_json(args.spec)
    if args.seed is not None:
        spec_d["seed"] = args.seed
    elif "seed" not in spec_d:
        spec_d["seed"] = _resolve_seed(None)
    try:
        spec = SimSpec.from_dict(spec_d)
    except TypeError as exc:
        raise InputError(f"{args.spec}: {exc}") from None

    if args.replicates:
        _check_distinct(args.spec, args.out_metrics, args.out_aggregate)
        if not args.out_metrics:
            raise InputError("--replicates needs --out-metrics")
        reps = run_replicates(spec, args.replicates, seed=spec.seed, jobs=args.jobs,
                              method=args.method, kind=VariationalKind(args.kind),
                              check_separation=True)
        rows = []
        for i, r in enumerate(reps):
            d = r.to_dict()
            runtime = d.pop("runtime", None)
            log.info("replicate %d: runtime %.3fs", i + 1, runtime or 0.0)
            rows.append({"replicate": i + 1, **d})
        write_json(args.out_metrics, {"spec": spec.to_dict(), "method": args.method,
                                      "kind": args.kind, "replicates": rows})
        if args.out_aggregate:
            keys = ["l2_error", "auc", "coverage", "mean_set_size", "n_selected_groups"]
            vals = {k: np.array([r[k] for r in rows], dtype=float) for k in keys}
            write_csv(args.out_aggregate, ["metric", "median", "q05", "q95", "mean"],
                      [[k, float(np.median(v)), float(np.quantile(v, 0.05)),
                        float(np.quantile(v, 0.95)), float(v.mean())] for k, v in vals.items()])
        return EXIT_OK

    _check_distinct(args.spec, args.out_data, args.out_truth, args.out_groups)
    if not (args.out_data and args.out_truth):
        raise InputError("simulate needs --out-data and --out-truth (or --replicates)")
    data = simulate(spec)
    X, y = data.design.X, data.design.y
    write_csv(args.out_data, ["y"] + [f"x{j + 1}" for j in range(spec.p)],
              [[float(yi), *map(float, xi)] for yi, xi in zip(y, X)])
    _write_truth(args.out_truth, data.beta0, [spec.m] * spec.M, data.active)
    if args.out_groups:
        write_json(args.out_groups, [spec.m] * spec.M)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .predictive import all_credible_sets
    from .simulation import evaluate_metrics

    _check_distinct(args.fit, args.truth, args.out)
    fitd = read_json(args.fit)
    state = state_from_json(fitd)
    beta0, group, active = read_truth(args.truth)
    if beta0.shape[0] != state.mu.shape[0]:
        raise InputError(f"{args.truth}: expected {state.mu.shape[0]} coordinates, got {beta0.shape[0]}")
    sizes = [s.shape[0] for s in state.sigma_blocks]
    if not np.array_equal(group, np.repeat(np.arange(len(sizes)), sizes)):
        raise InputError(f"{args.truth}: group column does not match the fitted group sizes")
    beta_hat = np.repeat(state.gamma, sizes) * state.mu
    rep = evaluate_metrics(beta_hat, state.gamma, all_credible_sets(state, args.alpha),
                           beta0, active, M=len(sizes))
    write_json(args.out, {**rep.to_dict(), "alpha": args.alpha})
    return EXIT_OK


# ----------------------------------------------------------------------------

def _add_prior_flags(p):
    g = p.add_argument_group("prior (defaults: lam=1, a0=1, b0=M, a=b=1e-3)")
    g.add_argument("--lam", type=float)
    g.add_argument("--a0", type=float)
    g.add_argument("--b0", type=float)
    g.add_argument("--a", type=float)
    g.add_argument("--b", type=float)


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1 so that 2 keeps meaning "not converged"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gsvb", description="Group spike-and-slab variational Bayes.")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit the variational posterior")
    f.add_argument("--family", choices=[x.value for x in Family])
    f.add_argument("--kind", choices=[x.value for x in VariationalKind])
    f.add_argument("--data", required=True, help="CSV: header, y first, then X")
    f.add_argument("--groups", required=True, help="JSON list of group sizes")
    f.add_argument("--config", help="JSON with any of the flag values")
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int)
    f.add_argument("--max-sweeps", type=int)
    f.add_argument("--tol", type=float)
    f.add_argument("--init", choices=["group_lasso", "zeros"])
    _add_prior_flags(f)
    f.set_defaults(func=cmd_fit)

    g = sub.add_parser("gibbs", help="run the Gibbs sampler (gaussian only)")
    g.add_argument("--family", default="gaussian", choices=[x.value for x in Family])
    g.add_argument("--data", required=True)
    g.add_argument("--groups", required=True)
    g.add_argument("--chain", required=True, help="output CSV, one row per kept iteration")
    g.add_argument("--summary", required=True, help="output JSON with PIPs and posterior means")
    g.add_argument("--iters", type=int, default=100_000)
    g.add_argument("--burn", type=int, default=50_000)
    g.add_argument("--thin", type=int, default=1)
    g.add_argument("--kernel-param", choices=["sd", "variance"], default="sd")
    g.add_argument("--seed", type=int)
    _add_prior_flags(g)
    g.set_defaults(func=cmd_gibbs)

    pr = sub.add_parser("predict", help="posterior-predictive summaries for new rows")
    pr.add_argument("--fit", required=True)
    pr.add_argument("--data", required=True, help="CSV: header, then X columns only")
    pr.add_argument("--out", required=True)
    pr.add_argument("--credible-sets", help="optional JSON output of marginal credible sets")
    pr.add_argument("--draws", type=int, default=10_000)
    pr.add_argument("--alpha", type=float, default=0.05)
    pr.add_argument("--seed", type=int)
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="generate data, or run replicate experiments")
    s.add_argument("--spec", required=True, help="SimSpec JSON")
    s.add_argument("--out-data")
    s.add_argument("--out-truth")
    s.add_argument("--out-groups")
    s.add_argument("--replicates", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--method", choices=["vb", "gibbs"], default="vb")
    s.add_argument("--kind", choices=[x.value for x in VariationalKind], default="block")
    s.add_argument("--out-metrics")
    s.add_argument("--out-aggregate")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="score a fit against the true coefficients")
    e.add_argument("--fit", required=True)
    e.add_argument("--truth", required=True, help="truth CSV written by simulate")
    e.add_argument("--out", required=True)
    e.add_argument("--alpha", type=float, default=0.05)
    e.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("GSVB_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GsvbError, ValueError, OSError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
