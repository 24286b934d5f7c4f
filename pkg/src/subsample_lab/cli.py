"""Command-line entry point. Exit codes: 0 ok, 2 usage, 3 config, 4 numerical."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import highdim, io, lowdim, minimax, sim
from .core import ConfigError, LabelKernel, NumericalError, SelectionRule, make_rng

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4


def _output(doc: dict) -> tuple[str | None, str]:
    out = doc.get("output", {})
    return out.get("path"), out.get("format", "csv")


def _echo(doc: dict, extra: dict | None = None) -> None:
    eff = dict(doc)
    if extra:
        eff["effective"] = extra
    sys.stdout.write(json.dumps(eff, sort_keys=True) + "\n")


def _emit(doc: dict, header, rows) -> None:
    path, kind = _output(doc)
    io.write_table(path, header, rows, kind, stream=sys.stdout)


# -- subcommands ------------------------------------------------------------------


def _population(spec: dict) -> lowdim.Population:
    kind = spec["kind"]
    m = spec.get("points")
    if kind == "uniform":
        return lowdim.Population.uniform_1d(spec.get("x_max", 1.0), m or 200_000)
    if kind == "power-law":
        if "alpha" not in spec or "x_max" not in spec:
            raise ConfigError("/lowdim/population: power-law needs alpha and x_max")
        return lowdim.Population.power_law_1d(spec["alpha"], spec["x_max"], m or 200_000)
    return lowdim.Population.gaussian(spec.get("p", 1), m or 100_000)


def cmd_lowdim_rho(args, doc: dict) -> int:
    ld = doc.get("lowdim")
    if ld is None:
        raise ConfigError("/lowdim: required for lowdim-rho")
    pop = _population(ld["population"])
    model = ld.get("model", {"kind": "linear-regression"})
    if model["kind"] == "linear-regression":
        mom = lowdim.ConditionalMoments.linear_regression(model.get("tau", 1.0))
    else:
        th = model.get("theta_star")
        if th is None or len(th) != pop.p:
            raise ConfigError("/lowdim/model/theta_star: needs one entry per feature")
        mom = lowdim.ConditionalMoments.glm_logistic(th)
    metric = lowdim.metric_for(ld.get("metric", "sigma"), mom, pop)
    schemes = ld.get("schemes", ["random", "unbiased-influence", "nonreweight-optimal"])
    gammas = doc.get("selection", {}).get("gamma", [0.5])
    _echo(doc)
    rows = []
    for g in gammas:
        vals = {}
        for s in schemes:
            if s == "random":
                rule = SelectionRule("random", g, reweight=True)
                vals[s] = lowdim.rho_coefficient(mom, rule, metric, pop).value
            elif s == "unbiased-influence":
                vals[s] = lowdim.optimal_unbiased_pi(lowdim.unbiased_score(mom, metric, pop), g, pop).rho
            else:
                vals[s] = lowdim.solve_nonreweight_fixed_point(mom, metric, pop, g).rho
        ratio = vals.get("nonreweight-optimal", math.nan) / vals.get("unbiased-influence", math.nan)
        for s in schemes:
            rows.append([s, g, vals[s], ratio])
    _emit(doc, ["scheme", "gamma", "rho", "ratio_nr_over_unbiased"], rows)
    return EXIT_OK


def cmd_nonmono(args, doc: dict) -> int:
    nm = doc.get("nonmono", {})
    _echo(doc)
    rep = lowdim.nonmonotonicity_check(nm.get("p", 12), nm.get("cubic_c", 0.5), nm.get("draws", 100_000),
                                       nm.get("gamma", 0.98), nm.get("seed", doc.get("experiment", {}).get("seed", 0)),
                                       nm.get("grid_points", 100_000))
    header = ["p", "cubic_c", "draws", "frac_negative", "std_error", "z_stat", "gamma", "rho_full",
              "rho_greedy", "first_order_gain", "certified"]
    _emit(doc, header, [[rep.p, rep.cubic_c, rep.draws, rep.frac_negative, rep.std_error, rep.z_stat,
                         rep.gamma, rep.rho_full, rep.rho_greedy, rep.first_order_gain, rep.certified]])
    return EXIT_OK


def cmd_minimax(args, doc: dict) -> int:
    mm = doc.get("minimax")
    if mm is None:
        raise ConfigError("/minimax: required for minimax-discrete")
    gammas = doc.get("selection", {}).get("gamma", [0.5])
    _echo(doc)
    rows = []
    for g in gammas:
        spec = minimax.DiscreteMinimaxSpec(np.array(mm["p_x"]), np.array(mm["q_x"]), np.array(mm["theta_su"]),
                                           mm["eps"], g)
        sol = minimax.solve_minimax(spec)
        plug = minimax.plugin_pi(spec)
        for x in range(spec.p_x.size):
            rows.append([g, x, sol.theta_mm[x], sol.pi[x], plug[x], sol.risk,
                         minimax.worst_case_risk(plug, spec)])
    _emit(doc, ["gamma", "level", "theta_mm", "pi_mm", "pi_plugin", "risk_mm", "worst_case_risk_plugin"], rows)
    return EXIT_OK


def _surrogate_beta(doc: dict, kernel: LabelKernel, n: int, p: int) -> tuple[float, float]:
    sur = doc.get("surrogate", {"mode": "perfect"})
    if sur["mode"] == "perfect":
        return 1.0, 0.0
    if "beta0" in sur:
        return sur["beta0"], sur.get("beta_s", 0.0)
    seed = doc.get("experiment", {}).get("seed", 0)
    theta0 = np.zeros(p)
    theta0[0] = kernel.theta0_norm
    model = sim.train_surrogate("fitted", theta0, kernel, make_rng(seed, 1, 0), sur.get("N_su", 0),
                                sur.get("lambda", 1e-2))
    return model.beta0, model.beta_s


def cmd_highdim(args, doc: dict) -> int:
    cfg = io.experiment_config_from(doc)
    b0, bs = _surrogate_beta(doc, cfg.kernel, cfg.n, cfg.p)
    ridges = cfg.ridge_grid or cfg.ridges
    _echo(doc, {"beta0": b0, "beta_s": bs, "delta0": cfg.n / cfg.p})
    rows, failed = [], []
    kind = "random" if cfg.selection_kind == "random" else "alpha-family"
    for g in cfg.gammas:
        for a in cfg.alpha_values:
            rule = highdim.population_rule(kind, g, a, math.hypot(b0, bs), cfg.reweight)
            for lam in ridges:
                spec = highdim.SaddleSpec(cfg.loss, cfg.kernel, rule, b0, bs, cfg.n / cfg.p, lam)
                try:
                    s = highdim.solve_saddle(spec)
                    rows.append([g, a, lam, s.alpha0, s.alphas, s.alphaperp, s.mu, s.realized_gamma, s.test_error,
                                 s.excess_error, s.misclassification, s.flat, "ok"])
                except NumericalError as exc:
                    rows.append([g, a, lam] + [math.nan] * 8 + [False, "saddle-failed"])
                    failed.append(f"gamma={g} alpha={a} lambda={lam}: {exc}")
    _emit(doc, ["gamma", "alpha", "lambda", "alpha0", "alphas", "alphaperp", "mu", "realized_gamma", "test_error",
                "excess", "misclassification", "mu_flat", "status"], rows)
    return _report_failures(failed)


def _report_failures(failed: list[str]) -> int:
    for f in failed:
        print(f"numerical failure in cell {f}", file=sys.stderr)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ridgeless(args, doc: dict) -> int:
    rl = doc.get("ridgeless")
    if rl is None:
        raise ConfigError("/ridgeless: required for ridgeless")
    kernel = io.kernel_from(doc)
    shapes = rl.get("shapes", [{"kind": "random"}])
    gammas = doc.get("selection", {}).get("gamma", [0.5])
    _echo(doc)
    rows = []
    for sh in shapes:
        for g in gammas:
            rule = highdim.population_rule(sh["kind"], g, sh.get("alpha"))
            for d in rl["delta"]:
                try:
                    val, status = highdim.ridgeless_closed_form(kernel, rule, d / g), "ok"
                except NumericalError:
                    val, status = math.nan, "pole"
                rows.append([sh["kind"], sh.get("alpha", math.nan), g, d, val, status])
    _emit(doc, ["shape", "alpha", "gamma", "delta", "excess_mse", "status"], rows)
    return EXIT_OK


def cmd_sweep(args, doc: dict, theory: bool) -> int:
    cfg = io.experiment_config_from(doc)
    jobs = args.jobs if args.jobs is not None else sim.default_jobs()
    _echo(doc, {"jobs": jobs})
    res = sim.run_sweep(cfg, jobs=jobs, theory=theory)
    path, kind = _output(doc)
    io.write_results(res.rows, path, kind, stream=sys.stdout)
    if path is not None:
        p = Path(path)
        io.write_table(p.with_name(p.stem + "_summary" + p.suffix), sim.CellSummary.header(),
                       [c.values() for c in res.summary], kind)
    failed = [f"gamma={r.gamma} alpha={r.alpha} lambda={r.lambda_} replicate={r.replicate}: {r.status}"
              for r in res.rows if r.status != "ok"]
    return _report_failures(failed)


def cmd_select(args) -> int:
    if not 0 < args.gamma <= 1:
        raise ConfigError("--gamma must lie in (0, 1]")
    ing = io.ingest_csv(args.data, args.label_column)
    data = ing.dataset
    try:
        sur = json.loads(Path(args.surrogate).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read surrogate {args.surrogate}: {exc}") from exc
    theta = np.asarray(sur.get("theta_su") if isinstance(sur, dict) else sur, dtype=float)
    if theta.shape != (data.p,):
        raise ConfigError(f"/theta_su: expected {data.p} coefficients, got {theta.size}")
    alpha = io.parse_alpha(args.alpha)
    pi = sim.alpha_family_pi(data.features @ theta, args.gamma, alpha)
    reweight = not args.no_reweight
    s = sim.draw_selection(pi, make_rng(args.seed, 2), reweight)
    w = np.where(pi > 0, 1 / np.where(pi > 0, pi, 1), 0.0) if reweight else np.ones_like(pi)
    io.write_selection(args.out, pi, w, s > 0)
    out = Path(args.out)
    io.write_transform(out.with_name(out.stem + "_transform" + out.suffix), ing)
    print(f"selected {int((s > 0).sum())} of {data.n} rows (expected {pi.sum():.1f})")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="subsample-lab", description="Data-selection theory and simulation toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("lowdim-rho", "asymptotic error coefficients on a fixed-dimension population"),
        ("nonmono-check", "certificate that dropping data can help an unweighted fit"),
        ("minimax-discrete", "minimax selection for a finite-level Bernoulli model"),
        ("highdim-solve", "saddle-point predictions per (gamma, alpha, lambda) cell"),
        ("ridgeless", "closed-form ridgeless least-squares excess error"),
        ("simulate", "simulation sweep without the theory overlay"),
        ("sweep", "simulation sweep with saddle-point predictions attached"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config's random seed")
        if name in ("simulate", "sweep"):
            p.add_argument("--jobs", type=int, default=None,
                           help="worker processes (default: $SUBSAMPLE_LAB_THREADS or 1)")
    p = sub.add_parser("select", help="selection probabilities for a CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--surrogate", required=True, help='JSON file {"theta_su": [...]}')
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--alpha", required=True, help="exponent; inf or -inf for the topK rules")
    p.add_argument("--no-reweight", action="store_true")
    p.add_argument("--label-column", default=None, help="label column name (default: y or label if present)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "select":
            return cmd_select(args)
        doc = io.read_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            doc.setdefault("experiment", {})["seed"] = args.seed
            if "nonmono" in doc:
                doc["nonmono"]["seed"] = args.seed
        handler = {
            "lowdim-rho": cmd_lowdim_rho,
            "nonmono-check": cmd_nonmono,
            "minimax-discrete": cmd_minimax,
            "highdim-solve": cmd_highdim,
            "ridgeless": cmd_ridgeless,
        }.get(args.command)
        if handler is not None:
            return handler(args, doc)
        return cmd_sweep(args, doc, theory=args.command == "sweep")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
