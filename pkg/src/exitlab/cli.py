"""
Command line entry point.

    exitlab <validate|simulate|action|quasipotential|pde|eigen|verify|ladder>
            --config problem.json --out DIR --seed N [--eps E] [--trials N] [--dt DT]
            [--horizon T] [--delta D] [--grid-h H] [--workers W]

Exit codes: 0 success, 2 invalid input, 3 numerical failure.  Every run
writes ``manifest.json`` and ``report.json`` plus command-specific CSV and
SVG files; JSON and CSV bytes depend only on the manifest and the seed.
"""
from __future__ import annotations

import argparse
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import action as act
from . import pde
from . import quasipotential as qpm
from . import simulate as sim
from .action import EigenError
from .model import ConfigError, EpsilonLadder, Problem, load_problem, problem_to_config, validate_model
from .report import ArtifactWriter, digest
from .switching import FlowDivergence, averaged_field, find_equilibrium

COMMANDS = ("validate", "simulate", "action", "quasipotential", "pde", "eigen", "verify", "ladder")


class InputError(ValueError):
    pass


NUMERICAL = (pde.ConvergenceError, EigenError, qpm.QuasipotentialError, sim.SimulationError,
             FlowDivergence, np.linalg.LinAlgError, ArithmeticError)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="exitlab", description="Exit problems for regime-switching diffusions.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, type=Path)
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--eps", type=float)
    ap.add_argument("--trials", type=int)
    ap.add_argument("--dt", type=float)
    ap.add_argument("--horizon", type=float)
    ap.add_argument("--delta", type=float)
    ap.add_argument("--grid-h", dest="grid_h", type=float)
    ap.add_argument("--workers", type=int, help="threads for Monte Carlo (results do not depend on it)")
    return ap


# -- shared helpers ---------------------------------------------------------------

def settings(problem: Problem, args) -> dict:
    """Effective run parameters: experiment section overridden by command-line flags."""
    ex = problem.experiment
    out = {
        "eps": ex.eps, "trials": ex.trials, "dt": ex.dt, "horizon": ex.horizon, "delta": ex.delta,
        "grid_h": ex.grid_h, "seed": ex.seed, "ladder": list(ex.ladder), "k0_mode": ex.k0_mode,
        "probes": ex.probes, "x0": ex.x0, "y0": ex.y0, "T_grid": [float(t) for t in ex.T_grid],
        "path_nodes": ex.path_nodes, "mesh_count": ex.mesh_count, "as1_threshold": ex.as1_threshold,
    }
    for key in ("eps", "trials", "dt", "horizon", "delta", "grid_h", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    if out["trials"] < 1:
        raise InputError("trials must be >= 1")
    if not out["dt"] > 0:
        raise InputError("dt must be positive")
    if not out["eps"] > 0:
        raise InputError("eps must be positive")
    if out["horizon"] is not None and not out["horizon"] > 0:
        raise InputError("horizon must be positive")
    if not out["grid_h"] > 0:
        raise InputError("grid-h must be positive")
    if out["delta"] is None or out["delta"] < 0:
        raise InputError("delta must be nonnegative")
    try:
        EpsilonLadder(out["ladder"])
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return out


def start_point(problem: Problem, s: dict) -> np.ndarray:
    if isinstance(s["x0"], str):
        if s["x0"] != "equilibrium":
            raise InputError("experiment.x0 must be 'equilibrium' or a point")
        x0 = find_equilibrium(problem.model, problem.domain.center)
    else:
        x0 = np.asarray(s["x0"], dtype=float).reshape(problem.domain.d)
    if not problem.domain.phi(x0) < 0:
        raise InputError(f"start point {x0.tolist()} is outside the domain")
    return x0


def default_horizon(problem: Problem, x0, eps: float, k0_mode: int, factor: float = 50.0,
                    h: float | None = None) -> float:
    """``factor`` times the mean exit time from ``(x0, k0_mode)`` predicted by the finite-difference solve."""
    if h is None:
        h = min(problem.domain.hi - problem.domain.lo) / 128
    grid = pde.Grid.build(problem.domain, h)
    T = pde.mean_exit_time(problem.model, problem.domain, grid, eps)
    t0 = float(T.at(np.asarray(x0)[None])[0, k0_mode - 1])
    return factor * max(t0, 1e-3)


def exit_prediction(problem: Problem, s: dict, x0) -> tuple[np.ndarray, int, qpm.QuasipotentialResult | None]:
    if s["y0"] is not None:
        y0 = problem.domain.project(np.asarray(s["y0"], dtype=float).reshape(problem.domain.d))
        return y0, qpm.verify_as2(problem.model, y0, problem.domain).k0, None
    qp = quasipotential(problem, s, x0)
    return qp.y0, qpm.verify_as2(problem.model, qp.y0, problem.domain).k0, qp


def quasipotential(problem: Problem, s: dict, x0) -> qpm.QuasipotentialResult:
    mesh = problem.domain.boundary_mesh(s["mesh_count"])
    return qpm.quasipotential_boundary(problem.model, problem.domain, x0, mesh, s["T_grid"], s["path_nodes"])


# -- commands -------------------------------------------------------------------------

def cmd_validate(problem, s, w, args):
    rep = validate_model(problem.model, problem.domain, seed=s["seed"], **problem.experiment.validation)
    w.json("report.json", {"command": "validate", "validation": rep.to_dict()})
    if not rep.ok:
        raise InputError("model violates the standing hypotheses; see report.json")


def cmd_simulate(problem, s, w, args):
    m, dom = problem.model, problem.domain
    x0 = start_point(problem, s)
    horizon = s["horizon"] or default_horizon(problem, x0, s["eps"], s["k0_mode"])
    y0 = None if s["y0"] is None else dom.project(np.asarray(s["y0"], dtype=float))
    stats = sim.run_monte_carlo(m, dom, s["eps"], x0, s["k0_mode"], s["dt"], horizon, s["trials"], s["seed"],
                                delta=s["delta"], y0_hint=y0, workers=args.workers or problem.experiment.workers,
                                mesh=dom.boundary_mesh(s["mesh_count"]))
    path = sim.simulate_path(m, dom, s["eps"], x0, s["k0_mode"], s["dt"], min(horizon, 200.0), s["seed"],
                             trial=s["trials"])
    w.json("report.json", {"command": "simulate", "statistics": stats.to_dict()})
    w.csv("survival.csv", stats.survival_csv())
    w.csv("histogram.csv", stats.histogram_csv())
    w.csv("path.csv", path.to_csv())
    w.svg("survival.svg", [(stats.time_grid, stats.survival, "P(tau > t)")], "Survival", "t", "P", logy=True)
    w.svg("path.svg", [(path.times, path.states[:, i], f"x{i + 1}") for i in range(m.d)]
          + [(path.times, path.modes, "mode")], "Sample path", "t", "")


def cmd_action(problem, s, w, args):
    m = problem.model
    x0 = start_point(problem, s)
    fav = averaged_field(m, x0)
    lam, gp, ga = act.eigen_and_grad(m, x0, np.zeros(m.d))
    start = x0 + 0.5 * (problem.domain.center - x0) if np.linalg.norm(fav) > 1e-9 else x0 + 0.25 * (
        problem.domain.hi - problem.domain.lo) / 2
    T = 5.0
    path = act.averaged_path(m, start, T, 200)
    S = act.path_action_S(m, path)
    I = act.path_action_I(m, path)
    q = fav + 0.5
    cons = act.eta_rho_consistency(m, x0, q)
    w.json("report.json", {"command": "action", "x0": x0, "lambda_at_zero": float(lam), "grad_p": gp, "grad_alpha": ga,
                           "averaged_path": {"start": start, "T": T, "segments": 200, "S": S, "I": I},
                           "consistency": cons})
    w.csv("averaged_path.csv", path.to_csv())


def cmd_quasipotential(problem, s, w, args):
    x0 = start_point(problem, s)
    qp = quasipotential(problem, s, x0)
    w.json("report.json", {"command": "quasipotential", "result": qp.to_dict()})
    w.csv("quasipotential.csv", qp.to_csv())
    w.csv("extremal_path.csv", qp.path.to_csv())
    w.svg("extremal_path.svg", [(qp.path.times, qp.path.nodes[:, i], f"phi{i + 1}") for i in range(problem.domain.d)],
          "Extremal path", "t", "")
    if not qp.converged:
        warnings.warn("some action minimizations stagnated", RuntimeWarning)


def cmd_pde(problem, s, w, args):
    m, dom = problem.model, problem.domain
    grid = pde.Grid.build(dom, s["grid_h"])
    sol = pde.solve_dirichlet(pde.discretize(m, dom, grid, s["eps"]), problem.boundary)
    probes = np.asarray(s["probes"], dtype=float).reshape(-1, dom.d)
    payload = {"command": "pde", "solution": sol.summary(),
               "probes": [{"x": p, "psi": v} for p, v in zip(probes, sol.at(probes))] if len(probes) else []}
    w.json("report.json", payload)
    w.csv("solution.csv", sol.to_csv())
    if dom.d == 1:
        w.svg("solution.svg", [(grid.points[:, 0], sol.values[:, k], f"psi{k + 1}") for k in range(m.n)],
              f"Dirichlet solution, eps={s['eps']:g}", "x", "psi")


def cmd_eigen(problem, s, w, args):
    m, dom = problem.model, problem.domain
    grid = pde.Grid.build(dom, s["grid_h"])
    out = {"command": "eigen", "eps": s["eps"], "modes": []}
    for k in range(1, m.n + 1):
        e = pde.principal_eigen(pde.discretize(m, dom, grid, s["eps"], mode=k))
        out["modes"].append({"mode": k, **e.to_dict()})
        w.csv(f"eigenfunction_mode{k}.csv", e.to_csv())
    if m.controls is not None:
        out["policy_iteration"] = []
        for k in range(1, m.n + 1):
            pol, trace, info = pde.policy_iteration_eigen(m, dom, grid, s["eps"], mode=k)
            const = [pde.constant_policy_eigen(m, dom, grid, s["eps"], k, c).lam
                     for c in range(len(m.controls.values[k - 1]))]
            out["policy_iteration"].append({"mode": k, "trace": trace, "lambda": min(trace),
                                            "constant_policy_lambdas": const, "converged": info["converged"],
                                            "monotone": info["monotone"]})
            w.csv(f"policy_mode{k}.csv", pol.to_csv())
            w.svg(f"policy_trace_mode{k}.svg", [(np.arange(len(trace)), trace, "lambda")],
                  "Policy iteration", "sweep", "lambda")
    w.json("report.json", out)


def cmd_verify(problem, s, w, args):
    x0 = start_point(problem, s)
    qp = quasipotential(problem, s, x0)
    as1 = qpm.verify_as1(problem.model, problem.domain, x0, qp.mesh, qp, threshold=s["as1_threshold"])
    as2 = qpm.verify_as2(problem.model, qp.y0, problem.domain)
    w.json("report.json", {"command": "verify", "verdict": as1["verdict"], "as1": as1, "as2": as2.to_dict(),
                           "quasipotential": qp.to_dict()})
    w.csv("quasipotential.csv", qp.to_csv())


def ladder_rows(problem: Problem, s: dict, workers: int = 1) -> dict:
    """One row per noise level: Monte Carlo concentration and exit mode, PDE distances, cross-check."""
    m, dom, bd = problem.model, problem.domain, problem.boundary
    x0 = start_point(problem, s)
    y0, k0, qp = exit_prediction(problem, s, x0)
    probes = np.asarray(s["probes"], dtype=float).reshape(-1, dom.d)
    grid = pde.Grid.build(dom, s["grid_h"])
    target = float(bd.g(k0, y0))
    rows = []
    for eps in s["ladder"]:
        row = {"eps": float(eps)}
        try:
            horizon = s["horizon"] or default_horizon(problem, x0, eps, s["k0_mode"])
            st = sim.run_monte_carlo(m, dom, eps, x0, s["k0_mode"], s["dt"], horizon, s["trials"], s["seed"],
                                     delta=s["delta"], y0_hint=y0, workers=workers)
            ex = st.trials.exited
            row.update({"horizon": horizon, "exit_fraction": st.exit_fraction,
                        "concentration": st.concentration, "concentration_exited": st.concentration_exited,
                        "concentration_se": st.concentration_se,
                        "mode_k0_frequency": float(st.mode_frequencies[k0 - 1]) if st.n_exited else None,
                        "mode_k0_se": math.sqrt(max(st.mode_frequencies[k0 - 1] * (1 - st.mode_frequencies[k0 - 1]),
                                                    0) / max(st.n_exited, 1)) if st.n_exited else None,
                        "mean_exit_time": st.mean_exit_time})
            sol = pde.solve_dirichlet(pde.discretize(m, dom, grid, eps), bd)
            if len(probes):
                psi = sol.at(probes)
                row["psi"] = psi
                row["distance"] = np.abs(psi - target)
            # Monte Carlo vs finite differences for E g_{zeta(tau)}(X(tau)) from (x0, k0_mode)
            if st.n_exited:
                gv = bd.values(st.trials.y[ex])[np.arange(st.n_exited), st.trials.mode[ex] - 1]
                mc, se = float(gv.mean()), float(gv.std(ddof=1) / math.sqrt(st.n_exited)) if st.n_exited > 1 else 0.0
                fd = float(sol.at(x0[None])[0, s["k0_mode"] - 1])
                row["cross_check"] = {"mc": mc, "mc_se": se, "pde": fd,
                                      "z": (mc - fd) / se if se > 0 else None}
            row["max_principle_ok"] = sol.max_principle_ok
        except NUMERICAL as exc:
            row["gap"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return {"x0": x0, "y0": y0, "k0": k0, "target": target, "rows": rows,
            "quasipotential": None if qp is None else qp.to_dict(), "probes": probes,
            "verdicts": ladder_verdicts(rows)}


def ladder_verdicts(rows: list, slack_se: float = 2.0, slack_psi: float = 0.02) -> dict:
    good = [r for r in rows if "gap" not in r]
    if len(good) < 2:
        return {"trend": None, "note": "fewer than two rungs; no trend verdict"}
    conc = [r["concentration"] for r in good]
    ses = [r["concentration_se"] or 0.0 for r in good]
    conc_mono = all(b >= a - slack_se * math.hypot(sa, sb) for a, b, sa, sb in zip(conc, conc[1:], ses, ses[1:]))
    last = good[-1]
    out = {"concentration_non_decreasing": conc_mono,
           "concentration_final": last["concentration"],
           "concentration_final_ge_0.9": bool(last["concentration"] is not None and last["concentration"] >= 0.9),
           "mode_k0_final": last["mode_k0_frequency"],
           "mode_k0_final_ge_0.9": bool(last["mode_k0_frequency"] is not None and last["mode_k0_frequency"] >= 0.9)}
    if "distance" in last:
        dist = np.array([r["distance"] for r in good])
        worst = float(np.max(np.diff(dist, axis=0)))
        out.update({"distance_non_increasing": bool(worst <= slack_psi), "distance_worst_increase": worst,
                    "distance_final_max": float(dist[-1].max()),
                    "distance_final_le_0.1": bool(dist[-1].max() <= 0.1)})
    return out


def cmd_ladder(problem, s, w, args):
    res = ladder_rows(problem, s, args.workers or problem.experiment.workers)
    w.json("report.json", {"command": "ladder", **res})
    lines = ["eps,exit_fraction,concentration,concentration_se,mode_k0_frequency,mean_exit_time"]
    for r in res["rows"]:
        if "gap" in r:
            lines.append(f"{r['eps']!r},gap,gap,gap,gap,gap")
            continue
        vals = [r["eps"], r["exit_fraction"], r["concentration"], r["concentration_se"],
                r["mode_k0_frequency"], r["mean_exit_time"]]
        lines.append(",".join("" if v is None else repr(float(v)) for v in vals))
    w.csv("ladder.csv", "\n".join(lines) + "\n")
    good = [r for r in res["rows"] if "gap" not in r]
    w.svg("ladder.svg", [([r["eps"] for r in good], [r["concentration"] for r in good], "concentration"),
                         ([r["eps"] for r in good], [r["mode_k0_frequency"] for r in good], "exit mode k0")],
          "Exit concentration along the ladder", "eps", "fraction")


HANDLERS = {"validate": cmd_validate, "simulate": cmd_simulate, "action": cmd_action,
            "quasipotential": cmd_quasipotential, "pde": cmd_pde, "eigen": cmd_eigen, "verify": cmd_verify,
            "ladder": cmd_ladder}


def run(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        problem = load_problem(args.config)
        s = settings(problem, args)
    except (ConfigError, InputError, OSError, ValueError) as exc:
        print(f"exitlab: invalid input: {exc}", file=sys.stderr)
        return 2
    manifest = {"command": args.command, "config": problem_to_config(problem), "config_path": str(args.config),
                "parameters": s}
    mhash = digest(manifest)
    try:
        w = ArtifactWriter(args.out, mhash, s["seed"])
        w.json("manifest.json", manifest)
    except OSError as exc:
        print(f"exitlab: cannot write to {args.out}: {exc}", file=sys.stderr)
        return 2
    try:
        HANDLERS[args.command](problem, s, w, args)
    except NUMERICAL as exc:
        print(f"exitlab: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, InputError, ValueError) as exc:
        print(f"exitlab: invalid input: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
