"""Command-line front end: solve instances, compare scenarios, fit OD matrices.

Exit codes: 0 when every requested certificate was met, 1 on input or
validation errors, 2 when the budget ran out (best-so-far files are still
written).  All floats are serialized with 17 significant digits so files
round-trip exactly; identical config and seed give byte-identical output.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .dual import duality_gap, solve_assignment, solve_multistage
from .network import NetworkError, load_network
from .od import balancing_oracle, solve_entropy_od
from .softmin import hard_shortest, softmin_potentials, effective_weights

FLOAT_FMT = "%.17g"


def fmt(x) -> str:
    return FLOAT_FMT % float(x)


CONFIG_KEYS = {
    "model", "eps", "eps_residual", "gamma", "seed", "max_iter",
    "out", "trace", "verify", "dump_potentials", "hops",
}


def _load_config(path):
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _merge_config(args):
    """Config file supplies defaults; explicit flags win."""
    cfg = _load_config(args.config) if args.config else {}
    for key in CONFIG_KEYS:
        if not hasattr(args, key):
            continue
        if getattr(args, key) is None and key in cfg:
            setattr(args, key, cfg[key])
    if isinstance(args.gamma, dict):  # from config file: {"1": 0.5}
        args.gamma = [f"{k}={v}" for k, v in sorted(args.gamma.items())]
    return args


def _gamma_overrides(network, gamma_flags):
    gammas = list(network.gammas())
    for item in gamma_flags or []:
        level, _, value = item.partition("=")
        try:
            k = int(level)
            v = float(value)
        except ValueError:
            raise ValueError(f"bad gamma override {item!r}; expected level=value") from None
        if not 1 <= k <= network.n_levels:
            raise ValueError(f"gamma override for missing level {k}")
        gammas[k - 1] = v
    return gammas


def _out_dir(args):
    out = args.out or os.environ.get("EQUIFLOW_OUT") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_solution_csv(path, network, report):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# floats formatted %.17g\n")
        fh.write("level,edge,tail,head,t,flow,gap,multiplier\n")
        idx = 0
        for k, lg in enumerate(network.levels):
            for j, (tail, head, _) in enumerate(lg.plain_edges):
                fh.write(
                    f"{k + 1},{j},{tail},{head},{fmt(report.t[idx])},"
                    f"{fmt(report.flows.plain[k][j])},{fmt(report.per_edge_gap[idx])},"
                    f"{fmt(report.multipliers[idx])}\n"
                )
                idx += 1
            for j, (tail, head, od) in enumerate(lg.nested_edges):
                fh.write(
                    f"{k + 1},n{j},{tail},{head},,{fmt(report.flows.nested[k][j])},,\n"
                )


def _summary_dict(report):
    return {
        "model": report.model,
        "eps": fmt(report.eps),
        "eps_residual": fmt(report.eps_residual),
        "converged": report.converged,
        "iterations": report.solver.iterations,
        "value_calls": report.solver.value_calls,
        "grad_calls": report.solver.grad_calls,
        "total_gap": fmt(report.total_gap),
        "fw_gap": None if math.isnan(report.fw_gap) else fmt(report.fw_gap),
        "capacity_violation": fmt(report.capacity_violation),
        "complementarity": fmt(report.complementarity),
        "total_time": fmt(report.total_time),
        "gammas": [fmt(g) for g in report.gammas],
        "shortest_costs": {f"{o}->{d}": fmt(v) for (o, d), v in sorted(report.shortest_costs.items())},
    }


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_trace(path, report):
    rep = report.solver
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# floats formatted %.17g\n")
        fh.write("iter,value,lipschitz,gap\n")
        for i, v in enumerate(rep.value_trace):
            lip = rep.lipschitz_trace[i] if i < len(rep.lipschitz_trace) else math.nan
            gap = rep.gap_trace[i] if i < len(rep.gap_trace) else math.nan
            fh.write(f"{i},{fmt(v)},{fmt(lip)},{fmt(gap)}\n")


def _write_potentials(path, network, report):
    weights = effective_weights(network, report.t, report.gammas)
    lg = network.levels[0]
    gamma = report.gammas[0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# floats formatted %.17g\n")
        fh.write("origin,vertex,potential\n")
        for o in network.origins():
            if gamma > 0:
                u = softmin_potentials(lg, weights[0], o, gamma, lg.n_vertices - 1)
            else:
                u, _ = hard_shortest(lg, weights[0], o)
            for v in range(lg.n_vertices):
                fh.write(f"{o},{v},{fmt(u[v])}\n")


def _solve_one(instance, args):
    network = load_network(instance)
    gammas = _gamma_overrides(network, args.gamma)
    eps = args.eps if args.eps is not None else 1e-6
    eps_res = args.eps_residual
    max_iter = args.max_iter if args.max_iter is not None else 200000
    model = args.model or "beckmann"
    if network.n_levels > 1 or model == "multistage":
        report = solve_multistage(
            network, eps=eps, eps_residual=eps_res,
            gammas=gammas if args.gamma else None, max_iter=max_iter,
        )
    else:
        report = solve_assignment(
            network, model=model, eps=eps, eps_residual=eps_res,
            gammas=gammas if args.gamma else None, max_iter=max_iter,
            seed=args.seed or 0,
        )
    return network, report


def cmd_solve(args) -> int:
    network, report = _solve_one(args.instance, args)
    out = _out_dir(args)
    _write_solution_csv(os.path.join(out, "solution.csv"), network, report)
    _write_json(os.path.join(out, "summary.json"), _summary_dict(report))
    if args.trace:
        _write_trace(os.path.join(out, "trace.csv"), report)
    if args.dump_potentials:
        _write_potentials(os.path.join(out, "potentials.csv"), network, report)
    if args.verify:
        _, total = duality_gap(network, report.t, report.flows)
        ok = math.isclose(total, report.total_gap, rel_tol=1e-12, abs_tol=1e-15)
        print(f"verification {'PASS' if ok else 'FAIL'}: recomputed gap {fmt(total)}")
        if not ok:
            return 1
    print(f"{'certified' if report.converged else 'uncertified'} "
          f"gap={fmt(report.total_gap)} total_time={fmt(report.total_time)}")
    return 0 if report.converged else 2


def cmd_compare(args) -> int:
    rows = []
    od_sets = []
    all_ok = True
    for instance in args.instances:
        network, report = _solve_one(instance, args)
        od_sets.append(set(network.demands))
        name = os.path.splitext(os.path.basename(instance))[0]
        rows.append({
            "scenario": name,
            "total_time": report.total_time,
            "total_gap": report.total_gap,
            "converged": report.converged,
        })
        all_ok &= report.converged
    if any(s != od_sets[0] for s in od_sets[1:]):
        raise ValueError("scenarios do not share the same OD set")
    ranking = sorted(rows, key=lambda r: (r["total_time"], r["scenario"]))
    out = _out_dir(args)
    payload = {
        "scenarios": [
            {k: (fmt(v) if isinstance(v, float) else v) for k, v in r.items()}
            for r in rows
        ],
        "ranking": [r["scenario"] for r in ranking],
    }
    _write_json(os.path.join(out, "comparison.json"), payload)
    with open(os.path.join(out, "comparison.csv"), "w", encoding="utf-8") as fh:
        fh.write("# floats formatted %.17g\n")
        fh.write("rank,scenario,total_time,total_gap,converged\n")
        for rank, r in enumerate(ranking, start=1):
            fh.write(f"{rank},{r['scenario']},{fmt(r['total_time'])},"
                     f"{fmt(r['total_gap'])},{int(r['converged'])}\n")
    print("ranking: " + " < ".join(r["scenario"] for r in ranking))
    return 0 if all_ok else 2


def _read_cost_csv(path):
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            i, j, v = line.split(",")
            entries[(int(i), int(j))] = float(v)
    rows = sorted({i for i, _ in entries})
    cols = sorted({j for _, j in entries})
    T = np.empty((len(rows), len(cols)))
    for (i, j), v in entries.items():
        T[rows.index(i), cols.index(j)] = v
    return T


def _read_marginal_csv(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            i, v = line.split(",")
            values[int(i)] = float(v)
    return np.array([values[k] for k in sorted(values)])


def cmd_od(args) -> int:
    T = _read_cost_csv(args.costs)
    L = _read_marginal_csv(args.rows)
    W = _read_marginal_csv(args.cols)
    gamma = args.gamma_od if args.gamma_od is not None else 1.0
    eps = args.eps if args.eps is not None else 1e-8
    eps_res = args.eps_residual if args.eps_residual is not None else 1e-6
    sol = solve_entropy_od(
        L, W, T, gamma, eps=eps, eps_residual=eps_res,
        max_iter=args.max_iter if args.max_iter is not None else 100000,
    )
    out = _out_dir(args)
    with open(os.path.join(out, "matrix.csv"), "w", encoding="utf-8") as fh:
        fh.write("# floats formatted %.17g\n")
        fh.write("row,col,value\n")
        nr, nc = sol.matrix.shape
        for i in range(nr):
            for j in range(nc):
                fh.write(f"{i},{j},{fmt(sol.matrix[i, j])}\n")
    _write_json(os.path.join(out, "certificate.json"), {
        "gamma": fmt(sol.gamma),
        "gap": fmt(sol.gap),
        "residual": fmt(sol.residual),
        "converged": sol.converged,
        "iterations": sol.solver.iterations,
        "dropped_constraint": sol.extra["dropped_constraint"],
    })
    if args.verify:
        ref, ok = balancing_oracle(L, W, T, gamma)
        err = float(np.abs(ref - sol.matrix).max())
        passed = ok and err <= 1e-6
        print(f"verification {'PASS' if passed else 'FAIL'}: max deviation {fmt(err)}")
        if not passed:
            return 2
    print(f"{'certified' if sol.converged else 'uncertified'} "
          f"gap={fmt(sol.gap)} residual={fmt(sol.residual)}")
    return 0 if sol.converged else 2


def build_parser():
    parser = argparse.ArgumentParser(
        prog="equiflow",
        description="Equilibrium assignment and OD-matrix solvers with gap certificates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; explicit flags win")
        p.add_argument("--eps", type=float, default=None)
        p.add_argument("--eps-residual", dest="eps_residual", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--max-iter", dest="max_iter", type=int, default=None)
        p.add_argument("--trace", action="store_true", default=None)
        p.add_argument("--verify", action="store_true", default=None)
        p.add_argument("--out", default=None)

    p_solve = sub.add_parser("solve", help="solve one assignment instance")
    p_solve.add_argument("instance")
    p_solve.add_argument("--model", default=None,
                         choices=["beckmann", "beckmann_md", "stochastic",
                                  "stable_dynamics", "mixed", "multistage"])
    p_solve.add_argument("--gamma", action="append", metavar="LEVEL=VALUE", default=None)
    p_solve.add_argument("--dump-potentials", dest="dump_potentials",
                         action="store_true", default=None)
    common(p_solve)
    p_solve.set_defaults(func=cmd_solve)

    p_cmp = sub.add_parser("compare", help="solve and rank several scenarios")
    p_cmp.add_argument("instances", nargs="+")
    p_cmp.add_argument("--model", default=None,
                       choices=["beckmann", "beckmann_md", "stochastic",
                                "stable_dynamics", "mixed", "multistage"])
    p_cmp.add_argument("--gamma", action="append", metavar="LEVEL=VALUE", default=None)
    common(p_cmp)
    p_cmp.set_defaults(func=cmd_compare)

    p_od = sub.add_parser("od", help="entropy OD-matrix fit from marginals and costs")
    p_od.add_argument("costs", help="CSV of row,col,cost")
    p_od.add_argument("rows", help="CSV of zone,marginal (row sums)")
    p_od.add_argument("cols", help="CSV of zone,marginal (column sums)")
    p_od.add_argument("--gamma", dest="gamma_od", type=float, default=None)
    common(p_od)
    p_od.set_defaults(func=cmd_od)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "gamma"):
        args.gamma = None
    if not hasattr(args, "dump_potentials"):
        args.dump_potentials = None
    if not hasattr(args, "model"):
        args.model = None
    try:
        args = _merge_config(args)
        return args.func(args)
    except (NetworkError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
