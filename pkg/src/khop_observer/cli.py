"""Command line: ``khop run``, ``khop verify-graph``, ``khop plot-data``.

Exit codes
  0  run finished with no funnel violations and no clamp events
  1  run finished with violations or clamp events (verify-graph: disconnected graph)
  2  config, schema or input-file error
  3  infeasible initialization (disagreement starts outside a funnel)
  4  integration produced a non-finite value
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_config, load_config, to_scenario
from .funnel import InfeasibleInitializationError
from .graph import MODES, analyze, is_connected, load_edge_list
from .sim import NonFiniteStateError, build_network, run

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NONFINITE = 0, 1, 2, 3, 4
OUT_ENV = "KHOP_OUT_DIR"

log = logging.getLogger("khop")


def _out_dir(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.output.dir:
        return Path(cfg.output.dir)
    return Path(os.environ.get(OUT_ENV, "runs")) / cfg.name


def cmd_run(args) -> int:
    try:
        cfg, base = load_config(args.config, args.set or (), args.profile)
        sc = to_scenario(cfg, base)
        net = build_network(sc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleInitializationError as exc:
        print(f"infeasible initialization: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE

    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml", base)
    try:
        traj = run(net)
    except NonFiniteStateError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    traj.write_csv(out / "trajectory.csv")
    traj.write_assertions(out / "assertions.csv")
    text = traj.summary()
    (out / "summary.txt").write_text(text)
    print(text, end="")
    print(f"wrote {out}/trajectory.csv, assertions.csv, summary.txt")
    return EXIT_OK if traj.funnel_satisfying else EXIT_VIOLATION


def cmd_verify_graph(args) -> int:
    try:
        g = load_edge_list(args.graph)
    except (OSError, ValueError) as exc:
        print(f"cannot read graph: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not is_connected(g):
        print(f"{args.graph}: graph with {g.node_count} nodes is NOT connected; "
              "disagreement matrices need not be positive definite")
        return EXIT_VIOLATION
    print(f"{args.graph}: {g.node_count} nodes, {len(g.edges)} edges, connected")
    agents = [args.agent] if args.agent else list(g.nodes)
    for mode in MODES:
        table = analyze(g, args.k, mode)
        print(f"\nmode={mode} k={args.k}")
        print(f"{'agent':>5} {'eta':>4} {'lambda_min':>12} {'lambda_max':>12}")
        for i in agents:
            eta, lo, hi = table[i]
            if eta == 0:
                print(f"{i:>5} {0:>4} {'-':>12} {'-':>12}")
            else:
                print(f"{i:>5} {eta:>4} {lo:>12.6f} {hi:>12.6f}")
    return EXIT_OK


def _parse_selection(sel, targets):
    """'agent4.state' -> [(4, 'state')]; empty -> every target with both channels."""
    if not sel:
        return [(t, ch) for t in targets for ch in ("state", "input")]
    out = []
    for item in sel:
        head, _, ch = item.partition(".")
        if not head.startswith("agent") or not head[5:].isdigit():
            raise ConfigError(f"selection {item!r} must look like agent<id>[.state|.input]")
        t = int(head[5:])
        if t not in targets:
            raise ConfigError(f"agent {t} is not estimated by anyone")
        if ch not in ("", "state", "input"):
            raise ConfigError(f"selection {item!r}: channel must be state or input")
        out += [(t, c) for c in ((ch,) if ch else ("state", "input"))]
    return out


def plot_series(traj_path, cfg_ref, selection=(), base=None):
    """Reduced series per selected (target, channel) with envelopes recomputed from the config."""
    traj_path = Path(traj_path)
    if not traj_path.exists():
        raise ConfigError(f"no trajectory at {traj_path}")
    header = traj_path.open().readline().strip().split(",")
    data = np.loadtxt(traj_path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(header):
        raise ConfigError(f"{traj_path}: {data.shape[1]} data columns for {len(header)} header names")
    col = {name: j for j, name in enumerate(header)}
    cfg, cbase = load_config(cfg_ref)
    net = build_network(to_scenario(cfg, base or cbase))
    sc = net.scenario
    t = data[:, col["t"]] if "t" in col else None
    if t is None:
        raise ConfigError(f"{traj_path}: missing column t")

    def need(name):
        if name not in col:
            raise ConfigError(f"{traj_path}: missing column {name}")
        return data[:, col[name]]

    names, series = ["t"], [t]
    for tgt, ch in _parse_selection(selection, sorted(net.matrices)):
        if ch == "input" and not sc.variant.uses_input:
            continue
        est, dis, bank_of = ("xhat", "xi", net.rho_banks) if ch == "state" else ("ghat", "mu", net.omega_banks)
        truth = "x" if ch == "state" else "g"
        err_abs, dis_abs = [], []
        for s in net.slot_rows(tgt):
            for c in range(1, s.dim + 1):
                err_abs.append(np.abs(need(f"a{s.estimator}.t{tgt}.{est}.{c}") - need(f"a{tgt}.self.{truth}.{c}")))
                dis_abs.append(np.abs(need(f"a{s.estimator}.t{tgt}.{dis}.{c}")))
        bank = bank_of[tgt]
        bound = sc.overrides.get(tgt, {}).get("delta" if ch == "state" else "theta",
                                              sc.delta if ch == "state" else sc.theta)
        inner = np.min(bank.values(t), axis=0)
        tag = f"agent{tgt}.{ch}"
        names += [f"{tag}.max_abs_error", f"{tag}.{'delta' if ch == 'state' else 'theta'}",
                  f"{tag}.max_abs_disagreement", f"{tag}.{'rho' if ch == 'state' else 'omega'}"]
        series += [np.max(err_abs, axis=0), bound.value(t), np.max(dis_abs, axis=0), inner]
    return names, np.column_stack(series), net


def consensus_series(traj_path, n_agents, dim):
    """Agent positions and the consensus-disagreement norm, straight from the trajectory."""
    header = Path(traj_path).open().readline().strip().split(",")
    data = np.loadtxt(traj_path, delimiter=",", skiprows=1, ndmin=2)
    col = {name: j for j, name in enumerate(header)}
    wanted = ["t"] + [f"a{i}.self.x.{c}" for i in range(1, n_agents + 1) for c in range(1, dim + 1)]
    wanted.append("net.all.consensus.norm")
    missing = [n for n in wanted if n not in col]
    if missing:
        raise ConfigError(f"{traj_path}: missing columns {', '.join(missing[:3])}")
    return wanted, data[:, [col[n] for n in wanted]]


def cmd_plot_data(args) -> int:
    traj = Path(args.trajectory)
    cfg_ref = args.config or str(traj.parent / "config.yaml")
    try:
        names, table, net = plot_series(traj, cfg_ref, args.select or ())
        dims = {a.dim for a in net.scenario.agents}
        cnames, ctable = consensus_series(traj, net.scenario.n_agents, dims.pop()) if len(dims) == 1 else ([], None)
    except ConfigError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleInitializationError as exc:
        print(f"infeasible initialization in config: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = Path(args.out) if args.out else traj.parent
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "plot_bounds.csv", table, delimiter=",", header=",".join(names), comments="", fmt="%.17g")
    written = ["plot_bounds.csv"]
    if ctable is not None:
        np.savetxt(out / "plot_consensus.csv", ctable, delimiter=",", header=",".join(cnames), comments="", fmt="%.17g")
        written.append("plot_consensus.csv")
    if args.svg:
        _render_svg(out / "plot_bounds.svg", names, table)
        written.append("plot_bounds.svg")
    print(f"wrote {', '.join(str(out / w) for w in written)}")
    return EXIT_OK


def _render_svg(path, names, table):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = sorted({n.rsplit(".", 1)[0] for n in names[1:]})
    fig, axes = plt.subplots(len(groups), 1, figsize=(6, 2.2 * len(groups)), squeeze=False, sharex=True)
    t = table[:, 0]
    for ax, grp in zip(axes[:, 0], groups):
        for j, n in enumerate(names):
            if n.startswith(grp + "."):
                dashed = n.rsplit(".", 1)[1] in ("delta", "theta", "rho", "omega")
                ax.semilogy(t, table[:, j], "--" if dashed else "-", label=n.rsplit(".", 1)[1])
        ax.set_ylabel(grp, fontsize=8)
        ax.legend(fontsize=6, loc="upper right")
    axes[-1, 0].set_xlabel("t [s]")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="khop", description="k-hop prescribed performance observers")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario and check every funnel")
    r.add_argument("--config", required=True, help="YAML file or bundled name (paper8, minimal, nodrift)")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
    r.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<name> or runs/<name>)")
    r.add_argument("--profile", choices=("paper", "desk"), help="paper: euler dt=1e-5; desk: rk4 dt=1e-4")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify-graph", help="connectivity and disagreement-matrix spectra")
    v.add_argument("graph", help="edge-list file")
    v.add_argument("--k", type=int, default=3)
    v.add_argument("--agent", type=int, help="report a single agent")
    v.set_defaults(func=cmd_verify_graph)

    d = sub.add_parser("plot-data", help="reduce a trajectory to error/disagreement series with envelopes")
    d.add_argument("trajectory", help="trajectory.csv written by run")
    d.add_argument("--config", help="scenario config (default: config.yaml next to the trajectory)")
    d.add_argument("--select", action="append", metavar="agent<i>[.state|.input]")
    d.add_argument("--out", help="output directory (default: the trajectory's directory)")
    d.add_argument("--svg", action="store_true", help="also render plot_bounds.svg (needs matplotlib)")
    d.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "verify-graph" and args.k < 2:
        print("k must be at least 2", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
