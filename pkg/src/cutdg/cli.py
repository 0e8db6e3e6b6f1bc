"""Command line entry point: every experiment as a reproducible subcommand.

Exit codes: 0 success, 2 configuration error, 3 solver failure outside
expected-failure scans.  CSV files are the output contract; SVG plots are
optional extras enabled with output.plots.
"""

import argparse
import json
import sys
from pathlib import Path

from cutdg import analysis, problems
from cutdg.config import ConfigError, load_config
from cutdg.forms import StabilizationConfig, dump_matrix
from cutdg.linalg import SolveError
from cutdg.mesh import MeshError, mesh_summary
from cutdg.timestep import TimeStepError

_COMMANDS = {}


def _command(name):
    def deco(fn):
        _COMMANDS[name] = fn
        return fn

    return deco


def _problem_from(cfg, shift=None):
    name = cfg.get("problem", "name")
    kw = {}
    if name == "wavy":
        kw = {"epsilon": cfg.get("problem", "epsilon"), "amplitude": cfg.get("problem", "amplitude")}
    if name in ("translated_circle", "time_circle") and shift is not None:
        kw["shift"] = tuple(shift)
    try:
        problem = problems.make(name, **kw)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    box = cfg.get("mesh", "box")
    if box:
        if len(box) != 4:
            raise ConfigError("mesh.box needs 4 values: x_min, x_max, y_min, y_max")
        problem.box = tuple(box)
    kind = cfg.get("mesh", "kind")
    if kind:
        problem.mesh_kind = kind
    return problem


def _stab_from(cfg):
    return StabilizationConfig(
        realization=cfg.get("stabilization", "realization"),
        gamma_c=cfg.get("stabilization", "gamma_c"),
        gamma_b=cfg.get("stabilization", "gamma_b"),
        gamma=cfg.get("stabilization", "gamma"),
        gamma_mass=cfg.get("stabilization", "gamma_mass"),
    )


def _common(cfg):
    degree = cfg.get("space", "degree")
    return {
        "degree": degree,
        "family": cfg.get("space", "family") or None,
        "order": cfg.get("quadrature", "order") or None,
        "depth": cfg.get("quadrature", "depth") or None,
    }


def _outdir(cfg, args):
    out = Path(args.out or cfg.get("output", "dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _maybe_plot_convergence(cfg, out, rows, name):
    if not cfg.get("output", "plots"):
        return
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    hs = [r.h for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, vals in (("L2", [r.l2 for r in rows]), ("upwind", [r.up for r in rows]),
                        ("streamline", [r.sd for r in rows])):
        if all(v > 0 for v in vals):
            ax.loglog(hs, vals, "o-", label=label)
    ax.set_xlabel("h")
    ax.set_ylabel("error")
    ax.legend()
    fig.savefig(out / f"{name}.svg")
    plt.close(fig)


@_command("mesh-info")
def _cmd_mesh_info(cfg, args):
    problem = _problem_from(cfg)
    ctx = analysis.discretize(problem, cfg.get("mesh", "nx"), ny=cfg.get("mesh", "ny") or None,
                              stab=_stab_from(cfg), **_common(cfg))
    out = _outdir(cfg, args)
    info = mesh_summary(ctx.active)
    (out / "mesh_info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(json.dumps(info, sort_keys=True))
    return 0


@_command("quadrature-check")
def _cmd_quadrature_check(cfg, args):
    problem = _problem_from(cfg)
    ctx = analysis.discretize(problem, cfg.get("mesh", "nx"), ny=cfg.get("mesh", "ny") or None,
                              stab=_stab_from(cfg), **_common(cfg))
    vol = ctx.quads.volume_sums(ctx.active.n_active)
    ifc = ctx.quads.interface_sums(ctx.active.n_active)
    out = _outdir(cfg, args)
    lines = ["element_id,class,vol_weight_sum,iface_weight_sum"]
    names = {0: "inside", 1: "cut"}
    for e in range(ctx.active.n_active):
        lines.append(
            f"{e},{names[int(ctx.active.classes[e])]},{vol[e]:.12g},{ifc[e]:.12g}"
        )
    (out / "quadrature_check.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'quadrature_check.csv'} ({ctx.active.n_active} elements)")
    return 0


def _levels_from(cfg, args):
    if args.levels:
        lo, _, hi = args.levels.partition("..")
        lo = int(lo)
        hi = int(hi) if hi else lo
        return lo, hi - lo + 1
    return 0, cfg.get("mesh", "levels")


@_command("converge")
def _cmd_converge(cfg, args):
    problem = _problem_from(cfg)
    start, levels = _levels_from(cfg, args)
    base_nx = cfg.get("mesh", "nx") * 2**start
    rows, _ = analysis.converge_study(
        problem, levels=levels, base_nx=base_nx, stab=_stab_from(cfg), **_common(cfg)
    )
    out = _outdir(cfg, args)
    analysis.write_converge_csv(out / "converge.csv", rows)
    _maybe_plot_convergence(cfg, out, rows, "converge")
    if cfg.get("output", "dump_matrix"):
        ctx = analysis.discretize(problem, base_nx, stab=_stab_from(cfg), **_common(cfg))
        dump_matrix(out / "system_matrix.mtx", ctx.system.A)
    print(f"wrote {out / 'converge.csv'}")
    return 0


@_command("converge-excluded")
def _cmd_converge_excluded(cfg, args):
    problem = _problem_from(cfg)
    if problem.layer is None:
        raise ConfigError("converge-excluded needs a problem with an internal layer")
    start, levels = _levels_from(cfg, args)
    delta = cfg.get("scan", "excluded_delta")
    rows, xrows = analysis.converge_study(
        problem, levels=levels, base_nx=cfg.get("mesh", "nx") * 2**start,
        stab=_stab_from(cfg), excluded_delta=delta, **_common(cfg)
    )
    out = _outdir(cfg, args)
    analysis.write_converge_csv(out / "converge.csv", rows)
    analysis.write_converge_csv(out / "converge_excluded.csv", xrows)
    print(f"wrote {out / 'converge.csv'} and {out / 'converge_excluded.csv'}")
    return 0


@_command("scan-translate")
def _cmd_scan_translate(cfg, args):
    name = cfg.get("problem", "name")
    count = cfg.get("scan", "count")
    out = _outdir(cfg, args)
    if name == "time_circle":
        rows = analysis.evolve_scan(
            problems.time_circle, count=count, nx=cfg.get("mesh", "nx"),
            degree=cfg.get("space", "degree"),
            scheme=cfg.get("time", "scheme") or None, cfl=cfg.get("time", "cfl"),
            stab=_stab_from(cfg), t_end=cfg.get("time", "t_end"),
            order=cfg.get("quadrature", "order") or None,
            depth=cfg.get("quadrature", "depth") or None,
        )
    else:
        rows = analysis.translation_scan(
            problems.translated_circle, count=count, nx=cfg.get("mesh", "nx"),
            family=cfg.get("space", "family") or "P", degree=cfg.get("space", "degree"),
            gamma=cfg.get("stabilization", "gamma_c"),
            variants=cfg.get("scan", "variants"),
            order=cfg.get("quadrature", "order") or None,
            depth=cfg.get("quadrature", "depth") or None,
            dense_threshold=cfg.get("solver", "dense_threshold"), seed=args.seed,
        )
    analysis.write_scan_csv(out / "scan.csv", rows)
    print(f"wrote {out / 'scan.csv'} ({len(rows)} rows)")
    return 0


@_command("scan-gamma")
def _cmd_scan_gamma(cfg, args):
    out = _outdir(cfg, args)
    rows = analysis.gamma_scan(
        problems.translated_circle, gammas=cfg.get("scan", "gammas"),
        count=cfg.get("scan", "count"), nx=cfg.get("mesh", "nx"),
        family=cfg.get("space", "family") or "P", degree=cfg.get("space", "degree"),
        order=cfg.get("quadrature", "order") or None,
        depth=cfg.get("quadrature", "depth") or None,
        dense_threshold=cfg.get("solver", "dense_threshold"), seed=args.seed,
    )
    analysis.write_scan_csv(out / "scan.csv", rows)
    summary = analysis.summarize_gamma(rows)
    (out / "gamma_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'scan.csv'} and {out / 'gamma_summary.json'}")
    return 0


@_command("scan-condition-h")
def _cmd_scan_condition_h(cfg, args):
    problem = _problem_from(cfg)
    start, levels = _levels_from(cfg, args)
    kappas, hs, slope = analysis.condition_vs_h(
        problem, levels=levels, base_nx=cfg.get("mesh", "nx") * 2**start,
        stab=_stab_from(cfg), dense_threshold=cfg.get("solver", "dense_threshold"),
        seed=args.seed, **_common(cfg)
    )
    out = _outdir(cfg, args)
    lines = ["level,h,kappa"]
    for k, (h, kap) in enumerate(zip(hs, kappas)):
        lines.append(f"{k},{h:.12g},{kap:.12g}")
    (out / "condition.csv").write_text("\n".join(lines) + "\n")
    payload = {"slope": slope}
    (out / "condition_slope.json").write_text(json.dumps(payload) + "\n")
    print(f"kappa slope vs 1/h: {slope}")
    return 0


@_command("evolve")
def _cmd_evolve(cfg, args):
    if cfg.get("problem", "name") != "time_circle":
        raise ConfigError("evolve requires problem.name = time_circle")
    start, levels = _levels_from(cfg, args)
    degree = cfg.get("space", "degree")
    out = _outdir(cfg, args)
    snap_times = cfg.get("time", "snapshots")

    snap_files = []

    rows, dts = [], []
    stab = _stab_from(cfg)
    scheme = cfg.get("time", "scheme") or None
    for k in range(levels):
        nx = cfg.get("mesh", "nx") * 2 ** (start + k)
        fe, ctx, dt, snaps = analysis._evolved_solution(
            problems.time_circle(), nx, degree=degree, stab=stab,
            scheme=scheme or ("euler" if degree == 0 else "rk3"),
            cfl=cfg.get("time", "cfl"), t_end=cfg.get("time", "t_end"),
            order=cfg.get("quadrature", "order") or None,
            depth=cfg.get("quadrature", "depth") or None,
            rk3_literal=cfg.get("time", "rk3_literal"),
            snapshot_times=snap_times,
        )
        rows.append(analysis.compute_errors(fe, ctx, t=cfg.get("time", "t_end")))
        dts.append(dt)
        for t_snap, state in snaps:
            fname = out / f"snapshot_level{start + k}_t{t_snap:g}.csv"
            _write_snapshot(fname, ctx.space, state)
            snap_files.append(fname)
    analysis.write_evolve_csv(out / "evolve.csv", rows, dts)
    print(f"wrote {out / 'evolve.csv'}" + (f" and {len(snap_files)} snapshots" if snap_files else ""))
    return 0


def _write_snapshot(path, space, state):
    lines = ["element_id,local_dof,coefficient"]
    for e in range(space.active.n_active):
        for k in range(space.n_local):
            lines.append(f"{e},{k},{state[space.dofs[e, k]]:.12g}")
    Path(path).write_text("\n".join(lines) + "\n")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="cutdg",
        description="Cut DG advection-reaction experiments on level-set geometries",
    )
    parser.add_argument("subcommand", choices=sorted(_COMMANDS))
    parser.add_argument("--config", type=str, default=None, help="path to a config file")
    parser.add_argument("--out", type=str, default=None, help="output directory override")
    parser.add_argument("--levels", type=str, default=None, help="level range, e.g. 0..4")
    parser.add_argument("--seed", type=int, default=0, help="seed for randomized estimators")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.subcommand](cfg, args)
    except (ConfigError, MeshError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SolveError, TimeStepError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
