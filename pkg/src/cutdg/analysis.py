"""Error norms, convergence studies, robustness scans and CSV reports.

The error metrics follow the stationary a priori theory: the L2 norm, the
upwind jump seminorm on faces clipped to the domain, the scaled streamline
derivative, weighted and plain boundary norms, a pointwise max, and the
extension-based flux seminorm over full faces used by the time-dependent
studies.  Scans re-run the assemble/solve/measure pipeline per translation
or penalty value and record failures as data instead of aborting.
"""

import math
from dataclasses import dataclass

import numpy as np

from cutdg.forms import StabilizationConfig, assemble_ghost, build_system, derived_scalars
from cutdg.linalg import Factorization, SolveError, condition_number, solve, stabilized_l2_projection
from cutdg.mesh import build_background, classify_elements, extract_active
from cutdg.quadrature import QuadratureSet
from cutdg.space import BrokenSpace, FeFunction
from cutdg.timestep import TimeConfig, evolve, transport_ode

__all__ = [
    "ErrorRow",
    "ScanRow",
    "SolveContext",
    "eoc",
    "discretize",
    "solve_stationary",
    "compute_errors",
    "included_elements",
    "converge_study",
    "translation_scan",
    "gamma_scan",
    "condition_vs_h",
    "evolve_study",
    "evolve_scan",
    "write_converge_csv",
    "write_scan_csv",
    "write_evolve_csv",
]


@dataclass(frozen=True)
class ErrorRow:
    h: float
    n_dofs: int
    l2: float
    up: float
    sd: float
    gw: float
    g: float
    linf: float
    b: float
    n_included: int = -1  # elements entering a restricted report; -1 = all


@dataclass(frozen=True)
class ScanRow:
    delta: float
    variant: str
    e_l2: float
    e_sd: float
    kappa: float
    status: str  # "ok" or "failed"


@dataclass
class SolveContext:
    problem: object
    active: object
    space: BrokenSpace
    quads: QuadratureSet
    system: object
    stab: StabilizationConfig


def eoc(errors, hs):
    """Experimental orders: log(E_{k-1}/E_k) / log(h_{k-1}/h_k); None where undefined."""
    out = [None]
    for k in range(1, len(errors)):
        ek, ep = errors[k], errors[k - 1]
        if ek is None or ep is None or ek <= 0.0 or ep <= 0.0:
            out.append(None)  # saturated or missing
        else:
            out.append(math.log(ep / ek) / math.log(hs[k - 1] / hs[k]))
    return out


def default_depth(degree):
    return 2 if degree <= 1 else 4


def discretize(problem, nx, *, ny=None, family=None, degree=1, stab=None, order=None,
               depth=None, with_mass=False):
    """Mesh, classify, build quadrature and assemble the full system."""
    stab = stab if stab is not None else StabilizationConfig()
    family = family or problem.default_family
    order = order if order else 2 * degree + 2
    depth = depth if depth else default_depth(degree)
    bg = build_background(problem.box, nx, ny or nx, kind=problem.mesh_kind)
    classes = classify_elements(bg, problem.level_set)
    active = extract_active(bg, classes)
    quads = QuadratureSet.build(active, problem.level_set, order, depth)
    space = BrokenSpace(active, family, degree)
    system = build_system(space, problem.coeffs, quads, stab, with_mass=with_mass)
    return SolveContext(problem, active, space, quads, system, stab)


def solve_stationary(problem, nx, **kw):
    ctx = discretize(problem, nx, **kw)
    coefs = solve(ctx.system.A, ctx.system.load)
    return FeFunction(ctx.space, coefs), ctx


def included_elements(ctx, delta):
    """Elements clear of the internal layer tube of half-width ``delta``.

    An element counts as included when all its vertices and volume quadrature
    points keep a layer-coordinate magnitude above ``delta``.
    """
    layer = ctx.problem.layer
    if layer is None:
        raise ValueError("problem has no layer coordinate")
    n = ctx.active.n_active
    if delta <= 0.0:
        return np.ones(n, dtype=bool)
    ok = np.ones(n, dtype=bool)
    verts = ctx.active.element_vertices()
    vflat = verts.reshape(-1, 2)
    vbad = (np.abs(layer(vflat)) <= delta).reshape(verts.shape[0], verts.shape[1])
    ok &= ~vbad.any(axis=1)
    qbad = np.abs(layer(ctx.quads.vol_x)) <= delta
    bad_ids = np.unique(ctx.quads.vol_elem[qbad])
    ok[bad_ids] = False
    return ok


def compute_errors(fe, ctx, t=0.0, include=None):
    """All error metrics for one discrete solution.

    ``include`` optionally restricts to an element mask; faces require both
    neighbors included.  Jumps of the error equal jumps of the discrete
    solution because the exact solution extends smoothly across faces.
    """
    problem, quads, active = ctx.problem, ctx.quads, ctx.active
    scal = ctx.system.scalars
    coeffs = problem.coeffs

    vol_sel = slice(None) if include is None else include[quads.vol_elem]
    ve, vx, vw = quads.vol_elem[vol_sel], quads.vol_x[vol_sel], quads.vol_w[vol_sel]
    n_inc = -1 if include is None else int(include.sum())

    uh = fe.eval_many(ve, vx)
    ue = problem.exact(vx, t)
    err = uh - ue
    e_l2 = math.sqrt(float(np.sum(vw * err**2)))
    e_inf = float(np.abs(err).max()) if len(err) else 0.0

    gx = fe.eval_many(ve, vx, (1, 0)) - problem.exact_grad(vx, t)[:, 0]
    gy = fe.eval_many(ve, vx, (0, 1)) - problem.exact_grad(vx, t)[:, 1]
    bv = coeffs.velocity(vx)
    stream = bv[:, 0] * gx + bv[:, 1] * gy
    e_sd = math.sqrt(float(scal.phi_b * np.sum(vw * stream**2)))

    fe_ids = active.face_elems

    def face_jump_sq(face_pts_ids, x, w):
        if include is not None:
            keep = include[fe_ids[face_pts_ids, 0]] & include[fe_ids[face_pts_ids, 1]]
            face_pts_ids, x, w = face_pts_ids[keep], x[keep], w[keep]
        if len(x) == 0:
            return 0.0
        up_v = fe.eval_many(fe_ids[face_pts_ids, 0], x)
        um_v = fe.eval_many(fe_ids[face_pts_ids, 1], x)
        bn = np.einsum("pk,pk->p", coeffs.velocity(x), active.face_normal[face_pts_ids])
        return float(np.sum(w * np.abs(bn) * (up_v - um_v) ** 2))

    e_up = math.sqrt(0.5 * face_jump_sq(quads.fph_face, quads.fph_x, quads.fph_w))

    if_sel = slice(None) if include is None else include[quads.if_elem]
    ie, ix, iw = quads.if_elem[if_sel], quads.if_x[if_sel], quads.if_w[if_sel]
    if len(ix):
        ei = fe.eval_many(ie, ix) - problem.exact(ix, t)
        bn = np.einsum("pk,pk->p", coeffs.velocity(ix), quads.if_n[if_sel])
        gw_sq = 0.5 * float(np.sum(iw * np.abs(bn) * ei**2))
        e_g = math.sqrt(float(np.sum(iw * ei**2)))
    else:
        gw_sq, e_g = 0.0, 0.0

    e_b = math.sqrt(gw_sq + 0.5 * face_jump_sq(quads.ffu_face, quads.ffu_x, quads.ffu_w))

    return ErrorRow(
        h=active.bg.h,
        n_dofs=fe.space.n_dofs,
        l2=e_l2,
        up=e_up,
        sd=e_sd,
        gw=math.sqrt(gw_sq),
        g=e_g,
        linf=e_inf,
        b=e_b,
        n_included=n_inc,
    )


def converge_study(problem, *, levels, base_nx=8, family=None, degree=1, stab=None,
                   order=None, depth=None, excluded_delta=None, progress=None):
    """Refinement study; optionally adds layer-excluded rows."""
    rows, xrows = [], []
    for k in range(levels):
        nx = base_nx * 2**k
        fe, ctx = solve_stationary(
            problem, nx, family=family, degree=degree, stab=stab, order=order, depth=depth
        )
        rows.append(compute_errors(fe, ctx))
        if excluded_delta is not None:
            mask = included_elements(ctx, excluded_delta)
            xrows.append(compute_errors(fe, ctx, include=mask))
        if progress:
            progress(k, rows[-1])
    return rows, xrows


# ---------------------------------------------------------------------------
# robustness scans

_SCAN_VARIANTS = ("full", "gc", "gb", "none")


def _scan_parts(problem_factory, shift, nx, *, family, degree, order, depth):
    """Assemble the pieces every variant shares at one translation."""
    problem = problem_factory(shift)
    ctx = discretize(
        problem, nx, family=family, degree=degree, order=order, depth=depth,
        stab=StabilizationConfig(realization="none"),
    )
    # Unit-parameter ghost parts: penalties are linear in their parameters,
    # so variants and gamma values reuse these two matrices.
    scal = ctx.system.scalars
    gc_unit = assemble_ghost(
        ctx.space, problem.coeffs, ctx.quads, scal,
        StabilizationConfig(realization="face", gamma_c=1.0, gamma_b=0.0),
    )
    gb_unit = assemble_ghost(
        ctx.space, problem.coeffs, ctx.quads, scal,
        StabilizationConfig(realization="face", gamma_c=0.0, gamma_b=1.0),
    )
    return ctx, gc_unit, gb_unit


def _measure(ctx, a_mat, *, want_errors, want_kappa, dense_threshold, seed):
    e_l2 = e_sd = float("nan")
    kappa = float("nan")
    status = "ok"
    if want_kappa:
        try:
            kappa = condition_number(a_mat, dense_threshold=dense_threshold, seed=seed)
        except SolveError:
            kappa = float("inf")
    if want_errors:
        try:
            coefs = solve(a_mat, ctx.system.load)
            fe = FeFunction(ctx.space, coefs)
            row = compute_errors(fe, ctx)
            e_l2, e_sd = row.l2, row.sd
        except SolveError:
            status = "failed"
    return e_l2, e_sd, kappa, status


def translation_scan(problem_factory, *, count=1000, nx=10, family="P", degree=1,
                     gamma=0.01, variants=_SCAN_VARIANTS, metrics="both", order=None,
                     depth=None, dense_threshold=4000, seed=0, direction=None,
                     kappa_variants=("full", "none"), progress=None):
    """Error/conditioning sensitivity over a family of translated domains.

    The geometry is shifted by delta * t with t the cell diagonal direction
    scaled to one cell per unit delta, so delta in (0, 1] sweeps one full
    period of cut configurations.
    """
    probe = problem_factory((0.0, 0.0))
    x0, x1 = probe.box[0], probe.box[1]
    h_s = (x1 - x0) / nx
    tvec = np.asarray(direction, dtype=float) if direction is not None else np.array([h_s, h_s])
    want_err = metrics in ("errors", "both")
    want_kap = metrics in ("condition", "both")

    rows = []
    for k in range(1, count + 1):
        delta = k / count
        ctx, gc, gb = _scan_parts(
            problem_factory, delta * tvec, nx,
            family=family, degree=degree, order=order, depth=depth,
        )
        parts = {"full": gc + gb, "gc": gc, "gb": gb, "none": None}
        for name in variants:
            a = ctx.system.A_adv if parts[name] is None else ctx.system.A_adv + gamma * parts[name]
            e_l2, e_sd, kappa, status = _measure(
                ctx, a.tocsr(), want_errors=want_err,
                want_kappa=want_kap and name in kappa_variants,
                dense_threshold=dense_threshold, seed=seed,
            )
            rows.append(ScanRow(delta, name, e_l2, e_sd, kappa, status))
        if progress and k % 100 == 0:
            progress(k, count)
    return rows


def gamma_scan(problem_factory, *, gammas=(1e-4, 1e-2, 1.0, 1e2), count=1000, nx=10,
               family="P", degree=1, order=None, depth=None, dense_threshold=4000,
               seed=0, progress=None):
    """Condition-number envelope over the translation scan per penalty size.

    All ghost parameters are rescaled simultaneously; gamma = 0 reduces to
    the unstabilized operator.
    """
    probe = problem_factory((0.0, 0.0))
    h_s = (probe.box[1] - probe.box[0]) / nx
    tvec = np.array([h_s, h_s])
    rows = []
    for k in range(1, count + 1):
        delta = k / count
        ctx, gc, gb = _scan_parts(
            problem_factory, delta * tvec, nx,
            family=family, degree=degree, order=order, depth=depth,
        )
        for gam in gammas:
            a = ctx.system.A_adv + gam * (gc + gb) if gam else ctx.system.A_adv
            try:
                kappa = condition_number(a.tocsr(), dense_threshold=dense_threshold, seed=seed)
            except SolveError:
                kappa = float("inf")
            rows.append(ScanRow(delta, f"gamma={gam:g}", float("nan"), float("nan"), kappa, "ok"))
        if progress and k % 100 == 0:
            progress(k, count)
    return rows


def summarize_gamma(rows):
    """Per-gamma max/min/mean of the condition number over the scan."""
    out = {}
    for r in rows:
        out.setdefault(r.variant, []).append(r.kappa)
    return {
        name: {
            "max": float(np.max(v)),
            "min": float(np.min(v)),
            "mean": float(np.mean(v)),
        }
        for name, v in out.items()
    }


def condition_vs_h(problem, *, levels=4, base_nx=10, family=None, degree=1, stab=None,
                   order=None, depth=None, dense_threshold=4000, seed=0):
    """Condition numbers on a refinement sequence plus the log-log slope."""
    kappas, hs = [], []
    for k in range(levels):
        ctx = discretize(
            problem, base_nx * 2**k, family=family, degree=degree, stab=stab,
            order=order, depth=depth,
        )
        kappas.append(
            condition_number(ctx.system.A, dense_threshold=dense_threshold, seed=seed)
        )
        hs.append(ctx.active.bg.h)
    slope = None
    if len(kappas) >= 2:
        slope = float(np.polyfit(np.log(1.0 / np.asarray(hs)), np.log(kappas), 1)[0])
    return kappas, hs, slope


# ---------------------------------------------------------------------------
# time-dependent studies


def _evolved_solution(problem, nx, *, degree, stab, scheme, cfl, order=None, depth=None,
                      t_end=1.0, rk3_literal=False, snapshot_times=(), snapshot_cb=None):
    from cutdg.forms import TimeLoad

    ctx = discretize(problem, nx, degree=degree, stab=stab, order=order, depth=depth,
                     with_mass=True)
    tl = TimeLoad(ctx.space, problem.coeffs, ctx.quads)
    sys = transport_ode(ctx.system.A, ctx.system.M, tl, tau_c=ctx.system.scalars.tau_c)
    proj = stabilized_l2_projection(ctx.system.M, problem.u0, ctx.space, ctx.quads)
    cfg = TimeConfig(
        t_end=t_end, cfl=cfl, scheme=scheme, literal_stage2=rk3_literal,
        snapshot_times=tuple(snapshot_times),
    )
    u_final, snaps = evolve(sys, proj.coef, cfg, h_s=ctx.active.bg.h_s, snapshot_cb=snapshot_cb)
    return FeFunction(ctx.space, u_final), ctx, cfg.step_size(ctx.active.bg.h_s), snaps


def evolve_study(problem_factory, *, levels, base_n=40, degree=0, scheme=None, cfl=0.1,
                 stab=None, t_end=1.0, order=None, depth=None, rk3_literal=False,
                 progress=None):
    """Simultaneous space/time refinement of the circular transport problem."""
    scheme = scheme or ("euler" if degree == 0 else "rk3")
    stab = stab if stab is not None else StabilizationConfig(realization="unified")
    rows, dts = [], []
    for k in range(levels):
        nx = base_n * 2**k
        fe, ctx, dt, _ = _evolved_solution(
            problem_factory(), nx, degree=degree, stab=stab, scheme=scheme, cfl=cfl,
            order=order, depth=depth, t_end=t_end, rk3_literal=rk3_literal,
        )
        rows.append(compute_errors(fe, ctx, t=t_end))
        dts.append(dt)
        if progress:
            progress(k, rows[-1])
    return rows, dts


def evolve_scan(problem_factory, *, count=1000, nx=25, degree=0, scheme=None, cfl=0.1,
                stab=None, t_end=1.0, order=None, depth=None, progress=None):
    """Final-time error sensitivity over centered domain translations.

    Shifts are (delta - 1/2) * (h, h) with delta = k/(count+1), matching the
    time-dependent robustness setup.
    """
    scheme = scheme or ("euler" if degree == 0 else "rk3")
    stab = stab if stab is not None else StabilizationConfig(realization="unified")
    probe = problem_factory((0.0, 0.0))
    h_s = (probe.box[1] - probe.box[0]) / nx
    h = math.sqrt(2.0) * h_s
    rows = []
    for k in range(1, count + 1):
        delta = k / (count + 1)
        shift = (delta - 0.5) * np.array([h, h])
        try:
            fe, ctx, _, _ = _evolved_solution(
                problem_factory(tuple(shift)), nx, degree=degree, stab=stab,
                scheme=scheme, cfl=cfl, order=order, depth=depth, t_end=t_end,
            )
            row = compute_errors(fe, ctx, t=t_end)
            rows.append(ScanRow(delta, "unified", row.l2, row.sd, float("nan"), "ok"))
        except SolveError:
            rows.append(
                ScanRow(delta, "unified", float("nan"), float("nan"), float("nan"), "failed")
            )
        if progress and k % 50 == 0:
            progress(k, count)
    return rows


# ---------------------------------------------------------------------------
# CSV reports (exact schemas; these files are the experiment contract)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return f"{v:.12g}" if isinstance(v, float) else str(v)


def write_converge_csv(path, rows):
    hs = [r.h for r in rows]
    cols = {
        "l2": [r.l2 for r in rows],
        "up": [r.up for r in rows],
        "sd": [r.sd for r in rows],
        "gw": [r.gw for r in rows],
        "g": [r.g for r in rows],
        "inf": [r.linf for r in rows],
    }
    eocs = {k: eoc(v, hs) for k, v in cols.items()}
    lines = ["level,h,N,e_l2,eoc_l2,e_up,eoc_up,e_sd,eoc_sd,e_gw,eoc_gw,e_g,eoc_g,e_inf,eoc_inf"]
    for k, r in enumerate(rows):
        parts = [str(k), _fmt(r.h), str(r.n_dofs)]
        for name in ("l2", "up", "sd", "gw", "g", "inf"):
            parts.append(_fmt(cols[name][k]))
            parts.append(_fmt(eocs[name][k]))
        lines.append(",".join(parts))
    _write(path, lines)


def write_scan_csv(path, rows):
    lines = ["delta,variant,e_l2,e_sd,kappa,status"]
    for r in rows:
        lines.append(
            ",".join(
                [_fmt(r.delta), r.variant, _fmt(r.e_l2), _fmt(r.e_sd), _fmt(r.kappa), r.status]
            )
        )
    _write(path, lines)


def write_evolve_csv(path, rows, dts):
    hs = [r.h for r in rows]
    e_l2 = eoc([r.l2 for r in rows], hs)
    e_b = eoc([r.b for r in rows], hs)
    lines = ["level,h,N,dt,e_l2,eoc_l2,e_b,eoc_b"]
    for k, r in enumerate(rows):
        lines.append(
            ",".join(
                [
                    str(k), _fmt(r.h), str(r.n_dofs), _fmt(dts[k]),
                    _fmt(r.l2), _fmt(e_l2[k]), _fmt(r.b), _fmt(e_b[k]),
                ]
            )
        )
    _write(path, lines)


def _write(path, lines):
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
