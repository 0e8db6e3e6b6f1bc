"""Assembly of the discrete advection-reaction forms and ghost penalties.

The full operator is the upwind DG form on the cut geometry plus a ghost
penalty acting on faces near the embedded boundary.  Ghost terms integrate
over full faces (not clipped to the domain): that is what supplies control on
the part of the active mesh outside the physical domain.  The stabilized mass
form adds a reaction-type face penalty scaled by the reference time.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from cutdg.quadrature import tensor_rule01, triangle_rule01

__all__ = [
    "Coefficients",
    "DerivedScalars",
    "StabilizationConfig",
    "AssembledSystem",
    "FormsError",
    "derived_scalars",
    "assemble_cut_mass",
    "assemble_advection_reaction",
    "assemble_dual_form",
    "assemble_symmetric_part",
    "assemble_ghost_face",
    "assemble_ghost_volume",
    "assemble_mass",
    "assemble_load",
    "build_system",
    "ghost_seminorm",
    "TimeLoad",
    "dump_matrix",
]


class FormsError(RuntimeError):
    pass


def _call_data(fn, pts, t):
    try:
        return np.asarray(fn(pts, t), dtype=float)
    except TypeError:
        return np.asarray(fn(pts), dtype=float)


@dataclass
class Coefficients:
    """Problem data: velocity, reaction, source and inflow values.

    ``b`` maps (n, 2) points to (n, 2) vectors; ``c`` to scalars.  ``f`` and
    ``g`` may take an optional time argument, with analytic time derivatives
    supplied for high-order time stepping when available.  ``jac_b`` returns
    the (n, 2, 2) velocity Jacobian and may be omitted for constant fields.
    """

    b: callable
    c: callable
    f: callable
    g: callable
    jac_b: callable = None
    f_t: callable = None
    f_tt: callable = None
    g_t: callable = None
    g_tt: callable = None
    # Optional separable representation f(x, t) = sum_k time_k(t) * space_k(x)
    # as tuples of (space_fn, time_fn) with time_fn(t, order); lets the time
    # stepper precompute one load vector per mode.
    f_modes: tuple = None
    g_modes: tuple = None

    def velocity(self, pts):
        return np.asarray(self.b(pts), dtype=float)

    def reaction(self, pts):
        v = np.asarray(self.c(pts), dtype=float)
        return np.broadcast_to(v, (len(pts),)) if v.ndim == 0 else v

    def jacobian(self, pts):
        if self.jac_b is None:
            return np.zeros((len(pts), 2, 2))
        return np.asarray(self.jac_b(pts), dtype=float)

    def div_b(self, pts):
        j = self.jacobian(pts)
        return j[:, 0, 0] + j[:, 1, 1]

    def source(self, pts, t=0.0):
        v = _call_data(self.f, pts, t)
        return np.broadcast_to(v, (len(pts),)) if v.ndim == 0 else v

    def inflow_value(self, pts, t=0.0):
        v = _call_data(self.g, pts, t)
        return np.broadcast_to(v, (len(pts),)) if v.ndim == 0 else v


@dataclass(frozen=True)
class DerivedScalars:
    """Reference scales of the problem on the current mesh."""

    b_c: float  # max |b|
    tau_c: float  # 1 / (max|c| + |b|_{1,inf})
    phi_b: float  # h / b_c
    c0: float  # min(c - div(b)/2), must be positive
    h: float


def derived_scalars(coeffs, quads, h):
    """Estimate the reference scales from all quadrature points."""
    pts = np.concatenate([quads.vol_x, quads.if_x]) if len(quads.if_x) else quads.vol_x
    if len(pts) == 0:
        raise FormsError("no quadrature points to sample coefficients on")
    bv = coeffs.velocity(pts)
    b_c = float(np.max(np.linalg.norm(bv, axis=1)))
    if b_c <= 0.0:
        raise FormsError("advection-inactive problem: max |b| = 0, phi_b undefined")
    cv = coeffs.reaction(pts)
    jac = coeffs.jacobian(pts)
    b1 = float(np.max(np.abs(jac)))
    c0 = float(np.min(cv - 0.5 * (jac[:, 0, 0] + jac[:, 1, 1])))
    if c0 <= 0.0:
        raise FormsError(f"coercivity constant c0 = {c0:g} is not positive")
    tau_c = 1.0 / (float(np.max(np.abs(cv))) + b1)
    if h > b_c * tau_c:
        warnings.warn(
            f"mesh not advection-resolved: h = {h:g} exceeds b_c*tau_c = {b_c * tau_c:g}",
            stacklevel=2,
        )
    return DerivedScalars(b_c=b_c, tau_c=tau_c, phi_b=h / b_c, c0=c0, h=h)


@dataclass(frozen=True)
class StabilizationConfig:
    """Ghost-penalty realization and parameters (all dimensionless)."""

    realization: str = "face"  # face | unified | volume | none
    gamma_c: float = 0.01
    gamma_b: float = 0.01
    gamma: float = 0.01
    gamma_mass: float = 0.01

    def __post_init__(self):
        if self.realization not in ("face", "unified", "volume", "none"):
            raise FormsError(f"unknown stabilization realization {self.realization!r}")
        for name in ("gamma_c", "gamma_b", "gamma", "gamma_mass"):
            if getattr(self, name) < 0.0:
                raise FormsError(f"{name} must be nonnegative")

    def scaled(self, factor):
        return StabilizationConfig(
            realization=self.realization,
            gamma_c=self.gamma_c * factor,
            gamma_b=self.gamma_b * factor,
            gamma=self.gamma * factor,
            gamma_mass=self.gamma_mass,
        )


# ---------------------------------------------------------------------------
# assembly helpers


def _weighted_blocks(w, btest, btrial, ids, n, chunk=2_000_000):
    """Accumulate sum_p w_p * btest_p (x) btrial_p into per-entity blocks."""
    r, c = btest.shape[1], btrial.shape[1]
    out = np.zeros(n * r * c)
    cols = np.arange(r * c)
    step = max(1, chunk // max(1, r * c))
    for s in range(0, len(w), step):
        sl = slice(s, min(s + step, len(w)))
        p = np.einsum("p,pi,pj->pij", w[sl], btest[sl], btrial[sl])
        idx = (ids[sl][:, None] * (r * c) + cols[None, :]).ravel()
        out += np.bincount(idx, weights=p.reshape(p.shape[0], -1).ravel(), minlength=n * r * c)
    return out.reshape(n, r, c)


class _Accumulator:
    def __init__(self, n):
        self.n = n
        self._rows = []
        self._cols = []
        self._vals = []

    def add_blocks(self, row_dofs, col_dofs, blocks):
        r, c = row_dofs.shape[1], col_dofs.shape[1]
        rows = np.broadcast_to(row_dofs[:, :, None], (len(row_dofs), r, c))
        cols = np.broadcast_to(col_dofs[:, None, :], (len(col_dofs), r, c))
        self._rows.append(rows.ravel())
        self._cols.append(cols.ravel())
        self._vals.append(np.ascontiguousarray(blocks).ravel())

    def tocsr(self):
        if not self._rows:
            return sparse.csr_matrix((self.n, self.n))
        m = sparse.coo_matrix(
            (
                np.concatenate(self._vals),
                (np.concatenate(self._rows), np.concatenate(self._cols)),
            ),
            shape=(self.n, self.n),
        )
        m.sum_duplicates()
        return m.tocsr()


def _face_dofs(space):
    fe = space.active.face_elems
    return np.hstack([space.dofs[fe[:, 0]], space.dofs[fe[:, 1]]])


def _face_traces(space, quads, deriv=(0, 0)):
    ids = quads.fph_face
    fe = space.active.face_elems
    bp = space.eval_many(fe[ids, 0], quads.fph_x, deriv)
    bm = space.eval_many(fe[ids, 1], quads.fph_x, deriv)
    return ids, bp, bm


# ---------------------------------------------------------------------------
# primal, dual and symmetric forms


def assemble_cut_mass(space, quads):
    """Mass matrix on the physical domain only (no ghost term)."""
    acc = _Accumulator(space.n_dofs)
    b0 = space.eval_many(quads.vol_elem, quads.vol_x)
    blocks = _weighted_blocks(quads.vol_w, b0, b0, quads.vol_elem, space.active.n_active)
    acc.add_blocks(space.dofs, space.dofs, blocks)
    return acc.tocsr()


def assemble_advection_reaction(space, coeffs, quads):
    """Upwind DG form: volume transport/reaction, inflow boundary, face flux."""
    active = space.active
    acc = _Accumulator(space.n_dofs)

    b0 = space.eval_many(quads.vol_elem, quads.vol_x)
    bx = space.eval_many(quads.vol_elem, quads.vol_x, (1, 0))
    by = space.eval_many(quads.vol_elem, quads.vol_x, (0, 1))
    bvec = coeffs.velocity(quads.vol_x)
    cvec = coeffs.reaction(quads.vol_x)
    trial = bvec[:, :1] * bx + bvec[:, 1:] * by + cvec[:, None] * b0
    blocks = _weighted_blocks(quads.vol_w, b0, trial, quads.vol_elem, active.n_active)
    acc.add_blocks(space.dofs, space.dofs, blocks)

    if len(quads.if_x):
        bn = np.einsum("pk,pk->p", coeffs.velocity(quads.if_x), quads.if_n)
        m = bn < 0.0
        if m.any():
            b0i = space.eval_many(quads.if_elem[m], quads.if_x[m])
            blocks = _weighted_blocks(
                -(quads.if_w[m] * bn[m]), b0i, b0i, quads.if_elem[m], active.n_active
            )
            acc.add_blocks(space.dofs, space.dofs, blocks)

    if len(quads.fph_x):
        ids, bp, bm = _face_traces(space, quads)
        nrm = active.face_normal[ids]
        bn = np.einsum("pk,pk->p", coeffs.velocity(quads.fph_x), nrm)
        jmp = np.hstack([bp, -bm])
        avg = 0.5 * np.hstack([bp, bm])
        blocks = _weighted_blocks(-quads.fph_w * bn, avg, jmp, ids, active.n_faces)
        blocks += _weighted_blocks(0.5 * quads.fph_w * np.abs(bn), jmp, jmp, ids, active.n_faces)
        acc.add_blocks(_face_dofs(space), _face_dofs(space), blocks)

    return acc.tocsr()


def assemble_dual_form(space, coeffs, quads):
    """Adjoint form obtained by elementwise partial integration.

    Equals the primal form up to the geometric quadrature error; used for
    invariant testing only.
    """
    active = space.active
    acc = _Accumulator(space.n_dofs)

    b0 = space.eval_many(quads.vol_elem, quads.vol_x)
    bx = space.eval_many(quads.vol_elem, quads.vol_x, (1, 0))
    by = space.eval_many(quads.vol_elem, quads.vol_x, (0, 1))
    bvec = coeffs.velocity(quads.vol_x)
    cvec = coeffs.reaction(quads.vol_x)
    divb = coeffs.div_b(quads.vol_x)
    test_conv = bvec[:, :1] * bx + bvec[:, 1:] * by
    blocks = _weighted_blocks(
        quads.vol_w * (cvec - divb), b0, b0, quads.vol_elem, active.n_active
    )
    blocks -= _weighted_blocks(quads.vol_w, test_conv, b0, quads.vol_elem, active.n_active)
    acc.add_blocks(space.dofs, space.dofs, blocks)

    if len(quads.if_x):
        bn = np.einsum("pk,pk->p", coeffs.velocity(quads.if_x), quads.if_n)
        m = bn > 0.0
        if m.any():
            b0i = space.eval_many(quads.if_elem[m], quads.if_x[m])
            blocks = _weighted_blocks(
                quads.if_w[m] * bn[m], b0i, b0i, quads.if_elem[m], active.n_active
            )
            acc.add_blocks(space.dofs, space.dofs, blocks)

    if len(quads.fph_x):
        ids, bp, bm = _face_traces(space, quads)
        nrm = active.face_normal[ids]
        bn = np.einsum("pk,pk->p", coeffs.velocity(quads.fph_x), nrm)
        jmp = np.hstack([bp, -bm])
        avg = 0.5 * np.hstack([bp, bm])
        blocks = _weighted_blocks(quads.fph_w * bn, jmp, avg, ids, active.n_faces)
        blocks += _weighted_blocks(0.5 * quads.fph_w * np.abs(bn), jmp, jmp, ids, active.n_faces)
        acc.add_blocks(_face_dofs(space), _face_dofs(space), blocks)

    return acc.tocsr()


def assemble_symmetric_part(space, coeffs, quads):
    """Symmetric part: reaction with half-divergence, boundary and upwind terms."""
    active = space.active
    acc = _Accumulator(space.n_dofs)

    b0 = space.eval_many(quads.vol_elem, quads.vol_x)
    cvec = coeffs.reaction(quads.vol_x)
    divb = coeffs.div_b(quads.vol_x)
    blocks = _weighted_blocks(
        quads.vol_w * (cvec - 0.5 * divb), b0, b0, quads.vol_elem, active.n_active
    )
    acc.add_blocks(space.dofs, space.dofs, blocks)

    if len(quads.if_x):
        bn = np.einsum("pk,pk->p", coeffs.velocity(quads.if_x), quads.if_n)
        b0i = space.eval_many(quads.if_elem, quads.if_x)
        blocks = _weighted_blocks(
            0.5 * quads.if_w * np.abs(bn), b0i, b0i, quads.if_elem, active.n_active
        )
        acc.add_blocks(space.dofs, space.dofs, blocks)

    if len(quads.fph_x):
        ids, bp, bm = _face_traces(space, quads)
        nrm = active.face_normal[ids]
        bn = np.einsum("pk,pk->p", coeffs.velocity(quads.fph_x), nrm)
        jmp = np.hstack([bp, -bm])
        blocks = _weighted_blocks(0.5 * quads.fph_w * np.abs(bn), jmp, jmp, ids, active.n_faces)
        acc.add_blocks(_face_dofs(space), _face_dofs(space), blocks)

    return acc.tocsr()


# ---------------------------------------------------------------------------
# ghost penalties


def _ghost_face_points(space, quads):
    active = space.active
    sel = active.ghost[quads.ffu_face]
    ids = quads.ffu_face[sel]
    return ids, quads.ffu_x[sel], quads.ffu_w[sel]


def _ghost_face_matrix(space, quads, jump_weights, b_mid=None):
    """Sum over derivative orders of weighted face-jump products.

    ``jump_weights[j]`` scales the order-j term.  With ``b_mid`` (per face)
    the jumps are of the advective derivative of the normal combinations.
    """
    active = space.active
    acc = _Accumulator(space.n_dofs)
    ids, x, w = _ghost_face_points(space, quads)
    if len(x) == 0:
        return acc.tocsr()
    fe = active.face_elems
    ep, em = fe[ids, 0], fe[ids, 1]
    nrm = active.face_normal[ids]
    bpts = None if b_mid is None else b_mid[ids]
    blocks = None
    for j, s in enumerate(jump_weights):
        if s == 0.0:
            continue
        tp = space.normal_trace(ep, x, nrm, j, b_at_pts=bpts)
        tm = space.normal_trace(em, x, nrm, j, b_at_pts=bpts)
        jmp = np.hstack([tp, -tm])
        blk = _weighted_blocks(s * w, jmp, jmp, ids, active.n_faces)
        blocks = blk if blocks is None else blocks + blk
    if blocks is None:
        return acc.tocsr()
    acc.add_blocks(_face_dofs(space), _face_dofs(space), blocks)
    return acc.tocsr()


def assemble_ghost_face(space, coeffs, quads, scal, config):
    """Face ghost penalty: split reaction/advection terms or the unified form."""
    p = space.degree
    h = scal.h
    hpow = np.array([h ** (2 * j + 1) for j in range(p + 1)])
    if config.realization == "unified":
        return _ghost_face_matrix(
            space, quads, config.gamma * (scal.c0 + scal.b_c / h) * hpow
        )
    g = _ghost_face_matrix(space, quads, config.gamma_c * scal.c0 * hpow)
    if config.gamma_b > 0.0 and p >= 1:
        mid = 0.5 * (space.active.face_p0 + space.active.face_p1)
        b_mid = coeffs.velocity(mid)
        g = g + _ghost_face_matrix(
            space, quads, config.gamma_b * scal.phi_b * hpow, b_mid=b_mid
        )
    return g


def _full_element_points(space, elems):
    """Standard full-element rule points for the given elements.

    Returns (pts, w) flattened per element with the shared per-element
    point count; weights carry the physical measure.
    """
    active = space.active
    bg = active.bg
    order = 2 * space.degree + 2
    if bg.kind == "quad":
        local, w = tensor_rule01(order)
    else:
        ref, wref = triangle_rule01(order)
    origins = active.element_origin(elems)
    scale = np.array([bg.hx, bg.hy])
    if bg.kind == "quad":
        pts = origins[:, None, :] + local[None, :, :] * scale
        wphys = np.broadcast_to(w * bg.hx * bg.hy, (len(elems), len(w)))
        return pts.reshape(-1, 2), wphys.ravel(), len(w)
    shapes = active.element_shape(elems)
    nq = len(wref)
    pts = np.empty((len(elems), nq, 2))
    for s, verts in ((0, [[0, 0], [1, 0], [1, 1]]), (1, [[0, 0], [1, 1], [0, 1]])):
        m = shapes == s
        if not m.any():
            continue
        v = np.asarray(verts, dtype=float)
        local = v[0] + np.outer(ref[:, 0], v[1] - v[0]) + np.outer(ref[:, 1], v[2] - v[0])
        pts[m] = origins[m][:, None, :] + local[None, :, :] * scale
    wphys = np.broadcast_to(wref * bg.hx * bg.hy, (len(elems), nq))
    return pts.reshape(-1, 2), wphys.ravel(), nq


def assemble_ghost_volume(space, coeffs, quads, scal, config):
    """Volume ghost penalty on two-element face patches.

    Penalizes the difference of the natural polynomial extensions over the
    full patch; the advective part uses the velocity at the patch centroid.
    """
    active = space.active
    acc = _Accumulator(space.n_dofs)
    gf = np.nonzero(active.ghost)[0]
    if gf.size == 0:
        return acc.tocsr()
    fe = active.face_elems
    ep, em = fe[gf, 0], fe[gf, 1]

    pts_p, w_p, nq = _full_element_points(space, ep)
    pts_m, w_m, _ = _full_element_points(space, em)
    pts = np.concatenate([pts_p, pts_m])
    w = np.concatenate([w_p, w_m])
    ids = np.concatenate([np.repeat(gf, nq), np.repeat(gf, nq)])
    elem_p = np.concatenate([np.repeat(ep, nq), np.repeat(ep, nq)])
    elem_m = np.concatenate([np.repeat(em, nq), np.repeat(em, nq)])

    b1 = space.eval_many(elem_p, pts)
    b2 = space.eval_many(elem_m, pts)
    jmp = np.hstack([b1, -b2])
    blocks = _weighted_blocks(config.gamma_c * scal.c0 * w, jmp, jmp, ids, active.n_faces)

    if config.gamma_b > 0.0 and space.degree >= 1:
        centr_p = active.element_origin(ep) + 0.5 * np.array([active.bg.hx, active.bg.hy])
        centr_m = active.element_origin(em) + 0.5 * np.array([active.bg.hx, active.bg.hy])
        bp = coeffs.velocity(0.5 * (centr_p + centr_m))
        bpts = np.concatenate([np.repeat(bp, nq, axis=0), np.repeat(bp, nq, axis=0)])
        g1x = space.eval_many(elem_p, pts, (1, 0))
        g1y = space.eval_many(elem_p, pts, (0, 1))
        g2x = space.eval_many(elem_m, pts, (1, 0))
        g2y = space.eval_many(elem_m, pts, (0, 1))
        a1 = bpts[:, :1] * g1x + bpts[:, 1:] * g1y
        a2 = bpts[:, :1] * g2x + bpts[:, 1:] * g2y
        jmpb = np.hstack([a1, -a2])
        blocks += _weighted_blocks(
            config.gamma_b * scal.phi_b * w, jmpb, jmpb, ids, active.n_faces
        )

    acc.add_blocks(_face_dofs(space), _face_dofs(space), blocks)
    return acc.tocsr()


def assemble_ghost(space, coeffs, quads, scal, config):
    if config.realization == "none":
        return sparse.csr_matrix((space.n_dofs, space.n_dofs))
    if config.realization == "volume":
        return assemble_ghost_volume(space, coeffs, quads, scal, config)
    return assemble_ghost_face(space, coeffs, quads, scal, config)


def assemble_mass(space, coeffs, quads, scal, config):
    """Stabilized mass: cut-domain inner product plus the face penalty g_m.

    g_m is the reaction-type face ghost with unit reaction scale times the
    reference time, so the reaction ghost equals g_m divided by that time.
    """
    m = assemble_cut_mass(space, quads)
    if config.realization == "none" or config.gamma_mass == 0.0:
        return m
    p = space.degree
    h = scal.h
    jw = np.array([config.gamma_mass * scal.tau_c * h ** (2 * j + 1) for j in range(p + 1)])
    return m + _ghost_face_matrix(space, quads, jw)


def _accumulate_vector(out, dofs, weights, basis):
    out += np.bincount(
        dofs.ravel(), weights=(weights[:, None] * basis).ravel(), minlength=len(out)
    )


def assemble_load(space, coeffs, quads, t=0.0):
    """Load vector: source over the cut volume minus the inflow flux of g."""
    out = np.zeros(space.n_dofs)
    if len(quads.vol_x):
        b0 = space.eval_many(quads.vol_elem, quads.vol_x)
        fv = coeffs.source(quads.vol_x, t)
        _accumulate_vector(out, space.dofs[quads.vol_elem], quads.vol_w * fv, b0)
    if len(quads.if_x):
        bn = np.einsum("pk,pk->p", coeffs.velocity(quads.if_x), quads.if_n)
        m = bn < 0.0
        if m.any():
            b0i = space.eval_many(quads.if_elem[m], quads.if_x[m])
            gv = coeffs.inflow_value(quads.if_x[m], t)
            _accumulate_vector(
                out, space.dofs[quads.if_elem[m]], -quads.if_w[m] * bn[m] * gv, b0i
            )
    return out


@dataclass
class AssembledSystem:
    """Operator, ghost part, load and (optionally) the stabilized mass."""

    A: sparse.csr_matrix
    G: sparse.csr_matrix
    load: np.ndarray
    scalars: DerivedScalars
    M: sparse.csr_matrix = None
    A_adv: sparse.csr_matrix = field(default=None, repr=False)


def build_system(space, coeffs, quads, config, h=None, with_mass=False, t=0.0):
    """Assemble the stationary system (and the stabilized mass on request)."""
    h = space.active.bg.h if h is None else h
    scal = derived_scalars(coeffs, quads, h)
    a_adv = assemble_advection_reaction(space, coeffs, quads)
    g = assemble_ghost(space, coeffs, quads, scal, config)
    load = assemble_load(space, coeffs, quads, t=t)
    m = assemble_mass(space, coeffs, quads, scal, config) if with_mass else None
    return AssembledSystem(A=a_adv + g, G=g, load=load, scalars=scal, M=m, A_adv=a_adv)


def ghost_seminorm(G, v):
    """|v|_g = sqrt(v' G v); raises if the quadratic form is not PSD-clean."""
    v = np.asarray(v, dtype=float)
    s = float(v @ (G @ v))
    gnorm = float(np.abs(G).sum(axis=1).max()) if G.nnz else 0.0
    if s < -1e-10 * gnorm * float(v @ v):
        raise FormsError(f"ghost quadratic form is negative: v'Gv = {s:g}")
    return np.sqrt(max(s, 0.0))


class TimeLoad:
    """Precomputed quadrature-to-dof maps for time-dependent load vectors.

    Generic data needs one sampling of f and g plus two sparse products per
    evaluation.  Data with a separable time representation collapses to a
    fixed vector per mode, so each evaluation is a short linear combination.
    """

    def __init__(self, space, coeffs, quads, chunk=200_000):
        self.coeffs = coeffs
        n = space.n_dofs

        self.vol_x = quads.vol_x
        bn = np.einsum("pk,pk->p", coeffs.velocity(quads.if_x), quads.if_n)
        m = bn < 0.0
        self.if_x = quads.if_x[m]
        if_elem = quads.if_elem[m]
        if_w = -quads.if_w[m] * bn[m]

        if coeffs.f_modes is not None and coeffs.g_modes is not None:
            vecs = [np.zeros(n) for _ in coeffs.f_modes] + [np.zeros(n) for _ in coeffs.g_modes]
            nf = len(coeffs.f_modes)
            for s in range(0, len(quads.vol_x), chunk):
                sl = slice(s, s + chunk)
                b0 = space.eval_many(quads.vol_elem[sl], quads.vol_x[sl])
                dofs = space.dofs[quads.vol_elem[sl]]
                for k, (spatial, _) in enumerate(coeffs.f_modes):
                    w = quads.vol_w[sl] * np.asarray(spatial(quads.vol_x[sl]), dtype=float)
                    _accumulate_vector(vecs[k], dofs, w, b0)
            if len(self.if_x):
                b0i = space.eval_many(if_elem, self.if_x)
                dofs = space.dofs[if_elem]
                for k, (spatial, _) in enumerate(coeffs.g_modes):
                    w = if_w * np.asarray(spatial(self.if_x), dtype=float)
                    _accumulate_vector(vecs[nf + k], dofs, w, b0i)
            times = [tf for _, tf in coeffs.f_modes] + [tf for _, tf in coeffs.g_modes]
            self._modes = list(zip(vecs, times))
            self.Qv = self.Qb = None
            return

        self._modes = None
        b0 = space.eval_many(quads.vol_elem, quads.vol_x)
        rows = space.dofs[quads.vol_elem].ravel()
        cols = np.repeat(np.arange(len(quads.vol_x)), space.n_local)
        vals = (quads.vol_w[:, None] * b0).ravel()
        self.Qv = sparse.csr_matrix((vals, (rows, cols)), shape=(n, len(quads.vol_x)))
        if len(self.if_x):
            b0i = space.eval_many(if_elem, self.if_x)
            rows = space.dofs[if_elem].ravel()
            cols = np.repeat(np.arange(len(self.if_x)), space.n_local)
            vals = (if_w[:, None] * b0i).ravel()
            self.Qb = sparse.csr_matrix((vals, (rows, cols)), shape=(n, len(self.if_x)))
        else:
            self.Qb = sparse.csr_matrix((n, 0))

    def _apply(self, f_fn, g_fn, t):
        out = self.Qv @ _call_data(f_fn, self.vol_x, t)
        if self.Qb.shape[1]:
            out = out + self.Qb @ _call_data(g_fn, self.if_x, t)
        return out

    def _combine(self, t, order):
        out = None
        for vec, timefn in self._modes:
            term = timefn(t, order) * vec
            out = term if out is None else out + term
        return out

    def vector(self, t):
        if self._modes is not None:
            return self._combine(t, 0)
        return self._apply(self.coeffs.f, self.coeffs.g, t)

    def vector_dt(self, t):
        if self._modes is not None:
            return self._combine(t, 1)
        if self.coeffs.f_t is None or self.coeffs.g_t is None:
            return None
        return self._apply(self.coeffs.f_t, self.coeffs.g_t, t)

    def vector_dtt(self, t):
        if self._modes is not None:
            return self._combine(t, 2)
        if self.coeffs.f_tt is None or self.coeffs.g_tt is None:
            return None
        return self._apply(self.coeffs.f_tt, self.coeffs.g_tt, t)


def dump_matrix(path, a):
    """Write a sparse matrix in MatrixMarket coordinate text format."""
    from scipy.io import mmwrite

    mmwrite(str(path), sparse.coo_matrix(a))
