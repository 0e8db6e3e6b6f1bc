import numpy as np
import pytest
from scipy.io import mmread

from cutdg.forms import (
    Coefficients,
    FormsError,
    StabilizationConfig,
    assemble_advection_reaction,
    assemble_cut_mass,
    assemble_dual_form,
    assemble_ghost_face,
    assemble_ghost_volume,
    assemble_load,
    assemble_mass,
    assemble_symmetric_part,
    build_system,
    derived_scalars,
    dump_matrix,
    ghost_seminorm,
)
from cutdg.levelset import Circle, HalfPlane, Intersection
from cutdg.linalg import solve
from cutdg.mesh import build_background, classify_elements, extract_active
from cutdg.problems import flower, translated_circle, wavy
from cutdg.quadrature import QuadratureSet
from cutdg.space import BrokenSpace, FeFunction

EVERYWHERE = HalfPlane((1.0, 0.0), 1e9)
# Tilted band staying clear of the top and bottom of the unit box.  With a
# vertical velocity the left/right box edges are characteristic, so the
# partial-integration identities hold exactly on this affine geometry.
_BAND_N = (np.sin(0.25), np.cos(0.25))
AFFINE_BAND = Intersection(HalfPlane(_BAND_N, 0.75), HalfPlane((-_BAND_N[0], -_BAND_N[1]), -0.45))
BAND_B = (0.0, 1.0)


def const_coeffs(b=(0.8, 0.6), c=1.0):
    bv = np.asarray(b, dtype=float)
    return Coefficients(
        b=lambda p: np.broadcast_to(bv, (len(p), 2)),
        c=lambda p: np.full(len(p), c),
        f=lambda p, t=0.0: np.zeros(len(p)),
        g=lambda p, t=0.0: np.zeros(len(p)),
        jac_b=lambda p: np.zeros((len(p), 2, 2)),
    )


def setup(ls, n=4, kind="tri", family=None, degree=1, order=None, depth=2,
          box=(0, 1, 0, 1)):
    bg = build_background(box, n, n, kind)
    act = extract_active(bg, classify_elements(bg, ls))
    quads = QuadratureSet.build(act, ls, order or 2 * degree + 2, depth)
    family = family or ("P" if kind == "tri" else "Q")
    space = BrokenSpace(act, family, degree)
    return space, quads


def ah_oracle(space, coeffs, quads, u, v):
    """Evaluate the primal form at two discrete functions without assembly."""
    act = space.active
    bv = coeffs.velocity(quads.vol_x)
    cv = coeffs.reaction(quads.vol_x)
    ux = u.eval_many(quads.vol_elem, quads.vol_x, (1, 0))
    uy = u.eval_many(quads.vol_elem, quads.vol_x, (0, 1))
    uu = u.eval_many(quads.vol_elem, quads.vol_x)
    vv = v.eval_many(quads.vol_elem, quads.vol_x)
    val = np.sum(quads.vol_w * (bv[:, 0] * ux + bv[:, 1] * uy + cv * uu) * vv)

    if len(quads.if_x):
        bn = np.einsum("pk,pk->p", coeffs.velocity(quads.if_x), quads.if_n)
        m = bn < 0
        if m.any():
            ui = u.eval_many(quads.if_elem[m], quads.if_x[m])
            vi = v.eval_many(quads.if_elem[m], quads.if_x[m])
            val -= np.sum(quads.if_w[m] * bn[m] * ui * vi)

    if len(quads.fph_x):
        ids = quads.fph_face
        ep, em = act.face_elems[ids, 0], act.face_elems[ids, 1]
        bn = np.einsum("pk,pk->p", coeffs.velocity(quads.fph_x), act.face_normal[ids])
        ju = u.eval_many(ep, quads.fph_x) - u.eval_many(em, quads.fph_x)
        av = 0.5 * (v.eval_many(ep, quads.fph_x) + v.eval_many(em, quads.fph_x))
        jv = v.eval_many(ep, quads.fph_x) - v.eval_many(em, quads.fph_x)
        val += np.sum(quads.fph_w * (-bn * ju * av + 0.5 * np.abs(bn) * ju * jv))
    return val


# ---------------------------------------------------------------------------
# derived scalars


def test_derived_scalars_flower_constants():
    p = flower()
    space, quads = setup(p.level_set, n=8, box=p.box, degree=1)
    s = derived_scalars(p.coeffs, quads, space.active.bg.h)
    assert s.b_c == pytest.approx(1.0, abs=1e-12)
    assert s.tau_c == pytest.approx(1.0, abs=1e-12)
    assert s.c0 == pytest.approx(1.0, abs=1e-12)
    assert s.phi_b == pytest.approx(space.active.bg.h)


def test_derived_scalars_rejects_advection_inactive():
    space, quads = setup(EVERYWHERE)
    with pytest.raises(FormsError, match="advection-inactive"):
        derived_scalars(const_coeffs(b=(0.0, 0.0)), quads, 0.1)


def test_derived_scalars_rejects_nonpositive_c0():
    space, quads = setup(EVERYWHERE)
    with pytest.raises(FormsError, match="c0"):
        derived_scalars(const_coeffs(c=0.0), quads, 0.1)


def test_derived_scalars_wavy_against_dense_sampling():
    p = wavy()
    space, quads = setup(p.level_set, n=8, box=p.box, degree=1)
    s = derived_scalars(p.coeffs, quads, space.active.bg.h)
    rng = np.random.default_rng(0)
    pts = rng.uniform((-1, -1), (1, 1), size=(1_000_000, 2))
    pts = pts[p.level_set.value(pts) < 0]
    bc = np.linalg.norm(p.coeffs.velocity(pts), axis=1).max()
    b1 = np.abs(p.coeffs.jacobian(pts)).max()
    assert s.b_c == pytest.approx(bc, abs=1e-3)
    assert 1.0 / s.tau_c == pytest.approx(1.0 + b1, abs=1e-3)


# ---------------------------------------------------------------------------
# primal form


def test_constant_vector_identity_on_circle():
    # (1)' A (1) = c |Omega| + inflow measure = pi/16 + 2 r |b|.
    ls = Circle(radius=0.25)
    space, quads = setup(ls, n=10, kind="quad", degree=1, depth=4,
                         box=(-0.35, 0.35, -0.35, 0.35))
    a = assemble_advection_reaction(space, const_coeffs(), quads)
    ones = FeFunction(space, np.zeros(space.n_dofs)).space.elementwise_l2_project(
        lambda p: np.ones(len(p))
    )
    val = ones.coef @ (a @ ones.coef)
    assert val == pytest.approx(np.pi / 16 + 0.5, abs=2e-4)


def test_b_zero_isolates_cut_mass():
    # With the advection terms switched off the operator is the cut mass.
    space, quads = setup(Circle(center=(0.5, 0.5), radius=0.3), n=4)
    a = assemble_advection_reaction(space, const_coeffs(b=(0.0, 0.0)), quads)
    m = assemble_cut_mass(space, quads)
    assert abs(a - m).max() < 1e-14


def test_matrix_matches_form_oracle():
    space, quads = setup(Circle(center=(0.45, 0.55), radius=0.31), n=4, degree=1)
    coeffs = const_coeffs()
    a = assemble_advection_reaction(space, coeffs, quads)
    rng = np.random.default_rng(7)
    for _ in range(5):
        u = FeFunction(space, rng.standard_normal(space.n_dofs))
        v = FeFunction(space, rng.standard_normal(space.n_dofs))
        direct = ah_oracle(space, coeffs, quads, u, v)
        assembled = v.coef @ (a @ u.coef)
        assert assembled == pytest.approx(direct, rel=1e-12, abs=1e-12)


def test_primal_dual_identity_on_affine_cut():
    space, quads = setup(AFFINE_BAND, n=4, degree=1)
    coeffs = const_coeffs(b=BAND_B)
    a = assemble_advection_reaction(space, coeffs, quads)
    d = assemble_dual_form(space, coeffs, quads)
    assert abs(a - d).max() < 1e-10


def test_symmetric_combination_identity_on_affine_cut():
    # The dual assembly reproduces the primal matrix (same form, rewritten),
    # so the symmetric part equals the average of the primal matrix and the
    # transposed dual matrix.
    space, quads = setup(AFFINE_BAND, n=4, degree=2, depth=2)
    coeffs = const_coeffs(b=BAND_B)
    a = assemble_advection_reaction(space, coeffs, quads)
    d = assemble_dual_form(space, coeffs, quads)
    s = assemble_symmetric_part(space, coeffs, quads)
    assert abs(s - 0.5 * (a + d.T)).max() < 1e-10
    assert abs(s - s.T).max() < 1e-13 * abs(s).max()


def test_symmetric_part_volume_term_isolation():
    # With c = div b = 0 the volume contribution to the symmetric part is
    # identically zero: subtracting the c = 1 assembly isolates the cut mass.
    space, quads = setup(Circle(center=(0.5, 0.5), radius=0.31), n=4, degree=1)
    s0 = assemble_symmetric_part(space, const_coeffs(c=0.0), quads)
    s1 = assemble_symmetric_part(space, const_coeffs(c=1.0), quads)
    m = assemble_cut_mass(space, quads)
    assert abs((s1 - s0) - m).max() < 1e-13
    # A single active element has no faces and no boundary: everything is
    # volume, so the c = 0 symmetric part vanishes entirely.
    space1, quads1 = setup(EVERYWHERE, n=1, kind="quad", degree=1)
    s = assemble_symmetric_part(space1, const_coeffs(c=0.0), quads1)
    assert s.nnz == 0 or abs(s).max() < 1e-15


def test_coercivity_random_vectors_affine():
    # v'Av >= c0 ||v||^2 with constant coefficients; exact on affine cuts.
    space, quads = setup(AFFINE, n=4, degree=1)
    coeffs = const_coeffs()
    a = assemble_advection_reaction(space, coeffs, quads)
    scal = derived_scalars(coeffs, quads, space.active.bg.h)
    g = assemble_ghost_face(space, coeffs, quads, scal, StabilizationConfig())
    atot = a + g
    m = assemble_cut_mass(space, quads)
    rng = np.random.default_rng(42)
    for _ in range(100):
        v = rng.standard_normal(space.n_dofs)
        quad_a = v @ (atot @ v)
        quad_m = v @ (m @ v)
        assert quad_a >= scal.c0 * quad_m - 1e-10 * abs(quad_a)


def test_coercivity_random_vectors_curved():
    # On curved cuts the identity holds up to the geometric quadrature error.
    ls = Circle(radius=0.25)
    space, quads = setup(ls, n=10, kind="quad", degree=1, depth=4,
                         box=(-0.35, 0.35, -0.35, 0.35))
    coeffs = const_coeffs()
    a = assemble_advection_reaction(space, coeffs, quads)
    m = assemble_cut_mass(space, quads)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        v = rng.standard_normal(space.n_dofs)
        quad_a = v @ (a @ v)
        quad_m = v @ (m @ v)
        worst = max(worst, (quad_m - quad_a) / quad_m)
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# ghost penalties


def test_ghost_vanishes_on_global_polynomials():
    ls = Circle(radius=0.25)
    space, quads = setup(ls, n=10, kind="quad", family="Q", degree=2, depth=3,
                         box=(-0.35, 0.35, -0.35, 0.35))
    coeffs = const_coeffs()
    scal = derived_scalars(coeffs, quads, space.active.bg.h)
    fe = space.elementwise_l2_project(
        lambda p: 1.0 + p[:, 0] - 2 * p[:, 1] + p[:, 0] * p[:, 1] + p[:, 1] ** 2
    )
    for cfg in (
        StabilizationConfig(),
        StabilizationConfig(realization="unified"),
        StabilizationConfig(realization="volume"),
    ):
        if cfg.realization == "volume":
            g = assemble_ghost_volume(space, coeffs, quads, scal, cfg)
        else:
            g = assemble_ghost_face(space, coeffs, quads, scal, cfg)
        gnorm = abs(g).max()
        assert abs(fe.coef @ (g @ fe.coef)) < 1e-12 * gnorm * np.sum(fe.coef**2)


def test_unified_ghost_two_cell_value():
    # Two unit cells sharing one face; piecewise constant jump of one.
    bg = build_background((0, 2, 0, 1), 2, 1, "quad")
    ls = Circle(center=(1.0, 0.5), radius=10.0)  # both cells active, keep face ghostable
    cls = classify_elements(bg, ls)
    cls[:] = 1  # force both elements CUT so the shared face is a ghost face
    act = extract_active(bg, cls)
    quads = QuadratureSet.build(act, ls, 2, 1)
    space = BrokenSpace(act, "Q", 0)
    coeffs = const_coeffs(b=(1.0, 0.0), c=1.0)
    scal = derived_scalars(coeffs, quads, act.bg.h)
    gamma = 0.17
    cfg = StabilizationConfig(realization="unified", gamma=gamma)
    g = assemble_ghost_face(space, coeffs, quads, scal, cfg)
    v = np.array([1.0, 0.0])
    expected = gamma * (scal.c0 + scal.b_c / scal.h) * scal.h * 1.0  # face length 1
    assert v @ (g @ v) == pytest.approx(expected, rel=1e-12)
    assert ghost_seminorm(g, v) == pytest.approx(np.sqrt(expected), rel=1e-12)


def test_ghost_symmetric_positive_semidefinite():
    p = flower()
    space, quads = setup(p.level_set, n=8, box=p.box, degree=1)
    scal = derived_scalars(p.coeffs, quads, space.active.bg.h)
    for cfg in (StabilizationConfig(), StabilizationConfig(realization="unified"),
                StabilizationConfig(realization="volume")):
        if cfg.realization == "volume":
            g = assemble_ghost_volume(space, p.coeffs, quads, scal, cfg)
        else:
            g = assemble_ghost_face(space, p.coeffs, quads, scal, cfg)
        asym = abs(g - g.T).max()
        assert asym < 1e-13 * abs(g).max()
        eigs = np.linalg.eigvalsh(g.toarray())
        assert eigs.min() >= -1e-12 * abs(g).max()


def test_volume_ghost_constant_jump_value():
    bg = build_background((0, 2, 0, 1), 2, 1, "quad")
    cls = np.ones(2, dtype=np.uint8)  # both CUT
    act = extract_active(bg, cls)
    ls = Circle(center=(1.0, 0.5), radius=10.0)
    quads = QuadratureSet.build(act, ls, 2, 1)
    space = BrokenSpace(act, "Q", 0)
    coeffs = const_coeffs(c=1.0)
    scal = derived_scalars(coeffs, quads, act.bg.h)
    gamma_c = 0.21
    cfg = StabilizationConfig(realization="volume", gamma_c=gamma_c, gamma_b=0.0)
    g = assemble_ghost_volume(space, coeffs, quads, scal, cfg)
    v = np.array([1.0, 0.0])
    # Patch integral of the unit extension jump over both unit cells.
    assert v @ (g @ v) == pytest.approx(gamma_c * scal.c0 * 2.0, rel=1e-12)


def test_face_and_volume_stabilized_solutions_comparable():
    p = translated_circle((0.013, 0.029))
    errs = {}
    for realization in ("face", "volume"):
        from cutdg import analysis

        fe, ctx = analysis.solve_stationary(
            p, 10, degree=1, stab=StabilizationConfig(realization=realization)
        )
        errs[realization] = analysis.compute_errors(fe, ctx).l2
    ratio = errs["face"] / errs["volume"]
    assert 0.5 <= ratio <= 2.0


def test_ghost_seminorm_errors_on_indefinite_matrix():
    from scipy import sparse

    g = sparse.csr_matrix(np.array([[-1.0, 0.0], [0.0, 1.0]]))
    with pytest.raises(FormsError):
        ghost_seminorm(g, np.array([1.0, 0.0]))
    assert ghost_seminorm(g, np.zeros(2)) == 0.0


def test_weak_consistency_rate_of_projected_smooth_function():
    # |projection of u|_ghost must contract at order >= degree + 0.3.
    p = translated_circle()
    vals, hs = [], []
    for n in (8, 16, 32, 64):
        space, quads = setup(p.level_set, n=n, box=p.box, degree=1, depth=2)
        scal = derived_scalars(p.coeffs, quads, space.active.bg.h)
        g = assemble_ghost_face(space, p.coeffs, quads, scal, StabilizationConfig())
        fe = space.elementwise_l2_project(lambda q: p.exact(q))
        vals.append(ghost_seminorm(g, fe.coef))
        hs.append(space.active.bg.h)
    slope = np.polyfit(np.log(hs), np.log(vals), 1)[0]
    assert slope >= 1.3


# ---------------------------------------------------------------------------
# stabilized mass


def test_mass_on_uncut_mesh_is_block_diagonal_dg_mass():
    space, quads = setup(EVERYWHERE, n=3, degree=1)
    coeffs = const_coeffs()
    scal = derived_scalars(coeffs, quads, space.active.bg.h)
    m = assemble_mass(space, coeffs, quads, scal, StabilizationConfig())
    m_cut = assemble_cut_mass(space, quads)
    assert abs(m - m_cut).max() < 1e-14  # no ghost faces on an uncut mesh
    # Block diagonal: entries across elements vanish.
    dense = m.toarray()
    n_loc = space.n_local
    for e in range(space.active.n_active):
        sl = slice(e * n_loc, (e + 1) * n_loc)
        dense[sl, sl] = 0.0
    assert np.abs(dense).max() < 1e-15


def test_mass_constant_vector_gives_domain_area():
    ls = Circle(radius=0.25)
    space, quads = setup(ls, n=10, kind="quad", degree=1, depth=4,
                         box=(-0.35, 0.35, -0.35, 0.35))
    coeffs = const_coeffs()
    scal = derived_scalars(coeffs, quads, space.active.bg.h)
    m = assemble_mass(space, coeffs, quads, scal, StabilizationConfig())
    ones = space.elementwise_l2_project(lambda p: np.ones(len(p)))
    assert ones.coef @ (m @ ones.coef) == pytest.approx(np.pi / 16, abs=2e-4)


def test_stabilized_mass_lifts_smallest_eigenvalue():
    # Scan translations for the worst sliver cut; the ghost term must lift
    # the smallest eigenvalue by orders of magnitude there.
    worst = (np.inf, None)
    for k in range(40):
        shift = (k / 40) * np.array([0.07, 0.07])
        ls = Circle(radius=0.25).translated(shift)
        space, quads = setup(ls, n=10, kind="quad", degree=1, depth=3,
                             box=(-0.35, 0.35, -0.35, 0.35))
        m_cut = assemble_cut_mass(space, quads)
        lam = np.linalg.eigvalsh(m_cut.toarray()).min()
        if lam < worst[0]:
            worst = (lam, (space, quads))
    lam_cut, (space, quads) = worst
    coeffs = const_coeffs()
    scal = derived_scalars(coeffs, quads, space.active.bg.h)
    m_stab = assemble_mass(space, coeffs, quads, scal, StabilizationConfig())
    lam_stab = np.linalg.eigvalsh(m_stab.toarray()).min()
    assert lam_stab >= 100.0 * max(lam_cut, 1e-300)


# ---------------------------------------------------------------------------
# load vector and full system


def test_zero_data_gives_zero_load():
    space, quads = setup(Circle(center=(0.5, 0.5), radius=0.3), n=4)
    load = assemble_load(space, const_coeffs(), quads)
    assert np.abs(load).max() == 0.0


def test_constants_are_reproduced_exactly():
    # With f = c and g = 1 the constant one solves the discrete system.
    ls = Circle(radius=0.25)
    coeffs = const_coeffs()
    coeffs.f = lambda p, t=0.0: np.ones(len(p))
    coeffs.g = lambda p, t=0.0: np.ones(len(p))
    space, quads = setup(ls, n=10, kind="quad", degree=1, depth=3,
                         box=(-0.35, 0.35, -0.35, 0.35))
    sysm = build_system(space, coeffs, quads, StabilizationConfig())
    u = solve(sysm.A, sysm.load)
    ones = space.elementwise_l2_project(lambda p: np.ones(len(p)))
    assert np.abs(u - ones.coef).max() < 1e-9


def test_load_matches_per_basis_quadrature_oracle():
    p = flower()
    space, quads = setup(p.level_set, n=4, box=p.box, degree=1)
    load = assemble_load(space, p.coeffs, quads)
    # Direct per-dof quadrature loop.
    oracle = np.zeros(space.n_dofs)
    fv = p.coeffs.source(quads.vol_x, 0.0)
    for e in range(space.active.n_active):
        sel = quads.vol_elem == e
        basis = space.eval_many(quads.vol_elem[sel], quads.vol_x[sel])
        oracle[space.dofs[e]] += basis.T @ (quads.vol_w[sel] * fv[sel])
    bn = np.einsum("pk,pk->p", p.coeffs.velocity(quads.if_x), quads.if_n)
    gm = bn < 0
    gv = p.coeffs.inflow_value(quads.if_x[gm], 0.0)
    elems = quads.if_elem[gm]
    for e in np.unique(elems):
        sel = elems == e
        basis = space.eval_many(elems[sel], quads.if_x[gm][sel])
        oracle[space.dofs[e]] -= basis.T @ (quads.if_w[gm][sel] * bn[gm][sel] * gv[sel])
    assert np.abs(load - oracle).max() < 1e-12 * max(1.0, np.abs(load).max())


def test_matrix_market_roundtrip(tmp_path):
    space, quads = setup(Circle(center=(0.5, 0.5), radius=0.3), n=3)
    a = assemble_advection_reaction(space, const_coeffs(), quads)
    path = tmp_path / "op.mtx"
    dump_matrix(path, a)
    b = mmread(path).tocsr()
    assert abs(a - b).max() < 1e-12 * abs(a).max()
