import numpy as np
import pytest

from cutdg.levelset import Circle, HalfPlane
from cutdg.mesh import build_background, classify_elements, extract_active
from cutdg.space import BrokenSpace, FeFunction, normal_derivative_jump

EVERYWHERE = HalfPlane((1.0, 0.0), 1e9)


def make_space(kind="tri", family="P", degree=1, n=4, box=(0, 1, 0, 1)):
    bg = build_background(box, n, n, kind)
    act = extract_active(bg, classify_elements(bg, EVERYWHERE))
    return BrokenSpace(act, family, degree)


def test_family_mesh_compatibility():
    with pytest.raises(ValueError):
        make_space(kind="quad", family="P")
    with pytest.raises(ValueError):
        make_space(kind="tri", family="Q")
    with pytest.raises(ValueError):
        make_space(kind="tri", family="P", degree=4)
    with pytest.raises(ValueError):
        make_space(kind="quad", family="Q", degree=3)


def test_dof_map_partitions():
    sp = make_space(degree=2)
    assert sp.dofs.shape == (sp.active.n_active, sp.n_local)
    flat = sp.dofs.ravel()
    assert len(np.unique(flat)) == sp.n_dofs
    assert flat.min() == 0 and flat.max() == sp.n_dofs - 1


def test_p0_constant_basis():
    sp = make_space(degree=0)
    pts = np.array([[0.1, 0.05], [0.2, 0.11]])
    vals = sp.eval_basis(0, pts, max_deriv=1)
    # Modal P0 is constant with zero gradient.
    assert np.ptp(vals[(0, 0)]) < 1e-14
    assert np.abs(vals[(1, 0)]).max() < 1e-14
    assert np.abs(vals[(0, 1)]).max() < 1e-14


def test_q_partition_of_unity():
    sp = make_space(kind="quad", family="Q", degree=2)
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 0.25, size=(20, 2))
    vals = sp.eval_basis(0, pts, max_deriv=1)
    assert np.abs(vals[(0, 0)].sum(axis=1) - 1.0).max() < 1e-13
    assert np.abs(vals[(1, 0)].sum(axis=1)).max() < 1e-12
    assert np.abs(vals[(0, 1)].sum(axis=1)).max() < 1e-12


def test_p_space_contains_constants():
    sp = make_space(degree=1)
    fe = sp.elementwise_l2_project(lambda p: np.ones(len(p)))
    pts = np.array([[0.53, 0.11], [0.99, 0.98]])
    elems = np.array([0, sp.active.n_active - 1])
    assert np.abs(fe.eval_many(elems, pts) - 1.0).max() < 1e-12


def test_p1_nodal_functions_at_centroid():
    # The projection of each barycentric hat of an element evaluates to 1/3
    # at the centroid, independent of the internal basis choice.
    sp = make_space(degree=1, n=1)
    verts = sp.active.element_vertices(np.array([0]))[0]
    centroid = verts.mean(axis=0, keepdims=True)
    mat = np.hstack([verts, np.ones((3, 1))])
    for k in range(3):
        cf = np.linalg.solve(mat, np.eye(3)[k])

        def hat(p, cf=cf):
            return cf[0] * p[:, 0] + cf[1] * p[:, 1] + cf[2]

        fe = sp.elementwise_l2_project(hat)
        assert fe.eval_many(np.array([0]), centroid)[0] == pytest.approx(1 / 3, abs=1e-12)


def test_q2_second_derivatives_match_finite_differences():
    sp = make_space(kind="quad", family="Q", degree=2, n=2)
    rng = np.random.default_rng(5)
    pts = rng.uniform(0.1, 0.4, size=(6, 2))
    h = 1e-5
    vals = sp.eval_basis(0, pts, max_deriv=2)
    for da, db, shift in (((2, 0), None, [h, 0]), ((0, 2), None, [0, h])):
        plus = sp.eval_basis(0, pts + shift, max_deriv=0)[(0, 0)]
        minus = sp.eval_basis(0, pts - shift, max_deriv=0)[(0, 0)]
        base = vals[(0, 0)]
        fd = (plus - 2 * base + minus) / h**2
        scale = np.abs(vals[da]).max()
        assert np.abs(vals[da] - fd).max() <= 1e-6 * max(scale, 1.0)
    # Mixed derivative via four-point stencil.
    pp = sp.eval_basis(0, pts + [h, h], 0)[(0, 0)]
    pm = sp.eval_basis(0, pts + [h, -h], 0)[(0, 0)]
    mp = sp.eval_basis(0, pts + [-h, h], 0)[(0, 0)]
    mm = sp.eval_basis(0, pts + [-h, -h], 0)[(0, 0)]
    fd = (pp - pm - mp + mm) / (4 * h * h)
    scale = max(np.abs(vals[(1, 1)]).max(), 1.0)
    assert np.abs(vals[(1, 1)] - fd).max() <= 1e-5 * scale


def test_derivatives_beyond_degree_vanish():
    sp = make_space(degree=1)
    pts = np.array([[0.1, 0.1]])
    vals = sp.eval_basis(0, pts, max_deriv=3)
    for key in ((2, 0), (1, 1), (0, 2), (3, 0), (0, 3)):
        assert np.abs(vals[key]).max() < 1e-14


def test_projection_reproduces_polynomials():
    for family, kind, degree in (("P", "tri", 2), ("Q", "quad", 2)):
        sp = make_space(kind=kind, family=family, degree=degree, n=3)

        def poly(p):
            return 0.3 - p[:, 0] + 2 * p[:, 1] + 0.5 * p[:, 0] * p[:, 1] + p[:, 1] ** 2

        fe = sp.elementwise_l2_project(poly)
        rng = np.random.default_rng(1)
        pts = rng.uniform(0, 1, size=(40, 2))
        # Evaluate each point inside its own element.
        cells = np.minimum((pts * 3).astype(int), 2)
        cell_ids = cells[:, 1] * 3 + cells[:, 0]
        elems = 2 * cell_ids if kind == "tri" else cell_ids
        vals = fe.eval_many(elems, pts)
        assert np.abs(vals - poly(pts)).max() < 1e-12


def test_projection_p0_is_centroid_value_of_linear():
    # Least squares of f(x) = x onto constants is the element mean of x.
    sp = make_space(degree=0, n=2)
    fe = sp.elementwise_l2_project(lambda p: p[:, 0])
    verts = sp.active.element_vertices(np.array([0]))[0]
    centroid_x = verts[:, 0].mean()
    assert fe.coef[sp.dofs[0, 0]] * sp.eval_basis(0, verts[:1], 0)[(0, 0)][0, 0] == pytest.approx(
        centroid_x, abs=1e-13
    )


def test_projection_idempotent():
    sp = make_space(degree=2, n=3)
    rng = np.random.default_rng(2)
    fe = FeFunction(sp, rng.standard_normal(sp.n_dofs))

    def broken_eval(p):
        cells = np.minimum((np.asarray(p) * 3).astype(int), 2)
        cell_ids = cells[:, 1] * 3 + cells[:, 0]
        lower = 2 * cell_ids
        frac = p * 3 - cells
        elems = np.where(frac[:, 1] <= frac[:, 0], lower, lower + 1)
        return fe.eval_many(elems, p)

    fe2 = sp.elementwise_l2_project(broken_eval)
    assert np.abs(fe2.coef - fe.coef).max() < 1e-11


def test_projection_refinement_rate():
    # Smooth target: error contracts at order degree + 1 under refinement.
    def f(p):
        return np.sin(np.pi * p[:, 0]) * np.cos(p[:, 1])

    for degree, expected in ((1, 2.0), (2, 3.0)):
        errs = []
        for n in (4, 8, 16):
            sp = make_space(degree=degree, n=n)
            fe = sp.elementwise_l2_project(f)
            quads_pts = np.random.default_rng(4).uniform(0, 1, size=(4000, 2))
            cells = np.minimum((quads_pts * n).astype(int), n - 1)
            cell_ids = cells[:, 1] * n + cells[:, 0]
            frac = quads_pts * n - cells
            elems = np.where(frac[:, 1] <= frac[:, 0], 2 * cell_ids, 2 * cell_ids + 1)
            errs.append(np.sqrt(np.mean((fe.eval_many(elems, quads_pts) - f(quads_pts)) ** 2)))
        rate = np.log(errs[0] / errs[2]) / np.log(4)
        assert rate > expected - 0.25


def test_evaluate_against_monomial_expansion():
    sp = make_space(degree=2, n=2)
    rng = np.random.default_rng(3)
    coefs = rng.standard_normal(6)

    def poly(p):
        x, y = p[:, 0], p[:, 1]
        return (
            coefs[0] + coefs[1] * x + coefs[2] * y
            + coefs[3] * x * x + coefs[4] * x * y + coefs[5] * y * y
        )

    fe = sp.elementwise_l2_project(poly)
    pts = rng.uniform(0, 0.49, size=(30, 2))
    vals = fe.evaluate(0, pts)
    assert np.abs(vals - poly(pts)).max() < 1e-12
    vals, grads = fe.evaluate(0, pts, with_gradient=True)
    gx = coefs[1] + 2 * coefs[3] * pts[:, 0] + coefs[4] * pts[:, 1]
    assert np.abs(grads[:, 0] - gx).max() < 1e-11


def test_zero_and_single_coefficient_evaluation():
    sp = make_space(degree=1, n=2)
    fe = FeFunction(sp, np.zeros(sp.n_dofs))
    pts = np.array([[0.2, 0.1]])
    assert fe.evaluate(0, pts)[0] == 0.0
    c = np.zeros(sp.n_dofs)
    c[sp.dofs[0, 1]] = 1.0
    fe = FeFunction(sp, c)
    basis = sp.eval_basis(0, pts, 0)[(0, 0)]
    assert fe.evaluate(0, pts)[0] == pytest.approx(basis[0, 1], abs=1e-14)


def test_normal_derivative_jump_values():
    sp = make_space(kind="quad", family="Q", degree=2, n=2)
    act = sp.active
    # Face 0 is vertical between elements 0 and 1 at x = 0.5.
    f = 0
    ep, em = act.face_elems[f]
    assert np.allclose(act.face_normal[f], [1, 0])
    pts = np.array([[0.5, 0.2], [0.5, 0.4]])

    # Globally continuous linear function: zero jump at order 0.
    fe = sp.elementwise_l2_project(lambda p: 1.0 + 2 * p[:, 0] - p[:, 1])
    j0 = normal_derivative_jump(sp, act.face_normal[f], 0, ep, em, fe.coef, pts)
    assert np.abs(j0).max() < 1e-12

    # v+ = x^2, v- = 0, n = (1, 0), order 2: jump is 1.
    coef = np.zeros(sp.n_dofs)
    fx2 = sp.elementwise_l2_project(lambda p: p[:, 0] ** 2)
    coef[sp.dofs[ep]] = fx2.coef[sp.dofs[ep]]
    j2 = normal_derivative_jump(sp, act.face_normal[f], 2, ep, em, coef, pts)
    assert np.abs(j2 - 1.0).max() < 1e-11

    # Orders beyond the degree vanish identically.
    j3 = normal_derivative_jump(sp, act.face_normal[f], 3, ep, em, fe.coef, pts)
    assert np.abs(j3).max() < 1e-13
