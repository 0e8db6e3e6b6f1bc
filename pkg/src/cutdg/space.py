"""Broken polynomial spaces on the active mesh.

Triangles carry a modal basis orthonormalized on the reference shape (better
conditioned local solves than a nodal basis), quads carry tensor-product
Lagrange polynomials on Gauss-Lobatto points.  Every basis function is stored
as a bivariate monomial coefficient matrix in cell-local coordinates, so
derivatives of any order are exact.  DOF numbering is element-major.
"""

from dataclasses import dataclass
from math import factorial

import numpy as np
from numpy.polynomial import polynomial as npoly

__all__ = ["BrokenSpace", "FeFunction", "normal_derivative_jump"]

_GL_NODES = {0: (0.5,), 1: (0.0, 1.0), 2: (0.0, 0.5, 1.0)}


def _lagrange_coeffs(nodes):
    """Columns are monomial coefficients of the Lagrange basis on ``nodes``."""
    nodes = np.asarray(nodes, dtype=float)
    v = np.vander(nodes, increasing=True)
    return np.linalg.inv(v)


def _tri_monomial_moment(a, b, shape):
    """Integral of xi^a * eta^b over the local triangle of a split cell.

    shape 0 is the lower triangle {0 <= eta <= xi <= 1}, shape 1 the upper.
    """
    if shape == 0:
        return 1.0 / ((b + 1) * (a + b + 2))
    return 1.0 / ((a + 1) * (a + b + 2))


def _p_exponents(p):
    return [(i - j, j) for i in range(p + 1) for j in range(i + 1)]


def _build_p_basis(p, shape):
    """Orthonormal modal basis on the local triangle, as coefficient matrices."""
    exps = _p_exponents(p)
    n = len(exps)
    gram = np.empty((n, n))
    for r, (ar, br) in enumerate(exps):
        for c, (ac, bc) in enumerate(exps):
            gram[r, c] = _tri_monomial_moment(ar + ac, br + bc, shape)
    chol = np.linalg.cholesky(gram)
    inv = np.linalg.inv(chol)  # rows give the orthonormal combinations
    coef = np.zeros((n, p + 1, p + 1))
    for k in range(n):
        for m, (a, b) in enumerate(exps):
            coef[k, a, b] = inv[k, m]
    return coef


def _build_q_basis(p):
    c1 = _lagrange_coeffs(_GL_NODES[p])
    n1 = p + 1
    coef = np.zeros((n1 * n1, n1, n1))
    for a in range(n1):
        for b in range(n1):
            coef[a * n1 + b] = np.outer(c1[:, a], c1[:, b])
    return coef


class BrokenSpace:
    """Fully discontinuous piecewise polynomials on an active mesh."""

    def __init__(self, active, family, degree):
        family = family.upper()
        if family == "P":
            if active.bg.kind != "tri":
                raise ValueError("P spaces require a triangle-split mesh")
            if not 0 <= degree <= 3:
                raise ValueError("P degree must be in 0..3")
            self._coef = [_build_p_basis(degree, 0), _build_p_basis(degree, 1)]
        elif family == "Q":
            if active.bg.kind != "quad":
                raise ValueError("Q spaces require a quad mesh")
            if not 0 <= degree <= 2:
                raise ValueError("Q degree must be in 0..2")
            self._coef = [_build_q_basis(degree)]
        else:
            raise ValueError(f"unknown family {family!r}")

        self.active = active
        self.family = family
        self.degree = int(degree)
        self.n_local = self._coef[0].shape[0]
        self.n_dofs = active.n_active * self.n_local
        self.dofs = np.arange(self.n_dofs, dtype=np.int64).reshape(
            active.n_active, self.n_local
        )
        self._origins = active.element_origin()
        self._shapes = active.element_shape()
        self._hx = active.bg.hx
        self._hy = active.bg.hy
        self._dcache = {}

    def _dcoef(self, shape, a, b):
        key = (shape, a, b)
        if key not in self._dcache:
            c = self._coef[shape]
            parts = []
            for k in range(self.n_local):
                ck = c[k]
                if a:
                    ck = npoly.polyder(ck, m=a, axis=0)
                if b:
                    ck = npoly.polyder(ck, m=b, axis=1)
                parts.append(np.atleast_2d(ck))
            out = np.stack(parts)
            self._dcache[key] = out
        return self._dcache[key]

    def local_coords(self, elems, pts):
        o = self._origins[elems]
        return (pts[:, 0] - o[:, 0]) / self._hx, (pts[:, 1] - o[:, 1]) / self._hy

    def eval_many(self, elems, pts, deriv=(0, 0)):
        """Basis derivative values at flat points, shape (n_pts, n_local).

        ``elems`` are active-local element indices per point; points may lie
        outside the element (natural polynomial extension).
        """
        a, b = deriv
        elems = np.asarray(elems)
        pts = np.asarray(pts, dtype=float)
        xi, eta = self.local_coords(elems, pts)
        out = np.empty((len(pts), self.n_local))
        scale = self._hx ** (-a) * self._hy ** (-b)
        shapes = self._shapes[elems]
        for s in range(len(self._coef)):
            mask = shapes == s if len(self._coef) > 1 else slice(None)
            dc = self._dcoef(s, a, b)
            xs, ys = xi[mask], eta[mask]
            for k in range(self.n_local):
                out[mask, k] = npoly.polyval2d(xs, ys, dc[k])
        out *= scale
        return out

    def eval_basis(self, element, pts, max_deriv=0):
        """All partial derivatives up to ``max_deriv`` on one element.

        Returns a dict keyed by derivative multi-order (a, b); orders beyond
        the polynomial degree are permitted and return zeros.
        """
        pts = np.asarray(pts, dtype=float)
        elems = np.full(len(pts), element, dtype=np.int64)
        return {
            (a, j - a): self.eval_many(elems, pts, (a, j - a))
            for j in range(max_deriv + 1)
            for a in range(j, -1, -1)
        }

    def normal_trace(self, elems, pts, normals, j, b_at_pts=None):
        """Combination sum_{|alpha|=j} D^alpha v n^alpha / alpha! per basis function.

        With ``b_at_pts`` given, returns b . grad of that combination instead
        (used by the advective ghost penalty).
        """
        pts = np.asarray(pts, dtype=float)
        normals = np.asarray(normals, dtype=float)
        out = np.zeros((len(pts), self.n_local))
        for a in range(j + 1):
            b = j - a
            coef = (normals[:, 0] ** a) * (normals[:, 1] ** b) / (factorial(a) * factorial(b))
            if b_at_pts is None:
                out += coef[:, None] * self.eval_many(elems, pts, (a, b))
            else:
                gx = self.eval_many(elems, pts, (a + 1, b))
                gy = self.eval_many(elems, pts, (a, b + 1))
                out += coef[:, None] * (
                    b_at_pts[:, 0, None] * gx + b_at_pts[:, 1, None] * gy
                )
        return out

    def element_mass(self, shape):
        """Exact local mass matrix on the full element, physical measure."""
        det = self._hx * self._hy
        if self.family == "Q":
            pts, w = _tensor_rule_cached(2 * self.degree)
            b = self._eval_local(shape, pts)
            return det * np.einsum("p,pi,pj->ij", w, b, b)
        return det * np.eye(self.n_local)

    def _eval_local(self, shape, local_pts):
        out = np.empty((len(local_pts), self.n_local))
        c = self._coef[shape]
        for k in range(self.n_local):
            out[:, k] = npoly.polyval2d(local_pts[:, 0], local_pts[:, 1], c[k])
        return out

    def elementwise_l2_project(self, fn, order=None):
        """Least-squares fit of ``fn`` per full element (not clipped to the domain)."""
        from cutdg.quadrature import tensor_rule01, triangle_rule01

        order = 2 * self.degree + 2 if order is None else order
        if self.family == "Q":
            local, w = tensor_rule01(order)
            shapes = [0]
        else:
            ref, wref = triangle_rule01(order)
            shapes = [0, 1]

        coefvec = np.empty(self.n_dofs)
        scale = np.array([self._hx, self._hy])
        for s in shapes:
            if self.family == "Q":
                lpts, lw = local, w
            else:
                # Map the reference triangle onto the local shape.
                if s == 0:
                    v = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
                else:
                    v = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
                lpts = v[0] + np.outer(ref[:, 0], v[1] - v[0]) + np.outer(ref[:, 1], v[2] - v[0])
                lw = wref  # reference weights already sum to the local area 1/2
            sel = np.nonzero(self._shapes == s)[0] if len(shapes) > 1 else np.arange(
                self.active.n_active
            )
            if sel.size == 0:
                continue
            bvals = self._eval_local(s, lpts)
            mass = self._hx * self._hy * np.einsum("p,pi,pj->ij", lw, bvals, bvals)
            cond = np.linalg.cond(mass)
            if not np.isfinite(cond) or cond > 1e12:
                raise RuntimeError("singular local mass matrix: broken basis")
            pts = self._origins[sel][:, None, :] + lpts[None, :, :] * scale
            fvals = np.asarray(fn(pts.reshape(-1, 2)), dtype=float).reshape(sel.size, -1)
            rhs = self._hx * self._hy * np.einsum("p,ep,pk->ek", lw, fvals, bvals)
            coefvec[self.dofs[sel]] = rhs @ np.linalg.inv(mass).T
        return FeFunction(self, coefvec)


_TENSOR_CACHE = {}


def _tensor_rule_cached(order):
    if order not in _TENSOR_CACHE:
        from cutdg.quadrature import tensor_rule01

        _TENSOR_CACHE[order] = tensor_rule01(order)
    return _TENSOR_CACHE[order]


@dataclass
class FeFunction:
    """Coefficient vector over a broken space."""

    space: BrokenSpace
    coef: np.ndarray

    def eval_many(self, elems, pts, deriv=(0, 0)):
        b = self.space.eval_many(elems, pts, deriv)
        return np.einsum("pk,pk->p", b, self.coef[self.space.dofs[elems]])

    def evaluate(self, element, pts, with_gradient=False):
        """Values (and optionally gradients) on one active element."""
        pts = np.asarray(pts, dtype=float)
        elems = np.full(len(pts), element, dtype=np.int64)
        vals = self.eval_many(elems, pts)
        if not with_gradient:
            return vals
        gx = self.eval_many(elems, pts, (1, 0))
        gy = self.eval_many(elems, pts, (0, 1))
        return vals, np.stack([gx, gy], axis=-1)


def normal_derivative_jump(space, normal, j, elem_plus, elem_minus, coef, pts):
    """Jump of the j-th normal-derivative combination across a face.

    ``coef`` is a global coefficient vector; ``pts`` lie on the shared face.
    """
    pts = np.asarray(pts, dtype=float)
    normals = np.broadcast_to(np.asarray(normal, dtype=float), (len(pts), 2))
    ep = np.full(len(pts), elem_plus, dtype=np.int64)
    em = np.full(len(pts), elem_minus, dtype=np.int64)
    tp = space.normal_trace(ep, pts, normals, j)
    tm = space.normal_trace(em, pts, normals, j)
    vp = np.einsum("pk,pk->p", tp, coef[space.dofs[elem_plus]][None, :].repeat(len(pts), 0))
    vm = np.einsum("pk,pk->p", tm, coef[space.dofs[elem_minus]][None, :].repeat(len(pts), 0))
    return vp - vm
