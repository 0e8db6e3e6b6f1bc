"""Direct solves with residual certification, stabilized projection and
condition-number estimation."""

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

__all__ = [
    "SolveError",
    "Factorization",
    "solve",
    "stabilized_l2_projection",
    "condition_number",
]

_RESIDUAL_TOL = 1e-10
_REFINE_STEPS = 3


class SolveError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class Factorization:
    """Sparse LU factors reusable across right-hand sides.

    Every solve is certified: the residual must satisfy
    ||Ax - b|| <= tol * (||A|| ||x|| + ||b||) in the max norm, with up to
    three steps of iterative refinement before giving up.
    """

    def __init__(self, a):
        self.a = sparse.csr_matrix(a)
        if self.a.shape[0] != self.a.shape[1]:
            raise SolveError("operator must be square")
        self.norm = sparse.linalg.norm(self.a, np.inf) if self.a.nnz else 0.0
        try:
            self.lu = splu(self.a.tocsc())
        except RuntimeError as exc:
            raise SolveError(f"factorization failed: {exc}") from exc

    def _residual_ok(self, x, b, r):
        bound = _RESIDUAL_TOL * (
            self.norm * np.abs(x).max(initial=0.0) + np.abs(b).max(initial=0.0)
        )
        return np.abs(r).max(initial=0.0) <= max(bound, 1e-300)

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.a.shape[0]:
            raise SolveError("right-hand side length mismatch")
        x = self.lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise SolveError("solve produced non-finite values")
        r = b - self.a @ x
        for _ in range(_REFINE_STEPS):
            if self._residual_ok(x, b, r):
                return x
            x = x + self.lu.solve(r)
            r = b - self.a @ x
        if self._residual_ok(x, b, r):
            return x
        raise SolveError(
            f"solve failed certification: residual {np.abs(r).max():.3e}",
            residual=float(np.abs(r).max()),
        )

    def solve_transposed(self, b):
        return self.lu.solve(np.asarray(b, dtype=float), trans="T")


def solve(a, b):
    """One-shot certified solve."""
    return Factorization(a).solve(b)


def stabilized_l2_projection(mass, u0, space, quads):
    """Projection through the ghost-stabilized mass form.

    Solves M c = r with r_i = (u0, phi_i) over the cut domain.  The mass must
    be symmetric positive definite, which the stabilization guarantees on
    meshes with reasonable cut coverage.
    """
    from cutdg.space import FeFunction

    asym = abs(mass - mass.T)
    scale = np.abs(mass).max()
    if asym.nnz and asym.max() > 1e-12 * scale:
        raise SolveError("stabilized mass is not symmetric")
    if mass.diagonal().min() <= 0.0:
        raise SolveError("stabilized mass is not positive definite")

    rhs = np.zeros(space.n_dofs)
    b0 = space.eval_many(quads.vol_elem, quads.vol_x)
    vals = np.asarray(u0(quads.vol_x), dtype=float)
    np.add.at(rhs, space.dofs[quads.vol_elem], (quads.vol_w * vals)[:, None] * b0)
    return FeFunction(space, Factorization(mass).solve(rhs))


def _power_iteration(apply_op, n, tol, maxiter, rng):
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(maxiter):
        w = apply_op(v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        lam_new = float(v @ apply_op(v))
        if it > 2 and abs(lam_new - lam) <= tol * abs(lam_new):
            return lam_new
        lam = lam_new
    raise SolveError(
        f"power iteration did not converge in {maxiter} iterations (last {lam:.6e})"
    )


def condition_number(a, mode="auto", dense_threshold=4000, tol=1e-6, maxiter=10000, seed=0):
    """2-norm condition number of a sparse operator.

    Small systems use an exact dense SVD (removes estimator noise from
    robustness scans); larger ones use power iteration on A'A for the top
    singular value and inverse iteration through the LU factors for the
    smallest.
    """
    a = sparse.csr_matrix(a)
    n = a.shape[0]
    if mode not in ("auto", "dense", "iterative"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "dense" or (mode == "auto" and n <= dense_threshold):
        svals = np.linalg.svd(a.toarray(), compute_uv=False)
        smin = svals.min()
        if smin == 0.0:
            return np.inf
        return float(svals.max() / smin)

    rng = np.random.default_rng(seed)
    at = a.T.tocsr()
    smax2 = _power_iteration(lambda v: at @ (a @ v), n, tol, maxiter, rng)
    lu = Factorization(a)
    inv2 = _power_iteration(
        lambda v: lu.lu.solve(lu.solve_transposed(v)), n, tol, maxiter, rng
    )
    if inv2 <= 0.0:
        return np.inf
    return float(np.sqrt(smax2 * inv2))
