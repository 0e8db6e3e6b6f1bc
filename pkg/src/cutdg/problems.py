"""Built-in test problems: geometry, coefficients and exact solutions.

Every registry entry carries the analytic solution and its gradient (defined
globally, so the natural extension beyond the domain is free), the matching
source and inflow data, and for the time-dependent case the first two time
derivatives of the data.  ``residual_check`` verifies each entry against the
strong equation with finite-difference gradients, which keeps the data and
gradient code paths honest against each other.
"""

from dataclasses import dataclass

import numpy as np

from cutdg.forms import Coefficients
from cutdg.levelset import Circle, Flower, WavyBand

__all__ = ["Problem", "flower", "wavy", "translated_circle", "time_circle", "make", "residual_check"]


@dataclass
class Problem:
    name: str
    level_set: object
    box: tuple
    mesh_kind: str
    coeffs: Coefficients
    exact: callable  # u(pts, t=0)
    exact_grad: callable  # grad u(pts, t=0), shape (n, 2)
    time_dependent: bool = False
    layer: callable = None  # signed tube coordinate of an internal layer
    u0: callable = None

    @property
    def default_family(self):
        return "P" if self.mesh_kind == "tri" else "Q"


def _const_vec(v):
    v = np.asarray(v, dtype=float)

    def field(pts):
        return np.broadcast_to(v, (len(pts), 2))

    return field


def _zero_jac(pts):
    return np.zeros((len(pts), 2, 2))


def flower():
    """Smooth manufactured solution on a five-petal star, constant velocity."""

    def u(pts, t=0.0):
        x, y = pts[:, 0], pts[:, 1]
        return 1.0 + np.sin(np.pi * (1.0 + x) * (1.0 + y) ** 2 / 8.0)

    def grad_u(pts, t=0.0):
        x, y = pts[:, 0], pts[:, 1]
        arg = np.pi * (1.0 + x) * (1.0 + y) ** 2 / 8.0
        cx = np.cos(arg) * np.pi / 8.0
        return np.stack([cx * (1.0 + y) ** 2, cx * 2.0 * (1.0 + x) * (1.0 + y)], axis=-1)

    bvec = (0.8, 0.6)

    def f(pts, t=0.0):
        g = grad_u(pts)
        return bvec[0] * g[:, 0] + bvec[1] * g[:, 1] + u(pts)

    coeffs = Coefficients(
        b=_const_vec(bvec), c=lambda pts: np.ones(len(pts)), f=f, g=u, jac_b=_zero_jac
    )
    return Problem(
        name="flower",
        level_set=Flower(0.5, 0.15),
        box=(-1.0, 1.0, -1.0, 1.0),
        mesh_kind="tri",
        coeffs=coeffs,
        exact=u,
        exact_grad=grad_u,
    )


def wavy(epsilon=1.0, amplitude=0.1):
    """Band between two cosine curves; inflow below, outflow above.

    The solution carries an internal layer of width ``epsilon`` along the
    curve x = 0.1 sin(2 pi y); the sides x = +-1 are characteristic for the
    chosen velocity, so no boundary data is needed there.  ``amplitude = 0``
    straightens the band, making the cut geometry affine.
    """
    eps = float(epsilon)

    def lam(pts):
        return (pts[:, 0] - 0.1 * np.sin(2.0 * np.pi * pts[:, 1])) / 5.0

    def layer_coord(pts):
        # Physical tube coordinate: distance along x from the layer curve.
        return pts[:, 0] - 0.1 * np.sin(2.0 * np.pi * pts[:, 1])

    def _parts(pts):
        x, y = pts[:, 0], pts[:, 1]
        la = lam(pts)
        q = (1.0 - x * x) * np.pi * np.cos(2.0 * np.pi * y) / 25.0
        s = np.arcsin(q)
        return x, y, la, q, s

    def u(pts, t=0.0):
        _, _, la, _, s = _parts(pts)
        return np.exp(la * s) * np.arctan(la / eps)

    def grad_u(pts, t=0.0):
        x, y, la, q, s = _parts(pts)
        lax = np.full_like(la, 0.2)
        lay = -0.04 * np.pi * np.cos(2.0 * np.pi * y)
        qx = -2.0 * x * np.pi * np.cos(2.0 * np.pi * y) / 25.0
        qy = -(1.0 - x * x) * 2.0 * np.pi**2 * np.sin(2.0 * np.pi * y) / 25.0
        root = np.sqrt(1.0 - q * q)
        sx, sy = qx / root, qy / root
        e = np.exp(la * s)
        atan = np.arctan(la / eps)
        datan = eps / (eps * eps + la * la)
        ux = e * (lax * s + la * sx) * atan + e * lax * datan
        uy = e * (lay * s + la * sy) * atan + e * lay * datan
        return np.stack([ux, uy], axis=-1)

    def b(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.stack(
            [(1.0 - x * x) * np.pi * np.cos(2.0 * np.pi * y) / 25.0, (1.0 + 4.0 * x * x) / 5.0],
            axis=-1,
        )

    def jac_b(pts):
        x, y = pts[:, 0], pts[:, 1]
        out = np.empty((len(pts), 2, 2))
        out[:, 0, 0] = -2.0 * x * np.pi * np.cos(2.0 * np.pi * y) / 25.0
        out[:, 0, 1] = -(1.0 - x * x) * 2.0 * np.pi**2 * np.sin(2.0 * np.pi * y) / 25.0
        out[:, 1, 0] = 8.0 * x / 5.0
        out[:, 1, 1] = 0.0
        return out

    def f(pts, t=0.0):
        g = grad_u(pts)
        bv = b(pts)
        return bv[:, 0] * g[:, 0] + bv[:, 1] * g[:, 1] + u(pts)

    coeffs = Coefficients(b=b, c=lambda pts: np.ones(len(pts)), f=f, g=u, jac_b=jac_b)
    return Problem(
        name="wavy",
        level_set=WavyBand(amplitude=amplitude, frequency=8.0, half_width=0.85),
        box=(-1.0, 1.0, -1.0, 1.0),
        mesh_kind="tri",
        coeffs=coeffs,
        exact=u,
        exact_grad=grad_u,
        layer=layer_coord,
    )


def translated_circle(shift=(0.0, 0.0), mesh_kind="tri"):
    """Flower data posed on a translated circular domain."""
    base = flower()
    return Problem(
        name="translated_circle",
        level_set=Circle(radius=0.25).translated(shift),
        box=(-0.35, 0.35, -0.35, 0.35),
        mesh_kind=mesh_kind,
        coeffs=base.coeffs,
        exact=base.exact,
        exact_grad=base.exact_grad,
    )


def time_circle(shift=(0.0, 0.0)):
    """Oscillatory profile advected across a circular domain."""
    omega = 8.0 * np.pi
    bvec = np.array([0.6, 0.8])

    def theta(pts):
        return np.cos(omega * pts[:, 0]) + np.cos(omega * pts[:, 1])

    def u(pts, t=0.0):
        return theta(pts - bvec * t)

    def grad_u(pts, t=0.0):
        z = pts - bvec * t
        return np.stack(
            [-omega * np.sin(omega * z[:, 0]), -omega * np.sin(omega * z[:, 1])], axis=-1
        )

    def f(pts, t=0.0):
        # time derivative of u cancels the transport term, leaving c*u
        return u(pts, t)

    def f_t(pts, t=0.0):
        z = pts - bvec * t
        return omega * (
            bvec[0] * np.sin(omega * z[:, 0]) + bvec[1] * np.sin(omega * z[:, 1])
        )

    def f_tt(pts, t=0.0):
        z = pts - bvec * t
        return -(omega**2) * (
            bvec[0] ** 2 * np.cos(omega * z[:, 0]) + bvec[1] ** 2 * np.cos(omega * z[:, 1])
        )

    def _cos_time(w):
        return lambda t, order: (np.cos(w * t), -w * np.sin(w * t), -w * w * np.cos(w * t))[order]

    def _sin_time(w):
        return lambda t, order: (np.sin(w * t), w * np.cos(w * t), -w * w * np.sin(w * t))[order]

    # cos(w(x - b t)) = cos(wx)cos(wbt) + sin(wx)sin(wbt), per axis
    modes = tuple(
        (spatial, timefn)
        for axis, bk in ((0, bvec[0]), (1, bvec[1]))
        for spatial, timefn in (
            (lambda p, a=axis: np.cos(omega * p[:, a]), _cos_time(omega * bk)),
            (lambda p, a=axis: np.sin(omega * p[:, a]), _sin_time(omega * bk)),
        )
    )

    coeffs = Coefficients(
        b=_const_vec(bvec),
        c=lambda pts: np.ones(len(pts)),
        f=f,
        g=u,
        jac_b=_zero_jac,
        f_t=f_t,
        f_tt=f_tt,
        g_t=f_t,
        g_tt=f_tt,
        f_modes=modes,
        g_modes=modes,
    )
    return Problem(
        name="time_circle",
        level_set=Circle(radius=0.25).translated(shift),
        box=(-0.35, 0.35, -0.35, 0.35),
        mesh_kind="quad",
        coeffs=coeffs,
        exact=u,
        exact_grad=grad_u,
        time_dependent=True,
        u0=theta,
    )


_REGISTRY = {
    "flower": flower,
    "wavy": wavy,
    "translated_circle": translated_circle,
    "time_circle": time_circle,
}


def make(name, **params):
    if name not in _REGISTRY:
        raise KeyError(f"unknown problem {name!r}; available: {sorted(_REGISTRY)}")
    return _REGISTRY[name](**params)


def _sample_inside(problem, n, rng):
    x0, x1, y0, y1 = problem.box
    pts = np.empty((0, 2))
    while len(pts) < n:
        cand = rng.uniform((x0, y0), (x1, y1), size=(4 * n, 2))
        keep = problem.level_set.value(cand) < -1e-3
        if problem.layer is not None:
            keep &= np.abs(problem.layer(cand)) > 1e-3
        pts = np.concatenate([pts, cand[keep]])
    return pts[:n]


def residual_check(problem, n=1000, seed=7, fd=1e-6, t=0.3):
    """Max strong-form residual at random interior points, FD gradients.

    Uses central differences for grad u (and du/dt for time-dependent data),
    so it cross-checks the analytic source against the coded solution.
    """
    rng = np.random.default_rng(seed)
    pts = _sample_inside(problem, n, rng)
    tval = t if problem.time_dependent else 0.0

    def u_at(p, tt=tval):
        return problem.exact(p, tt)

    ex = np.zeros((1, 2))
    ex[0, 0] = fd
    ey = np.zeros((1, 2))
    ey[0, 1] = fd
    gx = (u_at(pts + ex) - u_at(pts - ex)) / (2 * fd)
    gy = (u_at(pts + ey) - u_at(pts - ey)) / (2 * fd)
    bv = problem.coeffs.velocity(pts)
    cv = problem.coeffs.reaction(pts)
    res = bv[:, 0] * gx + bv[:, 1] * gy + cv * u_at(pts) - problem.coeffs.source(pts, tval)
    if problem.time_dependent:
        res = res + (u_at(pts, tval + fd) - u_at(pts, tval - fd)) / (2 * fd)
    return float(np.abs(res).max())
