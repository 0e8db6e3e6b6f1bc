"""Implicit 2D geometries described by signed level-set functions.

Convention: ``phi < 0`` inside the physical domain, ``phi > 0`` outside and
``phi = 0`` on the embedded boundary.  All level sets provide an analytic
gradient so boundary normals can be evaluated pointwise without incurring a
linearization error.
"""

import numpy as np

__all__ = [
    "LevelSet",
    "Circle",
    "Flower",
    "WavyBand",
    "HalfPlane",
    "Translate",
    "Intersection",
]


class LevelSet:
    """Base class for signed implicit geometries."""

    def value(self, p):
        """Signed value at points ``p`` of shape (..., 2)."""
        raise NotImplementedError

    def gradient(self, p):
        """Gradient at points ``p``, shape (..., 2)."""
        raise NotImplementedError

    def unit_normal(self, p):
        """Outward unit normal (points into the phi > 0 region)."""
        g = self.gradient(p)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.where(n == 0.0, 1.0, n)

    def translated(self, shift):
        return Translate(self, shift)


class Circle(LevelSet):
    """phi = |x - center| - radius."""

    def __init__(self, center=(0.0, 0.0), radius=0.25):
        if radius <= 0.0:
            raise ValueError("circle radius must be positive")
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)

    def value(self, p):
        p = np.asarray(p, dtype=float)
        d = p - self.center
        return np.hypot(d[..., 0], d[..., 1]) - self.radius

    def gradient(self, p):
        p = np.asarray(p, dtype=float)
        d = p - self.center
        r = np.hypot(d[..., 0], d[..., 1])
        r = np.where(r == 0.0, 1.0, r)
        return d / r[..., None]


class Flower(LevelSet):
    """Five-petal star shape: phi = r - r0 - r1*cos(5*atan2(y, x)).

    The atan2 branch cut on the negative x axis is harmless since cos(5*theta)
    is continuous there.
    """

    def __init__(self, r0=0.5, r1=0.15):
        self.r0 = float(r0)
        self.r1 = float(r1)

    def value(self, p):
        p = np.asarray(p, dtype=float)
        x, y = p[..., 0], p[..., 1]
        r = np.hypot(x, y)
        theta = np.arctan2(y, x)
        return r - self.r0 - self.r1 * np.cos(5.0 * theta)

    def gradient(self, p):
        p = np.asarray(p, dtype=float)
        x, y = p[..., 0], p[..., 1]
        r2 = x * x + y * y
        r = np.sqrt(r2)
        # Guard the center; the gradient is never requested on the boundary
        # near r = 0 for sane parameters (r0 > r1).
        r = np.where(r == 0.0, 1.0, r)
        r2 = np.where(r2 == 0.0, 1.0, r2)
        theta = np.arctan2(y, x)
        s = 5.0 * self.r1 * np.sin(5.0 * theta)
        gx = x / r + s * (-y / r2)
        gy = y / r + s * (x / r2)
        return np.stack([gx, gy], axis=-1)


class WavyBand(LevelSet):
    """Horizontal band bounded by two cosine curves.

    The inside region is {y - a*cos(w*x) < c} intersected with
    {y + a*cos(w*x) > -c}, realized as the pointwise maximum of the two
    branch values.
    """

    def __init__(self, amplitude=0.1, frequency=8.0, half_width=0.85):
        self.amplitude = float(amplitude)
        self.frequency = float(frequency)
        self.half_width = float(half_width)

    def _branches(self, p):
        p = np.asarray(p, dtype=float)
        x, y = p[..., 0], p[..., 1]
        wave = self.amplitude * np.cos(self.frequency * x)
        top = y - wave - self.half_width
        bottom = -self.half_width - (y + wave)
        return top, bottom, x

    def value(self, p):
        top, bottom, _ = self._branches(p)
        return np.maximum(top, bottom)

    def gradient(self, p):
        top, bottom, x = self._branches(p)
        dwave = self.amplitude * self.frequency * np.sin(self.frequency * x)
        pick_top = top >= bottom
        gx = dwave  # identical for both branches
        gy = np.where(pick_top, 1.0, -1.0)
        return np.stack([gx, gy * np.ones_like(gx)], axis=-1)


class HalfPlane(LevelSet):
    """phi = n . x - offset with a unit normal n."""

    def __init__(self, normal=(1.0, 0.0), offset=0.0):
        n = np.asarray(normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm == 0.0:
            raise ValueError("half-plane normal must be nonzero")
        self.normal = n / norm
        self.offset = float(offset)

    def value(self, p):
        p = np.asarray(p, dtype=float)
        return p[..., 0] * self.normal[0] + p[..., 1] * self.normal[1] - self.offset

    def gradient(self, p):
        p = np.asarray(p, dtype=float)
        out = np.empty(p.shape, dtype=float)
        out[...] = self.normal
        return out


class Translate(LevelSet):
    """Rigid translation of a base geometry by a fixed shift."""

    def __init__(self, base, shift):
        self.base = base
        self.shift = np.asarray(shift, dtype=float)

    def value(self, p):
        return self.base.value(np.asarray(p, dtype=float) - self.shift)

    def gradient(self, p):
        return self.base.gradient(np.asarray(p, dtype=float) - self.shift)


class Intersection(LevelSet):
    """Intersection of member domains via the pointwise maximum of values."""

    def __init__(self, *members):
        if not members:
            raise ValueError("intersection needs at least one member")
        self.members = members

    def value(self, p):
        vals = [m.value(p) for m in self.members]
        return np.maximum.reduce(vals)

    def gradient(self, p):
        vals = np.stack([m.value(p) for m in self.members], axis=0)
        grads = np.stack([m.gradient(p) for m in self.members], axis=0)
        pick = np.argmax(vals, axis=0)
        return np.take_along_axis(grads, pick[None, ..., None], axis=0)[0]
