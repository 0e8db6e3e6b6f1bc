"""Explicit time integration of the semi-discrete transport system.

The spatially discretized problem reads M U' = load(t) - A U, advanced with
forward Euler or a three-stage third-order Runge-Kutta scheme whose stage
corrections use the forcing and its first two time derivatives.  The second
stage applies the operator to the first stage value; applying it to the old
state instead (selectable with ``literal_stage2``) drops the scheme to second
order, which the scalar amplification test exposes.
"""

from dataclasses import dataclass, field

import numpy as np

from cutdg.linalg import Factorization

__all__ = [
    "TimeConfig",
    "TimeStepError",
    "OdeSystem",
    "transport_ode",
    "euler_step",
    "rk3_step",
    "evolve",
]

_FINITE_CHECK_STRIDE = 25


class TimeStepError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TimeConfig:
    """End time, step rule and scheme selection.

    The step is ``cfl * h_s`` unless ``dt`` is given explicitly; the last
    step is shortened to land on the end time exactly.
    """

    t_end: float
    cfl: float = 0.1
    dt: float = None
    scheme: str = "rk3"  # "euler" or "rk3"
    literal_stage2: bool = False
    snapshot_times: tuple = ()

    def step_size(self, h_s=None):
        if self.dt is not None:
            return float(self.dt)
        if h_s is None:
            raise TimeStepError("need h_s to apply the CFL step rule")
        return self.cfl * h_s


class OdeSystem:
    """U' = L U + F(t) with optional analytic forcing derivatives.

    Missing derivatives fall back to central differences with step
    ``fd_step``.
    """

    def __init__(self, apply_op, forcing, forcing_dt=None, forcing_dtt=None, fd_step=1e-5):
        self.apply_op = apply_op
        self._f = forcing
        self._fdt = forcing_dt
        self._fdtt = forcing_dtt
        self.fd_step = float(fd_step)

    def forcing(self, t):
        return self._f(t)

    def forcing_dt(self, t):
        if self._fdt is not None:
            return self._fdt(t)
        d = self.fd_step
        return (self._f(t + d) - self._f(t - d)) / (2.0 * d)

    def forcing_dtt(self, t):
        if self._fdtt is not None:
            return self._fdtt(t)
        d = self.fd_step
        return (self._f(t + d) - 2.0 * self._f(t) + self._f(t - d)) / (d * d)


def transport_ode(a, mass, time_load, tau_c=1.0):
    """Semi-discrete system from assembled operator, mass and load provider.

    The operator action is U -> -M^{-1}(A U); the forcing is M^{-1} load(t).
    The mass is factorized once and reused for every step.
    """
    mf = Factorization(mass)

    def apply_op(u):
        return -mf.lu.solve(a @ u)

    def forcing(t):
        return mf.lu.solve(time_load.vector(t))

    def forcing_dt(t):
        v = time_load.vector_dt(t)
        return None if v is None else mf.lu.solve(v)

    def forcing_dtt(t):
        v = time_load.vector_dtt(t)
        return None if v is None else mf.lu.solve(v)

    have_dt = time_load.vector_dt(0.0) is not None
    have_dtt = time_load.vector_dtt(0.0) is not None
    return OdeSystem(
        apply_op,
        forcing,
        forcing_dt if have_dt else None,
        forcing_dtt if have_dtt else None,
        fd_step=1e-5 * tau_c,
    )


def euler_step(sys, u, t, dt):
    return u + dt * (sys.apply_op(u) + sys.forcing(t))


def rk3_step(sys, u, t, dt, literal_stage2=False):
    f0 = sys.forcing(t)
    f1 = sys.forcing_dt(t)
    f2 = sys.forcing_dtt(t)
    lu0 = sys.apply_op(u)
    u1 = u + dt * (lu0 + f0)
    s2 = lu0 if literal_stage2 else sys.apply_op(u1)
    u2 = 0.5 * (u + u1) + 0.5 * dt * (s2 + f0 + dt * f1)
    lu2 = sys.apply_op(u2)
    return (u + u1 + u2) / 3.0 + (dt / 3.0) * (lu2 + f0 + dt * f1 + 0.5 * dt * dt * f2)


def evolve(sys, u0, config, h_s=None, snapshot_cb=None):
    """March to the end time; returns the final state and snapshot list.

    Snapshots are emitted at the first step reaching each requested time.
    Non-finite states abort with the offending step index.
    """
    dt = config.step_size(h_s)
    t_end = float(config.t_end)
    if t_end <= 0.0:
        return u0.copy(), []
    n_steps = max(1, int(np.ceil(t_end / dt - 1e-12)))

    u = np.asarray(u0, dtype=float).copy()
    t = 0.0
    snaps = []
    wanted = sorted(config.snapshot_times)
    for k in range(n_steps):
        step = dt if k < n_steps - 1 else t_end - t
        if config.scheme == "euler":
            u = euler_step(sys, u, t, step)
        elif config.scheme == "rk3":
            u = rk3_step(sys, u, t, step, literal_stage2=config.literal_stage2)
        else:
            raise TimeStepError(f"unknown scheme {config.scheme!r}")
        t += step
        if k % _FINITE_CHECK_STRIDE == 0 or k == n_steps - 1:
            if not np.all(np.isfinite(u)):
                raise TimeStepError(f"non-finite state at step {k}", step=k)
        while wanted and t >= wanted[0] - 1e-12:
            snaps.append((wanted.pop(0), u.copy()))
            if snapshot_cb is not None:
                snapshot_cb(t, u)
    return u, snaps
