"""Tonelli Lagrangians L(q, v) = |v|^2/2 + <theta(q), v> - U(q) and their flows.

Every built-in system uses the identity kinetic metric, so the conserved
energy is E(q, v) = |v|^2/2 + U(q); the magnetic one-form theta drops out.
The Euler-Lagrange flow is integrated with an adaptive 8th-order explicit
Runge-Kutta scheme (DOP853), optionally carrying the variational equations
(linearized flow) and the running action integral. Sphere dynamics are the
constrained ambient equations with a Lagrange multiplier that keeps |q| = 1
and q.v = 0 invariant along exact solutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .manifold import ConfigSpace, sphere2, torus

__all__ = [
    "LagrangianModel",
    "FlowResult",
    "IntegrationError",
    "make_system",
    "system_names",
    "energy",
    "lagrangian_value",
    "dL_dq",
    "dL_dv",
    "el_flow",
    "flow_rhs",
    "flow_rhs_jacobian",
]

TWO_PI = 2.0 * np.pi


class IntegrationError(RuntimeError):
    """Integrator failure: tolerance breakdown or trajectory blowup."""


@dataclass
class LagrangianModel:
    """A Tonelli Lagrangian on a flat torus or the unit 2-sphere.

    potential/grad_potential/theta/theta_jac are vectorized over leading axes
    (points of shape (..., d)); hess_potential and domega_v take single points
    and are used only by the flow linearization.
    """

    name: str
    space: ConfigSpace
    potential: callable
    grad_potential: callable
    hess_potential: callable
    theta: callable
    theta_jac: callable
    domega_v: callable
    params: dict = field(default_factory=dict)

    def omega(self, q):
        """Magnetic force matrix  Dtheta^T - Dtheta  at a single point."""
        j = self.theta_jac(np.asarray(q, dtype=float))
        return j.T - j

    @property
    def dim(self) -> int:
        return self.space.dim


def energy(model: LagrangianModel, q, v):
    """E(q, v) = |v|^2/2 + U(q); the magnetic term cancels in v.dL/dv - L."""
    v = np.asarray(v, dtype=float)
    return 0.5 * np.sum(v * v, axis=-1) + model.potential(np.asarray(q, dtype=float))


def lagrangian_value(model: LagrangianModel, q, v):
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    kin = 0.5 * np.sum(v * v, axis=-1)
    mag = np.sum(model.theta(q) * v, axis=-1)
    return kin + mag - model.potential(q)


def dL_dq(model: LagrangianModel, q, v):
    """Partial of L in q: (Dtheta)^T v - grad U, batched."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    jac = model.theta_jac(q)  # (..., d, d) with jac[..., i, j] = d theta_i / d q_j
    return np.einsum("...ij,...i->...j", jac, v) - model.grad_potential(q)


def dL_dv(model: LagrangianModel, q, v):
    return np.asarray(v, dtype=float) + model.theta(np.asarray(q, dtype=float))


# ---------------------------------------------------------------------------
# system catalog


def _zeros_theta(d):
    def theta(q):
        return np.zeros(np.shape(q))

    def theta_jac(q):
        return np.zeros(np.shape(q) + (d,))

    def domega_v(q, v):
        return np.zeros((d, d))

    return theta, theta_jac, domega_v


def _pendulum(amplitude: float) -> LagrangianModel:
    a = float(amplitude)

    def potential(q):
        return a * (1.0 + np.cos(TWO_PI * q[..., 0]))

    def grad_potential(q):
        return (-a * TWO_PI * np.sin(TWO_PI * q[..., 0]))[..., None]

    def hess_potential(q):
        return np.array([[-a * TWO_PI**2 * np.cos(TWO_PI * q[0])]])

    theta, theta_jac, domega_v = _zeros_theta(1)
    return LagrangianModel(
        "sys-pend", torus(1), potential, grad_potential, hess_potential,
        theta, theta_jac, domega_v, {"amplitude": a},
    )


def _mech_t2(amplitude: float) -> LagrangianModel:
    a = float(amplitude)

    def potential(q):
        return a * (np.cos(TWO_PI * q[..., 0]) + np.cos(TWO_PI * q[..., 1]))

    def grad_potential(q):
        return -a * TWO_PI * np.sin(TWO_PI * q)

    def hess_potential(q):
        return np.diag(-a * TWO_PI**2 * np.cos(TWO_PI * np.asarray(q)))

    theta, theta_jac, domega_v = _zeros_theta(2)
    return LagrangianModel(
        "sys-mecht2", torus(2), potential, grad_potential, hess_potential,
        theta, theta_jac, domega_v, {"amplitude": a},
    )


def _mag_t2(amplitude: float) -> LagrangianModel:
    a = float(amplitude)

    def potential(q):
        return np.zeros(np.shape(q)[:-1])

    def grad_potential(q):
        return np.zeros(np.shape(q))

    def hess_potential(q):
        return np.zeros((2, 2))

    def theta(q):
        out = np.zeros(np.shape(q))
        out[..., 1] = a * np.cos(TWO_PI * q[..., 0])
        return out

    def theta_jac(q):
        out = np.zeros(np.shape(q) + (2,))
        out[..., 1, 0] = -a * TWO_PI * np.sin(TWO_PI * q[..., 0])
        return out

    def domega_v(q, v):
        # Omega v = b(x) (-v_y, v_x) with b = 2 pi a sin(2 pi x)
        db = a * TWO_PI**2 * np.cos(TWO_PI * q[0])
        return np.array([[-db * v[1], 0.0], [db * v[0], 0.0]])

    return LagrangianModel(
        "sys-magt2", torus(2), potential, grad_potential, hess_potential,
        theta, theta_jac, domega_v, {"amplitude": a},
    )


def _mag_s2(amplitude: float) -> LagrangianModel:
    s = float(amplitude)

    def potential(q):
        return np.zeros(np.shape(q)[:-1])

    def grad_potential(q):
        return np.zeros(np.shape(q))

    def hess_potential(q):
        return np.zeros((3, 3))

    def theta(q):
        # theta_q(v) = s * z * (x v_y - y v_x), written as a covector field
        x, y, z = q[..., 0], q[..., 1], q[..., 2]
        return np.stack([-s * z * y, s * z * x, np.zeros(np.shape(x))], axis=-1)

    def theta_jac(q):
        x, y, z = q[..., 0], q[..., 1], q[..., 2]
        zero = np.zeros(np.shape(x))
        row0 = np.stack([zero, -s * z, -s * y], axis=-1)
        row1 = np.stack([s * z, zero, s * x], axis=-1)
        row2 = np.stack([zero, zero, zero], axis=-1)
        return np.stack([row0, row1, row2], axis=-2)

    def domega_v(q, v):
        # Omega = s [[0, 2z, y], [-2z, 0, -x], [-y, x, 0]]
        return s * np.array(
            [
                [0.0, v[2], 2.0 * v[1]],
                [-v[2], 0.0, -2.0 * v[0]],
                [v[1], -v[0], 0.0],
            ]
        )

    return LagrangianModel(
        "sys-mags2", sphere2(), potential, grad_potential, hess_potential,
        theta, theta_jac, domega_v, {"amplitude": s},
    )


def _free_t2() -> LagrangianModel:
    def potential(q):
        return np.zeros(np.shape(q)[:-1])

    def grad_potential(q):
        return np.zeros(np.shape(q))

    def hess_potential(q):
        return np.zeros((2, 2))

    theta, theta_jac, domega_v = _zeros_theta(2)
    return LagrangianModel(
        "sys-free-t2", torus(2), potential, grad_potential, hess_potential,
        theta, theta_jac, domega_v, {},
    )


_CATALOG = {
    "sys-pend": (_pendulum, {"amplitude": 1.0}),
    "sys-mecht2": (_mech_t2, {"amplitude": 1.0}),
    "sys-magt2": (_mag_t2, {"amplitude": 1.0}),
    "sys-mags2": (_mag_s2, {"amplitude": 1.0}),
    "sys-free-t2": (lambda: _free_t2(), {}),
}


def system_names():
    return sorted(_CATALOG)


def make_system(name: str, **overrides) -> LagrangianModel:
    """Instantiate a catalog system by name, with numeric parameter overrides."""
    if name not in _CATALOG:
        raise KeyError(f"unknown system {name!r}; choose from {system_names()}")
    factory, defaults = _CATALOG[name]
    params = dict(defaults)
    for key, value in overrides.items():
        if key not in defaults:
            raise KeyError(f"system {name!r} has no parameter {key!r}")
        params[key] = float(value)
    return factory(**params)


# ---------------------------------------------------------------------------
# Euler-Lagrange flow


def flow_rhs(model: LagrangianModel):
    """Right-hand side f(y) of the first-order EL system, y = (q, v)."""
    d = model.dim
    if model.space.is_torus:

        def f(y):
            q, v = y[:d], y[d:]
            acc = model.omega(q) @ v - model.grad_potential(q)
            return np.concatenate([v, acc])

        return f

    def f(y):
        # Constrained ambient dynamics: the multiplier keeps q.q and q.v flat.
        q, v = y[:3], y[3:]
        force = model.omega(q) @ v - model.grad_potential(q)
        lam = -(np.dot(v, v) + np.dot(q, force)) / np.dot(q, q)
        return np.concatenate([v, force + lam * q])

    return f


def flow_rhs_jacobian(model: LagrangianModel):
    """Jacobian of flow_rhs; drives the variational equations."""
    d = model.dim
    if model.space.is_torus:

        def jac(y):
            q, v = y[:d], y[d:]
            out = np.zeros((2 * d, 2 * d))
            out[:d, d:] = np.eye(d)
            out[d:, :d] = model.domega_v(q, v) - model.hess_potential(q)
            out[d:, d:] = model.omega(q)
            return out

        return jac

    def jac(y):
        q, v = y[:3], y[3:]
        omega = model.omega(q)
        force = omega @ v - model.grad_potential(q)
        dforce_dq = model.domega_v(q, v) - model.hess_potential(q)
        qq = np.dot(q, q)
        lam = -(np.dot(v, v) + np.dot(q, force)) / qq
        dlam_dq = -(force + dforce_dq.T @ q + 2.0 * lam * q) / qq
        dlam_dv = -(2.0 * v + omega.T @ q) / qq
        out = np.zeros((6, 6))
        out[:3, 3:] = np.eye(3)
        out[3:, :3] = dforce_dq + np.outer(q, dlam_dq) + lam * np.eye(3)
        out[3:, 3:] = omega + np.outer(q, dlam_dv)
        return out

    return jac


@dataclass
class FlowResult:
    """Terminal state of an EL flow, with optional extras."""

    y: np.ndarray
    t: float
    monodromy: np.ndarray | None = None
    action_integral: float | None = None
    sol: object | None = None  # scipy OdeSolution when dense output was asked


def el_flow(
    model: LagrangianModel,
    y0,
    t: float,
    *,
    rtol: float = 3e-13,
    atol: float = 3e-15,
    with_linearization: bool = False,
    with_action: bool = False,
    dense: bool = False,
    max_norm: float = 1e6,
) -> FlowResult:
    """Flow the EL equations for time t from phase state y0 = (q, v).

    with_linearization carries the variational equations and returns the
    transition matrix over [0, t]; with_action accumulates int L dt. Raises
    IntegrationError on tolerance failure or when the state norm passes
    max_norm ("blowup").
    """
    y0 = np.asarray(y0, dtype=float)
    m = y0.size
    f = flow_rhs(model)
    jac = flow_rhs_jacobian(model) if with_linearization else None

    pieces = [y0]
    if with_linearization:
        pieces.append(np.eye(m).ravel())
    if with_action:
        pieces.append(np.zeros(1))
    z0 = np.concatenate(pieces)
    d = model.dim

    def rhs(_t, z):
        y = z[:m]
        out = np.empty_like(z)
        out[:m] = f(y)
        k = m
        if with_linearization:
            mat = z[k:k + m * m].reshape(m, m)
            out[k:k + m * m] = (jac(y) @ mat).ravel()
            k += m * m
        if with_action:
            out[k] = lagrangian_value(model, y[:d], y[d:])
        return out

    if t == 0.0:
        return FlowResult(
            y=y0.copy(),
            t=0.0,
            monodromy=np.eye(m) if with_linearization else None,
            action_integral=0.0 if with_action else None,
        )

    sol = solve_ivp(
        rhs, (0.0, float(t)), z0, method="DOP853", rtol=rtol, atol=atol,
        dense_output=dense,
    )
    if not sol.success:
        raise IntegrationError(f"tolerance failure: {sol.message}")
    if np.max(np.abs(sol.y[:m])) > max_norm:
        raise IntegrationError("blowup: state norm exceeded %g" % max_norm)

    z1 = sol.y[:, -1]
    y1 = z1[:m]
    k = m
    monodromy = None
    if with_linearization:
        monodromy = z1[k:k + m * m].reshape(m, m)
        k += m * m
    action_integral = float(z1[k]) if with_action else None
    return FlowResult(
        y=y1, t=float(t), monodromy=monodromy, action_integral=action_integral,
        sol=sol.sol if dense else None,
    )
