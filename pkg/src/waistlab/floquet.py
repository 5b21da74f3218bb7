"""Monodromy spectra, stability classes, twist fits, and orbit cylinders.

Everything here works on refined orbits (module orbits) and the linearized
flow (module lagrangian). The transverse dynamics is reduced by an exact
linear-algebra section reduction rather than eigenvalue bookkeeping, so
degenerate orbits with many near-unit multipliers stay well defined.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .lagrangian import el_flow, energy, flow_rhs
from .action import DiscreteLoop, action_gradient
from .manifold import torus_displacement
from . import orbits as _orbits

UNIT_TOL = 1e-6
ANGLE_TOL = 1e-4
DET_TOL = 1e-6


# ---------------------------------------------------------------------------
# monodromy


def _sphere_tangent_frame(y):
    """Orthonormal basis of the constraint-tangent space at y = (q, v)."""
    q, v = y[:3], y[3:]
    b = np.zeros((6, 4))
    # two directions tangent at q, with the v-compatibility correction
    t = np.linalg.svd(q[None, :])[2][1:]
    b[:3, 0], b[3:, 0] = t[0], -np.dot(v, t[0]) * q
    b[:3, 1], b[3:, 1] = t[1], -np.dot(v, t[1]) * q
    b[3:, 2], b[3:, 3] = t[0], t[1]
    qmat, _ = np.linalg.qr(b)
    return qmat


def monodromy(model, orbit) -> np.ndarray:
    """Fundamental solution of the variational equations over one period.

    Tori give the raw 2d x 2d matrix; the sphere's ambient 6x6 solution is
    compressed to the 4-dimensional constraint-tangent space at state0.
    """
    res = el_flow(model, orbit.state0, orbit.period, with_linearization=True)
    mat = res.monodromy
    if model.space.is_sphere:
        frame = _sphere_tangent_frame(orbit.state0)
        mat = frame.T @ mat @ frame
    det = float(np.linalg.det(mat))
    if abs(det - 1.0) > DET_TOL * max(1.0, abs(det)):
        raise RuntimeError(
            f"monodromy determinant check failed: det = {det!r}"
        )
    return mat


def _phase_gradients(model, y):
    """Flow direction and energy gradient at a phase point, reduced coords."""
    f = flow_rhs(model)(y)
    d = model.dim
    if model.space.is_torus:
        q, v = y[:d], y[d:]
        de = np.concatenate([model.grad_potential(q), v])
        return f, de
    q, v = y[:3], y[3:]
    de = np.concatenate([model.grad_potential(q), v])
    frame = _sphere_tangent_frame(y)
    return frame.T @ f, frame.T @ de


# ---------------------------------------------------------------------------
# classification


@dataclass
class StabilityReport:
    multipliers: np.ndarray
    reduced_multipliers: np.ndarray
    stability_class: str
    four_elementary: bool
    unit_circle_tol: float
    angles: np.ndarray = field(default_factory=lambda: np.zeros(0))
    failing_combination: tuple | None = None
    reduced_matrix: np.ndarray | None = None

    def to_dict(self):
        return {
            "multipliers": [[z.real, z.imag] for z in self.multipliers],
            "reduced_multipliers": [
                [z.real, z.imag] for z in self.reduced_multipliers
            ],
            "class": self.stability_class,
            "four_elementary": bool(self.four_elementary),
            "unit_circle_tol": self.unit_circle_tol,
            "angles": list(map(float, self.angles)),
            "failing_combination": (
                None if self.failing_combination is None
                else list(self.failing_combination)
            ),
        }


def _reduce_trivial_pair(mat, f, de):
    """Linearized return map on the section orthogonal to flow and energy.

    The reduction is exact: M fixes f, dE is M-invariant as a covector, so
    the projected map (I - ff^T/|f|^2) M restricted to {f, dE}-orthogonal
    vectors removes exactly the trivial unit pair, Jordan blocks included.
    """
    pair = np.stack([f, de])
    sv = np.linalg.svd(pair, compute_uv=False)
    if sv[-1] < 1e-8 * sv[0]:
        raise RuntimeError(
            "trivial pair ambiguous: flow and energy directions are "
            "numerically parallel"
        )
    basis = np.linalg.svd(pair)[2][2:]  # rows span the section
    fn = f / np.linalg.norm(f)
    proj = np.eye(mat.shape[0]) - np.outer(fn, fn)
    return basis @ (proj @ mat) @ basis.T


def _four_elementary_scan(angles, angle_tol=ANGLE_TOL, max_order=4):
    """Klingenberg non-resonance: no small integer combination of the
    elliptic angles vanishes mod 2pi up to total order 4."""
    k = len(angles)
    if k == 0:
        return True, None
    rng = range(-max_order, max_order + 1)
    grids = np.meshgrid(*([list(rng)] * k), indexing="ij")
    combos = np.stack([g.ravel() for g in grids], axis=1)
    orders = np.abs(combos).sum(axis=1)
    combos = combos[(orders >= 1) & (orders <= max_order)]
    vals = combos @ np.asarray(angles)
    res = np.abs((vals + np.pi) % (2 * np.pi) - np.pi)
    bad = np.flatnonzero(res <= angle_tol)
    if bad.size == 0:
        return True, None
    worst = bad[np.argmin(res[bad])]
    return False, tuple(int(c) for c in combos[worst])


def classify_matrix(mat, unit_tol=UNIT_TOL, angle_tol=ANGLE_TOL,
                    full_multipliers=None) -> StabilityReport:
    """Classify a reduced (trivial-pair-free) linear return map."""
    mat = np.asarray(mat, dtype=float)
    red = np.linalg.eigvals(mat) if mat.size else np.zeros(0, dtype=complex)
    on_circle = np.abs(np.abs(red) - 1.0) <= unit_tol
    near_one = np.abs(red - 1.0) <= unit_tol
    if red.size == 0:
        cls = "degenerate"
    elif np.any(near_one):
        cls = "degenerate"
    elif not np.any(on_circle):
        cls = "hyperbolic"
    elif np.all(on_circle):
        cls = "elliptic"
    else:
        cls = "quasi_elliptic"
    on = red[on_circle]
    pos = on[on.imag > 1e-12]
    # a -1 pair contributes two angle-pi entries; the resonance scan then
    # rejects it through the order-2 difference combination
    neg_real = on[(np.abs(on.imag) <= 1e-12) & (on.real < 0)]
    angles = np.sort(np.concatenate(
        [np.angle(pos), np.full(neg_real.size, np.pi)]
    ))
    ok4, combo = _four_elementary_scan(angles, angle_tol)
    mults = np.asarray(full_multipliers) if full_multipliers is not None \
        else red.copy()
    return StabilityReport(
        multipliers=mults,
        reduced_multipliers=red,
        stability_class=cls,
        four_elementary=ok4,
        unit_circle_tol=unit_tol,
        angles=angles,
        failing_combination=combo,
        reduced_matrix=mat,
    )


def classify(model, orbit, unit_tol=UNIT_TOL,
             angle_tol=ANGLE_TOL) -> StabilityReport:
    """Stability report of a refined orbit from its monodromy."""
    mat = monodromy(model, orbit)
    full = np.linalg.eigvals(mat)
    f, de = _phase_gradients(model, orbit.state0)
    red = _reduce_trivial_pair(mat, f, de)
    return classify_matrix(red, unit_tol, angle_tol, full_multipliers=full)


def unit_multiplier_geometric_count(reduced_matrix, tol=1e-4):
    """Geometric multiplicity of the unit eigenvalue of the reduced map."""
    mat = np.asarray(reduced_matrix, dtype=float)
    if mat.size == 0:
        return 0
    sv = np.linalg.svd(mat - np.eye(mat.shape[0]), compute_uv=False)
    scale = max(1.0, sv[0])
    return int(np.sum(sv <= tol * scale))


def attach_stability(model, rec, unit_tol=UNIT_TOL):
    """Fill multipliers / reduced multipliers / class on an OrbitRecord."""
    rep = classify(model, rec, unit_tol=unit_tol)
    rec.multipliers = rep.multipliers
    rec.reduced_multipliers = rep.reduced_multipliers
    rec.stability = rep.stability_class
    return rep


# ---------------------------------------------------------------------------
# return-map samplers


def section_return_sampler(model, orbit, n_scan=600):
    """Nonlinear Poincare return map near a d=2 periodic orbit.

    Coordinates are the two directions orthogonal to both the flow and the
    energy gradient at state0; input points are projected back onto the
    energy level before flowing. Returns sampler(z) -> z' and shares the
    return time through sampler.last_return_time.
    """
    if model.space.is_sphere or model.dim != 2:
        raise ValueError("section sampler needs a d=2 torus system")
    y0 = np.asarray(orbit.state0, dtype=float)
    p = float(orbit.period)
    e = float(energy(model, y0[: model.dim], y0[model.dim:]))
    f0, de0 = _phase_gradients(model, y0)
    pair = np.stack([f0, de0])
    cols = np.linalg.svd(pair)[2][2:]  # (2, 4): section coordinates
    rhs = flow_rhs(model)

    def embed(z):
        y = y0 + cols.T @ z
        for _ in range(3):
            q, v = y[:2], y[2:]
            de = np.concatenate([model.grad_potential(q), v])
            y = y - ((energy(model, q, v) - e) / np.dot(de, de)) * de
        return y

    def displacement(y):
        # wrapped phase displacement: winding orbits recross the section
        # only modulo the lattice, so the lift coordinate cannot be used
        dq = torus_displacement(y0[:2], y[:2])
        return np.concatenate([dq, y[2:] - y0[2:]])

    def sampler(z):
        y = embed(np.asarray(z, dtype=float))
        res = el_flow(model, y, 1.8 * p, dense=True)
        sol = res.sol

        def g(t):
            return float(np.dot(f0, displacement(sol(t))))

        ts = np.linspace(0.55 * p, 1.8 * p, n_scan)
        gs = np.array([g(t) for t in ts])
        hits = []
        for i in range(len(ts) - 1):
            if gs[i] < 0.0 <= gs[i + 1]:
                t_hit = brentq(g, ts[i], ts[i + 1])
                # discard zeros far from the base point: wrap jumps of the
                # displacement and distant recrossings are not returns
                if np.linalg.norm(displacement(sol(t_hit))) <= 0.2:
                    hits.append(t_hit)
        if not hits:
            raise RuntimeError("no section return found")
        t_ret = min(hits, key=lambda t: abs(t - p))
        sampler.last_return_time = t_ret
        return cols @ displacement(sol(t_ret))

    sampler.last_return_time = p
    sampler.period = p
    sampler.embed = embed
    return sampler


def _stable_equilibrium(model, n=512):
    q = np.arange(n)[:, None] / n
    u = model.potential(q)
    qs = float(q[int(np.argmin(u)), 0])
    for _ in range(60):
        g = float(model.grad_potential(np.array([qs]))[0])
        h = float(model.hess_potential(np.array([qs]))[0, 0])
        if h <= 0:
            break
        step = g / h
        qs -= step
        if abs(step) < 1e-14:
            break
    return np.array([qs])


def fixed_time_sampler(model, p, center=None):
    """Time-p flow map around a stable equilibrium of a d=1 system.

    This is the d=1 stand-in for a transverse section: the phase plane
    itself, with the enclosed elliptic rest point as fixed point.
    """
    if model.dim != 1 or model.space.is_sphere:
        raise ValueError("fixed-time sampler needs a d=1 torus system")
    qc = _stable_equilibrium(model) if center is None else np.asarray(center)
    y_center = np.concatenate([qc, [0.0]])
    p = float(p)

    def sampler(z):
        z = np.asarray(z, dtype=float)
        y = y_center + z
        res = el_flow(model, y, p)
        out = res.y - y_center
        out[0] = out[0] - np.round(out[0])
        sampler.last_return_time = p
        return out

    sampler.last_return_time = p
    sampler.period = p
    sampler.center = y_center
    return sampler


# ---------------------------------------------------------------------------
# twist fit


@dataclass
class TwistFit:
    rotation: float
    twist: float
    fit_radius: float
    fit_residual: float
    twist_stderr: float
    nonzero: bool
    basis: np.ndarray


def _linearize_map(sampler, h):
    a = np.zeros((2, 2))
    for i in range(2):
        ei = np.zeros(2)
        ei[i] = h
        a[:, i] = (sampler(ei) - sampler(-ei)) / (2 * h)
    return a


def twist_fit(return_map_sampler, fit_radius, n_angles=16) -> TwistFit:
    """Fit angle(r) = a + 2 pi b r^2 to the sampled return map rotation."""
    fit_radius = float(fit_radius)
    a_lin = _linearize_map(return_map_sampler, fit_radius / 64.0)
    lam = np.linalg.eigvals(a_lin)
    if np.any(np.abs(np.abs(lam) - 1.0) > 1e-3) or abs(lam[0].imag) < 1e-8:
        raise ValueError(
            "not elliptic: linear return map has multipliers off the unit "
            f"circle ({lam})"
        )
    w, vecs = np.linalg.eig(a_lin)
    k = int(np.argmax(w.imag))
    vec = vecs[:, k]
    basis = np.stack([vec.real, -vec.imag], axis=1)
    det = float(np.linalg.det(basis))
    if det == 0.0:
        raise ValueError("not elliptic: defective linearization")
    # unimodular normalization pins the radius scale, so the fitted twist
    # is coordinate-free whenever the linear part is a true rotation
    basis = basis / np.sqrt(abs(det))
    inv = np.linalg.inv(basis)

    radii = np.array([0.25, 0.5, 0.75, 1.0]) * fit_radius
    phis = 2 * np.pi * np.arange(n_angles) / n_angles
    theta0 = float(np.angle(w[k]))
    mean_angles = []
    for r in radii:
        deltas = []
        for phi in phis:
            z = r * np.array([np.cos(phi), np.sin(phi)])
            z2 = inv @ return_map_sampler(basis @ z)
            rr = np.hypot(z2[0], z2[1])
            if rr < 0.2 * r or rr > 5.0 * r:
                raise ValueError(
                    "fit ill-conditioned: sampled circle collapsed under the "
                    "return map"
                )
            raw = np.angle((z2[0] + 1j * z2[1]) / (z[0] + 1j * z[1]))
            deltas.append(theta0 + np.angle(np.exp(1j * (raw - theta0))))
        mean_angles.append(np.mean(deltas))
    mean_angles = np.asarray(mean_angles)

    x = np.stack([np.ones_like(radii), radii ** 2], axis=1)
    coef, res_ss, rank, _ = np.linalg.lstsq(x, mean_angles, rcond=None)
    if rank < 2:
        raise ValueError("fit ill-conditioned: degenerate radius design")
    resid = mean_angles - x @ coef
    dof = max(len(radii) - 2, 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(x.T @ x)
    b = float(coef[1] / (2 * np.pi))
    b_err = float(np.sqrt(cov[1, 1]) / (2 * np.pi))
    return TwistFit(
        rotation=float(coef[0]),
        twist=b,
        fit_radius=fit_radius,
        fit_residual=float(np.sqrt(sigma2)),
        twist_stderr=b_err,
        nonzero=bool(abs(b) > 3 * b_err),
        basis=basis,
    )


# ---------------------------------------------------------------------------
# orbit cylinders


@dataclass
class CylinderBranch:
    samples: list
    d_action_d_e: np.ndarray
    degeneracy_band: float

    @property
    def energies(self):
        return np.array([e for e, _ in self.samples])

    @property
    def actions(self):
        return np.array([rec.action for _, rec in self.samples])

    @property
    def periods(self):
        return np.array([rec.period for _, rec in self.samples])


def _energy_predictor(model, rec, e_new):
    """Rescale a loop's period so mean kinetic energy matches the target."""
    loop = rec.loop
    u = model.potential(loop.points)
    ubar = float(np.mean(u))
    num = max(e_new - ubar, 1e-12)
    den = max(rec.energy - ubar, 1e-12)
    factor = np.sqrt(num / den)
    return DiscreteLoop(
        loop.space, loop.points,
        log_period=loop.log_period - np.log(factor),
        tag=loop.tag if loop.space.is_torus else None,
    )


def continue_cylinder(model, orbit, e_lo, e_hi, steps=9,
                      degeneracy_band=1e-4, resample_n=128,
                      spectrum_grad_tol=3e-2) -> CylinderBranch:
    """Predictor-corrector orbit continuation across [e_lo, e_hi].

    The degeneracy guard arms only when the seed orbit starts clear of the
    unit-multiplier band, so intrinsically degenerate families (free
    particle) still continue.
    """
    if e_hi <= e_lo:
        raise ValueError("empty energy interval")
    ladder = np.linspace(float(e_lo), float(e_hi), int(steps))

    def corrector(rec, e_t):
        out = _orbits.refine_orbit(
            model, _energy_predictor(model, rec, e_t), e_target=e_t,
            resample_n=resample_n, spectrum_grad_tol=spectrum_grad_tol,
        )
        out.is_waist = out.index == 0
        return out

    seed_rep = attach_stability(model, orbit)
    guard_armed = (
        seed_rep.reduced_multipliers.size > 0
        and not np.any(np.abs(seed_rep.reduced_multipliers - 1.0)
                       <= degeneracy_band)
    )
    seed_cls = seed_rep.stability_class
    seed_index = orbit.index

    def march(rec, e_t):
        cur = rec
        halvings = 0
        step = e_t - rec.energy
        while abs(cur.energy - e_t) > 1e-13:
            remaining = e_t - cur.energy
            if abs(step) > abs(remaining) or step * remaining <= 0:
                step = remaining
            try:
                nxt = corrector(cur, cur.energy + step)
            except (RuntimeError, ValueError):
                halvings += 1
                if halvings > 6:
                    raise RuntimeError(
                        "fold suspected: corrector failed after 6 halvings "
                        f"near e = {cur.energy + step!r}"
                    )
                step *= 0.5
                continue
            halvings = 0
            cur = nxt
        return cur

    def checked(rec):
        rep = attach_stability(model, rec)
        if guard_armed and rep.reduced_multipliers.size:
            if np.any(np.abs(rep.reduced_multipliers - 1.0)
                      <= degeneracy_band):
                raise RuntimeError(
                    "degeneracy hit: reduced multiplier entered the unit-1 "
                    f"band at e = {rec.energy!r}"
                )
        if seed_cls == "hyperbolic" and rep.stability_class == "hyperbolic":
            if (seed_index is not None and rec.index is not None
                    and rec.index != seed_index):
                raise RuntimeError(
                    "index changed along hyperbolic branch at "
                    f"e = {rec.energy!r}"
                )
        return rec

    start = int(np.argmin(np.abs(ladder - orbit.energy)))
    samples = {}
    cur = checked(march(orbit, ladder[start]))
    samples[start] = (float(ladder[start]), cur)
    for i in range(start + 1, len(ladder)):
        cur = checked(march(cur, ladder[i]))
        samples[i] = (float(ladder[i]), cur)
    cur = samples[start][1]
    for i in range(start - 1, -1, -1):
        cur = checked(march(cur, ladder[i]))
        samples[i] = (float(ladder[i]), cur)

    ordered = [samples[i] for i in range(len(ladder))]
    es = np.array([e for e, _ in ordered])
    acts = np.array([rec.action for _, rec in ordered])
    dsde = np.full(len(ordered), np.nan)
    if len(ordered) >= 3:
        dsde[1:-1] = (acts[2:] - acts[:-2]) / (es[2:] - es[:-2])
    return CylinderBranch(samples=ordered, d_action_d_e=dsde,
                          degeneracy_band=degeneracy_band)


# ---------------------------------------------------------------------------
# Birkhoff-Lewis subharmonic probe


def _coprime(m, n):
    return int(np.gcd(int(m), int(n))) == 1


def _newton_periodic_point(psi_n, z0, scale, max_iter=20, tol=1e-10):
    z = np.asarray(z0, dtype=float)
    h = 1e-5 * max(scale, 1e-8)
    g = psi_n(z) - z
    gn = float(np.linalg.norm(g))
    for _ in range(max_iter):
        if gn < tol * max(1.0, scale):
            return z, gn
        jac = np.zeros((2, 2))
        for i in range(2):
            ei = np.zeros(2)
            ei[i] = h
            jac[:, i] = (psi_n(z + ei) - psi_n(z - ei)) / (2 * h)
        jac -= np.eye(2)
        # min-norm step: the integrable limit has a whole circle of roots
        step, *_ = np.linalg.lstsq(jac, -g, rcond=None)
        nrm = np.linalg.norm(step)
        if nrm > 0.5 * scale:
            step *= 0.5 * scale / nrm
        moved = False
        for _bt in range(6):
            z2 = z + step
            g2 = psi_n(z2) - z2
            gn2 = float(np.linalg.norm(g2))
            if gn2 < gn:
                z, g, gn = z2, g2, gn2
                moved = True
                break
            step *= 0.5
        if not moved:
            break
    return z, gn


def _lift_map_orbit(model, sampler, basis, z_eigen, n_steps):
    """Flow a periodic map point into a full OrbitRecord.

    The fixed-time map composes exactly, so its lift is built directly from
    the dense flow; a section map accumulates return times, and the lifted
    loop is polished by multiple shooting.
    """
    z = basis @ z_eigen
    d = model.dim
    if hasattr(sampler, "center"):
        y0 = sampler.center + z
        total_t = n_steps * sampler.period
        n_pts = max(64, 32 * n_steps)
        res = el_flow(model, y0, total_t, dense=True,
                      with_action=True, with_linearization=False)
        ts = np.linspace(0.0, total_t, n_pts, endpoint=False)
        pts = np.stack([res.sol(t)[:d] for t in ts])
        loop = DiscreteLoop(model.space, pts, period=total_t)
        e_val = float(energy(model, y0[:d], y0[d:]))
        drift = abs(float(energy(model, res.y[:d], res.y[d:])) - e_val)
        dq = torus_displacement(res.y[:d], y0[:d])
        close = float(np.hypot(np.linalg.norm(dq),
                               np.linalg.norm(res.y[d:] - y0[d:])))
        g_pts, g_lp = action_gradient(model, loop, e_val)
        gnorm = float(np.linalg.norm(np.concatenate([g_pts.ravel(), [g_lp]])))
        return _orbits.OrbitRecord(
            loop=loop,
            state0=y0,
            period=float(total_t),
            energy=e_val,
            energy_residual=drift,
            action=float(res.action_integral + e_val * total_t),
            shooting_residual=close,
            grad_norm=gnorm,
        )
    # section map: accumulate the actual return times, then polish
    y0 = sampler.embed(basis @ z_eigen)
    zk = z_eigen
    total_t = 0.0
    for _ in range(n_steps):
        zk = np.linalg.inv(basis) @ sampler(basis @ zk)
        total_t += sampler.last_return_time
    res = el_flow(model, y0, total_t, dense=True)
    n_pts = max(96, 32 * n_steps)
    ts = np.linspace(0.0, total_t, n_pts, endpoint=False)
    pts = np.stack([res.sol(t)[:d] for t in ts])
    guess = DiscreteLoop(model.space, pts, period=total_t)
    return _orbits.refine_orbit(model, guess, n_segments=max(4, n_steps))


def birkhoff_lewis_probe(model, orbit, min_period_factor=3, budget=400,
                         fit_radius=None, max_n=13):
    """Rotation-guided search for subharmonic periodic points near an
    elliptic orbit; returns lifted OrbitRecords with map return period
    exceeding min_period_factor periods of the base orbit."""
    p = float(orbit.period)
    if model.dim == 1:
        sampler = fixed_time_sampler(model, p)
        if fit_radius is None:
            fit_radius = 0.25
    else:
        rep = classify(model, orbit)
        if rep.stability_class not in ("elliptic", "quasi_elliptic"):
            raise ValueError(
                f"not twist type: class is {rep.stability_class}"
            )
        sampler = section_return_sampler(model, orbit)
        if fit_radius is None:
            fit_radius = 1e-2
    try:
        fit = twist_fit(sampler, fit_radius)
    except ValueError as exc:
        if "not elliptic" in str(exc):
            raise ValueError(f"not twist type: {exc}") from exc
        raise
    if not fit.nonzero:
        raise ValueError("not twist type: twist indistinguishable from zero")

    calls = [0]
    basis = fit.basis
    inv = np.linalg.inv(basis)

    def psi(z_eigen):
        calls[0] += 1
        return inv @ sampler(basis @ z_eigen)

    a, b = fit.rotation, fit.twist
    r_cap = 1.3 * fit_radius
    found = []
    records = []
    for n in range(3, max_n + 1):
        base_m = a * n / (2 * np.pi)
        for m in sorted({int(np.floor(base_m)), int(np.ceil(base_m)),
                         int(np.round(base_m))}):
            if m <= 0 or not _coprime(m, n):
                continue
            r2 = (2 * np.pi * m / n - a) / (2 * np.pi * b)
            if not (0.0 < r2 <= r_cap ** 2):
                continue
            if calls[0] > budget:
                break
            r = float(np.sqrt(r2))

            def psi_n(z):
                out = z
                for _ in range(n):
                    out = psi(out)
                return out

            for phi in (0.0, 2.094, 4.189):
                z0 = r * np.array([np.cos(phi), np.sin(phi)])
                z, res_norm = _newton_periodic_point(psi_n, z0, r)
                if res_norm > 1e-9 * max(1.0, r):
                    continue
                if np.linalg.norm(z) < 0.05 * r:
                    continue  # collapsed to the fixed point
                min_k = n
                zk = z
                for k in range(1, n):
                    zk = psi(zk)
                    if np.linalg.norm(zk - z) < 1e-6 * max(r, 1e-6):
                        min_k = k
                        break
                if min_k <= min_period_factor:
                    continue
                dup = False
                for (zf, nf) in found:
                    if nf != min_k:
                        continue
                    w = z.copy()
                    for _ in range(min_k):
                        if np.linalg.norm(w - zf) < 1e-4 * max(r, 1e-6):
                            dup = True
                            break
                        w = psi(w)
                    if dup:
                        break
                if dup:
                    continue
                found.append((z, min_k))
                rec = _lift_map_orbit(model, sampler, basis, z, min_k)
                rec.certificate = {
                    "kind": "subharmonic",
                    "n": int(min_k),
                    "m": int(m),
                    "return_period": float(min_k * sampler.period),
                }
                records.append(rec)
                break
        if calls[0] > budget:
            break
    records.sort(key=lambda r: r.energy)
    return records
