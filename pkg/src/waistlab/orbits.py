"""Waist finding, Newton refinement of periodic orbits, and minmax saddles.

Loops are optimized in a flat chart: torus point coordinates are used as-is
(the action is periodic in them), sphere loops are optimized in ambient
coordinates through the row-normalization composite, whose exact gradient
action_gradient already supplies. The free period always rides along as
log p. A soft barrier mu/(p - tau_min) keeps minimizers above the period
floor; NotFound is a value, not an exception, while barrier collapse is.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .action import (
    DiscreteLoop,
    NotCriticalPoint,
    action,
    action_gradient,
    action_hessian_spectrum,
    concat_loops,
    iterate_loop,
    lift_points,
    loop_distance,
    resample_loop,
)
from . import manifold
from .lagrangian import IntegrationError, el_flow, energy, flow_rhs
from .manifold import LoopTooCoarse, normalize_rows, sphere_tangent_basis, torus_displacement

__all__ = [
    "OrbitRecord",
    "WaistNotFound",
    "DescentResult",
    "MinmaxResult",
    "StruweScan",
    "descend_loop",
    "refine_orbit",
    "find_waist",
    "mountain_pass",
    "struwe_scan",
    "waist_threshold_scan",
]

BIG = 1e10


@dataclass
class OrbitRecord:
    """A refined periodic orbit and its variational diagnostics."""

    loop: DiscreteLoop
    state0: np.ndarray
    period: float
    energy: float
    energy_residual: float
    action: float
    shooting_residual: float
    grad_norm: float
    index: int | None = None
    nullity_total: int | None = None
    multipliers: np.ndarray | None = None
    reduced_multipliers: np.ndarray | None = None
    stability: str | None = None
    is_waist: bool = False
    certificate: dict | None = None

    def summary(self) -> dict:
        return {
            "period": self.period,
            "energy": self.energy,
            "energy_residual": self.energy_residual,
            "action": self.action,
            "shooting_residual": self.shooting_residual,
            "grad_norm": self.grad_norm,
            "index": self.index,
            "nullity_total": self.nullity_total,
            "stability": self.stability,
            "is_waist": self.is_waist,
        }


@dataclass
class WaistNotFound:
    """Diagnostic outcome when no index-0, nullity-1 minimizer was certified."""

    message: str
    best_index: int | None = None
    best_action: float | None = None
    n_starts: int = 0
    collapsed_starts: int = 0


# ---------------------------------------------------------------------------
# flat chart helpers


def _flatten_loop(loop: DiscreteLoop) -> np.ndarray:
    return np.concatenate([loop.points.ravel(), [loop.log_period]])


def _loop_from_flat(space, x, n_pts, tag):
    d = space.dim
    pts = x[:-1].reshape(n_pts, d)
    return DiscreteLoop(space, pts, log_period=float(x[-1]),
                        tag=tag if space.is_torus else None)


def _value_and_grad(model, space, x, n_pts, tag, e, tau_min=None, mu=0.0):
    try:
        loop = _loop_from_flat(space, x, n_pts, tag)
    except LoopTooCoarse:
        return BIG, np.zeros_like(x)
    p = loop.period
    if tau_min is not None and p <= tau_min:
        return BIG, np.zeros_like(x)
    try:
        # optimizer trial points can momentarily blow up; overflow there is
        # data (a huge value), not a fault worth a warning per evaluation
        with np.errstate(over="ignore", invalid="ignore"):
            val = action(model, loop, e)
            g_pts, g_lp = action_gradient(model, loop, e)
        if not (np.isfinite(val) and np.all(np.isfinite(g_pts))
                and np.isfinite(g_lp)):
            return BIG, np.zeros_like(x)
    except LoopTooCoarse:
        return BIG, np.zeros_like(x)
    g = np.concatenate([g_pts.ravel(), [g_lp]])
    if space.is_sphere:
        norms = np.linalg.norm(x[:-1].reshape(n_pts, 3), axis=1)
        g[:-1] = (g_pts / norms[:, None]).ravel()
    if tau_min is not None and mu > 0.0:
        val += mu / (p - tau_min)
        g[-1] -= mu * p / (p - tau_min) ** 2
    return val, g


@dataclass
class DescentResult:
    loop: DiscreteLoop
    value: float
    grad_norm: float
    n_iter: int
    converged: bool


def descend_loop(model, loop: DiscreteLoop, e, maxiter=200, gtol=1e-7,
                 tau_min=None, mu=0.0, stop_below=None,
                 tau_max=None) -> DescentResult:
    """Quasi-Newton descent of S_e over (points, log p) from the given loop.

    stop_below ends the run early once the barrier-free action drops under
    that value (used by the negative-loop probe). tau_max caps the period
    hard, blocking runaway multi-wrap minimizing sequences.
    """
    space = loop.space
    n_pts = loop.n_points
    tag = loop.tag
    x = _flatten_loop(loop)
    bounds = None
    if tau_max is not None:
        bounds = [(None, None)] * (x.size - 1) + [(None, float(np.log(tau_max)))]
    total = 0
    chunk = 25 if stop_below is not None else maxiter
    while total < maxiter:
        res = minimize(
            lambda z: _value_and_grad(model, space, z, n_pts, tag, e, tau_min, mu),
            x, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": min(chunk, maxiter - total), "gtol": gtol,
                     "ftol": 1e-15},
        )
        x = res.x
        total += max(int(res.nit), 1)
        out = _loop_from_flat(space, x, n_pts, tag)
        if stop_below is not None and action(model, out, e) < stop_below:
            break
        if res.success or res.status == 0:
            break
        if "ABNORMAL" in str(res.message):
            break
    out = _loop_from_flat(space, x, n_pts, tag)
    val = action(model, out, e)
    g_pts, g_lp = action_gradient(model, out, e)
    gnorm = float(np.linalg.norm(np.concatenate([g_pts.ravel(), [g_lp]])))
    return DescentResult(loop=out, value=val, grad_norm=gnorm, n_iter=total,
                         converged=gnorm < 10 * gtol * max(1.0, abs(val)))


# ---------------------------------------------------------------------------
# multiple shooting


def _loop_states(model, loop: DiscreteLoop, m: int):
    """m phase states sampled around the loop with chord velocities."""
    n = loop.n_points
    p = loop.period
    dt = p / n
    idx = (np.arange(m) * n) // m
    pts = loop.points
    if model.space.is_torus:
        fwd = torus_displacement(pts, np.roll(pts, -1, axis=0))
        bwd = torus_displacement(np.roll(pts, 1, axis=0), pts)
        vel = (fwd + bwd) / (2 * dt)
    else:
        chord = np.roll(pts, -1, axis=0) - np.roll(pts, 1, axis=0)
        vel = chord - np.sum(chord * pts, axis=-1, keepdims=True) * pts
        vel /= 2 * dt
    return [np.concatenate([pts[i], vel[i]]) for i in idx]


def _energy_of_state(model, y):
    d = model.dim
    return float(energy(model, y[:d][None], y[d:][None])[0])


def _energy_grad(model, y):
    d = model.dim
    return np.concatenate([model.grad_potential(y[:d][None])[0], y[d:]])


def refine_orbit(model, guess: DiscreteLoop, e_target=None, n_segments=4,
                 max_iter=60, tol=1e-11, basin_bound=0.75,
                 resample_n=128, with_spectrum=True,
                 spectrum_grad_tol=3e-2) -> OrbitRecord:
    """Multiple-shooting Newton refinement of an approximately critical loop.

    Unknowns are n_segments phase states plus log p; residuals are segment
    flow matching, a phase anchor along the flow direction at the first
    state, sphere constraint rows, and (when e_target is given) an energy
    pin. Without a target the energy is measured, not imposed, and the
    reported energy residual is the conservation drift over one period.
    """
    space = model.space
    d = model.dim
    m = n_segments
    nd = 2 * d
    states = _loop_states(model, guess, m)
    if space.is_sphere:
        for y in states:
            y[:d] /= np.linalg.norm(y[:d])
            y[d:] -= (y[d:] @ y[:d]) * y[:d]
    log_p = guess.log_period
    rhs = flow_rhs(model)
    anchor_state = states[0].copy()
    f0 = rhs(anchor_state)

    def residuals_and_jac(states, log_p):
        p = float(np.exp(log_p))
        dt_seg = p / m
        rows = []
        n_unk = m * nd + 1
        ends, mats = [], []
        for j in range(m):
            fr = el_flow(model, states[j], dt_seg, with_linearization=True)
            ends.append(fr.y)
            mats.append(fr.monodromy)
        blocks = []
        jac = np.zeros((0, n_unk))
        for j in range(m):
            nxt = states[(j + 1) % m]
            rj = ends[j] - nxt
            if space.is_torus:
                rj[:d] = -torus_displacement(ends[j][:d], nxt[:d])
            blocks.append(rj)
            row = np.zeros((nd, n_unk))
            row[:, j * nd:(j + 1) * nd] = mats[j]
            k = (j + 1) % m
            row[:, k * nd:(k + 1) * nd] -= np.eye(nd)
            row[:, -1] = rhs(ends[j]) * dt_seg
            jac = np.vstack([jac, row])
        phase = np.zeros((1, n_unk))
        phase[0, :nd] = f0
        jac = np.vstack([jac, phase])
        blocks.append(np.array([f0 @ (states[0] - anchor_state)]))
        if e_target is not None:
            erow = np.zeros((1, n_unk))
            erow[0, :nd] = _energy_grad(model, states[0])
            jac = np.vstack([jac, erow])
            blocks.append(np.array([_energy_of_state(model, states[0]) - e_target]))
        if space.is_sphere:
            for j in range(m):
                q, v = states[j][:d], states[j][d:]
                crow = np.zeros((2, n_unk))
                crow[0, j * nd:j * nd + d] = q
                crow[1, j * nd:j * nd + d] = v
                crow[1, j * nd + d:(j + 1) * nd] = q
                jac = np.vstack([jac, crow])
                blocks.append(np.array([(q @ q - 1.0) / 2.0, q @ v]))
        return np.concatenate(blocks), jac

    res_norm = np.inf
    for _ in range(max_iter):
        r, jac = residuals_and_jac(states, log_p)
        res_norm = float(np.max(np.abs(r)))
        if res_norm < tol:
            break
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        alpha = 1.0
        improved = False
        for _bt in range(8):
            trial_states = [states[j] + alpha * step[j * nd:(j + 1) * nd] for j in range(m)]
            trial_logp = log_p + alpha * step[-1]
            try:
                r2, _ = residuals_and_jac(trial_states, trial_logp)
            except IntegrationError:
                alpha *= 0.5
                continue
            if np.max(np.abs(r2)) < res_norm:
                states, log_p = trial_states, trial_logp
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
    else:
        r, _ = residuals_and_jac(states, log_p)
        res_norm = float(np.max(np.abs(r)))
    if res_norm >= max(tol, 1e-8):
        raise RuntimeError(f"Newton stagnation: residual {res_norm:.3e}")

    p = float(np.exp(log_p))
    y0 = states[0]
    fr = el_flow(model, y0, p, with_action=True, dense=True)
    ts = np.arange(resample_n) * (p / resample_n)
    traj = fr.sol(ts).T
    pts = traj[:, :d]
    loop = DiscreteLoop(space, pts, log_period=log_p)
    e_meas = _energy_of_state(model, y0)
    e_end = _energy_of_state(model, fr.y)
    if e_target is not None:
        e_used = float(e_target)
        e_res = abs(e_meas - e_target)
    else:
        e_used = e_meas
        e_res = abs(e_end - e_meas)
    act = float(fr.action_integral + p * e_used)

    check = loop_distance(loop, resample_loop(guess, resample_n))
    if check > basin_bound:
        raise RuntimeError(f"left basin: moved {check:.3f} from the guess")

    g_pts, g_lp = action_gradient(model, loop, e_used)
    gnorm = float(np.linalg.norm(np.concatenate([g_pts.ravel(), [g_lp]])))
    rec = OrbitRecord(
        loop=loop, state0=y0, period=p, energy=e_used, energy_residual=e_res,
        action=act, shooting_residual=res_norm, grad_norm=gnorm,
    )
    if with_spectrum:
        try:
            rep = action_hessian_spectrum(model, loop, e_used,
                                          grad_tol=spectrum_grad_tol)
            rec.index = rep.index
            rec.nullity_total = rep.nullity_total
            rec.is_waist = rep.index == 0 and rep.nullity_total == 1
        except NotCriticalPoint:
            rec.index = None
    return rec


# ---------------------------------------------------------------------------
# waist finding


def _chart_directions(loop: DiscreteLoop, rng, n_samples):
    """Random unit directions in the loop's tangent chart (matches Hessian)."""
    if loop.space.is_torus:
        dim = loop.n_points * loop.space.dim + 1
        dirs = rng.standard_normal((n_samples, dim))
    else:
        dim = loop.n_points * 2 + 1
        dirs = rng.standard_normal((n_samples, dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _apply_chart(loop: DiscreteLoop, xi):
    n = loop.n_points
    if loop.space.is_torus:
        d = loop.space.dim
        pts = loop.points + xi[:-1].reshape(n, d)
        return DiscreteLoop(loop.space, pts, log_period=loop.log_period + xi[-1],
                            tag=loop.tag)
    bases = np.stack([sphere_tangent_basis(q) for q in loop.points])
    steps = np.einsum("nij,nj->ni", bases, xi[:-1].reshape(n, 2))
    pts = normalize_rows(loop.points + steps)
    return DiscreteLoop(loop.space, pts, log_period=loop.log_period + xi[-1])


def waist_certificate(model, loop: DiscreteLoop, e, kernel_basis, rho=3e-3,
                      n_samples=64, rng=None) -> dict:
    """Sampled rho-sphere test: S_e must exceed the center value all around.

    Near-kernel directions from the Hessian report are projected out of the
    sample directions, so the S^1 reparameterization mode cannot produce
    false negatives at finite resolution.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    base = action(model, loop, e)
    dirs = _chart_directions(loop, rng, n_samples)
    if kernel_basis is not None and kernel_basis.size:
        k = kernel_basis
        dirs = dirs - (dirs @ k) @ k.T
        nrm = np.linalg.norm(dirs, axis=1, keepdims=True)
        dirs = dirs[nrm[:, 0] > 1e-8] / nrm[nrm[:, 0] > 1e-8]
    margin = np.inf
    for xi in dirs:
        val = action(model, _apply_chart(loop, rho * xi), e)
        margin = min(margin, val - base)
    return {"rho": rho, "n_samples": int(dirs.shape[0]),
            "margin": float(margin), "passed": bool(margin > 0)}


def _waist_seed_family(model, e, n_points, winding, rng, n_seeds):
    from itertools import zip_longest

    from .critvals import _probe_seed_loops

    scope = "contractible" if winding is None else "all"
    fam = _probe_seed_loops(model, scope, rng, n_pts=n_points)
    if winding is not None:
        target = tuple(int(w) for w in winding)
        fam = [s for s in fam if s.tag == target]
        base = np.arange(n_points) / n_points
        d = model.dim
        for shift in rng.uniform(0, 1, size=(6, d)):
            pts = np.outer(base, np.array(target, dtype=float)) + shift
            pts += 0.03 * rng.standard_normal((n_points, d))
            fam.append(DiscreteLoop(model.space, pts, period=1.0 + rng.uniform(0, 2)))
    elif model.space.is_torus:
        # unrestricted search: the lowest waist on a torus may sit in a
        # non-trivial winding class (where loops cannot shrink away), so add
        # straight-line seeds for each elementary class alongside the
        # contractible shapes, interleaved to survive truncation
        d = model.dim
        base = np.arange(n_points) / n_points
        period = 1.0 / np.sqrt(2.0 * e) if e > 0 else 1.0
        extra = []
        for axis in range(d):
            for sign in (1.0, -1.0):
                k = np.zeros(d)
                k[axis] = sign
                for shift in rng.uniform(0, 1, size=(2, d)):
                    pts = np.outer(base, k) + shift
                    pts += 0.02 * rng.standard_normal((n_points, d))
                    extra.append(DiscreteLoop(model.space, pts, period=period))
        fam = [lp for pair in zip_longest(fam, extra) for lp in pair
               if lp is not None]
    return fam[:n_seeds] if len(fam) > n_seeds else fam


def _continuation_finisher(model, e, tau_min, budget, rng):
    """Seed the contractible waist basin from a just-below-threshold witness.

    Above the critical energy the contractible infimum is point-loop
    collapse, so random starts drain to the period floor. The waist basin
    is reached by descending a negative loop found slightly below threshold
    and marching the minimizer upward in energy.
    """
    from .critvals import negative_loop_via_descent
    if e <= 0:
        return None
    attempts = 0
    for frac in (0.95, 0.9, 0.8, 0.65, 0.5, 0.3):
        found, wit = negative_loop_via_descent(
            model, frac * e, "contractible", rng, budget=max(budget, 300)
        )
        if not found:
            continue
        attempts += 1
        cur = wit
        ok = True
        for e_k in np.linspace(frac * e, e, 5)[1:]:
            out = descend_loop(model, cur, float(e_k), maxiter=max(budget, 200),
                               tau_min=tau_min, tau_max=16.0)
            cur = out.loop
            if cur.period - tau_min < 0.05 * max(tau_min, 0.1):
                ok = False
                break
        if ok:
            final = descend_loop(model, cur, e, maxiter=max(budget, 200),
                                 tau_min=tau_min, tau_max=16.0, gtol=1e-9)
            if final.grad_norm < 1e-5:
                return final
        if attempts >= 3:
            break
    return None


def find_waist(model, e, tau_min=0.05, seeds=32, winding=None, budget=150,
               n_points=48, rng=None, rho=3e-3, certificate_samples=64,
               mu_ladder=(1e-2, 1e-4, 1e-6, 1e-8), top_k=6,
               resample_n=128):
    """Multistart barrier minimization of S_e; certified waists only.

    Returns the lowest-action OrbitRecord with index 0, nullity 1 and a
    positive neighborhood margin, or a WaistNotFound diagnostic. Raises
    "barrier collapse" when every start drove the period to the floor.

    winding=None searches without class restriction: on tori the seed family
    mixes contractible shapes with straight seeds in every elementary winding
    class, and a below-threshold witness continuation backs up the
    contractible direction. Pass a winding tuple to restrict the search to
    one class.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    fam = _waist_seed_family(model, e, n_points, winding, rng, seeds)
    if not fam:
        return WaistNotFound(message="no seeds generated", n_starts=0)
    finishers = []
    collapsed = 0
    for sd in fam:
        cur = sd
        collapsed_here = False
        for mu in mu_ladder:
            out = descend_loop(model, cur, e, maxiter=budget, tau_min=tau_min,
                               mu=mu)
            cur = out.loop
            if cur.period - tau_min < 0.05 * max(tau_min, 0.1):
                collapsed_here = True
                break
        if collapsed_here:
            collapsed += 1
            continue
        final = descend_loop(model, cur, e, maxiter=budget, tau_min=tau_min,
                             mu=0.0, gtol=1e-9)
        if final.grad_norm < 1e-5:
            finishers.append(final)
    if winding is None and not finishers:
        cont = _continuation_finisher(model, e, tau_min, budget, rng)
        if cont is not None:
            finishers.append(cont)
    if not finishers:
        if collapsed == len(fam) and collapsed > 0:
            raise RuntimeError(
                "barrier collapse: every start drove the period to the floor"
            )
        return WaistNotFound(
            message="no start converged to a critical loop",
            n_starts=len(fam), collapsed_starts=collapsed,
        )

    finishers.sort(key=lambda r: r.value)
    distinct = []
    for cand in finishers:
        if all(loop_distance(cand.loop, kept.loop) > 1e-3 for kept in distinct):
            distinct.append(cand)
        if len(distinct) >= top_k:
            break

    best_reject = None
    for cand in distinct:
        try:
            rec = refine_orbit(model, cand.loop, e_target=e,
                               resample_n=resample_n, with_spectrum=False)
        except (RuntimeError, IntegrationError):
            continue
        try:
            rep = action_hessian_spectrum(model, rec.loop, e, grad_tol=3e-2)
        except NotCriticalPoint:
            continue
        rec.index = rep.index
        rec.nullity_total = rep.nullity_total
        if rep.index != 0 or rep.nullity_total != 1:
            if best_reject is None or rec.action < best_reject.action:
                best_reject = rec
            continue
        cert = waist_certificate(model, rec.loop, e, rep.kernel_basis,
                                 rho=rho, n_samples=certificate_samples, rng=rng)
        if not cert["passed"]:
            if best_reject is None or rec.action < best_reject.action:
                best_reject = rec
            continue
        rec.is_waist = True
        rec.certificate = cert
        return rec
    return WaistNotFound(
        message="no candidate passed the index/nullity/neighborhood tests",
        best_index=None if best_reject is None else best_reject.index,
        best_action=None if best_reject is None else best_reject.action,
        n_starts=len(fam), collapsed_starts=collapsed,
    )


# ---------------------------------------------------------------------------
# mountain pass


@dataclass
class MinmaxResult:
    s_value: float
    knot_loop: DiscreteLoop
    orbit: OrbitRecord | None
    converged: bool
    refined: bool
    n_sweeps: int
    history: list = field(default_factory=list)
    knots: list = field(default_factory=list)


def _loop_length(loop: DiscreteLoop) -> float:
    """Geometric length of the polyline (nearest-image segments on tori)."""
    if loop.space.is_torus:
        seg = torus_displacement(loop.points, np.roll(loop.points, -1, axis=0))
    else:
        seg = np.roll(loop.points, -1, axis=0) - loop.points
    return float(np.sum(np.linalg.norm(seg, axis=1)))


def _align_loops(a: DiscreteLoop, b: DiscreteLoop):
    """Aligned flat representations (lifted on tori) of two same-class loops.

    Both loops are resampled to a common point count adequate for the
    longer one: enough points that mean segments stay near a quarter of
    the winding guard, so interpolated strings between the two stay
    admissible with room for descent.
    """
    n = a.n_points
    if a.space.is_torus:
        needed = int(np.ceil(max(_loop_length(a), _loop_length(b))
                             / (0.75 * manifold.WINDING_GUARD)))
        n = max(n, needed)
    if a.n_points != n:
        a = resample_loop(a, n)
    if b.n_points != n:
        b = resample_loop(b, n)
    if a.space.is_torus:
        la, _ = lift_points(a)
        best = None
        for s in range(n):
            rolled = DiscreteLoop(b.space, np.roll(b.points, s, axis=0),
                                  log_period=b.log_period, tag=b.tag)
            lb, _ = lift_points(rolled)
            z = np.round(np.mean(la - lb, axis=0))
            dist = np.sqrt(np.mean(np.sum((la - lb - z) ** 2, axis=1)))
            if best is None or dist < best[0]:
                best = (dist, lb + z)
        return la, best[1]
    pa = a.points
    best = None
    for s in range(n):
        pb = np.roll(b.points, s, axis=0)
        dist = np.sqrt(np.mean(np.sum((pa - pb) ** 2, axis=1)))
        if best is None or dist < best[0]:
            best = (dist, pb)
    return pa, best[1]


def _knot_metric(x, y, n, d):
    dp = np.sqrt(np.mean(np.sum((x[:-1].reshape(n, d) - y[:-1].reshape(n, d)) ** 2, axis=1)))
    return dp + abs(x[-1] - y[-1])


def _knot_loop(space, x, n, tag):
    d = space.dim
    pts = x[:-1].reshape(n, d)
    return DiscreteLoop(space, pts, log_period=float(x[-1]),
                        tag=tag if space.is_torus else None)


def _class_representative(model, e, tag, n_points, rng, budget=200):
    """Best descended straight representative of a torus winding class."""
    target = tuple(int(t) for t in tag)
    k = np.array(target, dtype=float)
    length = max(float(np.linalg.norm(k)), 1e-9)
    period = length / np.sqrt(2.0 * e) if e > 0 else length
    base = np.arange(n_points) / n_points
    d = model.dim
    best = None
    for shift in rng.uniform(0, 1, size=(6, d)):
        pts = np.outer(base, k) + shift + 0.02 * rng.standard_normal((n_points, d))
        seed = DiscreteLoop(model.space, pts, period=period)
        try:
            out = descend_loop(model, seed, e, maxiter=budget,
                               tau_min=0.05, tau_max=32.0)
        except LoopTooCoarse:
            continue
        if out.loop.tag != target:
            continue
        if best is None or out.value < best.value:
            best = out
    return None if best is None else best.loop


def companion_below(model, generator: DiscreteLoop, m: int, e: float,
                    rng=None, budget=200, margin=None):
    """Fixed loop strictly below S_e(generator^m) in the same winding class.

    Sublevel endpoint for iterate minmax in a nontrivial winding class,
    where generator^m and generator sit in different components: below the
    critical value the class minimizer is undercut by grafting k wrap pairs
    (generator, opposite-class orbit) onto it — the drain mechanism that
    defines the critical value — which preserves the class and lowers the
    action linearly in k. k escalates until the measured action clears the
    margin; raises when the opposite class has no descended representative
    or escalation hits the string resolution cap first.

    Returns (loop, info), info recording the escalation for provenance.
    """
    rng = np.random.default_rng() if rng is None else rng
    tag = generator.tag
    if tag is None or not any(tag):
        raise ValueError("companion construction needs a winding generator")
    loop_m = iterate_loop(generator, m)
    s_ref = action(model, loop_m, e)
    if margin is None:
        margin = max(0.25 * abs(action(model, generator, e)), 1e-3)
    opp = _class_representative(model, e, tuple(-t for t in tag),
                                generator.n_points, rng, budget=budget)
    if opp is None:
        raise RuntimeError(
            "no sublevel companion: opposite-class descent failed")
    len_g = float(np.sum(np.linalg.norm(lift_points(generator)[1], axis=1)))
    len_o = float(np.sum(np.linalg.norm(lift_points(opp)[1], axis=1)))
    n_align = loop_m.n_points
    k = 1
    while k <= 64:
        # the string aligner resamples the companion down to the iterate's
        # point count; stop before segments approach the winding guard
        length = (m + k) * len_g + k * len_o + 2.0
        if length / n_align >= 0.35:
            break
        cand = concat_loops(iterate_loop(generator, m + k),
                            iterate_loop(opp, k))
        val = action(model, cand, e)
        if val < s_ref - margin:
            info = {"wrap_pairs": int(k),
                    "companion_action": float(val),
                    "iterate_action": float(s_ref),
                    "opposite_action": float(action(model, opp, e))}
            return cand, info
        k *= 2
    raise RuntimeError(
        "no sublevel companion: wrap-pair escalation hit the resolution cap "
        "before undercutting the iterate")


def mountain_pass(model, e, loop_a: DiscreteLoop, loop_b: DiscreteLoop,
                  n_knots=16, budget=200, descent_steps=2, gtol=2e-3,
                  tear_factor=8.0, rng=None, jitter=0.0,
                  refine=True, init_knots=None) -> MinmaxResult:
    """Elastic-string minmax between two loops in the same component.

    loop_a is a local minimizer; loop_b is either a second minimizer or any
    fixed lower-action loop standing in for a sublevel-set endpoint. Knots
    live in the flat chart (lifted coordinates on tori); every sweep
    descends each interior knot a few Armijo steps and re-equidistributes
    along the string in the loop-space metric. Converges when the projected
    gradient at the maximal knot falls below gtol. init_knots warm-starts
    the interior knots (a list from a previous MinmaxResult with matching
    shapes), used by energy continuation scans.
    """
    if loop_a.space.is_torus and loop_a.tag != loop_b.tag:
        raise ValueError("endpoints in different components: "
                         f"{loop_a.tag} vs {loop_b.tag}")
    if n_knots < 16:
        raise ValueError("need at least 16 knots")
    space = loop_a.space
    d = space.dim
    pa, pb = _align_loops(loop_a, loop_b)
    n = pa.shape[0]
    tag = loop_a.tag
    xa = np.concatenate([pa.ravel(), [loop_a.log_period]])
    xb = np.concatenate([pb.ravel(), [loop_b.log_period]])
    ts = np.linspace(0.0, 1.0, n_knots)
    knots = [xa * (1 - t) + xb * t for t in ts]
    if space.is_sphere:
        for j in range(n_knots):
            pts = normalize_rows(knots[j][:-1].reshape(n, d))
            knots[j] = np.concatenate([pts.ravel(), [knots[j][-1]]])
    if init_knots is not None and len(init_knots) == n_knots - 2 \
            and all(np.shape(k) == xa.shape for k in init_knots):
        cand = [xa] + [np.asarray(k, dtype=float).copy()
                       for k in init_knots] + [xb]
        gaps = np.array([_knot_metric(cand[j], cand[j + 1], n, d)
                         for j in range(n_knots - 1)])
        spacing0 = max(_knot_metric(xa, xb, n, d) / (n_knots - 1), 1e-9)
        # a stale warm start (endpoints re-aligned since it was recorded)
        # shows up as an oversized gap; fall back to fresh interpolation
        if float(gaps.max()) <= tear_factor * max(spacing0,
                                                  float(np.median(gaps))):
            knots = cand
    if jitter > 0.0:
        rng = np.random.default_rng(0) if rng is None else rng
        for j in range(1, n_knots - 1):
            knots[j] = knots[j] + jitter * rng.standard_normal(knots[j].size)

    def value(x):
        try:
            return action(model, _knot_loop(space, x, n, tag), e)
        except LoopTooCoarse:
            # a trial step stretched some segment past the winding guard;
            # an infinite value makes the line search back off
            return np.inf

    def grad(x):
        lp = _knot_loop(space, x, n, tag)
        g_pts, g_lp = action_gradient(model, lp, e)
        g = np.concatenate([g_pts.ravel(), [g_lp]])
        if space.is_sphere:
            norms = np.linalg.norm(x[:-1].reshape(n, d), axis=1)
            g[:-1] = (g_pts / norms[:, None]).ravel()
        return g

    step_mem = np.full(n_knots, 0.05)
    history = []
    if not (np.isfinite(value(xa)) and np.isfinite(value(xb))):
        raise ValueError("endpoint loop too coarse at the string resolution; "
                         "increase the orbit point count")
    vals = np.array([value(x) for x in knots])
    base_spacing = max(_knot_metric(xa, xb, n, d) / (n_knots - 1), 1e-9)
    # knots already below both endpoints are inert: they cannot carry the
    # max, and descending them further just chases unbounded valleys and
    # stretches the string until it tears
    floor_value = min(value(xa), value(xb))
    converged = False
    sweeps = 0
    for sweep in range(budget):
        sweeps = sweep + 1
        for j in range(1, n_knots - 1):
            x = knots[j]
            vx = value(x)
            if vx <= floor_value or not np.isfinite(vx):
                continue
            # descend transverse to the string only: the tangential
            # component just slides the parametrization and stalls the ridge
            t_dir = knots[j + 1] - knots[j - 1]
            t_nrm = np.linalg.norm(t_dir)
            t_hat = t_dir / t_nrm if t_nrm > 0 else None
            for _ in range(descent_steps):
                g = grad(x)
                if t_hat is not None:
                    g = g - (g @ t_hat) * t_hat
                alpha = step_mem[j]
                fx = value(x)
                gn2 = float(g @ g)
                accepted = False
                for _bt in range(10):
                    x_try = x - alpha * g
                    f_try = value(x_try)
                    if f_try <= fx - 1e-4 * alpha * gn2:
                        x = x_try
                        step_mem[j] = min(alpha * 1.5, 0.2)
                        accepted = True
                        break
                    alpha *= 0.5
                if not accepted:
                    step_mem[j] = max(step_mem[j] * 0.5, 1e-8)
                    break
            if space.is_sphere:
                pts = normalize_rows(x[:-1].reshape(n, d))
                x = np.concatenate([pts.ravel(), [x[-1]]])
            knots[j] = x

        dists = np.array([_knot_metric(knots[j], knots[j + 1], n, d)
                          for j in range(n_knots - 1)])
        if float(dists.max()) > tear_factor * max(base_spacing, float(np.median(dists))):
            raise RuntimeError("string tore: adjacent knots separated beyond bound")
        cum = np.concatenate([[0.0], np.cumsum(dists)])
        total = cum[-1]
        if total > 0:
            targets = np.linspace(0.0, total, n_knots)
            new_knots = [knots[0]]
            for t in targets[1:-1]:
                k = int(np.searchsorted(cum, t, side="right") - 1)
                k = min(k, n_knots - 2)
                w = (t - cum[k]) / max(dists[k], 1e-30)
                x = knots[k] * (1 - w) + knots[k + 1] * w
                if space.is_sphere:
                    pts = normalize_rows(x[:-1].reshape(n, d))
                    x = np.concatenate([pts.ravel(), [x[-1]]])
                new_knots.append(x)
            new_knots.append(knots[-1])
            knots = new_knots

        vals = np.array([value(x) for x in knots])
        jmax = int(np.argmax(vals))
        history.append({"sweep": sweep, "s_value": float(vals[jmax]),
                        "knot": jmax})
        if 0 < jmax < n_knots - 1 and np.isfinite(vals[jmax]):
            g = grad(knots[jmax])
            t_dir = knots[jmax + 1] - knots[jmax - 1]
            t_nrm = np.linalg.norm(t_dir)
            if t_nrm > 0:
                g = g - (g @ t_dir / t_nrm**2) * t_dir
            if np.linalg.norm(g) < gtol:
                converged = True
                break

    jmax = int(np.argmax(vals))
    s_value = float(vals[jmax])
    knot_loop = _knot_loop(space, knots[jmax], n, tag)
    if s_value <= max(value(xa), value(xb)):
        raise RuntimeError("minmax value does not exceed endpoint actions")
    orbit = None
    refined = False
    if converged and refine and 0 < jmax < n_knots - 1:
        try:
            orbit = refine_orbit(model, knot_loop, e_target=e, basin_bound=2.0)
            refined = True
        except (RuntimeError, IntegrationError):
            orbit = None
    return MinmaxResult(
        s_value=s_value, knot_loop=knot_loop, orbit=orbit,
        converged=converged, refined=refined, n_sweeps=sweeps,
        history=history, knots=[k.copy() for k in knots[1:-1]],
    )


# ---------------------------------------------------------------------------
# Struwe scan


@dataclass
class StruweScan:
    m: int
    energies: list
    values: list
    converged: list
    monotone: bool
    top_actions: list = field(default_factory=list)
    companion_actions: list = field(default_factory=list)
    companion_kind: str = "waist"


def struwe_scan(model, m, energies, cylinder, n_knots=16, budget=200,
                rng=None, rel_tol=1e-3, companion_budget=200,
                record=None) -> StruweScan:
    """Minmax values s_e(m) for the waist's m-fold iterate across energies.

    The waist is continued down the energy ladder from the cylinder sample
    nearest the top energy, so its parametrization varies smoothly with e.
    Each energy runs the string between the m-fold iterate and a lower-action endpoint
    in the iterate's component: gamma_e itself when both share a component
    (contractible waists), otherwise a fixed sublevel loop grafted by
    companion_below (winding waists, whose iterates change component). The
    sublevel companion is built once at the top energy and reused: a fixed
    loop's action falls with e at rate equal to its period, and the long
    companion far outpaces the iterate, so it stays strictly below across
    the whole ladder (checked per energy). A fixed b-endpoint also keeps
    consecutive strings geometrically consistent, so each energy
    warm-starts from the previous relaxed knots. record, when given, is
    called with a small dict after each string for telemetry.
    """
    if m < 2:
        raise ValueError("degenerate endpoints: iterate order must be >= 2")
    rng = np.random.default_rng() if rng is None else rng
    energies = sorted(float(e) for e in energies)
    sample_es = np.array([s[0] for s in cylinder.samples])
    if energies[0] < sample_es.min() - 1e-9 or energies[-1] > sample_es.max() + 1e-9:
        raise ValueError("energy list extends beyond the cylinder range")

    # continue the waist down the ladder from a single seed so the orbit's
    # parametrization (phase) varies smoothly with e; per-energy lookups
    # from different cylinder samples would jump phase and invalidate the
    # warm-started strings below
    k_top = int(np.argmin(np.abs(sample_es - energies[-1])))
    gamma_top = cylinder.samples[k_top][1].loop
    if abs(sample_es[k_top] - energies[-1]) > 1e-12:
        gamma_top = refine_orbit(model, gamma_top, e_target=energies[-1],
                                 with_spectrum=False, basin_bound=2.0).loop
    gammas = {}
    g = gamma_top
    for e in reversed(energies):
        if abs(e - energies[-1]) > 1e-12:
            g = refine_orbit(model, g, e_target=e, with_spectrum=False,
                             basin_bound=2.0).loop
        gammas[e] = g

    companion_kind = "waist"
    fixed_companion = None
    if gamma_top.space.is_torus and gamma_top.tag is not None and any(gamma_top.tag):
        fixed_companion, _ = companion_below(model, gamma_top, m, energies[-1],
                                             rng=rng, budget=companion_budget)
        companion_kind = "sublevel"

    values, converged, tops, comps = [], [], [], []
    prev_knots = None
    for e in energies:
        gamma = gammas[e]
        loop_a = iterate_loop(gamma, m)
        top = action(model, loop_a, e)
        if fixed_companion is not None:
            loop_b = fixed_companion
            comp = action(model, loop_b, e)
            if comp >= top:
                raise RuntimeError(
                    "sublevel companion not below the iterate at "
                    f"e={e:.6g}: {comp:.6g} >= {top:.6g}")
        else:
            loop_b = gamma
            comp = action(model, loop_b, e)
        try:
            res = mountain_pass(model, e, loop_a, loop_b, n_knots=n_knots,
                                budget=budget, rng=rng, refine=False,
                                init_knots=prev_knots)
        except RuntimeError as err:
            if prev_knots is None or "string tore" not in str(err):
                raise
            # warm start went stale across the energy step; restart cold
            res = mountain_pass(model, e, loop_a, loop_b, n_knots=n_knots,
                                budget=budget, rng=rng, refine=False)
        prev_knots = res.knots
        values.append(res.s_value)
        converged.append(res.converged)
        tops.append(top)
        comps.append(comp)
        if record is not None:
            record({"e": float(e), "s_value": float(res.s_value),
                    "converged": bool(res.converged),
                    "n_sweeps": int(res.n_sweeps)})
    monotone = all(
        values[i + 1] >= values[i] - rel_tol * max(1.0, abs(values[i]))
        for i in range(len(values) - 1)
    )
    return StruweScan(m=m, energies=energies, values=values,
                      converged=converged, monotone=monotone,
                      top_actions=tops, companion_actions=comps,
                      companion_kind=companion_kind)


# ---------------------------------------------------------------------------
# empirical waist threshold


def waist_threshold_scan(model, e_start, e_step, max_steps=8, **waist_kwargs):
    """Largest energy in an upward ladder where find_waist still succeeds."""
    last_good = None
    e = e_start
    for _ in range(max_steps):
        try:
            out = find_waist(model, e, **waist_kwargs)
        except RuntimeError:
            break
        if isinstance(out, WaistNotFound):
            break
        last_good = e
        e += e_step
    return last_good
