"""Discrete free-period action functional on loop space.

A loop is N points on the configuration space plus a period p stored as
log p, so the period stays positive under unconstrained optimization. The
action uses the midpoint rule: chord velocities v_k = disp(q_k, q_{k+1})/dt
with dt = p/N, Lagrangian evaluated at segment midpoints, plus the p*e
free-period term:

    S_e = dt * sum_k L(m_k, v_k) + p * e.

On the sphere the chord is projected to the tangent plane at the retracted
segment midpoint. Gradients are exact (chain rule through the wrap/retraction),
which makes the period component p*(e - mean discrete energy): period
stationarity is exactly the mean-energy condition. The Hessian is assembled
by central differences of the exact gradient in per-point tangent charts, so
sphere spectra see the curvature terms and no spurious radial modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import manifold
from .lagrangian import LagrangianModel, dL_dq, dL_dv, energy, lagrangian_value
from .manifold import (
    ConfigSpace,
    LoopTooCoarse,
    normalize_rows,
    sphere_tangent_basis,
    torus_displacement,
    torus_wrap,
)

__all__ = [
    "DiscreteLoop",
    "ActionReport",
    "NotCriticalPoint",
    "action",
    "action_gradient",
    "action_hessian_spectrum",
    "iterate_loop",
    "reverse_loop",
    "concat_loops",
    "refine_loop",
    "resample_loop",
    "lift_points",
    "loop_distance",
    "gradient_norm",
    "discrete_circulation",
    "mean_discrete_energy",
]

MIN_POINTS = 8


class NotCriticalPoint(ValueError):
    """Hessian spectra are only meaningful near critical points."""


class DiscreteLoop:
    """Closed polyline loop with a free period.

    points: (N, dim) array; torus coordinates are wrapped to [0,1)^d and
    sphere points renormalized to the unit sphere at construction. tag is
    the integer winding vector on tori (computed from the points when not
    supplied) and None on the sphere.
    """

    __slots__ = ("space", "points", "log_period", "tag")

    def __init__(self, space: ConfigSpace, points, period=None, log_period=None, tag=None):
        pts = np.array(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] < MIN_POINTS:
            raise ValueError(f"loop needs at least {MIN_POINTS} points, got {pts.shape[0]}")
        if pts.shape[1] != space.dim:
            raise ValueError(f"points have dim {pts.shape[1]}, space has dim {space.dim}")
        if (period is None) == (log_period is None):
            raise ValueError("specify exactly one of period, log_period")
        if period is not None:
            if period <= 0:
                raise ValueError("period must be positive")
            log_period = float(np.log(period))
        self.space = space
        self.log_period = float(log_period)
        if space.is_torus:
            self.points = torus_wrap(pts)
            self.tag = manifold.winding_vector(self.points) if tag is None else tuple(int(c) for c in tag)
        else:
            self.points = normalize_rows(pts)
            self.tag = None

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def period(self) -> float:
        return float(np.exp(self.log_period))

    def copy(self) -> "DiscreteLoop":
        return DiscreteLoop(self.space, self.points.copy(), log_period=self.log_period, tag=self.tag)

    def __repr__(self):
        return (
            f"DiscreteLoop(space={self.space.kind}, N={self.n_points}, "
            f"period={self.period:.6g}, tag={self.tag})"
        )


# ---------------------------------------------------------------------------
# segment geometry


def _torus_segments(points):
    disp = torus_displacement(points, np.roll(points, -1, axis=0))
    if np.any(np.abs(disp) >= manifold.WINDING_GUARD):
        raise LoopTooCoarse("loop too coarse: refine before evaluating the action")
    mid = points + 0.5 * disp
    return disp, mid


def _sphere_segments(points):
    nxt = np.roll(points, -1, axis=0)
    s = points + nxt
    n = np.sqrt(np.sum(s * s, axis=-1))
    if np.any(n < 1e-12):
        raise manifold.RetractionBreakdown("retraction breakdown: antipodal loop segment")
    mhat = s / n[:, None]
    chord = nxt - points
    w = chord - np.sum(chord * mhat, axis=-1, keepdims=True) * mhat
    return s, n, mhat, chord, w


def _segment_data(loop: DiscreteLoop):
    """Common evaluation data: (midpoints, velocities, dt, extras)."""
    p = loop.period
    dt = p / loop.n_points
    if loop.space.is_torus:
        disp, mid = _torus_segments(loop.points)
        return mid, disp / dt, dt, None
    s, n, mhat, chord, w = _sphere_segments(loop.points)
    return mhat, w / dt, dt, (s, n, chord, w)


def action(model: LagrangianModel, loop: DiscreteLoop, e: float) -> float:
    """Discrete free-period action S_e of the loop."""
    mid, vel, dt, _ = _segment_data(loop)
    return float(dt * np.sum(lagrangian_value(model, mid, vel)) + loop.period * e)


def mean_discrete_energy(model: LagrangianModel, loop: DiscreteLoop) -> float:
    mid, vel, dt, _ = _segment_data(loop)
    return float(np.mean(energy(model, mid, vel)))


def discrete_circulation(model: LagrangianModel, loop: DiscreteLoop) -> float:
    """Midpoint-rule circulation sum_k <theta(m_k), delta_k>; period-free."""
    mid, vel, dt, _ = _segment_data(loop)
    return float(dt * np.sum(np.sum(model.theta(mid) * vel, axis=-1)))


def action_gradient(model: LagrangianModel, loop: DiscreteLoop, e: float):
    """Exact gradient of S_e: ((N, dim) point part, scalar log-period part).

    Torus: plain partial derivatives. Sphere: the gradient of the action
    composed with row normalization; at on-sphere points it is tangent to
    the sphere at every loop point, so ambient finite differences of the
    normalized composite reproduce it. The log-period component equals
    p * (e - mean discrete energy).
    """
    p = loop.period
    n_pts = loop.n_points
    dt = p / n_pts
    if loop.space.is_torus:
        disp, mid = _torus_segments(loop.points)
        vel = disp / dt
        lq = dL_dq(model, mid, vel)
        lv = dL_dv(model, mid, vel)
        g_pts = 0.5 * dt * (np.roll(lq, 1, axis=0) + lq) + (np.roll(lv, 1, axis=0) - lv)
    else:
        s, n, mhat, chord, w = _sphere_segments(loop.points)
        vel = w / dt
        gq = dL_dq(model, mhat, vel)
        gv = dL_dv(model, mhat, vel)
        gv_m = np.sum(gv * mhat, axis=-1, keepdims=True)
        gq_m = np.sum(gq * mhat, axis=-1, keepdims=True)
        c_m = np.sum(chord * mhat, axis=-1, keepdims=True)
        p_gv = gv - gv_m * mhat
        p_gq = gq - gq_m * mhat
        u = (dt * p_gq - gv_m * w - c_m * p_gv) / n[:, None]
        da = u - p_gv  # d(segment)/d(first endpoint)
        db = u + p_gv  # d(segment)/d(second endpoint)
        g_raw = np.roll(db, 1, axis=0) + da
        g_pts = g_raw - np.sum(g_raw * loop.points, axis=-1, keepdims=True) * loop.points
        mid = mhat
    g_logp = p * (e - float(np.mean(energy(model, mid, vel))))
    return g_pts, g_logp


def _flatten_gradient(g_pts, g_logp):
    return np.concatenate([g_pts.ravel(), [g_logp]])


def gradient_norm(model, loop, e) -> float:
    g_pts, g_logp = action_gradient(model, loop, e)
    return float(np.linalg.norm(_flatten_gradient(g_pts, g_logp)))


# ---------------------------------------------------------------------------
# charts for Hessian assembly


def _tangent_bases(loop: DiscreteLoop):
    if loop.space.is_torus:
        return None
    return np.stack([sphere_tangent_basis(q) for q in loop.points], axis=0)  # (N, 3, 2)


def _chart_dim(loop: DiscreteLoop) -> int:
    d_free = loop.points.shape[1] if loop.space.is_torus else 2
    return loop.n_points * d_free + 1


def _chart_apply(loop: DiscreteLoop, bases, xi):
    """Map chart coordinates xi to a (points, log_period) pair."""
    n_pts = loop.n_points
    if loop.space.is_torus:
        d = loop.points.shape[1]
        pts = loop.points + xi[:-1].reshape(n_pts, d)
        return pts, loop.log_period + xi[-1], None
    steps = np.einsum("nij,nj->ni", bases, xi[:-1].reshape(n_pts, 2))
    raw = loop.points + steps
    norms = np.sqrt(np.sum(raw * raw, axis=-1))
    return raw / norms[:, None], loop.log_period + xi[-1], norms


def _chart_gradient(model, loop: DiscreteLoop, e, bases, xi):
    pts, logp, norms = _chart_apply(loop, bases, xi)
    moved = DiscreteLoop(loop.space, pts, log_period=logp,
                         tag=loop.tag if loop.space.is_torus else None)
    g_pts, g_logp = action_gradient(model, moved, e)
    if loop.space.is_torus:
        return _flatten_gradient(g_pts, g_logp)
    pulled = np.einsum("nij,ni->nj", bases, g_pts) / norms[:, None]
    return _flatten_gradient(pulled, g_logp)


@dataclass
class ActionReport:
    """Spectral summary of the discrete second variation at a loop."""

    value: float
    grad_norm: float
    index: int
    nullity_total: int
    spectrum_edge: np.ndarray
    eigenvalues: np.ndarray
    tol_zero: float
    fixed_period: bool
    kernel_basis: np.ndarray | None = None


def action_hessian_spectrum(
    model: LagrangianModel,
    loop: DiscreteLoop,
    e: float,
    *,
    grad_tol: float = 1e-4,
    tol_zero: float = 1e-6,
    fixed_period: bool = False,
    fd_step: float = 1e-5,
    keep_kernel: bool = True,
) -> ActionReport:
    """Dense eigendecomposition of the discrete Hessian of S_e.

    The loop must be approximately critical (gradient norm below grad_tol).
    Columns come from central differences of the exact gradient in per-point
    tangent charts; the matrix is symmetrized before eigh. Eigenvalues with
    |lambda| <= tol_zero * spectral_norm count as zero (nullity); negative
    ones count toward the index. fixed_period freezes log p and drops its
    row/column, giving the fixed-period index.
    """
    g_pts, g_logp = action_gradient(model, loop, e)
    gnorm = float(np.linalg.norm(_flatten_gradient(g_pts, g_logp)))
    if gnorm > grad_tol:
        raise NotCriticalPoint(
            f"not a critical point: gradient norm {gnorm:.3e} exceeds {grad_tol:.3e}"
        )

    bases = _tangent_bases(loop)
    nfree = _chart_dim(loop)
    cols = nfree - 1 if fixed_period else nfree
    hess = np.empty((cols, cols))
    xi = np.zeros(nfree)
    for j in range(cols):
        xi[j] = fd_step
        g_plus = _chart_gradient(model, loop, e, bases, xi)
        xi[j] = -fd_step
        g_minus = _chart_gradient(model, loop, e, bases, xi)
        xi[j] = 0.0
        col = (g_plus - g_minus) / (2.0 * fd_step)
        hess[:, j] = col[:cols]
    hess = 0.5 * (hess + hess.T)

    evals, evecs = np.linalg.eigh(hess)
    scale = float(np.max(np.abs(evals))) if evals.size else 0.0
    cut = tol_zero * max(scale, 1e-300)
    index = int(np.sum(evals < -cut))
    nullity = int(np.sum(np.abs(evals) <= cut))
    edge = evals[:5].copy()
    kernel = None
    if keep_kernel and nullity > 0:
        sel = np.abs(evals) <= cut
        kernel = evecs[:, sel].copy()
    return ActionReport(
        value=action(model, loop, e),
        grad_norm=gnorm,
        index=index,
        nullity_total=nullity,
        spectrum_edge=edge,
        eigenvalues=evals,
        tol_zero=cut,
        fixed_period=fixed_period,
        kernel_basis=kernel,
    )


# ---------------------------------------------------------------------------
# loop surgery


def iterate_loop(loop: DiscreteLoop, m: int) -> DiscreteLoop:
    """m-fold cover of the loop: points tiled m times, period multiplied by m."""
    if m < 1:
        raise ValueError("iterate count must be >= 1")
    pts = np.tile(loop.points, (m, 1))
    tag = None if loop.tag is None else tuple(m * c for c in loop.tag)
    return DiscreteLoop(loop.space, pts, log_period=loop.log_period + np.log(m), tag=tag)


def reverse_loop(loop: DiscreteLoop) -> DiscreteLoop:
    """Orientation reversal: same base point, reversed cyclic order, same period."""
    pts = np.concatenate([loop.points[:1], loop.points[:0:-1]], axis=0)
    tag = None if loop.tag is None else tuple(-c for c in loop.tag)
    return DiscreteLoop(loop.space, pts, log_period=loop.log_period, tag=tag)


def _bridge_points(space, q0, q1, step):
    """Interior points of a straight bridge from q0 to q1, spaced <= step."""
    if space.is_torus:
        disp = torus_displacement(q0, q1)
        span = float(np.linalg.norm(disp))
        n_ins = int(np.ceil(span / step)) - 1
        if n_ins <= 0:
            return np.empty((0, q0.shape[0]))
        ts = (np.arange(1, n_ins + 1) / (n_ins + 1))[:, None]
        return torus_wrap(q0 + ts * disp)
    chord = float(np.linalg.norm(q1 - q0))
    n_ins = int(np.ceil(chord / step)) - 1
    if n_ins <= 0:
        return np.empty((0, q0.shape[0]))
    ts = (np.arange(1, n_ins + 1) / (n_ins + 1))[:, None]
    return normalize_rows(q0 * (1.0 - ts) + q1 * ts)


def concat_loops(a: DiscreteLoop, b: DiscreteLoop) -> DiscreteLoop:
    """Traverse a, then b, as one closed loop; winding classes add on tori.

    b is resampled onto a's time step, rolled so its start sits nearest a's
    start, and the two junctions are filled with straight bridge segments
    sampled at the parts' own point spacing. The composite keeps a's time
    step for every point, so both parts retain their physical speed profile
    and the bridges are traversed at a comparable speed; the period is the
    total point count times that step.
    """
    if a.space.kind != b.space.kind or a.space.dim != b.space.dim:
        raise ValueError("cannot concatenate loops on different spaces")
    space = a.space
    dt = a.period / a.n_points
    n_b = max(MIN_POINTS, int(round(b.period / dt)))
    if abs(n_b - b.n_points) > 0.1 * b.n_points:
        b = resample_loop(b, n_b)
    if space.is_torus:
        gaps = torus_displacement(b.points, a.points[0])
        j = int(np.argmin(np.sum(gaps * gaps, axis=1)))
    else:
        j = int(np.argmin(np.sum((b.points - a.points[0]) ** 2, axis=1)))
    pts_b = np.roll(b.points, -j, axis=0)

    def part_spacing(pts):
        if space.is_torus:
            d = torus_displacement(pts, np.roll(pts, -1, axis=0))
        else:
            d = np.roll(pts, -1, axis=0) - pts
        return float(np.mean(np.linalg.norm(d, axis=1)))

    step = max(0.5 * (part_spacing(a.points) + part_spacing(pts_b)), 1e-6)
    step = min(step, 0.5 * manifold.WINDING_GUARD)
    br1 = _bridge_points(space, a.points[-1], pts_b[0], step)
    br2 = _bridge_points(space, pts_b[-1], a.points[0], step)
    pts = np.vstack([a.points, br1, pts_b, br2])
    tag = None
    if space.is_torus:
        tag = tuple(x + y for x, y in zip(a.tag, b.tag))
    return DiscreteLoop(space, pts, period=dt * pts.shape[0], tag=tag)


def refine_loop(loop: DiscreteLoop) -> DiscreteLoop:
    """Double the resolution by inserting chord midpoints; same period."""
    pts = loop.points
    if loop.space.is_torus:
        disp = torus_displacement(pts, np.roll(pts, -1, axis=0))
        mids = torus_wrap(pts + 0.5 * disp)
    else:
        mids = normalize_rows(pts + np.roll(pts, -1, axis=0))
    out = np.empty((2 * loop.n_points, pts.shape[1]))
    out[0::2] = pts
    out[1::2] = mids
    return DiscreteLoop(loop.space, out, log_period=loop.log_period, tag=loop.tag)


def lift_points(loop: DiscreteLoop):
    """Continuous lift of a torus loop to R^d starting at points[0]."""
    disp = torus_displacement(loop.points, np.roll(loop.points, -1, axis=0))
    steps = np.vstack([np.zeros((1, loop.points.shape[1])), np.cumsum(disp[:-1], axis=0)])
    return loop.points[0] + steps, disp


def resample_loop(loop: DiscreteLoop, n_new: int) -> DiscreteLoop:
    """Resample to n_new points, uniformly in the loop parameter."""
    n_old = loop.n_points
    t_new = np.arange(n_new) * (n_old / n_new)
    idx = np.floor(t_new).astype(int) % n_old
    frac = (t_new - np.floor(t_new))[:, None]
    if loop.space.is_torus:
        lifted, disp = lift_points(loop)
        pts = lifted[idx] + frac * disp[idx]
        return DiscreteLoop(loop.space, torus_wrap(pts), log_period=loop.log_period, tag=loop.tag)
    pts = loop.points
    nxt = np.roll(pts, -1, axis=0)
    raw = pts[idx] * (1.0 - frac) + nxt[idx] * frac
    return DiscreteLoop(loop.space, normalize_rows(raw), log_period=loop.log_period, tag=None)


def loop_distance(a: DiscreteLoop, b: DiscreteLoop) -> float:
    """Cyclic-shift-minimized RMS point distance plus |delta log p|.

    Loops are compared as maps from the same uniform parameter grid, so both
    must have the same point count (resample first if needed).
    """
    if a.n_points != b.n_points:
        b = resample_loop(b, a.n_points)
    best = np.inf
    pb = b.points
    for shift in range(a.n_points):
        q = np.roll(pb, shift, axis=0)
        if a.space.is_torus:
            diff = torus_displacement(q, a.points)
        else:
            diff = a.points - q
        rms = np.sqrt(np.mean(np.sum(diff * diff, axis=-1)))
        if rms < best:
            best = rms
    return float(best + abs(a.log_period - b.log_period))
