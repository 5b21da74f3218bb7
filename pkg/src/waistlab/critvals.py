"""Critical energy values, the action potential on a grid, and Aubry nodes.

Two independent probes decide "does a loop with S_e < 0 exist?" at a given
energy e: descent over discrete loops (rich family, one-sided) and negative
cycles in a segment-action graph on a configuration grid (finite, decidable).
Bisection on e with either probe brackets the critical threshold. The
contractible scope on tori runs the graph probe on a winding-truncated
abelian cover, so every cycle seen there has zero winding by construction.

The action potential table phi[a, b] is Bellman-Ford over the same graph.
Its diagonal follows the continuum convention phi(q, q) <= 0 (constant curves
with tau -> 0 cost nothing above the potential); the positive-time loop value
through each node is kept separately, since that is what localizes Aubry
nodes once the trivial diagonal is identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .lagrangian import LagrangianModel
from .manifold import torus_displacement

__all__ = [
    "E0Result",
    "GridGraph",
    "PotentialGrid",
    "CriticalBracket",
    "CriticalValueReport",
    "AubryReport",
    "e0",
    "segment_action",
    "build_grid_graph",
    "action_potential",
    "mane_critical",
    "aubry_points",
    "critical_report",
    "fibonacci_sphere",
]

TAU_BOUNDS = (1e-6, 16.0)
R_SEG = 0.35
NEG_TOL = 1e-8


# ---------------------------------------------------------------------------
# e0


@dataclass
class E0Result:
    value: float
    residual: float
    argmax: np.ndarray


def e0(model: LagrangianModel, n: int = 128) -> E0Result:
    """max of E(q, 0) = max of U over a dense grid, polished by local ascent."""
    d = model.dim
    if model.space.is_torus:
        axes = [np.arange(n) / n] * d
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    else:
        grid = fibonacci_sphere(n * n)
    vals = model.potential(grid)
    k = int(np.argmax(vals))
    best_q, best = grid[k], float(vals[k])

    from scipy.optimize import minimize

    if model.space.is_torus:
        res = minimize(
            lambda q: -model.potential(q[None])[0],
            best_q,
            jac=lambda q: -model.grad_potential(q[None])[0],
            method="L-BFGS-B",
        )
        refined = float(-res.fun)
        arg = np.asarray(res.x) % 1.0
    else:
        from .manifold import normalize_rows, sphere_tangent_basis

        basis = sphere_tangent_basis(best_q)

        def neg_u(xi):
            q = normalize_rows((best_q + basis @ xi)[None])[0]
            return -float(model.potential(q[None])[0])

        res = minimize(neg_u, np.zeros(2), method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-14})
        refined = float(-res.fun)
        arg = normalize_rows((best_q + basis @ res.x)[None])[0]
    value = max(best, refined)
    return E0Result(value=value, residual=abs(value - best), argmax=arg)


# ---------------------------------------------------------------------------
# segment actions (fixed endpoints, free duration)


def _chain_value_parts(model, pts):
    """(a, circ, mean_u) per chain: kinetic scale, circulation, mean potential.

    pts: (B, K+2, d) polyline in lifted coordinates (torus) or on the sphere.
    The duration-tau chain value is a/tau + circ + tau*(e - mean_u).
    """
    if model.space.is_torus:
        delta = pts[:, 1:, :] - pts[:, :-1, :]
        mid = 0.5 * (pts[:, 1:, :] + pts[:, :-1, :])
    else:
        s = pts[:, 1:, :] + pts[:, :-1, :]
        nrm = np.linalg.norm(s, axis=-1, keepdims=True)
        mid = s / nrm
        chord = pts[:, 1:, :] - pts[:, :-1, :]
        delta = chord - np.sum(chord * mid, axis=-1, keepdims=True) * mid
    nseg = pts.shape[1] - 1
    a = nseg * 0.5 * np.sum(delta * delta, axis=(1, 2))
    circ = np.sum(model.theta(mid) * delta, axis=(1, 2))
    mean_u = np.mean(model.potential(mid), axis=1)
    return a, circ, mean_u


def _best_tau(a, mean_u, e, bounds):
    lo, hi = bounds
    gap = e - mean_u
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.sqrt(np.where(gap > 0, a / np.maximum(gap, 1e-300), np.inf))
    tau = np.where(gap > 0, np.clip(tau, lo, hi), hi)
    return tau


def _chain_value(a, circ, mean_u, e, tau):
    return a / tau + circ + tau * (e - mean_u)


def _chain_gradient(model, pts, tau):
    """Gradient of the fixed-tau chain action at the interior points only."""
    from .lagrangian import dL_dq, dL_dv

    nseg = pts.shape[1] - 1
    dt = tau[:, None, None] / nseg
    if model.space.is_torus:
        delta = pts[:, 1:, :] - pts[:, :-1, :]
        mid = 0.5 * (pts[:, 1:, :] + pts[:, :-1, :])
        vel = delta / dt
        lq = dL_dq(model, mid, vel)
        lv = dL_dv(model, mid, vel)
        g = 0.5 * dt * (lq[:, :-1, :] + lq[:, 1:, :]) + (lv[:, :-1, :] - lv[:, 1:, :])
        return g
    s = pts[:, 1:, :] + pts[:, :-1, :]
    nrm = np.linalg.norm(s, axis=-1, keepdims=True)
    mhat = s / nrm
    chord = pts[:, 1:, :] - pts[:, :-1, :]
    w = chord - np.sum(chord * mhat, axis=-1, keepdims=True) * mhat
    vel = w / dt
    gq = dL_dq(model, mhat, vel)
    gv = dL_dv(model, mhat, vel)
    gv_m = np.sum(gv * mhat, axis=-1, keepdims=True)
    gq_m = np.sum(gq * mhat, axis=-1, keepdims=True)
    c_m = np.sum(chord * mhat, axis=-1, keepdims=True)
    p_gv = gv - gv_m * mhat
    p_gq = gq - gq_m * mhat
    u = (dt * p_gq - gv_m * w - c_m * p_gv) / nrm
    da = u - p_gv
    db = u + p_gv
    g = db[:, :-1, :] + da[:, 1:, :]
    proj = pts[:, 1:-1, :]
    return g - np.sum(g * proj, axis=-1, keepdims=True) * proj


def _chain_minimize(model, pts, e, bounds, iters):
    """Alternating tau re-optimization and interior-point descent, batched."""
    a, circ, mean_u = _chain_value_parts(model, pts)
    tau = _best_tau(a, mean_u, e, bounds)
    val = _chain_value(a, circ, mean_u, e, tau)
    if pts.shape[1] <= 2:
        return val, tau, a / tau**2 + mean_u
    nseg = pts.shape[1] - 1
    for _ in range(iters):
        g = _chain_gradient(model, pts, tau)
        step = 0.25 * (tau / nseg)[:, None, None]
        cand = pts.copy()
        accepted = np.zeros(pts.shape[0], dtype=bool)
        for _bt in range(3):
            trial = pts.copy()
            trial[:, 1:-1, :] = pts[:, 1:-1, :] - step * g
            if model.space.is_sphere:
                nrm = np.linalg.norm(trial[:, 1:-1, :], axis=-1, keepdims=True)
                trial[:, 1:-1, :] /= nrm
            a2, c2, u2 = _chain_value_parts(model, trial)
            t2 = _best_tau(a2, u2, e, bounds)
            v2 = _chain_value(a2, c2, u2, e, t2)
            better = (v2 < val) & ~accepted
            cand[better] = trial[better]
            val = np.where(better, v2, val)
            tau = np.where(better, t2, tau)
            accepted |= better
            step = step * 0.25
            if accepted.all():
                break
        pts = cand
    a, circ, mean_u = _chain_value_parts(model, pts)
    e_mean = a / tau**2 + mean_u
    return _chain_value(a, circ, mean_u, e, tau), tau, e_mean


def _segment_batch(model, q0, q1, e, bounds=TAU_BOUNDS, k_interior=2, iters=4):
    """Batched segment actions: q0, q1 are (B, d) endpoint arrays.

    On tori q1 is interpreted via shortest displacement from q0 (lifted
    chain). Returns (value, tau, mean_energy) arrays of shape (B,).
    """
    q0 = np.atleast_2d(np.asarray(q0, dtype=float))
    q1 = np.atleast_2d(np.asarray(q1, dtype=float))
    frac = np.linspace(0.0, 1.0, k_interior + 2)
    if model.space.is_torus:
        disp = torus_displacement(q0, q1)
        pts = q0[:, None, :] + frac[None, :, None] * disp[:, None, :]
    else:
        dots = np.clip(np.sum(q0 * q1, axis=-1), -1.0, 1.0)
        ang = np.arccos(dots)[:, None]
        sin = np.sin(ang)
        w1 = np.where(sin > 1e-9, np.sin((1 - frac)[None, :] * ang) / np.where(sin > 1e-9, sin, 1.0), (1 - frac)[None, :])
        w2 = np.where(sin > 1e-9, np.sin(frac[None, :] * ang) / np.where(sin > 1e-9, sin, 1.0), frac[None, :])
        pts = w1[:, :, None] * q0[:, None, :] + w2[:, :, None] * q1[:, None, :]
        pts /= np.linalg.norm(pts, axis=-1, keepdims=True)
    return _chain_minimize(model, pts, e, bounds, iters)


def segment_action(model, q0, q1, e, bounds=TAU_BOUNDS, r_seg=R_SEG,
                   k_interior=2, iters=6) -> float:
    """Minimal discrete fixed-endpoint, free-duration action from q0 to q1."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    if model.space.is_torus:
        dist = float(np.linalg.norm(torus_displacement(q0, q1)))
    else:
        dist = float(np.linalg.norm(q1 - q0))
    if dist > r_seg:
        raise ValueError(f"endpoints too far: {dist:.3f} > {r_seg}")
    if dist == 0.0:
        u = float(model.potential(q0[None])[0])
        return min(0.0, bounds[1] * (e - u))
    val, _, _ = _segment_batch(model, q0[None], q1[None], e, bounds, k_interior, iters)
    return float(val[0])


# ---------------------------------------------------------------------------
# grid graphs


def fibonacci_sphere(m: int) -> np.ndarray:
    i = np.arange(m)
    z = 1.0 - (2.0 * i + 1.0) / m
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    ga = np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(i * ga), r * np.sin(i * ga), z], axis=1)


def _torus_offsets(d: int):
    if d == 1:
        return [(1,), (-1,), (2,), (-2,)]
    if d == 2:
        # radius-sqrt(5) stencil: nearest neighbors alone inflate polygon
        # lengths by up to 8% at directions between axis and diagonal
        out = []
        for a in range(-2, 3):
            for b in range(-2, 3):
                if (a, b) != (0, 0) and a * a + b * b <= 5:
                    out.append((a, b))
        return out
    ranges = [(-1, 0, 1)] * d
    out = []
    for off in np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, d):
        if np.any(off != 0):
            out.append(tuple(int(o) for o in off))
    return out


@dataclass
class GridGraph:
    """Directed segment-action graph on a configuration grid at energy e."""

    model: LagrangianModel
    energy: float
    n: int
    nodes: np.ndarray            # (S, d)
    edge_u: np.ndarray           # (E,) int32 source index
    edge_v: np.ndarray           # (E,) int32 target index
    edge_w: np.ndarray           # (E,) float weight
    edge_tau: np.ndarray         # (E,) optimal duration
    edge_emean: np.ndarray       # (E,) mean discrete energy at the optimum
    edge_carry: np.ndarray | None  # (E, d) int winding carried by each edge (torus)
    self_w: np.ndarray           # (S,) constant-curve weight min(0, tau_hi (e - U))

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def sorted_by_target(self):
        order = np.argsort(self.edge_v, kind="stable")
        v_sorted = self.edge_v[order]
        starts = np.searchsorted(v_sorted, np.arange(self.n_nodes))
        return order, v_sorted, starts


def build_grid_graph(model, e, n, bounds=TAU_BOUNDS, k_interior=2, iters=4) -> GridGraph:
    d = model.dim
    if model.space.is_torus:
        axes = [np.arange(n) / n] * d
        nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        shape = (n,) * d
        idx = np.arange(nodes.shape[0]).reshape(shape)
        us, vs, carries = [], [], []
        for off in _torus_offsets(d):
            vs.append(np.roll(idx, shift=[-o for o in off], axis=tuple(range(d))).ravel())
            us.append(idx.ravel())
            multi = np.unravel_index(idx.ravel(), shape)
            carry = np.stack(
                [(multi[k] + off[k]) // n for k in range(d)], axis=1
            ).astype(np.int32)
            carries.append(carry)
        edge_u = np.concatenate(us).astype(np.int32)
        edge_v = np.concatenate(vs).astype(np.int32)
        edge_carry = np.concatenate(carries, axis=0)
        target = nodes[edge_u] + torus_displacement(nodes[edge_u], nodes[edge_v])
        q1 = target
    else:
        nodes = fibonacci_sphere(n * n)
        hull = ConvexHull(nodes)
        tri = hull.simplices
        pairs = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=0)
        pairs = np.unique(np.sort(pairs, axis=1), axis=0)
        edge_u = np.concatenate([pairs[:, 0], pairs[:, 1]]).astype(np.int32)
        edge_v = np.concatenate([pairs[:, 1], pairs[:, 0]]).astype(np.int32)
        edge_carry = None
        q1 = nodes[edge_v]
    lengths = np.linalg.norm(
        torus_displacement(nodes[edge_u], nodes[edge_v]) if model.space.is_torus
        else nodes[edge_v] - nodes[edge_u],
        axis=1,
    )
    if float(lengths.max()) > R_SEG:
        raise ValueError(f"grid too coarse: edge length {lengths.max():.3f} > {R_SEG}")
    w, tau, emean = _segment_batch(model, nodes[edge_u], q1, e, bounds, k_interior, iters)
    self_w = np.minimum(0.0, bounds[1] * (e - model.potential(nodes)))
    return GridGraph(
        model=model, energy=e, n=n, nodes=nodes,
        edge_u=edge_u, edge_v=edge_v, edge_w=w, edge_tau=tau, edge_emean=emean,
        edge_carry=edge_carry, self_w=self_w,
    )


# ---------------------------------------------------------------------------
# negative-cycle detection


def _extract_cycle(pot, edge_u, edge_w, order, v_sorted, starts, n_nodes):
    """Parent-graph walk from the tightest node; returns a node cycle or None.

    Parents are the best in-edges under the current potential; any cycle in
    that graph is only a candidate and must be certified by exact re-summation
    of its edge weights by the caller.
    """
    cand = pot[edge_u[order]] + edge_w[order]
    ends = np.append(starts[1:], cand.size)
    nonempty = starts < ends
    mins_full = np.full(n_nodes, np.inf)
    red = np.fmin.reduceat(cand, np.minimum(starts, max(cand.size - 1, 0)))
    mins_full[nonempty] = red[nonempty]
    pos = np.flatnonzero(cand <= mins_full[v_sorted])
    targets, first = np.unique(v_sorted[pos], return_index=True)
    pred = np.full(n_nodes, -1, dtype=np.int64)
    pred[targets] = edge_u[order][pos[first]]

    seen = {}
    node = int(np.argmin(pot))
    for step in range(n_nodes + 1):
        if pred[node] < 0:
            return None
        if node in seen:
            chain = []
            cur = node
            while True:
                chain.append(cur)
                cur = int(pred[cur])
                if cur == node:
                    break
                if len(chain) > n_nodes:
                    return None
            return chain[::-1]
        seen[node] = step
        node = int(pred[node])
    return None


def _cycle_weight(cycle, edge_u, edge_v, edge_w):
    total = 0.0
    lut = {}
    for i in range(edge_u.size):
        key = (int(edge_u[i]), int(edge_v[i]))
        if key not in lut or edge_w[i] < lut[key]:
            lut[key] = edge_w[i]
    for i in range(len(cycle)):
        key = (cycle[i], cycle[(i + 1) % len(cycle)])
        if key not in lut:
            return None
        total += lut[key]
    return total


def _has_negative_cycle(edge_u, edge_v, edge_w, n_nodes, self_w=None):
    """Simultaneous Bellman-Ford relaxation from a zero potential.

    Returns (flag, witness-cycle-or-None). A no-change round certifies there
    is no negative cycle; a certified predecessor cycle with negative exact
    weight certifies one early; hitting n_nodes rounds without convergence is
    the classical negative-cycle conclusion.
    """
    if self_w is not None and np.any(self_w < -NEG_TOL):
        k = int(np.argmin(self_w))
        return True, [k]
    order = np.argsort(edge_v, kind="stable")
    u_o, v_o, w_o = edge_u[order], edge_v[order], edge_w[order]
    starts = np.searchsorted(v_o, np.arange(n_nodes))
    ends = np.append(starts[1:], v_o.size)
    nonempty = starts < ends
    pot = np.zeros(n_nodes)
    for rounds in range(1, n_nodes + 2):
        cand = pot[u_o] + w_o
        mins = np.full(n_nodes, np.inf)
        red = np.fmin.reduceat(cand, np.minimum(starts, v_o.size - 1))
        mins[nonempty] = red[nonempty]
        new = np.minimum(pot, mins)
        if not np.any(new < pot - 1e-13):
            return False, None
        pot = new
        if rounds % 64 == 0 or rounds == n_nodes + 1:
            cyc = _extract_cycle(pot, edge_u, edge_w, order, v_o, starts, n_nodes)
            if cyc is not None:
                wsum = _cycle_weight(cyc, edge_u, edge_v, edge_w)
                if wsum is not None and wsum < -NEG_TOL:
                    return True, cyc
    return True, None


def _cover_edges(graph: GridGraph, window: int):
    """Expand torus graph edges to the winding-truncated abelian cover."""
    d = graph.model.dim
    width = 2 * window + 1
    tiles = np.stack(
        np.meshgrid(*[np.arange(-window, window + 1)] * d, indexing="ij"), axis=-1
    ).reshape(-1, d)
    s0 = graph.n_nodes
    t_index = {tuple(t): i for i, t in enumerate(tiles)}
    us, vs, ws = [], [], []
    for ti, t in enumerate(tiles):
        t2 = t[None, :] + graph.edge_carry
        ok = np.all(np.abs(t2) <= window, axis=1)
        if not np.any(ok):
            continue
        flat = np.zeros(ok.sum(), dtype=np.int64)
        t2ok = t2[ok]
        for k in range(d):
            flat = flat * width + (t2ok[:, k] + window)
        us.append(ti * s0 + graph.edge_u[ok].astype(np.int64))
        vs.append(flat * s0 + graph.edge_v[ok].astype(np.int64))
        ws.append(graph.edge_w[ok])
    return (
        np.concatenate(us),
        np.concatenate(vs),
        np.concatenate(ws),
        tiles.shape[0] * s0,
    )


def negative_loop_via_graph(model, e, n, scope="all", window=2,
                            bounds=TAU_BOUNDS, k_interior=2, iters=4):
    """Graph probe for a negative-action loop at energy e.

    scope="contractible" on tori runs detection on the truncated abelian
    cover, so any detected cycle has zero winding. Returns (found, witness
    node coordinates or None).
    """
    graph = build_grid_graph(model, e, n, bounds, k_interior, iters)
    if model.space.is_torus and scope == "contractible":
        if np.any(graph.self_w < -NEG_TOL):
            k = int(np.argmin(graph.self_w))
            return True, graph.nodes[[k]]
        u, v, w, s = _cover_edges(graph, window)
        found, cyc = _has_negative_cycle(u, v, w, s)
        if cyc is not None:
            base = [c % graph.n_nodes for c in cyc]
            return found, graph.nodes[base]
        return found, None
    found, cyc = _has_negative_cycle(
        graph.edge_u, graph.edge_v, graph.edge_w, graph.n_nodes, graph.self_w
    )
    return found, (graph.nodes[cyc] if cyc is not None else None)


# ---------------------------------------------------------------------------
# action potential table


@dataclass
class PotentialGrid:
    """All-pairs action potential on grid nodes, or the negative-cycle flag."""

    nodes: np.ndarray
    energy: float
    phi: np.ndarray | None
    negative_cycle: bool
    loop_values: np.ndarray | None
    graph: GridGraph = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]


def action_potential(model, e, n, bounds=TAU_BOUNDS, k_interior=2, iters=4) -> PotentialGrid:
    """Builds the segment graph at energy e and runs all-pairs Bellman-Ford."""
    graph = build_grid_graph(model, e, n, bounds, k_interior, iters)
    s = graph.n_nodes
    found, _ = _has_negative_cycle(
        graph.edge_u, graph.edge_v, graph.edge_w, s, graph.self_w
    )
    if found:
        return PotentialGrid(
            nodes=graph.nodes, energy=e, phi=None, negative_cycle=True,
            loop_values=None, graph=graph,
        )
    order = np.argsort(graph.edge_v, kind="stable")
    u_o = graph.edge_u[order]
    v_sorted = graph.edge_v[order]
    w_o = graph.edge_w[order]
    starts = np.searchsorted(v_sorted, np.arange(s))
    ends = np.append(starts[1:], v_sorted.size)
    nonempty = starts < ends
    uniq_targets = np.arange(s)[nonempty]

    phi = np.full((s, s), np.inf)
    np.fill_diagonal(phi, 0.0)
    for _ in range(s + 1):
        cand = phi[:, u_o] + w_o[None, :]
        red = np.fmin.reduceat(cand, np.minimum(starts, v_sorted.size - 1), axis=1)
        new_cols = np.minimum(phi[:, uniq_targets], red[:, nonempty])
        if not np.any(new_cols < phi[:, uniq_targets] - 1e-13):
            break
        phi[:, uniq_targets] = new_cols

    loop_values = np.full(s, np.inf)
    ret = phi[graph.edge_v, graph.edge_u]
    np.minimum.at(loop_values, graph.edge_u, graph.edge_w + ret)
    diag = np.minimum(0.0, np.minimum(graph.self_w, loop_values))
    phi[np.arange(s), np.arange(s)] = diag
    return PotentialGrid(
        nodes=graph.nodes, energy=e, phi=phi, negative_cycle=False,
        loop_values=loop_values, graph=graph,
    )


# ---------------------------------------------------------------------------
# loop-descent probe


def _circle_points(center, radius, n_pts, orientation=1):
    th = orientation * 2 * np.pi * np.arange(n_pts) / n_pts
    return center + radius * np.stack([np.cos(th), np.sin(th)], axis=1)


def _probe_seed_loops(model, scope, rng, n_pts=48):
    """Deterministic seed family for the negative-loop descent probe."""
    from .action import DiscreteLoop

    sp = model.space
    seeds = []
    if sp.is_torus:
        d = sp.dim
        if d == 1:
            u = model.potential(np.arange(256)[:, None] / 256.0)
            qmax = float(np.argmax(u)) / 256.0
            base = np.arange(n_pts) / n_pts
            for rad in (0.02, 0.08, 0.2):
                pts = qmax + rad * np.sin(2 * np.pi * base)
                seeds.append(DiscreteLoop(sp, pts[:, None], period=2.0))
            if scope == "all":
                for wind in (1, -1):
                    pts = (wind * base)[:, None]
                    seeds.append(DiscreteLoop(sp, pts, period=2.0))
        elif d == 2:
            centers = [(x, y) for x in (0.0, 0.25, 0.5, 0.75) for y in (0.25, 0.75)]
            u = model.potential(
                np.stack(np.meshgrid(np.arange(32) / 32, np.arange(32) / 32,
                                     indexing="ij"), -1).reshape(-1, 2))
            qmax = np.unravel_index(int(np.argmax(u)), (32, 32))
            centers.append((qmax[0] / 32, qmax[1] / 32))
            for c in centers:
                for rad in (0.02, 0.1, 0.18, 0.28):
                    for orient in (1, -1):
                        pts = _circle_points(np.array(c), rad, n_pts, orient)
                        seeds.append(DiscreteLoop(sp, pts, period=2.0))
            # tall/wide ellipses reach capsule-shaped zero-winding loops
            # (two near-parallel legs joined by caps) that small circles miss
            th = 2 * np.pi * np.arange(n_pts) / n_pts
            for cx in (0.25, 0.75):
                for cy in (0.25, 0.5):
                    for rx, ry in ((0.22, 0.46), (0.46, 0.22), (0.3, 0.38)):
                        for orient in (1, -1):
                            pts = np.stack([
                                cx + rx * np.cos(orient * th),
                                cy + ry * np.sin(orient * th),
                            ], axis=1)
                            seeds.append(DiscreteLoop(sp, pts, period=2.0))
            if scope == "all":
                base = np.arange(n_pts) / n_pts
                for wind in ((1, 0), (0, 1), (-1, 0), (0, -1), (1, 1)):
                    for shift in (0.0, 0.25, 0.5, 0.75):
                        pts = np.outer(base, wind) + shift
                        seeds.append(DiscreteLoop(sp, pts, period=2.0))
        else:
            base = np.arange(n_pts) / n_pts
            for c in (0.25, 0.75):
                for rad in (0.1, 0.25):
                    pts = np.stack([
                        c + rad * np.cos(2 * np.pi * base),
                        c + rad * np.sin(2 * np.pi * base),
                        np.full(n_pts, c),
                    ], axis=1)
                    seeds.append(DiscreteLoop(sp, pts, period=2.0))
            if scope == "all":
                for wind in np.eye(3, dtype=int):
                    pts = np.outer(base, wind)
                    seeds.append(DiscreteLoop(sp, pts, period=2.0))
        for _ in range(8):
            w = np.zeros(d, dtype=int)
            if scope == "all":
                w = rng.integers(-1, 2, size=d)
            base = np.arange(n_pts) / n_pts
            pts = np.outer(base, w) + rng.uniform(0, 1, size=d)
            for k in (1, 2):
                amp = 0.12 / k * rng.standard_normal((d, 2))
                pts += np.outer(np.cos(2 * np.pi * k * base), amp[:, 0])
                pts += np.outer(np.sin(2 * np.pi * k * base), amp[:, 1])
            seeds.append(DiscreteLoop(sp, pts, period=2.0))
    else:
        base = 2 * np.pi * np.arange(n_pts) / n_pts
        for z0 in (-0.8, -0.6, -0.4, -0.2, 0.2, 0.4, 0.6, 0.8):
            r = np.sqrt(1 - z0 * z0)
            for orient in (1, -1):
                pts = np.stack([r * np.cos(orient * base), r * np.sin(orient * base),
                                np.full(n_pts, z0)], axis=1)
                seeds.append(DiscreteLoop(sp, pts, period=2.0))
        for _ in range(8):
            mat = rng.standard_normal((3, 3))
            q, _ = np.linalg.qr(mat)
            z0 = rng.uniform(-0.8, 0.8)
            r = np.sqrt(1 - z0 * z0)
            pts = np.stack([r * np.cos(base), r * np.sin(base), np.full(n_pts, z0)], axis=1)
            seeds.append(DiscreteLoop(sp, pts @ q.T, period=2.0))
    return seeds


def _verify_negative(model, loop, e):
    """Re-evaluate a candidate negative loop at 2x and 4x resolution.

    Evaluation only, no re-descent: descending at higher resolution
    reopens the discretization loopholes this check is meant to close.
    """
    from .action import action, resample_loop

    n = len(loop.points)
    for mult in (2, 4):
        big = resample_loop(loop, mult * n)
        if not action(model, big, e) < -NEG_TOL:
            return False, None
    return True, loop


def negative_loop_via_descent(model, e, scope="all", rng=None, budget=400,
                              tau_ladder=(0.5, 2.0, 8.0, 24.0), top_k=12,
                              n_pts=64):
    """Loop-descent probe for S_e < 0; returns (found, witness loop or None)."""
    from . import orbits
    from .action import DiscreteLoop, action

    rng = np.random.default_rng(0) if rng is None else rng
    seeds = _probe_seed_loops(model, scope, rng, n_pts=n_pts)

    def check(lp):
        if lp is None:
            return None
        if model.space.is_torus and scope == "contractible":
            if any(c != 0 for c in lp.tag):
                return None
        ok, wit = _verify_negative(model, lp, e)
        return wit if ok else None

    scored = []
    for sd in seeds:
        best = None
        for p in tau_ladder:
            lp = DiscreteLoop(sd.space, sd.points, period=p,
                              tag=sd.tag if sd.space.is_torus else None)
            val = action(model, lp, e)
            if val < -NEG_TOL:
                wit = check(lp)
                if wit is not None:
                    return True, wit
            if best is None or val < best[0]:
                best = (val, lp)
        scored.append(best)
    scored.sort(key=lambda t: t[0])

    # cheap pass over a broad slate, then full descent on the leaders;
    # raw ranking alone biases toward small near-degenerate loops
    cheap = []
    for _, lp in scored[: max(2 * top_k, 16)]:
        res = orbits.descend_loop(model, lp, e, maxiter=60, stop_below=-NEG_TOL,
                                  tau_max=TAU_BOUNDS[1])
        if res.value < -NEG_TOL:
            wit = check(res.loop)
            if wit is not None:
                return True, wit
        cheap.append((res.value, res.loop))
    cheap.sort(key=lambda t: t[0])
    for _, lp in cheap[:top_k]:
        res = orbits.descend_loop(model, lp, e, maxiter=budget, stop_below=-NEG_TOL,
                                  tau_max=TAU_BOUNDS[1])
        if res.value < -NEG_TOL:
            wit = check(res.loop)
            if wit is not None:
                return True, wit
    return False, None


# ---------------------------------------------------------------------------
# bisection


@dataclass
class CriticalBracket:
    value: float
    lo: float
    hi: float
    scope: str
    method: str
    trace: list = field(default_factory=list)
    witness: object = None


def _bisect(probe, lo, hi, tol_c, trace):
    f_hi, _ = probe(hi)
    if f_hi:
        raise ValueError("bracket invalid: negative loop found at bracket top")
    trace.append({"e": hi, "found": False})
    f_lo, wit = probe(lo)
    if not f_lo:
        raise ValueError("bracket invalid: no negative loop at bracket bottom")
    trace.append({"e": lo, "found": True})
    best_wit = wit
    while hi - lo > tol_c:
        mid = 0.5 * (lo + hi)
        found, wit = probe(mid)
        trace.append({"e": mid, "found": bool(found)})
        if found:
            lo = mid
            best_wit = wit
        else:
            hi = mid
    found_es = [t["e"] for t in trace if t["found"]]
    clear_es = [t["e"] for t in trace if not t["found"]]
    assert max(found_es) < min(clear_es), "bisection trace violates monotonicity"
    return lo, hi, best_wit


def mane_critical(model, scope="contractible", method="both", bracket=None,
                  tol_c=1e-3, n_grid=48, rng=None, budget=400,
                  window=2, cross_tol=8e-3) -> CriticalBracket:
    """Bisection bracket for the critical energy of the scope's loop family.

    method "both" runs the graph and loop-descent estimators and intersects
    their brackets after widening each by cross_tol: node-polygon thresholds
    carry a systematic percent-level bias from lattice anisotropy, so the
    two estimators agree to cross_tol rather than to bisection width.
    """
    if scope not in ("contractible", "all"):
        raise ValueError(f"unknown scope {scope!r}")
    if model.space.is_sphere:
        scope = "contractible"
    if bracket is None:
        base = e0(model).value
        bracket = (base - 0.1, base + 5.0)
    rng = np.random.default_rng(0) if rng is None else rng

    if method == "both":
        a = mane_critical(model, scope, "graph", bracket, tol_c, n_grid, rng, budget, window)
        b = mane_critical(model, scope, "loops", bracket, tol_c, n_grid, rng, budget, window)
        lo = max(a.lo, b.lo) - cross_tol
        hi = min(a.hi, b.hi) + cross_tol
        if lo > hi:
            raise RuntimeError(
                f"estimator brackets do not intersect: graph [{a.lo}, {a.hi}] "
                f"vs loops [{b.lo}, {b.hi}]"
            )
        return CriticalBracket(
            value=0.5 * (lo + hi), lo=lo, hi=hi, scope=scope, method="both",
            trace=a.trace + b.trace, witness=b.witness or a.witness,
        )

    if method == "graph":
        def probe(e):
            return negative_loop_via_graph(model, e, n_grid, scope, window)
    elif method == "loops":
        probe_seed = int(rng.integers(2**31))

        def probe(e):
            sub = np.random.default_rng([probe_seed, int(abs(e) * 2**40)])
            return negative_loop_via_descent(model, e, scope, sub, budget)
    else:
        raise ValueError(f"unknown method {method!r}")

    trace = []
    lo, hi, wit = _bisect(probe, bracket[0], bracket[1], tol_c, trace)
    return CriticalBracket(
        value=0.5 * (lo + hi), lo=lo, hi=hi, scope=scope, method=method,
        trace=trace, witness=wit,
    )


# ---------------------------------------------------------------------------
# Aubry nodes


@dataclass
class AubryReport:
    energy: float
    node_indices: np.ndarray
    nodes: np.ndarray
    loop_values: np.ndarray
    cycles: list
    cycle_energies: list


def _shortest_path(graph: GridGraph, src: int, dst: int):
    """Single-source Bellman-Ford with predecessors; returns node path."""
    s = graph.n_nodes
    dist = np.full(s, np.inf)
    dist[src] = 0.0
    pred = np.full(s, -1, dtype=np.int64)
    for _ in range(s):
        cand = dist[graph.edge_u] + graph.edge_w
        better = cand < dist[graph.edge_v] - 1e-15
        if not np.any(better):
            break
        np.minimum.at(dist, graph.edge_v, cand)
        touched = np.flatnonzero(better)
        for k in touched:
            v = graph.edge_v[k]
            if cand[k] <= dist[v]:
                pred[v] = graph.edge_u[k]
    path = [dst]
    while path[-1] != src:
        p = pred[path[-1]]
        if p < 0 or len(path) > s:
            return None
        path.append(int(p))
    return path[::-1]


def aubry_points(model, c_est, tol_aubry=None, n=32, max_cycles=16,
                 bounds=TAU_BOUNDS) -> AubryReport:
    """Grid nodes whose positive-time loop value at e = c_est is near zero."""
    grid = action_potential(model, c_est, n, bounds)
    if grid.negative_cycle:
        raise ValueError("below critical: negative cycle detected at c_est")
    if tol_aubry is None:
        tol_aubry = 40.0 / (n * n)
    lv = grid.loop_values
    sel = np.flatnonzero(np.abs(lv) <= tol_aubry)
    sel = sel[np.argsort(lv[sel])]
    graph = grid.graph
    cycles, energies = [], []
    for q in sel[:max_cycles]:
        out = np.flatnonzero(graph.edge_u == q)
        two_leg = graph.edge_w[out] + grid.phi[graph.edge_v[out], q]
        k = out[int(np.argmin(two_leg))]
        u = int(graph.edge_v[k])
        back = _shortest_path(graph, u, int(q))
        if back is None:
            continue
        cyc = [int(q)] + back
        tau_total, e_weighted = 0.0, 0.0
        ok = True
        for i in range(len(cyc) - 1):
            mask = (graph.edge_u == cyc[i]) & (graph.edge_v == cyc[i + 1])
            if not np.any(mask):
                ok = False
                break
            j = int(np.flatnonzero(mask)[0])
            tau_total += graph.edge_tau[j]
            e_weighted += graph.edge_tau[j] * graph.edge_emean[j]
        if ok and tau_total > 0:
            cycles.append(cyc)
            energies.append(e_weighted / tau_total)
    return AubryReport(
        energy=c_est, node_indices=sel, nodes=grid.nodes[sel],
        loop_values=lv[sel], cycles=cycles, cycle_energies=energies,
    )


# ---------------------------------------------------------------------------
# combined report


@dataclass
class CriticalValueReport:
    e0: float
    e0_residual: float
    c_contractible: CriticalBracket
    c_all: CriticalBracket
    c_u: float
    c_0: float
    c: float
    provenance: dict
    waist_threshold: float | None = None

    def to_dict(self):
        def br(b):
            return {"value": b.value, "lo": b.lo, "hi": b.hi, "scope": b.scope,
                    "method": b.method, "trace": b.trace}
        return {
            "e0": self.e0,
            "e0_residual": self.e0_residual,
            "c_contractible": br(self.c_contractible),
            "c_all": br(self.c_all),
            "c_u": self.c_u,
            "c_0": self.c_0,
            "c": self.c,
            "provenance": self.provenance,
            "waist_threshold": self.waist_threshold,
        }


def critical_report(model, method="both", tol_c=1e-3, n_grid=48, rng=None,
                    budget=400, bracket=None) -> CriticalValueReport:
    """e0 plus critical brackets for both scopes, with the ordering checked.

    On tori the all-classes value doubles as the abelian-cover value (the
    relevant covers coincide there); on the sphere every scope is the same
    bracket computed once.
    """
    base = e0(model)
    rng = np.random.default_rng(0) if rng is None else rng
    c_contr = mane_critical(model, "contractible", method, bracket, tol_c,
                            n_grid, rng, budget)
    if model.space.is_torus:
        c_all = mane_critical(model, "all", method, bracket, tol_c, n_grid,
                              rng, budget)
    else:
        c_all = c_contr
    tol = max(tol_c, 1e-9)
    if base.value > c_contr.hi + tol or c_all.hi + tol < c_contr.lo - tol:
        raise RuntimeError("critical value ordering violated")
    return CriticalValueReport(
        e0=base.value,
        e0_residual=base.residual,
        c_contractible=c_contr,
        c_all=c_all,
        c_u=c_contr.value,
        c_0=c_all.value if model.space.is_torus else c_contr.value,
        c=c_all.value,
        provenance={
            "e0": "dense grid with local ascent",
            "c_contractible": c_contr.method,
            "c_all": c_all.method,
            "aliases": "c_u = contractible scope; c_0 = c on these spaces",
        },
    )
