"""Shared fixtures: system catalog handles and random admissible loops."""

import numpy as np
import pytest

from waistlab.action import DiscreteLoop
from waistlab.lagrangian import make_system, system_names

ALL_SYSTEMS = tuple(system_names())

# desk energy for the magnetic torus: c* + 0.05 (c* - e0) with the golden c*
DESK_ENERGY = 0.46011209999999997


@pytest.fixture(scope="session")
def models():
    return {name: make_system(name) for name in ALL_SYSTEMS}


@pytest.fixture(scope="session")
def lane_waist(models):
    """The magnetic-torus waist at the desk energy, shared across modules."""
    from waistlab.orbits import WaistNotFound, find_waist

    rec = find_waist(models["sys-magt2"], DESK_ENERGY,
                     rng=np.random.default_rng(0))
    assert not isinstance(rec, WaistNotFound)
    return rec


def random_loop(model, rng, n_points=16, amplitude=0.12, n_harmonics=3):
    """Smooth random closed loop, safely inside the coarseness guard.

    Tori: a random base point plus a low-order Fourier polynomial with
    small amplitudes. Sphere: a normalized ambient Fourier curve around a
    random direction. Periods are log-uniform in [e^-1, e^1].
    """
    ts = np.linspace(0.0, 1.0, n_points, endpoint=False)
    log_period = float(rng.uniform(-1.0, 1.0))
    if model.space.is_torus:
        d = model.dim
        pts = np.tile(rng.uniform(0.0, 1.0, d), (n_points, 1))
        for k in range(1, n_harmonics + 1):
            a = rng.uniform(-amplitude, amplitude, d) / k
            b = rng.uniform(-amplitude, amplitude, d) / k
            pts += np.outer(np.cos(2 * np.pi * k * ts), a)
            pts += np.outer(np.sin(2 * np.pi * k * ts), b)
        return DiscreteLoop(model.space, pts, log_period=log_period)
    base = rng.standard_normal(3)
    base /= np.linalg.norm(base)
    pts = np.tile(base, (n_points, 1))
    for k in range(1, n_harmonics + 1):
        a = rng.uniform(-amplitude, amplitude, 3) / k
        b = rng.uniform(-amplitude, amplitude, 3) / k
        pts = pts + np.outer(np.cos(2 * np.pi * k * ts), a)
        pts = pts + np.outer(np.sin(2 * np.pi * k * ts), b)
    return DiscreteLoop(model.space, pts, log_period=log_period)


def winding_line_loop(space, k_vec, n_points=32, log_period=0.0, offset=None):
    """Straight constant-speed torus loop of winding class k_vec."""
    d = space.dim
    ts = np.linspace(0.0, 1.0, n_points, endpoint=False)
    base = np.zeros(d) if offset is None else np.asarray(offset, dtype=float)
    pts = base + np.outer(ts, np.asarray(k_vec, dtype=float))
    return DiscreteLoop(space, pts, log_period=log_period,
                        tag=tuple(int(c) for c in k_vec))
