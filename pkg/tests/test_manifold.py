"""Geometry primitives: wrap, shortest displacement, retraction, winding."""

import numpy as np
import pytest

from waistlab.manifold import (
    ConfigSpace,
    LoopTooCoarse,
    RetractionBreakdown,
    WINDING_GUARD,
    normalize_rows,
    sphere2,
    sphere_project_tangent,
    sphere_retract,
    sphere_tangent_basis,
    torus,
    torus_displacement,
    torus_wrap,
    winding_vector,
)


class TestTorusDisplacement:
    def test_wraparound_takes_short_way(self):
        assert torus_displacement(0.9, 0.1) == pytest.approx(0.2, abs=1e-15)

    def test_same_point_is_zero(self):
        assert torus_displacement(0.25, 0.25) == 0.0

    def test_componentwise_on_t2(self):
        d = torus_displacement(np.array([0.1, 0.9]), np.array([0.9, 0.1]))
        assert d == pytest.approx([-0.2, 0.2], abs=1e-15)

    def test_half_range_and_tie_convention(self):
        # exact antipodal tie resolves to -1/2, keeping the map total
        assert torus_displacement(0.0, 0.5) == -0.5
        assert torus_displacement(0.25, 0.75) == -0.5
        rng = np.random.default_rng(3)
        a, b = rng.uniform(0, 1, (2, 500, 3))
        d = torus_displacement(a, b)
        assert np.all(d >= -0.5) and np.all(d < 0.5)

    def test_antisymmetry_off_ties(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(0, 1, (2, 300, 2))
        assert np.max(np.abs(torus_displacement(a, b)
                             + torus_displacement(b, a))) < 1e-12

    def test_translation_invariance(self):
        rng = np.random.default_rng(5)
        a, b = rng.uniform(0, 1, (2, 100, 2))
        shift = rng.uniform(0, 1, 2)
        d0 = torus_displacement(a, b)
        d1 = torus_displacement(torus_wrap(a + shift), torus_wrap(b + shift))
        assert np.max(np.abs(d0 - d1)) < 1e-12


class TestTorusWrap:
    def test_into_fundamental_domain(self):
        q = torus_wrap(np.array([1.25, -0.25, 3.0]))
        assert q == pytest.approx([0.25, 0.75, 0.0], abs=1e-15)

    def test_idempotent(self):
        rng = np.random.default_rng(6)
        q = rng.uniform(-5, 5, (50, 3))
        w = torus_wrap(q)
        assert np.allclose(torus_wrap(w), w, atol=1e-15)
        assert np.all((w >= 0) & (w < 1))


class TestSphere:
    def test_retract_stays_unit(self):
        rng = np.random.default_rng(7)
        q = normalize_rows(rng.standard_normal((200, 3)))
        step = 0.5 * rng.standard_normal((200, 3))
        out = sphere_retract(q, step)
        assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)) < 1e-12

    def test_radial_step_is_noop(self):
        q = np.array([0.0, 0.0, 1.0])
        out = sphere_retract(q, np.array([0.0, 0.0, 5.0]))
        assert out == pytest.approx(q, abs=1e-15)
        out = sphere_retract(q, np.array([0.0, 0.0, -0.7]))
        assert out == pytest.approx(q, abs=1e-15)

    def test_retract_matches_tangent_normalization_to_second_order(self):
        q = np.array([1.0, 0.0, 0.0])
        t = np.array([0.0, 1e-4, 0.0])
        out = sphere_retract(q, t)
        expected = (q + t) / np.linalg.norm(q + t)
        assert np.linalg.norm(out - expected) < 1e-15

    def test_project_tangent_is_orthogonal_projection(self):
        rng = np.random.default_rng(8)
        q = normalize_rows(rng.standard_normal((50, 3)))
        v = rng.standard_normal((50, 3))
        t = sphere_project_tangent(q, v)
        assert np.max(np.abs(np.sum(t * q, axis=1))) < 1e-12
        # idempotent
        assert np.allclose(sphere_project_tangent(q, t), t, atol=1e-12)

    def test_tangent_basis_orthonormal(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            q = rng.standard_normal(3)
            q /= np.linalg.norm(q)
            b = sphere_tangent_basis(q)
            assert b.shape == (3, 2)
            assert np.allclose(b.T @ b, np.eye(2), atol=1e-12)
            assert np.max(np.abs(q @ b)) < 1e-12

    def test_normalize_rows_guards_zero(self):
        with pytest.raises(RetractionBreakdown):
            normalize_rows(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))


class TestWindingVector:
    def test_generator_circle(self):
        ts = np.linspace(0, 1, 32, endpoint=False)
        assert winding_vector(ts) == (1,)
        pts = np.stack([ts, np.zeros_like(ts)], axis=1)
        assert winding_vector(pts) == (1, 0)

    def test_constant_loop(self):
        pts = np.tile([0.3, 0.7], (12, 1))
        assert winding_vector(pts) == (0, 0)

    def test_diagonal_class(self):
        ts = np.linspace(0, 1, 64, endpoint=False)
        pts = np.stack([torus_wrap(2 * ts), torus_wrap(-ts)], axis=1)
        assert winding_vector(pts) == (2, -1)

    def test_cyclic_reindex_invariance(self):
        rng = np.random.default_rng(10)
        ts = np.linspace(0, 1, 48, endpoint=False)
        pts = np.stack([torus_wrap(ts + 0.05 * np.sin(2 * np.pi * ts)),
                        torus_wrap(0.1 * np.cos(2 * np.pi * ts))], axis=1)
        w = winding_vector(pts)
        for _ in range(5):
            s = int(rng.integers(1, 47))
            assert winding_vector(np.roll(pts, s, axis=0)) == w

    def test_midpoint_refinement_invariance(self):
        ts = np.linspace(0, 1, 24, endpoint=False)
        pts = np.stack([torus_wrap(ts), 0.2 * np.sin(2 * np.pi * ts) + 0.5],
                       axis=1)
        w = winding_vector(pts)
        nxt = np.roll(pts, -1, axis=0)
        mids = torus_wrap(pts + 0.5 * torus_displacement(pts, nxt))
        refined = np.empty((48, 2))
        refined[0::2] = pts
        refined[1::2] = mids
        assert winding_vector(refined) == w

    def test_coarse_loop_raises(self):
        pts = np.array([0.0, 0.45, 0.9])[:, None]
        with pytest.raises(LoopTooCoarse):
            winding_vector(pts)

    def test_guard_boundary_is_exclusive(self):
        step = WINDING_GUARD - 1e-9
        pts = np.array([0.0, step, 2 * step])[:, None]
        # displacements: step, step, and the return leg 1 - 2*step < guard
        assert winding_vector(pts) == (1,)


class TestConfigSpace:
    def test_torus_dims(self):
        for d in (1, 2, 3):
            s = torus(d)
            assert s.is_torus and not s.is_sphere and s.dim == d
        with pytest.raises(ValueError):
            torus(4)

    def test_sphere(self):
        s = sphere2()
        assert s.is_sphere and s.dim == 3
        with pytest.raises(ValueError):
            ConfigSpace("sphere2", 2)
        with pytest.raises(ValueError):
            ConfigSpace("klein", 2)
