"""Free-period action functional: values, gradients, spectra, loop surgery."""

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import random_loop, winding_line_loop
from waistlab.action import (
    DiscreteLoop,
    MIN_POINTS,
    NotCriticalPoint,
    action,
    action_gradient,
    action_hessian_spectrum,
    concat_loops,
    discrete_circulation,
    gradient_norm,
    iterate_loop,
    lift_points,
    loop_distance,
    mean_discrete_energy,
    refine_loop,
    resample_loop,
    reverse_loop,
)
from waistlab.manifold import LoopTooCoarse, torus, torus_displacement


def _circle_loop(space, center, radius, n, log_period=0.0):
    phis = 2 * np.pi * np.arange(n) / n
    pts = np.stack([center[0] + radius * np.cos(phis),
                    center[1] + radius * np.sin(phis)], axis=1)
    return DiscreteLoop(space, pts, log_period=log_period)


class TestConstruction:
    def test_min_points(self, models):
        with pytest.raises(ValueError):
            DiscreteLoop(torus(1), np.zeros(MIN_POINTS - 1), period=1.0)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            DiscreteLoop(torus(2), np.zeros((12, 3)), period=1.0)

    def test_period_xor_log_period(self):
        pts = np.zeros((12, 1))
        with pytest.raises(ValueError):
            DiscreteLoop(torus(1), pts)
        with pytest.raises(ValueError):
            DiscreteLoop(torus(1), pts, period=1.0, log_period=0.0)
        with pytest.raises(ValueError):
            DiscreteLoop(torus(1), pts, period=-2.0)

    def test_wrapping_and_tag_inference(self):
        ts = np.linspace(0, 1, 16, endpoint=False)
        loop = DiscreteLoop(torus(2), np.stack([ts + 5.0, 0.3 - ts], axis=1),
                            period=2.0)
        assert np.all((loop.points >= 0) & (loop.points < 1))
        assert loop.tag == (1, -1)
        assert loop.period == pytest.approx(2.0, rel=1e-15)

    def test_sphere_normalization(self, models):
        rng = np.random.default_rng(20)
        pts = 3.0 * rng.standard_normal((10, 3))
        loop = DiscreteLoop(models["sys-mags2"].space, pts, period=1.0)
        assert np.max(np.abs(np.linalg.norm(loop.points, axis=1) - 1)) < 1e-12
        assert loop.tag is None


class TestActionValues:
    def test_constant_loop_is_period_times_energy_gap(self, models):
        pend = models["sys-pend"]
        still_well = DiscreteLoop(torus(1), np.full(16, 0.5), period=2.0)
        # U(0.5) = 0, so S = p (e - U) = 2 (0.5 - 0) = 1
        assert action(pend, still_well, 0.5) == pytest.approx(1.0, abs=1e-14)
        still_top = DiscreteLoop(torus(1), np.full(16, 0.0), period=3.0)
        # U(0) = 2 and e = 2 cancel exactly
        assert action(pend, still_top, 2.0) == pytest.approx(0.0, abs=1e-14)

    def test_free_particle_line_orbit(self, models):
        free = models["sys-free-t2"]
        for e in (0.3, 1.7):
            p = 1.0 / np.sqrt(2 * e)
            loop = winding_line_loop(free.space, (1, 0), 32,
                                     log_period=np.log(p))
            # minimal-action line: S = sqrt(2 e) (length 1)
            assert action(free, loop, e) == pytest.approx(np.sqrt(2 * e),
                                                          rel=1e-12)

    def test_magnetic_circle_matches_independent_quadrature(self, models):
        # circle where the field's flux is extremal: the circulation is
        # strictly negative, so at zero energy a slow traversal has
        # negative action
        magt2 = models["sys-magt2"]
        r, n = 0.2, 64
        center = (0.25, 0.35)
        loop = _circle_loop(magt2.space, center, r, n, log_period=np.log(50.0))

        # independent midpoint-rule sums straight from the point set
        pts = loop.points
        disp = torus_displacement(pts, np.roll(pts, -1, axis=0))
        mids = pts + 0.5 * disp
        circ_direct = float(np.sum(np.cos(2 * np.pi * mids[:, 0]) * disp[:, 1]))
        kin_direct = float(np.sum(np.sum(disp**2, axis=1))) * n / (2 * 50.0)
        expected = kin_direct + circ_direct  # e = 0, U = 0
        assert action(magt2, loop, 0.0) == pytest.approx(expected, abs=1e-12)
        assert discrete_circulation(magt2, loop) == pytest.approx(circ_direct,
                                                                  abs=1e-12)

        # continuum quadrature oracle for the circulation of this circle
        def integrand(phi):
            return (np.cos(2 * np.pi * (center[0] + r * np.cos(phi)))
                    * r * np.cos(phi))

        circ_exact, _ = quad(integrand, 0.0, 2 * np.pi, limit=200)
        assert circ_direct == pytest.approx(circ_exact, abs=3e-3)
        assert circ_exact < -0.1
        # with the period large the kinetic term cannot offset the negative
        # circulation: the action itself is negative at zero energy
        assert action(magt2, loop, 0.0) < 0.0

    def test_circulation_vanishes_at_symmetric_center(self, models):
        # around x = 1/2 the field's flux is antisymmetric, so the exact
        # circulation is zero; the midpoint rule inherits the cancellation
        magt2 = models["sys-magt2"]
        loop = _circle_loop(magt2.space, (0.5, 0.35), 0.2, 64,
                            log_period=np.log(50.0))
        assert abs(discrete_circulation(magt2, loop)) < 1e-12
        # and a slow loop with zero circulation has positive action at e = 0
        assert action(magt2, loop, 0.0) > 0.0

    def test_action_drops_linearly_in_energy(self, models):
        rng = np.random.default_rng(21)
        for model in models.values():
            loop = random_loop(model, rng)
            s1, s2 = action(model, loop, 0.4), action(model, loop, 1.1)
            assert s2 - s1 == pytest.approx(0.7 * loop.period, rel=1e-12)


class TestGradient:
    @pytest.mark.parametrize("name", ["sys-pend", "sys-mecht2", "sys-magt2",
                                      "sys-mags2", "sys-free-t2"])
    def test_matches_finite_differences_on_random_loops(self, models, name):
        model = models[name]
        rng = np.random.default_rng(hash(name) % 2**32)
        h = 1e-6
        worst = 0.0
        for _ in range(100):
            loop = random_loop(model, rng, n_points=12)
            e = float(rng.uniform(0.2, 2.5))
            g_pts, g_logp = action_gradient(model, loop, e)
            g = np.concatenate([g_pts.ravel(), [g_logp]])
            fd = np.empty_like(g)
            base_pts = loop.points
            nf = base_pts.size
            for k in range(nf):
                dp = np.zeros_like(base_pts)
                dp.flat[k] = h
                up = DiscreteLoop(loop.space, base_pts + dp,
                                  log_period=loop.log_period, tag=loop.tag)
                dn = DiscreteLoop(loop.space, base_pts - dp,
                                  log_period=loop.log_period, tag=loop.tag)
                fd[k] = (action(model, up, e) - action(model, dn, e)) / (2 * h)
            up = DiscreteLoop(loop.space, base_pts,
                              log_period=loop.log_period + h, tag=loop.tag)
            dn = DiscreteLoop(loop.space, base_pts,
                              log_period=loop.log_period - h, tag=loop.tag)
            fd[-1] = (action(model, up, e) - action(model, dn, e)) / (2 * h)
            rel = np.max(np.abs(fd - g)) / max(1.0, np.max(np.abs(g)))
            worst = max(worst, rel)
        assert worst < 1e-6, f"{name}: worst relative error {worst:.2e}"

    def test_log_period_component_is_energy_mismatch(self, models):
        rng = np.random.default_rng(22)
        for model in models.values():
            loop = random_loop(model, rng)
            e_match = mean_discrete_energy(model, loop)
            _, g_logp = action_gradient(model, loop, e_match)
            assert abs(g_logp) < 1e-10 * max(1.0, abs(e_match))
            _, g_logp = action_gradient(model, loop, e_match + 0.25)
            assert g_logp == pytest.approx(0.25 * loop.period, rel=1e-12)

    def test_stationary_period_iff_mean_energy_matches(self, models):
        model = models["sys-mecht2"]
        rng = np.random.default_rng(23)
        loop = random_loop(model, rng)
        e = 1.3

        def g_logp_at(logp):
            moved = DiscreteLoop(loop.space, loop.points, log_period=logp,
                                 tag=loop.tag)
            return action_gradient(model, moved, e)[1], moved

        from scipy.optimize import brentq
        lo, hi = -3.0, 3.0
        root = brentq(lambda lp: g_logp_at(lp)[0], lo, hi, xtol=1e-14)
        _, crit = g_logp_at(root)
        assert abs(mean_discrete_energy(model, crit) - e) < 1e-10

    def test_gradient_norm_consistency(self, models):
        model = models["sys-magt2"]
        loop = random_loop(model, np.random.default_rng(24))
        g_pts, g_logp = action_gradient(model, loop, 0.8)
        expected = np.sqrt(np.sum(g_pts**2) + g_logp**2)
        assert gradient_norm(model, loop, 0.8) == pytest.approx(expected,
                                                                rel=1e-12)


class TestHessianSpectrum:
    def test_rejects_non_critical_loop(self, models):
        loop = random_loop(models["sys-mecht2"], np.random.default_rng(25))
        with pytest.raises(NotCriticalPoint):
            action_hessian_spectrum(models["sys-mecht2"], loop, 1.0)

    def test_constant_loop_at_potential_peak(self, models):
        pend = models["sys-pend"]
        loop = DiscreteLoop(torus(1), np.zeros(24), period=1.0)
        rep = action_hessian_spectrum(pend, loop, 2.0, grad_tol=1e-10)
        # -U'' > 0 at the peak makes every point direction stabilizing;
        # log-period direction is flat because S is identically 0 in p there
        assert rep.index == 0
        assert rep.nullity_total >= 1
        assert rep.value == pytest.approx(0.0, abs=1e-14)

    def test_matches_fd_hessian_eigenvalues(self, models):
        free = models["sys-free-t2"]
        e = 0.5
        loop = winding_line_loop(free.space, (1, 0), 16,
                                 log_period=np.log(1.0 / np.sqrt(2 * e)))
        rep = action_hessian_spectrum(free, loop, e, grad_tol=1e-8)
        h = 1e-5
        nf = loop.points.size + 1

        def grad_flat(pts, logp):
            lp = DiscreteLoop(loop.space, pts, log_period=logp, tag=loop.tag)
            g_pts, g_logp = action_gradient(free, lp, e)
            return np.concatenate([g_pts.ravel(), [g_logp]])

        fd = np.empty((nf, nf))
        for k in range(nf - 1):
            dp = np.zeros_like(loop.points)
            dp.flat[k] = h
            fd[:, k] = (grad_flat(loop.points + dp, loop.log_period)
                        - grad_flat(loop.points - dp, loop.log_period)) / (2 * h)
        fd[:, -1] = (grad_flat(loop.points, loop.log_period + h)
                     - grad_flat(loop.points, loop.log_period - h)) / (2 * h)
        fd = 0.5 * (fd + fd.T)
        ev_fd = np.linalg.eigvalsh(fd)
        assert np.max(np.abs(ev_fd - rep.eigenvalues)) < 1e-6 * max(
            1.0, np.max(np.abs(ev_fd)))

    def test_fixed_period_index_sandwich(self, models):
        free = models["sys-free-t2"]
        e = 0.5
        loop = winding_line_loop(free.space, (1, 0), 16,
                                 log_period=np.log(1.0 / np.sqrt(2 * e)))
        full = action_hessian_spectrum(free, loop, e, grad_tol=1e-8)
        fixed = action_hessian_spectrum(free, loop, e, grad_tol=1e-8,
                                        fixed_period=True)
        assert fixed.fixed_period and not full.fixed_period
        assert fixed.eigenvalues.size == full.eigenvalues.size - 1
        assert fixed.index <= full.index <= fixed.index + 1


class TestLoopSurgery:
    def test_iterate_action_additivity(self, models):
        rng = np.random.default_rng(26)
        for model in models.values():
            loop = random_loop(model, rng)
            e = 0.9
            s1 = action(model, loop, e)
            for m in (2, 3):
                it = iterate_loop(loop, m)
                assert action(model, it, e) == pytest.approx(m * s1, rel=1e-12)
                assert it.period == pytest.approx(m * loop.period, rel=1e-14)
                if model.space.is_torus:
                    assert it.tag == tuple(m * c for c in loop.tag)

    def test_iterate_rejects_zero(self, models):
        loop = random_loop(models["sys-pend"], np.random.default_rng(27))
        with pytest.raises(ValueError):
            iterate_loop(loop, 0)

    def test_reverse_is_involution(self, models):
        loop = random_loop(models["sys-magt2"], np.random.default_rng(28))
        back = reverse_loop(reverse_loop(loop))
        assert np.allclose(back.points, loop.points, atol=0)
        assert back.log_period == loop.log_period
        assert back.tag == loop.tag

    def test_reverse_mechanical_action_invariant(self, models):
        rng = np.random.default_rng(29)
        for name in ("sys-pend", "sys-mecht2", "sys-free-t2"):
            loop = random_loop(models[name], rng)
            e = 0.7
            assert action(models[name], reverse_loop(loop), e) \
                == pytest.approx(action(models[name], loop, e), rel=1e-12)

    def test_reverse_magnetic_action_shift_is_circulation(self, models):
        rng = np.random.default_rng(30)
        for name in ("sys-magt2", "sys-mags2"):
            model = models[name]
            loop = random_loop(model, rng)
            e = 0.7
            circ = discrete_circulation(model, loop)
            diff = action(model, reverse_loop(loop), e) - action(model, loop, e)
            assert diff == pytest.approx(-2 * circ, rel=1e-10, abs=1e-12)
            assert discrete_circulation(model, reverse_loop(loop)) \
                == pytest.approx(-circ, rel=1e-10, abs=1e-12)

    def test_discretization_error_is_second_order(self, models):
        # sampling a smooth curve at N points: the discrete action converges
        # at second order, so consecutive doublings shrink the error ~4x
        magt2 = models["sys-magt2"]
        e = 0.4
        vals = {n: action(magt2,
                          _circle_loop(magt2.space, (0.25, 0.35), 0.2, n,
                                       log_period=np.log(2.0)), e)
                for n in (16, 32, 64, 512)}
        err16 = abs(vals[16] - vals[512])
        err32 = abs(vals[32] - vals[512])
        err64 = abs(vals[64] - vals[512])
        assert np.log2(err16 / err32) > 1.9
        assert np.log2(err32 / err64) > 1.9

    def test_refine_converges_at_second_order(self, models):
        # midpoint insertion keeps the kinetic sum exactly (same chords,
        # half the step) and moves field terms only at the quadrature
        # error, so successive refinements settle quadratically
        magt2 = models["sys-magt2"]
        base = _circle_loop(magt2.space, (0.25, 0.35), 0.2, 16,
                            log_period=np.log(2.0))
        r1 = refine_loop(base)
        r2 = refine_loop(r1)
        r3 = refine_loop(r2)
        d1 = abs(action(magt2, r1, 0.4) - action(magt2, base, 0.4))
        d2 = abs(action(magt2, r2, 0.4) - action(magt2, r1, 0.4))
        d3 = abs(action(magt2, r3, 0.4) - action(magt2, r2, 0.4))
        assert d2 < d1 / 3.0
        assert d3 < d2 / 3.0
        free = models["sys-free-t2"]
        line = winding_line_loop(free.space, (1, 0), 16, log_period=0.2)
        # with no field terms the kinetic preservation is exact
        assert action(free, refine_loop(line), 0.9) \
            == pytest.approx(action(free, line, 0.9), rel=1e-14)

    def test_refine_preserves_class_and_period(self, models):
        loop = winding_line_loop(torus(2), (2, -1), 32, log_period=0.3)
        ref = refine_loop(loop)
        assert ref.n_points == 64
        assert ref.tag == (2, -1)
        assert ref.log_period == loop.log_period

    def test_resample_preserves_geometry(self, models):
        rng = np.random.default_rng(31)
        for model in models.values():
            loop = random_loop(model, rng, n_points=24)
            up = resample_loop(loop, 96)
            assert up.n_points == 96
            assert up.period == pytest.approx(loop.period, rel=1e-14)
            assert loop_distance(loop, up) < 5e-3
            if model.space.is_torus:
                assert up.tag == loop.tag

    def test_lift_is_continuous_and_integral(self):
        loop = winding_line_loop(torus(2), (1, -2), 40, log_period=0.0)
        lifted, disp = lift_points(loop)
        assert np.max(np.abs(disp)) < 0.4
        total = disp.sum(axis=0)
        assert total == pytest.approx([1.0, -2.0], abs=1e-12)
        # lift increments reproduce the displacements
        assert np.allclose(np.diff(lifted, axis=0), disp[:-1], atol=1e-12)

    def test_loop_distance_shift_invariance(self, models):
        loop = random_loop(models["sys-mecht2"], np.random.default_rng(32))
        rolled = DiscreteLoop(loop.space, np.roll(loop.points, 7, axis=0),
                              log_period=loop.log_period, tag=loop.tag)
        assert loop_distance(loop, rolled) < 1e-12
        assert loop_distance(loop, loop) == 0.0


class TestConcat:
    def test_tags_add_and_loops_stay_admissible(self, models):
        space = torus(2)
        a = winding_line_loop(space, (0, 1), 48, log_period=0.0,
                              offset=(0.5, 0.0))
        b = winding_line_loop(space, (0, -1), 48, log_period=0.0,
                              offset=(0.0, 0.0))
        ab = concat_loops(a, b)
        assert ab.tag == (0, 0)
        # construction validates coarseness through tag inference on wrap
        assert ab.period > a.period + b.period - 1e-9

    def test_action_is_parts_plus_bounded_bridges(self, models):
        model = models["sys-magt2"]
        e = 0.46
        space = torus(2)
        p = 1.0 / np.sqrt(2 * e)
        a = winding_line_loop(space, (0, 1), 64, log_period=np.log(p),
                              offset=(0.5, 0.0))
        b = winding_line_loop(space, (0, -1), 64, log_period=np.log(p),
                              offset=(0.0, 0.0))
        ab = concat_loops(a, b)
        s_parts = action(model, a, e) + action(model, b, e)
        bridge_cost = action(model, ab, e) - s_parts
        # two straight crossings of gap 1/2: Maupertuis cost each is about
        # 0.5 sqrt(2 e); allow generous headroom but demand the right scale
        assert 0.2 < bridge_cost < 2.5

    def test_rejects_mixed_spaces(self, models):
        a = random_loop(models["sys-mecht2"], np.random.default_rng(33))
        b = random_loop(models["sys-mags2"], np.random.default_rng(34))
        with pytest.raises(ValueError):
            concat_loops(a, b)


class TestCoarsenessGuard:
    def test_action_refuses_coarse_loops(self, models):
        pts = np.stack([np.linspace(0, 1, 8, endpoint=False),
                        np.zeros(8)], axis=1)
        # segments of 0.125 are fine; stretch x by 4 to breach the guard
        coarse = np.stack([np.linspace(0, 4, 8, endpoint=False) % 1.0,
                           np.zeros(8)], axis=1)
        good = DiscreteLoop(torus(2), pts, period=1.0)
        assert np.isfinite(action(models["sys-mecht2"], good, 1.0))
        with pytest.raises(LoopTooCoarse):
            DiscreteLoop(torus(2), coarse, period=1.0)
        # an explicit tag skips inference, but evaluation still refuses
        loop = DiscreteLoop(torus(2), coarse, period=1.0, tag=(4, 0))
        with pytest.raises(LoopTooCoarse):
            action(models["sys-mecht2"], loop, 1.0)
