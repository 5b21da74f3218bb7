"""Monodromy spectra, stability classes, iterate relations, cylinders, twist.

Analytic anchors:
  * free torus geodesic: the variational flow is a unit shear, monodromy
    exactly [[I, pI], [0, I]], all multipliers 1;
  * potential-valley line on the two-well torus: transverse dynamics is a
    stable oscillator, so the reduced multipliers lie on the unit circle
    and the nonlinear section-return rotation must reproduce the Floquet
    angle;
  * pendulum around the stable rest point: the oscillation period grows
    with amplitude (softening), fixing the sign of the fitted twist and
    the linear rotation of the fixed-time map;
  * symplectic structure: reduced multipliers come in inverse pairs, and
    the monodromy determinant is 1.
"""

import dataclasses

import numpy as np
import pytest
from scipy.optimize import brentq

from waistlab.action import DiscreteLoop, action_hessian_spectrum, iterate_loop
from waistlab.floquet import (
    CylinderBranch,
    attach_stability,
    birkhoff_lewis_probe,
    classify,
    classify_matrix,
    continue_cylinder,
    fixed_time_sampler,
    monodromy,
    section_return_sampler,
    twist_fit,
    unit_multiplier_geometric_count,
)
from waistlab.lagrangian import el_flow
from waistlab.orbits import refine_orbit

from conftest import DESK_ENERGY

C_STAR = 0.438202
LANE_TOP_MULTIPLIER = 611.029  # transverse stretch of the desk-energy lane
VALLEY_ANGLE = 2.4128900  # Floquet angle of the valley line at e = 2.5
RIDGE12_TOP_MULTIPLIER = 3.8254069  # ridge line at e = 12


def rot2(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def block_diag(*mats):
    n = sum(m.shape[0] for m in mats)
    out = np.zeros((n, n))
    k = 0
    for m in mats:
        out[k:k + m.shape[0], k:k + m.shape[0]] = m
        k += m.shape[0]
    return out


def assert_inverse_pairing(multipliers, rel_tol=1e-5):
    """Each multiplier has a partner with product 1 (symplectic pairing)."""
    mults = np.asarray(multipliers)
    for mu in mults:
        prods = np.abs(mults * mu - 1.0)
        assert prods.min() <= rel_tol * max(1.0, abs(mu)), (
            f"multiplier {mu} lacks an inverse partner"
        )


@pytest.fixture(scope="module")
def magt2(models):
    return models["sys-magt2"]


@pytest.fixture(scope="module")
def mecht2(models):
    return models["sys-mecht2"]


@pytest.fixture(scope="module")
def ridge12(mecht2):
    """Mildly hyperbolic orbit: the potential-ridge line at high energy."""
    e = 12.0
    ts = np.linspace(0.0, 1.0, 48, endpoint=False)
    pts = np.stack([ts, np.zeros_like(ts)], axis=1)
    guess = DiscreteLoop(mecht2.space, pts,
                         log_period=np.log(1.0 / np.sqrt(2 * (e - 1))),
                         tag=(1, 0))
    return refine_orbit(mecht2, guess, e_target=e)


@pytest.fixture(scope="module")
def valley(mecht2):
    """Elliptic orbit: the potential-valley line at e = 2.5."""
    e = 2.5
    ts = np.linspace(0.0, 1.0, 48, endpoint=False)
    pts = np.stack([ts, np.full_like(ts, 0.5)], axis=1)
    guess = DiscreteLoop(mecht2.space, pts,
                         log_period=np.log(1.0 / np.sqrt(2 * (e + 1))),
                         tag=(1, 0))
    return refine_orbit(mecht2, guess, e_target=e)


@pytest.fixture(scope="module")
def free_geodesic(models):
    free = models["sys-free-t2"]
    ts = np.linspace(0.0, 1.0, 32, endpoint=False)
    guess = DiscreteLoop(free.space, np.stack([ts, np.zeros_like(ts)], axis=1),
                         log_period=0.0, tag=(1, 0))
    return refine_orbit(free, guess, e_target=0.5)


@pytest.fixture(scope="module")
def pend_oscillation(models):
    pend = models["sys-pend"]
    ts = np.linspace(0.0, 1.0, 64, endpoint=False)
    pts = (0.5 + 0.25 * np.sin(2 * np.pi * ts))[:, None]
    guess = DiscreteLoop(pend.space, pts, log_period=np.log(1.15))
    return refine_orbit(pend, guess, e_target=1.0)


@pytest.fixture(scope="module")
def sphere_waist(models):
    """The magnetic-sphere latitude waist, built from its analytic shape."""
    mags2 = models["sys-mags2"]
    e = 1.05 * 0.125055
    z0 = 1.0 / np.sqrt(2.0)
    r0 = np.sqrt(1.0 - z0 ** 2)
    ts = np.linspace(0.0, 1.0, 48, endpoint=False)
    pts = np.stack([r0 * np.cos(-2 * np.pi * ts),
                    r0 * np.sin(-2 * np.pi * ts),
                    np.full_like(ts, z0)], axis=1)
    guess = DiscreteLoop(mags2.space, pts, log_period=np.log(8.6147))
    rec = refine_orbit(mags2, guess, e_target=e)
    assert rec.index == 0 and abs(rec.action - 0.0551848) < 1e-6
    return rec


# ---------------------------------------------------------------------------
# monodromy and symplectic structure


class TestMonodromy:
    def test_determinant_one_and_pairing_across_systems(
            self, models, lane_waist, ridge12, valley, free_geodesic,
            pend_oscillation, sphere_waist):
        cases = [
            (models["sys-magt2"], lane_waist),
            (models["sys-mecht2"], ridge12),
            (models["sys-mecht2"], valley),
            (models["sys-free-t2"], free_geodesic),
            (models["sys-pend"], pend_oscillation),
            (models["sys-mags2"], sphere_waist),
        ]
        for model, rec in cases:
            mat = monodromy(model, rec)
            assert abs(np.linalg.det(mat) - 1.0) < 1e-6
            assert_inverse_pairing(np.linalg.eigvals(mat))

    def test_free_geodesic_monodromy_is_a_unit_shear(self, models,
                                                     free_geodesic):
        mat = monodromy(models["sys-free-t2"], free_geodesic)
        p = free_geodesic.period
        expected = np.eye(4)
        expected[:2, 2:] = p * np.eye(2)
        assert np.allclose(mat, expected, atol=1e-8)
        shear = mat - np.eye(4)
        assert np.linalg.norm(shear) > 0.5
        assert np.linalg.norm(shear @ shear) < 1e-8
        mults = np.linalg.eigvals(mat)
        assert np.all(np.abs(mults - 1.0) < 1e-6)

    def test_pendulum_oscillation_trivial_pair_only(self, models,
                                                    pend_oscillation):
        rep = classify(models["sys-pend"], pend_oscillation)
        assert rep.multipliers.shape == (2,)
        assert np.all(np.abs(rep.multipliers - 1.0) < 1e-5)
        assert rep.reduced_multipliers.size == 0
        assert rep.stability_class == "degenerate"


# ---------------------------------------------------------------------------
# classification of synthetic return maps


class TestClassifyMatrix:
    def test_generic_elliptic_block_pair(self):
        rep = classify_matrix(block_diag(rot2(0.7), rot2(1.1)))
        assert rep.stability_class == "elliptic"
        assert np.allclose(np.sort(rep.angles), [0.7, 1.1], atol=1e-9)
        assert rep.four_elementary
        assert rep.failing_combination is None

    def test_resonant_angles_fail_four_elementary(self):
        theta = 0.9
        rep = classify_matrix(block_diag(rot2(theta), rot2(np.pi - theta)))
        assert rep.stability_class == "elliptic"
        assert not rep.four_elementary
        combo = rep.failing_combination
        assert combo is not None and sum(abs(c) for c in combo) <= 4
        resid = np.dot(combo, np.sort(rep.angles))
        resid = abs((resid + np.pi) % (2 * np.pi) - np.pi)
        assert resid <= 1e-4

    def test_minus_one_pair_is_resonant(self):
        rep = classify_matrix(rot2(np.pi))
        assert not rep.four_elementary
        combo = rep.failing_combination
        assert combo is not None and 1 <= sum(abs(c) for c in combo) <= 4
        resid = np.dot(combo, rep.angles)
        assert abs((resid + np.pi) % (2 * np.pi) - np.pi) <= 1e-4

    def test_hyperbolic_and_mixed_blocks(self):
        hyp = classify_matrix(np.diag([2.0, 0.5]))
        assert hyp.stability_class == "hyperbolic"
        assert hyp.four_elementary  # no angles, vacuously non-resonant
        mixed = classify_matrix(block_diag(np.diag([2.0, 0.5]), rot2(0.7)))
        assert mixed.stability_class == "quasi_elliptic"

    def test_near_unit_multiplier_is_degenerate(self):
        rep = classify_matrix(np.diag([1.0 + 5e-7, 1.0 / (1.0 + 5e-7)]))
        assert rep.stability_class == "degenerate"
        empty = classify_matrix(np.zeros((0, 0)))
        assert empty.stability_class == "degenerate"

    def test_unit_multiplier_geometric_count(self):
        assert unit_multiplier_geometric_count(np.eye(2)) == 2
        assert unit_multiplier_geometric_count([[1.0, 1.0], [0.0, 1.0]]) == 1
        assert unit_multiplier_geometric_count(np.diag([2.0, 0.5])) == 0
        assert unit_multiplier_geometric_count(np.zeros((0, 0))) == 0


class TestOrbitClassification:
    def test_lane_waist_is_hyperbolic(self, magt2, lane_waist):
        rep = attach_stability(magt2, lane_waist)
        assert rep.stability_class == "hyperbolic"
        lam = np.sort(rep.reduced_multipliers.real)
        assert np.all(np.abs(rep.reduced_multipliers.imag) < 1e-9)
        assert abs(lam[0] * lam[1] - 1.0) < 1e-5
        assert abs(lam[1] - LANE_TOP_MULTIPLIER) < 0.5
        assert lane_waist.stability == "hyperbolic"

    def test_sphere_waist_is_hyperbolic(self, models, sphere_waist):
        rep = classify(models["sys-mags2"], sphere_waist)
        assert rep.stability_class == "hyperbolic"
        assert unit_multiplier_geometric_count(rep.reduced_matrix) == 0

    def test_valley_line_is_elliptic_with_known_angle(self, mecht2, valley):
        rep = classify(mecht2, valley)
        assert rep.stability_class == "elliptic"
        assert np.all(np.abs(np.abs(rep.reduced_multipliers) - 1.0) < 1e-9)
        assert abs(rep.angles[0] - VALLEY_ANGLE) < 1e-5
        assert rep.four_elementary

    def test_nullity_bridge_degenerate_and_nondegenerate(
            self, models, magt2, free_geodesic, lane_waist):
        free_rep = classify(models["sys-free-t2"], free_geodesic)
        count = unit_multiplier_geometric_count(free_rep.reduced_matrix)
        assert free_geodesic.nullity_total - 1 == count == 1
        lane_rep = classify(magt2, lane_waist)
        count = unit_multiplier_geometric_count(lane_rep.reduced_matrix)
        assert lane_waist.nullity_total - 1 == count == 0


# ---------------------------------------------------------------------------
# iterate relations on a hyperbolic orbit


class TestIterateRelations:
    def test_seed_is_mildly_hyperbolic(self, mecht2, ridge12):
        rep = attach_stability(mecht2, ridge12)
        assert rep.stability_class == "hyperbolic"
        assert ridge12.index == 0 and ridge12.nullity_total == 1
        lam = np.sort(rep.reduced_multipliers.real)
        assert abs(lam[1] - RIDGE12_TOP_MULTIPLIER) < 1e-3

    def test_iterate_multipliers_are_powers(self, mecht2, ridge12):
        lam = np.sort_complex(classify(mecht2, ridge12).reduced_multipliers)
        for m in (2, 3, 4):
            rec_m = dataclasses.replace(ridge12, period=m * ridge12.period)
            got = np.sort_complex(classify(mecht2, rec_m).reduced_multipliers)
            want = np.sort_complex(lam ** m)
            assert np.max(np.abs(got - want) / np.abs(want)) < 1e-6

    def test_iterate_index_scales_and_nullity_stays_one(self, mecht2,
                                                        ridge12):
        for m in (1, 2, 3, 4):
            it = iterate_loop(ridge12.loop, m)
            fixed = action_hessian_spectrum(mecht2, it, 12.0,
                                            fixed_period=True, grad_tol=1e-2)
            assert fixed.index == m * ridge12.index == 0
            assert fixed.nullity_total == 1
            free = action_hessian_spectrum(mecht2, it, 12.0, grad_tol=1e-2)
            assert fixed.index <= free.index <= fixed.index + 1

    def test_iterates_stay_hyperbolic(self, mecht2, ridge12):
        for m in (2, 3, 4):
            rec_m = dataclasses.replace(ridge12, period=m * ridge12.period)
            assert classify(mecht2, rec_m).stability_class == "hyperbolic"


# ---------------------------------------------------------------------------
# orbit cylinders


@pytest.fixture(scope="module")
def lane_branch(magt2, lane_waist):
    return continue_cylinder(magt2, lane_waist,
                             1.03 * C_STAR, 1.10 * C_STAR, steps=9)


class TestCylinder:

    def test_waist_cylinder_identity(self, lane_branch):
        br = lane_branch
        assert isinstance(br, CylinderBranch)
        assert len(br.samples) == 9
        # the lane family has exact period 1/sqrt(2e)
        assert np.max(np.abs(br.periods - 1.0 / np.sqrt(2 * br.energies))) \
            < 1e-10
        rel = np.abs(br.d_action_d_e[1:-1] / br.periods[1:-1] - 1.0)
        assert np.max(rel) < 1e-4
        assert np.all(np.isnan(br.d_action_d_e[[0, -1]]))

    def test_waist_cylinder_stays_hyperbolic_waist(self, lane_branch):
        for _, rec in lane_branch.samples:
            assert rec.is_waist
            assert rec.index == 0 and rec.nullity_total == 1
            assert rec.stability == "hyperbolic"

    def test_free_family_matches_analytic_period(self, models,
                                                 free_geodesic):
        br = continue_cylinder(models["sys-free-t2"], free_geodesic,
                               0.45, 0.48, steps=8)
        assert np.max(np.abs(br.periods - 1.0 / np.sqrt(2 * br.energies))) \
            < 1e-8
        rel = np.abs(br.d_action_d_e[1:-1] / br.periods[1:-1] - 1.0)
        assert np.max(rel) < 1e-4

    def test_empty_interval_rejected(self, magt2, lane_waist):
        with pytest.raises(ValueError, match="empty energy interval"):
            continue_cylinder(magt2, lane_waist, 0.5, 0.5, steps=4)


# ---------------------------------------------------------------------------
# twist fits


def synthetic_twist_map(z):
    z = np.asarray(z, dtype=float)
    ang = 0.7 + 2 * np.pi * 0.31 * (z @ z)
    return rot2(ang) @ z


class TestTwistFit:
    def test_synthetic_twist_recovered(self):
        fit = twist_fit(synthetic_twist_map, 0.25)
        assert abs(fit.twist - 0.31) / 0.31 < 0.05
        assert abs(fit.rotation - 0.7) < 1e-6
        assert fit.nonzero

    def test_pure_rotation_has_zero_twist(self):
        fit = twist_fit(lambda z: rot2(0.7) @ np.asarray(z, float), 0.25)
        assert abs(fit.twist) < 1e-12
        assert not fit.nonzero

    def test_hyperbolic_map_rejected(self):
        with pytest.raises(ValueError, match="not elliptic"):
            twist_fit(lambda z: np.diag([2.0, 0.5]) @ np.asarray(z, float),
                      0.1)

    def test_pendulum_twist_sign_matches_softening(self, models):
        pend = models["sys-pend"]
        p_map = 0.37
        sampler = fixed_time_sampler(pend, p_map)
        fit = twist_fit(sampler, 0.06)
        # linear rotation of the time-p map: frequency at the rest point
        # is 2 pi, so the angle advances by 2 pi p per application
        assert abs(fit.rotation - 2 * np.pi * p_map) < 1e-3
        assert fit.nonzero

        def oscillation_period(amplitude):
            y0 = np.array([sampler.center[0] + amplitude, 0.0])
            res = el_flow(pend, y0, 3.0, dense=True)

            def vel(t):
                return float(res.sol(t)[1])

            ts = np.linspace(0.05, 3.0, 800)
            vs = [vel(t) for t in ts]
            for i in range(len(ts) - 1):
                if vs[i] < 0.0 <= vs[i + 1]:
                    return brentq(vel, ts[i], ts[i + 1])
            raise AssertionError("no period found")

        t_small = oscillation_period(0.02)
        t_large = oscillation_period(0.10)
        assert t_large > t_small + 1e-3  # softening: period grows
        # growing period means the map rotation 2 pi p / T(A) falls with
        # amplitude, so the fitted twist must be negative
        assert fit.twist < 0

    def test_valley_rotation_reproduces_floquet_angle(self, mecht2, valley):
        sampler = section_return_sampler(mecht2, valley)
        fit = twist_fit(sampler, 1e-2)
        assert abs(fit.rotation - VALLEY_ANGLE) < 1e-5
        assert fit.nonzero


# ---------------------------------------------------------------------------
# nonlinear section return maps


class TestSectionReturn:
    def test_valley_fixed_point_and_linearization(self, mecht2, valley):
        sampler = section_return_sampler(mecht2, valley)
        assert np.linalg.norm(sampler(np.zeros(2))) < 1e-12
        assert abs(sampler.last_return_time - valley.period) < 1e-9
        h = 1e-6
        lin = np.zeros((2, 2))
        for i in range(2):
            ei = np.zeros(2)
            ei[i] = h
            lin[:, i] = (sampler(ei) - sampler(-ei)) / (2 * h)
        got = np.sort_complex(np.linalg.eigvals(lin))
        want = np.sort_complex(classify(mecht2, valley).reduced_multipliers)
        assert np.max(np.abs(got - want)) < 1e-6

    def test_winding_hyperbolic_lane_is_tracked(self, magt2, lane_waist):
        sampler = section_return_sampler(magt2, lane_waist)
        assert np.linalg.norm(sampler(np.zeros(2))) < 1e-12
        h = 1e-7
        lin = np.zeros((2, 2))
        for i in range(2):
            ei = np.zeros(2)
            ei[i] = h
            lin[:, i] = (sampler(ei) - sampler(-ei)) / (2 * h)
        got = np.sort_complex(np.linalg.eigvals(lin))
        want = np.sort_complex(
            classify(magt2, lane_waist).reduced_multipliers)
        assert np.max(np.abs(got - want) / np.abs(want)) < 5e-3

    def test_dimension_guards(self, models, pend_oscillation, sphere_waist):
        with pytest.raises(ValueError, match="d=2 torus"):
            section_return_sampler(models["sys-pend"], pend_oscillation)
        with pytest.raises(ValueError, match="d=2 torus"):
            section_return_sampler(models["sys-mags2"], sphere_waist)
        with pytest.raises(ValueError, match="d=1 torus"):
            fixed_time_sampler(models["sys-mecht2"], 1.0)


# ---------------------------------------------------------------------------
# subharmonic probe


class TestBirkhoffLewis:
    def test_pendulum_subharmonics(self, models, pend_oscillation):
        pend = models["sys-pend"]
        subs = birkhoff_lewis_probe(pend, pend_oscillation,
                                    min_period_factor=3, budget=400)
        assert len(subs) >= 2
        for rec in subs:
            cert = rec.certificate
            assert cert["kind"] == "subharmonic"
            assert cert["n"] > 3
            assert np.gcd(cert["n"], cert["m"]) == 1
            assert rec.period > 3 * pend_oscillation.period
            assert abs(rec.period - cert["return_period"]) < 1e-9
            assert rec.energy_residual < 1e-6
        energies = [rec.energy for rec in subs]
        assert energies == sorted(energies)

    def test_hyperbolic_orbit_rejected(self, magt2, lane_waist):
        with pytest.raises(ValueError, match="not twist type"):
            birkhoff_lewis_probe(magt2, lane_waist)
