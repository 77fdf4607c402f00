import numpy as np
import pytest

from hmimo.geometry import SurfaceGeometry
from hmimo.green import (ChannelTensor, QuadratureRule, SingularityError,
                         WaveConfig, approx_channel, blocks_to_components,
                         dyadic_green, field_dump, full_channel,
                         full_channel_approx, patch_channel,
                         patch_channel_batch, scalar_green)

F_3GHZ = 3e9


@pytest.fixture(scope="module")
def wave():
    return WaveConfig(F_3GHZ)


@pytest.fixture(scope="module")
def geom():
    return SurfaceGeometry(10, 10, 5, 5, 0.05, 0.05, 0.01, 0.01)


class TestScalarGreen:
    def test_one_wavelength(self, wave):
        lam = wave.wavelength
        g = scalar_green((0, 0, lam), (0, 0, 0), wave)
        assert g == pytest.approx(1.0 / (4 * np.pi * lam), rel=1e-12)

    def test_half_wavelength_phase_flip(self, wave):
        lam = wave.wavelength
        g = scalar_green((0, 0, lam / 2), (0, 0, 0), wave)
        assert g == pytest.approx(-1.0 / (2 * np.pi * lam), rel=1e-12)

    def test_magnitude_at_30m(self, wave):
        g = scalar_green((0, 0, 30.0), (0, 0, 0), wave)
        assert abs(g) == pytest.approx(1.0 / (4 * np.pi * 30.0), rel=1e-12)

    def test_zero_distance_raises(self, wave):
        with pytest.raises(SingularityError):
            scalar_green((1, 2, 3), (1, 2, 3), wave)


class TestDyadicGreen:
    def test_symmetry(self, wave):
        rng = np.random.default_rng(7)
        for _ in range(20):
            rt = rng.normal(size=3) + np.array([0, 0, 10.0])
            rr = rng.normal(size=3)
            g = dyadic_green(rt, rr, wave)
            assert np.array_equal(g, g.T)

    def test_far_field_coefficients(self, wave):
        # c1 -> 1, c2 -> -1 as k0*r -> infinity
        lam = wave.wavelength
        r = 1e6 * lam
        g = dyadic_green((0, 0, r), (0, 0, 0), wave)
        scal = scalar_green((0, 0, r), (0, 0, 0), wave)
        c1 = g[0, 0] / scal
        c2 = g[2, 2] / scal - c1
        assert abs(c1 - 1.0) < 1e-5
        assert abs(c2 + 1.0) < 1e-5

    def test_z_aligned_structure(self, wave):
        g = dyadic_green((0, 0, 25.0), (0, 0, 0), wave)
        offdiag = g - np.diag(np.diag(g))
        assert np.max(np.abs(offdiag)) == 0.0
        scal = scalar_green((0, 0, 25.0), (0, 0, 0), wave)
        kr = wave.wavenumber * 25.0
        c1 = 1 + 1j / kr - 1 / kr**2
        c2 = 3 / kr**2 - 3j / kr - 1
        assert g[2, 2] == pytest.approx(scal * (c1 + c2), rel=1e-12)
        assert g[0, 0] == pytest.approx(scal * c1, rel=1e-12)


class TestQuadrature:
    def test_rule_validation(self):
        with pytest.raises(ValueError):
            QuadratureRule(1)

    def test_weights_sum_to_one(self):
        for order in (2, 4, 8, 16):
            q = QuadratureRule(order)
            assert np.sum(q.weights) == pytest.approx(1.0, rel=1e-14)
            assert np.all(np.abs(q.nodes) < 0.5)

    def test_patch_channel_symmetric(self, geom, wave):
        b = patch_channel(7, 13, geom, (0.3, -0.2, 25.0), wave, QuadratureRule(4))
        assert np.array_equal(b, b.T)

    def test_self_convergence(self, geom, wave):
        p1 = (0.3, -0.2, 25.0)
        b8 = patch_channel(1, 1, geom, p1, wave, QuadratureRule(8))
        b16 = patch_channel(1, 1, geom, p1, wave, QuadratureRule(16))
        rel = np.linalg.norm(b8 - b16) / np.linalg.norm(b16)
        assert rel < 1e-8

    def test_convergence_monotone_until_machine_eps(self, geom, wave):
        p1 = (0.1, 0.2, 5.0)
        ref = patch_channel(1, 1, geom, p1, wave, QuadratureRule(32))
        errs = []
        for order in (2, 4, 8):
            b = patch_channel(1, 1, geom, p1, wave, QuadratureRule(order))
            errs.append(np.linalg.norm(b - ref) / np.linalg.norm(ref))
        assert errs[0] > errs[1] > errs[2] or errs[-1] < 1e-14

    def test_translation_invariance(self, geom, wave):
        q = QuadratureRule(6)
        # pairs (m=1,n=2) and shifted surfaces must give identical blocks
        b_a = patch_channel(1, 2, geom, (0.3, -0.2, 25.0), wave, q)
        # shift both surfaces: equivalent to evaluating the same relative coords
        b_b = patch_channel_batch(np.array([[0.31, -0.2, 25.0]]), geom, wave, q)[0]
        assert np.allclose(b_a, b_b, rtol=1e-14)


class TestApproxChannel:
    def test_aligned_patch_sinc_is_one(self, geom, wave):
        # aligned: x_m^r == x_n^t and y_m^r == y_n^t -> pure prefactor * C
        b = approx_channel(1, 1, geom, (0.0, 0.0, 30.0), wave)
        r = 30.0
        area = (0.01 * 0.01) * (0.05 * 0.05)
        expect_mag = abs(wave.prefactor) * area / (4 * np.pi * r)
        kr = wave.wavenumber * r
        c1 = 1 + 1j / kr - 1 / kr**2
        assert abs(b[0, 0]) == pytest.approx(expect_mag * abs(c1), rel=1e-12)

    def test_magnitude_prefactor(self, wave, geom):
        b = approx_channel(1, 1, geom, (0.0, 0.0, 30.0), wave)
        omega_mu = abs(wave.prefactor)
        area_t, area_r = 1e-4, 2.5e-3
        expected = omega_mu * area_t * area_r / (4 * np.pi * 30.0)
        kr = wave.wavenumber * 30.0
        c1 = abs(1 + 1j / kr - 1 / kr**2)
        assert abs(b[0, 0]) == pytest.approx(expected * c1, rel=1e-12)

    def test_matches_quadrature_far(self, geom, wave):
        p1 = (0.3, -0.2, 25.0)
        q = QuadratureRule(8)
        b_quad = patch_channel(3, 5, geom, p1, wave, q)
        b_approx = approx_channel(3, 5, geom, p1, wave)
        rel = np.linalg.norm(b_approx - b_quad) / np.linalg.norm(b_quad)
        assert rel < 0.05

    def test_error_decreases_with_distance(self, geom, wave):
        q = QuadratureRule(8)
        errs = []
        for z in (5.0, 10.0, 20.0, 40.0):
            b_q = patch_channel(1, 1, geom, (0.2, 0.1, z), wave, q)
            b_a = approx_channel(1, 1, geom, (0.2, 0.1, z), wave)
            errs.append(np.linalg.norm(b_a - b_q) / np.linalg.norm(b_q))
        assert all(errs[i] > errs[i + 1] for i in range(len(errs) - 1))


class TestChannelTensor:
    def test_dimensions(self, geom, wave):
        h = full_channel(geom, (0.3, -0.2, 25.0), wave, QuadratureRule(4))
        assert h.stacked.shape == (150, 100)

    def test_stack_roundtrip(self, geom, wave):
        h = full_channel_approx(geom, (0.3, -0.2, 25.0), wave)
        h2 = ChannelTensor.from_stacked(h.stacked)
        for k in h.components:
            assert np.array_equal(h.components[k], h2.components[k])

    def test_blocks_match_pairwise_quadrature(self, geom, wave):
        q = QuadratureRule(4)
        p1 = (0.3, -0.2, 25.0)
        h = full_channel(geom, p1, wave, q)
        for m, n in [(1, 1), (42, 7), (100, 25)]:
            assert np.allclose(h.block(m, n), patch_channel(m, n, geom, p1, wave, q),
                               rtol=1e-12)

    def test_identical_relative_coords_share_blocks(self, wave):
        # equal patch sizes make offsets collide between pairs
        geom = SurfaceGeometry(3, 3, 2, 2, 0.05, 0.05, 0.05, 0.05)
        h = full_channel(geom, (0.0, 0.0, 25.0), wave, QuadratureRule(4))
        # (m=1, n=1) and (m=5, n=... ) pairs with same relative offsets:
        # rel(m=2, n=2) has x: 0.05-0.05 = 0 = rel(1,1)
        assert np.allclose(h.block(2, 2), h.block(1, 1), rtol=1e-13)

    def test_symmetric_fold(self, geom, wave):
        # the xy component equals the would-be yx entry by construction
        b = patch_channel(5, 9, geom, (0.3, -0.2, 25.0), wave, QuadratureRule(4))
        comps = blocks_to_components(b[None])[0]
        assert comps[3] == b[0, 1] == b[1, 0]


@pytest.fixture(scope="module")
def dump(geom, wave):
    return field_dump(geom, wave, QuadratureRule(4), "y", 0.0,
                      sweep1=(-1.0, 1.0), sweep2=(20.0, 24.0), resolution=(41, 9))


class TestFieldDump:
    def test_grid_dimensions(self, dump):
        assert dump.shape == (41, 9)

    def test_magnitude_preserved(self, dump):
        raw = dump["re_raw"] + 1j * dump["im_raw"]
        derot = dump["re_derot"] + 1j * dump["im_derot"]
        assert np.allclose(np.abs(raw), np.abs(derot), rtol=1e-12)

    def test_derotated_varies_slowly(self, dump):
        raw = dump["re_raw"]
        derot = dump["re_derot"]
        grad_raw = np.max(np.abs(np.diff(raw, axis=0)))
        grad_derot = np.max(np.abs(np.diff(derot, axis=0)))
        assert grad_raw > 10 * grad_derot

    def test_csv_writer(self, dump, tmp_path):
        from hmimo.green import write_field_dump_csv
        path = tmp_path / "dump.csv"
        write_field_dump_csv(path, dump)
        lines = path.read_text().splitlines()
        assert lines[0] == "x,y,z,re_raw,im_raw,re_derot,im_derot"
        assert len(lines) == 1 + 41 * 9
