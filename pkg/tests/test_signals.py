import numpy as np
import pytest

from hmimo.signals import (PilotBlock, PreprocessError, combine_channel,
                           gen_combiner, gen_pilots, noise_precision,
                           simulate_rx, simulate_rx_hybrid, unitary_transform)


@pytest.fixture(scope="module")
def pilots():
    return gen_pilots(25, 100, seed=11)


@pytest.fixture(scope="module")
def channel():
    rng = np.random.default_rng(5)
    return rng.normal(size=(150, 100)) + 1j * rng.normal(size=(150, 100))


class TestPilots:
    def test_unit_magnitude(self, pilots):
        for s in (pilots.sx, pilots.sy, pilots.sz):
            assert np.allclose(np.abs(s), 1.0)

    def test_qpsk_alphabet(self, pilots):
        vals = np.concatenate([pilots.sx.ravel(), pilots.sy.ravel(), pilots.sz.ravel()])
        r = np.sqrt(0.5)
        assert np.allclose(np.abs(vals.real), r) and np.allclose(np.abs(vals.imag), r)

    def test_deterministic(self):
        a = gen_pilots(4, 7, seed=3)
        b = gen_pilots(4, 7, seed=3)
        assert np.array_equal(a.matrix, b.matrix)

    def test_mean_concentrates(self):
        p = gen_pilots(200, 500, seed=1)
        vals = np.concatenate([p.sx.ravel(), p.sy.ravel(), p.sz.ravel()])
        assert abs(vals.mean()) < 0.02

    def test_block_pattern(self):
        p = gen_pilots(3, 5, seed=0)
        s = p.matrix
        assert s.shape == (15, 18)
        n, ell = 3, 5
        zero = np.zeros((ell, n))
        # row block 1: [sx^T, 0, 0, sy^T, sz^T, 0]
        assert np.array_equal(s[:ell, :n], p.sx.T)
        assert np.array_equal(s[:ell, n:2 * n], zero)
        assert np.array_equal(s[:ell, 2 * n:3 * n], zero)
        assert np.array_equal(s[:ell, 3 * n:4 * n], p.sy.T)
        assert np.array_equal(s[:ell, 4 * n:5 * n], p.sz.T)
        assert np.array_equal(s[:ell, 5 * n:], zero)
        # row block 2: [0, sy^T, 0, sx^T, 0, sz^T]
        assert np.array_equal(s[ell:2 * ell, n:2 * n], p.sy.T)
        assert np.array_equal(s[ell:2 * ell, 3 * n:4 * n], p.sx.T)
        assert np.array_equal(s[ell:2 * ell, 5 * n:], p.sz.T)
        assert np.array_equal(s[ell:2 * ell, :n], zero)
        # row block 3: [0, 0, sz^T, 0, sx^T, sy^T]
        assert np.array_equal(s[2 * ell:, 2 * n:3 * n], p.sz.T)
        assert np.array_equal(s[2 * ell:, 3 * n:4 * n], zero)
        assert np.array_equal(s[2 * ell:, 4 * n:5 * n], p.sx.T)
        assert np.array_equal(s[2 * ell:, 5 * n:], p.sy.T)

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            gen_pilots(0, 5, seed=0)


class TestSimulateRx:
    def test_noiseless(self, pilots, channel):
        y, gamma = simulate_rx(channel, pilots, np.inf, seed=0)
        assert np.array_equal(y, pilots.matrix @ channel)
        assert gamma == np.inf

    def test_snr_calibration(self, pilots, channel):
        y, gamma = simulate_rx(channel, pilots, 10.0, seed=0)
        w = y - pilots.matrix @ channel
        sig = np.linalg.norm(pilots.matrix @ channel) ** 2 / y.size
        measured = 10 * np.log10(sig * gamma)
        assert measured == pytest.approx(10.0, abs=1e-12)
        emp_var = np.mean(np.abs(w) ** 2)
        assert emp_var == pytest.approx(1.0 / gamma, rel=0.05)

    def test_signal_referenced(self, pilots, channel):
        _, g1 = simulate_rx(channel, pilots, 10.0, seed=0)
        _, g2 = simulate_rx(2 * channel, pilots, 10.0, seed=0)
        assert g2 == pytest.approx(g1 / 4, rel=1e-12)

    def test_dimension_mismatch(self, pilots):
        with pytest.raises(ValueError):
            simulate_rx(np.zeros((151, 100), dtype=complex), pilots, 10.0, seed=0)


class TestUnitaryTransform:
    def test_phi_shape_and_residual(self, pilots, channel):
        y, _ = simulate_rx(channel, pilots, 5.0, seed=2)
        s = pilots.matrix
        model = unitary_transform(s, y)
        assert model.phi.shape == (300, 150)
        assert np.linalg.norm(model.r - model.phi @ channel) == pytest.approx(
            np.linalg.norm(y - s @ channel), rel=1e-10)

    def test_gram_preserved(self, pilots):
        s = pilots.matrix
        model = unitary_transform(s, np.zeros((300, 1), dtype=complex))
        assert np.allclose(model.phi.conj().T @ model.phi, s.conj().T @ s,
                           atol=1e-9 * np.linalg.norm(s) ** 2)

    def test_norm_preserved(self, pilots, channel):
        s = pilots.matrix
        model = unitary_transform(s, s @ channel)
        assert np.linalg.norm(model.phi @ channel) == pytest.approx(
            np.linalg.norm(s @ channel), rel=1e-12)

    def test_trailing_rows_zero(self, pilots):
        model = unitary_transform(pilots.matrix, np.zeros((300, 2), dtype=complex))
        assert np.all(model.phi[150:] == 0)

    def test_rank_deficient_rejected(self):
        s = np.ones((10, 4), dtype=complex)
        with pytest.raises(PreprocessError):
            unitary_transform(s, np.zeros((10, 1), dtype=complex))

    def test_wide_rejected(self):
        with pytest.raises(PreprocessError):
            unitary_transform(np.ones((4, 10), dtype=complex),
                              np.zeros((4, 1), dtype=complex))


class TestCombiner:
    def test_identity(self):
        f = gen_combiner(8, 8, seed=0, identity=True)
        assert np.array_equal(f, np.eye(8))

    def test_entry_magnitude(self):
        f = gen_combiner(5, 20, seed=4)
        assert np.allclose(np.abs(f), 1 / np.sqrt(20))
        assert np.allclose(np.linalg.norm(f, axis=1), 1.0)

    def test_deterministic(self):
        assert np.array_equal(gen_combiner(3, 9, seed=1), gen_combiner(3, 9, seed=1))

    def test_invalid(self):
        with pytest.raises(ValueError):
            gen_combiner(10, 5, seed=0)
        with pytest.raises(ValueError):
            gen_combiner(4, 5, seed=0, identity=True)

    def test_combine_blockdiag_oracle(self, channel):
        f = gen_combiner(20, 100, seed=3)
        g = combine_channel(f, channel)
        assert g.shape == (150, 20)
        # oracle: apply blockdiag(F,...,F) to the transposed stacked blocks
        n = 25
        for k in range(6):
            hk = channel[k * n:(k + 1) * n]           # (N, M)
            gk_t = f @ hk.T                            # (P, N)
            assert np.allclose(g[k * n:(k + 1) * n], gk_t.T)

    def test_hybrid_identity_reduces(self, pilots, channel):
        f = gen_combiner(100, 100, seed=0, identity=True)
        y_h, g_h = simulate_rx_hybrid(f, channel, pilots, 10.0, seed=7)
        y, g = simulate_rx(channel, pilots, 10.0, seed=7)
        assert np.array_equal(y_h, y)
        assert g_h == g

    def test_hybrid_dims(self, channel):
        pilots = gen_pilots(25, 200, seed=2)
        f = gen_combiner(20, 100, seed=1)
        y, _ = simulate_rx_hybrid(f, channel, pilots, 10.0, seed=0)
        assert y.shape == (600, 20)


class TestNoisePrecision:
    def test_known_value(self):
        s = np.eye(4, dtype=complex)
        h = np.full((4, 2), 2.0, dtype=complex)
        # per-entry signal power = 8*|2|^2/(4*2) = 4; snr 0 dB -> gamma = 1/4
        assert noise_precision(s, h, 0.0) == pytest.approx(0.25, rel=1e-12)
