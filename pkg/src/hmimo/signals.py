"""Pilot generation, receive simulation and unitary preprocessing.

Three co-located orthogonally polarized pilot streams of length L are
transmitted from N patches.  Stacking the three received polarizations
gives the linear model Y = S H + W with Y in C^{3L x M}, the block pilot
matrix S in C^{3L x 6N} and the stacked channel H in C^{6N x M}.  A full
SVD of S provides the unitary rotation under which the approximate
message-passing recursions stay well behaved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hmimo.green import POLARIZATIONS

QPSK = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2)


class PreprocessError(RuntimeError):
    """Raised when the pilot matrix is unusable (rank deficient)."""


@dataclass(frozen=True)
class PilotBlock:
    """QPSK pilot matrices for the three transmit polarizations."""

    sx: np.ndarray  # (N, L)
    sy: np.ndarray  # (N, L)
    sz: np.ndarray  # (N, L)

    def __post_init__(self):
        if not (self.sx.shape == self.sy.shape == self.sz.shape):
            raise ValueError("pilot matrices must share one shape")

    @property
    def n_patches(self) -> int:
        return self.sx.shape[0]

    @property
    def length(self) -> int:
        return self.sx.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        """Assembled block pilot matrix S of shape (3L, 6N).

        Row blocks correspond to the received x, y, z polarizations and
        column blocks to the six stacked channel components
        (xx, yy, zz, xy, xz, yz).
        """
        n, ell = self.sx.shape
        zero = np.zeros((ell, n), dtype=complex)
        sx, sy, sz = self.sx.T, self.sy.T, self.sz.T
        return np.block([
            [sx, zero, zero, sy, sz, zero],
            [zero, sy, zero, sx, zero, sz],
            [zero, zero, sz, zero, sx, sy],
        ])


def gen_pilots(n_patches: int, length: int, seed) -> PilotBlock:
    """Draw i.i.d. uniform QPSK pilots for the three polarizations."""
    if n_patches <= 0 or length <= 0:
        raise ValueError("n_patches and length must be positive")
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, 4, size=(3, n_patches, length))
    sx, sy, sz = QPSK[draws]
    return PilotBlock(sx=sx, sy=sy, sz=sz)


def noise_precision(s: np.ndarray, h: np.ndarray, snr_db: float) -> float:
    """Noise precision gamma giving the requested signal-referenced SNR.

    SNR is the per-entry average received signal power over the noise
    variance: snr = ||S H||_F^2 * gamma / (3 L M).
    """
    sig = np.linalg.norm(s @ h) ** 2 / s.shape[0] / h.shape[1]
    return 10.0 ** (snr_db / 10.0) / sig


def _awgn(shape, precision: float, rng: np.random.Generator) -> np.ndarray:
    scale = np.sqrt(0.5 / precision)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def simulate_rx(h: np.ndarray, pilots: PilotBlock, snr_db: float, seed):
    """Simulate Y = S H + W at the requested SNR.

    ``h`` is the stacked channel (6N, M).  Returns (Y, gamma) where gamma
    is the true noise precision; snr_db = inf yields the noiseless Y and
    gamma = inf.
    """
    s = pilots.matrix
    if h.shape[0] != s.shape[1]:
        raise ValueError(f"channel rows {h.shape[0]} != pilot columns {s.shape[1]}")
    y0 = s @ h
    if np.isinf(snr_db):
        return y0, np.inf
    gamma = noise_precision(s, h, snr_db)
    rng = np.random.default_rng(seed)
    return y0 + _awgn(y0.shape, gamma, rng), gamma


@dataclass(frozen=True)
class UnitaryModel:
    """Rotated observation model R = Phi H + U^H W from a full SVD of S."""

    phi: np.ndarray       # (3L, 6N) = Lambda V^H, rows beyond 6N are zero
    r: np.ndarray         # (3L, M)
    singular_values: np.ndarray

    @property
    def column_norms_sq(self) -> np.ndarray:
        return np.sum(np.abs(self.phi) ** 2, axis=0)


def unitary_transform(s: np.ndarray, y: np.ndarray) -> UnitaryModel:
    """Rotate the observation model by the left singular basis of S.

    Uses the full SVD so that R keeps all 3L rows; the rows of Phi beyond
    the column count are zero but carry noise energy that the estimator's
    precision update needs.
    """
    rows, cols = s.shape
    if rows < cols:
        raise PreprocessError(f"pilot matrix {s.shape} has fewer rows than columns")
    u, sv, vh = np.linalg.svd(s, full_matrices=True)
    if sv[-1] <= rows * np.finfo(float).eps * sv[0]:
        raise PreprocessError("pilot matrix is rank deficient")
    phi = np.zeros_like(s)
    phi[:cols] = sv[:, None] * vh
    return UnitaryModel(phi=phi, r=u.conj().T @ y, singular_values=sv)


# --- hybrid (analog combining) receiver --------------------------------


def gen_combiner(p: int, m: int, seed, identity: bool = False) -> np.ndarray:
    """Random unit-modulus combining matrix F of shape (P, M).

    Entries are phase-only with magnitude 1/sqrt(M) so every row has unit
    norm; ``identity`` returns I_M (requires P == M) for equivalence tests.
    """
    if not 1 <= p <= m:
        raise ValueError(f"need 1 <= P <= M, got P={p}, M={m}")
    if identity:
        if p != m:
            raise ValueError("identity combiner requires P == M")
        return np.eye(m, dtype=complex)
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2 * np.pi, size=(p, m))
    return np.exp(1j * theta) / np.sqrt(m)


def combine_channel(f: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Reduced channel G (6N, P) with G_kappa^T = F H_kappa^T per component."""
    n6, m = h.shape
    if n6 % 6:
        raise ValueError("stacked channel row count must be a multiple of 6")
    if f.shape[1] != m:
        raise ValueError(f"combiner columns {f.shape[1]} != antennas {m}")
    n = n6 // 6
    blocks = [h[k * n:(k + 1) * n] @ f.T for k in range(6)]
    return np.concatenate(blocks, axis=0)


def simulate_rx_hybrid(f: np.ndarray, h: np.ndarray, pilots: PilotBlock,
                       snr_db: float, seed):
    """Simulate the combined receiver Y = S G + W of shape (3L, P).

    The SNR is referenced to the combined signal S G, so gamma describes
    the per-entry noise after combining.  Returns (Y, gamma).
    """
    return simulate_rx(combine_channel(f, h), pilots, snr_db, seed)
