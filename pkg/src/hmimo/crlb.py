"""Fisher information and Cramér-Rao bound on the transmitter position.

The received pilot block is Y = S H(p) + W with i.i.d. complex Gaussian
noise of known precision gamma (per-entry variance 1/gamma).  The channel
columns h_m(p) and their position derivatives come from the analytic
surrogate, so the information matrix has the Gaussian-model Gram form

    F_ab = 2 gamma sum_m Re{ (dh_m/da)^H S^H S (dh_m/db) }.

The pre-expectation Hessian of the log-likelihood (which retains the
data-dependent residual term and needs second channel derivatives) is kept
as a cross-validation path.
"""

import numpy as np

from hmimo.geometry import SurfaceGeometry, rx_centers, tx_offsets
from hmimo.green import WaveConfig
from hmimo.surrogate import (HybridNet, channel_first_derivs,
                             channel_second_derivs, hybrid_channel)

__all__ = [
    "SingularInformationError",
    "fim",
    "crlb_position",
    "crlb_position_normalized",
    "log_likelihood",
    "score",
    "hessian",
]


class SingularInformationError(ValueError):
    """The position is not identifiable: the information matrix is singular."""


def _check_net(net: HybridNet) -> None:
    ok = (np.all(np.isfinite(net.w1)) and np.all(np.isfinite(net.w2))
          and np.any(net.w2 != 0.0))
    if not ok:
        raise ValueError("surrogate network is untrained or has invalid weights")


def _relative_grid(geom: SurfaceGeometry, p1):
    """Relative tx-patch-to-rx-patch coordinates, flattened to (N*M, 3)."""
    offs = tx_offsets(geom)
    n = offs.shape[0]
    pos = np.asarray(p1, dtype=float)[None, :] + np.concatenate(
        [offs, np.zeros((n, 1))], axis=1)
    rxc = rx_centers(geom)
    m = rxc.shape[0]
    rel = pos[:, None, :] - np.concatenate(
        [rxc[:, :2], np.zeros((m, 1))], axis=1)[None, :, :]
    return rel.reshape(-1, 3), n, m


def _stack(a, n, m):
    """(N, M, 6, ...) edge layout -> (6N, M, ...) stacked layout."""
    return np.moveaxis(a.reshape(n, m, 6, -1), 2, 0).reshape(6 * n, m, -1)


def _channel_and_jacobian(net, geom, p1, wave):
    """Channel (6N, M) and its position Jacobian (6N, M, 3)."""
    rel, n, m = _relative_grid(geom, p1)
    h, dh = channel_first_derivs(net, rel, wave)
    return (_stack(h.reshape(n, m, 6, 1), n, m)[..., 0],
            _stack(dh.reshape(n, m, 6, 3), n, m))


def fim(p1, net: HybridNet, geom: SurfaceGeometry, s: np.ndarray,
        gamma: float, wave: WaveConfig = None) -> np.ndarray:
    """Fisher information matrix (3, 3) of the position at precision gamma."""
    _check_net(net)
    wave = wave or WaveConfig(net.frequency)
    _, dh = _channel_and_jacobian(net, geom, p1, wave)
    gram = s.conj().T @ s
    # F_ab = 2 gamma sum_m Re{ dh[:,m,a]^H (S^H S) dh[:,m,b] }
    f = 2.0 * gamma * np.einsum("kma,kl,lmb->ab", dh.conj(), gram, dh).real
    return 0.5 * (f + f.T)


def crlb_position(fi: np.ndarray) -> float:
    """Trace of the inverse information matrix (mean-square position bound)."""
    fi = np.asarray(fi, dtype=float)
    cond = np.linalg.cond(fi)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularInformationError(
            f"information matrix is singular (cond={cond:.3g})")
    return float(np.trace(np.linalg.inv(fi)))


def crlb_position_normalized(fi: np.ndarray, p1) -> float:
    """Position bound normalized by ||p1||^2, comparable with position NMSE."""
    return crlb_position(fi) / float(np.sum(np.asarray(p1, dtype=float) ** 2))


# --- validation path: likelihood, score and pre-expectation Hessian -------


def log_likelihood(p1, y, s, net, geom, gamma, wave=None) -> float:
    """Gaussian log-likelihood of Y = S H(p) + W up to an additive constant."""
    wave = wave or WaveConfig(net.frequency)
    rel, n, m = _relative_grid(geom, p1)
    h = _stack(hybrid_channel(net, rel, wave).reshape(n, m, 6, 1), n, m)[..., 0]
    return float(-gamma * np.linalg.norm(y - s @ h) ** 2)


def score(p1, y, s, net, geom, gamma, wave=None) -> np.ndarray:
    """Gradient (3,) of the log-likelihood at p1."""
    wave = wave or WaveConfig(net.frequency)
    h, dh = _channel_and_jacobian(net, geom, p1, wave)
    resid = y - s @ h
    return 2.0 * gamma * np.einsum("kma,kl,lm->a", dh.conj(), s.conj().T,
                                   resid).real


def hessian(p1, y, s, net, geom, gamma, wave=None) -> np.ndarray:
    """Pre-expectation Hessian (3, 3) of the log-likelihood at p1.

    Retains the data-dependent term through the second channel
    derivatives; its expectation over Y equals -fim(p1, ...).
    """
    wave = wave or WaveConfig(net.frequency)
    rel, n, m = _relative_grid(geom, p1)
    h12, dh12, d2h12 = channel_second_derivs(net, rel, wave)
    h = _stack(h12.reshape(n, m, 6, 1), n, m)[..., 0]
    dh = _stack(dh12.reshape(n, m, 6, 3), n, m)
    d2h = _stack(d2h12.reshape(n, m, 6, 9), n, m).reshape(6 * n, m, 3, 3)
    resid = y - s @ h
    sd = np.einsum("kl,lma->kma", s, dh)
    gram_term = -2.0 * gamma * np.einsum("kma,kmb->ab", sd.conj(), sd).real
    data_term = 2.0 * gamma * np.einsum(
        "kmab,kl,lm->ab", d2h.conj(), s.conj().T, resid).real
    out = gram_term + data_term
    return 0.5 * (out + out.T)
