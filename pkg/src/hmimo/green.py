"""Exact near-field channel oracle built on the dyadic Green's function.

The per-patch-pair channel is a 3x3 complex block obtained by integrating
the dyadic Green's function over both patch areas (4-D tensor-product
Gauss-Legendre quadrature), scaled by the i*omega*mu prefactor.  A
closed-form sinc approximation of the same block is provided as a
baseline, together with a field-dump helper for channel-surface plots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hmimo.geometry import SurfaceGeometry, relative_coords, relative_grid

C0 = 299792458.0          # vacuum speed of light, m/s
MU0 = 4e-7 * np.pi        # vacuum permeability, H/m

# Stacking order of the six independent polarization components and their
# positions inside a symmetric 3x3 block.
POLARIZATIONS = ("xx", "yy", "zz", "xy", "xz", "yz")
_POL_IDX = {"xx": (0, 0), "yy": (1, 1), "zz": (2, 2),
            "xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}


class SingularityError(ValueError):
    """Raised when a Green's function is evaluated at zero separation."""


@dataclass(frozen=True)
class WaveConfig:
    """Carrier frequency and derived wave quantities."""

    frequency: float

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError("frequency must be positive")

    @property
    def wavelength(self) -> float:
        return C0 / self.frequency

    @property
    def wavenumber(self) -> float:
        return 2.0 * np.pi / self.wavelength

    @property
    def prefactor(self) -> complex:
        """i * omega * mu0 with omega = 2*pi*f."""
        return 1j * 2.0 * np.pi * self.frequency * MU0


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre nodes/weights on [-1/2, 1/2], one axis."""

    order: int
    nodes: np.ndarray = field(repr=False, default=None)
    weights: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.order < 2:
            raise ValueError("quadrature order must be >= 2")
        x, w = np.polynomial.legendre.leggauss(self.order)
        object.__setattr__(self, "nodes", 0.5 * x)
        object.__setattr__(self, "weights", 0.5 * w)  # sum to 1 on the unit interval


def scalar_green(rt, rr, wave: WaveConfig):
    """exp(i k0 r) / (4 pi r) between source rt and observation rr."""
    d = np.asarray(rt, dtype=float) - np.asarray(rr, dtype=float)
    r = np.linalg.norm(d, axis=-1)
    if np.any(r == 0.0):
        raise SingularityError("scalar Green's function evaluated at zero distance")
    return np.exp(1j * wave.wavenumber * r) / (4.0 * np.pi * r)


def _dyadic_from_displacement(d: np.ndarray, k0: float) -> np.ndarray:
    """Dyadic Green's function for displacement vectors d, shape (..., 3) -> (..., 3, 3).

    Excludes the i*omega*mu prefactor (applied at patch level).
    """
    r = np.asarray(np.linalg.norm(d, axis=-1))
    if np.any(r == 0.0):
        raise SingularityError("dyadic Green's function evaluated at zero distance")
    kr = k0 * r
    c1 = np.asarray(1.0 + 1j / kr - 1.0 / kr**2)
    c2 = np.asarray(3.0 / kr**2 - 3j / kr - 1.0)
    g = np.asarray(np.exp(1j * kr) / (4.0 * np.pi * r))
    rhat = d / r[..., None]
    outer = rhat[..., :, None] * rhat[..., None, :]
    eye = np.eye(3)
    return g[..., None, None] * (c1[..., None, None] * eye + c2[..., None, None] * outer)


def dyadic_green(rt, rr, wave: WaveConfig) -> np.ndarray:
    """3x3 dyadic Green's function between rt and rr (no i*omega*mu prefactor)."""
    d = np.asarray(rt, dtype=float) - np.asarray(rr, dtype=float)
    return _dyadic_from_displacement(d, wave.wavenumber)


def _quad_offsets(geom: SurfaceGeometry, quad: QuadratureRule):
    """4-D tensor-product nodes over (tx patch) x (rx patch) offsets.

    Returns displacement offsets (Q, 3) to add to the relative patch-center
    vector, and the combined weights (Q,) carrying the full area measure.
    """
    q = quad.order
    xt = quad.nodes * geom.tx_dx
    yt = quad.nodes * geom.tx_dy
    xr = quad.nodes * geom.rx_dx
    yr = quad.nodes * geom.rx_dy
    wxt = quad.weights * geom.tx_dx
    wyt = quad.weights * geom.tx_dy
    wxr = quad.weights * geom.rx_dx
    wyr = quad.weights * geom.rx_dy
    gx_t, gy_t, gx_r, gy_r = np.meshgrid(xt, yt, xr, yr, indexing="ij")
    offs = np.stack([(gx_t - gx_r).ravel(), (gy_t - gy_r).ravel(),
                     np.zeros(q**4)], axis=-1)
    w = (wxt[:, None, None, None] * wyt[None, :, None, None]
         * wxr[None, None, :, None] * wyr[None, None, None, :]).ravel()
    return offs, w


def patch_channel_batch(rel: np.ndarray, geom: SurfaceGeometry, wave: WaveConfig,
                        quad: QuadratureRule, chunk: int = 4096) -> np.ndarray:
    """Quadrature channel blocks for a batch of relative center coordinates.

    ``rel`` has shape (K, 3); returns (K, 3, 3) complex blocks including
    the i*omega*mu prefactor.  Evaluation is chunked to bound memory.
    """
    rel = np.atleast_2d(np.asarray(rel, dtype=float))
    offs, w = _quad_offsets(geom, quad)
    k0 = wave.wavenumber
    out = np.empty((rel.shape[0], 3, 3), dtype=complex)
    step = max(1, chunk // offs.shape[0] + 1)
    for i in range(0, rel.shape[0], step):
        d = rel[i:i + step, None, :] + offs[None, :, :]       # (b, Q, 3)
        blocks = _dyadic_from_displacement(d, k0)             # (b, Q, 3, 3)
        out[i:i + step] = np.einsum("q,bqij->bij", w, blocks)
    return wave.prefactor * out


def patch_channel(m: int, n: int, geom: SurfaceGeometry, p1, wave: WaveConfig,
                  quad: QuadratureRule) -> np.ndarray:
    """3x3 channel block between rx patch m and tx patch n by quadrature."""
    rel = np.array(relative_coords(m, n, geom, p1))
    return patch_channel_batch(rel[None, :], geom, wave, quad)[0]


def approx_channel_batch(rel: np.ndarray, geom: SurfaceGeometry, wave: WaveConfig) -> np.ndarray:
    """Closed-form sinc-approximation blocks for relative coordinates (K, 3)."""
    rel = np.atleast_2d(np.asarray(rel, dtype=float))
    k0 = wave.wavenumber
    r = np.linalg.norm(rel, axis=-1)
    area_t = geom.tx_dx * geom.tx_dy
    area_r = geom.rx_dx * geom.rx_dy
    # unnormalized sinc(u) = sin(u)/u; np.sinc is sin(pi u)/(pi u)
    sx = np.sinc(k0 * (-rel[:, 0]) * geom.tx_dx / (2.0 * r) / np.pi)
    sy = np.sinc(k0 * (-rel[:, 1]) * geom.tx_dy / (2.0 * r) / np.pi)
    g = np.exp(1j * k0 * r) / (4.0 * np.pi * r)
    kr = k0 * r
    c1 = 1.0 + 1j / kr - 1.0 / kr**2
    c2 = 3.0 / kr**2 - 3j / kr - 1.0
    rhat = rel / r[:, None]
    outer = rhat[:, :, None] * rhat[:, None, :]
    cmn = c1[:, None, None] * np.eye(3) + c2[:, None, None] * outer
    scale = wave.prefactor * area_t * area_r * g * sx * sy
    return scale[:, None, None] * cmn


def approx_channel(m: int, n: int, geom: SurfaceGeometry, p1, wave: WaveConfig) -> np.ndarray:
    """Closed-form 3x3 channel block between rx patch m and tx patch n."""
    rel = np.array(relative_coords(m, n, geom, p1))
    return approx_channel_batch(rel[None, :], geom, wave)[0]


def blocks_to_components(blocks: np.ndarray) -> np.ndarray:
    """Extract the six independent entries of symmetric blocks (..., 3, 3) -> (..., 6)."""
    comps = [blocks[..., i, j] for i, j in (_POL_IDX[k] for k in POLARIZATIONS)]
    return np.stack(comps, axis=-1)


@dataclass(frozen=True)
class ChannelTensor:
    """Six N x M polarized channel matrices and their 6N x M stacked form."""

    components: dict  # polarization -> (N, M) complex array

    def __post_init__(self):
        shapes = {v.shape for v in self.components.values()}
        if set(self.components) != set(POLARIZATIONS) or len(shapes) != 1:
            raise ValueError("components must hold all six polarizations with equal shapes")

    @property
    def n_patches(self) -> int:
        return self.components["xx"].shape[0]

    @property
    def m_patches(self) -> int:
        return self.components["xx"].shape[1]

    @property
    def stacked(self) -> np.ndarray:
        """H in C^{6N x M}, stacked [xx; yy; zz; xy; xz; yz]."""
        return np.concatenate([self.components[k] for k in POLARIZATIONS], axis=0)

    @classmethod
    def from_stacked(cls, h: np.ndarray) -> "ChannelTensor":
        n = h.shape[0] // 6
        if h.shape[0] != 6 * n:
            raise ValueError("stacked channel must have 6N rows")
        comps = {k: h[i * n:(i + 1) * n] for i, k in enumerate(POLARIZATIONS)}
        return cls(comps)

    def block(self, m: int, n: int) -> np.ndarray:
        """Reassemble the symmetric 3x3 block of pair (m, n), 1-based."""
        out = np.zeros((3, 3), dtype=complex)
        for k in POLARIZATIONS:
            i, j = _POL_IDX[k]
            out[i, j] = out[j, i] = self.components[k][n - 1, m - 1]
        return out


def _channel_tensor_from_rel(rel_nm: np.ndarray, comps_flat: np.ndarray) -> ChannelTensor:
    n_, m_ = rel_nm.shape[:2]
    comps = comps_flat.reshape(n_, m_, 6)
    return ChannelTensor({k: np.ascontiguousarray(comps[:, :, i])
                          for i, k in enumerate(POLARIZATIONS)})


def full_channel(geom: SurfaceGeometry, p1, wave: WaveConfig,
                 quad: QuadratureRule) -> ChannelTensor:
    """Quadrature channel for all patch pairs, cached over relative offsets.

    Two pairs sharing a relative coordinate triple reuse one quadrature
    (translation invariance of the integrand).
    """
    rel = relative_grid(geom, p1)                    # (N, M, 3)
    flat = rel.reshape(-1, 3)
    # collapse duplicate relative offsets (keyed on rounded coordinates)
    keys = np.round(flat / 1e-12).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    uniq_rel = uniq.astype(float) * 1e-12
    blocks = patch_channel_batch(uniq_rel, geom, wave, quad)
    comps = blocks_to_components(blocks)[inverse]    # (N*M, 6)
    return _channel_tensor_from_rel(rel, comps)


def full_channel_approx(geom: SurfaceGeometry, p1, wave: WaveConfig) -> ChannelTensor:
    """Closed-form approximate channel for all patch pairs."""
    rel = relative_grid(geom, p1)
    comps = blocks_to_components(approx_channel_batch(rel.reshape(-1, 3), geom, wave))
    return _channel_tensor_from_rel(rel, comps)


def field_dump(geom: SurfaceGeometry, wave: WaveConfig, quad: QuadratureRule,
               fixed_axis: str, fixed_value: float,
               sweep1: tuple, sweep2: tuple, resolution: tuple) -> np.ndarray:
    """Grid of the (1,1) xx channel component over a plane of p1 positions.

    ``fixed_axis`` in {"x","y","z"} pins one coordinate of the first transmit
    patch; the remaining two sweep linearly over ``sweep1``/``sweep2`` with
    ``resolution = (n1, n2)`` points.  Returns a structured record per grid
    point with the raw value and the value de-rotated by exp(i k0 r).
    """
    axes = [a for a in "xyz" if a != fixed_axis]
    if len(axes) != 2:
        raise ValueError(f"fixed_axis must be one of x, y, z, got {fixed_axis!r}")
    n1, n2 = resolution
    v1 = np.linspace(sweep1[0], sweep1[1], n1)
    v2 = np.linspace(sweep2[0], sweep2[1], n2)
    g1, g2 = np.meshgrid(v1, v2, indexing="ij")
    coords = {fixed_axis: np.full(n1 * n2, float(fixed_value)),
              axes[0]: g1.ravel(), axes[1]: g2.ravel()}
    rel = np.stack([coords["x"], coords["y"], coords["z"]], axis=-1)
    blocks = patch_channel_batch(rel, geom, wave, quad)
    raw = blocks[:, 0, 0]
    r = np.linalg.norm(rel, axis=-1)
    derot = raw * np.exp(-1j * wave.wavenumber * r)
    out = np.empty(n1 * n2, dtype=[("x", float), ("y", float), ("z", float),
                                   ("re_raw", float), ("im_raw", float),
                                   ("re_derot", float), ("im_derot", float)])
    out["x"], out["y"], out["z"] = rel[:, 0], rel[:, 1], rel[:, 2]
    out["re_raw"], out["im_raw"] = raw.real, raw.imag
    out["re_derot"], out["im_derot"] = derot.real, derot.imag
    return out.reshape(n1, n2)


def write_field_dump_csv(path, dump: np.ndarray) -> None:
    """Write a field dump grid as CSV with >= 15 significant digits."""
    flat = dump.ravel()
    with open(path, "w") as fh:
        fh.write("x,y,z,re_raw,im_raw,re_derot,im_derot\n")
        for row in flat:
            fh.write(",".join(f"{row[name]:.17g}" for name in row.dtype.names) + "\n")
