"""Single-hidden-layer surrogate of the de-rotated patch channel.

The network maps a relative coordinate triple (x, y, z) to the twelve
real numbers (Re, Im) of the six de-rotated polarization components.
Multiplying by exp(i k0 r) recovers the channel itself, and analytic
first/second derivatives of that product are available for the
linearized message passing and for Fisher-information computations.

Slot layout of the 12 outputs: slots 0..5 are the real parts in the
order (xx, yy, zz, xy, xz, yz); slots 6..11 the matching imaginary
parts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from hmimo.geometry import SurfaceGeometry, rx_centers
from hmimo.green import (POLARIZATIONS, QuadratureRule, WaveConfig,
                         approx_channel_batch, blocks_to_components,
                         patch_channel_batch)

WEIGHTS_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when training diverges (non-finite loss)."""


@dataclass
class HybridNet:
    """Weights, biases and normalization maps of the surrogate network."""

    w1: np.ndarray            # (Nh, 3)
    b1: np.ndarray            # (Nh,)
    w2: np.ndarray            # (Nh, 12)
    b2: np.ndarray            # (12,)
    input_offset: np.ndarray  # (3,)
    input_scale: np.ndarray   # (3,)
    output_offset: np.ndarray # (12,)
    output_scale: np.ndarray  # (12,)
    frequency: float          # carrier the net was trained for, Hz

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.w2 = np.asarray(self.w2, dtype=float)
        self.b2 = np.asarray(self.b2, dtype=float)
        self.input_offset = np.asarray(self.input_offset, dtype=float)
        self.input_scale = np.asarray(self.input_scale, dtype=float)
        self.output_offset = np.asarray(self.output_offset, dtype=float)
        self.output_scale = np.asarray(self.output_scale, dtype=float)
        nh = self.w1.shape[0]
        if self.w1.shape != (nh, 3) or self.b1.shape != (nh,) \
                or self.w2.shape != (nh, 12) or self.b2.shape != (12,):
            raise ValueError("inconsistent weight shapes")
        for a in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite weights")

    @property
    def hidden_count(self) -> int:
        return self.w1.shape[0]

    # --- forward -----------------------------------------------------

    def _hidden(self, xyz: np.ndarray) -> np.ndarray:
        xn = (np.atleast_2d(xyz) - self.input_offset) / self.input_scale
        return np.tanh(xn @ self.w1.T + self.b1)

    def forward(self, xyz: np.ndarray) -> np.ndarray:
        """Raw-unit 12-vector outputs for inputs of shape (K, 3) or (3,)."""
        a = self._hidden(xyz)
        yn = a @ self.w2 + self.b2
        out = yn * self.output_scale + self.output_offset
        return out if np.asarray(xyz).ndim > 1 else out[0]

    def phi(self, xyz: np.ndarray) -> np.ndarray:
        """De-rotated channel components as complex (K, 6)."""
        y = np.atleast_2d(self.forward(xyz))
        return y[:, :6] + 1j * y[:, 6:]

    # --- serialization -----------------------------------------------

    def save(self, path) -> None:
        doc = {
            "version": WEIGHTS_FORMAT_VERSION,
            "hidden_count": self.hidden_count,
            "w1": self.w1.ravel().tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.ravel().tolist(),
            "b2": self.b2.tolist(),
            "input_scale": self.input_scale.tolist(),
            "input_offset": self.input_offset.tolist(),
            "output_scale": self.output_scale.tolist(),
            "output_offset": self.output_offset.tolist(),
            "wave": {"frequency_hz": self.frequency},
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> "HybridNet":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("version") != WEIGHTS_FORMAT_VERSION:
            raise ValueError(f"unsupported weights file version {doc.get('version')!r}")
        nh = doc["hidden_count"]
        return cls(
            w1=np.array(doc["w1"]).reshape(nh, 3),
            b1=np.array(doc["b1"]),
            w2=np.array(doc["w2"]).reshape(nh, 12),
            b2=np.array(doc["b2"]),
            input_offset=np.array(doc["input_offset"]),
            input_scale=np.array(doc["input_scale"]),
            output_offset=np.array(doc["output_offset"]),
            output_scale=np.array(doc["output_scale"]),
            frequency=doc["wave"]["frequency_hz"],
        )


# --- channel map and derivatives --------------------------------------


def hybrid_channel(net: HybridNet, xyz: np.ndarray, wave: WaveConfig) -> np.ndarray:
    """Channel components h^kappa = phi * exp(i k0 r) as complex (K, 6)."""
    xyz = np.atleast_2d(xyz)
    r = np.linalg.norm(xyz, axis=-1)
    return net.phi(xyz) * np.exp(1j * wave.wavenumber * r)[:, None]


def phi_shifted(net: HybridNet, m: int, geom: SurfaceGeometry, xyz_tx: np.ndarray) -> np.ndarray:
    """Network output at transmit-patch coordinates, shifted by rx patch m."""
    rxc = rx_centers(geom)[m - 1]
    xyz_tx = np.atleast_2d(xyz_tx)
    rel = xyz_tx - np.array([rxc[0], rxc[1], 0.0])
    return net.forward(rel)


def _output_jacobians(net: HybridNet, xyz: np.ndarray, second: bool = False):
    """Raw-unit first (and optionally second) derivatives of all 12 outputs.

    Returns (out, d_out, d2_out) with shapes (K,12), (K,12,3), (K,12,3,3);
    d2_out is None unless requested.
    """
    xyz = np.atleast_2d(xyz)
    a = net._hidden(xyz)                       # (K, Nh)
    yn = a @ net.w2 + net.b2
    out = yn * net.output_scale + net.output_offset
    gp = 1.0 - a**2                            # tanh'
    w1s = net.w1 / net.input_scale[None, :]    # chain rule through input map
    dyn = np.einsum("ik,bi,ij->bkj", net.w2, gp, w1s)
    dout = dyn * net.output_scale[None, :, None]
    d2out = None
    if second:
        gpp = -2.0 * a * gp                    # tanh''
        d2yn = np.einsum("ik,bi,ij,il->bkjl", net.w2, gpp, w1s, w1s)
        d2out = d2yn * net.output_scale[None, :, None, None]
    return out, dout, d2out


def channel_first_derivs(net: HybridNet, xyz: np.ndarray, wave: WaveConfig):
    """Channel values and first partials w.r.t. the relative coordinates.

    Returns (h, dh) with shapes (K, 6) and (K, 6, 3) complex.  Because the
    channel depends on transmit-patch coordinates only through the relative
    coordinates, these equal the partials w.r.t. the transmit position.
    """
    xyz = np.atleast_2d(xyz)
    out, dout, _ = _output_jacobians(net, xyz)
    phi = out[:, :6] + 1j * out[:, 6:]
    dphi = dout[:, :6, :] + 1j * dout[:, 6:, :]
    r = np.linalg.norm(xyz, axis=-1)
    rhat = xyz / r[:, None]
    k0 = wave.wavenumber
    rot = np.exp(1j * k0 * r)
    dh = (dphi + 1j * k0 * phi[:, :, None] * rhat[:, None, :]) * rot[:, None, None]
    return phi * rot[:, None], dh


def channel_second_derivs(net: HybridNet, xyz: np.ndarray, wave: WaveConfig):
    """Channel values plus first and mixed second partials.

    Returns (h, dh, d2h) with shapes (K,6), (K,6,3), (K,6,3,3) complex.
    """
    xyz = np.atleast_2d(xyz)
    out, dout, d2out = _output_jacobians(net, xyz, second=True)
    phi = out[:, :6] + 1j * out[:, 6:]
    dphi = dout[:, :6, :] + 1j * dout[:, 6:, :]
    d2phi = d2out[:, :6, :, :] + 1j * d2out[:, 6:, :, :]
    r = np.linalg.norm(xyz, axis=-1)
    rhat = xyz / r[:, None]
    k0 = wave.wavenumber
    rot = np.exp(1j * k0 * r)
    dr = rhat                                              # (K, 3)
    d2r = (np.eye(3)[None] - rhat[:, :, None] * rhat[:, None, :]) / r[:, None, None]
    dh = (dphi + 1j * k0 * phi[:, :, None] * dr[:, None, :]) * rot[:, None, None]
    cross = dphi[:, :, :, None] * dr[:, None, None, :] + dphi[:, :, None, :] * dr[:, None, :, None]
    d2h = (d2phi
           + 1j * k0 * (cross
                        + phi[:, :, None, None] * d2r[:, None, :, :])
           - k0**2 * phi[:, :, None, None] * dr[:, None, :, None] * dr[:, None, None, :]
           ) * rot[:, None, None, None]
    return phi * rot[:, None], dh, d2h


# --- training ----------------------------------------------------------


@dataclass(frozen=True)
class CoordinateBox:
    """Axis-aligned box of relative coordinates covered by the surrogate."""

    x: tuple
    y: tuple
    z: tuple

    def __post_init__(self):
        for name in ("x", "y", "z"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"empty {name} range [{lo}, {hi}]")

    @classmethod
    def from_prior(cls, geom: SurfaceGeometry, x1, y1, z1) -> "CoordinateBox":
        """Box reachable by any patch pair when p1 is drawn from the given prior."""
        rx_span_x = (geom.rx_cols - 1) * geom.rx_dx
        rx_span_y = (geom.rx_rows - 1) * geom.rx_dy
        tx_span_x = (geom.tx_cols - 1) * geom.tx_dx
        tx_span_y = (geom.tx_rows - 1) * geom.tx_dy
        return cls(x=(x1[0] - rx_span_x, x1[1] + tx_span_x),
                   y=(y1[0] - rx_span_y, y1[1] + tx_span_y),
                   z=(z1[0], z1[1]))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        lo = np.array([self.x[0], self.y[0], self.z[0]])
        hi = np.array([self.x[1], self.y[1], self.z[1]])
        return lo + (hi - lo) * rng.random((count, 3))

    def grid(self, n_per_axis: int) -> np.ndarray:
        ax = [np.linspace(lo, hi, n_per_axis) for lo, hi in (self.x, self.y, self.z)]
        g = np.meshgrid(*ax, indexing="ij")
        return np.stack([v.ravel() for v in g], axis=-1)


def derotated_targets(rel: np.ndarray, comps: np.ndarray, wave: WaveConfig) -> np.ndarray:
    """Stack de-rotated components into the 12-slot real target layout."""
    r = np.linalg.norm(rel, axis=-1)
    ht = comps * np.exp(-1j * wave.wavenumber * r)[:, None]
    return np.concatenate([ht.real, ht.imag], axis=-1)


def generate_training_set(box: CoordinateBox, geom: SurfaceGeometry, wave: WaveConfig,
                          quad: QuadratureRule, count: int, seed: int,
                          channel: str = "quadrature"):
    """Uniform samples over the coordinate box with de-rotated channel targets.

    ``channel`` selects the target oracle: "quadrature" (exact) or "approx"
    (closed-form sinc model).  Returns (inputs, targets) of shapes
    (count, 3) and (count, 12).
    """
    rng = np.random.default_rng(seed)
    rel = box.sample(rng, count)
    if channel == "quadrature":
        blocks = patch_channel_batch(rel, geom, wave, quad, chunk=1 << 22)
    elif channel == "approx":
        blocks = approx_channel_batch(rel, geom, wave)
    else:
        raise ValueError(f"unknown channel oracle {channel!r}")
    comps = blocks_to_components(blocks)
    return rel, derotated_targets(rel, comps, wave)


@dataclass
class TrainConfig:
    """Hyper-parameters of the surrogate fit."""

    hidden_count: int = 50
    epochs: int = 300
    batch_size: int = 2048
    lr: float = 5e-3
    lr_final: float = 1e-4
    val_fraction: float = 0.1
    seed: int = 0
    ls_refit_every: int = 20   # exact output-layer refit cadence (epochs); 0 disables
    patience: int = 0          # early stop after this many non-improving epochs; 0 disables


def nmse_db(pred12: np.ndarray, target12: np.ndarray) -> float:
    """NMSE (dB) between 12-slot real stacks, equal to the complex channel NMSE."""
    err = np.sum((pred12 - target12) ** 2)
    ref = np.sum(target12 ** 2)
    with np.errstate(divide="ignore"):
        return float(10.0 * np.log10(err / ref))


def _ls_output_layer(a: np.ndarray, tn: np.ndarray):
    """Exact least-squares solve of the (linear) output layer."""
    design = np.concatenate([a, np.ones((a.shape[0], 1))], axis=1)
    sol, *_ = np.linalg.lstsq(design, tn, rcond=None)
    return sol[:-1], sol[-1]


def train(inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
          frequency: float):
    """Fit a HybridNet by adaptive-step mini-batch gradient descent.

    The output layer is periodically re-solved exactly (it is linear in the
    weights) which greatly accelerates convergence.  Returns (net, report);
    the report carries the held-out validation NMSE in dB.
    """
    n_min = 10 * (4 * cfg.hidden_count + 12 * (cfg.hidden_count + 1))
    if inputs.shape[0] < n_min:
        raise ValueError(f"need at least {n_min} samples for hidden_count={cfg.hidden_count}")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(inputs.shape[0])
    n_val = int(round(cfg.val_fraction * inputs.shape[0]))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]

    in_lo, in_hi = inputs.min(axis=0), inputs.max(axis=0)
    in_off = 0.5 * (in_lo + in_hi)
    in_scale = 0.5 * (in_hi - in_lo)
    out_off = targets[tr_idx].mean(axis=0)
    out_scale = targets[tr_idx].std(axis=0)
    out_scale[out_scale == 0] = 1.0

    xn = (inputs - in_off) / in_scale
    tn = (targets - out_off) / out_scale
    x_tr, t_tr = xn[tr_idx], tn[tr_idx]
    x_val, t_val = xn[val_idx], tn[val_idx]

    nh = cfg.hidden_count
    w1 = rng.normal(scale=1.0, size=(nh, 3))
    b1 = rng.uniform(-1.0, 1.0, size=nh)
    a0 = np.tanh(x_tr @ w1.T + b1)
    w2, b2 = _ls_output_layer(a0, t_tr)

    params = [w1, b1, w2, b2]
    m_acc = [np.zeros_like(p) for p in params]
    v_acc = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    n_tr = x_tr.shape[0]
    steps_per_epoch = max(1, n_tr // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    loss_curve = []
    best = (np.inf, None)
    stale = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(n_tr)
        for k in range(steps_per_epoch):
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            xb, tb = x_tr[idx], t_tr[idx]
            a = np.tanh(xb @ w1.T + b1)
            pred = a @ w2 + b2
            err = pred - tb                                   # (B, 12)
            g_w2 = a.T @ err / len(idx)
            g_b2 = err.mean(axis=0)
            back = (err @ w2.T) * (1.0 - a**2)                # (B, Nh)
            g_w1 = back.T @ xb / len(idx)
            g_b1 = back.mean(axis=0)
            grads = [g_w1, g_b1, g_w2, g_b2]
            step += 1
            # cosine-decayed learning rate
            frac = step / total_steps
            lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + np.cos(np.pi * frac))
            for p, g, m, v in zip(params, grads, m_acc, v_acc):
                m *= beta1
                m += (1 - beta1) * g
                v *= beta2
                v += (1 - beta2) * g**2
                mh = m / (1 - beta1**step)
                vh = v / (1 - beta2**step)
                p -= lr * mh / (np.sqrt(vh) + eps)
        if cfg.ls_refit_every and (epoch + 1) % cfg.ls_refit_every == 0:
            a_full = np.tanh(x_tr @ w1.T + b1)
            w2_new, b2_new = _ls_output_layer(a_full, t_tr)
            w2[...], b2[...] = w2_new, b2_new
        val_pred = np.tanh(x_val @ w1.T + b1) @ w2 + b2
        val_loss = float(np.mean((val_pred - t_val) ** 2))
        if not np.isfinite(val_loss):
            raise TrainingError(f"training diverged at epoch {epoch}: loss={val_loss}")
        loss_curve.append(val_loss)
        if val_loss < best[0] - 1e-12 * abs(best[0]):
            best = (val_loss, [p.copy() for p in params])
            stale = 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break

    if best[1] is not None:
        w1, b1, w2, b2 = best[1]
    a_full = np.tanh(x_tr @ w1.T + b1)
    w2, b2 = _ls_output_layer(a_full, t_tr)

    net = HybridNet(w1=w1, b1=b1, w2=w2, b2=b2,
                    input_offset=in_off, input_scale=in_scale,
                    output_offset=out_off, output_scale=out_scale,
                    frequency=frequency)
    val_pred_raw = net.forward(inputs[val_idx])
    report = {
        "epochs_run": len(loss_curve),
        "val_nmse_db": nmse_db(val_pred_raw, targets[val_idx]),
        "val_loss_curve": loss_curve,
        "train_count": int(n_tr),
        "val_count": int(n_val),
    }
    return net, report
