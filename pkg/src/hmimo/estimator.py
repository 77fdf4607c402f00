"""Message-passing estimators for parametric near-field channel estimation.

The estimators treat the user surface location p1 = (x1, y1, z1) as the
unknown of interest.  A unitary-transformed AMP recursion produces
per-entry extrinsic Gaussians for the stacked channel; every channel
entry is then tied to the location through the trained surrogate, which
is linearized by a first-order Taylor expansion around the current
location belief so that all messages stay Gaussian.  The final channel
estimate is reconstructed from the surrogate at the location estimate.

Two receiver flavors are provided: a full-digital receiver observing all
M antenna patches, and a hybrid receiver observing P < M analog-combined
outputs, handled by cascading the AMP stage with an exact per-column
Gaussian conditioning step through the combining matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from hmimo.geometry import SurfaceGeometry, rx_centers, tx_offsets
from hmimo.green import WaveConfig
from hmimo.signals import UnitaryModel, combine_channel
from hmimo.surrogate import HybridNet, channel_first_derivs, hybrid_channel

VAR_MIN = 1e-12
VAR_MAX = 1e12


class NumericalFailure(RuntimeError):
    """Estimator produced non-finite values; carries the iteration trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class EstimatorConfig:
    """Knobs of the message-passing estimators."""

    max_iters: int = 50
    tol: float = 1e-6          # location-change stopping threshold, meters
    damping: float = 0.7       # exponential damping on beliefs, 1 = undamped
    grid_points: int = 9       # per-axis resolution of the location init search
    prior_x: tuple = (-1.0, 1.0)
    prior_y: tuple = (-1.0, 1.0)
    prior_z: tuple = (20.0, 40.0)
    init_position: tuple = None  # overrides the grid search when set


@dataclass
class EstimateResult:
    """Outputs of one estimator run."""

    h_hat: np.ndarray          # (6N, M) parametric channel reconstruction
    position: np.ndarray       # (3,) location estimate
    position_var: np.ndarray   # (3,) belief variances
    gamma_hat: float           # estimated noise precision, raw units
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def clamp_var(v):
    """Confine variances to the working range [1e-12, 1e12]."""
    return np.clip(v, VAR_MIN, VAR_MAX)


def gaussian_product(means, variances, axis=None):
    """Precision-weighted product of Gaussians along the given axis."""
    prec = 1.0 / variances
    prec_tot = np.sum(prec, axis=axis)
    mean = np.sum(means * prec, axis=axis) / prec_tot
    return mean, clamp_var(1.0 / prec_tot)


def gaussian_divide(mean_b, var_b, mean_m, var_m):
    """Extrinsic division b / m; non-positive precisions map to the cap."""
    prec = 1.0 / var_b - 1.0 / var_m
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(prec > 1.0 / VAR_MAX, 1.0 / np.maximum(prec, 1.0 / VAR_MAX),
                       VAR_MAX)
        mean = np.where(prec > 1.0 / VAR_MAX,
                        var * (mean_b / var_b - mean_m / var_m), mean_b)
    return mean, clamp_var(var)


def ls_estimate(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares channel estimate from pilots and observations."""
    sol, _, rank, _ = np.linalg.lstsq(s, y, rcond=None)
    if rank < s.shape[1]:
        raise np.linalg.LinAlgError("pilot matrix is rank deficient")
    return sol


# --- AMP linear stage ---------------------------------------------------


@dataclass
class UampState:
    """Running state of the unitary-transformed AMP recursion."""

    h_mean: np.ndarray   # (K, M) posterior mean of the mixed matrix
    h_var: np.ndarray    # (K, M)
    s_res: np.ndarray    # (rows, M) scaled residual
    gamma: float         # working-unit noise precision estimate

    @classmethod
    def initial(cls, rows: int, cols: int, width: int) -> "UampState":
        return cls(h_mean=np.zeros((width, cols), dtype=complex),
                   h_var=np.ones((width, cols)),
                   s_res=np.zeros((rows, cols), dtype=complex),
                   gamma=1.0)


def uamp_linear_step(phi: np.ndarray, r: np.ndarray, state: UampState,
                     estimate_gamma: bool = True, gamma_cap: float = None):
    """One pass of the AMP linear stage.

    Returns (q, v_q, new_state) where (q, v_q) are the per-entry extrinsic
    mean/variance toward the prior side.  The matched-filter output Z is
    evaluated as (gamma*V_Z)*R + P/(gamma*V_P + 1), which equals the
    textbook V_Z*(gamma*R + P/V_P) but stays finite on the zero rows that
    a full SVD introduces.  ``gamma_cap`` bounds the refreshed precision
    estimate; callers use it to keep the effective noise level from
    dropping below the model-mismatch floor on (nearly) noiseless data.
    """
    abs_phi2 = np.abs(phi) ** 2
    v_p = abs_phi2 @ state.h_var
    p = phi @ state.h_mean - v_p * state.s_res
    gamma = state.gamma
    if estimate_gamma:
        denom = gamma * v_p + 1.0
        v_z = v_p / denom
        z = (gamma * v_z) * r + p / denom
        gamma = r.size / (np.linalg.norm(r - z) ** 2 + np.sum(v_z))
        if gamma_cap is not None:
            gamma = min(gamma, gamma_cap)
    v_s = 1.0 / (v_p + 1.0 / gamma)
    s_res = v_s * (r - p)
    v_q = clamp_var(1.0 / (abs_phi2.T @ v_s))
    q = state.h_mean + v_q * (phi.conj().T @ s_res)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v_q)) and np.isfinite(gamma)):
        raise NumericalFailure("non-finite AMP linear-stage output")
    return q, v_q, UampState(h_mean=state.h_mean, h_var=state.h_var,
                             s_res=s_res, gamma=gamma)


# --- Taylor linearization and location messages -------------------------


@dataclass
class Linearization:
    """First-order expansion of every channel entry at the location belief.

    Arrays are shaped (N, M, 6) over transmit patch, receive patch and
    polarization; ``dh`` carries the three partials in its last axis.
    """

    h: np.ndarray      # (N, M, 6) channel value at the expansion point
    dh: np.ndarray     # (N, M, 6, 3)
    xi: np.ndarray     # (N, M, 6) affine intercept

    def affine(self, pos):
        """Evaluate the affine model at absolute patch positions (N, 3)."""
        return self.xi + np.einsum("nmkj,nj->nmk", self.dh, np.atleast_2d(pos))


def taylor_linearize(net: HybridNet, geom: SurfaceGeometry, positions: np.ndarray,
                     wave: WaveConfig) -> Linearization:
    """Expand the surrogate channel around per-patch position beliefs.

    ``positions`` holds the absolute coordinates (N, 3) of the transmit
    patches.  The intercept satisfies xi = h - dh . position exactly.
    """
    positions = np.atleast_2d(positions)
    n = positions.shape[0]
    rxc = rx_centers(geom)
    m = rxc.shape[0]
    rel = positions[:, None, :] - np.concatenate(
        [rxc[:, :2], np.zeros((m, 1))], axis=1)[None, :, :]
    h, dh = channel_first_derivs(net, rel.reshape(-1, 3), wave)
    h = h.reshape(n, m, 6)
    dh = dh.reshape(n, m, 6, 3)
    xi = h - np.einsum("nmkj,nj->nmk", dh, positions)
    return Linearization(h=h, dh=dh, xi=xi)


def _stacked_to_edges(a: np.ndarray, n: int) -> np.ndarray:
    """(6N, M) stacked layout -> (N, M, 6) edge layout."""
    return a.reshape(6, n, -1).transpose(1, 2, 0)


def _edges_to_stacked(a: np.ndarray) -> np.ndarray:
    """(N, M, 6) edge layout -> (6N, M) stacked layout."""
    n, m, _ = a.shape
    return a.transpose(2, 0, 1).reshape(6 * n, m)


@dataclass
class LocationState:
    """Beliefs and per-edge backward messages of the three coordinates."""

    mean: np.ndarray        # (3,) belief of p1
    var: np.ndarray         # (3,)
    patch_mean: np.ndarray  # (N, 3) per-patch beliefs
    edge_mean: np.ndarray   # (N, M, 6, 3) backward messages to channel nodes
    edge_var: np.ndarray    # (N, M, 6, 3)


def init_location_state(p0, var0, offsets, n_rx) -> LocationState:
    """Seed beliefs at p0 with per-axis variance var0."""
    p0 = np.asarray(p0, dtype=float)
    var0 = np.asarray(var0, dtype=float)
    n = offsets.shape[0]
    patch = p0[None, :] + np.concatenate([offsets, np.zeros((n, 1))], axis=1)
    edge_mean = np.broadcast_to(patch[:, None, None, :], (n, n_rx, 6, 3)).copy()
    edge_var = np.broadcast_to(var0, (n, n_rx, 6, 3)).copy()
    return LocationState(mean=p0.copy(), var=var0.copy(), patch_mean=patch,
                         edge_mean=edge_mean, edge_var=edge_var)


def location_round(lin: Linearization, q: np.ndarray, v_q: np.ndarray,
                   state: LocationState, offsets: np.ndarray) -> LocationState:
    """One belief-propagation sweep over the three location coordinates.

    For each coordinate in turn, every channel node is solved for that
    coordinate given the backward messages of the other two, the per-node
    pseudo-observations are fused across receive patches and polarizations,
    then across transmit patches (after removing the known patch offsets),
    and extrinsic messages are sent back to the channel nodes.
    """
    n, m, _ = q.shape
    off3 = np.concatenate([offsets, np.zeros((n, 1))], axis=1)  # (N, 3)
    mean = state.mean.copy()
    var = state.var.copy()
    patch_mean = state.patch_mean.copy()
    patch_var = np.empty((n, 3))
    edge_mean = state.edge_mean.copy()
    edge_var = state.edge_var.copy()

    for c in range(3):
        o1, o2 = (c + 1) % 3, (c + 2) % 3
        dh_c = lin.dh[..., c]
        # pseudo-observation of coordinate c at every channel node
        resid = (q - lin.xi
                 - edge_mean[..., o1] * lin.dh[..., o1]
                 - edge_mean[..., o2] * lin.dh[..., o2])
        abs2 = np.abs(dh_c) ** 2
        dead = abs2 < 1e-300
        abs2_safe = np.where(dead, 1.0, abs2)
        with np.errstate(divide="ignore", invalid="ignore"):
            fwd_mean = np.where(dead, 0.0, (resid / np.where(dead, 1.0, dh_c)).real)
            fwd_var = (v_q
                       + edge_var[..., o1] * np.abs(lin.dh[..., o1]) ** 2
                       + edge_var[..., o2] * np.abs(lin.dh[..., o2]) ** 2) / abs2_safe
        fwd_var = clamp_var(np.where(dead, VAR_MAX, fwd_var))
        # fuse over (m, kappa) per transmit patch
        node_mean, node_var = gaussian_product(fwd_mean, fwd_var, axis=(1, 2))
        # shift to the shared first-patch coordinate and fuse over patches
        shifted = node_mean - off3[:, c]
        mean_c, var_c = gaussian_product(shifted, node_var, axis=0)
        mean[c] = mean_c
        var[c] = var_c
        # backward extrinsics toward each patch, then each edge
        back_mean, back_var = gaussian_divide(mean_c, var_c, shifted, node_var)
        back_mean = back_mean + off3[:, c]
        pm, pv = gaussian_product(
            np.stack([node_mean, back_mean]), np.stack([node_var, back_var]), axis=0)
        patch_mean[:, c] = pm
        patch_var[:, c] = pv
        em, ev = gaussian_divide(pm[:, None, None], pv[:, None, None],
                                 fwd_mean, fwd_var)
        edge_mean[..., c] = em
        edge_var[..., c] = ev

    return LocationState(mean=mean, var=var, patch_mean=patch_mean,
                         edge_mean=edge_mean, edge_var=edge_var), patch_var


def channel_belief(lin: Linearization, q: np.ndarray, v_q: np.ndarray,
                   loc: LocationState):
    """Fuse the location-implied channel prior with the AMP extrinsics.

    Returns the per-edge belief (mean, var) plus the prior pair, all in
    the (N, M, 6) layout.
    """
    prior_mean = lin.xi + np.sum(loc.edge_mean * lin.dh, axis=-1)
    prior_var = clamp_var(np.sum(loc.edge_var * np.abs(lin.dh) ** 2, axis=-1))
    prec = 1.0 / prior_var + 1.0 / v_q
    var = clamp_var(1.0 / prec)
    mean = var * (prior_mean / prior_var + q / v_q)
    return mean, var, prior_mean, prior_var


# --- full-digital estimator ---------------------------------------------


def _grid_candidates(cfg: EstimatorConfig):
    gp = cfg.grid_points
    ax = [np.linspace(lo, hi, gp) for lo, hi in (cfg.prior_x, cfg.prior_y, cfg.prior_z)]
    spacing = np.array([(hi - lo) / (gp - 1) for lo, hi in
                        (cfg.prior_x, cfg.prior_y, cfg.prior_z)])
    grid = np.meshgrid(*ax, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=-1), spacing


def _model_stacked(net: HybridNet, geom: SurfaceGeometry, p1, wave: WaveConfig):
    """Surrogate channel prediction (6N, M) at candidate location p1."""
    offs = tx_offsets(geom)
    n = offs.shape[0]
    pos = np.asarray(p1, dtype=float)[None, :] + np.concatenate(
        [offs, np.zeros((n, 1))], axis=1)
    rxc = rx_centers(geom)
    rel = pos[:, None, :] - np.concatenate(
        [rxc[:, :2], np.zeros((rxc.shape[0], 1))], axis=1)[None, :, :]
    h = hybrid_channel(net, rel.reshape(-1, 3), wave).reshape(n, rxc.shape[0], 6)
    return _edges_to_stacked(h)


def _model_edges_derivs(net: HybridNet, geom: SurfaceGeometry, p1,
                        wave: WaveConfig):
    """Model prediction and its location Jacobian at candidate p1.

    Returns (h, dh) with h shaped (6N, M) and dh shaped (6N, M, 3).
    """
    offs = tx_offsets(geom)
    n = offs.shape[0]
    pos = np.asarray(p1, dtype=float)[None, :] + np.concatenate(
        [offs, np.zeros((n, 1))], axis=1)
    rxc = rx_centers(geom)
    rel = pos[:, None, :] - np.concatenate(
        [rxc[:, :2], np.zeros((rxc.shape[0], 1))], axis=1)[None, :, :]
    h, dh = channel_first_derivs(net, rel.reshape(-1, 3), wave)
    h = _edges_to_stacked(h.reshape(n, rxc.shape[0], 6))
    dh = np.stack([_edges_to_stacked(dh[:, :, j].reshape(n, rxc.shape[0], 6))
                   for j in range(3)], axis=-1)
    return h, dh


def _gauss_newton_refine(net, geom, h_ref, p0, wave, project=None, steps=6,
                         step_tol=1e-5):
    """Levenberg-style local fit of the location to the reference channel."""
    p = np.asarray(p0, dtype=float).copy()
    mu = 0.0
    prev_cost = np.inf
    for _ in range(steps):
        h, dh = _model_edges_derivs(net, geom, p, wave)
        if project is not None:
            h = project(h)
            dh = np.stack([project(dh[..., j]) for j in range(3)], axis=-1)
        e = (h - h_ref).ravel()
        cost = np.vdot(e, e).real
        jac = dh.reshape(-1, 3)
        a = (jac.conj().T @ jac).real
        g = (jac.conj().T @ e).real
        if mu == 0.0:
            mu = 1e-3 * np.max(np.diag(a))
        mu = mu * (10.0 if cost > prev_cost else 0.3)
        try:
            step = np.linalg.solve(a + mu * np.eye(3), -g)
        except np.linalg.LinAlgError:
            break
        p = p + step
        prev_cost = cost
        if np.linalg.norm(step) < step_tol:
            break
    h, _ = _model_edges_derivs(net, geom, p, wave)
    if project is not None:
        h = project(h)
    return p, float(np.linalg.norm(h - h_ref) ** 2)


def grid_search_init(net: HybridNet, geom: SurfaceGeometry, h_ref: np.ndarray,
                     cfg: EstimatorConfig, wave: WaveConfig,
                     project=None):
    """Locate the prior-box point whose model prediction best matches h_ref.

    The search is staged.  A coarse grid plus one refinement maximize the
    envelope correlation |<model(p), h_ref>|, which localizes x and y but
    is nearly blind along z: the dominant z dependence is the common
    phase factor exp(i k0 z) that the magnitude removes, so the
    likelihood in z is a comb of peaks one wavelength apart under a very
    broad envelope.  A dense sweep of z with the phase-sensitive metric
    Re<model(p), h_ref> exposes the comb; the strongest teeth are each
    polished by a damped Gauss-Newton fit of all three coordinates
    against h_ref, and the tooth with the smallest residual wins.
    ``project`` optionally maps (6N, M) predictions into the observation
    space of the hybrid receiver.
    """
    cands, spacing = _grid_candidates(cfg)
    norm_ref = np.linalg.norm(h_ref)

    def score(p, phase_sensitive):
        pred = _model_stacked(net, geom, p, wave)
        if project is not None:
            pred = project(pred)
        denom = np.linalg.norm(pred) * norm_ref
        if denom == 0:
            return 0.0
        inner = np.vdot(pred, h_ref) / denom
        return inner.real if phase_sensitive else abs(inner)

    def best_over(points, phase_sensitive=False):
        top, arg = -np.inf, points[0]
        for p in points:
            s = score(p, phase_sensitive)
            if s > top:
                top, arg = s, p
        return np.asarray(arg, dtype=float)

    coarse = best_over(cands)
    env = minimize(lambda p: -score(p, False), coarse, method="Nelder-Mead",
                   options={"xatol": 1e-3, "fatol": 1e-10, "maxfev": 300})
    xy = env.x if env.x is not None else coarse

    lam = wave.wavelength
    z_lo, z_hi = cfg.prior_z
    teeth = np.arange(z_lo, z_hi + lam / 2, lam)
    # every tooth is refined to convergence: a partially converged cost
    # mostly measures the distance from the (biased) envelope estimate and
    # ranks the true basin far down the list
    best_p, best_cost = np.array([xy[0], xy[1], 0.5 * (z_lo + z_hi)]), np.inf
    for z_k in teeth:
        p_hat, cost = _gauss_newton_refine(
            net, geom, h_ref, (xy[0], xy[1], z_k), wave, project=project,
            steps=8)
        if cost < best_cost and np.all(np.isfinite(p_hat)):
            best_p, best_cost = p_hat, cost

    lo = np.array([cfg.prior_x[0], cfg.prior_y[0], cfg.prior_z[0]])
    hi = np.array([cfg.prior_x[1], cfg.prior_y[1], cfg.prior_z[1]])
    margin = 0.1 * (hi - lo)
    best_p = np.clip(best_p, lo - margin, hi + margin)
    init_var = np.array([(lam / 4) ** 2, (lam / 4) ** 2, (lam / 8) ** 2])
    return best_p, init_var


def _working_scale(net: HybridNet) -> float:
    """Typical channel-entry magnitude used to normalize the AMP stage."""
    return float(np.sqrt(np.mean(net.output_scale ** 2 + net.output_offset ** 2)))


def _trace_row(it, loc, gamma_raw, resid, h_param, h_true):
    nmse = float("nan")
    if h_true is not None:
        nmse = 10 * np.log10(np.linalg.norm(h_param - h_true) ** 2
                             / np.linalg.norm(h_true) ** 2)
    return {"iter": it, "x": loc.mean[0], "y": loc.mean[1], "z": loc.mean[2],
            "nmse_h_running": nmse, "gamma_hat": gamma_raw, "residual": resid}


def write_trace_csv(path, trace) -> None:
    """Dump an iteration trace with the fixed column set."""
    cols = ["iter", "x", "y", "z", "nmse_h_running", "gamma_hat", "residual"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in trace:
            w.writerow({k: row[k] for k in cols})


def estimate_full_digital(model: UnitaryModel, net: HybridNet,
                          geom: SurfaceGeometry, cfg: EstimatorConfig = None,
                          h_true: np.ndarray = None) -> EstimateResult:
    """Joint location/channel estimation from the full-digital receiver.

    ``model`` is the unitary-rotated observation pair (Phi, R); ``h_true``
    is optional and only feeds the iteration trace.
    """
    cfg = cfg or EstimatorConfig()
    wave = WaveConfig(net.frequency)
    offsets = tx_offsets(geom)
    n = offsets.shape[0]
    m = model.r.shape[1]
    scale = _working_scale(net)
    r_n = model.r / scale
    phi = model.phi

    if cfg.init_position is not None:
        _, spacing = _grid_candidates(cfg)
        p0, var0 = np.asarray(cfg.init_position, float), (spacing / 2.0) ** 2
    else:
        h_ls = ls_estimate(phi, model.r)
        p0, var0 = grid_search_init(net, geom, h_ls, cfg, wave)

    loc = init_location_state(p0, var0, offsets, m)
    amp = UampState.initial(phi.shape[0], m, phi.shape[1])
    beta = cfg.damping
    trace = []
    converged = False
    it = 0
    h_param_n = _model_stacked(net, geom, p0, wave) / scale
    try:
        for it in range(1, cfg.max_iters + 1):
            cap = r_n.size / max(np.linalg.norm(r_n - phi @ h_param_n) ** 2, 1e-300)
            q_st, vq_st, amp = uamp_linear_step(phi, r_n, amp, gamma_cap=cap)
            q = _stacked_to_edges(q_st, n)
            v_q = _stacked_to_edges(vq_st, n)

            lin = taylor_linearize(net, geom, loc.patch_mean, wave)
            lin = Linearization(h=lin.h / scale, dh=lin.dh / scale, xi=lin.xi / scale)

            prev = loc.mean.copy()
            new_loc, _ = location_round(lin, q, v_q, loc, offsets)
            if beta < 1.0:
                new_loc.mean[:] = prev + beta * (new_loc.mean - prev)
                new_loc.patch_mean[:] = (loc.patch_mean
                                         + beta * (new_loc.patch_mean - loc.patch_mean))
            loc = new_loc

            h_mean, h_var, _, _ = channel_belief(lin, q, v_q, loc)
            h_mean_st = _edges_to_stacked(h_mean)
            h_var_st = _edges_to_stacked(h_var)
            amp.h_mean[:] = amp.h_mean + beta * (h_mean_st - amp.h_mean)
            amp.h_var[:] = clamp_var(amp.h_var + beta * (h_var_st - amp.h_var))

            if not np.all(np.isfinite(loc.mean)):
                raise NumericalFailure(f"non-finite location at iteration {it}", trace)
            h_param = _model_stacked(net, geom, loc.mean, wave)
            h_param_n = h_param / scale
            resid = float(np.linalg.norm(r_n - phi @ amp.h_mean)
                          / max(np.linalg.norm(r_n), 1e-300))
            gamma_raw = amp.gamma / scale ** 2
            trace.append(_trace_row(it, loc, gamma_raw, resid, h_param, h_true))
            if np.linalg.norm(loc.mean - prev) < cfg.tol:
                converged = True
                break
    except NumericalFailure as exc:
        raise NumericalFailure(f"{exc} (iteration {it})", trace) from exc

    h_param = _model_stacked(net, geom, loc.mean, wave)
    return EstimateResult(h_hat=h_param, position=loc.mean.copy(),
                          position_var=loc.var.copy(),
                          gamma_hat=amp.gamma / scale ** 2,
                          iterations=it, converged=converged, trace=trace)


# --- hybrid-receiver estimator ------------------------------------------


def _conditioning_stage(f: np.ndarray, q_g: np.ndarray, v_g: np.ndarray,
                        prior_mean: np.ndarray, prior_var: np.ndarray):
    """Exact per-column Gaussian conditioning through the combiner.

    Treats the stage-one extrinsics (q_g, v_g) of G_kappa^T = F H_kappa^T
    as noisy observations and conditions each length-M column of
    H_kappa^T on them under the per-entry prior.  Returns the extrinsic
    (mean, var) toward the prior side, per element of H_kappa (N, M).
    """
    n, m = prior_mean.shape  # prior over H_kappa, (N, M)
    fh = f.conj().T
    post_mean = np.empty((n, m), dtype=complex)
    post_var = np.empty((n, m))
    for j in range(n):
        d = 1.0 / v_g[:, j]                       # (P,)
        a = fh @ (d[:, None] * f)
        a[np.diag_indices(m)] += 1.0 / prior_var[j]
        rhs = prior_mean[j] / prior_var[j] + fh @ (d * q_g[:, j])
        cov = np.linalg.inv(a)
        post_mean[j] = cov @ rhs
        post_var[j] = np.maximum(cov.diagonal().real, VAR_MIN)
    return gaussian_divide(post_mean, post_var, prior_mean, prior_var)


def estimate_hybrid(model: UnitaryModel, f: np.ndarray, net: HybridNet,
                    geom: SurfaceGeometry, cfg: EstimatorConfig = None,
                    h_true: np.ndarray = None) -> EstimateResult:
    """Joint location/channel estimation from the analog-combined receiver.

    Stage one runs the AMP recursion on R = Phi G; stage two turns the
    resulting per-entry extrinsics on G into extrinsics on H by exact
    Gaussian conditioning through F, after which the location messages
    proceed exactly as in the full-digital case.  With F = I the cascade
    reduces to ``estimate_full_digital`` step by step.
    """
    cfg = cfg or EstimatorConfig()
    wave = WaveConfig(net.frequency)
    offsets = tx_offsets(geom)
    n = offsets.shape[0]
    m = f.shape[1]
    p = f.shape[0]
    scale = _working_scale(net)
    r_n = model.r / scale
    phi = model.phi
    abs_f2 = np.abs(f) ** 2

    if cfg.init_position is not None:
        _, spacing = _grid_candidates(cfg)
        p0, var0 = np.asarray(cfg.init_position, float), (spacing / 2.0) ** 2
    else:
        g_ls = ls_estimate(phi, model.r)
        p0, var0 = grid_search_init(net, geom, g_ls, cfg, wave,
                                    project=lambda h: combine_channel(f, h))

    loc = init_location_state(p0, var0, offsets, m)
    amp = UampState.initial(phi.shape[0], p, phi.shape[1])
    beta = cfg.damping
    trace = []
    converged = False
    it = 0
    g_param_n = combine_channel(f, _model_stacked(net, geom, p0, wave)) / scale
    try:
        for it in range(1, cfg.max_iters + 1):
            cap = r_n.size / max(np.linalg.norm(r_n - phi @ g_param_n) ** 2, 1e-300)
            qg_st, vqg_st, amp = uamp_linear_step(phi, r_n, amp, gamma_cap=cap)
            qg = _stacked_to_edges(qg_st, n)      # (N, P, 6)
            vqg = _stacked_to_edges(vqg_st, n)

            lin = taylor_linearize(net, geom, loc.patch_mean, wave)
            lin = Linearization(h=lin.h / scale, dh=lin.dh / scale, xi=lin.xi / scale)

            # channel prior implied by location messages, per (N, M, 6)
            prior_mean = lin.xi + np.sum(loc.edge_mean * lin.dh, axis=-1)
            prior_var = clamp_var(np.sum(loc.edge_var * np.abs(lin.dh) ** 2, axis=-1))

            # stage two: extrinsics on H through the combiner
            q = np.empty((n, m, 6), dtype=complex)
            v_q = np.empty((n, m, 6))
            for k in range(6):
                q[:, :, k], v_q[:, :, k] = _conditioning_stage(
                    f, qg[:, :, k].T, vqg[:, :, k].T,
                    prior_mean[:, :, k], prior_var[:, :, k])

            prev = loc.mean.copy()
            new_loc, _ = location_round(lin, q, v_q, loc, offsets)
            if beta < 1.0:
                new_loc.mean[:] = prev + beta * (new_loc.mean - prev)
                new_loc.patch_mean[:] = (loc.patch_mean
                                         + beta * (new_loc.patch_mean - loc.patch_mean))
            loc = new_loc

            h_mean, h_var, pm2, pv2 = channel_belief(lin, q, v_q, loc)
            # push the channel belief forward through F for the next AMP pass
            g_mean = np.empty((n, p, 6), dtype=complex)
            g_var = np.empty((n, p, 6))
            for k in range(6):
                g_mean[:, :, k] = h_mean[:, :, k] @ f.T
                g_var[:, :, k] = h_var[:, :, k] @ abs_f2.T
            g_mean_st = _edges_to_stacked(g_mean)
            g_var_st = clamp_var(_edges_to_stacked(g_var))
            amp.h_mean[:] = amp.h_mean + beta * (g_mean_st - amp.h_mean)
            amp.h_var[:] = clamp_var(amp.h_var + beta * (g_var_st - amp.h_var))

            if not np.all(np.isfinite(loc.mean)):
                raise NumericalFailure(f"non-finite location at iteration {it}", trace)
            h_param = _model_stacked(net, geom, loc.mean, wave)
            g_param_n = combine_channel(f, h_param) / scale
            resid = float(np.linalg.norm(r_n - phi @ amp.h_mean)
                          / max(np.linalg.norm(r_n), 1e-300))
            gamma_raw = amp.gamma / scale ** 2
            trace.append(_trace_row(it, loc, gamma_raw, resid, h_param, h_true))
            if np.linalg.norm(loc.mean - prev) < cfg.tol:
                converged = True
                break
    except NumericalFailure as exc:
        raise NumericalFailure(f"{exc} (iteration {it})", trace) from exc

    h_param = _model_stacked(net, geom, loc.mean, wave)
    return EstimateResult(h_hat=h_param, position=loc.mean.copy(),
                          position_var=loc.var.copy(),
                          gamma_hat=amp.gamma / scale ** 2,
                          iterations=it, converged=converged, trace=trace)
