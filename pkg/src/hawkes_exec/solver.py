"""Value iteration for the execution problem in reduced coordinates.

The value is written ``V = x * s_ref + g(t, x, dev, kp, km, mu1)``.  Each sweep
builds, on the tensor grid,

* ``MG``: the best single trade followed by the current field,
* ``HG``: the current field averaged over the marks of a buy or a sell order,

and then, for every node, scans the candidate stopping times ``u`` on the
time grid: stop at ``u`` and trade if no order arrived before, otherwise
continue with the current field after the first order.  The first-order
probabilities come from the regime propagator, integrated exactly between
grid times, so the quadrature is a product trapezoid rule that reproduces the
probability partition to round-off.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numba
import numpy as np
from numpy.polynomial.laguerre import laggauss
from scipy import integrate, linalg

from .approx import GridField, MlpField
from .filtering import FilterState, filter_flow, filter_jump
from .model import (
    ModelParams,
    ReducedState,
    UnsupportedConfiguration,
    excitation_increment,
    impact_cost_coefficient,
    impact_q,
    intensity_flow,
    mark_moments,
    require_symmetric_pair,
    trade_cost,
)
from .regimeflow import Propagator, deterministic_bankruptcy
from .simulate import EventPath, Strategy, realized_revenue, simulate_path

log = logging.getLogger(__name__)

__all__ = [
    "GridSpec",
    "SolveConfig",
    "Solution",
    "Policy",
    "base_value",
    "base_drift_closed_form",
    "drift_coefficients",
    "no_trade_value",
    "intervene",
    "first_jump_value",
    "terminal_value",
    "solve",
    "execute_policy",
    "extract_regions",
    "backtest",
    "immediate_strategy",
    "tranche_strategy",
]

GOLDEN = 0.6180339887498949
AXIS_NAMES = ("t", "x", "dev", "kp", "km", "mu")


# ---------------------------------------------------------------- configuration


@dataclass
class GridSpec:
    """Tensor grid of the reduced state; the time axis is uniform on [0, horizon]."""

    n_t: int = 21
    x_max: float = 4.0
    n_x: int = 9
    dev_min: float = -2.0
    dev_max: float = 2.0
    n_dev: int = 9
    kappa_max: float = 8.0
    n_kappa: int = 7
    n_mu: int = 11

    def __post_init__(self):
        for name in ("n_t", "n_x", "n_dev", "n_kappa", "n_mu"):
            if int(getattr(self, name)) < 2:
                raise ValueError(f"{name} must be >= 2")
        if self.x_max <= 0 or self.dev_max <= self.dev_min:
            raise ValueError("empty grid box")

    def axes(self, params: ModelParams) -> list[np.ndarray]:
        lam_inf = float(params.lambda_inf[0])
        if self.kappa_max <= lam_inf:
            raise ValueError("kappa_max must exceed the baseline intensity")
        return [
            np.linspace(0.0, params.horizon, self.n_t),
            np.linspace(0.0, self.x_max, self.n_x),
            np.linspace(self.dev_min, self.dev_max, self.n_dev),
            np.linspace(lam_inf, self.kappa_max, self.n_kappa),
            np.linspace(lam_inf, self.kappa_max, self.n_kappa),
            np.linspace(0.0, 1.0, self.n_mu),
        ]


@dataclass
class SolveConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    n_max: int = 20
    tol_rel: float = 1e-3
    s_ref: float = 10.0
    approximator: str = "grid"
    n_xi: int = 64
    n_gl: int = 16
    h_max: float = 0.01
    mlp_seed: int = 0
    time_budget: float | None = None

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = GridSpec(**self.grid)
        if self.approximator not in ("grid", "mlp"):
            raise ValueError("approximator must be 'grid' or 'mlp'")
        if self.n_max < 0 or self.n_xi < 2 or self.n_gl < 1:
            raise ValueError("invalid solver sizes")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SolveConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown solve config keys: {sorted(unknown)}")
        grid = doc.get("grid", {})
        grid_known = {f.name for f in fields(GridSpec)}
        if set(grid) - grid_known:
            raise ValueError(f"unknown grid keys: {sorted(set(grid) - grid_known)}")
        return cls(**{**doc, "grid": GridSpec(**grid)})


# ---------------------------------------------------------------- closed forms


def terminal_value(params: ModelParams, x, dev):
    """g at the horizon: sell everything at the prevailing price."""
    x = np.asarray(x, dtype=float)
    cp = impact_cost_coefficient(params.lob_c, params.lob_e)
    p = (params.lob_e + 1.0) / params.lob_e
    out = np.where(x > 0, x * dev - cp * x**p - params.c0, 0.0)
    return float(out) if out.ndim == 0 else out


def _trade_gain(params: ModelParams, x, dev, xi):
    """Reduced cash of selling xi out of x: own-price term plus the permanent hit on the rest."""
    q = impact_q(xi, params.lob_c, params.lob_e)
    return trade_cost(dev, xi, params.lob_c, params.lob_e, params.c0) - params.nu * q * (x - xi), q


def drift_coefficients(params: ModelParams, t) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients (A, B) with drift ``K = E[Q] (kp - km) (mu1 A + (1 - mu1) B)``.

    Orders bump both sides of a regime equally, so the buy-minus-sell
    imbalance decays deterministically and its expectation only needs the
    unconditional regime law started from regime 1 (A) or regime 2 (B).
    """
    horizon = params.horizon
    nu, rho, beta = params.nu, params.rho, float(params.beta[0])
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.zeros((2, t.size))
    for n, tt in enumerate(t):
        for row in range(2):

            def integrand(s, tt=tt, row=row):
                law = linalg.expm(params.psi * s)[row]
                weight = nu + (1 - nu) * math.exp(-rho * (horizon - tt - s))
                return weight * (law[0] - law[1]) * math.exp(-beta * s)

            out[row, n] = integrate.quad(integrand, 0.0, horizon - tt, epsabs=1e-12, epsrel=1e-12)[0]
    return out[0], out[1]


def base_drift_closed_form(params: ModelParams, t, kp, km, mu1) -> float:
    """Expected price drift from the order flow between t and the horizon, per unit held."""
    a, b = drift_coefficients(params, t)
    eq = mark_moments(params)[2]
    return float(eq * (kp - km) * (mu1 * a[0] + (1 - mu1) * b[0]))


def no_trade_value(params: ModelParams, t: float, state: ReducedState, s_ref: float) -> float:
    """g0 at one state: hold everything and sell at the horizon, or at once if the price is not positive."""
    x, dev, kp, km, mu1 = state
    if x <= 0:
        return 0.0
    if s_ref + dev <= 0:
        return terminal_value(params, x, dev)
    if s_ref < 0:
        raise UnsupportedConfiguration("a price crossing zero before the first order is not supported here")
    drift = base_drift_closed_form(params, t, kp, km, mu1)
    return terminal_value(params, x, dev * math.exp(-params.rho * (params.horizon - t)) + drift)


# ---------------------------------------------------------------- numba kernels


@numba.njit(cache=True)
def _cell(axis, q):
    n = axis.size
    if q <= axis[0]:
        return 0, 0.0, q < axis[0]
    if q >= axis[n - 1]:
        return n - 2, 1.0, q > axis[n - 1]
    i = np.searchsorted(axis, q, side="right") - 1
    return i, (q - axis[i]) / (axis[i + 1] - axis[i]), False


@numba.njit(cache=True)
def _lerp2(v, i0, f0, i1, f1):
    return ((1 - f0) * ((1 - f1) * v[i0, i1] + f1 * v[i0, i1 + 1])
            + f0 * ((1 - f1) * v[i0 + 1, i1] + f1 * v[i0 + 1, i1 + 1]))


@numba.njit(cache=True)
def _lerp3(v, i0, f0, i1, f1, i2, f2):
    acc = 0.0
    for b0 in range(2):
        w0 = f0 if b0 else 1.0 - f0
        if w0 == 0.0:
            continue
        for b1 in range(2):
            w1 = w0 * (f1 if b1 else 1.0 - f1)
            if w1 == 0.0:
                continue
            acc += w1 * ((1 - f2) * v[i0 + b0, i1 + b1, i2] + f2 * v[i0 + b0, i1 + b1, i2 + 1])
    return acc


@numba.njit(cache=True)
def _lerp4(v, i0, f0, i1, f1, i2, f2, i3, f3):
    acc = 0.0
    for b0 in range(2):
        w0 = f0 if b0 else 1.0 - f0
        if w0 == 0.0:
            continue
        acc += w0 * _lerp3(v[i0 + b0], i1, f1, i2, f2, i3, f3)
    return acc


@numba.njit(cache=True)
def _trade_objective(slab, X, DEV, x, dev, xi, nu, c, e, cp, p, c0):
    q = (e * xi / c) ** (1.0 / e)
    i0, f0, _ = _cell(X, x - xi)
    i1, f1, _ = _cell(DEV, dev - (1 - nu) * q)
    return dev * xi - cp * xi**p - c0 - nu * q * (x - xi) + _lerp2(slab, i0, f0, i1, f1)


@numba.njit(cache=True)
def _best_trade(slab, X, DEV, x, dev, nu, c, e, cp, p, c0, n_xi):
    best, arg = -np.inf, 0
    for q in range(1, n_xi + 1):
        val = _trade_objective(slab, X, DEV, x, dev, x * q / n_xi, nu, c, e, cp, p, c0)
        if val > best:
            best, arg = val, q
    lo = x * (arg - 1) / n_xi
    hi = x * min(arg + 1, n_xi) / n_xi
    best_xi = x * arg / n_xi
    a1 = hi - GOLDEN * (hi - lo)
    a2 = lo + GOLDEN * (hi - lo)
    v1 = _trade_objective(slab, X, DEV, x, dev, a1, nu, c, e, cp, p, c0)
    v2 = _trade_objective(slab, X, DEV, x, dev, a2, nu, c, e, cp, p, c0)
    while hi - lo > 1e-9 * x:
        if v1 < v2:
            lo, a1, v1 = a1, a2, v2
            a2 = lo + GOLDEN * (hi - lo)
            v2 = _trade_objective(slab, X, DEV, x, dev, a2, nu, c, e, cp, p, c0)
        else:
            hi, a2, v2 = a2, a1, v1
            a1 = hi - GOLDEN * (hi - lo)
            v1 = _trade_objective(slab, X, DEV, x, dev, a1, nu, c, e, cp, p, c0)
    if v1 > best:
        best, best_xi = v1, a1
    if v2 > best:
        best, best_xi = v2, a2
    return best, best_xi


@numba.njit(cache=True)
def _intervene_nodes(g, X, DEV, nu, c, e, cp, p, c0, n_xi):
    nt, nx, nd, nk, _, nm = g.shape
    mg = np.empty(g.shape)
    xi_star = np.zeros(g.shape)
    for j in range(nt):
        for a in range(nk):
            for b in range(nk):
                for m in range(nm):
                    slab = np.ascontiguousarray(g[j, :, :, a, b, m])
                    for idev in range(nd):
                        # limit of a vanishing trade: pay the fixed fee, keep everything
                        mg[j, 0, idev, a, b, m] = g[j, 0, idev, a, b, m] - c0
                        for ix in range(1, nx):
                            val, xi = _best_trade(slab, X, DEV, X[ix], DEV[idev], nu, c, e, cp, p, c0, n_xi)
                            mg[j, ix, idev, a, b, m] = val
                            xi_star[j, ix, idev, a, b, m] = xi
    return mg, xi_star


@numba.njit(cache=True)
def _jump_lifts(g, DEV, KAP, MU, nu, shift, bump, wts):
    """Mark-averaged field after a buy (index 0) or a sell (index 1) order."""
    nt, nx, nd, nk, _, nm = g.shape
    nq = wts.size
    out = np.zeros((2,) + g.shape)
    clamps = 0
    kap_i = np.empty((nk, nq), dtype=np.int64)
    kap_f = np.empty((nk, nq))
    for a in range(nk):
        for q in range(nq):
            i, f, cl = _cell(KAP, KAP[a] + bump[q])
            kap_i[a, q], kap_f[a, q] = i, f
            clamps += cl
    dev_i = np.empty((2, nd, nq), dtype=np.int64)
    dev_f = np.empty((2, nd, nq))
    for s in range(2):
        sign = 1.0 if s == 0 else -1.0
        for idev in range(nd):
            for q in range(nq):
                i, f, cl = _cell(DEV, DEV[idev] + sign * (1 - nu) * shift[q])
                dev_i[s, idev, q], dev_f[s, idev, q] = i, f
                clamps += cl
    for a in range(nk):
        for b in range(nk):
            for m in range(nm):
                mu = MU[m]
                for s in range(2):
                    lam1 = KAP[a] if s == 0 else KAP[b]
                    lam2 = KAP[b] if s == 0 else KAP[a]
                    post = mu * lam1 / (mu * lam1 + (1 - mu) * lam2)
                    im, fm, _ = _cell(MU, post)
                    for q in range(nq):
                        ia, fa = kap_i[a, q], kap_f[a, q]
                        ib, fb = kap_i[b, q], kap_f[b, q]
                        w = wts[q]
                        for j in range(nt):
                            for ix in range(1, nx):
                                v = g[j, ix]
                                for idev in range(nd):
                                    out[s, j, ix, idev, a, b, m] += w * _lerp4(
                                        v, dev_i[s, idev, q], dev_f[s, idev, q], ia, fa, ib, fb, im, fm)
    return out, clamps


@numba.njit(cache=True)
def _sweep(g, g0, mg, hg, X, DEV, KAP, MU, surv, flow_k, flow_mu, cum, decay, drift):
    """One Bellman sweep; ``drift`` is nu * E[Q] and ``decay[L]`` is exp(-rho * L * dt)."""
    nt, nx, nd, nk, _, nm = g.shape
    out = g.copy()
    best = np.empty((nx, nd))
    run = np.empty((nx, nd))
    prev_p = np.empty((nx, nd))
    prev_m = np.empty((nx, nd))
    for j in range(nt - 1):
        for a in range(nk):
            for b in range(nk):
                for m in range(nm):
                    best[:, :] = -np.inf
                    run[:, :] = 0.0
                    for lag in range(nt - j):
                        n = j + lag
                        ia, fa, _ = _cell(KAP, flow_k[lag, a])
                        ib, fb, _ = _cell(KAP, flow_k[lag, b])
                        im, fm, _ = _cell(MU, flow_mu[lag, a, b, m])
                        sv = surv[lag, a, b, m]
                        dp = cum[lag, a, b, m, 0] - (cum[lag - 1, a, b, m, 0] if lag > 0 else 0.0)
                        dm = cum[lag, a, b, m, 1] - (cum[lag - 1, a, b, m, 1] if lag > 0 else 0.0)
                        for ix in range(1, nx):
                            x = X[ix]
                            for idev in range(nd):
                                i0, f0, _ = _cell(DEV, DEV[idev] * decay[lag])
                                stop = _lerp4(mg[n, ix], i0, f0, ia, fa, ib, fb, im, fm)
                                lp = _lerp4(hg[0, n, ix], i0, f0, ia, fa, ib, fb, im, fm) + drift * x
                                lm = _lerp4(hg[1, n, ix], i0, f0, ia, fa, ib, fb, im, fm) - drift * x
                                if lag > 0:
                                    run[ix, idev] += 0.5 * ((prev_p[ix, idev] + lp) * dp + (prev_m[ix, idev] + lm) * dm)
                                prev_p[ix, idev] = lp
                                prev_m[ix, idev] = lm
                                val = sv * stop + run[ix, idev]
                                if val > best[ix, idev]:
                                    best[ix, idev] = val
                    for ix in range(1, nx):
                        for idev in range(nd):
                            v = max(best[ix, idev], g[j, ix, idev, a, b, m], g0[j, ix, idev, a, b, m])
                            out[j, ix, idev, a, b, m] = v
    return out


# ---------------------------------------------------------------- precomputation


def _mark_nodes(params: ModelParams, n_gl: int):
    """Gauss-Laguerre volumes, weights (summing to one), impacts and excitations."""
    z, w = laggauss(n_gl)
    vol = z / float(params.zeta[0])
    shift = impact_q(vol, params.lob_c, params.lob_e)
    bump = excitation_increment(vol, float(params.zeta[0]), params.eta, params.excitation_scale)
    return vol, w / w.sum(), np.asarray(shift), np.asarray(bump)


@dataclass
class _Flow:
    """Pre-order quantities for every node and lag on the uniform time grid."""

    surv: np.ndarray  # (n_lag, nk, nk, nm)
    flow_k: np.ndarray  # (n_lag, nk)
    flow_mu: np.ndarray  # (n_lag, nk, nk, nm)
    cum: np.ndarray  # (n_lag, nk, nk, nm, 2): probability of a first buy/sell order by the lag
    decay: np.ndarray  # (n_lag,)


def _precompute_flow(params: ModelParams, axes, h_max: float) -> _Flow:
    t_ax, _, _, kap, _, mu_ax = axes
    lags = t_ax - t_ax[0]
    kp = np.broadcast_to(kap[:, None], (kap.size, kap.size))
    km = np.broadcast_to(kap[None, :], (kap.size, kap.size))
    kplus = np.stack([kp, km], axis=-1)
    kminus = np.stack([km, kp], axis=-1)
    rows = np.broadcast_to(np.eye(2), kplus.shape[:-1] + (2, 2))
    prop = Propagator(params, 0.0, kplus, kminus, rows, lags, h_max=h_max)
    # prop.m: (n_lag, nk, nk, start, i); prop.cumulative: (n_lag, nk, nk, start, i, k)
    start = np.stack([mu_ax, 1.0 - mu_ax], axis=-1)  # (nm, 2)
    m = np.einsum("mr,labri->labmi", start, prop.m)
    cum = np.einsum("mr,labrik->labmk", start, prop.cumulative)
    surv = m.sum(axis=-1)
    flow_mu = np.where(surv > 0, m[..., 0] / np.where(surv > 0, surv, 1.0), mu_ax[None, None, None, :])
    flow_k = intensity_flow(kap[None, :], float(params.lambda_inf[0]), float(params.beta[0]), lags[:, None])
    decay = np.exp(-params.rho * lags)
    return _Flow(surv, np.ascontiguousarray(flow_k), np.ascontiguousarray(flow_mu), np.ascontiguousarray(cum), decay)


def _check_reduced(params: ModelParams, config: SolveConfig):
    require_symmetric_pair(params)
    if config.s_ref < 0 or config.s_ref + config.grid.dev_min <= 0:
        raise ValueError("the gridded solver needs s_ref >= 0 and a positive price on the whole grid")


# ---------------------------------------------------------------- base value


def base_value(params: ModelParams, config: SolveConfig, axes=None):
    """No-trade value g0 on the grid and the order-flow drift K(t, kp, km, mu).

    Holding everything to the horizon earns the expected terminal price, so
    ``g0 = x * (dev * exp(-rho (T - t)) + K) - c' x^p - c0`` for ``x > 0``.
    """
    _check_reduced(params, config)
    axes = config.grid.axes(params) if axes is None else axes
    t_ax, x_ax, dev_ax, kap, _, mu_ax = axes
    a, b = drift_coefficients(params, t_ax)
    eq = mark_moments(params)[2]
    imbalance = kap[:, None] - kap[None, :]
    K = eq * imbalance[None, :, :, None] * (mu_ax * a[:, None, None, None] + (1 - mu_ax) * b[:, None, None, None])
    t = t_ax[:, None, None, None, None, None]
    x = x_ax[None, :, None, None, None, None]
    dev = dev_ax[None, None, :, None, None, None]
    decay = np.exp(-params.rho * (params.horizon - t))
    g0 = terminal_value(params, x, dev * decay + K[:, None, None])
    return np.ascontiguousarray(g0), K


# ---------------------------------------------------------------- pointwise operators


def intervene(params: ModelParams, g, t: float, state: ReducedState, n_xi: int = 64):
    """Best single trade now followed by ``g``; returns (value, size).

    ``g`` is called as ``g(t, x, dev, kp, km, mu)`` with array arguments.
    With nothing to sell the value is ``-inf`` and the size 0.
    """
    x, dev, kp, km, mu = state
    if x <= 0:
        return -math.inf, 0.0

    def objective(xi):
        xi = np.asarray(xi, dtype=float)
        gain, q = _trade_gain(params, x, dev, xi)
        return gain + np.asarray(g(t, x - xi, dev - (1 - params.nu) * q, kp, km, mu), dtype=float)

    grid = x * np.arange(1, n_xi + 1) / n_xi
    vals = objective(grid)
    arg = int(np.argmax(vals))
    best, best_xi = float(vals[arg]), float(grid[arg])
    lo = x * arg / n_xi
    hi = x * min(arg + 2, n_xi) / n_xi
    a1, a2 = hi - GOLDEN * (hi - lo), lo + GOLDEN * (hi - lo)
    v1, v2 = float(objective(a1)), float(objective(a2))
    while hi - lo > 1e-9 * x:
        if v1 < v2:
            lo, a1, v1 = a1, a2, v2
            a2 = lo + GOLDEN * (hi - lo)
            v2 = float(objective(a2))
        else:
            hi, a2, v2 = a2, a1, v1
            a1 = hi - GOLDEN * (hi - lo)
            v1 = float(objective(a1))
    for val, xi in ((v1, a1), (v2, a2)):
        if val > best:
            best, best_xi = val, xi
    return best, best_xi


def first_jump_value(params: ModelParams, g, t: float, u, state: ReducedState, s_ref: float = 10.0,
                     n_gl: int = 16, n_xi: int = 64, r_step: float = 0.01, h_max: float = 0.01,
                     stop_value=None, jump_value=None):
    """Stop-at-u value: trade at u if no order came first, else continue with ``g`` after it.

    ``u`` may be a scalar or an increasing array of times in ``[t, bankruptcy]``.
    ``stop_value(u, flowed_state)`` and ``jump_value(r, flowed_state, side)``
    replace the trade operator and the mark average when given.
    """
    require_symmetric_pair(params)
    x, dev, kp, km, mu1 = state
    scalar = np.ndim(u) == 0
    u_arr = np.atleast_1d(np.asarray(u, dtype=float))
    bankrupt_at = deterministic_bankruptcy(s_ref, dev, t, params.rho, params.horizon)
    if u_arr[0] < t or u_arr[-1] > bankrupt_at + 1e-12:
        raise ValueError("u must lie in [t, bankruptcy time]")
    # quadrature nodes: the requested u's plus a uniform refinement
    n_fine = max(1, math.ceil((u_arr[-1] - t) / r_step - 1e-12))
    r = np.unique(np.concatenate([[t], np.linspace(t, u_arr[-1], n_fine + 1), u_arr]))
    prop = Propagator(params, t, [kp, km], [km, kp], [mu1, 1 - mu1], r, h_max=h_max)
    surv = prop.survival
    law = prop.m[:, 0] / np.where(surv > 0, surv, 1.0)
    lam_inf, beta = float(params.lambda_inf[0]), float(params.beta[0])
    kp_r = intensity_flow(kp, lam_inf, beta, r - t)
    km_r = intensity_flow(km, lam_inf, beta, r - t)
    dev_r = dev * np.exp(-params.rho * (r - t))
    cum = prop.cumulative.sum(axis=-2)  # (n_r, 2) buy / sell
    eq = mark_moments(params)[2]
    if jump_value is None:
        _, wts, shift, bump = _mark_nodes(params, n_gl)

        def jump_value(rr, st, side):
            lam1 = st.kp if side > 0 else st.km
            lam2 = st.km if side > 0 else st.kp
            post = st.mu1 * lam1 / (st.mu1 * lam1 + (1 - st.mu1) * lam2)
            vals = g(rr, st.x, st.dev + side * (1 - params.nu) * shift, st.kp + bump, st.km + bump, post)
            return float(np.dot(wts, vals))

    drift = params.nu * eq * x
    ell = np.empty((r.size, 2))
    for n in range(r.size):
        st = ReducedState(x, dev_r[n], kp_r[n], km_r[n], law[n])
        ell[n, 0] = jump_value(r[n], st, 1) + drift
        ell[n, 1] = jump_value(r[n], st, -1) - drift
    run = np.concatenate([[0.0], np.cumsum(0.5 * ((ell[1:] + ell[:-1]) * np.diff(cum, axis=0)).sum(axis=1))])
    out = np.empty(u_arr.size)
    for k, uu in enumerate(u_arr):
        n = int(np.searchsorted(r, uu))
        st = ReducedState(x, dev_r[n], kp_r[n], km_r[n], law[n])
        if stop_value is not None:
            stop = stop_value(uu, st)
        elif uu >= bankrupt_at and bankrupt_at < params.horizon:
            # the price has reached zero: the remainder is dumped at the bankruptcy price
            stop = terminal_value(params, x, dev_r[n])
        else:
            stop = intervene(params, g, uu, st, n_xi)[0]
        out[k] = surv[n] * stop + run[n]
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------- solve


@dataclass
class Solution:
    params: ModelParams
    config: SolveConfig
    field: GridField  # g on the 6-D grid
    trade_field: GridField  # best-trade value MG on the same grid
    size_field: GridField  # maximising trade size on the grid
    iterations: int
    sup_changes: list
    value_scale: float
    fit_rmse: float
    converged: bool
    partial: bool = False
    clamp_count: int = 0
    history: list = field(default_factory=list)  # g at 100 probe states after each sweep

    @property
    def band(self) -> float:
        return max(1e-6, 2.0 * self.fit_rmse)

    def policy(self) -> "Policy":
        return Policy(self)

    def value(self, t, state) -> float:
        return float(self.field.eval(np.array([t, *state])))

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "params": self.params.to_dict(),
            "config": self.config.to_dict(),
            "field": self.field.to_dict(),
            "trade_field": self.trade_field.to_dict(),
            "size_field": self.size_field.to_dict(),
            "iterations": self.iterations,
            "sup_changes": list(map(float, self.sup_changes)),
            "value_scale": self.value_scale,
            "fit_rmse": self.fit_rmse,
            "converged": self.converged,
            "partial": self.partial,
            "clamp_count": self.clamp_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "Solution":
        if doc.get("version") != 1:
            raise ValueError(f"unsupported solution version {doc.get('version')!r}")
        return cls(
            ModelParams.from_dict(doc["params"]),
            SolveConfig.from_dict(doc["config"]),
            GridField.from_dict(doc["field"]),
            GridField.from_dict(doc["trade_field"]),
            GridField.from_dict(doc["size_field"]),
            int(doc["iterations"]),
            list(doc["sup_changes"]),
            float(doc["value_scale"]),
            float(doc["fit_rmse"]),
            bool(doc["converged"]),
            bool(doc.get("partial", False)),
            int(doc.get("clamp_count", 0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "Solution":
        return cls.from_dict(json.loads(text))


def probe_states(axes, n: int = 100, seed: int = 0) -> np.ndarray:
    """Fixed random interior points (t, x, dev, kp, km, mu) used to track g across sweeps."""
    rng = np.random.default_rng(seed)
    lo = np.array([a[0] for a in axes])
    hi = np.array([a[-1] for a in axes])
    pts = rng.uniform(lo, hi, size=(n, len(axes)))
    pts[:, 1] = np.maximum(pts[:, 1], axes[1][1])
    return pts


def solve(params: ModelParams, config: SolveConfig | None = None) -> Solution:
    """Value iteration from the no-trade value until the sup-change is small or n_max sweeps."""
    config = SolveConfig() if config is None else config
    _check_reduced(params, config)
    started = time.monotonic()
    axes = config.grid.axes(params)
    t_ax, x_ax, dev_ax, kap, _, mu_ax = axes
    flow = _precompute_flow(params, axes, config.h_max)
    g0, _ = base_value(params, config, axes)
    g = g0.copy()
    _, wts, shift, bump = _mark_nodes(params, config.n_gl)
    eq = mark_moments(params)[2]
    cp = impact_cost_coefficient(params.lob_c, params.lob_e)
    p = (params.lob_e + 1.0) / params.lob_e
    scale = float(np.max(np.abs(g0)))
    probes = probe_states(axes)
    field_g = GridField(axes, g)
    history = [field_g.eval(probes)]
    sup_changes, clamps, rmse = [], 0, 0.0
    converged, partial = config.n_max == 0, False
    iterations = 0
    for sweep in range(config.n_max):
        mg, _ = _intervene_nodes(g, x_ax, dev_ax, params.nu, params.lob_c, params.lob_e, cp, p, params.c0,
                                 config.n_xi)
        hg, n_clamp = _jump_lifts(g, dev_ax, kap, mu_ax, params.nu, shift, bump, wts)
        clamps += int(n_clamp)
        new = _sweep(g, g0, mg, hg, x_ax, dev_ax, kap, mu_ax, flow.surv, flow.flow_k, flow.flow_mu,
                     flow.cum, flow.decay, params.nu * eq)
        if config.approximator == "mlp":
            new, rmse = _refit_mlp(axes, new, g, g0, config.mlp_seed)
        change = float(np.max(np.abs(new - g)))
        g = new
        iterations = sweep + 1
        sup_changes.append(change)
        field_g = GridField(axes, g)
        history.append(field_g.eval(probes))
        log.info("sweep %d: sup-change %.3g (scale %.3g)", iterations, change, scale)
        if change < config.tol_rel * scale:
            converged = True
            break
        if config.time_budget is not None and time.monotonic() - started > config.time_budget:
            partial = True
            log.warning("time budget exhausted after %d sweeps", iterations)
            break
    if clamps:
        log.warning("order-lift quadrature left the grid box %d times (values clamped)", clamps)
    mg, xi = _intervene_nodes(g, x_ax, dev_ax, params.nu, params.lob_c, params.lob_e, cp, p, params.c0,
                              config.n_xi)
    field_g.rmse = rmse
    return Solution(params, config, field_g, GridField(axes, mg), GridField(axes, xi), iterations,
                    sup_changes, scale, rmse, converged, partial, clamps, history)


def _refit_mlp(axes, targets, g_prev, g0, seed):
    """Fit the network to the sweep targets and read it back on the grid, keeping the floors."""
    grid = GridField(axes)
    net = MlpField(len(axes), seed=seed)
    rmse = net.fit(grid.nodes(), targets.ravel())
    values = net.eval(grid.nodes()).reshape(targets.shape)
    values = np.maximum(values, np.maximum(g_prev, g0))
    values[-1] = targets[-1]
    values[:, 0] = 0.0
    return values, float(rmse)


# ---------------------------------------------------------------- policy


class Policy:
    """Trade whenever the best trade is within the band of the value, with the maximising size."""

    def __init__(self, solution: Solution):
        self.solution = solution
        self.params = solution.params
        self.band = solution.band
        gap = solution.field.values - solution.trade_field.values
        self.gap_field = GridField(solution.field.axes, gap)

    def gap(self, t, state) -> float:
        return float(self.gap_field.eval(np.array([t, *state])))

    def should_trade(self, t, state) -> bool:
        return state[0] > 0 and self.gap(t, state) <= self.band

    def order_size(self, t, state) -> float:
        return intervene(self.params, self.solution.field, t, state, self.solution.config.n_xi)[1]


def _decision_times(policy: Policy, path: EventPath) -> list:
    grid = policy.solution.field.axes[0]
    items = [(float(t), False, -1) for t in grid if t <= path.horizon]
    items += [(float(t), True, k) for k, t in enumerate(path.times)]
    items.sort(key=lambda it: (it[0], not it[1]))
    return items


def execute_policy(policy: Policy, path: EventPath, init, prior, x0: float):
    """Run the policy along an order path; returns (strategy, revenue).

    ``init`` is the initial (s, dev).  Decisions are taken on the solver time
    grid and right after every order; any inventory left at the bankruptcy
    time or the horizon is liquidated there.
    """
    params = policy.params
    s, dev = float(init[0]), float(init[1])
    state = FilterState.initial(params, prior)
    x, t_last = float(x0), 0.0
    times, sizes = [], []
    for tau, is_event, k in _decision_times(policy, path):
        dev *= math.exp(-params.rho * (tau - t_last))
        state = filter_flow(params, state, tau - state.t)
        t_last = tau
        if is_event:
            q = impact_q(path.volumes[k], params.lob_c, params.lob_e)
            side = path.sides[k]
            s += side * params.nu * q
            dev += side * (1 - params.nu) * q
            state = filter_jump(params, state, side, path.volumes[k])
        if s + dev < 0:
            break
        reduced = ReducedState(x, dev, state.lambdas[0, 0], state.lambdas[0, 1], state.pi[0])
        if x > 0 and policy.should_trade(tau, reduced):
            xi = min(policy.order_size(tau, reduced), x)
            times.append(tau)
            sizes.append(xi)
            x -= xi
            q = impact_q(xi, params.lob_c, params.lob_e)
            s -= params.nu * q
            dev -= (1 - params.nu) * q
    strategy = Strategy(times, sizes, x0)
    return strategy, realized_revenue(params, path, strategy, init)


def immediate_strategy(x0: float) -> Strategy:
    return Strategy([0.0], [x0], x0)


def tranche_strategy(x0: float, horizon: float, n: int = 4) -> Strategy:
    """Equal slices at 0, T/n, ..., (n-1)T/n."""
    return Strategy(horizon * np.arange(n) / n, np.full(n, x0 / n), x0)


def backtest(policy: Policy, n_paths: int, seed: int, x0: float, init=(10.0, 0.0), prior=(0.5, 0.5)):
    """Revenue of the policy and the two baselines on common simulated paths.

    Returns rows ``(seed, revenue_opt, revenue_immediate, revenue_tranches)``
    and a summary with paired standard errors of the differences.
    """
    params = policy.params
    rows = []
    for k in range(n_paths):
        path_seed = seed + k
        path = simulate_path(params, path_seed, initial=np.asarray(prior, float))
        _, opt = execute_policy(policy, path, init, prior, x0)
        imm = realized_revenue(params, path, immediate_strategy(x0), init)
        tr = realized_revenue(params, path, tranche_strategy(x0, params.horizon), init)
        rows.append((path_seed, opt, imm, tr))
    arr = np.array([r[1:] for r in rows])
    summary = {"n_paths": n_paths, "mean_opt": float(arr[:, 0].mean()),
               "mean_immediate": float(arr[:, 1].mean()), "mean_tranches": float(arr[:, 2].mean())}
    for name, col in (("immediate", 1), ("tranches", 2)):
        diff = arr[:, 0] - arr[:, col]
        summary[f"diff_{name}"] = float(diff.mean())
        summary[f"se_{name}"] = float(diff.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else math.nan
    return rows, summary


# ---------------------------------------------------------------- regions


def extract_regions(solution: Solution, a_name: str, a_values, b_name: str, b_values, fixed: dict):
    """Trade indicator, maximising size and value over a 2-D slice of the reduced state.

    ``fixed`` supplies the remaining coordinates among t, x, dev, kp, km, mu.
    Rows are ``(a, b, trade, xi_star, g_value)``.
    """
    names = set(AXIS_NAMES)
    if a_name not in names or b_name not in names or a_name == b_name:
        raise ValueError("slice axes must be two distinct names among " + ", ".join(AXIS_NAMES))
    missing = names - {a_name, b_name} - set(fixed)
    if missing:
        raise ValueError(f"missing fixed coordinates: {sorted(missing)}")
    policy = solution.policy()
    rows = []
    for a in a_values:
        for b in b_values:
            coords = {**fixed, a_name: float(a), b_name: float(b)}
            t = coords["t"]
            state = ReducedState(coords["x"], coords["dev"], coords["kp"], coords["km"], coords["mu"])
            trade = policy.should_trade(t, state)
            xi = policy.order_size(t, state) if state.x > 0 else 0.0
            rows.append((float(a), float(b), int(trade), float(xi), solution.value(t, state)))
    return rows
