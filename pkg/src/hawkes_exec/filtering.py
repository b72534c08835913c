"""Regime filter driven by the observed order flow.

Between orders the posterior follows a deterministic ODE (integrated by RK4);
an order of side k multiplies each regime's weight by its intensity for k.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .model import ModelParams, excitation_increment, intensity_flow

log = logging.getLogger(__name__)

__all__ = [
    "FilterState",
    "FilterTrajectory",
    "filter_flow",
    "filter_jump",
    "run_filter",
    "map_estimate",
    "DegenerateUpdate",
    "BUY",
    "SELL",
]

BUY, SELL = 1, -1
H_MAX = 0.01


class DegenerateUpdate(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class FilterState:
    pi: np.ndarray
    lambdas: np.ndarray  # (d, 2): columns are buy and sell intensities
    t: float = 0.0

    @classmethod
    def initial(cls, params: ModelParams, prior, t: float = 0.0) -> "FilterState":
        lam = np.stack([params.kappa0_plus, params.kappa0_minus], axis=1)
        return cls(_check_simplex(prior), lam.astype(float), float(t))


def _check_simplex(pi, tol: float = 1e-9) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 1 or np.any(pi < -1e-12) or abs(pi.sum() - 1.0) > tol:
        raise ValueError(f"not a probability vector: {pi}")
    return pi


def _renormalize(pi: np.ndarray) -> np.ndarray:
    low = pi.min()
    if low < -1e-10:
        log.info("clamped negative filter mass %.3g", low)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def filter_flow(params: ModelParams, state: FilterState, dt: float, steps: int | None = None) -> FilterState:
    """Advance the posterior over a stretch of time with no orders."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    pi = _check_simplex(state.pi)
    lam0 = state.lambdas
    lam_inf = params.lambda_inf[:, None]
    beta = params.beta[:, None]
    if dt == 0:
        return state
    if steps is None:
        steps = max(1, math.ceil(dt / H_MAX - 1e-12))
    h = dt / steps
    psi_t = params.psi.T

    def rhs(s, p):
        lam = intensity_flow(lam0, lam_inf, beta, s)
        pred = p @ lam
        return psi_t @ p - p * (lam - pred).sum(axis=1)

    for j in range(steps):
        s = j * h
        k1 = rhs(s, pi)
        k2 = rhs(s + h / 2, pi + h / 2 * k1)
        k3 = rhs(s + h / 2, pi + h / 2 * k2)
        k4 = rhs(s + h, pi + h * k3)
        pi = pi + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    lam = intensity_flow(lam0, lam_inf, beta, dt)
    return FilterState(_renormalize(pi), lam, state.t + dt)


def filter_jump(params: ModelParams, state: FilterState, side: int, volume: float) -> FilterState:
    """Bayes update for an order of the given side, then excite every regime's intensities."""
    col = 0 if side == BUY else 1
    pi = state.pi
    weights = pi * state.lambdas[:, col]
    total = weights.sum()
    if not total > 0:
        raise DegenerateUpdate("predicted intensity of the observed side is zero")
    lam = state.lambdas.copy()
    bump = excitation_increment(volume, params.zeta, params.eta, params.excitation_scale)
    # same-side and opposite-side kernels coincide under this excitation law
    lam[:, 0] += bump
    lam[:, 1] += bump
    return FilterState(_renormalize(weights / total), lam, state.t)


def map_estimate(pi) -> int:
    """Most probable regime, numbered from 1; ties go to the lowest label."""
    return int(np.argmax(np.asarray(pi))) + 1


@dataclass
class FilterTrajectory:
    times: np.ndarray
    pi: np.ndarray  # (n, d)
    lambdas: np.ndarray  # (n, d, 2)
    is_event: np.ndarray  # bool (n,)

    def map_estimates(self) -> np.ndarray:
        return np.argmax(self.pi, axis=1) + 1

    def at(self, t: float) -> np.ndarray:
        """Posterior in force at time t (last row with time <= t)."""
        k = np.searchsorted(self.times, t, side="right") - 1
        return self.pi[max(k, 0)]


def run_filter(params: ModelParams, path, init: FilterState, output_grid=None) -> FilterTrajectory:
    """Filter an event path; rows at every grid time and after every order."""
    horizon = getattr(path, "horizon", params.horizon)
    grid = np.asarray([] if output_grid is None else output_grid, dtype=float)
    times, pis, lams, flags = [], [], [], []
    state = init

    def emit(s, is_event):
        times.append(s.t)
        pis.append(s.pi.copy())
        lams.append(s.lambdas.copy())
        flags.append(is_event)

    gi = 0
    emit(state, False)
    while gi < grid.size and grid[gi] <= state.t:
        gi += 1
    for tau, side, vol in zip(path.times, path.sides, path.volumes):
        while gi < grid.size and grid[gi] <= tau:
            state = filter_flow(params, state, grid[gi] - state.t)
            emit(state, False)
            gi += 1
        state = filter_flow(params, state, tau - state.t)
        state = filter_jump(params, state, side, vol)
        emit(state, True)
    while gi < grid.size and grid[gi] <= horizon:
        state = filter_flow(params, state, grid[gi] - state.t)
        emit(state, False)
        gi += 1
    return FilterTrajectory(np.array(times), np.array(pis), np.array(lams), np.array(flags))
