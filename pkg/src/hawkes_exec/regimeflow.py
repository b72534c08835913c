"""Deterministic behaviour of the market before its next order arrives.

Starting from intensities ``kappa`` and regime law ``mu`` at time ``t``, the
row vector ``m_i(t,u) = P(no order in (t,u], I_u = i)`` solves the linear ODE
``m' = m (psi - diag(lam_plus(u) + lam_minus(u)))``.  Alongside it we integrate
the cumulative probabilities ``D_i^k(u) = P(first order in (t,u], side k,
regime i at that moment)``; since the augmented system conserves total mass and
RK4 preserves linear invariants, ``sum m + sum D = 1`` holds to round-off.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .model import ModelParams, ReducedState, intensity_flow

__all__ = [
    "Propagator",
    "survival_vector",
    "jump_density",
    "survival_split",
    "pre_jump_flow",
    "deterministic_bankruptcy",
    "DegenerateConditioning",
]

DEFAULT_H_MAX = 0.01


class DegenerateConditioning(ArithmeticError):
    pass


def _psi_of(params: ModelParams, psi) -> Callable[[float], np.ndarray]:
    if psi is None:
        const = params.psi
        return lambda u: const
    if callable(psi):
        return psi
    const = np.asarray(psi, dtype=float)
    return lambda u: const


def _intensities(params, t, kplus, kminus, u):
    """Pre-jump intensities at time u, shape (..., d, 2) with side order (+, -)."""
    dt = u - t
    lp = intensity_flow(kplus, params.lambda_inf, params.beta, dt)
    lm = intensity_flow(kminus, params.lambda_inf, params.beta, dt)
    return np.stack([lp, lm], axis=-1)


class Propagator:
    """Survival vector and cumulative first-jump probabilities on a time grid.

    ``kappa_plus``/``kappa_minus`` have shape (..., d); ``mu`` has shape
    (..., d) or (..., r, d) for several initial laws at once (an identity
    matrix yields the transition kernel itself).
    """

    def __init__(self, params: ModelParams, t: float, kappa_plus, kappa_minus, mu, u_grid,
                 h_max: float = DEFAULT_H_MAX, psi=None):
        self.params = params
        self.t = float(t)
        u_grid = np.asarray(u_grid, dtype=float)
        if u_grid.ndim != 1 or u_grid[0] != self.t or np.any(np.diff(u_grid) < 0):
            raise ValueError("u_grid must start at t and be nondecreasing")
        self.u = u_grid
        self.kappa_plus = np.asarray(kappa_plus, dtype=float)
        self.kappa_minus = np.asarray(kappa_minus, dtype=float)
        mu = np.asarray(mu, dtype=float)
        self.multi = mu.ndim == self.kappa_plus.ndim + 1
        kp = self.kappa_plus[..., None, :] if self.multi else self.kappa_plus
        km = self.kappa_minus[..., None, :] if self.multi else self.kappa_minus
        psi_fn = _psi_of(params, psi)

        def rhs(u, m):
            lam = _intensities(params, self.t, kp, km, u)
            dm = m @ psi_fn(u) - m * lam.sum(axis=-1)
            return dm, m[..., None] * lam

        d = params.d
        m = np.broadcast_to(mu, np.broadcast_shapes(mu.shape, kp.shape)).astype(float).copy()
        cum = np.zeros(m.shape + (2,))
        ms = np.empty((u_grid.size,) + m.shape)
        cs = np.empty((u_grid.size,) + cum.shape)
        ms[0], cs[0] = m, cum
        for n in range(1, u_grid.size):
            a, b = u_grid[n - 1], u_grid[n]
            steps = max(1, math.ceil((b - a) / h_max - 1e-12)) if b > a else 0
            h = (b - a) / steps if steps else 0.0
            for j in range(steps):
                s = a + j * h
                k1m, k1c = rhs(s, m)
                k2m, k2c = rhs(s + h / 2, m + h / 2 * k1m)
                k3m, k3c = rhs(s + h / 2, m + h / 2 * k2m)
                k4m, k4c = rhs(s + h, m + h * k3m)
                m = m + h / 6 * (k1m + 2 * k2m + 2 * k3m + k4m)
                cum = cum + h / 6 * (k1c + 2 * k2c + 2 * k3c + k4c)
            ms[n], cs[n] = m, cum
        self.m = ms
        self.cumulative = cs
        self.d = d

    def intensities(self, n=None):
        """Pre-jump intensities at the grid nodes, shape (n_u, ..., d, 2)."""
        u = self.u if n is None else self.u[n]
        u = np.asarray(u).reshape((-1,) + (1,) * self.kappa_plus.ndim)
        return _intensities(self.params, self.t, self.kappa_plus, self.kappa_minus, u)

    @property
    def survival(self) -> np.ndarray:
        return self.m.sum(axis=-1)

    @property
    def density(self) -> np.ndarray:
        """Jump densities d_i^k at the grid nodes, shape (n_u, ..., d, 2)."""
        lam = self.intensities()
        if self.multi:
            lam = lam[..., None, :, :]
        return self.m[..., None] * lam

    def conditional_law(self) -> np.ndarray:
        """P(I_u = i | no order in (t, u]) at the grid nodes."""
        total = self.m.sum(axis=-1, keepdims=True)
        if np.any(total <= 0):
            raise DegenerateConditioning("survival probability vanished")
        return self.m / total

    def total_mass(self) -> np.ndarray:
        return self.m.sum(axis=-1) + self.cumulative.sum(axis=(-2, -1))


def survival_vector(params: ModelParams, t, u, kappa_plus, kappa_minus, mu,
                    h_max: float = DEFAULT_H_MAX, psi=None) -> np.ndarray:
    if u < t:
        raise ValueError("u must be >= t")
    prop = Propagator(params, t, kappa_plus, kappa_minus, mu, [t, u], h_max=h_max, psi=psi)
    return prop.m[-1]


def jump_density(params: ModelParams, t, r, kappa_plus, kappa_minus, mu,
                 h_max: float = DEFAULT_H_MAX, psi=None) -> np.ndarray:
    """d_i^k(r) = m_i(t, r) * lambda^{i,k}(r); shape (d, 2) with sides (+, -)."""
    m = survival_vector(params, t, r, kappa_plus, kappa_minus, mu, h_max=h_max, psi=psi)
    lam = _intensities(params, t, np.asarray(kappa_plus, float), np.asarray(kappa_minus, float), r)
    return m[..., None] * lam


def survival_split(params: ModelParams, t, u_grid, kappa_plus, kappa_minus, mu,
                   h_max: float = DEFAULT_H_MAX, tail: float | None = None, psi=None) -> np.ndarray:
    """m_i^k(t,u) = P(no order in (t,u], I_u = i, first order is of side k).

    Computed as m_i(t,u) * h_i^k(u) where h^k solves the backward equation
    ``h' = -lam^k - (psi - Lambda) h`` from a distant horizon where it vanishes.
    Returns shape (n_u, d, 2).
    """
    u_grid = np.asarray(u_grid, dtype=float)
    kp = np.asarray(kappa_plus, float)
    km = np.asarray(kappa_minus, float)
    psi_fn = _psi_of(params, psi)
    if tail is None:
        tail = 40.0 / float(np.min(2 * params.lambda_inf))
    end = u_grid[-1] + tail

    def rhs(s, h):
        lam = _intensities(params, t, kp, km, s)
        total = lam.sum(axis=-1)
        return -lam - (psi_fn(s) @ h - total[:, None] * h)

    # integrate backwards on a grid that contains every requested node
    knots = np.concatenate([u_grid, [end]])
    h = np.zeros((params.d, 2))
    hs = np.empty((u_grid.size, params.d, 2))
    for n in range(knots.size - 1, 0, -1):
        b, a = knots[n], knots[n - 1]
        steps = max(1, math.ceil((b - a) / h_max - 1e-12)) if b > a else 0
        dt = (b - a) / steps if steps else 0.0
        for j in range(steps):
            s = b - j * dt
            k1 = rhs(s, h)
            k2 = rhs(s - dt / 2, h - dt / 2 * k1)
            k3 = rhs(s - dt / 2, h - dt / 2 * k2)
            k4 = rhs(s - dt, h - dt * k3)
            h = h - dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        hs[n - 1] = h
    prop = Propagator(params, t, kp, km, mu, np.concatenate([[t], u_grid]) if u_grid[0] != t else u_grid,
                      h_max=h_max, psi=psi)
    m = prop.m[1:] if u_grid[0] != t else prop.m
    return m[..., None] * hs


def deterministic_bankruptcy(s_ref: float, dev: float, t: float, rho: float, horizon: float) -> float:
    """First time the price ``s_ref + dev * exp(-rho (u - t))`` drops below zero, capped at the horizon."""
    if s_ref + dev <= 0:
        return float(t)
    if s_ref >= 0:
        return float(horizon)
    return float(min(t + math.log(-dev / s_ref) / rho, horizon))


def pre_jump_flow(params: ModelParams, t: float, u: float, state: ReducedState,
                  h_max: float = DEFAULT_H_MAX) -> tuple[ReducedState, np.ndarray]:
    """Reduced state carried to ``u`` along the no-order branch, with the conditional regime law."""
    if u < t:
        raise ValueError("u must be >= t")
    x, dev, kp, km, mu1 = state
    kplus = np.array([kp, km])
    kminus = np.array([km, kp])
    m = survival_vector(params, t, u, kplus, kminus, np.array([mu1, 1.0 - mu1]), h_max=h_max)
    total = m.sum()
    if total <= 0:
        raise DegenerateConditioning("survival probability vanished")
    law = m / total
    dt = u - t
    lam_inf, beta = params.lambda_inf[0], params.beta[0]
    flowed = ReducedState(
        x,
        dev * math.exp(-params.rho * dt),
        float(intensity_flow(kp, lam_inf, beta, dt)),
        float(intensity_flow(km, lam_inf, beta, dt)),
        float(law[0]),
    )
    return flowed, law
