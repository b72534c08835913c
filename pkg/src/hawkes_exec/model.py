"""Market parameters and closed-form primitives.

Impact, depth and execution cost for a power-law order book, intensity decay
of the Hawkes components, the mark-dependent excitation and mark moments, and
a stability report for the branching structure.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "ModelParams",
    "StabilityReport",
    "FullState",
    "ReducedState",
    "impact_q",
    "depth_v",
    "trade_cost",
    "impact_cost_coefficient",
    "intensity_flow",
    "excitation_increment",
    "mark_moments",
    "validate_stability",
    "reduce_state",
    "embed_state",
    "require_symmetric_pair",
    "UnsupportedConfiguration",
]


class UnsupportedConfiguration(ValueError):
    """Raised when an operation needs the symmetric two-regime set-up."""


def _vector(value, d: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(d, float(arr))
    if arr.shape != (d,):
        raise ValueError(f"{name} must have length {d}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full set of market parameters.

    Per-regime quantities (``beta``, ``lambda_inf``, ``zeta``, ``kappa0_*``)
    accept scalars, which are broadcast to all ``d`` regimes.
    """

    d: int = 2
    psi: np.ndarray = field(default_factory=lambda: np.array([[-0.2, 0.2], [0.2, -0.2]]))
    beta: np.ndarray = 0.5
    lambda_inf: np.ndarray = 1.0
    zeta: np.ndarray = 1.0
    eta: float = 0.05
    rho: float = 0.1
    nu: float = 0.8
    c0: float = 0.1
    lob_c: float = 1.0
    lob_e: float = 3.0
    horizon: float = 1.0
    kappa0_plus: np.ndarray = field(default_factory=lambda: np.array([5.0, 1.0]))
    kappa0_minus: np.ndarray = field(default_factory=lambda: np.array([1.0, 5.0]))
    excitation_scale: float = 1.0

    def __post_init__(self):
        d = int(self.d)
        if d < 1:
            raise ValueError("d must be a positive integer")
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("d", d)
        psi = np.asarray(self.psi, dtype=float)
        if psi.shape != (d, d):
            raise ValueError(f"psi must be {d}x{d}, got {psi.shape}")
        off = psi - np.diag(np.diag(psi))
        if np.any(off < 0):
            raise ValueError("psi off-diagonal entries must be >= 0")
        if np.any(np.abs(psi.sum(axis=1)) > 1e-9 * max(1.0, np.abs(psi).max())):
            raise ValueError("psi rows must sum to 0")
        set_("psi", psi)
        for name in ("beta", "lambda_inf", "zeta", "kappa0_plus", "kappa0_minus"):
            set_(name, _vector(getattr(self, name), d, name))
        for name in ("beta", "lambda_inf", "zeta"):
            if np.any(getattr(self, name) <= 0):
                raise ValueError(f"{name} must be > 0")
        for name in ("eta", "rho", "nu", "c0", "lob_c", "lob_e", "horizon", "excitation_scale"):
            set_(name, float(getattr(self, name)))
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0.0 <= self.nu <= 1.0:
            raise ValueError("nu must lie in [0, 1]")
        for name in ("rho", "c0", "lob_c", "lob_e", "horizon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.excitation_scale < 0:
            raise ValueError("excitation_scale must be >= 0")
        for name in ("kappa0_plus", "kappa0_minus"):
            if np.any(getattr(self, name) < self.lambda_inf):
                raise ValueError(f"{name} must be >= lambda_inf")

    def replace(self, **changes) -> "ModelParams":
        doc = self.to_dict()
        doc.update(changes)
        return ModelParams(**doc)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelParams":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown model parameter(s): {sorted(unknown)}")
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        return cls.from_dict(json.loads(text))

    @property
    def impact_coeff(self) -> float:
        return impact_cost_coefficient(self.lob_c, self.lob_e)


class FullState(NamedTuple):
    x: float
    s: float
    dev: float
    kappa_plus: np.ndarray
    kappa_minus: np.ndarray
    mu: np.ndarray


class ReducedState(NamedTuple):
    """Solver coordinates; regime-2 intensities are implied as ``(km, kp)``."""

    x: float
    dev: float
    kp: float
    km: float
    mu1: float


def impact_q(v, c: float = 1.0, e: float = 3.0):
    """Price displacement caused by walking ``v`` units into the book."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("volume must be >= 0")
    out = (e * v / c) ** (1.0 / e)
    return float(out) if out.ndim == 0 else out


def depth_v(dp, c: float = 1.0, e: float = 3.0):
    """Volume resting between the mid-price and a displacement ``dp``."""
    dp = np.asarray(dp, dtype=float)
    if np.any(dp < 0):
        raise ValueError("price displacement must be >= 0")
    out = c * dp**e / e
    return float(out) if out.ndim == 0 else out


def impact_cost_coefficient(c: float, e: float) -> float:
    """c' such that the book-walking cost of volume v is c' v^((e+1)/e)."""
    return c / (e + 1.0) * (e / c) ** ((e + 1.0) / e)


def trade_cost(p, v, c: float = 1.0, e: float = 3.0, c0: float = 0.1):
    """Cash received for selling ``v`` units at mid-price ``p``."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("volume must be >= 0")
    out = np.asarray(p, dtype=float) * v - impact_cost_coefficient(c, e) * v ** ((e + 1.0) / e) - c0
    return float(out) if out.ndim == 0 else out


def intensity_flow(kappa, lambda_inf, beta, dt):
    """Deterministic relaxation of an intensity towards its baseline."""
    return (np.asarray(kappa) - lambda_inf) * np.exp(-beta * np.asarray(dt)) + lambda_inf


def excitation_increment(v, zeta: float, eta: float, scale: float = 1.0):
    """Intensity jump caused by an order of volume ``v``.

    Normalised so that its mean under Exp(zeta) volumes equals ``scale``.
    """
    v = np.asarray(v, dtype=float)
    out = scale * zeta**eta * v**eta / math.gamma(1.0 + eta)
    return float(out) if out.ndim == 0 else out


def mark_moments(params: ModelParams, i: int = 0) -> tuple[float, float, float]:
    """(m1, m2, E[Q(V)]) for the exponential volume law of regime ``i``."""
    z = float(params.zeta[i])
    e, c = params.lob_e, params.lob_c
    eq = (e / c) ** (1.0 / e) * z ** (-1.0 / e) * math.gamma(1.0 + 1.0 / e)
    return 1.0 / z, 2.0 / z**2, eq


@dataclass(frozen=True)
class StabilityReport:
    m1: np.ndarray
    m2: np.ndarray
    mean_excitation: np.ndarray
    branching_radius: float
    a1_moments: bool
    a2_square_integrable: bool
    a3_subcritical: bool
    a4_kernel_moment: bool

    @property
    def stable(self) -> bool:
        return self.a1_moments and self.a2_square_integrable and self.a3_subcritical and self.a4_kernel_moment

    def to_dict(self) -> dict:
        return {
            "m1": self.m1.tolist(),
            "m2": self.m2.tolist(),
            "mean_excitation": self.mean_excitation.tolist(),
            "branching_radius": self.branching_radius,
            "A1": self.a1_moments,
            "A2": self.a2_square_integrable,
            "A3": self.a3_subcritical,
            "A4": self.a4_kernel_moment,
        }


def validate_stability(params: ModelParams, warn: bool = True) -> StabilityReport:
    """Branching-ratio diagnostics; warns but never rejects."""
    m1 = 1.0 / params.zeta
    m2 = 2.0 / params.zeta**2
    # unit mean under exponential marks, times the configurable multiplier
    mean_exc = np.full(params.d, params.excitation_scale)
    radii = []
    for i in range(params.d):
        b = np.full((2, 2), mean_exc[i] / params.beta[i])
        radii.append(np.max(np.abs(np.linalg.eigvals(b))))
    radius = float(max(radii))
    # second moment of the excitation, finite for every eta >= 0
    second = params.excitation_scale**2 * math.gamma(1 + 2 * params.eta) / math.gamma(1 + params.eta) ** 2
    report = StabilityReport(
        m1=m1,
        m2=m2,
        mean_excitation=mean_exc,
        branching_radius=radius,
        a1_moments=bool(np.all(np.isfinite(m1)) and np.all(np.isfinite(m2))),
        a2_square_integrable=bool(np.isfinite(second)),
        a3_subcritical=radius < 1.0,
        a4_kernel_moment=bool(np.all(np.isfinite(mean_exc / params.beta**2))),
    )
    if warn and not report.a3_subcritical:
        warnings.warn(
            f"branching radius {radius:.4g} >= 1: the order flow is supercritical; "
            "finite-horizon runs proceed but may explode",
            RuntimeWarning,
            stacklevel=2,
        )
    return report


def require_symmetric_pair(params: ModelParams) -> None:
    """Check that regime 2 mirrors regime 1 so the reduced coordinates apply."""
    if params.d != 2:
        raise UnsupportedConfiguration("reduced coordinates need exactly two regimes")
    for name in ("beta", "lambda_inf", "zeta"):
        a = getattr(params, name)
        if not np.isclose(a[0], a[1]):
            raise UnsupportedConfiguration(f"{name} must coincide across regimes")


def reduce_state(full: FullState | Sequence, tol: float = 1e-12) -> tuple[ReducedState, float]:
    """Drop ``s`` and the mirrored regime-2 intensities; returns (state, s)."""
    x, s, dev, kplus, kminus, mu = full
    kplus, kminus, mu = (np.asarray(a, dtype=float) for a in (kplus, kminus, mu))
    if kplus.shape != (2,) or kminus.shape != (2,) or mu.shape != (2,):
        raise UnsupportedConfiguration("reduced coordinates need exactly two regimes")
    if abs(kplus[1] - kminus[0]) > tol or abs(kminus[1] - kplus[0]) > tol:
        raise UnsupportedConfiguration("regime-2 intensities must mirror regime 1")
    return ReducedState(float(x), float(dev), float(kplus[0]), float(kminus[0]), float(mu[0])), float(s)


def embed_state(reduced: ReducedState, s_ref: float) -> FullState:
    x, dev, kp, km, mu1 = reduced
    return FullState(
        float(x), float(s_ref), float(dev), np.array([kp, km]), np.array([km, kp]), np.array([mu1, 1.0 - mu1])
    )
