"""Regime paths, marked Hawkes order flow, controlled prices and realized revenue."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, excitation_increment, impact_q, intensity_flow, trade_cost

__all__ = [
    "RegimePath",
    "EventPath",
    "Strategy",
    "PriceTrajectory",
    "ExplosionError",
    "AdmissibilityError",
    "simulate_regimes",
    "simulate_orderflow",
    "simulate_path",
    "simulate_first_event",
    "replay_intensities",
    "compensator_increments",
    "roll_price",
    "uncontrolled_prices",
    "realized_revenue",
    "write_path_csv",
    "read_path_csv",
    "write_strategy_csv",
    "read_strategy_csv",
]

DEFAULT_MAX_EVENTS = 1_000_000
BOUND_FACTOR = 1.1
FLOAT_FMT = "{:.9g}"


class ExplosionError(RuntimeError):
    pass


class AdmissibilityError(ValueError):
    pass


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class RegimePath:
    """Piecewise-constant regime labels (1..d); ``regimes[k]`` holds on [times[k], times[k+1])."""

    times: np.ndarray
    regimes: np.ndarray
    horizon: float

    def at(self, t):
        k = np.searchsorted(self.times, t, side="right") - 1
        return self.regimes[np.maximum(k, 0)]

    def holding_times(self) -> np.ndarray:
        """Completed sojourn lengths (the last, censored one is dropped)."""
        return np.diff(self.times)

    def occupancy(self, d: int) -> np.ndarray:
        ends = np.append(self.times[1:], self.horizon)
        occ = np.zeros(d)
        np.add.at(occ, self.regimes - 1, ends - self.times)
        return occ / self.horizon


@dataclass
class EventPath:
    times: np.ndarray
    sides: np.ndarray  # +1 buy, -1 sell
    volumes: np.ndarray
    regimes: np.ndarray  # label of the active regime at each order
    regime_path: RegimePath | None
    horizon: float
    seed: int | None = None
    lambdas_pre: np.ndarray | None = None  # (n, d, 2) intensities just before each order
    kappa0: np.ndarray | None = None  # (d, 2)

    def __len__(self):
        return self.times.size

    @classmethod
    def empty(cls, horizon: float) -> "EventPath":
        z = np.zeros(0)
        return cls(z, z.astype(int), z, z.astype(int), None, horizon)


@dataclass
class Strategy:
    times: np.ndarray
    sizes: np.ndarray
    inventory: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.sizes = np.asarray(self.sizes, dtype=float)
        if self.times.shape != self.sizes.shape:
            raise ValueError("times and sizes must have equal length")
        if np.any(np.diff(self.times) < 0):
            raise AdmissibilityError("intervention times must be nondecreasing")
        if np.any(self.sizes < 0):
            raise AdmissibilityError("intervention sizes must be >= 0")

    @classmethod
    def none(cls, inventory: float) -> "Strategy":
        return cls(np.zeros(0), np.zeros(0), inventory)


@dataclass
class PriceTrajectory:
    """Piecewise description of S and D; ``s[k], d[k]`` hold just after ``times[k]``."""

    times: np.ndarray
    s: np.ndarray
    d: np.ndarray
    rho: float
    tau_s: float
    bankrupt: bool
    trades: list = field(default_factory=list)  # (time, size, price before the trade)
    inventory_left: float = 0.0
    price_at_tau: float = 0.0

    def price(self, t):
        t = np.asarray(t, dtype=float)
        k = np.maximum(np.searchsorted(self.times, t, side="right") - 1, 0)
        return self.s[k] + self.d[k] * np.exp(-self.rho * (t - self.times[k]))

    def deviation(self, t):
        t = np.asarray(t, dtype=float)
        k = np.maximum(np.searchsorted(self.times, t, side="right") - 1, 0)
        return self.d[k] * np.exp(-self.rho * (t - self.times[k]))


def simulate_regimes(params: ModelParams, T: float, seed=None, initial=None) -> RegimePath:
    """Continuous-time Markov chain path; ``initial`` is a label or a probability vector."""
    rng = _rng(seed)
    d = params.d
    if initial is None:
        initial = np.full(d, 1.0 / d)
    if np.ndim(initial) == 0:
        cur = int(initial) - 1
    else:
        cur = int(rng.choice(d, p=np.asarray(initial, dtype=float)))
    times, regs = [0.0], [cur + 1]
    t = 0.0
    psi = params.psi
    while True:
        rate = -psi[cur, cur]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t >= T:
            break
        probs = psi[cur].clip(min=0.0)
        probs[cur] = 0.0
        cur = int(rng.choice(d, p=probs / probs.sum()))
        times.append(t)
        regs.append(cur + 1)
    return RegimePath(np.array(times), np.array(regs, dtype=int), float(T))


def simulate_orderflow(params: ModelParams, regime_path: RegimePath, T: float, seed=None,
                       max_events: int = DEFAULT_MAX_EVENTS) -> EventPath:
    """Ogata thinning for the regime-modulated marked Hawkes order flow.

    Every regime carries its own pair of intensities; all of them are excited by
    each accepted order, while only the active regime's pair drives arrivals.
    """
    rng = _rng(seed)
    lam_inf = params.lambda_inf[:, None]
    beta = params.beta[:, None]
    lam = np.stack([params.kappa0_plus, params.kappa0_minus], axis=1).astype(float)
    kappa0 = lam.copy()
    switch_times = list(regime_path.times[1:]) + [math.inf]
    seg = 0
    t = 0.0
    times, sides, vols, regs, pre = [], [], [], [], []
    while True:
        bound = BOUND_FACTOR * np.maximum(lam, lam_inf).sum(axis=1).max()
        cand = t + rng.exponential(1.0 / bound)
        nxt = switch_times[seg]
        if cand >= nxt:
            # the switch wins ties; restart the race from the switch time
            if nxt >= T:
                break
            lam = intensity_flow(lam, lam_inf, beta, nxt - t)
            t = nxt
            seg += 1
            continue
        if cand > T:
            break
        lam = intensity_flow(lam, lam_inf, beta, cand - t)
        t = cand
        r = regime_path.regimes[seg] - 1
        total = lam[r].sum()
        u = rng.uniform() * bound
        if u >= total:
            continue
        side = 1 if u < lam[r, 0] else -1
        vol = rng.exponential(1.0 / params.zeta[r])
        times.append(t)
        sides.append(side)
        vols.append(vol)
        regs.append(r + 1)
        pre.append(lam.copy())
        if len(times) > max_events:
            raise ExplosionError(f"event count exceeded the cap of {max_events} events")
        bump = excitation_increment(vol, params.zeta, params.eta, params.excitation_scale)
        lam = lam + bump[:, None]
    d = params.d
    return EventPath(
        np.array(times),
        np.array(sides, dtype=int),
        np.array(vols),
        np.array(regs, dtype=int),
        regime_path,
        float(T),
        seed if isinstance(seed, (int, np.integer)) else None,
        np.array(pre).reshape(-1, d, 2),
        kappa0,
    )


def simulate_path(params: ModelParams, seed: int, initial=None, T: float | None = None,
                  max_events: int = DEFAULT_MAX_EVENTS) -> EventPath:
    """Regimes and order flow for one path from a single private RNG stream."""
    T = params.horizon if T is None else T
    rng = np.random.default_rng(seed)
    regimes = simulate_regimes(params, T, rng, initial)
    path = simulate_orderflow(params, regimes, T, rng, max_events=max_events)
    path.seed = int(seed)
    return path


def replay_intensities(params: ModelParams, path: EventPath, kappa0=None) -> np.ndarray:
    """Pre-order intensities reconstructed from the observed orders alone, shape (n, d, 2)."""
    lam_inf = params.lambda_inf[:, None]
    beta = params.beta[:, None]
    lam = np.stack([params.kappa0_plus, params.kappa0_minus], axis=1) if kappa0 is None else np.array(kappa0)
    out = np.empty((len(path), params.d, 2))
    t = 0.0
    for n, (tau, vol) in enumerate(zip(path.times, path.volumes)):
        lam = intensity_flow(lam, lam_inf, beta, tau - t)
        out[n] = lam
        lam = lam + excitation_increment(vol, params.zeta, params.eta, params.excitation_scale)[:, None]
        t = tau
    return out


def compensator_increments(params: ModelParams, path: EventPath) -> np.ndarray:
    """Integrated realized intensity between consecutive orders (time-rescaling residuals)."""
    if path.regime_path is None:
        raise ValueError("the regime path is needed to integrate the realized intensity")
    lam_inf = params.lambda_inf
    beta = params.beta
    lam = np.stack([params.kappa0_plus, params.kappa0_minus], axis=1).sum(axis=1)
    rp = path.regime_path
    knots = np.concatenate([rp.times, [path.horizon]])
    out = np.empty(len(path))
    t = 0.0
    acc = 0.0
    for n, (tau, vol) in enumerate(zip(path.times, path.volumes)):
        # integrate the active regime's total intensity over (t, tau], segment by segment
        a = t
        while a < tau:
            k = np.searchsorted(knots, a, side="right") - 1
            b = min(knots[k + 1], tau)
            r = rp.regimes[k] - 1
            excess = lam[r] - 2 * lam_inf[r]
            acc += 2 * lam_inf[r] * (b - a) + excess * (1 - math.exp(-beta[r] * (b - a))) / beta[r]
            lam = 2 * lam_inf + (lam - 2 * lam_inf) * np.exp(-beta * (b - a))
            a = b
        out[n] = acc
        acc = 0.0
        lam = lam + 2 * excitation_increment(vol, params.zeta, params.eta, params.excitation_scale)
        t = tau
    return out


def simulate_first_event(params: ModelParams, t: float, kappa_plus, kappa_minus, mu, n: int,
                         seed=None, horizon: float | None = None):
    """Batch simulation of the first order after ``t`` (vectorized over paths).

    Returns ``(time, side, regime, volume)``.  ``regime`` is the label active at
    the order, or at the horizon for paths without an order; those paths have
    ``time = inf`` and ``side = 0``.
    """
    rng = _rng(seed)
    horizon = params.horizon if horizon is None else horizon
    d = params.d
    kp = np.asarray(kappa_plus, float)
    km = np.asarray(kappa_minus, float)
    lam_inf, beta = params.lambda_inf, params.beta
    regime = rng.choice(d, size=n, p=np.asarray(mu, float))
    now = np.full(n, float(t))
    out_time = np.full(n, np.inf)
    out_side = np.zeros(n, dtype=int)
    out_vol = np.zeros(n)
    active = np.ones(n, dtype=bool)
    bound = BOUND_FACTOR * (np.maximum(kp, lam_inf) + np.maximum(km, lam_inf)).max()
    leave = -np.diag(params.psi)
    while active.any():
        idx = np.flatnonzero(active)
        r = regime[idx]
        rate_switch = leave[r]
        total = bound + rate_switch
        step = rng.exponential(1.0, size=idx.size) / total
        cand = now[idx] + step
        done = cand > horizon
        now[idx] = np.minimum(cand, horizon)
        active[idx[done]] = False
        live = ~done
        idx, r, cand = idx[live], r[live], cand[live]
        u = rng.uniform(size=idx.size) * (bound + rate_switch[live])
        dt = cand - t
        lp = intensity_flow(kp[r], lam_inf[r], beta[r], dt)
        lm = intensity_flow(km[r], lam_inf[r], beta[r], dt)
        is_switch = u >= bound
        buy = u < lp
        sell = (~buy) & (u < lp + lm)
        hit = buy | sell
        # regime switch
        sw = idx[is_switch]
        if sw.size:
            probs = params.psi[regime[sw]].clip(min=0.0)
            probs[np.arange(sw.size), regime[sw]] = 0.0
            probs /= probs.sum(axis=1, keepdims=True)
            cum = probs.cumsum(axis=1)
            draw = rng.uniform(size=sw.size)[:, None]
            regime[sw] = np.minimum((draw > cum).sum(axis=1), d - 1)
        h = idx[hit]
        out_time[h] = cand[hit]
        out_side[h] = np.where(buy[hit], 1, -1)
        out_vol[h] = rng.exponential(1.0, size=h.size) / params.zeta[regime[h]]
        active[h] = False
    return out_time, out_side, regime + 1, out_vol


def roll_price(params: ModelParams, path: EventPath, strategy: Strategy, init) -> PriceTrajectory:
    """Exact piecewise price under the order flow and our own trades.

    Orders are processed before trades stamped with the same time.  Everything
    after the bankruptcy time is ignored; trades at that time still execute.
    """
    s0, d0 = init
    rho, nu, c, e = params.rho, params.nu, params.lob_c, params.lob_e
    T = path.horizon
    items = [(tau, 0, side, vol) for tau, side, vol in zip(path.times, path.sides, path.volumes)]
    items += [(tau, 1, 0, xi) for tau, xi in zip(strategy.times, strategy.sizes)]
    items.sort(key=lambda it: (it[0], it[1]))
    t_last = 0.0
    S, D = float(s0), float(d0)
    times, ss, ds = [0.0], [S], [D]
    trades = []
    inventory = float(strategy.inventory)
    tau_s = None
    if S + D < 0:
        tau_s = 0.0

    def crossing(a, b):
        # first root of S + D exp(-rho (u - a)) on (a, b] when S < 0 < S + D
        if S < 0 < S + D:
            tc = a + math.log(-D / S) / rho
            if tc <= b:
                return tc
        return None

    for tau, kind, side, amount in items:
        if tau_s is not None and tau > tau_s:
            break
        if tau_s is None:
            tc = crossing(t_last, tau)
            if tc is not None and tc < tau:
                D *= math.exp(-rho * (tc - t_last))
                t_last = tc
                tau_s = tc
                times.append(tc)
                ss.append(S)
                ds.append(D)
                continue
        if tau > T:
            break
        D *= math.exp(-rho * (tau - t_last))
        t_last = tau
        if kind == 0:
            if tau_s is not None:
                continue
            q = impact_q(amount, c, e)
            S += side * nu * q
            D += side * (1 - nu) * q
        else:
            if amount > inventory + 1e-12:
                raise AdmissibilityError(f"trade of {amount} exceeds remaining inventory {inventory}")
            amount = min(amount, inventory)
            trades.append((tau, amount, S + D))
            inventory -= amount
            q = impact_q(amount, c, e)
            S -= nu * q
            D -= (1 - nu) * q
        times.append(tau)
        ss.append(S)
        ds.append(D)
        if tau_s is None and S + D < 0:
            tau_s = tau
    if tau_s is None:
        tc = crossing(t_last, T)
        tau_s = T if tc is None else tc
    bankrupt = tau_s < T or (S + D * math.exp(-rho * (tau_s - t_last)) < 0)
    price_at_tau = S + D * math.exp(-rho * (tau_s - t_last))
    return PriceTrajectory(
        np.array(times), np.array(ss), np.array(ds), rho, float(tau_s), bool(bankrupt), trades,
        inventory, float(price_at_tau),
    )


def realized_revenue(params: ModelParams, path: EventPath, strategy: Strategy, init) -> float:
    """Cash from all trades up to bankruptcy plus liquidation of any remainder then."""
    traj = roll_price(params, path, strategy, init)
    c, e, c0 = params.lob_c, params.lob_e, params.c0
    total = sum(trade_cost(p, xi, c, e, c0) for _, xi, p in traj.trades)
    if traj.inventory_left > 0:
        total += trade_cost(traj.price_at_tau, traj.inventory_left, c, e, c0)
    return float(total)


def _fmt(v) -> str:
    return FLOAT_FMT.format(v)


def uncontrolled_prices(params: ModelParams, path: EventPath, init) -> tuple[np.ndarray, np.ndarray]:
    """S and D just after each order when nobody else trades."""
    S, D = float(init[0]), float(init[1])
    t = 0.0
    out_s, out_d = np.empty(len(path)), np.empty(len(path))
    for k, (tau, side, vol) in enumerate(zip(path.times, path.sides, path.volumes)):
        q = impact_q(vol, params.lob_c, params.lob_e)
        D = D * math.exp(-params.rho * (tau - t)) + side * (1 - params.nu) * q
        S += side * params.nu * q
        out_s[k], out_d[k] = S, D
        t = tau
    return out_s, out_d


def write_path_csv(fh, params: ModelParams, path: EventPath, init=(10.0, 0.0)) -> None:
    """One row per order with the price just after it."""
    ss, ds = uncontrolled_prices(params, path, init)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["time", "side", "volume", "regime", "S", "D", "P"])
    for k, (tau, side, vol, reg) in enumerate(zip(path.times, path.sides, path.volumes, path.regimes)):
        w.writerow([_fmt(tau), "buy" if side > 0 else "sell", _fmt(vol), int(reg),
                    _fmt(ss[k]), _fmt(ds[k]), _fmt(ss[k] + ds[k])])


def read_path_csv(fh, horizon: float) -> EventPath:
    rows = list(csv.reader(fh))
    if not rows or rows[0][:4] != ["time", "side", "volume", "regime"]:
        raise ValueError("line 1: expected header starting with time,side,volume,regime")
    times, sides, vols, regs = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            times.append(float(row[0]))
            if row[1] not in ("buy", "sell"):
                raise ValueError(f"bad side {row[1]!r}")
            sides.append(1 if row[1] == "buy" else -1)
            vols.append(float(row[2]))
            regs.append(int(row[3]) if row[3] else 0)
        except (ValueError, IndexError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    times = np.array(times)
    if np.any(np.diff(times) <= 0):
        raise ValueError("event times must be strictly increasing")
    return EventPath(times, np.array(sides, dtype=int), np.array(vols), np.array(regs, dtype=int), None,
                     float(horizon))


def write_strategy_csv(fh, strategy: Strategy) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["time", "size"])
    for tau, xi in zip(strategy.times, strategy.sizes):
        w.writerow([_fmt(tau), _fmt(xi)])


def read_strategy_csv(fh, inventory: float) -> Strategy:
    rows = list(csv.reader(fh))
    if not rows or rows[0] != ["time", "size"]:
        raise ValueError("line 1: expected header time,size")
    data = [(float(r[0]), float(r[1])) for r in rows[1:]]
    return Strategy([a for a, _ in data], [b for _, b in data], inventory)
