import io
import math

import numpy as np
import pytest
from scipy import integrate, stats

from hawkes_exec.model import ModelParams, impact_q, trade_cost
from hawkes_exec.regimeflow import Propagator
from hawkes_exec.simulate import (
    AdmissibilityError,
    EventPath,
    ExplosionError,
    Strategy,
    compensator_increments,
    read_path_csv,
    read_strategy_csv,
    realized_revenue,
    replay_intensities,
    roll_price,
    simulate_first_event,
    simulate_orderflow,
    simulate_path,
    simulate_regimes,
    write_path_csv,
    write_strategy_csv,
)


def single_poisson(lam_inf=1.0):
    return ModelParams(d=1, psi=[[0.0]], beta=1.0, lambda_inf=lam_inf, zeta=1.0,
                       kappa0_plus=lam_inf, kappa0_minus=lam_inf, excitation_scale=0.0)


def one_event(tau, side, vol, horizon=1.0):
    return EventPath(np.array([tau]), np.array([side]), np.array([vol]), np.array([1]), None, horizon)


def test_zero_generator_gives_constant_path():
    p = ModelParams(psi=[[0.0, 0.0], [0.0, 0.0]])
    rp = simulate_regimes(p, 50.0, seed=1, initial=2)
    assert rp.times.tolist() == [0.0] and rp.regimes.tolist() == [2]


def test_holding_times_and_occupancy():
    p = ModelParams()
    rp = simulate_regimes(p, 50_000.0, seed=2, initial=1)
    hold = rp.holding_times()
    assert hold.size > 9000
    se = hold.std(ddof=1) / math.sqrt(hold.size)
    assert abs(hold.mean() - 5.0) < 3 * se
    occ = rp.occupancy(2)
    assert abs(occ[0] - 0.5) < 3 / math.sqrt(hold.size)
    assert occ.sum() == pytest.approx(1.0)


def test_poisson_counts_long_horizon():
    p = single_poisson()
    path = simulate_path(p, 5, T=1000.0)
    for side in (1, -1):
        n = np.sum(path.sides == side)
        assert abs(n - 1000) < 3 * math.sqrt(1000)


def test_poisson_counts_mean_and_variance():
    p = single_poisson(2.0)
    T, lam = 5.0, 10.0
    counts = np.array([[np.sum(simulate_path(p, s, T=T).sides == side) for side in (1, -1)] for s in range(200)])
    for k in range(2):
        c = counts[:, k]
        assert abs(c.mean() - lam) < 3 * math.sqrt(lam / c.size)
        assert abs(c.var(ddof=1) - lam) < 3 * math.sqrt((lam + 2 * lam**2) / c.size)


def test_interarrival_ks_exponential():
    p = single_poisson()
    path = simulate_path(p, 9, T=2000.0)
    gaps = np.diff(np.concatenate([[0.0], path.times]))
    assert stats.kstest(gaps, "expon", args=(0, 1 / 2.0)).pvalue > 0.01


def test_time_rescaling_residuals_with_excitation():
    p = ModelParams(beta=3.0)
    res = []
    for seed in range(40):
        path = simulate_path(p, 700 + seed, T=50.0)
        res.append(compensator_increments(p, path))
    res = np.concatenate(res)
    assert res.size > 2000
    assert stats.kstest(res, "expon").pvalue > 0.01


def test_event_path_invariants_and_replay():
    p = ModelParams()
    for seed in range(10):
        path = simulate_path(p, seed)
        assert np.all(np.diff(path.times) > 0)
        assert np.all((path.times >= 0) & (path.times <= path.horizon))
        assert np.all(path.volumes > 0)
        np.testing.assert_array_equal(path.regimes, path.regime_path.at(path.times))
        np.testing.assert_allclose(replay_intensities(p, path), path.lambdas_pre, atol=1e-10, rtol=0)


def test_explosion_cap():
    p = ModelParams()
    rp = simulate_regimes(p, 1.0, seed=0, initial=1)
    with pytest.raises(ExplosionError, match="3"):
        simulate_orderflow(p, rp, 1.0, seed=0, max_events=3)


def test_same_seed_same_path():
    p = ModelParams()
    a, b = simulate_path(p, 42), simulate_path(p, 42)
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.volumes, b.volumes)


def test_pure_decay():
    p = ModelParams()
    traj = roll_price(p, EventPath.empty(1.0), Strategy.none(0.0), (10.0, 2.0))
    t = np.linspace(0, 1, 7)
    np.testing.assert_allclose(traj.deviation(t), 2 * np.exp(-0.1 * t))
    np.testing.assert_allclose(traj.price(t) - traj.deviation(t), 10.0)
    assert traj.tau_s == 1.0 and not traj.bankrupt


def test_buy_jump_split():
    p = ModelParams()
    traj = roll_price(p, one_event(0.4, 1, 1 / 3), Strategy.none(0.0), (10.0, 0.0))
    assert traj.s[-1] == pytest.approx(10.8)
    assert traj.d[-1] == pytest.approx(0.2)


def test_deterministic_bankruptcy_time():
    p = ModelParams(horizon=100.0)
    traj = roll_price(p, EventPath.empty(100.0), Strategy.none(0.0), (-1.0, 2.0))
    assert traj.tau_s == pytest.approx(10 * math.log(2))
    assert traj.bankrupt
    short = roll_price(p, EventPath.empty(1.0), Strategy.none(0.0), (-1.0, 2.0))
    assert short.tau_s == 1.0


def test_items_after_bankruptcy_are_ignored():
    p = ModelParams(horizon=20.0)
    path = one_event(8.0, 1, 5.0, horizon=20.0)
    strat = Strategy([9.0], [1.0], 1.0)
    traj = roll_price(p, path, strat, (-1.0, 2.0))
    assert traj.tau_s == pytest.approx(10 * math.log(2))
    assert traj.trades == [] and traj.inventory_left == 1.0
    # the remainder is liquidated at the bankruptcy price, which is zero
    rev = realized_revenue(p, path, strat, (-1.0, 2.0))
    assert rev == pytest.approx(trade_cost(0.0, 1.0), abs=1e-12)


def test_roll_price_is_bit_identical():
    p = ModelParams()
    path = simulate_path(p, 8)
    strat = Strategy([0.1, 0.5], [0.5, 0.5], 1.0)
    a = roll_price(p, path, strat, (10.0, 0.3))
    b = roll_price(p, path, strat, (10.0, 0.3))
    np.testing.assert_array_equal(a.s, b.s)
    np.testing.assert_array_equal(a.d, b.d)
    assert a.trades == b.trades


def test_admissibility():
    p = ModelParams()
    with pytest.raises(AdmissibilityError):
        roll_price(p, EventPath.empty(1.0), Strategy([0.1, 0.2], [0.7, 0.7], 1.0), (10.0, 0.0))
    with pytest.raises(AdmissibilityError):
        Strategy([0.5, 0.1], [0.1, 0.1], 1.0)


def test_revenue_examples():
    p = ModelParams()
    empty = EventPath.empty(1.0)
    assert realized_revenue(p, empty, Strategy([0.0], [2.0], 2.0), (10.0, 0.0)) == pytest.approx(trade_cost(10.0, 2.0))
    assert realized_revenue(p, simulate_path(p, 1), Strategy.none(0.0), (10.0, 0.0)) == 0.0


def test_split_trade_against_quadrature():
    p = ModelParams()
    c, e = p.lob_c, p.lob_e
    walk = lambda q: integrate.quad(lambda y: y * c * y ** (e - 1), 0, q, epsabs=1e-13)[0]  # noqa: E731
    one = realized_revenue(p, EventPath.empty(1.0), Strategy([0.0], [2.0], 2.0), (10.0, 0.0))
    two = realized_revenue(p, EventPath.empty(1.0), Strategy([0.0, 0.0], [1.0, 1.0], 2.0), (10.0, 0.0))
    q1 = impact_q(1.0)
    hand_one = 10.0 * 2 - walk(impact_q(2.0)) - p.c0
    hand_two = (10.0 - walk(q1) - p.c0) + ((10.0 - q1) - walk(q1) - p.c0)
    assert one == pytest.approx(hand_one, abs=1e-8)
    assert two == pytest.approx(hand_two, abs=1e-8)
    assert two < one


def test_terminal_liquidation_only_with_inventory():
    p = ModelParams()
    empty = EventPath.empty(1.0)
    full = realized_revenue(p, empty, Strategy([0.2], [1.0], 1.0), (10.0, 0.0))
    assert full == pytest.approx(trade_cost(10.0, 1.0))
    held = realized_revenue(p, empty, Strategy.none(1.0), (10.0, 0.0))
    assert held == pytest.approx(trade_cost(10.0, 1.0))


def test_revenue_linear_in_fundamental():
    p = ModelParams()
    for seed in range(5):
        path = simulate_path(p, 100 + seed)
        strat = Strategy([0.2, 0.6], [0.4, 0.3], 1.0)
        r1 = realized_revenue(p, path, strat, (20.0, 0.5))
        r2 = realized_revenue(p, path, strat, (35.0, 0.5))
        assert r2 - r1 == pytest.approx(1.0 * 15.0, abs=1e-9)


def test_survival_against_first_event_simulation():
    p = ModelParams()
    kp, km, mu = np.array([5.0, 1.0]), np.array([1.0, 5.0]), np.array([0.7, 0.3])
    n = 100_000
    t_evt, side, reg, _ = simulate_first_event(p, 0.0, kp, km, mu, n, seed=3, horizon=1.0)
    edges = np.linspace(0.0, 1.0, 6)
    prop = Propagator(p, 0.0, kp, km, mu, np.linspace(0, 1, 101), h_max=0.005)
    for u in (0.1, 0.25, 0.5):
        m = Propagator(p, 0.0, kp, km, mu, np.array([0.0, u]), h_max=0.005).survival[-1]
        freq = np.mean(t_evt > u)
        assert abs(freq - m) < 3 * math.sqrt(m * (1 - m) / n) + 1e-12
    # joint law of (bucket, side, regime at the order)
    cum = prop.cumulative  # (n_u, d, 2)
    for b in range(5):
        lo, hi = int(round(edges[b] * 100)), int(round(edges[b + 1] * 100))
        for i in range(2):
            for k, sgn in enumerate((1, -1)):
                prob = cum[hi, i, k] - cum[lo, i, k]
                hit = (t_evt > edges[b]) & (t_evt <= edges[b + 1]) & (side == sgn) & (reg == i + 1)
                freq = hit.mean()
                assert abs(freq - prob) < 3 * math.sqrt(prob * (1 - prob) / n) + 1e-4
    no_jump = t_evt == np.inf
    assert no_jump.mean() == pytest.approx(prop.survival[-1], abs=3 * math.sqrt(prop.survival[-1] / n))


def test_csv_roundtrip_and_errors():
    p = ModelParams()
    path = simulate_path(p, 4)
    buf = io.StringIO()
    write_path_csv(buf, p, path)
    buf.seek(0)
    back = read_path_csv(buf, 1.0)
    np.testing.assert_allclose(back.times, path.times, rtol=1e-8)
    np.testing.assert_array_equal(back.sides, path.sides)
    bad = io.StringIO("time,side,volume,regime,S,D,P\n0.1,buy,1,1,0,0,0\n0.2,hold,1,1,0,0,0\n")
    with pytest.raises(ValueError, match="line 3"):
        read_path_csv(bad, 1.0)
    sbuf = io.StringIO()
    write_strategy_csv(sbuf, Strategy([0.1, 0.4], [0.5, 0.5], 1.0))
    sbuf.seek(0)
    s = read_strategy_csv(sbuf, 1.0)
    np.testing.assert_allclose(s.sizes, [0.5, 0.5])
