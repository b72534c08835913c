"""Independent reference computations shared by the solver and acceptance tests."""
import math

import numpy as np
from scipy import integrate, linalg

from hawkes_exec.model import ModelParams, ReducedState, excitation_increment, impact_cost_coefficient, impact_q
from hawkes_exec.simulate import simulate_first_event
from hawkes_exec.solver import intervene


def toy_params() -> ModelParams:
    """One effective regime (no switching, start in regime 1), no excitation, rare orders."""
    return ModelParams(psi=[[0.0, 0.0], [0.0, 0.0]], lambda_inf=0.05, beta=0.5, excitation_scale=0.0,
                       kappa0_plus=[0.4, 0.05], kappa0_minus=[0.05, 0.4])


def _first_order_masses(params, kp, km, a, b):
    """P(no order in (a,b]) and P(first order in (a,b] is a buy / a sell), regime 1, no excitation."""
    lam_inf, beta = float(params.lambda_inf[0]), float(params.beta[0])

    def integrated(k, s):
        return lam_inf * s + (k - lam_inf) * (1 - math.exp(-beta * s)) / beta

    h = b - a
    none = math.exp(-integrated(kp, h) - integrated(km, h))
    # split the jump mass by the share of each side's integrated intensity
    share = integrated(kp, h) / (integrated(kp, h) + integrated(km, h))
    return none, (1 - none) * share, (1 - none) * (1 - share)


def _equal_mass_marks(params, n):
    """Impacts of n equal-probability volume bins, each at its exact conditional mean of Q."""
    zeta = float(params.zeta[0])
    edges = np.concatenate([-np.log1p(-np.arange(n) / n) / zeta, [np.inf]])
    density = lambda v: zeta * math.exp(-zeta * v)  # noqa: E731
    q = [n * integrate.quad(lambda v: impact_q(v, params.lob_c, params.lob_e) * density(v), a, b)[0]
         for a, b in zip(edges[:-1], edges[1:])]
    return np.array(q), np.full(n, 1.0 / n)


def brute_force_value(params, x0, dev0, kp0, km0, n_steps, lots, max_orders=2, n_marks=4):
    """Exhaustive tree over trade sizes (multiples of x0/lots) at the lattice times.

    Between lattice times at most one order arrives; the seller reacts at the
    next lattice time.  At most ``max_orders`` orders in total.  Infeasible
    sizes and impossible outcomes are pruned.  Returns the reduced value g at
    time 0.
    """
    h = params.horizon / n_steps
    nu, rho, c, e, c0 = params.nu, params.rho, params.lob_c, params.lob_e, params.c0
    cp = impact_cost_coefficient(c, e)
    p = (e + 1) / e
    q_marks, w = _equal_mass_marks(params, n_marks)
    lam_inf, beta = float(params.lambda_inf[0]), float(params.beta[0])
    step = x0 / lots

    lots_left = np.array([lots])
    dev = np.array([dev0], float)
    used = np.array([0])
    levels = []
    for k in range(n_steps):
        kp = lam_inf + (kp0 - lam_inf) * math.exp(-beta * k * h)
        km = lam_inf + (km0 - lam_inf) * math.exp(-beta * k * h)
        none, pbuy, psell = _first_order_masses(params, kp, km, 0.0, h)
        # branches (node, lots sold now)
        node, sold = [], []
        for n_sold in range(lots + 1):
            ok = np.flatnonzero(lots_left >= n_sold)
            node.append(ok)
            sold.append(np.full(ok.size, n_sold))
        node, sold = np.concatenate(node), np.concatenate(sold)
        x = lots_left[node] * step
        xi = sold * step
        q = impact_q(xi, c, e)
        gain = np.where(sold > 0, dev[node] * xi - cp * xi**p - c0 - nu * q * (x - xi), 0.0)
        x_after = (lots_left[node] - sold) * step
        dev_after = (dev[node] - (1 - nu) * q) * math.exp(-rho * h)
        # outcomes per branch: no order, or one order of a given side and mark
        can_jump = used[node] < max_orders
        br, prob, cash, ndev, nused = [], [], [], [], []
        idx = np.arange(node.size)
        br.append(idx)
        prob.append(np.where(can_jump, none, 1.0))
        cash.append(np.zeros(node.size))
        ndev.append(dev_after)
        nused.append(used[node])
        jidx = idx[can_jump]
        for side, ps in ((1, pbuy), (-1, psell)):
            for qv, wt in zip(q_marks, w):
                br.append(jidx)
                prob.append(np.full(jidx.size, ps * wt))
                cash.append(side * nu * qv * x_after[jidx])
                ndev.append(dev_after[jidx] + side * (1 - nu) * qv)
                nused.append(used[node][jidx] + 1)
        br = np.concatenate(br)
        levels.append((node, gain, br, np.concatenate(prob), np.concatenate(cash), lots_left.size))
        lots_left = (lots_left[node] - sold)[br]
        dev, used = np.concatenate(ndev), np.concatenate(nused)
    x = lots_left * step
    value = np.where(x > 0, x * dev - cp * x**p - c0, 0.0)
    for node, gain, br, prob, cash, n_nodes in reversed(levels):
        expect = np.zeros(node.size)
        np.add.at(expect, br, prob * (cash + value))
        value = np.full(n_nodes, -np.inf)
        np.maximum.at(value, node, gain + expect)
    return float(value[0])


def first_jump_monte_carlo(params, g, t, u, state, n, seed, n_xi=64):
    """Sample mean and standard error of the stop-at-u payoff, continuing with ``g`` after the first order.

    Both regimes carry the same total order intensity here, so before the
    first order the regime law follows the two-state chain alone.
    """
    x, dev, kp, km, mu1 = state
    times, sides, _, vols = simulate_first_event(params, t, [kp, km], [km, kp], [mu1, 1 - mu1], n, seed,
                                                 horizon=u)
    lam_inf, beta, rho, nu = float(params.lambda_inf[0]), float(params.beta[0]), params.rho, params.nu
    a, b = params.psi[0, 1], params.psi[1, 0]
    stationary = b / (a + b) if a + b > 0 else mu1

    def law(s):
        return stationary + (mu1 - stationary) * np.exp(-(a + b) * s)

    def flowed(r):
        return (dev * np.exp(-rho * (r - t)), lam_inf + (kp - lam_inf) * np.exp(-beta * (r - t)),
                lam_inf + (km - lam_inf) * np.exp(-beta * (r - t)), law(r - t))

    out = np.empty(n)
    jumped = times <= u
    d_u, kp_u, km_u, mu_u = flowed(u)
    out[~jumped] = intervene(params, g, u, ReducedState(x, d_u, kp_u, km_u, mu_u), n_xi)[0]
    r, side, v = times[jumped], sides[jumped], vols[jumped]
    q = impact_q(v, params.lob_c, params.lob_e)
    d_r, kp_r, km_r, mu_r = flowed(r)
    lam1 = np.where(side > 0, kp_r, km_r)
    lam2 = np.where(side > 0, km_r, kp_r)
    post = mu_r * lam1 / (mu_r * lam1 + (1 - mu_r) * lam2)
    bump = excitation_increment(v, float(params.zeta[0]), params.eta, params.excitation_scale)
    out[jumped] = side * nu * q * x + g(r, x, d_r + side * (1 - nu) * q, kp_r + bump, km_r + bump, post)
    return out.mean(), out.std(ddof=1) / math.sqrt(n)


def random_params(rng, d=2):
    a = rng.uniform(0.05, 1.0, size=(d, d))
    np.fill_diagonal(a, 0.0)
    np.fill_diagonal(a, -a.sum(axis=1))
    lam_inf = rng.uniform(0.3, 2.0, d)
    return ModelParams(
        d=d, psi=a, beta=rng.uniform(0.2, 3.0, d), lambda_inf=lam_inf, zeta=rng.uniform(0.5, 2.0, d),
        kappa0_plus=lam_inf + rng.uniform(0, 6, d), kappa0_minus=lam_inf + rng.uniform(0, 6, d),
    )


def hmm_oracle(params, path, prior, delta=1e-4):
    """Exact HMM filter on a fine time grid: transition matrix, then no-event or event likelihood."""
    trans = linalg.expm(params.psi * delta)
    lam = np.stack([params.kappa0_plus, params.kappa0_minus], axis=1).astype(float)
    lam_inf, beta = params.lambda_inf[:, None], params.beta[:, None]
    pi = np.array(prior, float)
    n_steps = int(round(path.horizon / delta))
    ev = 0
    out = np.empty(n_steps + 1)
    out[0] = pi[0]
    for n in range(n_steps):
        a, b = n * delta, (n + 1) * delta
        while ev < len(path) and path.times[ev] <= b:
            tau = path.times[ev]
            pi, lam = _oracle_segment(pi, lam, params.psi, lam_inf, beta, tau - a)
            col = 0 if path.sides[ev] > 0 else 1
            pi = pi * lam[:, col]
            pi /= pi.sum()
            lam = lam + excitation_increment(path.volumes[ev], params.zeta, params.eta)[:, None]
            a = tau
            ev += 1
        step = trans if a == n * delta else linalg.expm(params.psi * (b - a))
        pi, lam = _oracle_segment(pi, lam, None, lam_inf, beta, b - a, step)
        out[n + 1] = pi[0]
    return out


def _oracle_segment(pi, lam, psi, lam_inf, beta, dt, step=None):
    if dt <= 0:
        return pi, lam
    # exact integral of the decaying intensities over the sub-step
    integ = (lam_inf * dt + (lam - lam_inf) * (1 - np.exp(-beta * dt)) / beta).sum(axis=1)
    if step is None:
        step = linalg.expm(psi * dt)
    pi = (pi * np.exp(-integ)) @ step
    lam = lam_inf + (lam - lam_inf) * np.exp(-beta * dt)
    return pi / pi.sum(), lam
