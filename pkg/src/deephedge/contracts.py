"""Floating-grid instruments, cliquet payoff, and the hedging objective.

The action space at each step holds the underlying plus a grid of vanilla
options quoted by time to maturity and log-moneyness relative to the
current spot. An option is a call when its log-moneyness is positive and
a put otherwise, and it is tradable only while it matures inside the
hedging horizon. Every trade is held to maturity, so instrument returns
are terminal payoffs minus the premium paid at trade time, and are
independent of the policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class GridOption:
    tau_steps: int
    log_moneyness: float

    @property
    def is_call(self) -> bool:
        return self.log_moneyness > 0.0


@dataclass(frozen=True)
class GridSpec:
    """Tradable option set; action dimension is 1 (spot) + len(entries)."""

    entries: tuple[GridOption, ...]

    @classmethod
    def from_ratio_map(cls, ratio_map: dict[int, list[float]]) -> "GridSpec":
        entries = []
        for tau_steps in sorted(ratio_map):
            for ratio in ratio_map[tau_steps]:
                entries.append(GridOption(int(tau_steps), float(np.log(ratio))))
        return cls(entries=tuple(entries))

    @property
    def d(self) -> int:
        return 1 + len(self.entries)


def full_grid() -> GridSpec:
    """The 19-option grid used at full scale."""
    spec = GridSpec.from_ratio_map({
        10: [0.99, 1.0, 1.01],
        20: [0.97, 0.99, 1.0, 1.01, 1.03],
        40: [0.95, 1.0, 1.05],
        80: [0.91, 1.0, 1.09],
        120: [0.85, 0.95, 1.0, 1.05, 1.15],
    })
    assert len(spec.entries) == 19
    return spec


def desk_grid() -> GridSpec:
    """Short-maturity slice of the full grid for desk-scale experiments."""
    return GridSpec.from_ratio_map({
        10: [0.99, 1.0, 1.01],
        20: [0.97, 0.99, 1.0, 1.01, 1.03],
    })


@dataclass(frozen=True)
class CliquetSpec:
    """Locally-capped, globally-floored cliquet: sum of per-period returns
    capped at ``cap``, floored at zero at maturity."""

    cap: float
    resets: tuple[int, ...]

    def __post_init__(self):
        r = self.resets
        if len(r) == 0 or r[0] <= 0 or any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError(f"reset dates must be strictly increasing and positive: {r}")

    @property
    def maturity(self) -> int:
        return self.resets[-1]


@dataclass(frozen=True)
class CostSpec:
    """Proportional trading costs; the quadratic surrogate costs feed the
    curvature model, not the traded objective."""

    spot_cost: float = 1e-4
    option_cost: float = 1e-2
    l2_multiplier: float = 8.0

    def linear(self, d: int) -> np.ndarray:
        c = np.full(d, self.option_cost)
        c[0] = self.spot_cost
        return c

    def quadratic(self, d: int) -> np.ndarray:
        return self.l2_multiplier * self.linear(d)


def availability_mask(grid: GridSpec, n_steps: int) -> np.ndarray:
    """(T, d) 0/1 mask; options maturing beyond the horizon are struck out."""
    mask = np.ones((n_steps, grid.d))
    for i, opt in enumerate(grid.entries):
        cutoff = n_steps - opt.tau_steps  # tradable while tau <= T - t
        mask[cutoff + 1:, i + 1] = 0.0
    return mask


def instrument_returns(spot: np.ndarray, variance: np.ndarray, grid: GridSpec,
                       pricer) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cost-free terminal returns and premiums for one path.

    Column 0 is the underlying: x_T - x_t. Option column i is the payoff
    at t + tau_i minus the premium paid at t, holding to maturity; masked
    entries are zero. Returns (returns, premiums, mask), each (T, d).
    """
    n_steps = len(spot) - 1
    mask = availability_mask(grid, n_steps)
    returns = np.zeros((n_steps, grid.d))
    premiums = np.zeros((n_steps, grid.d))
    returns[:, 0] = spot[n_steps] - spot[:n_steps]
    for i, opt in enumerate(grid.entries):
        for t in range(n_steps):
            if mask[t, i + 1] == 0.0:
                continue
            x_t = spot[t]
            strike = x_t * np.exp(opt.log_moneyness)
            if opt.is_call:
                prem = pricer.call_price(x_t, variance[t], opt.tau_steps, strike)
                payoff = max(spot[t + opt.tau_steps] - strike, 0.0)
            else:
                prem = pricer.put_price(x_t, variance[t], opt.tau_steps, strike)
                payoff = max(strike - spot[t + opt.tau_steps], 0.0)
            premiums[t, i + 1] = prem
            returns[t, i + 1] = payoff - prem
    return returns, premiums, mask


def grid_returns(paths, grid: GridSpec, pricer) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized instrument returns over a PathSet.

    Premiums use the unit-spot price scaled by the current spot (the
    Heston price is homogeneous of degree one in spot and strike).
    Returns (returns, premiums, mask) of shapes (n, T, d), (n, T, d), (T, d).
    """
    spot, variance = paths.spot, paths.variance
    n, n_steps = spot.shape[0], spot.shape[1] - 1
    mask = availability_mask(grid, n_steps)
    returns = np.zeros((n, n_steps, grid.d))
    premiums = np.zeros((n, n_steps, grid.d))
    returns[:, :, 0] = spot[:, [n_steps]] - spot[:, :n_steps]
    for i, opt in enumerate(grid.entries):
        live = int(mask[:, i + 1].sum())
        x_t = spot[:, :live]
        v_t = variance[:, :live]
        unit = pricer.unit_price(v_t.ravel(), opt.tau_steps, opt.log_moneyness,
                                 opt.is_call).reshape(n, live)
        prem = x_t * unit
        strike = x_t * np.exp(opt.log_moneyness)
        x_at_maturity = spot[:, opt.tau_steps:opt.tau_steps + live]
        if opt.is_call:
            payoff = np.maximum(x_at_maturity - strike, 0.0)
        else:
            payoff = np.maximum(strike - x_at_maturity, 0.0)
        premiums[:, :live, i + 1] = prem
        returns[:, :live, i + 1] = payoff - prem
    return returns, premiums, mask


def cliquet_payoff(spot: np.ndarray, spec: CliquetSpec) -> float:
    """Payoff of one path; ``spot`` covers steps 0..T with T = last reset."""
    total = 0.0
    prev = 0
    for r in spec.resets:
        total += min(spot[r] / spot[prev] - 1.0, spec.cap)
        prev = r
    return max(total, 0.0)


def cliquet_payoff_batch(spot: np.ndarray, spec: CliquetSpec) -> np.ndarray:
    """Payoffs over a batch; spot has shape (n, T + 1)."""
    idx = (0,) + spec.resets
    period = spot[:, idx[1:]] / spot[:, idx[:-1]] - 1.0
    capped = np.minimum(period, spec.cap)
    return np.maximum(capped.sum(axis=1), 0.0)


def running_cliquet_value(spot: np.ndarray, spec: CliquetSpec, t: int) -> float:
    """Payoff if the contract matured at step t: completed periods plus the
    capped return of the running period, floored at zero."""
    if not 0 <= t <= spec.maturity:
        raise ValueError(f"t={t} outside [0, {spec.maturity}]")
    total = 0.0
    prev = 0
    for r in spec.resets:
        if r <= t:
            total += min(spot[r] / spot[prev] - 1.0, spec.cap)
            prev = r
    total += min(spot[t] / spot[prev] - 1.0, spec.cap)
    return max(total, 0.0)


def running_cliquet_batch(spot: np.ndarray, spec: CliquetSpec) -> np.ndarray:
    """Running cliquet value for every step t in 0..T-1; shape (n, T)."""
    n, n_steps = spot.shape[0], spec.maturity
    idx = (0,) + spec.resets
    capped = np.minimum(spot[:, idx[1:]] / spot[:, idx[:-1]] - 1.0, spec.cap)
    completed = np.concatenate([np.zeros((n, 1)), np.cumsum(capped, axis=1)], axis=1)
    out = np.empty((n, n_steps))
    for t in range(n_steps):
        j = np.searchsorted(spec.resets, t, side="right")  # completed periods
        last_reset = 0 if j == 0 else spec.resets[j - 1]
        stub = np.minimum(spot[:, t] / spot[:, last_reset] - 1.0, spec.cap)
        out[:, t] = np.maximum(completed[:, j] + stub, 0.0)
    return out


def last_reset_spot(spot: np.ndarray, spec: CliquetSpec) -> np.ndarray:
    """Spot at the latest reset on or before each step t < T; shape (n, T)."""
    n, n_steps = spot.shape[0], spec.maturity
    out = np.empty((n, n_steps))
    for t in range(n_steps):
        j = np.searchsorted(spec.resets, t, side="right")
        last_reset = 0 if j == 0 else spec.resets[j - 1]
        out[:, t] = spot[:, last_reset]
    return out


N_FEATURES = 6


def feature_tensor(paths, spec: CliquetSpec) -> np.ndarray:
    """Policy inputs per step: two time encodings (global progress and the
    phase within the current cliquet period), spot, spot at the latest
    reset, the variance state, and the running cliquet value. Shape
    (n, T, 6)."""
    spot, variance = paths.spot, paths.variance
    n, n_steps = spot.shape[0], spec.maturity
    if spot.shape[1] - 1 != n_steps:
        raise ValueError("path horizon does not match the cliquet maturity")
    feats = np.empty((n, n_steps, N_FEATURES))
    resets = spec.resets
    for t in range(n_steps):
        j = np.searchsorted(resets, t, side="right")
        last_reset = 0 if j == 0 else resets[j - 1]
        next_reset = resets[j] if j < len(resets) else n_steps
        feats[:, t, 0] = t / n_steps
        feats[:, t, 1] = (t - last_reset) / (next_reset - last_reset)
    feats[:, :, 2] = spot[:, :n_steps]
    feats[:, :, 3] = last_reset_spot(spot, spec)
    feats[:, :, 4] = variance[:, :n_steps]
    feats[:, :, 5] = running_cliquet_batch(spot, spec)
    return feats


@dataclass
class EpisodeTensor:
    """Per-path, per-step hedging data; actions filled in by a rollout."""

    actions: np.ndarray      # (n, T, d)
    returns: np.ndarray      # (n, T, d)
    premiums: np.ndarray     # (n, T, d)
    mask: np.ndarray         # (T, d), identical across paths
    payoff: np.ndarray       # (n,)

    def __post_init__(self):
        off = self.mask == 0.0
        if np.abs(self.returns[:, off]).max(initial=0.0) != 0.0:
            raise ValueError("returns must be zero where the mask is zero")
        if np.abs(self.actions[:, off]).max(initial=0.0) != 0.0:
            raise ValueError("actions must be zero where the mask is zero")


def hedged_pnl(actions: np.ndarray, returns: np.ndarray, payoff: np.ndarray,
               costs_linear: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Terminal PnL (gains minus payoff) and accumulated costs per path."""
    gains = np.einsum("ntd,ntd->n", actions, returns)
    cost = np.einsum("ntd,d->n", np.abs(actions), costs_linear)
    return gains - payoff, cost


def objective_value(actions: np.ndarray, returns: np.ndarray, payoff: np.ndarray,
                    gamma: float, costs: CostSpec) -> float:
    """Risk-adjusted loss: gamma * Var(PnL) + mean costs (pure numpy)."""
    n = actions.shape[0]
    if n < 2:
        raise ValueError("objective needs a batch of at least 2 paths")
    pnl, cost = hedged_pnl(actions, returns, payoff, costs.linear(actions.shape[2]))
    return float(gamma * pnl.var(ddof=1) + cost.mean())


def batch_objective(action_nodes, returns: np.ndarray, payoff: np.ndarray,
                    gamma: float, costs: CostSpec) -> dc.Node:
    """The same loss built from tape primitives, differentiable end to end.

    ``action_nodes`` is the per-step list of (batch, d) nodes produced by
    a policy rollout; returns and payoff are constants of the episode.
    """
    tape = action_nodes[0].tape
    n, d = action_nodes[0].value.shape
    if n < 2:
        raise dc.DiffError("objective needs a batch of at least 2 paths")
    agg = dc.hedge_accumulate(action_nodes, returns, costs.linear(d))
    gains = dc.slice_cols(agg, 0, 1)
    cost = dc.slice_cols(agg, 1, 2)
    pnl = dc.sub(gains, tape.constant(payoff.reshape(n, 1)))
    return dc.add(dc.scale(dc.variance(pnl), gamma), dc.mean(cost))


@dataclass
class InnerHessian:
    """Curvature of the pathwise surrogate loss in action space.

    H = 2 gamma * r r^T + diag(2 c_tilde), never materialized densely:
    the rank-1 factor is the concatenated masked return vector of one
    path, the diagonal repeats the quadratic costs at every step.
    """

    gamma: float
    r_vec: np.ndarray   # (T * d,) concatenated returns, masked entries zero
    diag: np.ndarray    # (T * d,) = 2 * c_tilde tiled over steps

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * self.gamma * self.r_vec * (self.r_vec @ x) + self.diag * x

    def dense(self) -> np.ndarray:
        return 2.0 * self.gamma * np.outer(self.r_vec, self.r_vec) + np.diag(self.diag)


def inner_hessian(path_returns: np.ndarray, gamma: float, costs: CostSpec) -> InnerHessian:
    """Build H for one path; ``path_returns`` is the (T, d) masked matrix."""
    n_steps, d = path_returns.shape
    diag = np.tile(2.0 * costs.quadratic(d), n_steps)
    return InnerHessian(gamma=gamma, r_vec=path_returns.reshape(-1).copy(), diag=diag)


def sample_pseudo_target(h: InnerHessian, rng: np.random.Generator) -> np.ndarray:
    """Draw s with E[s s^T] = H via the rank-1 plus diagonal decomposition.

    Equal in distribution to multiplying a standard normal by a Cholesky
    factor of H, at O(Td) cost instead of O((Td)^3).
    """
    z0 = rng.standard_normal()
    z = rng.standard_normal(h.r_vec.size)
    return np.sqrt(2.0 * h.gamma) * h.r_vec * z0 + np.sqrt(h.diag) * z
