"""Distributional fitted-Q iteration with non-crossing quantile networks.

The loop alternates between collecting epsilon-greedy transitions under the
policy that is greedy for the mean of the current quantile estimate, forming
distributional Bellman targets ``r + gamma * Z_j(s', a*)`` with ``a*`` the
mean-greedy next action, and refitting a fresh NQ network on the pinball
loss summed over every (target quantile j, level k) pair.

A one-dimensional toy MDP and a grid value-iteration oracle stand in for
large benchmark environments so regret can be measured exactly.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate, special

from nqnet import heads, nn, seeding
from nqnet.losses import LossSpec, empirical_risk
from nqnet.trainer import TrainConfig, TrainingDiverged, fit_net


def toy_mean_reward(s, a):
    """sin(3s) + 0.5 (2a - 1)(s - 0.5): action 1 pays off on the right half."""
    s = np.asarray(s, dtype=np.float64)
    return np.sin(3.0 * s) + 0.5 * (2.0 * np.asarray(a) - 1.0) * (s - 0.5)


@dataclass(frozen=True)
class MDPSpec:
    """Continuous-state, finite-action MDP on [0, 1].

    Action ``a`` moves the state by a fixed drift (``-step`` for action 0 and
    ``+step`` for the last action, evenly spaced in between) plus Gaussian
    noise, clipped to [0, 1]. Rewards are ``reward_fn(s, a)`` plus scaled
    Student-t noise; ``reward_noise_df=None`` gives noiseless rewards.
    Episodes start from Unif(0, 1) and restart after ``episode_length`` steps.
    """

    n_actions: int = 2
    step: float = 0.1
    transition_noise: float = 0.02
    gamma: float = 0.9
    reward_noise_df: float | None = 10.0
    reward_noise_scale: float = 0.3
    episode_length: int = 10
    reward_fn: Callable = toy_mean_reward

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.n_actions < 1:
            raise ValueError("need at least one action")
        if self.reward_noise_df is not None and not self.reward_noise_df > 1:
            raise ValueError("reward noise needs df > 1 for a finite mean")
        if self.transition_noise < 0 or self.reward_noise_scale < 0 or self.episode_length < 1:
            raise ValueError("noise scales must be non-negative and episodes non-empty")

    def drift(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        if self.n_actions == 1:
            return np.zeros_like(a)
        return self.step * (2.0 * a / (self.n_actions - 1) - 1.0)

    def mean_reward(self, s, a) -> np.ndarray:
        return np.asarray(self.reward_fn(np.asarray(s, dtype=np.float64), np.asarray(a)), dtype=np.float64)

    def sample_reward(self, s, a, rng: np.random.Generator) -> np.ndarray:
        r = self.mean_reward(s, a)
        if self.reward_noise_df is None or self.reward_noise_scale == 0:
            return r
        return r + self.reward_noise_scale * rng.standard_t(self.reward_noise_df, size=r.shape)

    def next_state(self, s, a, rng: np.random.Generator) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        noise = self.transition_noise * rng.standard_normal(s.shape)
        return np.clip(s + self.drift(a) + noise, 0.0, 1.0)

    def initial_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.random(n)

    def describe(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "reward_fn"}
        d["reward_fn"] = getattr(self.reward_fn, "__name__", repr(self.reward_fn))
        return d


@dataclass
class Transitions:
    """A batch of (s, a, r, s') tuples stored column-wise."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray

    def __post_init__(self):
        n = len(self.s)
        if not (len(self.a) == len(self.r) == len(self.s_next) == n):
            raise ValueError("transition columns have different lengths")

    def __len__(self) -> int:
        return len(self.s)

    def __getitem__(self, i) -> tuple:
        return self.s[i], int(self.a[i]), self.r[i], self.s_next[i]

    @classmethod
    def from_tuples(cls, tuples) -> "Transitions":
        s, a, r, sn = zip(*tuples)
        return cls(np.asarray(s, float), np.asarray(a, int), np.asarray(r, float), np.asarray(sn, float))


@dataclass
class DRLConfig:
    K: int = 32
    hidden: tuple = (64, 64)
    epsilon: float = 0.2
    n_envs: int = 50
    batch_size: int = 128
    max_epochs: int = 300
    patience: int = 30
    val_fraction: float = 0.2
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    loss: LossSpec = field(default_factory=LossSpec)
    warm_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    @property
    def levels(self) -> np.ndarray:
        return heads.default_levels(self.K)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(head_kind=heads.NQ_ELU, levels=tuple(self.levels), hidden=tuple(self.hidden),
                           trunk="shared", batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, loss=self.loss, lr=self.lr, beta1=self.beta1,
                           beta2=self.beta2, seed=seed)


@dataclass
class FittedIterate:
    """Quantile estimate Z^(m): one trunk emitting |A| blocks of K + 1 raw outputs.

    The network is fitted to standardized targets; ``shift + scale * f`` maps
    its head output back to return units (``scale > 0`` keeps the order).
    """

    m: int
    net: nn.DenseNet
    n_actions: int
    K: int
    shift: float = 0.0
    scale: float = 1.0

    def quantiles(self, states) -> np.ndarray:
        """Quantiles of the return at each (state, action), shape ``(n, |A|, K)``."""
        S = np.asarray(states, dtype=np.float64).reshape(len(np.atleast_1d(states)), -1)
        raw, _ = nn.forward(self.net, S)
        n = raw.shape[0]
        fan = heads.head_forward(heads.NQ_ELU, raw.reshape(n * self.n_actions, self.K + 1))
        f = heads.strictly_increasing(self.shift + self.scale * fan.f)
        return f.reshape(n, self.n_actions, self.K)

    def q_values(self, states) -> np.ndarray:
        return self.quantiles(states).mean(axis=2)

    def greedy(self, states) -> np.ndarray:
        # argmax on the sum over levels; np.argmax breaks ties toward the lowest index
        return np.argmax(self.quantiles(states).sum(axis=2), axis=1)


@dataclass
class GreedyPolicy:
    iterate: FittedIterate

    def __call__(self, states) -> np.ndarray:
        return self.iterate.greedy(states)


def new_iterate(m: int, n_actions: int, K: int, hidden, seed: int, state_dim: int = 1) -> FittedIterate:
    dims = [state_dim, *hidden, n_actions * (K + 1)]
    return FittedIterate(m, nn.init_net(dims, seed), n_actions, K)


def k_quantile_mean(quantiles) -> float:
    """Average of K quantile values, the plug-in estimate of the mean."""
    q = np.asarray(quantiles, dtype=np.float64)
    if q.ndim != 1 or q.size < 1:
        raise ValueError("need a non-empty vector of quantiles")
    return float(q.mean())


def bellman_targets(iterate: FittedIterate, batch: Transitions, gamma: float) -> np.ndarray:
    """Per-tuple target vectors ``r_i + gamma * Z_j(s'_i, a*_i)``, shape ``(N, K)``."""
    if len(batch) == 0:
        raise ValueError("empty transition batch")
    Z = iterate.quantiles(batch.s_next)
    a_star = np.argmax(Z.sum(axis=2), axis=1)
    Z_star = Z[np.arange(len(batch)), a_star]
    return batch.r[:, None] + gamma * Z_star


def _action_objective(n_actions: int, K: int, levels, loss: LossSpec):
    def objective(raw, actions, targets):
        n = raw.shape[0]
        blocks = raw.reshape(n, n_actions, K + 1)
        rows = np.arange(n)
        fan = heads.head_forward(heads.NQ_ELU, blocks[rows, actions])
        risk, dfan = empirical_risk(levels, fan.f, targets, loss)
        draw = np.zeros_like(blocks)
        draw[rows, actions] = heads.head_backward(fan, dfan)
        return risk, draw.reshape(n, -1)

    return objective


@dataclass
class StepInfo:
    initial_loss: float
    final_loss: float
    best_epoch: int
    stop_epoch: int
    seconds: float


def fitted_nq_step(iterate: FittedIterate, data: Transitions, gamma: float, config: DRLConfig,
                   seed: int | None = None) -> tuple[FittedIterate, StepInfo]:
    """Fit Z^(m+1) to the Bellman targets built from the frozen iterate Z^(m)."""
    if len(data) == 0:
        raise ValueError("no transitions to fit")
    seed = config.seed if seed is None else seed
    targets = bellman_targets(iterate, data, gamma)
    shift = float(targets.mean())
    scale = float(targets.std()) or 1.0
    z_targets = (targets - shift) / scale
    S = np.asarray(data.s, dtype=np.float64).reshape(len(data), -1)
    actions = np.asarray(data.a, dtype=np.int64)

    n_val = int(round(config.val_fraction * len(data)))
    order = seeding.stream(seed, seeding.SHUFFLE).permutation(len(data))
    val, tr = order[:n_val], order[n_val:]

    if config.warm_start:
        net = iterate.net
    else:
        net = new_iterate(iterate.m + 1, iterate.n_actions, iterate.K, config.hidden, seed, S.shape[1]).net
    objective = _action_objective(iterate.n_actions, iterate.K, config.levels, config.loss)
    net, report = fit_net(net, S[tr], (actions[tr], z_targets[tr]), S[val], (actions[val], z_targets[val]),
                          objective, config.train_config(seed))
    # losses are reported in return units: the pinball loss scales linearly
    raw, _ = nn.forward(net, S)
    final = scale * objective(raw, actions, z_targets)[0]
    info = StepInfo(scale * report.train_loss[0], final, report.best_epoch, report.stop_epoch, report.seconds)
    return FittedIterate(iterate.m + 1, net, iterate.n_actions, iterate.K, shift, scale), info


def collect(policy, mdp: MDPSpec, N: int, epsilon: float, seed: int, n_envs: int = 50) -> Transitions:
    """N epsilon-greedy transitions from ``n_envs`` episodes run in lockstep.

    Tuples are ordered time-major (all environments at step t, then t + 1)
    and the last partial sweep is truncated to N.
    """
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    if N < 1:
        raise ValueError("N must be at least 1")
    rng = seeding.stream(seed, seeding.COLLECT)
    n_envs = max(1, min(n_envs, N))
    s = mdp.initial_states(n_envs, rng)
    t_in_episode = 0
    cols = {"s": [], "a": [], "r": [], "s_next": []}
    collected = 0
    while collected < N:
        greedy = np.asarray(policy(s), dtype=np.int64)
        explore = rng.random(n_envs) < epsilon
        random_a = rng.integers(0, mdp.n_actions, size=n_envs)
        a = np.where(explore, random_a, greedy)
        r = mdp.sample_reward(s, a, rng)
        s_next = mdp.next_state(s, a, rng)
        for k, v in zip(("s", "a", "r", "s_next"), (s, a, r, s_next)):
            cols[k].append(v)
        collected += n_envs
        t_in_episode += 1
        if t_in_episode >= mdp.episode_length:
            s, t_in_episode = mdp.initial_states(n_envs, rng), 0
        else:
            s = s_next
    out = {k: np.concatenate(v)[:N] for k, v in cols.items()}
    return Transitions(out["s"], out["a"], out["r"], out["s_next"])


# oracle ----------------------------------------------------------------------

@dataclass
class OracleResult:
    grid: np.ndarray
    V: np.ndarray
    Q: np.ndarray  # (G, |A|)
    iterations: int
    J: float

    @property
    def policy(self) -> np.ndarray:
        return np.argmax(self.Q, axis=1)

    def q_at(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64).ravel()
        return np.stack([np.interp(states, self.grid, self.Q[:, a]) for a in range(self.Q.shape[1])], axis=1)

    def action_at(self, states) -> np.ndarray:
        return np.argmax(self.q_at(states), axis=1)


def transition_matrices(mdp: MDPSpec, grid: np.ndarray) -> np.ndarray:
    """Row-stochastic ``P[a, i, j]``: probability that s' lands in the cell of grid[j].

    Cells are bounded by grid midpoints; the outer cells extend to +-inf, which
    accounts for the probability mass that clipping puts on 0 and 1.
    """
    edges = np.concatenate([[-np.inf], 0.5 * (grid[1:] + grid[:-1]), [np.inf]])
    P = np.empty((mdp.n_actions, len(grid), len(grid)))
    for a in range(mdp.n_actions):
        mu = grid + mdp.drift(a)
        if mdp.transition_noise == 0:
            idx = np.clip(np.searchsorted(edges, np.clip(mu, 0, 1), side="right") - 1, 0, len(grid) - 1)
            P[a] = 0.0
            P[a, np.arange(len(grid)), idx] = 1.0
            continue
        cdf = special.ndtr((edges[None, :] - mu[:, None]) / mdp.transition_noise)
        P[a] = np.diff(cdf, axis=1)
    return P


def dp_oracle(mdp: MDPSpec, grid_resolution: int = 2001, tol: float = 1e-8,
              max_iter: int = 100_000) -> OracleResult:
    """Value iteration with mean rewards on a uniform grid over [0, 1]."""
    if grid_resolution < 2:
        raise ValueError("grid needs at least two points")
    grid = np.linspace(0.0, 1.0, grid_resolution)
    P = transition_matrices(mdp, grid)
    R = np.stack([mdp.mean_reward(grid, np.full(len(grid), a)) for a in range(mdp.n_actions)], axis=1)
    V = np.zeros(len(grid))
    for it in range(1, max_iter + 1):
        Q = R + mdp.gamma * np.einsum("aij,j->ia", P, V)
        V_new = Q.max(axis=1)
        delta = np.max(np.abs(V_new - V))
        V = V_new
        if delta < tol:
            break
    else:
        raise RuntimeError(f"value iteration did not converge in {max_iter} sweeps (last change {delta:.3g})")
    Q = R + mdp.gamma * np.einsum("aij,j->ia", P, V)
    J = float(integrate.trapezoid(V, grid))
    return OracleResult(grid, V, Q, it, J)


def monte_carlo_return(policy, mdp: MDPSpec, n_rollouts: int = 10_000, seed: int = 0,
                       horizon: int | None = None, noisy_rewards: bool = True) -> tuple[float, float]:
    """Mean and standard error of the discounted return from Unif(0,1) starts."""
    if horizon is None:
        horizon = 1 if mdp.gamma == 0 else int(math.ceil(math.log(1e-10) / math.log(mdp.gamma)))
    rng = seeding.stream(seed, seeding.ROLLOUT)
    s = mdp.initial_states(n_rollouts, rng)
    total = np.zeros(n_rollouts)
    disc = 1.0
    for _ in range(horizon):
        a = np.asarray(policy(s), dtype=np.int64)
        r = mdp.sample_reward(s, a, rng) if noisy_rewards else mdp.mean_reward(s, a)
        total += disc * r
        disc *= mdp.gamma
        s = mdp.next_state(s, a, rng)
    return float(total.mean()), float(total.std(ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0


# Algorithm loop --------------------------------------------------------------

EVAL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class Algorithm1Result:
    policy: GreedyPolicy
    iterate: FittedIterate
    diagnostics: list


class FitFailure(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"fit failed at iteration {iteration}: {cause}")
        self.iteration = iteration


def run_algorithm1(mdp: MDPSpec, M: int, N: int, K: int, config: DRLConfig | None = None,
                   oracle: OracleResult | None = None, log_path=None) -> Algorithm1Result:
    """Fitted NQ iteration for M rounds; returns the greedy policy of Z^(M).

    ``K`` overrides ``config.K``. When ``oracle`` is given, each diagnostic
    record includes the fraction of the 101-point evaluation grid on which
    the current greedy action matches the oracle's.
    """
    if M < 0:
        raise ValueError("M must be non-negative")
    config = replace(config or DRLConfig(), K=K)
    oracle_actions = oracle.action_at(EVAL_GRID) if oracle is not None else None
    iterate = new_iterate(0, mdp.n_actions, K, config.hidden, seeding.derive(config.seed, 0))
    diagnostics = []
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for m in range(M):
            t0 = time.perf_counter()
            policy = GreedyPolicy(iterate)
            data = collect(policy, mdp, N, config.epsilon, seeding.derive(config.seed, 1, m), config.n_envs)
            try:
                iterate, info = fitted_nq_step(iterate, data, mdp.gamma, config,
                                               seed=seeding.derive(config.seed, 2, m))
            except (TrainingDiverged, FloatingPointError) as exc:
                raise FitFailure(m + 1, exc) from exc
            Z = iterate.quantiles(EVAL_GRID)
            q = Z.mean(axis=2)
            rec = {
                "iteration": m + 1,
                "mean_q": float(q.mean()),
                "min_gap": float(np.diff(Z, axis=2).min()) if K > 1 else None,
                "fit_loss": info.final_loss,
                "initial_fit_loss": info.initial_loss,
                "best_epoch": info.best_epoch,
                "stop_epoch": info.stop_epoch,
                "seconds": time.perf_counter() - t0,
            }
            if oracle_actions is not None:
                rec["agreement"] = float(np.mean(np.argmax(q, axis=1) == oracle_actions))
            diagnostics.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return Algorithm1Result(GreedyPolicy(iterate), iterate, diagnostics)


def policy_agreement(policy, oracle: OracleResult, states=EVAL_GRID) -> float:
    return float(np.mean(np.asarray(policy(states)) == oracle.action_at(states)))


def write_policy_csv(path, iterate: FittedIterate, states=EVAL_GRID) -> Path:
    path = Path(path)
    q = iterate.q_values(states)
    actions = np.argmax(q, axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", "action"] + [f"q_{a}" for a in range(iterate.n_actions)])
        for s, a, row in zip(states, actions, q):
            w.writerow([repr(float(s)), int(a)] + [repr(float(v)) for v in row])
    return path
