"""Synchronous decentralized training engines and the training loop.

Six engines share one round structure: every agent reads its neighbors'
round-``k`` values and writes round-``k+1`` values, so a round is a pure
function of the previous states. The private variants replace each local
gradient with a clipped, noised estimate over a Poisson lot.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .accountant import DEFAULT_ORDERS, Accountant
from .graphs import CommGraph, MixingMatrix
from .mechanisms import DpConfig, add_noise, sample_lot
from .objectives import Objective


class Algorithm(str, Enum):
    DSGD = "dsgd"
    DSGT = "dsgt"
    DINNO = "dinno"
    DP_DSGD = "dp-dsgd"
    DP_DSGT = "dp-dsgt"
    DP_DINNO = "dp-dinno"

    @property
    def private(self) -> bool:
        return self.value.startswith("dp-")

    @property
    def base(self) -> str:
        return self.value.removeprefix("dp-")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    ``lot_size=None`` means full local batches. ``lr_half=None`` keeps the
    learning rate constant; otherwise ``lr_k = lr / (1 + (k - 1) / lr_half)``.
    """

    algorithm: Algorithm
    iterations: int
    lr: float
    lr_half: float | None = None
    rho: float = 1.0
    primal_steps: int = 1
    primal_optimizer: str = "adam"
    lot_size: int | None = None
    clip_norm: float = math.inf
    noise_multiplier: float = 0.0
    delta: float = 1e-5
    epsilon_cap: float | None = None
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.lr_half is not None and self.lr_half <= 0:
            raise ValueError("lr_half must be positive")
        if self.algorithm.base == "dinno":
            if self.rho < 0 or self.primal_steps < 1:
                raise ValueError("DiNNO needs rho >= 0 and primal_steps >= 1")
            if self.primal_optimizer not in ("adam", "sgd"):
                raise ValueError(f"unknown primal optimizer {self.primal_optimizer!r}")

    def learning_rate(self, k: int) -> float:
        if self.lr_half is None:
            return self.lr
        return self.lr / (1.0 + (k - 1) / self.lr_half)

    @property
    def releases_per_round(self) -> int:
        return self.primal_steps if self.algorithm.base == "dinno" else 1


@dataclass
class AgentState:
    theta: np.ndarray
    tracker: np.ndarray | None = None
    dual: np.ndarray | None = None
    last_noisy_grad: np.ndarray | None = None
    optimizer_state: dict | None = None


def init_states(algorithm: Algorithm | str, theta0: np.ndarray, n_agents: int) -> list[AgentState]:
    """Every agent starts at ``theta0`` with zeroed auxiliaries."""
    base = Algorithm(algorithm).base
    states = []
    for _ in range(n_agents):
        st = AgentState(theta=np.array(theta0, dtype=np.float64))
        if base == "dsgt":
            st.tracker = np.zeros_like(st.theta)
            st.last_noisy_grad = np.zeros_like(st.theta)
        elif base == "dinno":
            st.dual = np.zeros_like(st.theta)
            st.optimizer_state = {"m": np.zeros_like(st.theta), "v": np.zeros_like(st.theta), "t": 0}
        states.append(st)
    return states


@dataclass(frozen=True)
class RoundContext:
    """Everything a round needs besides the agent states."""

    objective: Objective
    data: Sequence
    cfg: TrainConfig
    seed: int

    def dp_config(self, agent: int) -> DpConfig:
        n = len(self.data[agent])
        lot = n if self.cfg.lot_size is None else min(self.cfg.lot_size, n)
        if self.cfg.algorithm.private:
            return DpConfig(self.cfg.clip_norm, self.cfg.noise_multiplier, lot, n)
        return DpConfig(math.inf, 0.0, lot, n)

    def local_gradient(self, agent: int, theta: np.ndarray, k: int, t: int = 0) -> np.ndarray:
        """Lot gradient of agent ``agent`` at ``theta``: clipped and noised if private."""
        dp = self.dp_config(agent)
        lot = sample_lot(dp.dataset_size, dp.sample_rate,
                         rngmod.substream(self.seed, rngmod.SAMPLING, agent, k, t))
        if self.cfg.algorithm.private:
            gsum, _ = self.objective.clipped_gradient_sum(theta, self.data[agent], lot, dp.clip_norm)
            noise_rng = rngmod.substream(self.seed, rngmod.NOISE, agent, k, t)
            return add_noise(gsum, dp, noise_rng)
        gsum, _ = self.objective.clipped_gradient_sum(theta, self.data[agent], lot, None)
        return add_noise(gsum, dp, None)


def _stack(states, attr="theta") -> np.ndarray:
    return np.stack([getattr(s, attr) for s in states])


def dsgd_round(states: list[AgentState], W: np.ndarray, ctx: RoundContext, k: int) -> list[AgentState]:
    """``theta_i <- sum_j w_ij theta_j - lr_k * g_i(theta_i)``."""
    W = np.asarray(getattr(W, "weights", W))
    thetas = _stack(states)
    mixed = W @ thetas
    lr = ctx.cfg.learning_rate(k)
    out = []
    for i, st in enumerate(states):
        g = ctx.local_gradient(i, st.theta, k)
        out.append(replace(st, theta=mixed[i] - lr * g))
    return out


def dsgt_round(states: list[AgentState], W: np.ndarray, ctx: RoundContext, k: int) -> list[AgentState]:
    """Gradient tracking: mix ``theta - lr * y``, then refresh the tracker.

    ``y_i <- g_i(new theta_i) + sum_j w_ij y_j - g_i(previous theta_i)``.
    """
    W = np.asarray(getattr(W, "weights", W))
    thetas, trackers = _stack(states), _stack(states, "tracker")
    lr = ctx.cfg.learning_rate(k)
    new_thetas = W @ (thetas - lr * trackers)
    mixed_trackers = W @ trackers
    out = []
    for i, st in enumerate(states):
        g_new = ctx.local_gradient(i, new_thetas[i], k)
        y = g_new + (mixed_trackers[i] - st.last_noisy_grad)
        out.append(replace(st, theta=new_thetas[i], tracker=y, last_noisy_grad=g_new))
    return out


def _adam_step(psi, grad, state, lr, betas, eps):
    b1, b2 = betas
    t = state["t"] + 1
    m = b1 * state["m"] + (1 - b1) * grad
    v = b2 * state["v"] + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return psi - lr * m_hat / (np.sqrt(v_hat) + eps), {"m": m, "v": v, "t": t}


def dinno_round(states: list[AgentState], graph: CommGraph, ctx: RoundContext, k: int) -> list[AgentState]:
    """Consensus-ADMM round with an inexact, iterative primal solve.

    The dual accumulates ``rho * sum_j (theta_i - theta_j)`` over neighbors.
    The primal runs ``T`` optimizer steps on the data loss plus the linear
    dual term and the quadratic pull toward edge midpoints; only the
    data-loss gradient is clipped and noised.
    """
    cfg = ctx.cfg
    rho, lr = cfg.rho, cfg.learning_rate(k)
    thetas = _stack(states)
    out = []
    for i, st in enumerate(states):
        nbrs = graph.neighbors(i)
        hood = graph.neighborhood(i)
        theta_i = thetas[i]
        dual = st.dual + rho * (len(nbrs) * theta_i - thetas[nbrs].sum(axis=0)) if nbrs else st.dual.copy()
        # sum over j in N_i (self included) of (theta_i + theta_j) / 2
        anchor = 0.5 * (len(hood) * theta_i + thetas[hood].sum(axis=0))
        psi = theta_i.copy()
        opt = st.optimizer_state
        for t in range(cfg.primal_steps):
            g = ctx.local_gradient(i, psi, k, t)
            grad = g + dual + 2.0 * rho * (len(hood) * psi - anchor)
            if cfg.primal_optimizer == "adam":
                psi, opt = _adam_step(psi, grad, opt, lr, cfg.adam_betas, cfg.adam_eps)
            else:
                psi = psi - lr * grad
        out.append(replace(st, theta=psi, dual=dual, optimizer_state=opt))
    return out


def consensus_distance(states_or_thetas) -> float:
    """Root-mean-square distance of the agents from their average."""
    thetas = states_or_thetas
    if len(thetas) and isinstance(thetas[0], AgentState):
        thetas = _stack(thetas)
    thetas = np.asarray(thetas, dtype=np.float64)
    dev = thetas - thetas.mean(axis=0)
    return float(np.sqrt(np.sum(dev * dev) / len(thetas)))


@dataclass(frozen=True)
class RoundRecord:
    round: int
    loss: float
    consensus: float
    accuracy: float
    epsilon: float


@dataclass
class TrainingTrace:
    records: list[RoundRecord] = field(default_factory=list)
    final_thetas: np.ndarray | None = None
    manifest: dict = field(default_factory=dict)
    truncated: bool = False


def metrics_cadence(iterations: int) -> int:
    return 1 if iterations <= 2000 else math.ceil(iterations / 2000)


def run_training(
    cfg: TrainConfig,
    graph: CommGraph,
    W: MixingMatrix | np.ndarray,
    objective: Objective,
    data: Sequence,
    seed: int,
    theta0: np.ndarray | None = None,
    noise_seed: int | None = None,
    eval_data=None,
    loss_data: Sequence | None = None,
    metrics_every: int | None = None,
    observer: Callable[[int, list[AgentState]], None] | None = None,
    orders: Sequence[float] = DEFAULT_ORDERS,
) -> TrainingTrace:
    """Runs ``cfg.iterations`` synchronous rounds and records metrics.

    Args:
        seed: global seed; the initial parameters come from its ``init``
            substream unless ``theta0`` is given.
        noise_seed: seed for lot sampling and noise (defaults to ``seed``).
        eval_data: held-out set for accuracy (classifiers only).
        loss_data: per-agent data used for the recorded mean loss; defaults
            to the training data.
        metrics_every: record cadence; defaults to every round up to 2,000
            rounds, else every ``ceil(K / 2000)`` rounds. The last round is
            always recorded.
        observer: called as ``observer(k, states)`` after every round.

    The run stops early, with ``trace.truncated`` set, if the next round
    would push any agent's spend past ``cfg.epsilon_cap``.
    """
    W = np.asarray(getattr(W, "weights", W))
    n = graph.n_agents
    if len(data) != n or W.shape != (n, n):
        raise ValueError("graph, mixing matrix and data partition disagree on agent count")
    if theta0 is None:
        theta0 = objective.init_params(rngmod.substream(seed, rngmod.INIT))
    noise_seed = seed if noise_seed is None else noise_seed
    ctx = RoundContext(objective, data, cfg, noise_seed)
    states = init_states(cfg.algorithm, theta0, n)
    loss_data = data if loss_data is None else loss_data
    every = metrics_every or metrics_cadence(cfg.iterations)

    accountant = None
    if cfg.algorithm.private and cfg.noise_multiplier > 0:
        rates = [ctx.dp_config(i).sample_rate for i in range(n)]
        accountant = Accountant(cfg.noise_multiplier, cfg.delta, rates, orders)

    base = cfg.algorithm.base
    trace = TrainingTrace()
    started = time.perf_counter()
    rounds_run = 0
    for k in range(1, cfg.iterations + 1):
        if accountant is not None and cfg.epsilon_cap is not None:
            accountant.step(cfg.releases_per_round)
            over = accountant.max_epsilon() > cfg.epsilon_cap
            accountant.steps -= cfg.releases_per_round
            if over:
                trace.truncated = True
                if rounds_run and (not trace.records or trace.records[-1].round != rounds_run):
                    trace.records.append(
                        _record(rounds_run, states, objective, loss_data, eval_data, accountant, cfg))
                break
        if base == "dsgd":
            states = dsgd_round(states, W, ctx, k)
        elif base == "dsgt":
            states = dsgt_round(states, W, ctx, k)
        else:
            states = dinno_round(states, graph, ctx, k)
        if accountant is not None:
            accountant.step(cfg.releases_per_round)
        rounds_run = k
        if observer is not None:
            observer(k, states)
        if k % every == 0 or k == cfg.iterations:
            trace.records.append(_record(k, states, objective, loss_data, eval_data, accountant, cfg))

    trace.final_thetas = _stack(states)
    trace.manifest = {
        "rounds_run": rounds_run,
        "wall_time_s": time.perf_counter() - started,
        "per_agent_epsilon": [] if accountant is None else [s.epsilon for s in accountant.spends()],
        "sample_rates": [ctx.dp_config(i).sample_rate for i in range(n)],
    }
    return trace


def _record(k, states, objective, loss_data, eval_data, accountant, cfg) -> RoundRecord:
    loss = float(np.mean([objective.loss(s.theta, d) for s, d in zip(states, loss_data)]))
    acc = math.nan
    if eval_data is not None and objective.is_classifier:
        acc = float(np.mean([objective.accuracy(s.theta, eval_data) for s in states]))
    # no accountant means no finite guarantee
    eps = math.inf if accountant is None else accountant.max_epsilon()
    return RoundRecord(k, loss, consensus_distance(states), acc, eps)
