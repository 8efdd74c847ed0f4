"""ACER-lite actor-critic with the four imitation regimes (RL, BC, ILfOD, ILfOS)."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nncore as nn
from .policy import PolicyOutput

MODES = ("RL", "BC", "ILfOD", "ILfOS")


@dataclass
class Transition:
    features: object
    domain: str
    action: int
    mu: float
    reward: float
    next_features: object | None
    terminal: bool
    oracle_generated: bool = False
    oracle_action: int | None = None

    def __post_init__(self):
        if not 0.0 < self.mu <= 1.0:
            raise ValueError(f"behaviour probability {self.mu} outside (0, 1]")
        if not self.terminal and self.next_features is None:
            raise ValueError("non-terminal transition needs next features")


class ReplayBuffer:
    """Ring buffer of transitions with uniform sampling (with replacement, no priorities).

    Episode boundaries are remembered so the share of teacher-generated
    episodes still held can be reported alongside the transition share.
    """

    def __init__(self, capacity: int = 50_000, seed=None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)
        self._episodes: deque[list] = deque()  # [oracle flag, transitions still stored]
        self._rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self._items)

    def add(self, t: Transition) -> None:
        """Store a single transition as an episode of its own."""
        self.extend([t])

    def extend(self, ts: Sequence[Transition]) -> None:
        """Store one episode."""
        ts = list(ts)
        if not ts:
            return
        self._episodes.append([ts[0].oracle_generated, len(ts)])
        overflow = len(self._items) + len(ts) - self.capacity
        self._items.extend(ts)
        while overflow > 0:
            head = self._episodes[0]
            k = min(head[1], overflow)
            head[1] -= k
            overflow -= k
            if head[1] == 0:
                self._episodes.popleft()

    @property
    def episodes(self) -> int:
        return len(self._episodes)

    def sample_indices(self, n: int) -> np.ndarray:
        if not self._items:
            raise ValueError("cannot sample from an empty buffer")
        return self._rng.integers(len(self._items), size=n)

    def sample(self, n: int) -> list[Transition]:
        return [self._items[i] for i in self.sample_indices(n)]

    @property
    def oracle_fraction(self) -> float:
        """Share of stored episodes that the teacher generated."""
        if not self._episodes:
            return 0.0
        return sum(flag for flag, _ in self._episodes) / len(self._episodes)

    @property
    def oracle_transition_fraction(self) -> float:
        if not self._items:
            return 0.0
        return sum(t.oracle_generated for t in self._items) / len(self._items)

    def state(self) -> dict:
        return {"items": list(self._items), "episodes": [list(e) for e in self._episodes],
                "rng": self._rng.bit_generator.state}

    def restore(self, state: dict) -> None:
        self._items = deque(state["items"], maxlen=self.capacity)
        self._episodes = deque(list(e) for e in state["episodes"])
        self._rng.bit_generator.state = state["rng"]


@dataclass(frozen=True)
class LossWeights:
    q: float = 0.5
    pi: float = 1.0
    il: float = 1.0
    ent: float = 0.01
    margin: float = math.log(2.0)
    tau: float = 1.0
    gamma: float = 0.99
    truncation: float = 10.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    total: float
    q: float = 0.0
    pi: float = 0.0
    il: float = 0.0
    ent: float = 0.0


def select_action(out: PolicyOutput, rng: np.random.Generator | None, mode: str = "boltzmann",
                  tau: float = 1.0, row: int = 0) -> tuple[int, float]:
    """Pick an action from one row of ``out``; returns (index, behaviour probability)."""
    logits = np.asarray(out.logits.data[row], dtype=float)
    mask = np.asarray(out.mask[row], dtype=bool)
    if not mask.any():
        raise ValueError("every action is masked")
    if mode == "greedy":
        v = np.where(mask, logits, -np.inf)
        best = v.max()
        # ties (up to rounding) resolve to the lowest index
        return int(np.flatnonzero(v >= best - 1e-12 * max(1.0, abs(best)))[0]), 1.0
    if mode != "boltzmann":
        raise ValueError(f"unknown selection mode {mode!r}")
    if rng is None:
        raise ValueError("boltzmann sampling needs an rng")
    p = nn.softmax(logits / tau, mask)
    idx = int(rng.choice(p.size, p=p))
    return idx, float(p[idx])


# ---------------------------------------------------------------------------
# losses


def bootstrap_targets(policy, batch: Sequence[Transition], weights: LossWeights) -> np.ndarray:
    """y = r + gamma * sum_a pi(a|s') Q(s', a), zero bootstrap at terminal states."""
    y = np.array([t.reward for t in batch], dtype=float)
    live = [i for i, t in enumerate(batch) if not t.terminal]
    if live:
        with nn.no_grad():
            out = policy.evaluate([batch[i].next_features for i in live], train=False)
        pi = nn.softmax(out.logits.data / weights.tau, out.mask)
        v = (pi * np.where(out.mask, out.q.data, 0.0)).sum(axis=1)
        y[live] += weights.gamma * v
    return y


def _column(a: nn.Tensor, idx: np.ndarray) -> nn.Tensor:
    return nn.reshape(nn.gather(a, idx[:, None]), (len(idx),))


def _oracle_actions(batch: Sequence[Transition]) -> np.ndarray:
    if any(t.oracle_action is None for t in batch):
        raise ValueError("every sample needs an oracle action")
    return np.array([t.oracle_action for t in batch], dtype=np.intp)


def acer_loss(policy, batch: Sequence[Transition], weights: LossWeights, rng=None, *,
              margin: bool = False, constants: dict | None = None):
    """Build the ACER-lite loss graph.

    Returns ``(total, report, constants)``; ``constants`` holds the detached
    quantities (bootstrap target, truncated-ratio-weighted advantage) so that
    a finite-difference check can hold them fixed.
    """
    a = np.array([t.action for t in batch], dtype=np.intp)
    out = policy.evaluate([t.features for t in batch], train=True, rng=rng)
    mask = out.mask
    if not mask[np.arange(len(a)), a].all():
        raise ValueError("a stored action is masked")
    logits = out.logits if weights.tau == 1.0 else nn.mul(out.logits, 1.0 / weights.tau)
    logp = nn.masked_fill(nn.masked_log_softmax(logits, mask), mask)
    q_sa = _column(out.q, a)
    logp_a = _column(logp, a)

    if constants is None:
        pi = np.where(mask, np.exp(logp.data), 0.0)
        v = (pi * np.where(mask, out.q.data, 0.0)).sum(axis=1)
        adv = q_sa.data - v
        mu = np.array([t.mu for t in batch])
        rho = np.minimum(weights.truncation, pi[np.arange(len(a)), a] / mu)
        constants = {"y": bootstrap_targets(policy, batch, weights), "coef": rho * adv}

    l_q = nn.mean(nn.square(nn.add(q_sa, -constants["y"])))
    l_pi = nn.neg(nn.mean(nn.mul(logp_a, constants["coef"])))
    p = nn.mul(nn.exp(logp), mask.astype(float))
    l_ent = nn.mean(nn.sum(nn.mul(p, logp), axis=1))  # negative entropy
    total = nn.add(nn.add(nn.mul(l_q, weights.q), nn.mul(l_pi, weights.pi)), nn.mul(l_ent, weights.ent))
    report = LossReport(0.0, l_q.item(), l_pi.item(), 0.0, l_ent.item())
    if margin:
        l_il = margin_loss(out.q, mask, _oracle_actions(batch), weights.margin)
        total = nn.add(total, nn.mul(l_il, weights.il))
        report.il = l_il.item()
    report.total = total.item()
    return total, report, constants


def margin_loss(q: nn.Tensor, mask: np.ndarray, expert: np.ndarray, margin: float) -> nn.Tensor:
    """mean_b [ max_{a valid} (Q(s,a) + margin * [a != a_E]) - Q(s, a_E) ]"""
    expert = np.asarray(expert, dtype=np.intp)
    bonus = np.full(q.shape, margin)
    bonus[np.arange(len(expert)), expert] = 0.0
    return nn.mean(nn.add(nn.masked_max(nn.add(q, bonus), mask), nn.neg(_column(q, expert))))


def bc_loss(policy, batch: Sequence[Transition], rng=None, tau: float = 1.0):
    target = _oracle_actions(batch)
    out = policy.evaluate([t.features for t in batch], train=True, rng=rng)
    if not out.mask[np.arange(len(target)), target].all():
        raise ValueError("an oracle action is masked")
    logits = out.logits if tau == 1.0 else nn.mul(out.logits, 1.0 / tau)
    logp = nn.masked_fill(nn.masked_log_softmax(logits, out.mask), out.mask)
    ce = nn.neg(nn.mean(_column(logp, target)))
    return ce, LossReport(ce.item(), il=ce.item())


def mode_loss(policy, batch, mode: str, weights: LossWeights, rng=None, constants=None):
    """Loss graph for one learning mode; returns ``(total, report, constants)``."""
    if mode == "BC":
        total, report = bc_loss(policy, batch, rng, weights.tau)
        return total, report, {}
    if mode in ("RL", "ILfOD"):
        return acer_loss(policy, batch, weights, rng, constants=constants)
    if mode == "ILfOS":
        return acer_loss(policy, batch, weights, rng, margin=True, constants=constants)
    raise ValueError(f"unknown learning mode {mode!r}")


def _step(optimizer: nn.Adam, total: nn.Tensor) -> None:
    optimizer.zero_grad()
    total.backward()
    optimizer.step()


def acer_update(policy, batch, weights: LossWeights, optimizer: nn.Adam, rng=None) -> LossReport:
    total, report, _ = acer_loss(policy, batch, weights, rng)
    _step(optimizer, total)
    return report


def ilfos_update(policy, batch, weights: LossWeights, optimizer: nn.Adam, rng=None) -> LossReport:
    total, report, _ = acer_loss(policy, batch, weights, rng, margin=True)
    _step(optimizer, total)
    return report


def bc_update(policy, batch, optimizer: nn.Adam, rng=None, tau: float = 1.0) -> LossReport:
    total, report = bc_loss(policy, batch, rng, tau)
    _step(optimizer, total)
    return report


def ilfod_collect(run: Callable[[bool], list[Transition]], buffer: ReplayBuffer, mix: float,
                  rng: np.random.Generator) -> tuple[list[Transition], bool]:
    """Roll out one episode, by the oracle with probability ``mix``, and store it."""
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    by_oracle = bool(rng.random() < mix)
    transitions = run(by_oracle)
    buffer.extend(transitions)
    return transitions, by_oracle


# ---------------------------------------------------------------------------
# learner


LOSS_COLUMNS = ("episode", "L_Q", "L_pi", "L_IL", "L_ent", "buffer_size", "oracle_fraction",
                "oracle_transition_fraction")


@dataclass
class Learner:
    """Owns the buffer and optimiser of one run; one gradient step per finished episode."""

    policy: object
    mode: str
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    batch_size: int = 64
    capacity: int = 50_000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown learning mode {self.mode!r}")
        ss = np.random.SeedSequence(self.seed)
        buf_seed, drop_seed = ss.spawn(2)
        self.buffer = ReplayBuffer(self.capacity, np.random.default_rng(buf_seed))
        self.rng = np.random.default_rng(drop_seed)
        self.optimizer = nn.Adam(self.policy.named_parameters(), lr=self.lr)
        self.episodes = 0
        self.updates = 0
        self.loss_rows: list[tuple] = []

    @property
    def needs_labels(self) -> bool:
        return self.mode in ("BC", "ILfOS")

    def observe(self, transitions: Sequence[Transition], stored: bool = False) -> LossReport:
        """Store one finished episode (unless already stored) and run one update."""
        if not stored:
            self.buffer.extend(transitions)
        self.episodes += 1
        batch = self.buffer.sample(self.batch_size)
        if self.mode == "BC":
            report = bc_update(self.policy, batch, self.optimizer, self.rng, self.weights.tau)
        elif self.mode == "ILfOS":
            report = ilfos_update(self.policy, batch, self.weights, self.optimizer, self.rng)
        else:
            report = acer_update(self.policy, batch, self.weights, self.optimizer, self.rng)
        self.updates += 1
        assert self.updates == self.episodes
        self.loss_rows.append((self.episodes, report.q, report.pi, report.il, report.ent,
                               len(self.buffer), self.buffer.oracle_fraction,
                               self.buffer.oracle_transition_fraction))
        return report

    def state(self) -> dict:
        return {
            "episodes": self.episodes,
            "updates": self.updates,
            "loss_rows": list(self.loss_rows),
            "buffer": self.buffer.state(),
            "rng": self.rng.bit_generator.state,
            "optimizer": self.optimizer.state_dict(),
        }

    def restore(self, state: dict) -> None:
        self.episodes = state["episodes"]
        self.updates = state["updates"]
        self.loss_rows = list(state["loss_rows"])
        self.buffer.restore(state["buffer"])
        self.rng.bit_generator.state = state["rng"]
        self.optimizer.load_state_dict(state["optimizer"])


# ---------------------------------------------------------------------------
# toy MDP for sanity checks


class TabularPolicy(nn.Module):
    """Logit and Q tables indexed by integer state; features are state ids."""

    def __init__(self, n_states: int, n_actions: int):
        self.logits = nn.parameter(np.zeros((n_states, n_actions)))
        self.q = nn.parameter(np.zeros((n_states, n_actions)))

    def evaluate(self, batch, train=False, rng=None) -> PolicyOutput:
        rows = np.asarray(batch, dtype=np.intp)
        return PolicyOutput(nn.take_rows(self.logits, rows), nn.take_rows(self.q, rows),
                            np.ones((len(rows), self.logits.shape[1]), dtype=bool))


@dataclass(frozen=True)
class ToyMDP:
    """Episodic two-state MDP: ``table[s][a] = (reward, next state or None)``."""

    table: tuple = (((0.0, 1), (1.0, None)),
                    ((2.0, None), (0.0, None)))
    start: int = 0

    def step(self, s: int, a: int) -> tuple[float, int | None]:
        return self.table[s][a]


def value_iteration(mdp: ToyMDP, gamma: float, tol: float = 1e-12) -> np.ndarray:
    n_s, n_a = len(mdp.table), len(mdp.table[0])
    q = np.zeros((n_s, n_a))
    while True:
        v = q.max(axis=1)
        new = np.array([[r + (gamma * v[s2] if s2 is not None else 0.0) for r, s2 in row]
                        for row in mdp.table])
        if np.abs(new - q).max() < tol:
            return new
        q = new


def train_toy(mdp: ToyMDP = ToyMDP(), episodes: int = 3000, gamma: float = 0.9, lr: float = 0.05,
              batch_size: int = 16, seed: int = 0) -> TabularPolicy:
    """Boltzmann rollouts plus one ``acer_update`` per episode on the toy MDP."""
    rng = np.random.default_rng(seed)
    pol = TabularPolicy(len(mdp.table), len(mdp.table[0]))
    opt = nn.Adam(pol.named_parameters(), lr=lr)
    buf = ReplayBuffer(10_000, rng)
    w = LossWeights(gamma=gamma)
    for _ in range(episodes):
        s = mdp.start
        episode = []
        while s is not None:
            with nn.no_grad():
                out = pol.evaluate([s])
            a, p = select_action(out, rng)
            r, s2 = mdp.step(s, a)
            episode.append(Transition(s, "toy", a, p, r, s2, s2 is None))
            s = s2
        buf.extend(episode)
        acer_update(pol, buf.sample(batch_size), w, opt, rng)
    return pol
