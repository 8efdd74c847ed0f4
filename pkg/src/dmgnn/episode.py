"""Environment loop, reward and evaluation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from . import nncore as nn
from .belief import BeliefState, initial_belief, select_domain, update, update_system
from .dialogue import PATIENCE, AgendaUser, DialogueAct, UserGoal, goal_entities, oracle_act, user_step, validate_act
from .learn import Transition, select_action
from .ontology import Ontology

TURN_PENALTY = -1.0
DOMAIN_REWARD = 5.0
SUCCESS_BONUS = 40.0


# ---------------------------------------------------------------------------
# agents


@dataclass
class Decision:
    acts: list[DialogueAct]
    action: int | None = None
    prob: float = 1.0
    features: object = None


class OracleAgent:
    """The rule-based teacher.

    Without a ``policy`` it emits its full multi-act turn.  With one, the
    teacher's turn is mapped into that policy's action layout and the
    executed acts are exactly what that action index realises, so stored
    demonstrations are consistent with the learner's action space.
    """

    is_oracle = True

    def __init__(self, policy=None):
        self.policy = policy

    def decide(self, belief: BeliefState, domain: str, rng, features=None) -> Decision:
        acts = oracle_act(belief, domain)
        if self.policy is None:
            return Decision(acts)
        idx = self.policy.action_for_acts(acts, domain)
        if features is None:
            features = self.policy.featurize(belief, domain)
        return Decision(self.policy.realize(idx, belief, domain), idx, 1.0, features)


class PolicyAgent:
    is_oracle = False

    def __init__(self, policy, mode: str = "greedy", tau: float = 1.0):
        self.policy = policy
        self.mode = mode
        self.tau = tau

    def decide(self, belief: BeliefState, domain: str, rng, features=None) -> Decision:
        if features is None:
            features = self.policy.featurize(belief, domain)
        with nn.no_grad():
            out = self.policy.evaluate([features], train=False)
        idx, prob = select_action(out, rng, self.mode, self.tau)
        if not out.mask[0, idx]:
            raise AssertionError("masked action selected")
        return Decision(self.policy.realize(idx, belief, domain), idx, prob, features)


# ---------------------------------------------------------------------------
# goal bookkeeping


def correct_informs(belief: BeliefState, goal: UserGoal, entities=None) -> set[tuple[str, str]]:
    """(domain, slot) pairs whose informed value belongs to some goal-satisfying entity."""
    entities = entities if entities is not None else goal_entities(belief.ontology, goal)
    out = set()
    for d, told in belief.informed.items():
        if d not in entities:
            continue
        for s, v in told.items():
            if any(e[s] == v for e in entities[d]):
                out.add((d, s))
    return out


def booking_ok(belief: BeliefState, goal: UserGoal, domain: str, entities=None) -> bool:
    g = goal[domain]
    b = belief.booked[domain]
    if g.book is None or b is None:
        return False
    entities = entities if entities is not None else goal_entities(belief.ontology, goal)
    names = {e["name"] for e in entities[domain]}
    return b["entity"] in names and all(b["values"].get(s) == v for s, v in g.book.items())


def solved_domains(belief: BeliefState, goal: UserGoal, entities=None) -> set[str]:
    """Goal domains whose find (and book) tasks are objectively solved."""
    entities = entities if entities is not None else goal_entities(belief.ontology, goal)
    correct = correct_informs(belief, goal, entities)
    out = set()
    for g in goal.domains:
        d = g.domain
        names = {e["name"] for e in entities[d]}
        if belief.offered[d] not in names:
            continue
        if not all((d, s) in correct for s in g.request):
            continue
        if g.book is not None and not booking_ok(belief, goal, d, entities):
            continue
        out.add(d)
    return out


def reward(before: BeliefState, after: BeliefState, done: bool, goal: UserGoal,
           awarded: frozenset | set = frozenset()) -> float:
    """Points for one system turn.

    +5 if some goal domain becomes solved (at most once per domain, tracked
    through ``awarded``), -1 otherwise, plus 40 on the terminal turn when
    every goal domain has been solved.
    """
    ents = goal_entities(after.ontology, goal)
    points, _ = _turn_reward(solved_domains(before, goal, ents), solved_domains(after, goal, ents),
                             set(awarded), done, goal)
    return points


def _turn_reward(before: set, now: set, awarded: set, done: bool, goal: UserGoal) -> tuple[float, set]:
    newly = now - before - awarded
    points = DOMAIN_REWARD if newly else TURN_PENALTY
    if done and set(goal.domain_names) <= (now | awarded | newly):
        points += SUCCESS_BONUS
    return points, newly


# ---------------------------------------------------------------------------
# results


@dataclass
class EpisodeResult:
    goal: UserGoal
    turns: int
    solved: dict[str, bool]
    requested: frozenset
    informed: frozenset
    correct: frozenset
    book_success: dict[str, bool]
    complete: bool
    rewards: tuple[float, ...] = ()

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))

    @property
    def hits(self) -> int:
        return len(self.correct & self.requested)

    @property
    def precision(self) -> float:
        if not self.informed:
            return 1.0 if not self.requested else 0.0
        return self.hits / len(self.informed)

    @property
    def recall(self) -> float:
        if not self.requested:
            return 1.0
        return self.hits / len(self.requested)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    @property
    def book_rate(self) -> float | None:
        if not self.book_success:
            return None
        return sum(self.book_success.values()) / len(self.book_success)

    @property
    def success(self) -> bool:
        br = self.book_rate
        return self.recall == 1.0 and (br is None or br == 1.0)


def episode_result(belief: BeliefState, goal: UserGoal, turns: int, complete: bool,
                   rewards: Sequence[float] = ()) -> EpisodeResult:
    ents = goal_entities(belief.ontology, goal)
    solved = solved_domains(belief, goal, ents)
    requested = frozenset((g.domain, s) for g in goal.domains for s in g.request)
    informed = frozenset((d, s) for d, told in belief.informed.items() for s in told)
    return EpisodeResult(
        goal=goal,
        turns=turns,
        solved={g.domain: g.domain in solved for g in goal.domains},
        requested=requested,
        informed=informed,
        correct=frozenset(correct_informs(belief, goal, ents)),
        book_success={g.domain: booking_ok(belief, goal, g.domain, ents)
                      for g in goal.domains if g.book is not None},
        complete=complete,
        rewards=tuple(rewards),
    )


# ---------------------------------------------------------------------------
# loop


def run_episode(agent, user: AgendaUser, belief: BeliefState | None = None, rng=None, *,
                learner=None, collect: bool = True, label: bool = False,
                objective: UserGoal | None = None, log: IO[str] | None = None) -> tuple[EpisodeResult, list[Transition]]:
    """Play one dialogue between ``agent`` and ``user``.

    ``learner`` is the policy whose features and action indices go into the
    emitted transitions (defaults to the agent's own policy when ``collect``
    is set; no transitions are produced without one).  ``label`` queries the teacher on
    every visited state.  ``objective`` is the goal used for reward and
    metrics; it defaults to the user's goal.
    """
    onto: Ontology = user.ontology
    goal = objective if objective is not None else user.goal
    if learner is None and collect:
        learner = getattr(agent, "policy", None)
    belief = belief if belief is not None else initial_belief(onto)
    ents = goal_entities(onto, goal)

    user_acts, done = user_step(user, [])
    b = update(belief, user_acts)
    b.active_domain = select_domain(belief, user_acts)
    feats = learner.featurize(b, b.active_domain) if learner is not None else None
    transitions: list[Transition] = []
    rewards: list[float] = []
    awarded: set[str] = set()
    solved_before: set[str] = set()
    turns = 0
    while not done:
        d = b.active_domain
        dec = agent.decide(b, d, rng, feats)
        for act in dec.acts:
            validate_act(act, onto, "system")
        teacher = None
        if label and learner is not None:
            teacher = learner.action_for_acts(oracle_act(b, d), d)
        b_sys = update_system(b, dec.acts)
        user_acts, done = user_step(user, dec.acts)
        turns += 1

        solved_now = solved_domains(b_sys, goal, ents)
        r, newly = _turn_reward(solved_before, solved_now, awarded, done, goal)
        awarded |= newly
        rewards.append(r)

        b_next = update(b_sys, user_acts)
        b_next.active_domain = select_domain(b_sys, user_acts)
        next_feats = None
        if learner is not None and not done:
            next_feats = learner.featurize(b_next, b_next.active_domain)
        if learner is not None:
            if dec.action is None:
                raise ValueError("agent produced no action index for the learner")
            transitions.append(Transition(dec.features, d, dec.action, dec.prob, r, next_feats, done,
                                          getattr(agent, "is_oracle", False), teacher))
        if log is not None:
            log.write(json.dumps({
                "turn": turns, "domain": d,
                "system_acts": [str(a) for a in dec.acts],
                "action": dec.action, "prob": dec.prob, "reward": r,
                "user_acts": [str(a) for a in user_acts], "done": done,
                "belief": b_sys.digest(),
            }, separators=(",", ":")) + "\n")
        solved_before = solved_now
        b, feats = b_next, next_feats
    return episode_result(b, goal, turns, user.completed, rewards), transitions


# ---------------------------------------------------------------------------
# metrics


METRIC_FIELDS = ("inform_p", "inform_r", "inform_f1", "book_rate", "success", "complete",
                 "avg_turns_success", "avg_turns_all", "avg_reward")


@dataclass(frozen=True)
class MetricsReport:
    n: int
    inform_p: float
    inform_r: float
    inform_f1: float
    book_rate: float
    success: float
    complete: float
    avg_turns_success: float
    avg_turns_all: float
    avg_reward: float

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_FIELDS}


def metrics(results: Sequence[EpisodeResult]) -> MetricsReport:
    if not results:
        raise ValueError("metrics need at least one episode")
    books = [r.book_rate for r in results if r.book_rate is not None]
    wins = [r.turns for r in results if r.success]
    return MetricsReport(
        n=len(results),
        inform_p=float(np.mean([r.precision for r in results])),
        inform_r=float(np.mean([r.recall for r in results])),
        inform_f1=float(np.mean([r.f1 for r in results])),
        book_rate=float(np.mean(books)) if books else math.nan,
        success=float(np.mean([r.success for r in results])),
        complete=float(np.mean([r.complete for r in results])),
        avg_turns_success=float(np.mean(wins)) if wins else math.nan,
        avg_turns_all=float(np.mean([r.turns for r in results])),
        avg_reward=float(np.mean([r.total_reward for r in results])),
    )


def evaluate_agent(agent, ontology: Ontology, n: int, seed, max_domains: int = 3,
                   patience: int = PATIENCE, log: IO[str] | None = None) -> list[EpisodeResult]:
    """Greedy evaluation on ``n`` fresh goals drawn from ``seed``."""
    from .dialogue import sample_goal

    if n < 1:
        raise ValueError("evaluation needs at least one dialogue")
    ss = np.random.SeedSequence(seed)
    out = []
    for child in ss.spawn(n):
        g_rng, a_rng = (np.random.default_rng(s) for s in child.spawn(2))
        goal = sample_goal(ontology, g_rng, max_domains)
        res, _ = run_episode(agent, AgendaUser(goal, ontology, patience=patience), rng=a_rng,
                             collect=False, log=log)
        out.append(res)
    return out
