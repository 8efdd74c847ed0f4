import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmgnn.belief import initial_belief, update, update_system
from dmgnn.dialogue import AgendaUser, DialogueAct, DomainGoal, UserGoal, sample_goal
from dmgnn.episode import (
    DOMAIN_REWARD,
    SUCCESS_BONUS,
    TURN_PENALTY,
    EpisodeResult,
    OracleAgent,
    PolicyAgent,
    _turn_reward,
    evaluate_agent,
    metrics,
    reward,
    run_episode,
)
from dmgnn.ontology import load_ontology, query
from dmgnn.policy import make_policy

ONTO = load_ontology()


def _result(requested, informed, correct, book=None, complete=True):
    return EpisodeResult(UserGoal(()), 1, {}, frozenset(requested), frozenset(informed), frozenset(correct),
                         book or {}, complete)


def test_precision_recall_examples():
    r = _result({("r", "phone"), ("r", "address")}, {("r", "phone"), ("r", "postcode")},
                {("r", "phone"), ("r", "postcode")})
    assert (r.precision, r.recall, r.f1) == (0.5, 0.5, 0.5)
    exact = _result({("r", "phone")}, {("r", "phone")}, {("r", "phone")})
    assert (exact.precision, exact.recall, exact.f1) == (1.0, 1.0, 1.0)


def test_precision_recall_edges():
    nothing = _result(set(), set(), set())
    assert (nothing.precision, nothing.recall) == (1.0, 1.0)
    silent = _result({("r", "phone")}, set(), set())
    assert (silent.precision, silent.recall, silent.f1) == (0.0, 0.0, 0.0)
    wrong = _result({("r", "phone")}, {("r", "phone")}, set())
    assert wrong.precision == 0.0 and not wrong.success


def test_success_rule():
    ok = _result({("r", "phone")}, {("r", "phone")}, {("r", "phone")}, {"r": True})
    assert ok.success and ok.book_rate == 1.0
    assert not _result({("r", "phone")}, {("r", "phone")}, {("r", "phone")}, {"r": False}).success
    assert _result(set(), set(), set()).book_rate is None


def test_metrics_aggregate():
    rs = [_result({("r", "phone")}, {("r", "phone")}, {("r", "phone")}),
          _result({("r", "phone")}, set(), set(), complete=False)]
    m = metrics(rs)
    assert m.success == 0.5 and m.complete == 0.5 and m.inform_r == 0.5
    assert math.isnan(m.book_rate)
    with pytest.raises(ValueError):
        metrics([])


def test_reward_schedule_hand_sum():
    goal = UserGoal((DomainGoal("a", {}, ()), DomainGoal("b", {}, ())))
    solved = [set()] * 4 + [{"a"}] * 3 + [{"a", "b"}]
    before, awarded, total = set(), set(), 0.0
    for t, now in enumerate(solved, 1):
        pts, newly = _turn_reward(before, now, awarded, t == 8, goal)
        awarded |= newly
        before = now
        total += pts
    assert total == 6 * -1 + 5 + 5 + 40 == 44
    before, total = set(), 0.0
    for t in range(1, 9):
        total += _turn_reward(set(), set(), set(), t == 8, goal)[0]
    assert total == -8


def _restaurant_goal():
    dom = ONTO.domain("restaurant")
    ent = dom.database[0]
    goal = UserGoal((DomainGoal("restaurant", {"food": ent["food"]}, ("phone",)),))
    return goal, query(dom, goal["restaurant"].find)[0]


def test_reward_on_beliefs():
    goal, ent = _restaurant_goal()
    b0 = update(initial_belief(ONTO), [DialogueAct("inform", "restaurant", "food", ent["food"])])
    assert reward(b0, update_system(b0, [DialogueAct("reqmore")]), False, goal) == TURN_PENALTY
    b1 = update_system(b0, [DialogueAct("offer", "restaurant", None, ent["name"]),
                            DialogueAct("inform", "restaurant", "phone", ent["phone"])])
    assert reward(b0, b1, False, goal) == DOMAIN_REWARD
    assert reward(b0, b1, True, goal) == DOMAIN_REWARD + SUCCESS_BONUS
    assert reward(b0, b1, False, goal, {"restaurant"}) == TURN_PENALTY


def test_complete_without_success():
    dom = ONTO.domain("restaurant")
    user_goal, first = _restaurant_goal()
    others = [e for e in query(dom, {"food": first["food"]}) if e["area"] != first["area"]
              and e["phone"] != first["phone"]]
    assert others
    objective = UserGoal((DomainGoal("restaurant", {"food": first["food"], "area": others[0]["area"]}, ("phone",)),))
    res, _ = run_episode(OracleAgent(), AgendaUser(user_goal, ONTO), objective=objective, collect=False)
    assert res.complete and not res.success


def test_never_informing_fails():
    class Requester:
        is_oracle = False
        policy = None

        def decide(self, belief, domain, rng, features=None):
            from dmgnn.episode import Decision
            return Decision([DialogueAct("reqmore")])

    goal, _ = _restaurant_goal()
    res, ts = run_episode(Requester(), AgendaUser(goal, ONTO), collect=False)
    assert not res.success and res.recall == 0.0 and ts == []
    assert res.total_reward == -res.turns


def test_oracle_episode_deterministic():
    goal = sample_goal(ONTO, 5)
    a, _ = run_episode(OracleAgent(), AgendaUser(goal, ONTO), collect=False)
    b, _ = run_episode(OracleAgent(), AgendaUser(goal, ONTO), collect=False)
    assert a == b and a.success


def test_evaluate_agent_needs_dialogues():
    with pytest.raises(ValueError):
        evaluate_agent(OracleAgent(), ONTO, 0, 0)


POLICIES = {k: make_policy(k, ONTO, 0) for k in ("UHGNN", "FNN-REF")}


def check_episode(res, ts):
    assert len(ts) == res.turns == len(res.rewards)
    for i, r in enumerate(res.rewards):
        base = r - SUCCESS_BONUS if (i == len(res.rewards) - 1 and r >= SUCCESS_BONUS - 1) else r
        assert base in (TURN_PENALTY, DOMAIN_REWARD)
    assert sum(t.reward for t in ts) == res.total_reward
    assert ts[-1].terminal and not any(t.terminal for t in ts[:-1])
    if res.success:
        assert res.recall == 1.0 and res.book_rate in (None, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(sorted(POLICIES)), st.booleans())
def test_episode_accounting(seed, kind, oracle):
    rng = np.random.default_rng(seed)
    pol = POLICIES[kind]
    agent = OracleAgent(pol) if oracle else PolicyAgent(pol, "boltzmann")
    res, ts = run_episode(agent, AgendaUser(sample_goal(ONTO, rng), ONTO), rng=rng)
    check_episode(res, ts)
    assert all(t.mu == 1.0 for t in ts) if oracle else all(0 < t.mu <= 1 for t in ts)


def test_log_is_jsonl(tmp_path):
    import json
    path = tmp_path / "log.jsonl"
    with open(path, "w") as fh:
        res = evaluate_agent(OracleAgent(), ONTO, 3, 0, log=fh)
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert len(lines) == sum(r.turns for r in res)
    assert {"turn", "system_acts", "user_acts", "reward", "done"} <= set(lines[0])
