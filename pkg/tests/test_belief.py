import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmgnn.belief import initial_belief, project, select_domain, update, update_system
from dmgnn.dialogue import DialogueAct
from dmgnn.ontology import DONTCARE, NONE, degree_pointer, load_ontology, query


def test_inform_sets_value_and_count(toy):
    b = update(initial_belief(toy), [DialogueAct("inform", "food", "cuisine", "thai")])
    assert b.inform["food"]["cuisine"] == "thai"
    brute = sum(1 for e in toy.domain("food").database if e["cuisine"] == "thai")
    assert b.counts["food"] == brute == 2
    assert b.degree("food").tolist() == degree_pointer(2).tolist()


def test_bye_only_sets_terminated(onto):
    b0 = initial_belief(onto)
    b1 = update(b0, [DialogueAct("bye")])
    assert b1.terminated and not b0.terminated
    assert b1.inform == b0.inform and b1.requested == b0.requested and b1.counts == b0.counts
    assert b1.offered == b0.offered and b1.booked == b0.booked


def test_last_inform_wins(onto):
    b = update(initial_belief(onto), [DialogueAct("inform", "hotel", "area", "north"),
                                      DialogueAct("inform", "hotel", "area", "south")])
    assert b.inform["hotel"]["area"] == "south"


def test_update_is_pure(onto):
    b0 = initial_belief(onto)
    snap = b0.digest_json()
    update(b0, [DialogueAct("inform", "hotel", "area", "north"), DialogueAct("request", "hotel", "phone")])
    assert b0.digest_json() == snap


def test_unknown_slot_rejected(onto):
    with pytest.raises(KeyError):
        update(initial_belief(onto), [DialogueAct("inform", "hotel", "colour", "red")])


def test_request_flag(onto):
    b = update(initial_belief(onto), [DialogueAct("request", "police", "phone")])
    assert b.requested["police"]["phone"]
    b = update_system(b, [DialogueAct("inform", "police", "phone", "1")])
    assert not b.requested["police"]["phone"] and b.informed["police"]["phone"] == "1"


def test_offer_invalidated_by_conflicting_constraint(toy):
    b = update(initial_belief(toy), [DialogueAct("inform", "food", "cuisine", "thai")])
    b = update_system(b, [DialogueAct("offer", "food", None, "a")])
    b = update(b, [DialogueAct("inform", "food", "area", "south")])
    assert b.offered["food"] is None


def test_select_domain_rules(onto):
    b = initial_belief(onto)
    assert select_domain(b, [DialogueAct("inform", "hotel", "area", "north")]) == "hotel"
    b.active_domain = "train"
    assert select_domain(b, [DialogueAct("thank")]) == "train"
    mixed = [DialogueAct("inform", "hotel", "area", "north"), DialogueAct("request", "restaurant", "phone")]
    assert select_domain(b, mixed) == "restaurant"


def test_project_view(onto):
    b = update(initial_belief(onto), [DialogueAct("inform", "restaurant", "food", onto.domain("restaurant").slot("food").values[0])])
    v = project(b, "restaurant")
    dom = onto.domain("restaurant")
    assert v.slot_count == len(dom.constraint_slots) + len(dom.request_slots)
    assert project(v, "restaurant") is v
    assert v.inform is b.inform["restaurant"] and v.count == b.counts["restaurant"]
    assert np.array_equal(v.degree, b.degree("restaurant"))
    with pytest.raises(ValueError):
        project(v, "hotel")


def test_project_never_mixes_domains(onto):
    b = initial_belief(onto)
    for d in onto.domain_names:
        b.offered[d] = f"sentinel-{d}"
        b.counts[d] = hash(d) % 1000
    for d in onto.domain_names:
        v = project(b, d)
        assert v.offered == f"sentinel-{d}" and v.count == hash(d) % 1000
        assert set(v.inform) == set(onto.domain(d).constraint_slots)


@st.composite
def user_turns(draw, onto):
    acts = []
    for _ in range(draw(st.integers(1, 3))):
        dom = onto.domain(draw(st.sampled_from(onto.domain_names)))
        kind = draw(st.sampled_from(["inform", "request", "bye", "thank"]))
        if kind == "inform" and dom.constraint_slots:
            s = draw(st.sampled_from(dom.constraint_slots))
            v = draw(st.sampled_from(list(dom.slot(s).values) + [DONTCARE]))
            acts.append(DialogueAct("inform", dom.name, s, v))
        elif kind == "request" and dom.request_slots:
            acts.append(DialogueAct("request", dom.name, draw(st.sampled_from(dom.request_slots))))
        elif kind in ("bye", "thank"):
            acts.append(DialogueAct(kind))
    return acts


ONTO = load_ontology()


@settings(max_examples=80, deadline=None)
@given(st.lists(user_turns(ONTO), min_size=1, max_size=6))
def test_degree_invariant_and_determinism(turns):
    b1 = b2 = initial_belief(ONTO)
    for acts in turns:
        b1, b2 = update(b1, acts), update(b2, acts)
        assert b1.digest_json() == b2.digest_json()
        for dom in ONTO.domains:
            d = dom.name
            assert b1.degree(d).sum() == 1
            assert b1.counts[d] == len(query(dom, b1.find_constraints(d)))
            assert all(v != NONE for v in b1.find_constraints(d).values())
