"""Deterministic multi-domain belief tracking and domain selection.

The tracker is rule based: every component is exact (values, booleans or
one-hot vectors), so the same act sequence always yields the same state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dialogue import GENERAL, DialogueAct, validate_act
from .ontology import (
    DONTCARE,
    FIND,
    NONE,
    REQUEST,
    Ontology,
    count_matches,
    degree_pointer,
    query,
)


@dataclass
class BeliefState:
    ontology: Ontology = field(repr=False, compare=False)
    inform: dict[str, dict[str, str]]
    requested: dict[str, dict[str, bool]]
    offered: dict[str, str | None]
    booked: dict[str, dict | None]
    informed: dict[str, dict[str, str]]
    counts: dict[str, int]
    terminated: bool = False
    user_acts: tuple[DialogueAct, ...] = ()
    system_acts: tuple[DialogueAct, ...] = ()
    active_domain: str | None = None
    turn: int = 0

    def degree(self, domain: str) -> np.ndarray:
        return degree_pointer(self.counts[domain])

    def find_constraints(self, domain: str) -> dict[str, str]:
        dom = self.ontology.domain(domain)
        inf = self.inform[domain]
        return {s: inf[s] for s in dom.find_slots if inf[s] != NONE}

    def matches(self, domain: str) -> list[Mapping[str, str]]:
        return query(self.ontology.domain(domain), self.find_constraints(domain))

    def copy(self) -> "BeliefState":
        return BeliefState(
            self.ontology,
            {d: dict(v) for d, v in self.inform.items()},
            {d: dict(v) for d, v in self.requested.items()},
            dict(self.offered),
            {d: (dict(v) if v else None) for d, v in self.booked.items()},
            {d: dict(v) for d, v in self.informed.items()},
            dict(self.counts),
            self.terminated,
            self.user_acts,
            self.system_acts,
            self.active_domain,
            self.turn,
        )

    def digest(self) -> dict:
        """Stable, JSON-serialisable summary for trajectory logs."""
        out: dict = {"turn": self.turn, "active_domain": self.active_domain,
                     "terminated": self.terminated, "domains": {}}
        for dom in self.ontology.domains:
            d = dom.name
            out["domains"][d] = {
                "inform": {s: self.inform[d][s] for s in dom.constraint_slots if self.inform[d][s] != NONE},
                "requested": [s for s in dom.request_slots if self.requested[d][s]],
                "offered": self.offered[d],
                "booked": self.booked[d]["reference"] if self.booked[d] else None,
                "count": self.counts[d],
            }
        out["user_acts"] = [str(a) for a in self.user_acts]
        out["system_acts"] = [str(a) for a in self.system_acts]
        return out

    def digest_json(self) -> str:
        return json.dumps(self.digest(), separators=(",", ":"))


def initial_belief(ontology: Ontology) -> BeliefState:
    inform, requested, offered, booked, informed, counts = {}, {}, {}, {}, {}, {}
    for dom in ontology.domains:
        d = dom.name
        inform[d] = {s: NONE for s in dom.constraint_slots}
        requested[d] = {s: False for s in dom.request_slots}
        offered[d] = None
        booked[d] = None
        informed[d] = {}
        counts[d] = len(dom.database)
    return BeliefState(ontology, inform, requested, offered, booked, informed, counts)


def update(belief: BeliefState, user_acts: Sequence[DialogueAct]) -> BeliefState:
    """Apply one user turn; returns a new state and leaves ``belief`` untouched."""
    onto = belief.ontology
    for act in user_acts:
        validate_act(act, onto, "user")
    new = belief.copy()
    touched = set()
    for act in user_acts:
        if act.intent == "inform":
            dom = onto.domain(act.domain)
            kind = dom.slot(act.slot).kind
            if kind == REQUEST:
                raise ValueError(f"user cannot inform requestable slot {act.domain}.{act.slot}")
            new.inform[act.domain][act.slot] = act.value
            if kind == FIND:
                touched.add(act.domain)
        elif act.intent == "request":
            new.requested[act.domain][act.slot] = True
        elif act.intent == "bye":
            new.terminated = True
        elif act.intent == "dontcare" and new.active_domain is not None:
            # blanket "anything is fine" for the unfilled find slots of the active domain
            d = new.active_domain
            for s in onto.domain(d).find_slots:
                if new.inform[d][s] == NONE:
                    new.inform[d][s] = DONTCARE
            touched.add(d)
    for d in touched:
        dom = onto.domain(d)
        new.counts[d] = count_matches(dom, new.find_constraints(d))
        name = new.offered[d]
        if name is not None:
            ent = dom.entity_by_name[name]
            if any(ent[s] != v for s, v in new.find_constraints(d).items() if v != DONTCARE):
                new.offered[d] = None
    new.user_acts = tuple(user_acts)
    new.turn = belief.turn + 1
    return new


def update_system(belief: BeliefState, system_acts: Sequence[DialogueAct]) -> BeliefState:
    """Record the system turn: offers, informs and bookings."""
    onto = belief.ontology
    for act in system_acts:
        validate_act(act, onto, "system")
    new = belief.copy()
    for act in system_acts:
        d = act.domain
        if act.intent == "offer":
            new.offered[d] = act.value
        elif act.intent == "inform":
            new.informed[d][act.slot] = act.value
            new.requested[d][act.slot] = False
        elif act.intent == "book":
            name = new.offered[d]
            dom = onto.domain(d)
            new.booked[d] = {
                "reference": act.value,
                "entity": name,
                "values": {s: new.inform[d][s] for s in dom.book_slots},
            }
    new.system_acts = tuple(system_acts)
    return new


def select_domain(belief: BeliefState, user_acts: Iterable[DialogueAct]) -> str:
    """Domain of the last domain-bearing act, else the previous active domain."""
    chosen = None
    for act in user_acts:
        if act.domain != GENERAL:
            chosen = act.domain
    if chosen is not None:
        return chosen
    if belief.active_domain is not None:
        return belief.active_domain
    return belief.ontology.domains[0].name


@dataclass(frozen=True)
class DomainView:
    """Restriction of a belief state to one domain plus the global fields."""

    domain: str
    slots: tuple[str, ...]
    slot_kinds: tuple[str, ...]
    inform: Mapping[str, str]
    requested: Mapping[str, bool]
    offered: str | None
    booked: Mapping | None
    count: int
    terminated: bool
    user_acts: tuple[DialogueAct, ...]
    system_acts: tuple[DialogueAct, ...]

    @property
    def slot_count(self) -> int:
        return len(self.slots)

    @property
    def degree(self) -> np.ndarray:
        return degree_pointer(self.count)


def project(belief, domain: str) -> DomainView:
    if isinstance(belief, DomainView):
        if belief.domain != domain:
            raise ValueError(f"view of {belief.domain!r} cannot be projected onto {domain!r}")
        return belief
    dom = belief.ontology.domain(domain)
    return DomainView(
        domain=domain,
        slots=tuple(s.name for s in dom.slots),
        slot_kinds=tuple(s.kind for s in dom.slots),
        inform=belief.inform[domain],
        requested=belief.requested[domain],
        offered=belief.offered[domain],
        booked=belief.booked[domain],
        count=belief.counts[domain],
        terminated=belief.terminated,
        user_acts=tuple(a for a in belief.user_acts if a.domain in (domain, GENERAL)),
        system_acts=tuple(a for a in belief.system_acts if a.domain in (domain, GENERAL)),
    )

