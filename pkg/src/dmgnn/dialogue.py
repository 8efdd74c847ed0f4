"""Dialogue acts, user goals, the agenda-based simulated user and the rule-based teacher."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .ontology import BOOK, DONTCARE, FIND, NONE, REQUEST, Ontology, count_matches, query

if TYPE_CHECKING:
    from .belief import BeliefState

GENERAL = "general"
# slot-less system intents that still concern one domain
DOMAIN_BOUND = frozenset({"offer", "book", "nooffer", "nobook"})
PATIENCE = 40
USER_ACTS_PER_TURN = 2
OFFER_THRESHOLD = 5
MAX_GOAL_REQUESTS = 3


@dataclass(frozen=True)
class DialogueAct:
    intent: str
    domain: str = GENERAL
    slot: str | None = None
    value: str | None = None

    def __str__(self) -> str:
        if self.slot is None:
            if self.domain == GENERAL:
                return self.intent if self.value is None else f"{self.intent}({self.value})"
            tail = f"={self.value}" if self.value is not None else ""
            return f"{self.intent}({self.domain}{tail})"
        tail = f"={self.value}" if self.value is not None else ""
        return f"{self.intent}({self.domain}.{self.slot}{tail})"

    def to_json(self) -> list:
        return [self.intent, self.domain, self.slot, self.value]


def validate_act(act: DialogueAct, ontology: Ontology, role: str) -> None:
    """Raise ``ValueError`` unless ``act`` fits the ontology catalogues for ``role``."""
    if role == "user":
        general, per_slot = ontology.general_user_intents, ontology.slot_user_intents
    elif role == "system":
        general, per_slot = ontology.general_system_intents, ontology.slot_system_intents
    else:
        raise ValueError(f"unknown role {role!r}")
    if act.intent in per_slot and act.slot is not None:
        if act.domain == GENERAL:
            raise ValueError(f"per-slot act {act} needs a domain")
        dom = ontology.domain(act.domain)
        kind = dom.slot(act.slot).kind
        if act.intent == "inform" and act.value is None:
            raise ValueError(f"inform act {act} carries no value")
        if role == "system" and act.intent == "request" and kind == REQUEST:
            raise ValueError(f"system cannot request requestable slot {act.domain}.{act.slot}")
        if role == "system" and act.intent == "inform" and kind != REQUEST:
            raise ValueError(f"system informs only requestable slots, got {act}")
        if role == "user" and act.intent == "request" and kind != REQUEST:
            raise ValueError(f"user requests only requestable slots, got {act}")
        return
    if act.intent in general:
        if act.slot is not None:
            raise ValueError(f"general act {act} must not carry a slot")
        if role == "system" and act.intent in DOMAIN_BOUND:
            ontology.domain(act.domain)
        elif act.domain != GENERAL:
            raise ValueError(f"act {act} must use domain 'general'")
        return
    raise ValueError(f"intent {act.intent!r} is not in the {role} catalogue")


def booking_reference(domain: str, entity: str) -> str:
    return "ref-" + hashlib.sha1(f"{domain}/{entity}".encode()).hexdigest()[:8]


# ---------------------------------------------------------------------------
# goals


@dataclass(frozen=True)
class DomainGoal:
    domain: str
    find: Mapping[str, str]
    request: tuple[str, ...]
    book: Mapping[str, str] | None = None


@dataclass(frozen=True)
class UserGoal:
    domains: tuple[DomainGoal, ...]

    @property
    def domain_names(self) -> tuple[str, ...]:
        return tuple(g.domain for g in self.domains)

    def __getitem__(self, domain: str) -> DomainGoal:
        for g in self.domains:
            if g.domain == domain:
                return g
        raise KeyError(domain)

    def to_json(self) -> list:
        return [{"domain": g.domain, "find": dict(g.find), "request": list(g.request),
                 "book": dict(g.book) if g.book is not None else None} for g in self.domains]


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_goal(ontology: Ontology, seed, max_domains: int = 3) -> UserGoal:
    """Sample a satisfiable multi-domain goal.

    Find constraints are read off one database entity, so the conjunction
    always has at least one match.
    """
    if max_domains < 1:
        raise ValueError("max_domains must be at least 1")
    rng = _rng(seed)
    n_dom = int(rng.integers(1, min(max_domains, len(ontology.domains)) + 1))
    picked = rng.choice(len(ontology.domains), size=n_dom, replace=False)
    goals = []
    for i in picked:
        dom = ontology.domains[int(i)]
        find: dict[str, str] = {}
        if dom.find_slots:
            n = int(rng.integers(1, len(dom.find_slots) + 1))
            chosen = set(rng.choice(dom.find_slots, size=n, replace=False).tolist())
            ent = dom.database[int(rng.integers(len(dom.database)))]
            find = {s: ent[s] for s in dom.find_slots if s in chosen}
        request: tuple[str, ...] = ()
        if dom.request_slots:
            m = int(rng.integers(1, min(MAX_GOAL_REQUESTS, len(dom.request_slots)) + 1))
            chosen = set(rng.choice(dom.request_slots, size=m, replace=False).tolist())
            request = tuple(s for s in dom.request_slots if s in chosen)
        book = None
        if dom.book_slots and rng.random() < 0.5:
            book = {s: dom.slot(s).values[int(rng.integers(len(dom.slot(s).values)))]
                    for s in dom.book_slots}
        goals.append(DomainGoal(dom.name, find, request, book))
    return UserGoal(tuple(goals))


# ---------------------------------------------------------------------------
# simulated user


@dataclass
class AgendaUser:
    goal: UserGoal
    ontology: Ontology
    patience: int = PATIENCE
    agenda: list[DialogueAct] = field(default_factory=list)
    working: dict[str, dict[str, str]] = field(default_factory=dict)
    offered: dict[str, str | None] = field(default_factory=dict)
    answered: dict[str, set] = field(default_factory=dict)
    booked: dict[str, bool] = field(default_factory=dict)
    abandoned: set = field(default_factory=set)
    informed_order: dict[str, list] = field(default_factory=dict)
    current: int = 0
    terminated: bool = False
    completed: bool = False

    def __post_init__(self):
        for g in self.goal.domains:
            self.working[g.domain] = dict(g.find)
            self.offered[g.domain] = None
            self.answered[g.domain] = set()
            self.booked[g.domain] = False
            self.informed_order[g.domain] = []
        self._open_domain(0)

    # user-side view of progress
    def satisfied(self, domain: str) -> bool:
        g = self.goal[domain]
        return (self.offered[domain] is not None
                and set(g.request) <= self.answered[domain]
                and (g.book is None or self.booked[domain]))

    def _done(self, domain: str) -> bool:
        return domain in self.abandoned or self.satisfied(domain)

    def _push(self, acts: Sequence[DialogueAct]) -> None:
        # stack: first act in ``acts`` is popped first
        self.agenda.extend(reversed(acts))

    def _open_domain(self, index: int) -> None:
        g = self.goal.domains[index]
        acts = [DialogueAct("inform", g.domain, s, v) for s, v in g.find.items()]
        if not g.find:
            acts += [DialogueAct("request", g.domain, s) for s in g.request]
        self._push(acts)

    def _on_offer(self, act: DialogueAct) -> None:
        d = act.domain
        ent = self.ontology.domain(d).entity_by_name.get(act.value or "")
        if ent is None:
            return
        violated = [s for s, v in self.working[d].items() if v != DONTCARE and ent[s] != v]
        if violated:
            self.offered[d] = None
            self._push([DialogueAct("inform", d, s, self.working[d][s]) for s in violated])
            return
        first = self.offered[d] is None and not self.answered[d] and not self.booked[d]
        self.offered[d] = ent["name"]
        if not first:
            return
        # offer accepted: pending constraint informs are moot, move on to requests and booking
        self.agenda = [a for a in self.agenda if not (a.domain == d and a.intent == "inform"
                                                      and a.value is not None and
                                                      self.ontology.domain(d).slot(a.slot).kind == FIND)]
        g = self.goal[d]
        queued = set(self.agenda)
        follow = [DialogueAct("request", d, s) for s in g.request if s not in self.answered[d]]
        if g.book is not None:
            follow += [DialogueAct("inform", d, s, v) for s, v in g.book.items()]
        self._push([a for a in follow if a not in queued])

    def _on_nooffer(self, d: str) -> None:
        if self.offered[d] is not None:
            return
        for s in reversed(self.informed_order[d]):
            if self.working[d].get(s, DONTCARE) != DONTCARE:
                self.working[d][s] = DONTCARE
                self._push([DialogueAct("inform", d, s, DONTCARE)])
                return
        self.abandoned.add(d)
        self.agenda = [a for a in self.agenda if a.domain != d]

    def _process(self, act: DialogueAct) -> bool:
        """Apply one system act; returns True for a reqmore."""
        if act.intent == "reqmore":
            return True
        d = act.domain
        if d not in self.working or d in self.abandoned:
            return False
        g = self.goal[d]
        if act.intent == "offer":
            self._on_offer(act)
        elif act.intent == "inform":
            if act.slot in g.request:
                self.answered[d].add(act.slot)
        elif act.intent == "request":
            kind = self.ontology.domain(d).slot(act.slot).kind
            if kind == FIND:
                self._push([DialogueAct("inform", d, act.slot, self.working[d].get(act.slot, DONTCARE))])
            elif kind == BOOK and g.book is not None and not self.booked[d]:
                self._push([DialogueAct("inform", d, act.slot, g.book[act.slot])])
        elif act.intent == "nooffer":
            self._on_nooffer(d)
        elif act.intent == "book":
            if g.book is not None:
                self.booked[d] = True
        elif act.intent == "nobook":
            if g.book is not None and not self.booked[d]:
                s, v = next(iter(g.book.items()))
                self._push([DialogueAct("inform", d, s, v)])
        return False

    def _stale(self, act: DialogueAct) -> bool:
        d = act.domain
        if d in self.abandoned:
            return True
        if act.intent == "request":
            return act.slot in self.answered[d]
        if act.intent == "inform" and self.ontology.domain(d).slot(act.slot).kind == BOOK:
            return self.booked[d]
        return False

    def _fallback(self) -> list[DialogueAct]:
        g = self.goal.domains[self.current]
        pending = [s for s in g.request if s not in self.answered[g.domain]]
        if pending:
            return [DialogueAct("request", g.domain, pending[0])]
        return [DialogueAct("thank")]


def user_step(user: AgendaUser, system_acts: Sequence[DialogueAct]) -> tuple[list[DialogueAct], bool]:
    """One user turn in response to ``system_acts`` (empty for the opening turn)."""
    if user.terminated:
        raise RuntimeError("user already terminated")
    reqmore = False
    for act in system_acts:
        reqmore |= user._process(act)
    n = len(user.goal.domains)
    while user.current < n and user._done(user.goal.domains[user.current].domain):
        user.current += 1
        if user.current < n:
            user._open_domain(user.current)
    if user.current >= n:
        user.terminated = True
        user.completed = all(user.satisfied(d) for d in user.goal.domain_names)
        return [DialogueAct("bye")], True
    if user.patience <= 0:
        user.terminated = True
        return [DialogueAct("bye")], True
    user.patience -= 1
    out: list[DialogueAct] = [DialogueAct("reqmore-answer")] if reqmore else []
    while user.agenda and len(out) < USER_ACTS_PER_TURN:
        act = user.agenda.pop()
        if user._stale(act):
            continue
        if act.intent == "inform" and act.value != DONTCARE:
            order = user.informed_order[act.domain]
            if act.slot in order:
                order.remove(act.slot)
            order.append(act.slot)
        out.append(act)
    if not out or out == [DialogueAct("reqmore-answer")]:
        out += user._fallback()
    return out, False


# ---------------------------------------------------------------------------
# teacher


def oracle_act(belief: "BeliefState", domain: str) -> list[DialogueAct]:
    """Rule-based teacher policy for the active ``domain``.

    Priority: answer pending requests from the offered entity; narrow the
    search while too many entities match; offer; collect booking details;
    book; report no match; say goodbye; otherwise ask whether anything else
    is needed.
    """
    onto = belief.ontology
    dom = onto.domain(domain)
    inf = belief.inform[domain]
    offer = belief.offered[domain]
    count = belief.counts[domain]
    pending = [s for s in dom.request_slots if belief.requested[domain][s]]
    unfilled_find = [s for s in dom.find_slots if inf[s] == NONE]
    wants_book = any(inf[s] != NONE for s in dom.book_slots)
    unfilled_book = [s for s in dom.book_slots if inf[s] == NONE]

    if pending and offer is not None:
        ent = dom.entity_by_name[offer]
        return [DialogueAct("inform", domain, s, ent[s]) for s in pending]
    if count > OFFER_THRESHOLD and unfilled_find:
        return [DialogueAct("request", domain, unfilled_find[0])]
    if count >= 1 and offer is None:
        ent = query(dom, belief.find_constraints(domain))[0]
        return [DialogueAct("offer", domain, None, ent["name"])]
    if wants_book and unfilled_book:
        return [DialogueAct("request", domain, unfilled_book[0])]
    if wants_book and belief.booked[domain] is None and offer is not None:
        return [DialogueAct("book", domain, None, booking_reference(domain, offer))]
    if count == 0:
        return [DialogueAct("nooffer", domain)]
    if any(a.intent == "bye" for a in belief.user_acts):
        return [DialogueAct("bye")]
    return [DialogueAct("reqmore")]


def goal_entities(ontology: Ontology, goal: UserGoal) -> dict[str, list[Mapping[str, str]]]:
    """Entities satisfying each domain's find constraints."""
    return {g.domain: query(ontology.domain(g.domain), g.find) for g in goal.domains}


def is_satisfiable(ontology: Ontology, goal: UserGoal) -> bool:
    return all(count_matches(ontology.domain(g.domain), g.find) > 0 for g in goal.domains)

