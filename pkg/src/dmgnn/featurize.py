"""State parametrisations and the summary-action abstraction.

Two encodings of a belief state are provided:

* ``flat_state``: one binary vector over every domain (constraint one-hots,
  act multi-hots, terminated flag, per-domain offer flags and degree bins).
* ``dip_state``: the domain-independent parametrisation of the active
  domain, i.e. one slot-independent vector and one fixed-size vector per slot.

Summary actions are the policy outputs; ``to_master`` restores the values
(entity names, slot values, booking references) from the belief.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .belief import BeliefState
from .dialogue import DOMAIN_BOUND, GENERAL, DialogueAct, booking_reference
from .ontology import DONTCARE, FIND, NONE, REQUEST, Ontology

REQUEST_ACTION, INFORM_ACTION = "request", "inform"


@dataclass(frozen=True)
class SummaryAction:
    kind: str
    slot: str | None = None

    def __str__(self) -> str:
        return f"{self.kind}({self.slot})" if self.slot else self.kind


@dataclass(frozen=True)
class DipState:
    domain: str
    independent: np.ndarray
    slots: np.ndarray  # (n_slots, slot_dim), schema order
    slot_names: tuple[str, ...]


@dataclass(frozen=True)
class FlatState:
    domain: str
    vector: np.ndarray


class ActionSpace:
    """Summary actions of one domain: one per slot, then the general system intents."""

    def __init__(self, ontology: Ontology, domain: str):
        dom = ontology.domain(domain)
        self.domain = domain
        acts = [SummaryAction(REQUEST_ACTION if s.is_constraint else INFORM_ACTION, s.name)
                for s in dom.slots]
        self.n_slot_actions = len(acts)
        acts += [SummaryAction(k) for k in ontology.general_system_intents]
        self.actions: tuple[SummaryAction, ...] = tuple(acts)
        has_book = bool(dom.book_slots)
        self.mask = np.array([has_book or a.kind not in ("book", "nobook") for a in acts], dtype=bool)
        self._index = {a: i for i, a in enumerate(acts)}

    def __len__(self) -> int:
        return len(self.actions)

    def index(self, action: SummaryAction) -> int:
        try:
            return self._index[action]
        except KeyError:
            raise KeyError(f"{action} is not in the {self.domain} action space") from None


@lru_cache(maxsize=None)
def _action_space(ontology: Ontology, domain: str) -> ActionSpace:
    return ActionSpace(ontology, domain)


def action_space(ontology: Ontology, domain: str) -> ActionSpace:
    return _action_space(ontology, domain)


def independent_dim(ontology: Ontology) -> int:
    return len(ontology.general_user_intents) + len(ontology.general_system_intents) + 1 + 1 + 6


def slot_dim(ontology: Ontology) -> int:
    return len(ontology.slot_user_intents) + len(ontology.slot_system_intents) + 3


# ---------------------------------------------------------------------------
# DIP


def dip_state(belief: BeliefState, domain: str, ontology: Ontology | None = None) -> DipState:
    onto = ontology or belief.ontology
    dom = onto.domain(domain)
    gu = {k: i for i, k in enumerate(onto.general_user_intents)}
    gs = {k: i for i, k in enumerate(onto.general_system_intents)}
    su = {k: i for i, k in enumerate(onto.slot_user_intents)}
    ss = {k: i for i, k in enumerate(onto.slot_system_intents)}
    n_gu, n_gs = len(gu), len(gs)
    n_su, n_ss = len(su), len(ss)

    ind = np.zeros(independent_dim(onto))
    slots = np.zeros((len(dom.slots), slot_dim(onto)))
    idx = dom.slot_index
    for act in belief.user_acts:
        if act.slot is None:
            if act.domain in (GENERAL, domain) and act.intent in gu:
                ind[gu[act.intent]] = 1.0
        elif act.domain == domain:
            slots[idx[act.slot], su[act.intent]] = 1.0
    for act in belief.system_acts:
        if act.slot is None:
            if act.domain in (GENERAL, domain):
                ind[n_gu + gs[act.intent]] = 1.0
        elif act.domain == domain:
            slots[idx[act.slot], n_su + ss[act.intent]] = 1.0
    base = n_gu + n_gs
    ind[base] = float(belief.terminated)
    ind[base + 1] = float(belief.offered[domain] is not None)
    ind[base + 2 + min(belief.counts[domain], 5)] = 1.0

    col = n_su + n_ss
    inf = belief.inform[domain]
    req = belief.requested[domain]
    for i, s in enumerate(dom.slots):
        if s.is_constraint:
            slots[i, col] = float(inf[s.name] != NONE)
        else:
            slots[i, col] = float(req[s.name])
        slots[i, col + 1] = float(s.kind == FIND)
        slots[i, col + 2] = float(s.kind == REQUEST)
    return DipState(domain, ind, slots, tuple(s.name for s in dom.slots))


def padded_dip(dip: DipState, max_slots: int) -> np.ndarray:
    """Concatenate the DIP vectors, zero-padding the slot part to ``max_slots`` slots."""
    n, k = dip.slots.shape
    if n > max_slots:
        raise ValueError(f"{n} slots exceed the padded capacity {max_slots}")
    out = np.zeros(dip.independent.size + max_slots * k)
    out[:dip.independent.size] = dip.independent
    out[dip.independent.size:dip.independent.size + n * k] = dip.slots.ravel()
    return out


# ---------------------------------------------------------------------------
# flat


class FlatLayout:
    """Offsets of every block of the flat state vector for one ontology."""

    def __init__(self, ontology: Ontology):
        self.ontology = ontology
        pos = 0
        self.value_offset: dict[tuple[str, str], int] = {}
        self.value_index: dict[tuple[str, str], dict[str, int]] = {}
        for dom in ontology.domains:
            for s in dom.slots:
                if not s.is_constraint:
                    continue
                vals = list(s.values) + [DONTCARE, NONE]
                self.value_offset[(dom.name, s.name)] = pos
                self.value_index[(dom.name, s.name)] = {v: i for i, v in enumerate(vals)}
                pos += len(vals)
        self.beliefs_dim = pos

        def act_block(general, per_slot):
            nonlocal pos
            offs = {}
            for k in general:
                offs[(GENERAL, None, k)] = pos
                pos += 1
            for dom in ontology.domains:
                for s in dom.slots:
                    for k in per_slot:
                        offs[(dom.name, s.name, k)] = pos
                        pos += 1
            return offs

        start = pos
        self.user_offset = act_block(ontology.general_user_intents, ontology.slot_user_intents)
        self.user_dim = pos - start
        start = pos
        self.system_offset = act_block(ontology.general_system_intents, ontology.slot_system_intents)
        self.system_dim = pos - start
        self.f1 = pos
        pos += 1
        self.f2 = {d.name: pos + i for i, d in enumerate(ontology.domains)}
        pos += len(ontology.domains)
        self.f3 = {d.name: pos + 6 * i for i, d in enumerate(ontology.domains)}
        pos += 6 * len(ontology.domains)
        self.dim = pos


@lru_cache(maxsize=None)
def flat_layout(ontology: Ontology) -> FlatLayout:
    return FlatLayout(ontology)


def flat_state(belief: BeliefState, ontology: Ontology | None = None) -> np.ndarray:
    onto = ontology or belief.ontology
    lay = flat_layout(onto)
    x = np.zeros(lay.dim)
    for (d, s), off in lay.value_offset.items():
        x[off + lay.value_index[(d, s)][belief.inform[d][s]]] = 1.0
    for act in belief.user_acts:
        key = (GENERAL, None, act.intent) if act.slot is None else (act.domain, act.slot, act.intent)
        x[lay.user_offset[key]] = 1.0
    for act in belief.system_acts:
        key = (GENERAL, None, act.intent) if act.slot is None else (act.domain, act.slot, act.intent)
        x[lay.system_offset[key]] = 1.0
    x[lay.f1] = float(belief.terminated)
    for d, off in lay.f2.items():
        x[off] = float(belief.offered[d] is not None)
    for d, off in lay.f3.items():
        x[off + min(belief.counts[d], 5)] = 1.0
    return x


# ---------------------------------------------------------------------------
# summary <-> master actions


def summary_of(act: DialogueAct) -> SummaryAction:
    if act.slot is not None:
        return SummaryAction(act.intent, act.slot)
    return SummaryAction(act.intent)


def to_master(action: SummaryAction, belief: BeliefState, domain: str) -> list[DialogueAct]:
    """Fill in the values a summary action needs from the belief state."""
    onto = belief.ontology
    space = action_space(onto, domain)
    i = space.index(action)
    if not space.mask[i]:
        raise ValueError(f"action {action} is masked in domain {domain}")
    dom = onto.domain(domain)
    kind = action.kind
    if action.slot is not None:
        if kind == REQUEST_ACTION:
            return [DialogueAct("request", domain, action.slot)]
        name = belief.offered[domain]
        if name is not None:
            ent = dom.entity_by_name[name]
        else:
            matches = belief.matches(domain)
            if not matches:
                return [DialogueAct("nooffer", domain)]
            ent = matches[0]
        return [DialogueAct("inform", domain, action.slot, ent[action.slot])]
    if kind == "offer":
        matches = belief.matches(domain)
        if not matches:
            return [DialogueAct("nooffer", domain)]
        return [DialogueAct("offer", domain, None, matches[0]["name"])]
    if kind == "book":
        name = belief.offered[domain]
        if name is None:
            return [DialogueAct("nobook", domain)]
        return [DialogueAct("book", domain, None, booking_reference(domain, name))]
    if kind in DOMAIN_BOUND:
        return [DialogueAct(kind, domain)]
    return [DialogueAct(kind)]
