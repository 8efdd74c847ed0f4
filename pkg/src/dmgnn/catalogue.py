"""Composite-action catalogue for the flat (non-DIP) policy.

An entry is a tuple of 1-3 summary actions over the whole multi-domain
space, each written as ``(domain, kind, slot)``; slot-less intents that do
not concern a domain use the domain ``"general"``.  The catalogue holds
every single valid action plus every distinct multi-act turn seen in
teacher self-play.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from typing import Sequence

import numpy as np

from .belief import BeliefState
from .dialogue import DOMAIN_BOUND, GENERAL, DialogueAct
from .featurize import SummaryAction, action_space, to_master
from .ontology import Ontology, load_ontology

MAX_COMPOSITE = 3
SELF_PLAY_DIALOGUES = 1000
SELF_PLAY_SEED = 7
_BUNDLED = "catalogue.json"

Key = tuple[str, str, "str | None"]


def act_key(act: DialogueAct) -> Key:
    if act.domain == GENERAL:
        return (GENERAL, act.intent, None)
    return (act.domain, act.intent, act.slot)


def turn_key(acts: Sequence[DialogueAct]) -> tuple[Key, ...]:
    """Distinct act keys of one system turn, in order, truncated to ``MAX_COMPOSITE``."""
    out: list[Key] = []
    for a in acts:
        k = act_key(a)
        if k not in out:
            out.append(k)
    return tuple(out[:MAX_COMPOSITE])


def singletons(ontology: Ontology) -> list[tuple[Key, ...]]:
    out: list[tuple[Key, ...]] = []
    seen = set()
    for dom in ontology.domains:
        space = action_space(ontology, dom.name)
        for a, ok in zip(space.actions, space.mask):
            if not ok:
                continue
            if a.slot is None and a.kind not in DOMAIN_BOUND:
                key = (GENERAL, a.kind, None)
            else:
                key = (dom.name, a.kind, a.slot)
            if key not in seen:
                seen.add(key)
                out.append((key,))
    return out


def check_key(ontology: Ontology, key: Key) -> None:
    d, kind, slot = key
    if d == GENERAL:
        if kind not in ontology.general_system_intents or kind in DOMAIN_BOUND:
            raise ValueError(f"invalid general catalogue action {key}")
        return
    space = action_space(ontology, d)
    if not space.mask[space.index(SummaryAction(kind, slot))]:
        raise ValueError(f"catalogue action {key} is masked")


@dataclass(frozen=True)
class Catalogue:
    entries: tuple[tuple[Key, ...], ...]
    digest: str

    def __len__(self) -> int:
        return len(self.entries)

    @cached_property
    def _index(self) -> dict[tuple[Key, ...], int]:
        return {e: i for i, e in enumerate(self.entries)}

    def index_for(self, acts: Sequence[DialogueAct], domain: str | None = None) -> int:
        """Entry for a teacher turn, falling back to the singleton of its first act."""
        key = turn_key(acts)
        if key in self._index:
            return self._index[key]
        return self._index[key[:1]]

    def expand(self, index: int, belief: BeliefState) -> list[DialogueAct]:
        out: list[DialogueAct] = []
        for d, kind, slot in self.entries[index]:
            acts = [DialogueAct(kind)] if d == GENERAL else to_master(SummaryAction(kind, slot), belief, d)
            out.extend(a for a in acts if a not in out)
        return out

    def to_document(self) -> dict:
        return {"ontology": self.digest, "entries": [[list(k) for k in e] for e in self.entries]}

    @classmethod
    def from_document(cls, doc: dict) -> "Catalogue":
        return cls(tuple(tuple(tuple(k) for k in e) for e in doc["entries"]), doc["ontology"])

    def validate(self, ontology: Ontology) -> None:
        if ontology.digest() != self.digest:
            raise ValueError("catalogue was built for a different ontology")
        for e in self.entries:
            if not 1 <= len(e) <= MAX_COMPOSITE:
                raise ValueError(f"catalogue entry {e} has the wrong size")
            for k in e:
                check_key(ontology, k)


def build_catalogue(ontology: Ontology, dialogues: int = SELF_PLAY_DIALOGUES,
                    seed: int = SELF_PLAY_SEED) -> Catalogue:
    """Singletons first (ontology order), then self-play composites in sorted order."""
    from .episode import OracleAgent, evaluate_agent

    seen: set[tuple[Key, ...]] = set()
    teacher = OracleAgent()

    class _Recorder:
        is_oracle = True
        policy = None

        def decide(self, belief, domain, rng, features=None):
            dec = teacher.decide(belief, domain, rng)
            key = turn_key(dec.acts)
            if len(key) > 1:
                seen.add(key)
            return dec

    evaluate_agent(_Recorder(), ontology, dialogues, seed)
    base = singletons(ontology)
    composites = sorted(seen, key=lambda e: json.dumps(e))
    cat = Catalogue(tuple(base) + tuple(composites), ontology.digest())
    cat.validate(ontology)
    return cat


def save_catalogue(cat: Catalogue, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cat.to_document(), fh, indent=0)
        fh.write("\n")


_CACHE: dict[str, Catalogue] = {}


def load_catalogue(ontology: Ontology | None = None) -> Catalogue:
    """The committed catalogue for the bundled ontology; built on demand otherwise."""
    ontology = ontology or load_ontology()
    digest = ontology.digest()
    if digest in _CACHE:
        return _CACHE[digest]
    bundled = resources.files("dmgnn.data").joinpath(_BUNDLED)
    cat = None
    if bundled.is_file():
        cat = Catalogue.from_document(json.loads(bundled.read_text(encoding="utf-8")))
    if cat is None or cat.digest != digest:
        cat = build_catalogue(ontology)
    cat.validate(ontology)
    _CACHE[digest] = cat
    return cat


def catalogue_sizes(cat: Catalogue) -> np.ndarray:
    return np.bincount([len(e) for e in cat.entries], minlength=MAX_COMPOSITE + 1)
