"""Domains, slots, value sets and the synthetic databases behind them.

The bundled ontology (``data/ontology.json``) is produced by
:func:`build_default_ontology` and committed; slot counts per domain follow
the MultiWOZ-style layout (find / book constraints plus requestable slots).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

DONTCARE = "dontcare"
NONE = "none"
RESERVED_VALUES = frozenset({DONTCARE, NONE})

FIND, BOOK, REQUEST = "find", "book", "request"
SLOT_KINDS = (FIND, BOOK, REQUEST)

GENERAL_USER_INTENTS = ("hello", "bye", "thank", "reqmore-answer", "dontcare")
GENERAL_SYSTEM_INTENTS = ("offer", "book", "nooffer", "nobook", "reqmore", "bye")
SLOT_USER_INTENTS = ("inform", "request")
SLOT_SYSTEM_INTENTS = ("inform", "request")

DEGREE_BINS = 6
FORMAT_VERSION = 1


class OntologyError(ValueError):
    """Raised when an ontology document is malformed or violates an invariant."""


@dataclass(frozen=True)
class SlotDef:
    name: str
    kind: str
    values: tuple[str, ...] = ()

    @property
    def is_constraint(self) -> bool:
        return self.kind in (FIND, BOOK)


@dataclass(frozen=True, eq=False)
class DomainSchema:
    name: str
    slots: tuple[SlotDef, ...]
    database: tuple[Mapping[str, str], ...]

    @cached_property
    def slot_index(self) -> dict[str, int]:
        return {s.name: i for i, s in enumerate(self.slots)}

    @cached_property
    def find_slots(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.slots if s.kind == FIND)

    @cached_property
    def book_slots(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.slots if s.kind == BOOK)

    @cached_property
    def request_slots(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.slots if s.kind == REQUEST)

    @cached_property
    def constraint_slots(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.slots if s.is_constraint)

    @cached_property
    def entity_by_name(self) -> dict[str, Mapping[str, str]]:
        return {e["name"]: e for e in self.database}

    def slot(self, name: str) -> SlotDef:
        try:
            return self.slots[self.slot_index[name]]
        except KeyError:
            raise KeyError(f"unknown slot {name!r} in domain {self.name!r}") from None


@dataclass(frozen=True, eq=False)
class Ontology:
    # identity semantics: ontologies key the per-ontology feature caches
    domains: tuple[DomainSchema, ...]
    general_user_intents: tuple[str, ...] = GENERAL_USER_INTENTS
    general_system_intents: tuple[str, ...] = GENERAL_SYSTEM_INTENTS
    slot_user_intents: tuple[str, ...] = SLOT_USER_INTENTS
    slot_system_intents: tuple[str, ...] = SLOT_SYSTEM_INTENTS

    @cached_property
    def _by_name(self) -> dict[str, DomainSchema]:
        return {d.name: d for d in self.domains}

    @property
    def domain_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.domains)

    def domain(self, name: str) -> DomainSchema:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown domain {name!r}") from None

    @cached_property
    def max_slots(self) -> int:
        return max(len(d.slots) for d in self.domains)

    def restrict(self, names) -> "Ontology":
        """Sub-ontology over ``names`` (kept in the given order)."""
        doms = tuple(self.domain(n) for n in names)
        onto = Ontology(doms, self.general_user_intents, self.general_system_intents,
                        self.slot_user_intents, self.slot_system_intents)
        validate(onto)
        return onto

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(dumps(self).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# validation and (de)serialisation


def validate(onto: Ontology) -> None:
    if not onto.domains:
        raise OntologyError("ontology has no domains")
    seen_domains = set()
    for dom in onto.domains:
        if dom.name in seen_domains:
            raise OntologyError(f"duplicate domain {dom.name!r}")
        if dom.name == "general":
            raise OntologyError("'general' is reserved and cannot name a domain")
        seen_domains.add(dom.name)
        seen_slots = set()
        for slot in dom.slots:
            where = f"{dom.name}.{slot.name}"
            if slot.name in seen_slots:
                raise OntologyError(f"duplicate slot name {where!r}")
            if slot.name == "name":
                raise OntologyError(f"slot name 'name' is reserved ({where})")
            seen_slots.add(slot.name)
            if slot.kind not in SLOT_KINDS:
                raise OntologyError(f"slot {where!r} has unknown kind {slot.kind!r}")
            if slot.is_constraint:
                if not slot.values:
                    raise OntologyError(f"constraint slot {where!r} has an empty value set")
                if len(set(slot.values)) != len(slot.values):
                    raise OntologyError(f"constraint slot {where!r} has duplicate values")
                bad = RESERVED_VALUES.intersection(slot.values)
                if bad:
                    raise OntologyError(f"constraint slot {where!r} uses reserved value(s) {sorted(bad)}")
            elif slot.values:
                raise OntologyError(f"requestable slot {where!r} must not declare values")
        names = set()
        for i, ent in enumerate(dom.database):
            if "name" not in ent:
                raise OntologyError(f"{dom.name} entity #{i} has no name")
            if ent["name"] in names:
                raise OntologyError(f"{dom.name} entity name {ent['name']!r} is not unique")
            names.add(ent["name"])
            for s in dom.find_slots:
                if s not in ent:
                    raise OntologyError(f"{dom.name} entity #{i} lacks find slot {s!r}")
                if ent[s] not in dom.slot(s).values:
                    raise OntologyError(f"{dom.name} entity #{i} has {s}={ent[s]!r} outside the value set")
            for s in dom.request_slots:
                if s not in ent:
                    raise OntologyError(f"{dom.name} entity #{i} lacks requestable slot {s!r}")
        if not dom.database:
            raise OntologyError(f"domain {dom.name!r} has an empty database")
    for cat in (onto.general_user_intents, onto.general_system_intents,
                onto.slot_user_intents, onto.slot_system_intents):
        if len(set(cat)) != len(cat):
            raise OntologyError(f"intent catalogue has duplicates: {cat}")


def to_document(onto: Ontology) -> dict:
    return {
        "version": FORMAT_VERSION,
        "intents": {
            "general_user": list(onto.general_user_intents),
            "general_system": list(onto.general_system_intents),
            "slot_user": list(onto.slot_user_intents),
            "slot_system": list(onto.slot_system_intents),
        },
        "domains": [
            {
                "name": d.name,
                "slots": [
                    {"name": s.name, "kind": s.kind, **({"values": list(s.values)} if s.is_constraint else {})}
                    for s in d.slots
                ],
                "database": [dict(e) for e in d.database],
            }
            for d in onto.domains
        ],
    }


def from_document(doc: Mapping, source: str = "<document>") -> Ontology:
    def need(obj, key, ctx):
        if not isinstance(obj, Mapping) or key not in obj:
            raise OntologyError(f"{source}: missing field {key!r} in {ctx}")
        return obj[key]

    if doc.get("version", FORMAT_VERSION) != FORMAT_VERSION:
        raise OntologyError(f"{source}: unsupported version {doc.get('version')!r}")
    intents = doc.get("intents", {})
    domains = []
    for i, d in enumerate(need(doc, "domains", "document")):
        dname = need(d, "name", f"domains[{i}]")
        slots = []
        for j, s in enumerate(need(d, "slots", f"domain {dname!r}")):
            ctx = f"domain {dname!r} slots[{j}]"
            slots.append(SlotDef(str(need(s, "name", ctx)), str(need(s, "kind", ctx)),
                                 tuple(str(v) for v in s.get("values", ()))))
        db = tuple({str(k): str(v) for k, v in e.items()} for e in need(d, "database", f"domain {dname!r}"))
        domains.append(DomainSchema(str(dname), tuple(slots), db))
    onto = Ontology(
        tuple(domains),
        tuple(intents.get("general_user", GENERAL_USER_INTENTS)),
        tuple(intents.get("general_system", GENERAL_SYSTEM_INTENTS)),
        tuple(intents.get("slot_user", SLOT_USER_INTENTS)),
        tuple(intents.get("slot_system", SLOT_SYSTEM_INTENTS)),
    )
    validate(onto)
    return onto


def dumps(onto: Ontology) -> str:
    return json.dumps(to_document(onto), indent=1, ensure_ascii=False) + "\n"


def save_ontology(onto: Ontology, path) -> None:
    Path(path).write_text(dumps(onto), encoding="utf-8")


def load_ontology(path=None) -> Ontology:
    """Load and validate an ontology file; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("dmgnn.data").joinpath("ontology.json").read_text(encoding="utf-8")
        source = "<bundled ontology>"
    else:
        text = Path(path).read_text(encoding="utf-8")
        source = str(path)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise OntologyError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_document(doc, source)


# ---------------------------------------------------------------------------
# database access


def query(db: DomainSchema, constraints: Mapping[str, str]) -> list[Mapping[str, str]]:
    """Entities matching every constraint, in database order.

    ``dontcare`` and ``none`` match anything.
    """
    for s in constraints:
        if s not in db.slot_index:
            raise KeyError(f"unknown slot {s!r} in domain {db.name!r}")
    active = [(s, v) for s, v in constraints.items() if v not in RESERVED_VALUES]
    return [e for e in db.database if all(e.get(s) == v for s, v in active)]


def count_matches(db: DomainSchema, constraints: Mapping[str, str]) -> int:
    active = [(s, v) for s, v in constraints.items() if v not in RESERVED_VALUES]
    if not active:
        return len(db.database)
    return sum(1 for e in db.database if all(e.get(s) == v for s, v in active))


def degree_pointer(count: int) -> np.ndarray:
    """One-hot bins ``[==0, ==1, ==2, ==3, ==4, >=5]``."""
    if count < 0:
        raise ValueError("count must be non-negative")
    out = np.zeros(DEGREE_BINS)
    out[min(count, DEGREE_BINS - 1)] = 1.0
    return out


# ---------------------------------------------------------------------------
# bundled default ontology

_AREAS = ["centre", "north", "south", "east", "west"]
_DAYS = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]
_PEOPLE = [str(i) for i in range(1, 9)]
_PLACES = ["cambridge", "ely", "stevenage", "london", "norwich", "peterborough"]
_TIMES = ["08:00", "10:00", "12:00", "14:00", "16:00", "18:00"]

# (find slots with values, book slots with values, requestable slots, database size)
_DEFAULT_SCHEMA = {
    "restaurant": (
        {"area": _AREAS,
         "food": ["italian", "chinese", "indian", "british", "french", "thai", "mexican"],
         "pricerange": ["cheap", "moderate", "expensive"],
         "seating": ["indoor", "outdoor", "terrace"]},
        {"people": _PEOPLE, "day": _DAYS,
         "time": ["17:00", "18:00", "19:00", "20:00", "21:00"]},
        ["address", "phone", "postcode", "rating", "website"],
        60,
    ),
    "attraction": (
        {"area": _AREAS,
         "type": ["museum", "park", "theatre", "gallery", "nightclub", "college"],
         "pricerange": ["free", "cheap", "moderate"]},
        {},
        ["address", "phone", "postcode", "openhours", "website", "fee", "description"],
        50,
    ),
    "hotel": (
        {"area": _AREAS,
         "pricerange": ["cheap", "moderate", "expensive"],
         "stars": ["2", "3", "4", "5"],
         "type": ["hotel", "guesthouse"],
         "parking": ["yes", "no"],
         "internet": ["yes", "no"],
         "accessible": ["yes", "no"]},
        {"people": _PEOPLE, "day": _DAYS, "stay": ["1", "2", "3", "4", "5"]},
        ["address", "phone", "postcode", "checkin", "rating"],
        80,
    ),
    "taxi": (
        {"departure": _PLACES, "destination": _PLACES, "leaveat": _TIMES, "arriveby": _TIMES},
        {},
        ["car", "phone"],
        100,
    ),
    "train": (
        {"departure": _PLACES, "destination": _PLACES, "day": _DAYS,
         "leaveat": _TIMES, "arriveby": _TIMES},
        {"people": _PEOPLE},
        ["trainid", "price", "duration", "platform", "operator"],
        100,
    ),
    "hospital": (
        {"department": ["cardiology", "neurology", "paediatrics", "oncology", "urology",
                        "dermatology", "radiology", "orthopaedics", "maternity", "emergency"]},
        {},
        ["address", "phone", "postcode"],
        20,
    ),
    "police": (
        {},
        {},
        ["address", "phone", "postcode"],
        3,
    ),
}

_NAME_WORDS = ["golden", "silver", "red", "old", "royal", "little", "green", "grand", "blue",
               "river", "city", "kings", "garden", "bridge", "market", "station", "park",
               "oak", "maple", "harbour"]
_NAME_NOUNS = {"restaurant": "kitchen", "attraction": "house", "hotel": "lodge", "taxi": "cab",
               "train": "service", "hospital": "clinic", "police": "station"}
_STREETS = ["high street", "mill road", "hills road", "regent street", "trumpington road",
            "castle hill", "newmarket road", "station road"]
_CARS = ["toyota", "skoda", "ford", "volvo", "audi", "tesla", "honda", "kia"]


def _requestable_value(slot: str, domain: str, i: int, rng: np.random.Generator) -> str:
    if slot == "address":
        return f"{rng.integers(1, 200)} {_STREETS[rng.integers(len(_STREETS))]}"
    if slot == "phone":
        return "01223" + "".join(str(d) for d in rng.integers(0, 10, size=6))
    if slot == "postcode":
        return f"cb{rng.integers(1, 5)}{rng.integers(1, 10)}{chr(97 + rng.integers(26))}{chr(97 + rng.integers(26))}"
    if slot == "rating":
        return str(rng.integers(1, 6))
    if slot == "car":
        return f"{_CARS[rng.integers(len(_CARS))]} {chr(97 + rng.integers(26))}{rng.integers(10, 99)}"
    if slot == "trainid":
        return f"tr{1000 + i}"
    if slot == "price":
        return f"{rng.integers(4, 40)}.{rng.integers(0, 100):02d} pounds"
    if slot in ("duration", "openhours"):
        return f"{rng.integers(15, 240)} minutes" if slot == "duration" else f"{rng.integers(8, 12)}:00-{rng.integers(16, 23)}:00"
    if slot == "fee":
        return f"{rng.integers(0, 15)} pounds"
    return f"{domain}-{slot}-{i:03d}"


def build_default_ontology(seed: int = 2022) -> Ontology:
    """Regenerate the bundled ontology deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    domains = []
    for dname, (find, book, request, size) in _DEFAULT_SCHEMA.items():
        slots = [SlotDef(s, FIND, tuple(v)) for s, v in find.items()]
        slots += [SlotDef(s, BOOK, tuple(v)) for s, v in book.items()]
        slots += [SlotDef(s, REQUEST) for s in request]
        db = []
        for i in range(size):
            w = _NAME_WORDS[i % len(_NAME_WORDS)]
            ent = {"name": f"{w} {_NAME_NOUNS[dname]} {i // len(_NAME_WORDS) + 1}"}
            for s, values in find.items():
                ent[s] = values[rng.integers(len(values))]
            for s in request:
                ent[s] = _requestable_value(s, dname, i, rng)
            db.append(ent)
        domains.append(DomainSchema(dname, tuple(slots), tuple(db)))
    onto = Ontology(tuple(domains))
    validate(onto)
    return onto
