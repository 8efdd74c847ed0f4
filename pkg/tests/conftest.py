from __future__ import annotations

import numpy as np
import pytest

from dmgnn.ontology import BOOK, FIND, REQUEST, DomainSchema, Ontology, SlotDef, load_ontology, validate


@pytest.fixture(scope="session")
def onto() -> Ontology:
    return load_ontology()


def toy_ontology() -> Ontology:
    """Two small domains with hand-checkable databases."""
    food = DomainSchema(
        "food",
        (
            SlotDef("cuisine", FIND, ("thai", "greek")),
            SlotDef("area", FIND, ("north", "south")),
            SlotDef("people", BOOK, ("1", "2")),
            SlotDef("phone", REQUEST),
        ),
        (
            {"name": "a", "cuisine": "thai", "area": "north", "phone": "111"},
            {"name": "b", "cuisine": "thai", "area": "south", "phone": "222"},
            {"name": "c", "cuisine": "greek", "area": "south", "phone": "333"},
        ),
    )
    desk = DomainSchema(
        "desk",
        (SlotDef("phone", REQUEST), SlotDef("address", REQUEST)),
        ({"name": "d", "phone": "999", "address": "main st"},),
    )
    o = Ontology((food, desk))
    validate(o)
    return o


@pytest.fixture
def toy() -> Ontology:
    return toy_ontology()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
