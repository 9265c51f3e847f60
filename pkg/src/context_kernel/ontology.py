"""Layered context ontology.

The upper layer is fixed: ``Context`` with the four children ``Entity``,
``Location``, ``Time`` and ``Activity``.  Domain layers are plugged in
beneath those four classes and can be unplugged again.  Every operation
returns a new :class:`Ontology`; instances are never mutated.

Individuals are named things such as ``John``.  A class name used where an
individual is expected stands for an instance of that class, so
``Timetable(John, Office)`` type-checks when ``Office`` is a subclass of
``Location``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Optional

from .errors import (
    CycleIntroduced,
    DanglingDependents,
    DuplicateLayer,
    DuplicateName,
    InvalidDocument,
    UnknownAttachmentClass,
    UnknownClass,
    UnknownLayer,
    UpperLayerImmutable,
)
from .facts import Fact, is_identifier

UPPER = "upper"
ROOT = "Context"
UPPER_CLASSES = ("Entity", "Location", "Time", "Activity")
LITERAL = "Literal"


@dataclass(frozen=True)
class PredicateSig:
    name: str
    domain: str
    range: str
    functional: bool = False

    def to_dict(self) -> dict:
        return {"name": self.name, "domain": self.domain,
                "range": self.range, "functional": self.functional}


@dataclass(frozen=True)
class Layer:
    """Elements owned by one plug-in layer."""

    layer_id: str
    classes: frozenset = frozenset()
    edges: frozenset = frozenset()  # (child, parent)
    predicates: frozenset = frozenset()
    individuals: frozenset = frozenset()  # (name, class)

    def references(self) -> set:
        """Classes this layer points at (parents, signature ends, individual types)."""
        refs = {parent for _, parent in self.edges}
        for sig in self.predicates:
            refs.add(sig.domain)
            refs.add(sig.range)
        refs.update(cls for _, cls in self.individuals)
        refs.discard(LITERAL)
        return refs


@dataclass(frozen=True)
class DomainOntologyDoc:
    layer_id: str
    classes: tuple = ()  # ((name, (parent, ...)), ...)
    predicates: tuple = ()
    individuals: tuple = ()  # ((name, (class, ...)), ...)

    @classmethod
    def from_dict(cls, data: dict, strict: bool = True) -> "DomainOntologyDoc":
        if not isinstance(data, dict):
            raise InvalidDocument("domain document must be a JSON object")
        _check_keys(data, {"layer", "classes", "predicates", "individuals", "description"},
                    "document", strict)
        if "layer" not in data:
            raise InvalidDocument("document has no 'layer'")
        classes, predicates, individuals = [], [], []
        for entry in data.get("classes", []):
            _check_keys(entry, {"name", "parents"}, "class", strict)
            parents = entry.get("parents", [])
            if isinstance(parents, str):
                parents = [parents]
            classes.append((entry.get("name"), tuple(parents)))
        for entry in data.get("predicates", []):
            _check_keys(entry, {"name", "domain", "range", "functional"}, "predicate", strict)
            try:
                predicates.append(PredicateSig(entry["name"], entry["domain"], entry["range"],
                                               bool(entry.get("functional", False))))
            except KeyError as exc:
                raise InvalidDocument(f"predicate missing {exc.args[0]!r}") from None
        for entry in data.get("individuals", []):
            _check_keys(entry, {"name", "types"}, "individual", strict)
            types = entry.get("types", [])
            if isinstance(types, str):
                types = [types]
            individuals.append((entry.get("name"), tuple(types)))
        return cls(data["layer"], tuple(classes), tuple(predicates), tuple(individuals))

    def to_dict(self) -> dict:
        return {
            "layer": self.layer_id,
            "classes": [{"name": n, "parents": list(p)} for n, p in self.classes],
            "predicates": [sig.to_dict() for sig in self.predicates],
            "individuals": [{"name": n, "types": list(t)} for n, t in self.individuals],
        }


def _check_keys(entry, allowed, what, strict):
    if not isinstance(entry, dict):
        raise InvalidDocument(f"{what} entry must be an object")
    if strict:
        unknown = sorted(set(entry) - allowed)
        if unknown:
            raise InvalidDocument(f"unknown {what} keys: {unknown}")


def load_domain_doc(path, strict: bool = True) -> DomainOntologyDoc:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidDocument(f"{path}: {exc}") from None
    return DomainOntologyDoc.from_dict(data, strict=strict)


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    error: Optional[str] = None
    detail: str = ""

    def __bool__(self):
        return self.ok


OK = ValidationResult(True)


class Ontology:
    """Immutable union of layers with precomputed lookup tables."""

    def __init__(self, layers: Iterable[Layer]):
        self._layers = MappingProxyType({layer.layer_id: layer for layer in layers})
        parents: dict = {}
        predicates: dict = {}
        individuals: dict = {}
        owner: dict = {}
        for layer in self._layers.values():
            for cls in layer.classes:
                parents.setdefault(cls, set())
                owner[cls] = layer.layer_id
            for child, parent in layer.edges:
                parents.setdefault(child, set()).add(parent)
            for sig in layer.predicates:
                predicates[sig.name] = sig
            for name, cls in layer.individuals:
                individuals.setdefault(name, set()).add(cls)
        self._parents = {c: frozenset(p) for c, p in parents.items()}
        self._predicates = predicates
        self._individuals = {n: frozenset(t) for n, t in individuals.items()}
        self._owner = owner
        self._ancestors: dict = {}

    # -- structure ---------------------------------------------------------

    @property
    def layers(self) -> frozenset:
        return frozenset(self._layers)

    def layer(self, layer_id: str) -> Layer:
        try:
            return self._layers[layer_id]
        except KeyError:
            raise UnknownLayer(layer_id) from None

    @property
    def classes(self) -> frozenset:
        return frozenset(self._parents)

    @property
    def subclass_edges(self) -> frozenset:
        return frozenset((c, p) for c, ps in self._parents.items() for p in ps)

    @property
    def predicates(self):
        return MappingProxyType(self._predicates)

    @property
    def individuals(self):
        return MappingProxyType(self._individuals)

    def parents(self, cls: str) -> frozenset:
        return self._parents[cls]

    def owner(self, cls: str) -> str:
        return self._owner[cls]

    def structure(self) -> tuple:
        """Content without the layer registry, for structural comparison."""
        return (self.classes, self.subclass_edges,
                frozenset(self._predicates.values()),
                frozenset((n, t) for n, ts in self._individuals.items() for t in ts))

    def __eq__(self, other):
        if not isinstance(other, Ontology):
            return NotImplemented
        return frozenset(self._layers.values()) == frozenset(other._layers.values())

    def __hash__(self):
        return hash(frozenset(self._layers.values()))

    def __repr__(self):
        return (f"Ontology(layers={sorted(self._layers)}, classes={len(self._parents)}, "
                f"predicates={len(self._predicates)})")

    # -- reasoning ---------------------------------------------------------

    def ancestors(self, cls: str) -> frozenset:
        """All superclasses of ``cls`` including itself."""
        if cls not in self._parents:
            raise UnknownClass(cls)
        cached = self._ancestors.get(cls)
        if cached is None:
            seen = {cls}
            stack = [cls]
            while stack:
                for parent in self._parents[stack.pop()]:
                    if parent not in seen:
                        seen.add(parent)
                        stack.append(parent)
            cached = self._ancestors[cls] = frozenset(seen)
        return cached

    def is_subclass(self, a: str, b: str) -> bool:
        if b not in self._parents:
            raise UnknownClass(b)
        return b in self.ancestors(a)

    def types_of(self, name) -> frozenset:
        """Declared classes of an individual; a class name denotes itself."""
        if not isinstance(name, str):
            return frozenset()
        if name in self._parents:
            return frozenset((name,))
        return self._individuals.get(name, frozenset())

    def _instance_of(self, name, cls) -> bool:
        return any(cls in self.ancestors(t) for t in self.types_of(name))

    def validate(self, fact: Fact) -> ValidationResult:
        sig = self._predicates.get(fact.predicate)
        if sig is None:
            return ValidationResult(False, "UnknownPredicate", fact.predicate)
        if not self._instance_of(fact.subject, sig.domain):
            return ValidationResult(
                False, "DomainViolation",
                f"{fact.subject!r} is not a {sig.domain} (predicate {sig.name})")
        obj = fact.object
        if sig.range == LITERAL:
            if isinstance(obj, str) and not obj:
                return ValidationResult(False, "RangeViolation", "empty literal")
            return OK
        if not self._instance_of(obj, sig.range):
            return ValidationResult(
                False, "RangeViolation", f"{obj!r} is not a {sig.range} (predicate {sig.name})")
        return OK

    # -- layering ----------------------------------------------------------

    def plug(self, doc: DomainOntologyDoc) -> "Ontology":
        layer = self._build_layer(doc)
        return Ontology([*self._layers.values(), layer])

    def unplug(self, layer_id: str) -> "Ontology":
        if layer_id == UPPER:
            raise UpperLayerImmutable("the upper layer cannot be unplugged")
        removed = self.layer(layer_id)
        owned = removed.classes
        dependents = [
            other.layer_id for other in self._layers.values()
            if other.layer_id != layer_id and other.references() & owned
        ]
        if dependents:
            raise DanglingDependents(dependents)
        return Ontology(l for l in self._layers.values() if l.layer_id != layer_id)

    def _build_layer(self, doc: DomainOntologyDoc) -> Layer:
        lid = doc.layer_id
        if not is_identifier(lid):
            raise InvalidDocument(f"bad layer id {lid!r}")
        if lid in self._layers:
            raise DuplicateLayer(lid)

        new_classes: dict = {}
        for name, parents in doc.classes:
            if not is_identifier(name):
                raise InvalidDocument(f"bad class name {name!r}")
            if name in new_classes or name in self._parents or name in self._individuals:
                raise DuplicateName(f"class {name}")
            if not parents:
                raise InvalidDocument(f"class {name} has no parent")
            new_classes[name] = tuple(parents)
        if LITERAL in new_classes:
            raise DuplicateName(f"class {LITERAL} is reserved")

        known = set(self._parents) | set(new_classes)
        for name, parents in new_classes.items():
            for parent in parents:
                if parent not in known:
                    raise UnknownAttachmentClass(f"{name} attaches to unknown class {parent}")

        _check_acyclic(new_classes)

        anchors = set(UPPER_CLASSES)
        reach: dict = {}

        def grounded(cls):
            if cls not in new_classes:
                return bool(self.ancestors(cls) & anchors)
            if cls not in reach:
                reach[cls] = any(p in anchors or grounded(p) for p in new_classes[cls])
            return reach[cls]

        for name in new_classes:
            if not grounded(name):
                raise InvalidDocument(
                    f"class {name} does not descend from any of {', '.join(UPPER_CLASSES)}")

        predicates = []
        names = set()
        for sig in doc.predicates:
            if not is_identifier(sig.name):
                raise InvalidDocument(f"bad predicate name {sig.name!r}")
            if sig.name in self._predicates or sig.name in names:
                raise DuplicateName(f"predicate {sig.name}")
            names.add(sig.name)
            if sig.domain not in known:
                raise UnknownAttachmentClass(f"predicate {sig.name} domain {sig.domain}")
            if sig.range != LITERAL and sig.range not in known:
                raise UnknownAttachmentClass(f"predicate {sig.name} range {sig.range}")
            predicates.append(sig)

        individuals = []
        seen = set()
        for name, types in doc.individuals:
            if not is_identifier(name):
                raise InvalidDocument(f"bad individual name {name!r}")
            if name in seen or name in self._individuals or name in known:
                raise DuplicateName(f"individual {name}")
            if not types:
                raise InvalidDocument(f"individual {name} has no type")
            seen.add(name)
            for cls in types:
                if cls not in known:
                    raise UnknownAttachmentClass(f"individual {name} typed by unknown {cls}")
                individuals.append((name, cls))

        return Layer(
            lid,
            frozenset(new_classes),
            frozenset((c, p) for c, ps in new_classes.items() for p in ps),
            frozenset(predicates),
            frozenset(individuals),
        )

    def check_invariants(self) -> None:
        """Raise ``AssertionError`` if a structural invariant is broken."""
        order = topological_order(self._parents)
        assert len(order) == len(self._parents), "subclass graph has a cycle"
        assert self._parents.get(ROOT) == frozenset(), "root must have no parent"
        for cls, parents in self._parents.items():
            if cls != ROOT:
                assert parents, f"{cls} has no parent"
                assert ROOT in self.ancestors(cls), f"{cls} does not reach {ROOT}"
        for sig in self._predicates.values():
            assert sig.domain in self._parents
            assert sig.range == LITERAL or sig.range in self._parents


def _check_acyclic(new_classes: dict) -> None:
    state: dict = {}
    for start in new_classes:
        if start in state:
            continue
        stack = [(start, iter(new_classes[start]))]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            for parent in it:
                if parent not in new_classes:
                    continue
                if state.get(parent) == 1:
                    raise CycleIntroduced(f"cycle through {parent}")
                if parent not in state:
                    state[parent] = 1
                    stack.append((parent, iter(new_classes[parent])))
                    break
            else:
                state[node] = 2
                stack.pop()


def topological_order(parents: dict) -> list:
    """Kahn's algorithm, parents before children; shorter than input on a cycle."""
    pending = {c: len(ps) for c, ps in parents.items()}
    children: dict = {}
    for c, ps in parents.items():
        for p in ps:
            children.setdefault(p, []).append(c)
    ready = sorted(c for c, n in pending.items() if n == 0)
    order = []
    while ready:
        node = ready.pop()
        order.append(node)
        for child in children.get(node, ()):
            pending[child] -= 1
            if pending[child] == 0:
                ready.append(child)
    return order


def load_upper() -> Ontology:
    edges = frozenset((cls, ROOT) for cls in UPPER_CLASSES)
    return Ontology([Layer(UPPER, frozenset((ROOT, *UPPER_CLASSES)), edges)])


def plug_domain(o: Ontology, doc: DomainOntologyDoc) -> Ontology:
    return o.plug(doc)


def unplug_domain(o: Ontology, layer: str) -> Ontology:
    return o.unplug(layer)


def is_subclass(o: Ontology, a: str, b: str) -> bool:
    return o.is_subclass(a, b)


def validate_fact(o: Ontology, f: Fact) -> ValidationResult:
    return o.validate(f)


def build_ontology(docs: Iterable, strict: bool = True) -> Ontology:
    """Upper ontology with each document (path, dict or doc) plugged in order."""
    onto = load_upper()
    for doc in docs:
        if isinstance(doc, (str, Path)):
            doc = load_domain_doc(doc, strict=strict)
        elif isinstance(doc, dict):
            doc = DomainOntologyDoc.from_dict(doc, strict=strict)
        onto = onto.plug(doc)
    return onto

