"""Software sensors and the acquisition layer.

Providers push :class:`ProviderEvent` payloads.  A :class:`MappingRuleSet`
turns each payload into one or more facts, tagged with the provider's
default source and confidence, which are then added to the knowledge base.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Optional

from .errors import (
    DuplicateProvider,
    InvalidInterval,
    MappingError,
    StaleEvent,
    UnknownProvider,
    UnmappedPayload,
    ValidationFailed,
)
from .facts import DEFAULT_CONFIDENCE, Fact, SourceTag, parse_time
from .ontology import ValidationResult

PROVIDER_KINDS = ("timetable", "calendar", "email", "weather", "profile", "generic")
PUSH = "push"
POLL = "poll"

_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass(frozen=True)
class ProviderDescriptor:
    provider_id: str
    kind: str
    default_source: SourceTag = SourceTag.SENSED
    default_confidence: Optional[float] = None
    mode: str = PUSH
    interval: Optional[float] = None  # seconds between polls

    def __post_init__(self):
        object.__setattr__(self, "default_source", SourceTag.parse(self.default_source))
        if not isinstance(self.provider_id, str) or not self.provider_id \
                or any(ch.isspace() for ch in self.provider_id):
            raise ValueError(f"bad provider id {self.provider_id!r}")
        if self.kind not in PROVIDER_KINDS:
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if self.default_source.derived:
            raise ValueError("providers cannot emit Scheduled or Deduced facts")
        if self.default_confidence is not None and not 0.0 <= self.default_confidence <= 1.0:
            raise ValueError("default_confidence outside [0, 1]")
        if self.mode not in (PUSH, POLL):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "ProviderDescriptor":
        return cls(
            provider_id=data.get("id") or data.get("provider_id"),
            kind=data["kind"],
            default_source=data.get("source", "Sensed"),
            default_confidence=data.get("confidence"),
            mode=data.get("mode", PUSH),
            interval=data.get("interval"),
        )

    def to_dict(self) -> dict:
        return {"id": self.provider_id, "kind": self.kind, "source": self.default_source.value,
                "confidence": self.default_confidence, "mode": self.mode,
                "interval": self.interval}


@dataclass(frozen=True)
class ProviderEvent:
    provider_id: str
    event_time: datetime
    payload: dict
    sequence_no: int

    def __post_init__(self):
        object.__setattr__(self, "event_time", parse_time(self.event_time))
        if not isinstance(self.payload, dict):
            raise ValueError("payload must be a mapping")


# -- mapping rules ----------------------------------------------------------

@dataclass(frozen=True)
class FactTemplate:
    pred: str
    subj: object
    obj: object
    valid_from: object = None
    valid_to: object = None
    duration_minutes: object = None
    source: Optional[str] = None
    confidence: Optional[float] = None

    _KEYS = {"pred", "subj", "obj", "from", "to", "duration_minutes", "source", "confidence"}

    @classmethod
    def from_dict(cls, data: dict) -> "FactTemplate":
        unknown = set(data) - cls._KEYS
        if unknown:
            raise MappingError(f"unknown template keys {sorted(unknown)}")
        try:
            tmpl = cls(data["pred"], data["subj"], data["obj"], data.get("from"),
                       data.get("to"), data.get("duration_minutes"), data.get("source"),
                       data.get("confidence"))
        except KeyError as exc:
            raise MappingError(f"template missing {exc.args[0]!r}") from None
        if tmpl.source is not None and SourceTag.parse(tmpl.source).derived:
            raise MappingError("templates cannot emit Scheduled or Deduced facts")
        return tmpl


@dataclass(frozen=True)
class MappingRule:
    has: tuple = ()
    equals: tuple = ()  # ((field, value), ...)
    emit: tuple = ()

    def applies(self, payload: dict) -> bool:
        return (all(k in payload for k in self.has)
                and all(k in payload and payload[k] == v for k, v in self.equals))


def camel_case(text: str) -> str:
    """``"Out for Conference"`` -> ``"OutForConference"``."""
    return "".join(w[:1].upper() + w[1:] for w in text.split())


def _substitute(value, payload: dict, name: bool = False):
    if not isinstance(value, str):
        return value
    whole = _REF.fullmatch(value)
    try:
        if whole:
            out = payload[whole.group(1)]
        else:
            out = _REF.sub(lambda m: str(payload[m.group(1)]), value)
    except KeyError as exc:
        raise UnmappedPayload(f"payload lacks field {exc.args[0]!r}") from None
    if name and isinstance(out, str) and any(ch.isspace() for ch in out.strip()):
        out = camel_case(out)
    elif isinstance(out, str):
        out = out.strip()
    return out


class MappingRuleSet:
    """Per provider kind, an ordered list of guard -> templates rules.

    The first rule whose guard accepts the payload is used.
    """

    def __init__(self, rules: Optional[dict] = None):
        self.rules = {kind: tuple(rs) for kind, rs in (rules or {}).items()}

    @classmethod
    def from_dict(cls, data) -> "MappingRuleSet":
        if isinstance(data, dict) and "mappings" in data:
            data = data["mappings"]
        if isinstance(data, dict):
            data = [data]
        if not isinstance(data, list):
            raise MappingError("mapping document must be an object or a list")
        rules: dict = {}
        for block in data:
            if not isinstance(block, dict) or "kind" not in block:
                raise MappingError("mapping block needs a 'kind'")
            parsed = []
            for entry in block.get("rules", []):
                when = entry.get("when", {})
                emit = entry.get("emit", [])
                if not emit:
                    raise MappingError(f"{block['kind']}: rule emits nothing")
                parsed.append(MappingRule(
                    tuple(when.get("has", ())),
                    tuple(sorted(when.get("equals", {}).items())),
                    tuple(FactTemplate.from_dict(t) for t in emit),
                ))
            rules.setdefault(block["kind"], []).extend(parsed)
        return cls(rules)

    @classmethod
    def load(cls, path) -> "MappingRuleSet":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise MappingError(f"{path}: {exc}") from None

    def check(self, ontology) -> None:
        for kind, rules in self.rules.items():
            for rule in rules:
                for tmpl in rule.emit:
                    if tmpl.pred not in ontology.predicates:
                        raise MappingError(f"{kind}: unknown predicate {tmpl.pred}")

    def translate(self, kind: str, payload: dict) -> list:
        """Instantiate the first matching rule: list of ``(template, subject, object)``."""
        for rule in self.rules.get(kind, ()):
            if rule.applies(payload):
                return [(t, _substitute(t.subj, payload, name=True),
                         _substitute(t.obj, payload, name=True)) for t in rule.emit]
        raise UnmappedPayload(f"no {kind} mapping accepts fields {sorted(payload)}")


# -- acquisition ------------------------------------------------------------

@dataclass
class _ProviderState:
    descriptor: ProviderDescriptor
    last_seen: Optional[int] = None
    next_poll: Optional[datetime] = None


@dataclass
class Acquisition:
    kb: object
    mapping: MappingRuleSet
    confidence_table: dict = field(default_factory=lambda: dict(DEFAULT_CONFIDENCE))
    _providers: dict = field(default_factory=dict)

    def register_provider(self, d: ProviderDescriptor, start: Optional[datetime] = None) -> None:
        if d.provider_id in self._providers:
            raise DuplicateProvider(d.provider_id)
        if d.mode == POLL and (d.interval is None or d.interval <= 0):
            raise InvalidInterval(f"{d.provider_id}: poll interval must be positive")
        self._providers[d.provider_id] = _ProviderState(
            d, next_poll=parse_time(start) if start is not None else None)

    @property
    def providers(self) -> dict:
        return {pid: st.descriptor for pid, st in self._providers.items()}

    def last_seen(self, provider_id: str) -> Optional[int]:
        return self._state(provider_id).last_seen

    def _state(self, provider_id: str) -> _ProviderState:
        try:
            return self._providers[provider_id]
        except KeyError:
            raise UnknownProvider(provider_id) from None

    def due_polls(self, now: datetime) -> list:
        """``(provider_id, tick_time)`` for every poll tick at or before ``now``."""
        now = parse_time(now)
        due = []
        for pid, st in self._providers.items():
            d = st.descriptor
            if d.mode != POLL:
                continue
            if st.next_poll is None:
                st.next_poll = now
            while st.next_poll <= now:
                due.append((pid, st.next_poll))
                st.next_poll += timedelta(seconds=d.interval)
        due.sort(key=lambda item: item[1])
        return due

    def facts_for(self, e: ProviderEvent) -> list:
        """Translate an event into facts without touching the KB."""
        st = self._state(e.provider_id)
        d = st.descriptor
        facts = []
        for tmpl, subj, obj in self.mapping.translate(d.kind, e.payload):
            start = _substitute(tmpl.valid_from, e.payload) if tmpl.valid_from else None
            end = _substitute(tmpl.valid_to, e.payload) if tmpl.valid_to else None
            try:
                valid_from = parse_time(start) if start is not None else e.event_time
                valid_to = parse_time(end) if end is not None else None
            except ValueError as exc:
                raise UnmappedPayload(str(exc)) from None
            if valid_to is None and tmpl.duration_minutes is not None:
                minutes = _substitute(tmpl.duration_minutes, e.payload)
                try:
                    valid_to = valid_from + timedelta(minutes=float(minutes))
                except (TypeError, ValueError):
                    raise UnmappedPayload(f"bad duration {minutes!r}") from None
            source = SourceTag.parse(tmpl.source) if tmpl.source else d.default_source
            if tmpl.confidence is not None:
                conf = float(tmpl.confidence)
            elif d.default_confidence is not None and source == d.default_source:
                conf = d.default_confidence
            else:
                conf = self.confidence_table[source]
            if not subj or (isinstance(obj, str) and not obj):
                raise ValidationFailed(ValidationResult(False, "DomainViolation",
                                                        f"empty term in {tmpl.pred}"))
            facts.append(Fact(subj, tmpl.pred, obj, valid_from, valid_to, source, conf,
                              d.provider_id))
        return facts

    def ingest(self, e: ProviderEvent) -> list:
        st = self._state(e.provider_id)
        if st.last_seen is not None and e.sequence_no <= st.last_seen:
            raise StaleEvent(f"{e.provider_id}: sequence {e.sequence_no} "
                             f"not after {st.last_seen}")
        facts = self.facts_for(e)
        # validate the whole batch before adding any of it
        for fact in facts:
            self.kb.check(fact)
        ids = [self.kb.add_fact(fact) for fact in facts]
        st.last_seen = e.sequence_no
        return ids

    def user_update(self, subject: str, predicate: str, obj, at) -> int:
        """Record context the user stated about themself (Defined, confidence 1.0)."""
        if subject in ("", None) or obj in ("", None):
            raise ValidationFailed(ValidationResult(False, "RangeViolation", "empty term"))
        if isinstance(obj, str) and any(ch.isspace() for ch in obj.strip()):
            obj = camel_case(obj)
        fact = Fact(subject, predicate, obj, parse_time(at), None, SourceTag.DEFINED, 1.0,
                    f"user:{subject}")
        return self.kb.add_fact(fact)

