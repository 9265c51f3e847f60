"""Facts, patterns and the half-open validity-interval time model."""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Any, Optional, Union

from .errors import MalformedPattern

REASONER = "reasoner"
WILDCARD = "*"

Value = Union[str, int, float, bool]
Binding = dict

_IDENT = re.compile(r"[A-Za-z][A-Za-z0-9_]*\Z")


class SourceTag(str, enum.Enum):
    DEFINED = "Defined"
    SENSED = "Sensed"
    PLANNED = "Planned"
    AGGREGATED = "Aggregated"
    SCHEDULED = "Scheduled"
    DEDUCED = "Deduced"

    @property
    def derived(self) -> bool:
        return self in (SourceTag.SCHEDULED, SourceTag.DEDUCED)

    @classmethod
    def parse(cls, value) -> "SourceTag":
        if isinstance(value, SourceTag):
            return value
        for tag in cls:
            if tag.value.lower() == str(value).lower():
                return tag
        raise ValueError(f"unknown source tag {value!r}")


# Tie-break order used when two contenders have equal confidence.
SOURCE_PRECEDENCE = (
    SourceTag.DEFINED,
    SourceTag.SENSED,
    SourceTag.PLANNED,
    SourceTag.AGGREGATED,
    SourceTag.SCHEDULED,
    SourceTag.DEDUCED,
)

DEFAULT_CONFIDENCE = {
    SourceTag.DEFINED: 1.0,
    SourceTag.SENSED: 0.9,
    SourceTag.PLANNED: 0.8,
    SourceTag.AGGREGATED: 0.7,
}


def is_identifier(name) -> bool:
    return isinstance(name, str) and bool(_IDENT.match(name))


# -- time -------------------------------------------------------------------

def parse_time(value) -> datetime:
    """Parse an ISO-8601 timestamp and normalise it to aware UTC."""
    if isinstance(value, datetime):
        dt = value
    else:
        text = str(value).strip()
        if text.endswith(("Z", "z")):
            text = text[:-1] + "+00:00"
        try:
            dt = datetime.fromisoformat(text)
        except ValueError as exc:
            raise ValueError(f"bad timestamp {value!r}") from exc
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_time(dt: Optional[datetime]) -> Optional[str]:
    if dt is None:
        return None
    dt = dt.astimezone(timezone.utc)
    text = dt.strftime("%Y-%m-%dT%H:%M:%S")
    if dt.microsecond:
        text += f".{dt.microsecond:06d}"
    return text + "Z"


def intersect(a_from, a_to, b_from, b_to):
    """Intersection of two half-open intervals; ``None`` as upper bound is open.

    Returns ``None`` when the intersection is empty.
    """
    lo = max(a_from, b_from)
    if a_to is None:
        hi = b_to
    elif b_to is None:
        hi = a_to
    else:
        hi = min(a_to, b_to)
    if hi is not None and hi <= lo:
        return None
    return lo, hi


def covers(valid_from, valid_to, at) -> bool:
    return valid_from <= at and (valid_to is None or at < valid_to)


def overlaps(a, b) -> bool:
    return intersect(a.valid_from, a.valid_to, b.valid_from, b.valid_to) is not None


# -- facts ------------------------------------------------------------------

@dataclass(frozen=True)
class Fact:
    subject: str
    predicate: str
    object: Value
    valid_from: datetime
    valid_to: Optional[datetime] = None
    source: SourceTag = SourceTag.SENSED
    confidence: float = 1.0
    provider: str = "unknown"
    fact_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "source", SourceTag.parse(self.source))
        object.__setattr__(self, "valid_from", parse_time(self.valid_from))
        if self.valid_to is not None:
            object.__setattr__(self, "valid_to", parse_time(self.valid_to))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.source.derived and self.provider != REASONER:
            raise ValueError(f"{self.source.value} facts must come from the reasoner")
        if not self.source.derived and self.provider == REASONER:
            raise ValueError(f"the reasoner cannot emit {self.source.value} facts")

    @property
    def key(self):
        """Identity of the statement, ignoring provenance."""
        return (self.subject, self.predicate, self.object, self.valid_from, self.valid_to)

    def content(self):
        """Everything except the KB-assigned id."""
        return replace(self, fact_id=None)

    def covers(self, at: datetime) -> bool:
        return covers(self.valid_from, self.valid_to, at)

    def to_dict(self) -> dict:
        return {
            "fact_id": self.fact_id,
            "subject": self.subject,
            "predicate": self.predicate,
            "object": self.object,
            "valid_from": format_time(self.valid_from),
            "valid_to": format_time(self.valid_to),
            "source": self.source.value,
            "confidence": self.confidence,
            "provider": self.provider,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Fact":
        return cls(
            subject=data["subject"],
            predicate=data["predicate"],
            object=data["object"],
            valid_from=parse_time(data["valid_from"]),
            valid_to=parse_time(data["valid_to"]) if data.get("valid_to") else None,
            source=SourceTag.parse(data.get("source", "Sensed")),
            confidence=float(data.get("confidence", 1.0)),
            provider=data.get("provider", "unknown"),
            fact_id=data.get("fact_id"),
        )

    def __str__(self):
        return f"{self.predicate}({self.subject}, {format_value(self.object)})"

    def describe(self) -> str:
        until = format_time(self.valid_to) or "..."
        return (f"{self} {self.source.value} {self.confidence:.3f} "
                f"[{format_time(self.valid_from)}, {until})")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return value if is_identifier(value) else json.dumps(value)
    return repr(value)


# -- patterns ---------------------------------------------------------------

def is_var(term) -> bool:
    return isinstance(term, str) and term.startswith("?")


@dataclass(frozen=True)
class Pattern:
    """``predicate(subject, object)`` with ``?x`` variables.

    ``predicate`` may be a constant, a variable, or ``*``.  Repeating a
    variable name constrains the matched values to be equal.
    """

    predicate: str
    subject: Any
    object: Any
    time_at: Optional[datetime] = None
    source_filter: Optional[frozenset] = field(default=None)

    def __post_init__(self):
        if not (self.predicate == WILDCARD or is_identifier(self.predicate)
                or (is_var(self.predicate) and is_identifier(self.predicate[1:]))):
            raise MalformedPattern(f"bad predicate {self.predicate!r}")
        for term in (self.subject, self.object):
            if is_var(term) and not is_identifier(term[1:]):
                raise MalformedPattern(f"bad variable {term!r}")
            if isinstance(term, str) and not term:
                raise MalformedPattern("empty term")
        if self.time_at is not None:
            object.__setattr__(self, "time_at", parse_time(self.time_at))
        if self.source_filter is not None:
            object.__setattr__(self, "source_filter",
                               frozenset(SourceTag.parse(s) for s in self.source_filter))

    @property
    def variables(self) -> list:
        out = []
        for term in (self.predicate, self.subject, self.object):
            if is_var(term) and term not in out:
                out.append(term)
        return out

    def match(self, fact: Fact, binding: Optional[dict] = None) -> Optional[dict]:
        """Return the extended binding if ``fact`` matches, else ``None``."""
        if self.time_at is not None and not fact.covers(self.time_at):
            return None
        if self.source_filter is not None and fact.source not in self.source_filter:
            return None
        out = dict(binding) if binding else {}
        for term, value in ((self.predicate, fact.predicate),
                            (self.subject, fact.subject),
                            (self.object, fact.object)):
            if term == WILDCARD:
                continue
            if is_var(term):
                if term in out:
                    if not _same(out[term], value):
                        return None
                else:
                    out[term] = value
            elif not _same(term, value):
                return None
        return out

    def __str__(self):
        return f"{self.predicate}({format_value(self.subject)}, {format_value(self.object)})"


def _same(a, b) -> bool:
    if isinstance(a, bool) or isinstance(b, bool):
        # keep True distinct from 1
        return type(a) is type(b) and a == b
    return a == b


_PATTERN = re.compile(r"^\s*(\*|\??[A-Za-z][A-Za-z0-9_]*)\s*\((.*)\)\s*$", re.S)


def parse_term(text: str):
    text = text.strip()
    if not text:
        raise MalformedPattern("empty argument")
    if text.startswith('"'):
        try:
            value = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedPattern(f"bad string literal {text}") from exc
        if not isinstance(value, str):
            raise MalformedPattern(f"bad string literal {text}")
        return value
    if text in ("true", "false"):
        return text == "true"
    if is_var(text):
        if not is_identifier(text[1:]):
            raise MalformedPattern(f"bad variable {text!r}")
        return text
    if is_identifier(text):
        return text
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise MalformedPattern(f"bad argument {text!r}") from None


def _split_args(body: str) -> list:
    args, buf, in_str, escape = [], [], False, False
    for ch in body:
        if in_str:
            buf.append(ch)
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
            buf.append(ch)
        elif ch == ",":
            args.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    if in_str:
        raise MalformedPattern("unterminated string")
    args.append("".join(buf))
    return args


def parse_pattern(text: str, time_at=None, source_filter=None) -> Pattern:
    """Parse ``Pred(subj, obj)``; e.g. ``parse_pattern("Activity(John, ?a)")``."""
    if not isinstance(text, str):
        raise MalformedPattern("pattern must be a string")
    m = _PATTERN.match(text)
    if not m:
        raise MalformedPattern(f"cannot parse pattern {text!r}")
    args = _split_args(m.group(2))
    if len(args) != 2:
        raise MalformedPattern(f"expected 2 arguments, got {len(args)}")
    try:
        at = parse_time(time_at) if time_at is not None else None
    except ValueError as exc:
        raise MalformedPattern(str(exc)) from None
    return Pattern(m.group(1), parse_term(args[0]), parse_term(args[1]), at, source_filter)


def shift(dt: datetime, seconds: float) -> datetime:
    return dt + timedelta(seconds=seconds)
