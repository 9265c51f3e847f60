"""Simulated software-sensor providers and the deterministic scenario runner.

A scenario drives a fresh :class:`~context_kernel.kernel.ContextKernel` on a
simulated clock.  Nothing reads the wall clock, so a script, a config and a
seed always produce the same trace.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from typing import Optional

from .acquisition import POLL, PROVIDER_KINDS, ProviderDescriptor, ProviderEvent
from .errors import ContextKernelError, ScriptParse, UnknownKind, UnknownProviderInScript
from .facts import DEFAULT_CONFIDENCE, format_time, parse_pattern, parse_time
from .kernel import ContextKernel

CONFIDENCE_TOLERANCE = 1e-9

PASS = "pass"
FAIL = "fail"
ERROR = "error"
OK = "ok"


# -- script -----------------------------------------------------------------

@dataclass(frozen=True)
class Emit:
    offset: float
    provider_id: str
    payload: dict
    seq: Optional[int] = None
    expect_error: Optional[str] = None


@dataclass(frozen=True)
class UserUpdate:
    offset: float
    subject: str
    predicate: str
    object: object
    expect_error: Optional[str] = None


@dataclass(frozen=True)
class Expect:
    offset: float
    subject: str
    activity: Optional[str]
    source: Optional[str] = None
    confidence: Optional[float] = None


@dataclass(frozen=True)
class Query:
    offset: float
    pattern: str
    bindings: Optional[list] = None
    at: Optional[str] = None
    by: Optional[str] = None


@dataclass(frozen=True)
class ScenarioScript:
    name: str
    clock_start: datetime
    providers: tuple = ()
    steps: tuple = ()
    notes: str = ""


_OFFSET = re.compile(r"^(\d+):([0-5]\d)(?::([0-5]\d))?$")


def parse_offset(value) -> float:
    """Seconds from ``"HH:MM"``, ``"HH:MM:SS"`` or a plain number of seconds."""
    if isinstance(value, bool):
        raise ScriptParse(f"bad offset {value!r}")
    if isinstance(value, (int, float)):
        if value < 0:
            raise ScriptParse(f"negative offset {value}")
        return float(value)
    m = _OFFSET.match(str(value).strip())
    if not m:
        raise ScriptParse(f"bad offset {value!r}")
    h, mnt, sec = m.groups()
    return int(h) * 3600 + int(mnt) * 60 + int(sec or 0)


def format_offset(seconds: float) -> str:
    seconds = int(seconds)
    return f"{seconds // 3600:02d}:{seconds % 3600 // 60:02d}:{seconds % 60:02d}"


def _mentions(payload, subject) -> bool:
    return any(v == subject for v in payload.values())


def parse_scenario(data) -> ScenarioScript:
    if not isinstance(data, dict):
        raise ScriptParse("scenario must be a JSON object")
    pre = data.get("preamble")
    if not isinstance(pre, dict) or "clock_start" not in pre:
        raise ScriptParse("scenario needs a preamble with clock_start")
    try:
        start = parse_time(pre["clock_start"])
    except ValueError as exc:
        raise ScriptParse(str(exc)) from None
    providers = []
    for entry in pre.get("providers", []):
        try:
            providers.append(ProviderDescriptor.from_dict(entry))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScriptParse(f"bad provider declaration {entry!r}: {exc}") from None
    declared = {p.provider_id for p in providers}
    steps = []
    last = 0.0
    subjects = set()
    for i, raw in enumerate(data.get("steps", [])):
        if not isinstance(raw, dict):
            raise ScriptParse(f"step {i} is not an object")
        offset = parse_offset(raw.get("offset", 0))
        if offset < last:
            raise ScriptParse(f"step {i}: offset goes backwards")
        last = offset
        kind = raw.get("type")
        try:
            if kind == "emit":
                pid = raw["provider"]
                if pid not in declared:
                    raise UnknownProviderInScript(f"step {i}: provider {pid!r} not declared")
                payload = raw.get("payload", {})
                if not isinstance(payload, dict):
                    raise ScriptParse(f"step {i}: payload must be an object")
                subjects.update(v for v in payload.values() if isinstance(v, str))
                steps.append(Emit(offset, pid, payload, raw.get("seq"),
                                  raw.get("expect_error")))
            elif kind == "user_update":
                subjects.add(raw["subject"])
                steps.append(UserUpdate(offset, raw["subject"], raw["predicate"],
                                        raw["object"], raw.get("expect_error")))
            elif kind == "expect":
                if raw["subject"] not in subjects:
                    raise ScriptParse(f"step {i}: no earlier event mentions {raw['subject']}")
                steps.append(Expect(offset, raw["subject"], raw.get("activity"),
                                    raw.get("source"), raw.get("confidence")))
            elif kind == "query":
                parse_pattern(raw["pattern"])
                steps.append(Query(offset, raw["pattern"], raw.get("bindings"),
                                   raw.get("at"), raw.get("by")))
            else:
                raise ScriptParse(f"step {i}: unknown step type {kind!r}")
        except KeyError as exc:
            raise ScriptParse(f"step {i}: missing {exc.args[0]!r}") from None
        except ContextKernelError as exc:
            if isinstance(exc, (ScriptParse, UnknownProviderInScript)):
                raise
            raise ScriptParse(f"step {i}: {exc}") from None
    return ScenarioScript(data.get("name", "scenario"), start, tuple(providers),
                          tuple(steps), data.get("notes", ""))


def load_scenario(path) -> ScenarioScript:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScriptParse(f"{path}: {exc}") from None
    return parse_scenario(data)


# -- providers --------------------------------------------------------------

_PEOPLE = ("John", "Jim", "Kim")


def _random_payload(kind: str, rng: random.Random, at: datetime) -> dict:
    slot = at.replace(minute=0, second=0, microsecond=0) + timedelta(hours=rng.randint(0, 3))
    span = {"start": format_time(slot),
            "end": format_time(slot + timedelta(hours=rng.randint(1, 2)))}
    if kind == "timetable":
        return {"user": rng.choice(_PEOPLE), "room": "Office", **span}
    if kind == "calendar":
        return {"user": rng.choice(_PEOPLE), "category": rng.choice(("Personal", "Work")),
                **span}
    if kind == "email":
        return {"from": rng.choice(_PEOPLE), "to": rng.choice(_PEOPLE),
                "meeting_time": span["start"], "duration_minutes": 60,
                "topic": rng.choice(("Meeting", "DiscussingOnProject", "Presenting"))}
    if kind == "weather":
        return {"condition": rng.choice(("Snowing", "Clear", "Raining"))}
    if kind == "profile":
        return {"user": rng.choice(_PEOPLE),
                "role": rng.choice(("Faculty", "Researcher", "ResearchStudent"))}
    return {"user": rng.choice(_PEOPLE), "search": "Flight"}


class SimulatedProvider:
    """A push or poll provider fed by a script or by a seeded generator."""

    def __init__(self, kind: str, seed=None, provider_id: Optional[str] = None,
                 script=()):
        if kind not in PROVIDER_KINDS:
            raise UnknownKind(kind)
        self.kind = kind
        self.provider_id = provider_id or kind
        self.seed = seed
        self._rng = random.Random(seed)
        self._seq = 0
        self._script = list(script)  # (offset seconds, payload)
        self._pending: list = []

    def event(self, at, payload: Optional[dict] = None, seq: Optional[int] = None):
        at = parse_time(at)
        if payload is None:
            payload = _random_payload(self.kind, self._rng, at)
        if seq is None:
            self._seq += 1
            seq = self._seq
        else:
            self._seq = max(self._seq, seq)
        return ProviderEvent(self.provider_id, at, dict(payload), seq)

    def scripted_events(self, clock_start) -> list:
        start = parse_time(clock_start)
        return [self.event(start + timedelta(seconds=off), payload)
                for off, payload in self._script]

    def queue(self, payload: dict) -> None:
        self._pending.append(payload)

    def poll(self, at) -> list:
        out = [self.event(at, payload) for payload in self._pending]
        self._pending.clear()
        return out


def make_provider(kind: str, seed=None, provider_id: Optional[str] = None, script=()):
    return SimulatedProvider(kind, seed, provider_id, script)


# -- trace ------------------------------------------------------------------

@dataclass
class TraceEntry:
    index: int
    time: str
    action: str
    detail: dict
    mutations: list = field(default_factory=list)
    derivations: list = field(default_factory=list)
    resolutions: list = field(default_factory=list)
    verdict: str = OK
    message: str = ""
    actual: object = None


@dataclass
class ScenarioTrace:
    name: str
    entries: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.verdict not in (FAIL, ERROR) for e in self.entries)

    @property
    def expectations(self) -> list:
        return [e for e in self.entries if e.action in ("expect", "query")]

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed,
                "entries": [asdict(e) for e in self.entries]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioTrace":
        return cls(data["name"], [TraceEntry(**e) for e in data["entries"]])

    @classmethod
    def from_json(cls, text: str) -> "ScenarioTrace":
        return cls.from_dict(json.loads(text))

    def format_human(self) -> str:
        lines = [f"scenario {self.name}"]
        for e in self.entries:
            head = f"[{e.time}] {e.action:<11} {_summary(e)}"
            if e.verdict != OK:
                head += f"  => {e.verdict.upper()}"
            lines.append(head)
            if e.message:
                lines.append(f"    {e.message}")
            for m in e.mutations:
                lines.append(f"    {_mutation_text(m)}")
            for d in e.derivations:
                lines.append(f"    derived {d}")
            for r in e.resolutions:
                lines.append(f"    resolved {r['subject']}/{r['predicate']} -> {r['winner']} "
                             f"via {r['policy']}{' ' + r['rule_id'] if r['rule_id'] else ''}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def _summary(e: TraceEntry) -> str:
    d = e.detail
    if e.action in ("emit", "poll"):
        return f"{d['provider']} {json.dumps(d['payload'], sort_keys=True)}"
    if e.action == "user_update":
        return f"{d['predicate']}({d['subject']}, {d['object']})"
    if e.action == "expect":
        want = f"{d['subject']} {d['activity']}"
        if d.get("source"):
            want += f" ({d['source']})"
        return f"{want}; actual {e.actual}"
    if e.action == "query":
        by = f" by {d['by']}" if d.get("by") else ""
        return f"{d['pattern']}{by} -> {e.actual}"
    return json.dumps(d, sort_keys=True)


def _mutation_text(m: dict) -> str:
    if m["op"] == "delete":
        return f"- #{m['fact_id']}"
    f = m["fact"]
    sign = "+" if m["op"] == "add" else "~"
    until = f["valid_to"] or "..."
    return (f"{sign} #{f['fact_id']} {f['predicate']}({f['subject']}, {f['object']}) "
            f"{f['source']} {f['confidence']:.3f} [{f['valid_from']}, {until})")


# -- runner -----------------------------------------------------------------

class _Run:
    def __init__(self, script, ontology, rules, mapping, config):
        strict = getattr(config, "strict", True)
        confidence = getattr(config, "confidence", None) or dict(DEFAULT_CONFIDENCE)
        journal = getattr(config, "journal", None)
        self.script = script
        self.kernel = ContextKernel(ontology, rules, mapping, strict=strict,
                                    confidence=confidence, journal=journal)
        self.providers = {}
        for d in script.providers:
            self.kernel.register_provider(d, start=script.clock_start)
            self.providers[d.provider_id] = make_provider(d.kind, provider_id=d.provider_id)
        self.trace = ScenarioTrace(script.name)
        self._cursor = self.kernel.kb.seq

    def _entry(self, at, action, detail) -> TraceEntry:
        entry = TraceEntry(len(self.trace.entries), format_time(at), action, detail)
        self.trace.entries.append(entry)
        return entry

    def _collect(self, entry: TraceEntry, report=None) -> None:
        changes = self.kernel.kb.changes_since(self._cursor)
        self._cursor = self.kernel.kb.seq
        entry.mutations = [m.to_record() for m in changes]
        if report is not None:
            entry.derivations = [d.describe() for d in report.derived]
            entry.resolutions = [r.to_dict() for r in report.resolutions]

    def _guarded(self, entry, expect_error, action):
        try:
            report = action()
        except ContextKernelError as exc:
            self._collect(entry)
            if expect_error and exc.code == expect_error:
                entry.verdict = PASS
                entry.message = f"expected error {exc.code}: {exc}"
            else:
                entry.verdict = ERROR
                entry.message = f"{exc.code}: {exc}"
            return
        self._collect(entry, report)
        if expect_error:
            entry.verdict = FAIL
            entry.message = f"expected error {expect_error} did not occur"

    def _ingest(self, entry, event, expect_error=None):
        self._guarded(entry, expect_error, lambda: self.kernel.ingest(event)[1])

    def _polls(self, now):
        for pid, tick in self.kernel.acquisition.due_polls(now):
            provider = self.providers[pid]
            for event in provider.poll(tick):
                entry = self._entry(tick, "poll", {"provider": pid, "payload": event.payload,
                                                   "seq": event.sequence_no})
                self._ingest(entry, event)

    def run(self) -> ScenarioTrace:
        for step in self.script.steps:
            now = self.script.clock_start + timedelta(seconds=step.offset)
            self._polls(now)
            if isinstance(step, Emit):
                self._emit(now, step)
            elif isinstance(step, UserUpdate):
                entry = self._entry(now, "user_update", {
                    "subject": step.subject, "predicate": step.predicate,
                    "object": step.object})
                self._guarded(entry, step.expect_error, lambda: self.kernel.user_update(
                    step.subject, step.predicate, step.object, now)[1])
            elif isinstance(step, Expect):
                self._expect(now, step)
            elif isinstance(step, Query):
                self._query(now, step)
        return self.trace

    def _emit(self, now, step: Emit):
        provider = self.providers[step.provider_id]
        descriptor = self.kernel.acquisition.providers[step.provider_id]
        detail = {"provider": step.provider_id, "payload": step.payload}
        if descriptor.mode == POLL:
            provider.queue(step.payload)
            entry = self._entry(now, "emit", detail)
            entry.message = "queued until next poll"
            return
        event = provider.event(now, step.payload, step.seq)
        detail["seq"] = event.sequence_no
        entry = self._entry(now, "emit", detail)
        self._ingest(entry, event, step.expect_error)

    def _expect(self, now, step: Expect):
        entry = self._entry(now, "expect", {
            "subject": step.subject, "activity": step.activity, "source": step.source,
            "confidence": step.confidence})
        actual = self.kernel.current_activity(step.subject, now)
        if actual is None:
            entry.actual = None
            ok = step.activity is None
        else:
            entry.actual = {"activity": actual.activity, "confidence": actual.confidence,
                            "source": actual.source.value}
            ok = (actual.activity == step.activity
                  and (step.source is None or actual.source.value == step.source)
                  and (step.confidence is None
                       or abs(actual.confidence - step.confidence) <= CONFIDENCE_TOLERANCE))
        entry.verdict = PASS if ok else FAIL

    def _query(self, now, step: Query):
        at = parse_time(step.at) if step.at else now
        entry = self._entry(now, "query", {"pattern": step.pattern, "at": format_time(at),
                                           "by": step.by, "bindings": step.bindings})
        bindings = self.kernel.query(parse_pattern(step.pattern, time_at=at))
        entry.actual = bindings
        if step.bindings is not None:
            entry.verdict = PASS if bindings == step.bindings else FAIL


def run_scenario(script: ScenarioScript, ontology, rules, mapping, config=None) -> ScenarioTrace:
    run = _Run(script, ontology, rules, mapping, config)
    try:
        return run.run()
    finally:
        run.kernel.close()


def fuzz_script(seed: int, steps: int = 40) -> ScenarioScript:
    """Random but reproducible scenario touching every provider kind."""
    rng = random.Random(seed)
    start = parse_time("2009-03-02T08:00:00Z")
    providers = tuple(ProviderDescriptor(kind, kind) for kind in PROVIDER_KINDS)
    sims = {kind: make_provider(kind, seed=rng.randrange(2**32)) for kind in PROVIDER_KINDS}
    out = []
    offset = 0.0
    for _ in range(steps):
        offset += rng.choice((0, 60, 300, 900))
        roll = rng.random()
        if roll < 0.75:
            kind = rng.choice(PROVIDER_KINDS)
            at = start + timedelta(seconds=offset)
            out.append(Emit(offset, kind, sims[kind].event(at).payload))
        elif roll < 0.85:
            out.append(UserUpdate(offset, rng.choice(_PEOPLE), "Activity",
                                  rng.choice(("OutForConference", "Meeting", "Presenting"))))
        else:
            out.append(Query(offset, f"Activity({rng.choice(_PEOPLE)}, ?a)"))
    return ScenarioScript(f"fuzz-{seed}", start, providers, tuple(out))
