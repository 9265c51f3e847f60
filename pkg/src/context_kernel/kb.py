"""Context knowledge base: fact store, pattern queries, notifications, journal.

All mutations go through one lock and receive a sequence number, so the
mutation stream is totally ordered.  Subscribers are notified in that order;
a notification raised by a consumer callback that itself mutates the KB is
queued behind the notifications already pending.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

from .errors import ClockSkew, UnknownFact, ValidationFailed
from .facts import Fact, Pattern, overlaps

log = logging.getLogger(__name__)

ADDED = "added"
RETRACTED = "retracted"
MODIFIED = "modified"

FLAG_CONFLICT = "conflict"
FLAG_SHADOWED = "shadowed"
FLAG_UNVALIDATED = "unvalidated"


@dataclass(frozen=True)
class Mutation:
    seq: int
    op: str  # add | delete | modify
    fact: Fact
    previous: Optional[Fact] = None

    def to_record(self) -> dict:
        if self.op == "delete":
            return {"op": "delete", "fact_id": self.fact.fact_id, "seq": self.seq}
        record = {"op": self.op, "fact": self.fact.to_dict(), "seq": self.seq}
        if self.op == "modify":
            record["fact_id"] = self.fact.fact_id
        return record


@dataclass(frozen=True)
class Notification:
    sub_id: int
    kind: str
    fact: Fact
    binding: dict
    seq: int
    previous: Optional[Fact] = None

    def to_dict(self) -> dict:
        out = {"sub_id": self.sub_id, "kind": self.kind, "fact": self.fact.to_dict(),
               "binding": self.binding, "seq": self.seq}
        if self.previous is not None:
            out["previous"] = self.previous.to_dict()
        return out


@dataclass
class Subscription:
    sub_id: int
    pattern: Pattern
    consumer: Callable[[Notification], None]


class KnowledgeBase:
    def __init__(self, ontology=None, strict: bool = True, journal=None):
        self.ontology = ontology
        self.strict = strict
        self._facts: dict = {}
        self._by_pred: dict = {}
        self._flags: dict = {}
        self._subs: dict = {}
        self._next_id = 1
        self._next_sub = 1
        self._seq = 0
        self._log: list = []
        self._lock = threading.RLock()
        self._outbox: deque = deque()
        self._draining = False
        self._journal = None
        if journal is not None:
            self._journal = open(journal, "a", encoding="utf-8")

    # -- reads -------------------------------------------------------------

    @property
    def seq(self) -> int:
        return self._seq

    def __len__(self):
        return len(self._facts)

    def get(self, fact_id: int) -> Optional[Fact]:
        return self._facts.get(fact_id)

    def facts(self) -> list:
        with self._lock:
            return [self._facts[i] for i in sorted(self._facts)]

    def flags(self, fact_id: int) -> frozenset:
        return frozenset(self._flags.get(fact_id, ()))

    def set_flag(self, fact_id: int, flag: str, on: bool = True) -> None:
        with self._lock:
            if fact_id not in self._facts:
                return
            flags = self._flags.setdefault(fact_id, set())
            if on:
                flags.add(flag)
            else:
                flags.discard(flag)

    def changes_since(self, seq: int) -> list:
        """Mutations with sequence number greater than ``seq``."""
        with self._lock:
            # seq numbers are 1-based and contiguous
            return self._log[seq:]

    def matches(self, pattern: Pattern) -> list:
        """``(fact, binding)`` pairs in ascending fact_id order."""
        with self._lock:
            if pattern.predicate == "*" or pattern.predicate.startswith("?"):
                candidates = self._facts
            else:
                candidates = self._by_pred.get(pattern.predicate, {})
            out = []
            for fid in sorted(candidates):
                fact = self._facts[fid]
                binding = pattern.match(fact)
                if binding is not None:
                    out.append((fact, binding))
            return out

    def query(self, pattern: Pattern) -> list:
        return [binding for _, binding in self.matches(pattern)]

    # -- mutations ---------------------------------------------------------

    def check(self, fact: Fact) -> bool:
        """Validate ``fact``; raise in strict mode, else report validity."""
        if fact.valid_to is not None and fact.valid_from > fact.valid_to:
            raise ClockSkew(f"{fact}: valid_from after valid_to")
        if self.ontology is None:
            return True
        result = self.ontology.validate(fact)
        if not result.ok and self.strict:
            raise ValidationFailed(result)
        return result.ok

    def add_fact(self, fact: Fact, validate: bool = True) -> int:
        with self._lock:
            valid = self.check(fact) if validate else True
            fid = self._next_id
            stored = replace(fact, fact_id=fid)
            self._insert(stored)
            if not valid:
                self._flags.setdefault(fid, set()).add(FLAG_UNVALIDATED)
            self._record(Mutation(self._seq + 1, "add", stored))
        self._drain()
        return fid

    def delete_fact(self, fact_id: int) -> bool:
        with self._lock:
            fact = self._facts.get(fact_id)
            if fact is None:
                return False
            self._remove(fact)
            self._record(Mutation(self._seq + 1, "delete", fact))
        self._drain()
        return True

    def modify_fact(self, fact_id: int, new: Fact, validate: bool = True) -> int:
        """Replace a fact in place; the id is kept."""
        with self._lock:
            old = self._facts.get(fact_id)
            if old is None:
                raise UnknownFact(fact_id)
            stored = replace(new, fact_id=fact_id)
            if stored == old:
                return fact_id
            valid = self.check(stored) if validate else True
            self._remove(old)
            self._insert(stored)
            if not valid:
                self._flags.setdefault(fact_id, set()).add(FLAG_UNVALIDATED)
            self._record(Mutation(self._seq + 1, "modify", stored, old))
        self._drain()
        return fact_id

    def _insert(self, fact: Fact) -> None:
        fid = fact.fact_id
        self._facts[fid] = fact
        self._by_pred.setdefault(fact.predicate, {})[fid] = fact
        self._next_id = max(self._next_id, fid + 1)
        self._refresh_conflicts(fact)

    def _remove(self, fact: Fact) -> None:
        fid = fact.fact_id
        del self._facts[fid]
        bucket = self._by_pred[fact.predicate]
        del bucket[fid]
        if not bucket:
            del self._by_pred[fact.predicate]
        self._flags.pop(fid, None)
        self._refresh_conflicts(fact)

    def _refresh_conflicts(self, fact: Fact) -> None:
        """Recompute conflict flags among facts sharing subject and functional predicate."""
        if self.ontology is None:
            return
        sig = self.ontology.predicates.get(fact.predicate)
        if sig is None or not sig.functional:
            return
        group = [f for f in self._by_pred.get(fact.predicate, {}).values()
                 if f.subject == fact.subject]
        for f in group:
            clash = any(g.object != f.object and overlaps(f, g) for g in group)
            flags = self._flags.setdefault(f.fact_id, set())
            if clash:
                flags.add(FLAG_CONFLICT)
            else:
                flags.discard(FLAG_CONFLICT)

    def _record(self, mutation: Mutation) -> None:
        self._seq = mutation.seq
        self._log.append(mutation)
        if self._journal is not None:
            self._journal.write(json.dumps(mutation.to_record(), sort_keys=True) + "\n")
            self._journal.flush()
        for sub in list(self._subs.values()):
            note = self._notification_for(sub, mutation)
            if note is not None:
                self._outbox.append((sub.sub_id, note))

    @staticmethod
    def _notification_for(sub: Subscription, m: Mutation) -> Optional[Notification]:
        binding = sub.pattern.match(m.fact)
        if m.op == "add":
            kind = ADDED
        elif m.op == "delete":
            kind = RETRACTED
        else:
            kind = MODIFIED
            if binding is None:
                binding = sub.pattern.match(m.previous)
        if binding is None:
            return None
        return Notification(sub.sub_id, kind, m.fact, binding, m.seq, m.previous)

    def _drain(self) -> None:
        with self._lock:
            if self._draining:
                return
            self._draining = True
        try:
            while True:
                with self._lock:
                    if not self._outbox:
                        self._draining = False
                        return
                    sub_id, note = self._outbox.popleft()
                    sub = self._subs.get(sub_id)
                if sub is None:
                    continue
                try:
                    sub.consumer(note)
                except Exception:
                    log.warning("dropping subscription %d: consumer failed", sub_id,
                                exc_info=True)
                    self.unsubscribe(sub_id)
        except BaseException:
            with self._lock:
                self._draining = False
            raise

    # -- subscriptions -----------------------------------------------------

    def subscribe(self, pattern: Pattern, consumer: Callable[[Notification], None]) -> int:
        with self._lock:
            sub_id = self._next_sub
            self._next_sub += 1
            self._subs[sub_id] = Subscription(sub_id, pattern, consumer)
            return sub_id

    def unsubscribe(self, sub_id: int) -> bool:
        with self._lock:
            return self._subs.pop(sub_id, None) is not None

    @property
    def subscriptions(self) -> list:
        with self._lock:
            return list(self._subs)

    # -- journal -----------------------------------------------------------

    def close(self) -> None:
        with self._lock:
            if self._journal is not None:
                self._journal.flush()
                os.fsync(self._journal.fileno())
                self._journal.close()
                self._journal = None

    def apply_record(self, record: dict) -> None:
        """Apply one journal record verbatim (no validation, no re-journaling)."""
        op = record["op"]
        with self._lock:
            if op == "add":
                fact = Fact.from_dict(record["fact"])
                if fact.fact_id in self._facts:
                    raise ValueError(f"journal re-adds fact {fact.fact_id}")
                self._insert(fact)
                mutation = Mutation(record["seq"], "add", fact)
            elif op == "delete":
                fact = self._facts.get(record["fact_id"])
                if fact is None:
                    raise ValueError(f"journal deletes unknown fact {record['fact_id']}")
                self._remove(fact)
                mutation = Mutation(record["seq"], "delete", fact)
            elif op == "modify":
                old = self._facts[record["fact_id"]]
                fact = replace(Fact.from_dict(record["fact"]), fact_id=old.fact_id)
                self._remove(old)
                self._insert(fact)
                mutation = Mutation(record["seq"], "modify", fact, old)
            else:
                raise ValueError(f"unknown journal op {op!r}")
            if mutation.seq != self._seq + 1:
                raise ValueError(f"journal sequence gap at {mutation.seq}")
            self._seq = mutation.seq
            self._log.append(mutation)

    @classmethod
    def replay(cls, path, ontology=None, strict: bool = True) -> "KnowledgeBase":
        kb = cls(ontology=ontology, strict=strict)
        for record in read_journal(path):
            kb.apply_record(record)
        return kb


def read_journal(path) -> Iterable[dict]:
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
