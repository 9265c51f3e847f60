"""Context reasoning engine.

Forward chaining
    Inference rules are applied semi-naively until no new
    ``(subject, predicate, object, interval)`` tuple appears.  Premises of one
    rule instance must have overlapping validity; the derived fact is valid on
    the intersection.

Classification and confidence
    A derived fact is *Scheduled* when it has a support tree whose leaves are
    all Defined facts, otherwise *Deduced*.  One derivation has confidence
    ``rule_factor * min(premise confidences)``; a derived fact carries the best
    confidence over its derivations.

Truth maintenance
    Every derivation (rule, premises) is recorded.  Removing a fact
    over-deletes everything that depends on it and then re-derives whatever
    still has support from surviving facts (delete and rederive).

Conflicts
    Facts of a functional predicate with different objects and overlapping
    validity conflict.  A conflict-resolution rule whose objects are exactly
    the contender objects merges them; otherwise the contender with the best
    (confidence, source precedence, recency, id) wins.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from .errors import EmptyConflict, NonTermination, RuleValidation
from .facts import (
    REASONER,
    SOURCE_PRECEDENCE,
    Fact,
    Pattern,
    SourceTag,
    format_time,
    intersect,
    is_var,
    parse_time,
)
from .kb import FLAG_SHADOWED, FLAG_UNVALIDATED

log = logging.getLogger(__name__)

INFERENCE = "inference"
CONFLICT_RESOLUTION = "conflict_resolution"
_KIND_ALIASES = {
    "inference": INFERENCE,
    "conflict_resolution": CONFLICT_RESOLUTION,
    "conflict-resolution": CONFLICT_RESOLUTION,
    "conflictresolution": CONFLICT_RESOLUTION,
    "merge": CONFLICT_RESOLUTION,
}
ACTIVITY = "Activity"

_SCHEDULE_GRADE = (SourceTag.DEFINED, SourceTag.SCHEDULED)


# -- rules ------------------------------------------------------------------

@dataclass(frozen=True)
class Rule:
    rule_id: str
    antecedents: tuple
    consequent: Pattern
    kind: str = INFERENCE
    rule_factor: float = 1.0
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "antecedents", tuple(self.antecedents))
        kind = _KIND_ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise RuleValidation(f"{self.rule_id}: unknown kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if not self.antecedents:
            raise RuleValidation(f"{self.rule_id}: no antecedents")
        if not 0.0 < self.rule_factor <= 1.0:
            raise RuleValidation(f"{self.rule_id}: factor {self.rule_factor} outside (0, 1]")
        for pat in (*self.antecedents, self.consequent):
            if pat.predicate == "*" or is_var(pat.predicate):
                raise RuleValidation(f"{self.rule_id}: predicates must be constants")
            if pat.time_at is not None or pat.source_filter is not None:
                raise RuleValidation(f"{self.rule_id}: time or source filters not allowed")
        bound = {v for pat in self.antecedents for v in pat.variables}
        unbound = [v for v in self.consequent.variables if v not in bound]
        if unbound:
            raise RuleValidation(f"{self.rule_id}: unbound consequent variables {unbound}")
        if self.kind == CONFLICT_RESOLUTION:
            preds = {pat.predicate for pat in self.antecedents}
            if len(preds) != 1 or any(is_var(pat.object) for pat in self.antecedents):
                raise RuleValidation(
                    f"{self.rule_id}: merge rules need one predicate and constant objects")
            if is_var(self.consequent.object):
                raise RuleValidation(f"{self.rule_id}: merge result must be a constant")

    @classmethod
    def from_dict(cls, data: dict) -> "Rule":
        try:
            ants = [_pattern(p) for p in data["if"]]
            then = _pattern(data["then"])
            return cls(data["id"], tuple(ants), then, data.get("kind", INFERENCE),
                       float(data.get("factor", 1.0)), data.get("note", ""))
        except KeyError as exc:
            raise RuleValidation(f"rule missing {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        out = {"id": self.rule_id, "kind": self.kind, "factor": self.rule_factor,
               "if": [_pattern_dict(p) for p in self.antecedents],
               "then": _pattern_dict(self.consequent)}
        if self.note:
            out["note"] = self.note
        return out

    def __str__(self):
        body = " & ".join(str(p) for p in self.antecedents)
        return f"{self.rule_id}: {body} -> {self.consequent}"


def _pattern(data: dict) -> Pattern:
    if not isinstance(data, dict):
        raise RuleValidation("pattern must be an object")
    try:
        return Pattern(data["pred"], data["subj"], data["obj"])
    except KeyError as exc:
        raise RuleValidation(f"pattern missing {exc.args[0]!r}") from None


def _pattern_dict(p: Pattern) -> dict:
    return {"pred": p.predicate, "subj": p.subject, "obj": p.object}


def rules_from_dict(data) -> list:
    if isinstance(data, dict):
        data = data.get("rules", [])
    rules = [Rule.from_dict(entry) for entry in data]
    ids = [r.rule_id for r in rules]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise RuleValidation(f"duplicate rule ids {dupes}")
    return rules


def load_rules(path) -> list:
    with open(path, encoding="utf-8") as fh:
        try:
            return rules_from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise RuleValidation(f"{path}: {exc}") from None


def check_rules(rules, ontology) -> None:
    for rule in rules:
        for pat in (*rule.antecedents, rule.consequent):
            if pat.predicate not in ontology.predicates:
                raise RuleValidation(f"{rule.rule_id}: unknown predicate {pat.predicate}")


# -- results ----------------------------------------------------------------

@dataclass(frozen=True)
class Derivation:
    derived_fact: Fact
    rule_id: str
    premise_ids: tuple
    assigned_source: SourceTag
    confidence: float

    def describe(self) -> str:
        premises = ", ".join(f"#{i}" for i in self.premise_ids)
        return (f"{self.rule_id}: {self.derived_fact} {self.assigned_source.value} "
                f"{self.confidence:.3f} <- {premises}")


@dataclass(frozen=True)
class Conflict:
    subject: str
    predicate: str
    contenders: tuple

    @property
    def ids(self) -> tuple:
        return tuple(f.fact_id for f in self.contenders)

    @property
    def objects(self) -> tuple:
        seen = []
        for f in self.contenders:
            if f.object not in seen:
                seen.append(f.object)
        return tuple(seen)


@dataclass(frozen=True)
class Resolution:
    subject: str
    predicate: str
    policy: str  # merge | precedence
    winner: object
    confidence: float
    source: SourceTag
    rule_id: Optional[str] = None
    winner_fact_id: Optional[int] = None
    inputs: tuple = ()
    shadowed: tuple = ()

    def to_dict(self) -> dict:
        return {"subject": self.subject, "predicate": self.predicate, "policy": self.policy,
                "winner": self.winner, "confidence": self.confidence,
                "source": self.source.value, "rule_id": self.rule_id,
                "winner_fact_id": self.winner_fact_id, "inputs": list(self.inputs),
                "shadowed": list(self.shadowed)}


class CurrentActivity(NamedTuple):
    activity: object
    confidence: float
    source: SourceTag


@dataclass
class UpdateReport:
    derived: list = field(default_factory=list)  # Derivation for each new fact
    retracted: list = field(default_factory=list)  # fact ids
    revised: list = field(default_factory=list)  # fact ids whose confidence/source changed
    conflicts: list = field(default_factory=list)
    resolutions: list = field(default_factory=list)


# -- conflicts --------------------------------------------------------------

def precedence_key(f: Fact):
    return (-f.confidence, SOURCE_PRECEDENCE.index(f.source),
            -f.valid_from.timestamp(), f.fact_id if f.fact_id is not None else 0)


def detect_conflicts(kb, functional=None) -> list:
    """Maximal groups of pairwise-overlapping facts with at least two objects.

    ``functional`` defaults to the functional predicates of ``kb.ontology``.
    """
    if functional is None:
        onto = getattr(kb, "ontology", None)
        if onto is None:
            return []
        functional = {name for name, sig in onto.predicates.items() if sig.functional}
    groups: dict = {}
    for fact in kb.facts():
        if fact.predicate in functional:
            groups.setdefault((fact.subject, fact.predicate), []).append(fact)
    out = []
    for (subject, predicate), facts in groups.items():
        facts = [f for f in facts if f.valid_to is None or f.valid_from < f.valid_to]
        # maximal cliques of an interval graph are the active sets at left endpoints
        cliques = []
        for t in sorted({f.valid_from for f in facts}):
            active = frozenset(f.fact_id for f in facts if f.covers(t))
            cliques.append(active)
        maximal = []
        for c in cliques:
            if any(c < other for other in cliques) or c in maximal:
                continue
            maximal.append(c)
        by_id = {f.fact_id: f for f in facts}
        for clique in maximal:
            contenders = tuple(by_id[i] for i in sorted(clique))
            if len({f.object for f in contenders}) >= 2:
                out.append(Conflict(subject, predicate, contenders))
    out.sort(key=lambda c: (c.subject, c.predicate, c.ids))
    return out


def _merge_rule_applies(rule: Rule, c: Conflict) -> Optional[dict]:
    binding: dict = {}
    for pat in rule.antecedents:
        if pat.predicate != c.predicate:
            return None
        if is_var(pat.subject):
            if binding.setdefault(pat.subject, c.subject) != c.subject:
                return None
        elif pat.subject != c.subject:
            return None
    if {pat.object for pat in rule.antecedents} != set(c.objects):
        return None
    return binding


def resolve_conflict(c: Conflict, rules=()) -> Resolution:
    if len(c.contenders) < 2 or len(c.objects) < 2:
        raise EmptyConflict(f"{c.subject}/{c.predicate}: fewer than two distinct contenders")
    ids = c.ids
    for rule in rules:
        if rule.kind != CONFLICT_RESOLUTION:
            continue
        binding = _merge_rule_applies(rule, c)
        if binding is None:
            continue
        conf = rule.rule_factor * min(f.confidence for f in c.contenders)
        source = (SourceTag.SCHEDULED if all(f.source in _SCHEDULE_GRADE for f in c.contenders)
                  else SourceTag.DEDUCED)
        winner = rule.consequent.object
        return Resolution(c.subject, c.predicate, "merge", winner, conf, source,
                          rule_id=rule.rule_id, inputs=ids, shadowed=ids)
    ranked = sorted(c.contenders, key=precedence_key)
    best = ranked[0]
    shadowed = tuple(sorted(f.fact_id for f in ranked if f.object != best.object))
    return Resolution(c.subject, c.predicate, "precedence", best.object, best.confidence,
                      best.source, winner_fact_id=best.fact_id, inputs=ids, shadowed=shadowed)


def current_activity(kb, subject: str, at, rules=(), predicate: str = ACTIVITY):
    """Canonical activity of ``subject`` at ``at``, or ``None``."""
    at = parse_time(at)
    facts = [f for f, _ in kb.matches(Pattern(predicate, subject, "?a", time_at=at))]
    if not facts:
        return None
    if len({f.object for f in facts}) >= 2:
        r = resolve_conflict(Conflict(subject, predicate, tuple(facts)), rules)
        return CurrentActivity(r.winner, r.confidence, r.source)
    best = min(facts, key=precedence_key)
    return CurrentActivity(best.object, best.confidence, best.source)


# -- engine -----------------------------------------------------------------

def _subst(term, binding):
    return binding[term] if is_var(term) else term


class Reasoner:
    """Incremental reasoner bound to one knowledge base.

    Call :meth:`update` after a batch of KB mutations; it folds the batch into
    the derivation graph and writes the consequences back to the KB.
    Node references are KB fact ids for base facts and content keys
    ``(subject, predicate, object, valid_from, valid_to)`` for derived facts.
    """

    def __init__(self, kb, rules=()):
        self.kb = kb
        self.rules = list(rules)
        self.inference_rules = [r for r in self.rules if r.kind == INFERENCE]
        self._factor = {r.rule_id: r.rule_factor for r in self.rules}
        self._nodes: dict = {}  # ref -> (s, p, o, from, to)
        self._by_pred: dict = {}  # predicate -> {ref: None}
        self._justs: dict = {}  # derived key -> {(rule_id, premises): None}
        self._dependents: dict = {}  # ref -> {derived key: None}
        self._ids: dict = {}  # derived key -> KB fact id
        self._key_of_id: dict = {}
        self._own_seqs: set = set()
        self._cursor = 0
        self.resolutions: list = []

    # -- node registry -----------------------------------------------------

    def _register(self, ref, content) -> None:
        self._nodes[ref] = content
        self._by_pred.setdefault(content[1], {})[ref] = None

    def _unregister(self, ref) -> None:
        content = self._nodes.pop(ref, None)
        if content is not None:
            bucket = self._by_pred[content[1]]
            bucket.pop(ref, None)
            if not bucket:
                del self._by_pred[content[1]]

    # -- matching ----------------------------------------------------------

    def _join(self, rule: Rule, pinned: int, pinned_ref):
        ants = rule.antecedents
        n = len(ants)
        premises = [None] * n

        def step(i, binding, lo, hi):
            if i == n:
                yield binding, tuple(premises), lo, hi
                return
            pat = ants[i]
            refs = (pinned_ref,) if i == pinned else self._by_pred.get(pat.predicate, {})
            for ref in list(refs):
                s, p, o, vf, vt = self._nodes[ref]
                if p != pat.predicate:
                    continue
                b = _unify(pat, s, o, binding)
                if b is None:
                    continue
                if i == 0:
                    span = (vf, vt) if (vt is None or vf < vt) else None
                else:
                    span = intersect(lo, hi, vf, vt)
                if span is None:
                    continue
                premises[i] = ref
                yield from step(i + 1, b, span[0], span[1])

        yield from step(0, {}, None, None)

    def _saturate(self, delta: list) -> list:
        """Semi-naive closure seeded by ``delta``; returns newly derived keys."""
        new_keys = []
        frontier = list(delta)
        rounds = 0
        while frontier and self.inference_rules:
            rounds += 1
            limit = len(self.inference_rules) * max(1, len(self._nodes)) ** 2
            if rounds > limit:
                raise NonTermination(f"no fixpoint after {rounds} rounds")
            by_pred: dict = {}
            for ref in frontier:
                by_pred.setdefault(self._nodes[ref][1], []).append(ref)
            produced = []
            for rule in self.inference_rules:
                head = rule.consequent
                for i, pat in enumerate(rule.antecedents):
                    for ref in by_pred.get(pat.predicate, ()):
                        for binding, premises, lo, hi in self._join(rule, i, ref):
                            key = (_subst(head.subject, binding), head.predicate,
                                   _subst(head.object, binding), lo, hi)
                            justs = self._justs.get(key)
                            if justs is None:
                                justs = self._justs[key] = {}
                                self._register(key, key)
                                produced.append(key)
                                new_keys.append(key)
                            just = (rule.rule_id, premises)
                            if just in justs:
                                continue
                            justs[just] = None
                            for p in premises:
                                self._dependents.setdefault(p, {})[key] = None
            frontier = produced
        return new_keys

    # -- confidence and classification -------------------------------------

    def _base_value(self, ref):
        fact = self.kb.get(ref)
        return fact.confidence, fact.source == SourceTag.DEFINED

    def _relax(self):
        """Best confidence and Scheduled-ness per derived key (well-founded)."""
        conf: dict = {}
        sched: dict = {}
        base = {}
        for key, justs in self._justs.items():
            for _, premises in justs:
                for p in premises:
                    if not isinstance(p, tuple) and p not in base:
                        base[p] = self._base_value(p)
        changed = True
        while changed:
            changed = False
            for key, justs in self._justs.items():
                for rule_id, premises in justs:
                    vals = []
                    all_sched = True
                    for p in premises:
                        if isinstance(p, tuple):
                            if p not in conf:
                                break
                            vals.append(conf[p])
                            all_sched = all_sched and sched.get(p, False)
                        else:
                            c, d = base[p]
                            vals.append(c)
                            all_sched = all_sched and d
                    else:
                        c = self._factor[rule_id] * min(vals)
                        if c > conf.get(key, -1.0):
                            conf[key] = c
                            changed = True
                        if all_sched and not sched.get(key, False):
                            sched[key] = True
                            changed = True
        return conf, sched

    def _sync(self, report: UpdateReport) -> None:
        conf, sched = self._relax()
        onto = getattr(self.kb, "ontology", None)
        for key in self._justs:
            source = SourceTag.SCHEDULED if sched.get(key) else SourceTag.DEDUCED
            s, p, o, vf, vt = key
            fact = Fact(s, p, o, vf, vt, source, min(1.0, conf[key]), REASONER)
            fid = self._ids.get(key)
            if fid is None:
                fid = self.kb.add_fact(fact, validate=False)
                self._own_seqs.add(self.kb.seq)
                self._ids[key] = fid
                self._key_of_id[fid] = key
                if onto is not None and not onto.validate(fact).ok:
                    self.kb.set_flag(fid, FLAG_UNVALIDATED)
                report.derived.append(self._derivation(key, next(iter(self._justs[key]))))
            else:
                old = self.kb.get(fid)
                if old is not None and (old.source, old.confidence) != (fact.source,
                                                                        fact.confidence):
                    self.kb.modify_fact(fid, fact, validate=False)
                    self._own_seqs.add(self.kb.seq)
                    report.revised.append(fid)

    # -- truth maintenance -------------------------------------------------

    def _remove_refs(self, removed: list) -> list:
        gone = set(removed)
        over: dict = {}
        stack = list(removed)
        while stack:
            ref = stack.pop()
            for key in self._dependents.get(ref, {}):
                if key not in over and key in self._justs:
                    over[key] = None
                    stack.append(key)
        for key in over:
            self._justs[key] = {j: None for j in self._justs[key] if gone.isdisjoint(j[1])}
        revived: set = set()
        changed = True
        while changed:
            changed = False
            for key in over:
                if key in revived or key in gone:
                    continue
                for _, premises in self._justs[key]:
                    if all(p not in gone and (p not in over or p in revived) for p in premises):
                        revived.add(key)
                        changed = True
                        break
        dead = [k for k in over if k not in revived]
        # derived facts deleted by someone other than the reasoner
        dead += [r for r in removed if isinstance(r, tuple) and r in self._justs and r not in over]
        dead_refs = gone | set(dead)
        for ref in list(dead_refs):
            for key in self._dependents.pop(ref, {}):
                justs = self._justs.get(key)
                if justs is not None and key not in dead_refs:
                    self._justs[key] = {j: None for j in justs if dead_refs.isdisjoint(j[1])}
        for key in dead:
            for _, premises in self._justs.pop(key):
                for p in premises:
                    deps = self._dependents.get(p)
                    if deps is not None:
                        deps.pop(key, None)
            self._unregister(key)
        for ref in gone:
            self._unregister(ref)
        retracted = []
        for key in dead:
            fid = self._ids.pop(key, None)
            if fid is not None:
                self._key_of_id.pop(fid, None)
                retracted.append(fid)
        retracted.sort()
        for fid in retracted:
            if self.kb.delete_fact(fid):
                self._own_seqs.add(self.kb.seq)
        return retracted

    # -- public ------------------------------------------------------------

    def update(self) -> UpdateReport:
        """Fold KB mutations since the last call into the derivation graph."""
        report = UpdateReport()
        changes = self.kb.changes_since(self._cursor)
        self._cursor = self.kb.seq
        removed: dict = {}
        added: dict = {}
        for m in changes:
            if m.seq in self._own_seqs:
                self._own_seqs.discard(m.seq)
                continue
            fid = m.fact.fact_id
            key = self._key_of_id.get(fid)
            if key is not None:
                # someone else touched a derived fact
                if m.op == "delete":
                    self._ids.pop(key, None)
                    self._key_of_id.pop(fid, None)
                    removed[key] = None
                continue
            if m.op == "add":
                added[fid] = None
            elif m.op == "delete":
                if fid in added:
                    del added[fid]
                else:
                    removed[fid] = None
            elif fid not in added:
                removed[fid] = None
                added[fid] = None
        if removed:
            report.retracted = self._remove_refs(list(removed))
        for fid in added:
            fact = self.kb.get(fid)
            if fact is not None:
                self._register(fid, fact.key)
        self._saturate(list(added))
        self._sync(report)
        self._resolve(report)
        return report

    def _resolve(self, report: UpdateReport) -> None:
        conflicts = detect_conflicts(self.kb)
        resolutions = [resolve_conflict(c, self.rules) for c in conflicts]
        shadowed = {fid for r in resolutions for fid in r.shadowed}
        for fact in self.kb.facts():
            flagged = FLAG_SHADOWED in self.kb.flags(fact.fact_id)
            if flagged != (fact.fact_id in shadowed):
                self.kb.set_flag(fact.fact_id, FLAG_SHADOWED, not flagged)
        self.resolutions = resolutions
        report.conflicts = conflicts
        report.resolutions = resolutions

    def retract_derivations(self, removed_fact_id: int) -> list:
        """Delete a fact (if still present) and return the derived ids retracted with it."""
        self.kb.delete_fact(removed_fact_id)
        return self.update().retracted

    def _premise_id(self, ref):
        return self._ids.get(ref) if isinstance(ref, tuple) else ref

    def _derivation(self, key, just) -> Derivation:
        rule_id, premises = just
        facts = [self.kb.get(self._premise_id(p)) for p in premises]
        conf = self._factor[rule_id] * min(f.confidence for f in facts)
        source = (SourceTag.SCHEDULED if all(f.source in _SCHEDULE_GRADE for f in facts)
                  else SourceTag.DEDUCED)
        return Derivation(self.kb.get(self._ids[key]), rule_id,
                          tuple(self._premise_id(p) for p in premises), source, conf)

    def derivations(self) -> list:
        """Every recorded derivation, grouped by derived fact id."""
        out = []
        for key in sorted(self._justs, key=lambda k: self._ids[k]):
            for just in self._justs[key]:
                out.append(self._derivation(key, just))
        return out

    def derived_facts(self) -> list:
        return sorted((self.kb.get(i) for i in self._ids.values()), key=lambda f: f.fact_id)

    def current_activity(self, subject: str, at, predicate: str = ACTIVITY):
        return current_activity(self.kb, subject, at, self.rules, predicate)


def _unify(pat: Pattern, subject, obj, binding: dict) -> Optional[dict]:
    out = binding
    for term, value in ((pat.subject, subject), (pat.object, obj)):
        if is_var(term):
            bound = out.get(term, _MISSING)
            if bound is _MISSING:
                if out is binding:
                    out = dict(binding)
                out[term] = value
            elif not _same(bound, value):
                return None
        elif not _same(term, value):
            return None
    return out


def _same(a, b) -> bool:
    if isinstance(a, bool) or isinstance(b, bool):
        return type(a) is type(b) and a == b
    return a == b


_MISSING = object()


def infer(kb, rules) -> list:
    """Run inference over the current KB contents and return all derivations.

    Derived facts are written to ``kb`` with provider ``reasoner``.
    """
    reasoner = Reasoner(kb, rules)
    reasoner.update()
    return reasoner.derivations()


def describe_interval(lo, hi) -> str:
    return f"[{format_time(lo)}, {format_time(hi) or '...'})"
