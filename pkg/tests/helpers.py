"""Builders shared by the test modules (these do use the package)."""

from context_kernel.facts import REASONER, Fact, SourceTag
from context_kernel.kb import KnowledgeBase
from context_kernel.reasoner import Reasoner, rules_from_dict

from oracles import hours, plain_rule


def fact(s, p, o, start=0, end=None, source="Sensed", conf=None, provider="test"):
    tag = SourceTag.parse(source)
    if conf is None:
        conf = {"Defined": 1.0, "Sensed": 0.9, "Planned": 0.8, "Aggregated": 0.7}[tag.value]
    if tag.derived:
        provider = REASONER
    return Fact(s, p, o, hours(start), None if end is None else hours(end), tag, conf, provider)


def kb_from_tuples(tuples, ontology=None):
    kb = KnowledgeBase(ontology, strict=False)
    for s, p, o, vf, vt, source, conf in tuples:
        kb.add_fact(Fact(s, p, o, vf, vt, source, conf, "test"))
    return kb


def engine(tuples, rule_dicts):
    kb = kb_from_tuples(tuples)
    rules = rules_from_dict(rule_dicts)
    reasoner = Reasoner(kb, rules)
    reasoner.update()
    return kb, rules, reasoner


def derived_snapshot(kb):
    """{key: (confidence, is Scheduled)} for every reasoner-written fact."""
    return {f.key: (f.confidence, f.source is SourceTag.SCHEDULED)
            for f in kb.facts() if f.provider == REASONER}


def base_facts(kb):
    return [f for f in kb.facts() if f.provider != REASONER]


def plain(rules):
    return [plain_rule(r) for r in rules if r.kind == "inference"]
