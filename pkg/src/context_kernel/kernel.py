"""One-process stack: knowledge base, acquisition and reasoner wired together.

Every mutating call runs the reasoner once afterwards, so each call is one
mutation batch from the reasoner's point of view.
"""

from __future__ import annotations

from .acquisition import Acquisition
from .facts import DEFAULT_CONFIDENCE
from .kb import KnowledgeBase
from .reasoner import Reasoner


class ContextKernel:
    def __init__(self, ontology, rules, mapping, strict=True, confidence=None, journal=None):
        self.ontology = ontology
        self.rules = list(rules)
        self.kb = KnowledgeBase(ontology, strict=strict, journal=journal)
        self.acquisition = Acquisition(self.kb, mapping,
                                       dict(confidence or DEFAULT_CONFIDENCE))
        self.reasoner = Reasoner(self.kb, self.rules)

    @classmethod
    def from_config(cls, cfg, journal=None):
        ontology, rules, mapping = cfg.load_stack()
        return cls(ontology, rules, mapping, strict=cfg.strict, confidence=cfg.confidence,
                   journal=journal if journal is not None else cfg.journal)

    def register_provider(self, descriptor, start=None):
        self.acquisition.register_provider(descriptor, start=start)

    def ingest(self, event):
        """Ingest one provider event; returns ``(fact_ids, reasoner report)``."""
        ids = self.acquisition.ingest(event)
        return ids, self.reasoner.update()

    def user_update(self, subject, predicate, obj, at):
        fid = self.acquisition.user_update(subject, predicate, obj, at)
        return fid, self.reasoner.update()

    def add_fact(self, fact):
        fid = self.kb.add_fact(fact)
        return fid, self.reasoner.update()

    def delete_fact(self, fact_id):
        removed = self.kb.delete_fact(fact_id)
        return removed, self.reasoner.update()

    def query(self, pattern):
        return self.kb.query(pattern)

    def subscribe(self, pattern, consumer):
        return self.kb.subscribe(pattern, consumer)

    def unsubscribe(self, sub_id):
        return self.kb.unsubscribe(sub_id)

    def current_activity(self, subject, at):
        return self.reasoner.current_activity(subject, at)

    def close(self):
        self.kb.close()
