import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from context_kernel.errors import EmptyConflict, RuleValidation
from context_kernel.facts import Fact, SourceTag, intersect
from context_kernel.kb import FLAG_SHADOWED, KnowledgeBase
from context_kernel.reasoner import (
    Conflict,
    Reasoner,
    Rule,
    current_activity,
    detect_conflicts,
    infer,
    resolve_conflict,
    rules_from_dict,
)

from helpers import base_facts, derived_snapshot, engine, fact, plain
from oracles import base_nodes, hours, instance, overlap, saturate

R1 = {"id": "R1", "factor": 0.95,
      "if": [{"pred": "Timetable", "subj": "?u", "obj": "Office"},
             {"pred": "Calendar", "subj": "?u", "obj": "Personal"}],
      "then": {"pred": "Teaching", "subj": "?u", "obj": "Class"}}
R1B = {"id": "R1b", "factor": 0.9,
       "if": [{"pred": "Timetable", "subj": "?u", "obj": "Office"},
              {"pred": "Calendar", "subj": "?u", "obj": "Work"}],
       "then": {"pred": "Teaching", "subj": "?u", "obj": "Class"}}
R2 = {"id": "R2", "factor": 0.8,
      "if": [{"pred": "Search", "subj": "?u", "obj": "Flight"},
             {"pred": "WeatherCond", "subj": "Weather", "obj": "Snowing"}],
      "then": {"pred": "TripFeasible", "subj": "?u", "obj": "No"}}


def kb_with(*facts, ontology=None):
    kb = KnowledgeBase(ontology, strict=False)
    ids = [kb.add_fact(f) for f in facts]
    return kb, ids


# -- rules ------------------------------------------------------------------

def test_bundled_rules_load(rules):
    assert [r.rule_id for r in rules] == ["R1", "A1", "R2", "R3", "M1", "M2"]
    assert {r.kind for r in rules} == {"inference", "conflict_resolution"}


def test_unbound_consequent_variable_rejected():
    bad = {**R1, "then": {"pred": "Teaching", "subj": "?v", "obj": "Class"}}
    with pytest.raises(RuleValidation):
        rules_from_dict([bad])


@pytest.mark.parametrize("factor", [0.0, -0.1, 1.01])
def test_factor_outside_unit_interval_rejected(factor):
    with pytest.raises(RuleValidation):
        rules_from_dict([{**R1, "factor": factor}])


def test_duplicate_rule_ids_rejected():
    with pytest.raises(RuleValidation):
        rules_from_dict([R1, R1])


def test_rule_round_trips_through_dict():
    rule = rules_from_dict([R1])[0]
    assert Rule.from_dict(rule.to_dict()) == rule


# -- inference examples -----------------------------------------------------

def test_teaching_inferred_from_timetable_and_calendar():
    kb, _ = kb_with(fact("John", "Timetable", "Office", 9, 10),
                    fact("John", "Calendar", "Personal", 9, 10))
    (d,) = infer(kb, rules_from_dict([R1]))
    assert str(d.derived_fact) == "Teaching(John, Class)"
    assert d.assigned_source is SourceTag.DEDUCED
    assert d.confidence == pytest.approx(0.95 * 0.9, abs=1e-12)
    assert d.derived_fact.provider == "reasoner"
    assert d.premise_ids == (1, 2)


def test_trip_infeasible_from_search_and_snow():
    kb, _ = kb_with(fact("John", "Search", "Flight", 13),
                    fact("Weather", "WeatherCond", "Snowing", 13.5))
    (d,) = infer(kb, rules_from_dict([R2]))
    assert str(d.derived_fact) == "TripFeasible(John, No)"
    assert d.derived_fact.valid_from == hours(13.5)
    assert d.confidence == pytest.approx(0.72)


def test_empty_rules_or_empty_kb_derive_nothing():
    kb, _ = kb_with(fact("John", "Timetable", "Office", 9, 10))
    assert infer(kb, []) == []
    assert infer(KnowledgeBase(), rules_from_dict([R1])) == []


def test_disjoint_validity_blocks_derivation():
    kb, _ = kb_with(fact("John", "Timetable", "Office", 9, 10),
                    fact("John", "Calendar", "Personal", 10, 11))
    assert infer(kb, rules_from_dict([R1])) == []


def test_derived_interval_is_intersection():
    kb, _ = kb_with(fact("John", "Timetable", "Office", 9, 12),
                    fact("John", "Calendar", "Personal", 10))
    (d,) = infer(kb, rules_from_dict([R1]))
    assert (d.derived_fact.valid_from, d.derived_fact.valid_to) == (hours(10), hours(12))


def test_defined_premises_give_scheduled():
    kb, _ = kb_with(fact("John", "Timetable", "Office", 9, 10, "Defined"),
                    fact("John", "Calendar", "Personal", 9, 10, "Defined"))
    (d,) = infer(kb, rules_from_dict([R1]))
    assert d.assigned_source is SourceTag.SCHEDULED
    assert d.confidence == pytest.approx(0.95)


def test_chained_rule_through_bundled_bridge(rules):
    kb, _ = kb_with(fact("John", "Timetable", "Office", 9, 10),
                    fact("John", "Calendar", "Personal", 9, 10))
    infer(kb, rules)
    activity = [f for f in kb.facts() if f.predicate == "Activity"]
    assert [(f.object, f.source, f.confidence) for f in activity] == [
        ("Teaching", SourceTag.DEDUCED, pytest.approx(0.855, abs=1e-9))]


def test_reasoner_validates_derived_facts_leniently(ontology):
    rule = rules_from_dict([{"id": "X", "if": [{"pred": "Timetable", "subj": "?u",
                                                "obj": "?r"}],
                             "then": {"pred": "Calendar", "subj": "?r", "obj": "?u"}}])
    kb = KnowledgeBase(ontology)
    kb.add_fact(fact("John", "Timetable", "Office", 9, 10))
    Reasoner(kb, rule).update()
    derived = [f for f in kb.facts() if f.provider == "reasoner"]
    assert len(derived) == 1 and "unvalidated" in kb.flags(derived[0].fact_id)


# -- truth maintenance ------------------------------------------------------

def test_retracting_premise_retracts_derivation(rules):
    kb, (tt, cal) = kb_with(fact("John", "Timetable", "Office", 9, 10),
                            fact("John", "Calendar", "Personal", 9, 10))
    reasoner = Reasoner(kb, rules)
    reasoner.update()
    derived = {f.fact_id for f in reasoner.derived_facts()}
    assert len(derived) == 2  # Teaching and the Activity bridge
    assert set(reasoner.retract_derivations(cal)) == derived
    assert reasoner.derived_facts() == []
    assert [f.fact_id for f in kb.facts()] == [tt]


def test_retracting_unsupporting_fact_retracts_nothing(rules):
    kb, ids = kb_with(fact("John", "Timetable", "Office", 9, 10),
                      fact("John", "Calendar", "Personal", 9, 10),
                      fact("Kim", "HasRole", "Faculty"))
    reasoner = Reasoner(kb, rules)
    reasoner.update()
    assert reasoner.retract_derivations(ids[2]) == []


def test_alternative_derivation_survives():
    kb, (tt, personal, work) = kb_with(fact("John", "Timetable", "Office", 9, 10),
                                       fact("John", "Calendar", "Personal", 9, 10),
                                       fact("John", "Calendar", "Work", 9, 10))
    reasoner = Reasoner(kb, rules_from_dict([R1, R1B]))
    reasoner.update()
    (teaching,) = reasoner.derived_facts()
    assert teaching.confidence == pytest.approx(0.855)
    assert reasoner.retract_derivations(personal) == []
    (survivor,) = reasoner.derived_facts()
    assert survivor.fact_id == teaching.fact_id
    assert survivor.confidence == pytest.approx(0.9 * 0.9)  # only R1b support left
    assert reasoner.retract_derivations(tt) == [teaching.fact_id]


def test_external_delete_of_derived_fact_is_rederived_only_with_new_support():
    kb, _ = kb_with(fact("John", "Timetable", "Office", 9, 10),
                    fact("John", "Calendar", "Personal", 9, 10))
    reasoner = Reasoner(kb, rules_from_dict([R1]))
    reasoner.update()
    (teaching,) = reasoner.derived_facts()
    kb.delete_fact(teaching.fact_id)
    reasoner.update()
    assert reasoner.derived_facts() == []
    kb.add_fact(fact("John", "Calendar", "Personal", 9, 10))
    reasoner.update()
    assert len(reasoner.derived_facts()) == 1


def test_modifying_premise_confidence_revises_derivation():
    kb, (tt, _) = kb_with(fact("John", "Timetable", "Office", 9, 10),
                          fact("John", "Calendar", "Personal", 9, 10))
    reasoner = Reasoner(kb, rules_from_dict([R1]))
    reasoner.update()
    kb.modify_fact(tt, fact("John", "Timetable", "Office", 9, 10, conf=0.5))
    reasoner.update()
    (teaching,) = reasoner.derived_facts()
    assert teaching.confidence == pytest.approx(0.95 * 0.5)


# -- conflicts --------------------------------------------------------------

def three_activities(confs=(0.9, 0.9, 0.9)):
    return [fact("John", "Activity", obj, 11, 12, conf=c)
            for obj, c in zip(("Meeting", "DiscussingOnProject", "Presenting"), confs)]


def test_three_activities_form_one_conflict(ontology):
    kb, ids = kb_with(*three_activities(), ontology=ontology)
    (c,) = detect_conflicts(kb)
    assert c.ids == tuple(ids)
    assert all("conflict" in kb.flags(i) for i in ids)


def test_single_activity_is_no_conflict(ontology):
    kb, _ = kb_with(fact("John", "Activity", "Meeting", 11, 12), ontology=ontology)
    assert detect_conflicts(kb) == []


def test_merge_rule_resolves_to_meeting_for_project(ontology, rules):
    kb, ids = kb_with(*three_activities(), ontology=ontology)
    r = resolve_conflict(detect_conflicts(kb)[0], rules)
    assert (r.policy, r.winner, r.rule_id) == ("merge", "MeetingForProject", "M1")
    assert r.confidence == pytest.approx(0.95 * 0.9)
    assert r.source is SourceTag.DEDUCED
    assert set(r.shadowed) == set(ids)


def test_merge_needs_exact_object_set(ontology, rules):
    kb, _ = kb_with(*three_activities()[:2], ontology=ontology)
    r = resolve_conflict(detect_conflicts(kb)[0], rules)
    assert r.policy == "precedence"


def test_scheduled_beats_deduced():
    scheduled = fact("John", "Activity", "Teaching", 9, 10, "Scheduled", 0.95)
    deduced = fact("John", "Activity", "PlanningForTrip", 9, 10, "Deduced", 0.72)
    kb, (s_id, _) = kb_with(scheduled, deduced)
    r = resolve_conflict(Conflict("John", "Activity", tuple(kb.facts())))
    assert (r.winner, r.winner_fact_id, r.source) == ("Teaching", s_id, SourceTag.SCHEDULED)


def test_tie_breaks_source_then_recency_then_id():
    a = fact("John", "Activity", "A", 9, 12, "Sensed", 0.8)
    b = fact("John", "Activity", "B", 9, 12, "Planned", 0.8)
    kb, _ = kb_with(a, b)
    assert resolve_conflict(Conflict("John", "Activity", tuple(kb.facts()))).winner == "A"
    c = fact("John", "Activity", "C", 10, 12, "Sensed", 0.8)
    kb, _ = kb_with(a, c)
    assert resolve_conflict(Conflict("John", "Activity", tuple(kb.facts()))).winner == "C"
    d = fact("John", "Activity", "D", 9, 12, "Sensed", 0.8)
    kb, (a_id, _) = kb_with(a, d)
    r = resolve_conflict(Conflict("John", "Activity", tuple(kb.facts())))
    assert (r.winner, r.winner_fact_id) == ("A", a_id)


def test_single_contender_is_empty_conflict():
    kb, _ = kb_with(fact("John", "Activity", "Meeting", 11, 12))
    with pytest.raises(EmptyConflict):
        resolve_conflict(Conflict("John", "Activity", tuple(kb.facts())))


def test_losers_flagged_shadowed(ontology):
    kb = KnowledgeBase(ontology)
    kb.add_fact(fact("John", "Activity", "Meeting", 11, 12))
    defined = kb.add_fact(fact("John", "Activity", "OutForConference", 11, 12, "Defined"))
    Reasoner(kb, []).update()
    assert FLAG_SHADOWED in kb.flags(1)
    assert FLAG_SHADOWED not in kb.flags(defined)


def test_current_activity_none_without_facts(ontology):
    assert current_activity(KnowledgeBase(ontology), "Kim", hours(9)) is None


def test_user_defined_outranks_sensed(ontology):
    kb, _ = kb_with(fact("John", "Activity", "Meeting", 11, 12),
                    fact("John", "Activity", "OutForConference", 11, None, "Defined"),
                    ontology=ontology)
    cur = current_activity(kb, "John", hours(11.5))
    assert (cur.activity, cur.source) == ("OutForConference", SourceTag.DEFINED)


activity_fact = st.builds(
    lambda obj, start, length, open_: fact("U", "Activity", obj, start,
                                           None if open_ else start + length),
    st.sampled_from(["A", "B", "C"]), st.integers(0, 10), st.integers(1, 5),
    st.booleans())


@settings(max_examples=150, deadline=None)
@given(st.lists(activity_fact, max_size=10))
def test_conflicts_agree_with_pairwise_scan(facts):
    kb, _ = kb_with(*facts)
    conflicts = detect_conflicts(kb, functional={"Activity"})
    stored = kb.facts()
    clashing = {(f.fact_id, g.fact_id) for f in stored for g in stored
                if f.object != g.object
                and overlap(f.valid_from, f.valid_to, g.valid_from, g.valid_to)}
    covered = set()
    for c in conflicts:
        assert len(c.objects) >= 2
        for f in c.contenders:
            for g in c.contenders:
                assert overlap(f.valid_from, f.valid_to, g.valid_from, g.valid_to)
                covered.add((f.fact_id, g.fact_id))
        assert not any(set(c.ids) < set(o.ids) for o in conflicts)
    assert clashing <= covered


@settings(max_examples=100, deadline=None)
@given(st.lists(activity_fact, min_size=2, max_size=6), st.randoms())
def test_resolution_is_pure_function_of_contender_set(facts, rnd):
    kb, _ = kb_with(*facts)
    contenders = kb.facts()
    if len({f.object for f in contenders}) < 2:
        return
    first = resolve_conflict(Conflict("U", "Activity", tuple(contenders)))
    shuffled = list(contenders)
    rnd.shuffle(shuffled)
    again = resolve_conflict(Conflict("U", "Activity", tuple(shuffled)))
    assert (again.winner, again.winner_fact_id, again.shadowed) == \
        (first.winner, first.winner_fact_id, first.shadowed)


# -- invariants over random instances ---------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_fixpoint_matches_naive_saturation(seed):
    tuples, rule_dicts = instance(seed, max_facts=15, max_rules=4)
    kb, rules, _ = engine(tuples, rule_dicts)
    expected = saturate(base_nodes(base_facts(kb)), plain(rules))
    got = derived_snapshot(kb)
    assert set(got) == set(expected)
    for key, (conf, sched) in expected.items():
        assert got[key][0] == pytest.approx(conf, abs=1e-12)
        assert got[key][1] == sched


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_derivations_are_sound_and_confidence_monotone(seed):
    tuples, rule_dicts = instance(seed, max_facts=15, max_rules=4)
    kb, rules, reasoner = engine(tuples, rule_dicts)
    by_id = {r.rule_id: r for r in rules}
    best: dict = {}
    for d in reasoner.derivations():
        rule = by_id[d.rule_id]
        premises = [kb.get(i) for i in d.premise_ids]
        assert all(p is not None for p in premises)
        binding: dict = {}
        lo, hi = premises[0].valid_from, premises[0].valid_to
        for pat, p in zip(rule.antecedents, premises):
            binding = pat.match(p, binding)
            assert binding is not None
            span = intersect(lo, hi, p.valid_from, p.valid_to)
            assert span is not None
            lo, hi = span
        assert (d.derived_fact.valid_from, d.derived_fact.valid_to) == (lo, hi)
        assert d.confidence <= min(p.confidence for p in premises) + 1e-12
        fid = d.derived_fact.fact_id
        best[fid] = max(best.get(fid, 0.0), d.confidence)
    for fid, conf in best.items():
        assert kb.get(fid).confidence == pytest.approx(conf, abs=1e-12)


def test_termination_guard_never_fires_on_random_instances():
    for seed in range(1000, 2000):
        tuples, rule_dicts = instance(seed, max_facts=8, max_rules=3)
        engine(tuples, rule_dicts)  # raises NonTermination if the guard trips


def test_incremental_updates_equal_batch_inference():
    rng = random.Random(7)
    for seed in range(30):
        tuples, rule_dicts = instance(seed, max_facts=12, max_rules=4)
        kb = KnowledgeBase()
        reasoner = Reasoner(kb, rules_from_dict(rule_dicts))
        for s, p, o, vf, vt, source, conf in tuples:
            kb.add_fact(Fact(s, p, o, vf, vt, source, conf, "test"))
            if rng.random() < 0.5:
                reasoner.update()
        reasoner.update()
        batch, _, _ = engine(tuples, rule_dicts)
        assert derived_snapshot(kb) == derived_snapshot(batch)
