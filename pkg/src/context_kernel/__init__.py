"""Context-aware middleware kernel driven by software sensors."""

from .acquisition import Acquisition, MappingRuleSet, ProviderDescriptor, ProviderEvent
from .config import Config, load_config
from .errors import ContextKernelError
from .facts import Fact, Pattern, SourceTag, parse_pattern
from .kb import KnowledgeBase
from .kernel import ContextKernel
from .ontology import DomainOntologyDoc, Ontology, build_ontology, load_upper
from .reasoner import Reasoner, Rule, current_activity, detect_conflicts, infer, resolve_conflict
from .simulator import ScenarioScript, ScenarioTrace, make_provider, run_scenario

__all__ = [
    "Acquisition", "Config", "ContextKernel", "ContextKernelError", "DomainOntologyDoc",
    "Fact", "KnowledgeBase", "MappingRuleSet", "Ontology", "Pattern", "ProviderDescriptor",
    "ProviderEvent", "Reasoner", "Rule", "ScenarioScript", "ScenarioTrace", "SourceTag",
    "build_ontology", "current_activity", "detect_conflicts", "infer", "load_config",
    "load_upper", "make_provider", "parse_pattern", "resolve_conflict", "run_scenario",
]
