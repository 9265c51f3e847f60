"""Exception hierarchy shared by every layer of the kernel.

Each error carries a stable ``code`` string; the wire protocol and the
scenario trace report that code instead of the Python class name.
"""

from __future__ import annotations


class ContextKernelError(Exception):
    code = "error"


# ontology

class OntologyError(ContextKernelError):
    code = "ontology"


class DuplicateLayer(OntologyError):
    code = "DuplicateLayer"


class UnknownAttachmentClass(OntologyError):
    code = "UnknownAttachmentClass"


class CycleIntroduced(OntologyError):
    code = "CycleIntroduced"


class DuplicateName(OntologyError):
    code = "DuplicateName"


class UpperLayerImmutable(OntologyError):
    code = "UpperLayerImmutable"


class UnknownLayer(OntologyError):
    code = "UnknownLayer"


class DanglingDependents(OntologyError):
    code = "DanglingDependents"

    def __init__(self, layer_ids):
        self.layer_ids = sorted(layer_ids)
        super().__init__(f"layers still depend on it: {self.layer_ids}")


class UnknownClass(OntologyError):
    code = "UnknownClass"


class InvalidDocument(OntologyError):
    code = "InvalidDocument"


# knowledge base

class ValidationFailed(ContextKernelError):
    code = "ValidationFailed"

    def __init__(self, result):
        self.result = result
        super().__init__(f"{result.error}: {result.detail}")


class ClockSkew(ContextKernelError):
    code = "ClockSkew"


class UnknownFact(ContextKernelError):
    code = "UnknownFact"


class MalformedPattern(ContextKernelError):
    code = "MalformedPattern"


# acquisition

class DuplicateProvider(ContextKernelError):
    code = "DuplicateProvider"


class InvalidInterval(ContextKernelError):
    code = "InvalidInterval"


class UnknownProvider(ContextKernelError):
    code = "UnknownProvider"


class StaleEvent(ContextKernelError):
    code = "StaleEvent"


class UnmappedPayload(ContextKernelError):
    code = "UnmappedPayload"


class MappingError(ContextKernelError):
    code = "MappingError"


# reasoner

class RuleValidation(ContextKernelError):
    code = "RuleValidation"


class NonTermination(ContextKernelError):
    code = "NonTermination"


class EmptyConflict(ContextKernelError):
    code = "EmptyConflict"


# simulator / cli

class ScriptParse(ContextKernelError):
    code = "ScriptParse"


class UnknownProviderInScript(ContextKernelError):
    code = "UnknownProviderInScript"


class UnknownKind(ContextKernelError):
    code = "UnknownKind"


class ConfigError(ContextKernelError):
    code = "ConfigError"
