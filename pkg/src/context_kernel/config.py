"""Runtime configuration.

A config file is JSON; relative paths inside it resolve against the file's
directory.  Without an explicit path, ``CONTEXT_KERNEL_CONFIG`` is tried,
then the bundled default.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .acquisition import MappingRuleSet
from .errors import ConfigError
from .facts import DEFAULT_CONFIDENCE, SourceTag
from .ontology import build_ontology
from .reasoner import check_rules, load_rules

ENV_VAR = "CONTEXT_KERNEL_CONFIG"
DATA_DIR = Path(__file__).parent / "data"
DEFAULT_CONFIG = DATA_DIR / "config.json"
MEETING_SCENARIO = DATA_DIR / "meeting.scenario"

_ORDERED = (SourceTag.DEFINED, SourceTag.SENSED, SourceTag.PLANNED, SourceTag.AGGREGATED)
_KEYS = {"ontology", "rules", "mapping", "strict", "confidence", "listen", "journal"}


@dataclass
class Config:
    ontology: list = field(default_factory=list)
    rules: Optional[Path] = None
    mapping: Optional[Path] = None
    strict: bool = True
    confidence: dict = field(default_factory=lambda: dict(DEFAULT_CONFIDENCE))
    listen: str = "127.0.0.1:7411"
    journal: Optional[Path] = None

    def validate(self) -> None:
        for path in [*self.ontology, self.rules, self.mapping]:
            if path is None:
                raise ConfigError("config needs ontology, rules and mapping paths")
            if not Path(path).is_file() or not os.access(path, os.R_OK):
                raise ConfigError(f"cannot read {path}")
        values = []
        for tag in _ORDERED:
            if tag not in self.confidence:
                raise ConfigError(f"confidence table lacks {tag.value}")
            value = self.confidence[tag]
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"confidence for {tag.value} outside [0, 1]")
            values.append(value)
        if any(a <= b for a, b in zip(values, values[1:])):
            raise ConfigError("confidences must strictly decrease Defined > Sensed > "
                              "Planned > Aggregated")
        host, _, port = self.listen.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"bad listen address {self.listen!r}")

    def load_stack(self):
        """Return ``(ontology, rules, mapping)`` built from the configured files."""
        ontology = build_ontology(self.ontology, strict=self.strict)
        rules = load_rules(self.rules)
        check_rules(rules, ontology)
        mapping = MappingRuleSet.load(self.mapping)
        mapping.check(ontology)
        return ontology, rules, mapping


def config_from_dict(data: dict, base: Path = DATA_DIR) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - _KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")

    def resolve(p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else base / p

    docs = data.get("ontology", [])
    if isinstance(docs, str):
        docs = [docs]
    try:
        confidence = {SourceTag.parse(k): float(v)
                      for k, v in data.get("confidence", {}).items()}
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    table = dict(DEFAULT_CONFIDENCE)
    table.update(confidence)
    return Config(
        ontology=[resolve(d) for d in docs],
        rules=resolve(data.get("rules")),
        mapping=resolve(data.get("mapping")),
        strict=bool(data.get("strict", True)),
        confidence=table,
        listen=data.get("listen", "127.0.0.1:7411"),
        journal=resolve(data.get("journal")),
    )


def load_config(path=None) -> Config:
    if path is None:
        path = os.environ.get(ENV_VAR) or DEFAULT_CONFIG
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = config_from_dict(data, base=path.parent)
    cfg.validate()
    return cfg
