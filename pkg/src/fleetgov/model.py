"""Closed vocabularies, weight schedules and the agent-definition type.

Every scoring and persistence dimension is a closed enumeration compiled
into the package. Caller-supplied strings never extend these sets: they are
either mapped onto an explicit ``unknown`` member (where one exists) or
rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation
from typing import Any, Mapping

from .errors import (
    DefinitionInvalid,
    DuplicateTool,
    InvalidFieldValue,
    MissingRequiredField,
    UnknownEnumValue,
    UnknownField,
)

# -- closed sets -----------------------------------------------------------

SIGNAL_KINDS = frozenset(
    {"oos_tool", "rbac_refusal", "governance_block", "data_leak", "cross_tenant", "policy_violation"}
)
QUALITY_KINDS = frozenset({"hallucination", "qa_irrelevance", "prompt_injection_attempt"})
PRINCIPAL_KINDS = frozenset({"user", "agent", "service_account"})
EVIDENCE_KINDS = frozenset(
    {
        "prompt",
        "response",
        "tool_call",
        "tool_result",
        "delegation_message",
        "hil_decision",
        "system_message",
    }
)
VERDICTS = frozenset({"allow", "block", "redact", "throttle", "flag_for_review"})

HUMAN_LOOP_MODES = ("in_loop", "on_loop", "hybrid", "none")
# "autonomous" is how runtimes usually report an exercised mode of "none".
MODE_ALIASES = {"autonomous": "none"}
ACCESS_LEVELS = ("read", "write", "admin")
PROVENANCES = ("builtin", "custom", "imported", "marketplace", "third_party")
MODEL_TRUSTS = ("enterprise", "frontier", "open", "self_hosted")
DEPLOYMENT_ENVS = ("dev", "staging", "prod", "enclave")
APPROVAL_STATUSES = ("approved", "pending", "rejected", "expired", "unknown")
SUPPLY_CHAIN_KINDS = ("first_party", "marketplace", "self_hosted_ext")
AUDIT_KINDS = ("red_team", "fairness", "citation")

# Monotone data-sensitivity schedule (MAX-aggregated, cap 60).
DATA_CLASS_WEIGHTS: dict[str, int] = {
    "public": 0,
    "internal": 5,
    "confidential": 10,
    "pii": 15,
    "financial": 20,
    "us_classified": 25,
    "phi": 30,
    "cui": 35,
    "phi_genetic": 40,
    "itar": 50,
    "us_secret": 55,
    "us_top_secret": 60,
}
DATA_CLASSES = frozenset(DATA_CLASS_WEIGHTS)
CLASSIFIED_DATA_CLASSES = frozenset({"us_classified", "cui", "itar", "us_secret", "us_top_secret"})
PERSONAL_DATA_CLASSES = frozenset({"pii", "phi", "phi_genetic"})

# SUM-aggregated, cap 60.
SECURITY_CAP_WEIGHTS: dict[str, int] = {
    "fs_read": 5,
    "network_egress": 10,
    "code_execution": 20,
    "shell_access": 25,
    "container_exec": 30,
}
SECURITY_CAPS = frozenset(SECURITY_CAP_WEIGHTS)
CODE_EXEC_CAPS = frozenset({"code_execution", "shell_access", "container_exec"})

PROVENANCE_WEIGHTS = {"builtin": 0, "custom": 5, "imported": 10, "marketplace": 15, "third_party": 20}
MODEL_TRUST_WEIGHTS = {"enterprise": 0, "frontier": 3, "open": 8, "self_hosted": 10}
DEPLOYMENT_WEIGHTS = {"dev": 0, "staging": 5, "prod": 15, "enclave": 25}
GOVERNANCE_WEIGHTS = {"none": 30, "on_loop": 15, "hybrid": 10, "in_loop": 0}
ACCESS_WEIGHTS = {"read": 0, "write": 6, "admin": 10}
SUPPLY_CHAIN_WEIGHTS = {"first_party": 0, "marketplace": 5, "self_hosted_ext": 10}
INPUT_SOURCE_WEIGHTS = {
    "internal": 0,
    "external_api": 8,
    "unknown": 10,
    "email": 12,
    "web_fetch": 15,
    "user_upload": 15,
}
INPUT_SOURCES = frozenset(INPUT_SOURCE_WEIGHTS)
USER_INPUT_SOURCES = frozenset({"user_upload", "web_fetch", "email"})
APPROVAL_WEIGHTS = {"approved": 0, "pending": 10, "rejected": 30, "expired": 20, "unknown": 15}

# The policy-bearing projection. agent_key is the record identity, not a
# hashed field: the allowlist holds exactly these 18 names.
HASHED_FIELDS: tuple[str, ...] = (
    "name",
    "description",
    "system_prompt",
    "model",
    "tools",
    "denied_tools",
    "human_loop",
    "access_level",
    "can_override",
    "can_revert",
    "can_delegate_to",
    "required_roles",
    "extends",
    "data_classes",
    "security_caps",
    "provenance",
    "model_trust",
    "compliance_scope",
)

OPERATIONAL_FIELDS: tuple[str, ...] = (
    "deployment_env",
    "region",
    "input_sources",
    "supply_chain",
    "dependency_count",
    "approval_status",
    "review_expires_at",
    "created_at",
    "updated_at",
    "version_count_30d",
    "owner",
    "ownership_signed",
    "monthly_cost_avg",
    "hourly_cost_peak",
    "monthly_budget",
    "blast_radius_components",
    "audits",
    "labels",
)


def check_kind(value: str, allowed: frozenset[str], error: type[Exception]) -> str:
    """Membership check used at every module boundary that takes a kind string."""
    if not isinstance(value, str) or value not in allowed:
        raise error(value)
    return value


@dataclass(frozen=True)
class Audit:
    kind: str
    at: datetime

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "at": _iso(self.at)}


@dataclass(frozen=True)
class AgentDefinition:
    agent_key: str
    # policy-bearing
    name: str = ""
    description: str = ""
    system_prompt: str = ""
    model: str = ""
    tools: tuple[str, ...] = ()
    denied_tools: tuple[str, ...] = ()
    human_loop: str = "in_loop"
    access_level: str = "read"
    can_override: bool = False
    can_revert: bool = False
    can_delegate_to: tuple[str, ...] = ()
    required_roles: tuple[str, ...] = ()
    extends: str | None = None
    data_classes: frozenset[str] = frozenset()
    security_caps: frozenset[str] = frozenset()
    provenance: str = "builtin"
    model_trust: str = "enterprise"
    compliance_scope: frozenset[str] = frozenset()
    # operational, excluded from hashing
    deployment_env: str = "dev"
    region: str = ""
    input_sources: frozenset[str] = frozenset()
    supply_chain: frozenset[str] = frozenset()
    dependency_count: int = 0
    approval_status: str = "unknown"
    review_expires_at: datetime | None = None
    created_at: datetime | None = None
    updated_at: datetime | None = None
    version_count_30d: int = 0
    owner: str | None = None
    ownership_signed: bool = False
    monthly_cost_avg: Decimal = Decimal(0)
    hourly_cost_peak: Decimal = Decimal(0)
    monthly_budget: Decimal | None = None
    blast_radius_components: tuple[str, ...] = ()
    audits: tuple[Audit, ...] = ()
    labels: Mapping[str, str] = field(default_factory=dict, hash=False, compare=True)

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready field map; the inverse of :func:`validate_definition`."""
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            out[f.name] = _to_json(getattr(self, f.name))
        return out

    def replace(self, **changes: Any) -> "AgentDefinition":
        return dataclasses.replace(self, **changes)

    @property
    def writes(self) -> bool:
        return self.access_level in ("write", "admin")


def _iso(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat()


def _to_json(value: Any) -> Any:
    if isinstance(value, frozenset):
        return sorted(value)
    if isinstance(value, tuple):
        return [_to_json(v) for v in value]
    if isinstance(value, Audit):
        return value.to_dict()
    if isinstance(value, datetime):
        return _iso(value)
    if isinstance(value, Decimal):
        return str(value)
    if isinstance(value, Mapping):
        return dict(sorted(value.items()))
    return value


def parse_timestamp(value: Any) -> datetime:
    if isinstance(value, datetime):
        ts = value
    elif isinstance(value, str):
        s = value.strip()
        if s.endswith("Z"):
            s = s[:-1] + "+00:00"
        ts = datetime.fromisoformat(s)
    else:
        raise ValueError(f"not a timestamp: {value!r}")
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def normalize_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in HUMAN_LOOP_MODES:
        raise UnknownEnumValue("human_loop", mode)
    return mode


# -- validation ------------------------------------------------------------

_FIELD_NAMES = frozenset(f.name for f in dataclasses.fields(AgentDefinition))


def validate_definition(raw: Mapping[str, Any]) -> AgentDefinition:
    """Validate a parsed field map into an :class:`AgentDefinition`.

    Raises the first violation found; every violation is attached as
    ``exc.violations``. Unknown fields are violations, never dropped.
    """
    from .compliance import normalize_regime  # registry lives with compliance

    violations: list[DefinitionInvalid] = []
    values: dict[str, Any] = {}
    agent_key = raw.get("agent_key")

    if not isinstance(agent_key, str) or not agent_key:
        violations.append(MissingRequiredField("agent_key", agent_key if isinstance(agent_key, str) else None))

    for name in raw:
        if name not in _FIELD_NAMES:
            violations.append(UnknownField(name))

    def take(name: str, conv) -> None:
        if name not in raw or name == "agent_key":
            return
        try:
            values[name] = conv(raw[name], name)
        except DefinitionInvalid as exc:
            violations.extend(exc.violations)
        except (TypeError, ValueError, InvalidOperation) as exc:
            violations.append(InvalidFieldValue(name, str(exc) or type(exc).__name__))

    for name in ("name", "description", "system_prompt", "model", "region"):
        take(name, _string)
    for name in ("tools", "denied_tools", "can_delegate_to", "required_roles", "blast_radius_components"):
        take(name, _string_list)
    take("extends", _optional_string)
    take("owner", _optional_string)
    take("human_loop", lambda v, n: _enum(MODE_ALIASES.get(v, v) if isinstance(v, str) else v, HUMAN_LOOP_MODES, n))
    take("access_level", lambda v, n: _enum(v, ACCESS_LEVELS, n))
    take("provenance", lambda v, n: _enum(v, PROVENANCES, n))
    take("model_trust", lambda v, n: _enum(v, MODEL_TRUSTS, n))
    take("deployment_env", lambda v, n: _enum(v, DEPLOYMENT_ENVS, n))
    take("approval_status", lambda v, n: _enum(v, APPROVAL_STATUSES, n, unknown="unknown"))
    for name in ("can_override", "can_revert", "ownership_signed"):
        take(name, _boolean)
    take("data_classes", lambda v, n: _enum_set(v, DATA_CLASSES, n))
    take("security_caps", lambda v, n: _enum_set(v, SECURITY_CAPS, n))
    take("supply_chain", lambda v, n: _enum_set(v, frozenset(SUPPLY_CHAIN_KINDS), n))
    take("input_sources", lambda v, n: _enum_set(v, INPUT_SOURCES, n, unknown="unknown"))
    take("compliance_scope", lambda v, n: _regime_set(v, n, normalize_regime))
    for name in ("dependency_count", "version_count_30d"):
        take(name, _count)
    for name in ("review_expires_at", "created_at", "updated_at"):
        take(name, lambda v, n: None if v is None else parse_timestamp(v))
    for name in ("monthly_cost_avg", "hourly_cost_peak"):
        take(name, _money)
    take("monthly_budget", lambda v, n: None if v is None else _money(v, n))
    take("audits", _audits)
    take("labels", _labels)

    tools = set(values.get("tools", ()))
    overlap = tools & set(values.get("denied_tools", ()))
    if overlap:
        violations.append(DuplicateTool(overlap))
    for name in ("tools", "can_delegate_to"):
        seq = values.get(name, ())
        if len(set(seq)) != len(seq):
            violations.append(InvalidFieldValue(name, "duplicate entries"))

    if violations:
        first = violations[0]
        first.violations = violations
        raise first
    return AgentDefinition(agent_key=agent_key, **values)


def _string(value: Any, name: str) -> str:
    if not isinstance(value, str):
        raise InvalidFieldValue(name, "expected a string")
    return value


def _optional_string(value: Any, name: str) -> str | None:
    return None if value is None else _string(value, name)


def _string_list(value: Any, name: str) -> tuple[str, ...]:
    if isinstance(value, (str, bytes)) or not isinstance(value, (list, tuple)):
        raise InvalidFieldValue(name, "expected a list of strings")
    return tuple(_string(v, name) for v in value)


def _boolean(value: Any, name: str) -> bool:
    if not isinstance(value, bool):
        raise InvalidFieldValue(name, "expected a boolean")
    return value


def _count(value: Any, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise InvalidFieldValue(name, "expected a nonnegative integer")
    return value


def _money(value: Any, name: str) -> Decimal:
    if isinstance(value, bool):
        raise InvalidFieldValue(name, "expected a decimal")
    amount = Decimal(str(value))
    if not amount.is_finite() or amount < 0:
        raise InvalidFieldValue(name, "expected a nonnegative decimal")
    return amount


def _enum(value: Any, allowed, name: str, unknown: str | None = None) -> str:
    if isinstance(value, str) and value in allowed:
        return value
    if unknown is not None and isinstance(value, str):
        return unknown
    raise UnknownEnumValue(name, value)


def _enum_set(value: Any, allowed, name: str, unknown: str | None = None) -> frozenset[str]:
    items = _string_list(list(value) if isinstance(value, (set, frozenset)) else value, name)
    return frozenset(_enum(v, allowed, name, unknown) for v in items)


def _regime_set(value: Any, name: str, normalize) -> frozenset[str]:
    items = _string_list(list(value) if isinstance(value, (set, frozenset)) else value, name)
    out = set()
    for item in items:
        try:
            out.add(normalize(item))
        except Exception:
            raise UnknownEnumValue(name, item) from None
    return frozenset(out)


def _audits(value: Any, name: str) -> tuple[Audit, ...]:
    if not isinstance(value, (list, tuple)):
        raise InvalidFieldValue(name, "expected a list of audit records")
    out = []
    for item in value:
        if isinstance(item, Audit):
            out.append(item)
            continue
        if not isinstance(item, Mapping) or set(item) != {"kind", "at"}:
            raise InvalidFieldValue(name, "audit records need exactly 'kind' and 'at'")
        out.append(Audit(_enum(item["kind"], AUDIT_KINDS, name), parse_timestamp(item["at"])))
    return tuple(out)


def _labels(value: Any, name: str) -> dict[str, str]:
    if not isinstance(value, Mapping) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in value.items()
    ):
        raise InvalidFieldValue(name, "expected a string-to-string map")
    return dict(value)
