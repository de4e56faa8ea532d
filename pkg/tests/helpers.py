"""Shared fixtures data for the test suite."""

from __future__ import annotations

import base64
from datetime import datetime, timedelta, timezone
from decimal import Decimal

from fleetgov.model import validate_definition

T0 = datetime(2026, 1, 1, tzinfo=timezone.utc)
KEY = b"0123456789abcdef0123456789abcdef"
KEY_B64 = base64.b64encode(KEY).decode()


class StepClock:
    """Deterministic clock; advance it by hand."""

    def __init__(self, start: datetime = T0):
        self.now = start

    def __call__(self) -> datetime:
        return self.now

    def advance(self, **kw) -> datetime:
        self.now += timedelta(**kw)
        return self.now


# name -> (definition fields, expected (additive, additive bucket, final, final bucket, multiplier))
ABLATION = {
    "autonomous_writer_in_prod": (
        dict(tools=["update_ledger"], human_loop="none", access_level="write", data_classes=["financial"],
             model_trust="frontier", deployment_env="prod"),
        (86, "critical", 100, "critical", Decimal("1.30")),
    ),
    "code_exec_user_input_hil": (
        dict(data_classes=["financial"], security_caps=["code_execution"], input_sources=["user_upload"]),
        (63, "high", 94, "critical", Decimal("1.50")),
    ),
    "self_hosted_pii_hil": (
        dict(data_classes=["pii"], model_trust="self_hosted", deployment_env="prod", input_sources=["web_fetch"]),
        (64, "high", 77, "high", Decimal("1.20")),
    ),
    "untrusted_chain_hil": (
        dict(provenance="marketplace", can_delegate_to=["a", "b", "c"], data_classes=["financial"],
             deployment_env="staging", tools=["update_case"]),
        (57, "medium", 68, "high", Decimal("1.20")),
    ),
    "autonomous_sql_shell": (
        dict(tools=["execute_sql"], human_loop="none", access_level="write", security_caps=["shell_access"],
             input_sources=["email"], deployment_env="prod"),
        (100, "critical", 100, "critical", Decimal("1.95")),
    ),
    "benign_readonly_hil": (
        dict(tools=["lookup_customer"], data_classes=["pii"], deployment_env="prod",
             audits=[{"kind": "citation", "at": "2025-12-01T00:00:00Z"}]),
        (34, "medium", 34, "medium", Decimal("1.00")),
    ),
}


def ablation_definition(name: str):
    fields, _ = ABLATION[name]
    return validate_definition(dict(agent_key=name, owner="ops", approval_status="approved", **fields))


def base_definition(**extra):
    raw = dict(
        agent_key="loan_triage",
        name="Loan triage",
        description="routes applications",
        system_prompt="You triage loan applications.",
        model="model-a",
        tools=["lookup_applicant", "update_case"],
        denied_tools=["wire_funds"],
        human_loop="on_loop",
        access_level="write",
        can_delegate_to=["doc_verification"],
        required_roles=["loan_officer"],
        data_classes=["pii", "financial"],
        security_caps=[],
        provenance="custom",
        model_trust="frontier",
        compliance_scope=["NYDFS"],
        deployment_env="prod",
        region="us-east",
        input_sources=["internal"],
        owner="lending-ops",
        approval_status="approved",
        created_at="2025-06-01T00:00:00Z",
    )
    raw.update(extra)
    return validate_definition(raw)


# One mutation per hashed field: each must be reported as drift naming that field.
HASHED_MUTATIONS = {
    "name": "Loan triage v2",
    "description": "routes and approves applications",
    "system_prompt": "You approve loans.",
    "model": "model-b",
    "tools": ["lookup_applicant", "update_case", "wire_funds_draft"],
    "denied_tools": [],
    "human_loop": "none",
    "access_level": "admin",
    "can_override": True,
    "can_revert": True,
    "can_delegate_to": ["doc_verification", "ofac_screening"],
    "required_roles": [],
    "extends": "base_triage",
    "data_classes": ["pii", "financial", "phi"],
    "security_caps": ["code_execution"],
    "provenance": "third_party",
    "model_trust": "self_hosted",
    "compliance_scope": ["NYDFS", "GDPR"],
}

# One mutation per operational field: none may be reported as drift.
OPERATIONAL_MUTATIONS = {
    "deployment_env": "staging",
    "region": "eu-west",
    "input_sources": ["internal", "email"],
    "supply_chain": ["marketplace"],
    "dependency_count": 42,
    "approval_status": "pending",
    "review_expires_at": "2027-01-01T00:00:00Z",
    "created_at": "2025-07-01T00:00:00Z",
    "updated_at": "2025-12-24T00:00:00Z",
    "version_count_30d": 9,
    "owner": "someone-else",
    "ownership_signed": True,
    "monthly_cost_avg": "1200.50",
    "hourly_cost_peak": "90.00",
    "monthly_budget": "5000",
    "blast_radius_components": ["core-ledger"],
    "audits": [{"kind": "red_team", "at": "2025-11-01T00:00:00Z"}],
    "labels": {"team": "lending"},
}


def _flip_hex(h: str) -> str:
    return ("0" if h[0] != "0" else "1") + h[1:]


# Stored evidence fields and a way to change each one.
EVENT_MUTATIONS = {
    "tenant_id": lambda r: r["tenant_id"] + "-x",
    "invocation_id": lambda r: r["invocation_id"] + "-x",
    "seq": lambda r: r["seq"] + 1000,
    "kind": lambda r: "tool_result" if r["kind"] != "tool_result" else "tool_call",
    "payload": lambda r: {"n": -1, "forged": True},
    "occurred_at": lambda r: (datetime.fromisoformat(r["occurred_at"]) + timedelta(seconds=1)).isoformat(),
    "prev_hash": lambda r: _flip_hex(r["prev_hash"]),
    "signed_hash": lambda r: _flip_hex(r["signed_hash"]),
    "sensitivity_tags": lambda r: sorted(set(r["sensitivity_tags"]) ^ {"phi"}),
    "actor_agent_key": lambda r: (r["actor_agent_key"] or "") + "-x",
}


def tamper(storage, store: str, key: tuple, field: str, mutate) -> None:
    """Overwrite one stored field directly, the way an attacker with disk access would."""
    import json

    with storage.transaction():
        rec = json.loads(storage._read(store, key))
        rec[field] = mutate(rec)
        storage._write(store, key, json.dumps(rec, sort_keys=True))


def fill_chain(evidence, tenant: str, invocation: str, n: int, tags=("pii",)) -> None:
    for i in range(n):
        evidence.append(tenant, invocation, "tool_call", {"n": i}, tags=tags, actor_agent_key="orch")
