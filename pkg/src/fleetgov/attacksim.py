"""Deterministic replay of a multi-hop attack on a delegating orchestrator.

A compromised sub-agent emits one rogue signal per invocation. With actor
attribution on, each signal also debits the orchestrator that triggered
it, so the orchestrator's trust falls even though its own definition is
clean. Everything runs against a private in-memory store with a stepping
clock, so two runs of the same scenario produce identical output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Any, Mapping, Sequence

from .evidence import EvidenceLog
from .model import SIGNAL_KINDS, AgentDefinition, check_kind, validate_definition
from .errors import UnknownSignalKind
from .scoring import DelegateObservation, ScoringContext, score_agent
from .storage import MemoryStorage
from .trust import START_TRUST, TrustService
from .weights import SIGNAL_DEFAULTS, TenantWeights, WeightKey

SIM_TENANT = "sim-bank"
SIM_EPOCH = datetime(2026, 1, 1, tzinfo=timezone.utc)
SIM_STEP = timedelta(minutes=1)
SIM_KEY = b"attack-simulation-fixed-key-0001"

ORCHESTRATOR = "loan_triage"
DOC_VERIFICATION = "doc_verification"
OFAC_SCREENING = "ofac_screening"
RISK_REVIEW = "risk_review"

_FLEET: dict[str, dict[str, Any]] = {
    ORCHESTRATOR: dict(
        name="Loan triage",
        tools=["route_application", "lookup_applicant"],
        human_loop="on_loop",
        data_classes=["pii", "financial"],
        deployment_env="prod",
        can_delegate_to=[DOC_VERIFICATION, OFAC_SCREENING, RISK_REVIEW],
    ),
    DOC_VERIFICATION: dict(
        name="Document verification",
        tools=["ocr_document", "match_identity"],
        human_loop="on_loop",
        data_classes=["pii"],
        provenance="third_party",
        input_sources=["user_upload"],
        deployment_env="prod",
    ),
    OFAC_SCREENING: dict(
        name="OFAC screening",
        tools=["ofac_lookup"],
        human_loop="on_loop",
        data_classes=["pii"],
        deployment_env="prod",
    ),
    RISK_REVIEW: dict(
        name="Risk review",
        tools=["flag_application"],
        human_loop="in_loop",
        access_level="write",
        data_classes=["financial"],
        deployment_env="prod",
    ),
}


def loan_fleet() -> dict[str, AgentDefinition]:
    """The four-agent loan-decisioning fleet, orchestrator first."""
    return {
        key: validate_definition(dict(agent_key=key, owner="lending-ops", approval_status="approved", **fields))
        for key, fields in _FLEET.items()
    }


@dataclass(frozen=True)
class AttackStep:
    invocation_no: int
    sub_agent: str
    signal_kind: str | None


@dataclass(frozen=True)
class FleetScenario:
    orchestrator: AgentDefinition
    sub_agents: Mapping[str, AgentDefinition]
    plan: tuple[AttackStep, ...]
    control: bool = False

    def __post_init__(self) -> None:
        for step in self.plan:
            if step.sub_agent not in self.sub_agents:
                raise ValueError(f"plan names unknown sub-agent {step.sub_agent!r}")
            if step.signal_kind is not None:
                check_kind(step.signal_kind, SIGNAL_KINDS, UnknownSignalKind)
            if self.control and step.signal_kind is not None:
                raise ValueError("a control scenario emits no signals")

    @property
    def invocations(self) -> int:
        return max((s.invocation_no for s in self.plan), default=0)


def loan_fleet_scenario(
    signal_kind: str | None = "oos_tool",
    invocations: int = 20,
    compromised: str = DOC_VERIFICATION,
    control: bool = False,
) -> FleetScenario:
    fleet = loan_fleet()
    orchestrator = fleet.pop(ORCHESTRATOR)
    if control:
        # the clean twin: first-party build reading only internal inputs
        fleet[compromised] = fleet[compromised].replace(provenance="builtin", input_sources=["internal"])
    kind = None if control else signal_kind
    plan = tuple(AttackStep(n, compromised, kind) for n in range(1, invocations + 1))
    return FleetScenario(orchestrator, fleet, plan, control)


@dataclass(frozen=True)
class TrajectoryPoint:
    invocation_no: int
    trust: int
    bucket: str
    emitter_trust: int
    static_score: int
    delegation_premium: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "invocation_no": self.invocation_no,
            "trust": self.trust,
            "bucket": self.bucket,
            "emitter_trust": self.emitter_trust,
            "static_score": self.static_score,
            "delegation_premium": self.delegation_premium,
        }


@dataclass(frozen=True)
class AttackResult:
    signal_kind: str | None
    delta: int
    attribution: bool
    control: bool
    trajectory: tuple[TrajectoryPoint, ...]
    risky_at: int | None
    blocked_at: int | None
    extra: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "signal_kind": self.signal_kind,
            "delta": self.delta,
            "attribution": self.attribution,
            "control": self.control,
            "risky_at": self.risky_at,
            "blocked_at": self.blocked_at,
            "trajectory": [p.to_dict() for p in self.trajectory],
            **dict(self.extra),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def predicted_crossing(delta: int, threshold: int, start: int = START_TRUST) -> int | None:
    """First n with start + n*delta < threshold (delta negative)."""
    if delta >= 0:
        return None if start >= threshold else 0
    n = 0
    while start + n * delta >= threshold:
        n += 1
    return n


def _first(trajectory: Sequence[TrajectoryPoint], bucket_names: set[str]) -> int | None:
    return next((p.invocation_no for p in trajectory if p.bucket in bucket_names), None)


def run_topology_attack(
    scenario: FleetScenario,
    attribution: bool = True,
    deltas: Mapping[str, int] | None = None,
    static_premium: bool = True,
) -> AttackResult:
    """Replay ``scenario`` and return the orchestrator's trust trajectory.

    ``deltas`` maps signal kinds to debit magnitudes; missing kinds use the
    defaults. ``attribution=False`` is the naive configuration where only
    the emitting sub-agent is debited.
    """
    tick = [SIM_EPOCH]
    storage = MemoryStorage(clock=lambda: tick[0])
    evidence = EvidenceLog(storage, key=SIM_KEY)
    weights = TenantWeights(storage)
    for kind, magnitude in (deltas or {}).items():
        weights.set_override(None, WeightKey("signal_delta", kind), magnitude, channel="platform", applied_by="sim")
    trust = TrustService(storage, evidence, weights, attribution=attribution)

    orch = scenario.orchestrator.agent_key
    observed: dict[str, int] = {k: 0 for k in scenario.sub_agents}
    sub_buckets = {k: score_agent(d).bucket for k, d in scenario.sub_agents.items()}
    points: list[TrajectoryPoint] = []
    kinds = {s.signal_kind for s in scenario.plan if s.signal_kind}

    for step in sorted(scenario.plan, key=lambda s: s.invocation_no):
        tick[0] = SIM_EPOCH + step.invocation_no * SIM_STEP
        invocation = f"{orch}-inv-{step.invocation_no:05d}"
        evidence.append(
            SIM_TENANT, invocation, "tool_call", {"delegate": step.sub_agent}, actor_agent_key=orch, occurred_at=tick[0]
        )
        observed[step.sub_agent] += 1
        if step.signal_kind is not None:
            trust.record_principal_signal(
                SIM_TENANT, "agent", step.sub_agent, step.signal_kind, actor_agent_key=orch, invocation_id=invocation
            )
        delegates = [DelegateObservation(k, sub_buckets[k], observed[k]) for k in sorted(observed)]
        ctx = ScoringContext(now=tick[0], delegates=delegates if static_premium else ())
        static = score_agent(scenario.orchestrator, context=ctx)
        premium = static.factor("delegation_premium")
        orch_rec = trust.get(SIM_TENANT, "agent", orch)
        emitter = trust.get(SIM_TENANT, "agent", step.sub_agent)
        points.append(
            TrajectoryPoint(
                step.invocation_no,
                orch_rec.trust_score,
                orch_rec.bucket,
                emitter.trust_score,
                static.final,
                premium.delta if premium else 0,
            )
        )

    kind = next(iter(sorted(kinds)), None)
    delta = trust.delta_for(SIM_TENANT, kind) if kind else 0
    chains_ok = all(evidence.verify_chain(SIM_TENANT, inv).ok for inv in evidence.invocations(SIM_TENANT))
    return AttackResult(
        signal_kind=kind,
        delta=delta,
        attribution=attribution,
        control=scenario.control,
        trajectory=tuple(points),
        risky_at=_first(points, {"risky", "blocked"}),
        blocked_at=_first(points, {"blocked"}),
        extra={"evidence_chains_valid": chains_ok, "sub_agent_buckets": dict(sorted(sub_buckets.items()))},
    )


def run_matched_control(scenario: FleetScenario | None = None, invocations: int = 20) -> AttackResult:
    """Same fleet and cadence with clean sub-agents and no signals."""
    if scenario is None:
        scenario = loan_fleet_scenario(None, invocations, control=True)
    if not scenario.control:
        clean = {k: d.replace(provenance="builtin", input_sources=["internal"]) for k, d in scenario.sub_agents.items()}
        scenario = FleetScenario(
            scenario.orchestrator,
            clean,
            tuple(AttackStep(s.invocation_no, s.sub_agent, None) for s in scenario.plan),
            control=True,
        )
    return run_topology_attack(scenario, attribution=True)


def headline_table() -> list[dict[str, Any]]:
    """Crossings for each signal kind at its default magnitude."""
    rows = []
    for kind in ("oos_tool", "data_leak", "cross_tenant"):
        res = run_topology_attack(loan_fleet_scenario(kind, 20))
        rows.append(
            {"signal_kind": kind, "delta": -SIGNAL_DEFAULTS[kind], "risky_at": res.risky_at, "blocked_at": res.blocked_at}
        )
    return rows
