"""Principal trust, rogue signals, burst detection and the action gate.

Every acting identity (user, agent, service account) has one trust record
per tenant, starting at 50 and clamped to [0, 100]. Rogue signals debit the
emitting principal and, through actor attribution, the orchestrating agent
on whose behalf it acted. Gates emit signals; nothing here lets rogue state
feed back into a gate decision.
"""

from __future__ import annotations

import logging
import math
import threading
from collections import Counter, deque
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from decimal import Decimal
from typing import TYPE_CHECKING, Any, Iterable, Mapping

from .errors import UnknownKind, UnknownPrincipalKind, UnknownSignalKind
from .model import PRINCIPAL_KINDS, QUALITY_KINDS, SIGNAL_KINDS, check_kind, parse_timestamp
from .scoring import WRITE_PREFIXES, bucket_for_score, clamp, round_half_even
from .storage import Storage
from .weights import SIGNAL_DEFAULTS, WeightKey, WeightTable

if TYPE_CHECKING:
    from .evidence import EvidenceLog
    from .weights import TenantWeights

log = logging.getLogger(__name__)

START_TRUST = 50
TRUST_THRESHOLDS = (("trusted", 75), ("neutral", 40), ("risky", 15))
MAX_ROGUE = 50
QUALITY_WEIGHT = 1
DEFAULT_WINDOW = timedelta(hours=24)
DECAY_PERIOD = timedelta(hours=24)
DEFAULT_BURST_FACTOR = Decimal("3.0")

# In-process counter names, one per signal source.
COUNTER_NAMES = {
    "rbac_refusal": "fleetgov_tool_rbac_refusals_total",
    "oos_tool": "fleetgov_agent_oos_tool_attempts_total",
    "governance_block": "fleetgov_governance_blocks_total",
    "cross_tenant": "fleetgov_agent_cross_tenant_attempts_total",
    "data_leak": "fleetgov_agent_data_leak_total",
    "policy_violation": "fleetgov_agent_policy_violations_total",
}
GATE_COUNTER = "fleetgov_governance_action_gate_total"


def bucket_for_trust(score: int) -> str:
    for name, floor in TRUST_THRESHOLDS:
        if score >= floor:
            return name
    return "blocked"


@dataclass(frozen=True)
class PrincipalTrustRecord:
    tenant_id: str
    principal_kind: str
    principal_id: str
    trust_score: int = START_TRUST
    signal_counts: Mapping[str, int] = field(default_factory=dict)
    last_signal_at: datetime | None = None
    updated_at: datetime | None = None

    @property
    def bucket(self) -> str:
        return bucket_for_trust(self.trust_score)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tenant_id": self.tenant_id,
            "principal_kind": self.principal_kind,
            "principal_id": self.principal_id,
            "trust_score": self.trust_score,
            "bucket": self.bucket,
            "signal_counts": dict(sorted(self.signal_counts.items())),
            "last_signal_at": None if self.last_signal_at is None else self.last_signal_at.isoformat(),
            "updated_at": None if self.updated_at is None else self.updated_at.isoformat(),
        }

    @classmethod
    def from_dict(cls, row: Mapping[str, Any]) -> "PrincipalTrustRecord":
        def ts(v):
            return None if v is None else parse_timestamp(v)

        return cls(
            tenant_id=row["tenant_id"],
            principal_kind=row["principal_kind"],
            principal_id=row["principal_id"],
            trust_score=row["trust_score"],
            signal_counts=dict(row.get("signal_counts", {})),
            last_signal_at=ts(row.get("last_signal_at")),
            updated_at=ts(row.get("updated_at")),
        )


def apply_time_decay(
    record: PrincipalTrustRecord, now: datetime, rate: int = 1, period: timedelta = DECAY_PERIOD
) -> PrincipalTrustRecord:
    """Recover toward the starting score for each idle period; never past it."""
    if record.trust_score >= START_TRUST or record.last_signal_at is None:
        return record
    periods = (now - record.last_signal_at) // period
    if periods <= 0:
        return record
    recovered = min(START_TRUST, record.trust_score + periods * rate)
    return PrincipalTrustRecord(
        record.tenant_id,
        record.principal_kind,
        record.principal_id,
        recovered,
        record.signal_counts,
        record.last_signal_at,
        record.updated_at,
    )


# -- rogue score -----------------------------------------------------------


@dataclass(frozen=True)
class RogueReport:
    counts: Mapping[str, int]
    window: timedelta = DEFAULT_WINDOW

    def __post_init__(self) -> None:
        for kind, c in self.counts.items():
            if kind not in SIGNAL_KINDS and kind not in QUALITY_KINDS:
                raise UnknownSignalKind(kind)
            if c < 0:
                raise ValueError("signal counts are nonnegative")

    def to_dict(self) -> dict[str, Any]:
        return {"counts": dict(sorted(self.counts.items())), "window_hours": self.window / timedelta(hours=1)}


def rogue_score(report: RogueReport | Mapping[str, int], weights: Mapping[str, float] | None = None) -> int:
    """``min(50, sum w_s * log2(1 + c_s))``, rounded half-to-even.

    The log makes a second signal kind worth more than many repeats of one.
    """
    counts = report.counts if isinstance(report, RogueReport) else report
    total = 0.0
    for kind, c in counts.items():
        if weights is not None and kind in weights:
            w = weights[kind]
        elif kind in SIGNAL_KINDS:
            w = SIGNAL_DEFAULTS[kind]
        elif kind in QUALITY_KINDS:
            w = QUALITY_WEIGHT
        else:
            raise UnknownSignalKind(kind)
        total += w * math.log2(1 + c)
    return clamp(round(total), 0, MAX_ROGUE)


# -- burst detection -------------------------------------------------------


@dataclass(frozen=True)
class BurstAlert:
    kind: str
    rate_1m: int
    baseline_per_minute: Decimal
    factor: Decimal

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "rate_1m": self.rate_1m,
            "baseline_per_minute": str(self.baseline_per_minute),
            "factor": str(self.factor),
        }


class BurstWindow:
    """Volatile per-kind event timestamps covering the last 61 minutes.

    The current rate is the count in the last minute; the baseline is the
    count in the hour before that, divided by 60. Not persisted by design.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._events: dict[str, deque[datetime]] = {}

    def record(self, kind: str, at: datetime, n: int = 1) -> None:
        with self._lock:
            q = self._events.setdefault(kind, deque())
            q.extend([at] * n)

    def snapshot(self, now: datetime) -> dict[str, tuple[int, int]]:
        """kind -> (count in last minute, count in the hour before)."""
        minute_start = now - timedelta(minutes=1)
        hour_start = minute_start - timedelta(hours=1)
        out = {}
        with self._lock:
            for kind, q in self._events.items():
                while q and q[0] < hour_start:
                    q.popleft()
                current = sum(1 for t in q if minute_start < t <= now)
                baseline = sum(1 for t in q if hour_start < t <= minute_start)
                out[kind] = (current, baseline)
        return out


def detect_burst_anomalies(
    window: BurstWindow | Mapping[str, tuple[int, int]],
    factor: Decimal | float | str = DEFAULT_BURST_FACTOR,
    now: datetime | None = None,
) -> list[BurstAlert]:
    factor = Decimal(str(factor))
    if isinstance(window, BurstWindow):
        if now is None:
            raise ValueError("a live window needs 'now'")
        state = window.snapshot(now)
    else:
        state = window
    alerts = []
    for kind in sorted(state):
        current, baseline = state[kind]
        if current <= 0:
            continue
        # current > factor * baseline / 60, kept in exact arithmetic
        if baseline == 0 or Decimal(current) * 60 > factor * baseline:
            alerts.append(BurstAlert(kind, current, Decimal(baseline) / 60, factor))
    return alerts


# -- RBAC and the action gate ------------------------------------------------


def tool_rbac_check(caller_roles: Iterable[str], tool_required_roles: Iterable[str]) -> bool:
    required = set(tool_required_roles)
    return not required or bool(required & set(caller_roles))


@dataclass(frozen=True)
class Action:
    tool: str
    data_classes: frozenset[str] = frozenset()
    sanctioned_classes: frozenset[str] | None = None
    out_of_scope_tool: bool = False
    writes: bool | None = None

    @property
    def is_write(self) -> bool:
        return self.tool.startswith(WRITE_PREFIXES) if self.writes is None else self.writes


@dataclass(frozen=True)
class GateVerdict:
    verdict: str
    reason: str
    signals: tuple[str, ...] = ()
    action_score: int | None = None
    evidence_ref: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "verdict": self.verdict,
            "reason": self.reason,
            "signals": list(self.signals),
            "action_score": self.action_score,
            "evidence_ref": self.evidence_ref,
        }


def action_score(agent_score: int, action: Action, weights: WeightTable) -> int:
    mult = weights.tool_multiplier(action.tool) * weights.data_class_multiplier(action.tool, action.data_classes)
    return clamp(round_half_even(Decimal(agent_score) * mult))


def evaluate_action_gate(agent_score: int, action: Action, weights: WeightTable | None = None) -> GateVerdict:
    """Default gate policy. Pure: the verdict depends only on the arguments."""
    w = weights or WeightTable.defaults()
    if action.out_of_scope_tool:
        return GateVerdict("block", f"tool {action.tool!r} is outside the sanctioned list", ("oos_tool", "policy_violation"))
    if action.sanctioned_classes is not None:
        leaked = action.data_classes - action.sanctioned_classes
        if leaked:
            return GateVerdict("block", f"unsanctioned data classes in output: {sorted(leaked)}", ("data_leak",))
    score = action_score(agent_score, action, w)
    if action.is_write and bucket_for_score(score, w.bucket_thresholds) == "critical":
        return GateVerdict("flag_for_review", "critical-risk agent invoking a write-capable action", (), score)
    return GateVerdict("allow", "within policy", (), score)


# -- service -----------------------------------------------------------------


class CounterRegistry:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counts: Counter[tuple[str, tuple[tuple[str, str], ...]]] = Counter()

    def inc(self, name: str, n: int = 1, **labels: str) -> None:
        with self._lock:
            self._counts[(name, tuple(sorted(labels.items())))] += n

    def dump(self) -> list[dict[str, Any]]:
        with self._lock:
            items = sorted(self._counts.items())
        return [{"name": n, "labels": dict(lbl), "value": v} for (n, lbl), v in items]


def signal_chain_id(principal_kind: str, principal_id: str) -> str:
    return f"principal:{principal_kind}:{principal_id}"


class TrustService:
    """Records signals against principal trust and the evidence chain."""

    def __init__(
        self,
        storage: Storage,
        evidence: "EvidenceLog | None" = None,
        weights: "TenantWeights | None" = None,
        attribution: bool = True,
        decay_rate: int = 1,
    ):
        self.storage = storage
        self.evidence = evidence
        self.weights = weights
        self.attribution = attribution
        self.decay_rate = decay_rate
        self.counters = CounterRegistry()
        self.window = BurstWindow()

    def delta_for(self, tenant: str, signal_kind: str) -> int:
        if self.weights is None:
            return -SIGNAL_DEFAULTS[signal_kind]
        return -int(self.weights.effective_weight(tenant, WeightKey("signal_delta", signal_kind)))

    def get(self, tenant: str, principal_kind: str, principal_id: str, now: datetime | None = None) -> PrincipalTrustRecord:
        check_kind(principal_kind, PRINCIPAL_KINDS, UnknownPrincipalKind)
        row = self.storage.get("principal_trust", (tenant, principal_kind, principal_id))
        rec = (
            PrincipalTrustRecord(tenant, principal_kind, principal_id)
            if row is None
            else PrincipalTrustRecord.from_dict(row)
        )
        return apply_time_decay(rec, now or self.storage.now(), self.decay_rate)

    def records(self, tenant: str) -> list[PrincipalTrustRecord]:
        now = self.storage.now()
        return [
            apply_time_decay(PrincipalTrustRecord.from_dict(v), now, self.decay_rate)
            for _, v in self.storage.scan("principal_trust", (tenant,))
        ]

    def _debit(self, tenant: str, kind: str, pid: str, signal: str, delta: int, now: datetime) -> PrincipalTrustRecord:
        def merge(cur: dict[str, Any] | None) -> dict[str, Any]:
            rec = PrincipalTrustRecord(tenant, kind, pid) if cur is None else PrincipalTrustRecord.from_dict(cur)
            rec = apply_time_decay(rec, now, self.decay_rate)
            counts = dict(rec.signal_counts)
            counts[signal] = counts.get(signal, 0) + 1
            return PrincipalTrustRecord(
                tenant, kind, pid, clamp(rec.trust_score + delta), counts, now, now
            ).to_dict()

        row = self.storage.upsert("principal_trust", (tenant, kind, pid), merge)
        return PrincipalTrustRecord.from_dict(row)

    def record_principal_signal(
        self,
        tenant: str,
        principal_kind: str,
        principal_id: str,
        signal_kind: str,
        actor_agent_key: str | None = None,
        invocation_id: str | None = None,
        detail: Mapping[str, Any] | None = None,
    ) -> list[PrincipalTrustRecord]:
        """Debit the emitter and, when attributed, the actor agent.

        Returns the updated records, emitter first.
        """
        check_kind(principal_kind, PRINCIPAL_KINDS, UnknownPrincipalKind)
        check_kind(signal_kind, SIGNAL_KINDS, UnknownSignalKind)
        if actor_agent_key is None and principal_kind == "agent":
            actor_agent_key = principal_id
        now = self.storage.now()
        delta = self.delta_for(tenant, signal_kind)

        updated = [self._debit(tenant, principal_kind, principal_id, signal_kind, delta, now)]
        attributed = (
            self.attribution
            and actor_agent_key is not None
            and (principal_kind, principal_id) != ("agent", actor_agent_key)
        )
        if attributed:
            updated.append(self._debit(tenant, "agent", actor_agent_key, signal_kind, delta, now))

        self.counters.inc(COUNTER_NAMES[signal_kind], tenant=tenant)
        self.window.record(signal_kind, now)
        if self.evidence is not None:
            self.evidence.append(
                tenant,
                invocation_id or signal_chain_id(principal_kind, principal_id),
                "system_message",
                {
                    "signal": signal_kind,
                    "principal_kind": principal_kind,
                    "principal_id": principal_id,
                    "delta": delta,
                    "actor_agent_key": actor_agent_key if attributed else None,
                    **({"detail": dict(detail)} if detail else {}),
                },
                actor_agent_key=actor_agent_key,
                occurred_at=now,
            )
        return updated

    def record_quality_signal(
        self, tenant: str, agent_key: str, quality_kind: str, invocation_id: str | None = None
    ) -> None:
        """Quality signals feed the rogue score only; trust is untouched."""
        check_kind(quality_kind, QUALITY_KINDS, lambda v: UnknownKind("quality kind", v))
        now = self.storage.now()
        self.window.record(quality_kind, now)
        if self.evidence is not None:
            self.evidence.append(
                tenant,
                invocation_id or signal_chain_id("agent", agent_key),
                "system_message",
                {"quality": quality_kind, "principal_kind": "agent", "principal_id": agent_key},
                actor_agent_key=agent_key,
                occurred_at=now,
            )

    def check_tool_rbac(
        self,
        tenant: str,
        principal_kind: str,
        principal_id: str,
        caller_roles: Iterable[str],
        tool: str,
        tool_required_roles: Iterable[str],
        actor_agent_key: str | None = None,
        invocation_id: str | None = None,
    ) -> bool:
        if tool_rbac_check(caller_roles, tool_required_roles):
            return True
        self.record_principal_signal(
            tenant, principal_kind, principal_id, "rbac_refusal", actor_agent_key, invocation_id, {"tool": tool}
        )
        return False

    def gate_action(
        self,
        tenant: str,
        agent_key: str,
        agent_score: int,
        action: Action,
        actor_agent_key: str | None = None,
        invocation_id: str | None = None,
        weights: WeightTable | None = None,
    ) -> GateVerdict:
        """Evaluate the gate, then emit its signals and evidence."""
        if weights is None:
            weights = self.weights.table(tenant) if self.weights is not None else WeightTable.defaults()
        verdict = evaluate_action_gate(agent_score, action, weights)
        self.counters.inc(GATE_COUNTER, tenant=tenant, verdict=verdict.verdict)
        chain = invocation_id or signal_chain_id("agent", agent_key)
        ref = None
        if self.evidence is not None:
            event = self.evidence.append(
                tenant,
                chain,
                "system_message",
                {"gate": verdict.to_dict(), "tool": action.tool, "agent_key": agent_key},
                actor_agent_key=actor_agent_key or agent_key,
            )
            ref = f"{tenant}/{chain}/{event.seq}"
        for signal in verdict.signals:
            self.record_principal_signal(
                tenant, "agent", agent_key, signal, actor_agent_key, invocation_id, {"tool": action.tool}
            )
        return GateVerdict(verdict.verdict, verdict.reason, verdict.signals, verdict.action_score, ref)

    def rogue_report(
        self, tenant: str, agent_key: str, window: timedelta = DEFAULT_WINDOW, now: datetime | None = None
    ) -> RogueReport:
        """Per-kind counts of signals emitted by ``agent_key`` within the window."""
        if self.evidence is None:
            return RogueReport({}, window)
        now = now or self.storage.now()
        counts: Counter[str] = Counter()
        for _, rec in self.storage.scan("evidence", (tenant,)):
            payload = rec.get("payload")
            if not isinstance(payload, dict) or payload.get("principal_id") != agent_key:
                continue
            if payload.get("principal_kind") != "agent":
                continue
            if now - parse_timestamp(rec["occurred_at"]) > window:
                continue
            kind = payload.get("signal") or payload.get("quality")
            if kind:
                counts[kind] += 1
        return RogueReport(dict(counts), window)

    def counters_from_evidence(self, tenant: str) -> list[dict[str, Any]]:
        """Rebuild the counter view from the evidence chain (survives restarts)."""
        reg = CounterRegistry()
        for _, rec in self.storage.scan("evidence", (tenant,)):
            payload = rec.get("payload")
            if not isinstance(payload, dict):
                continue
            if payload.get("signal") in COUNTER_NAMES:
                reg.inc(COUNTER_NAMES[payload["signal"]], tenant=tenant)
            gate = payload.get("gate")
            if isinstance(gate, dict):
                reg.inc(GATE_COUNTER, tenant=tenant, verdict=gate.get("verdict", ""))
        return reg.dump()
