"""Platform, tenant and recommendation weight channels under only-tighten.

Every tunable number lives under a ``(scope, key)`` pair. Each scope has a
fixed polarity saying which direction is "tighter". Platform-channel writes
are trusted and may move the default either way; tenant and recommendation
writes must dominate the current platform default and are folded into the
channel with a running meet, so a stored channel value never relaxes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from functools import lru_cache
from typing import TYPE_CHECKING, Any, Iterable, Mapping

from . import model
from .errors import NotPending, OverrideLoosensError, UnknownWeightKey
from .storage import PLATFORM, Storage

if TYPE_CHECKING:
    from .evidence import EvidenceLog

log = logging.getLogger(__name__)

HIGHER_IS_TIGHTER = "higher_is_tighter"
LOWER_IS_TIGHTER = "lower_is_tighter"

SCOPE_POLARITY = {
    "factor_weight": HIGHER_IS_TIGHTER,
    "signal_delta": HIGHER_IS_TIGHTER,
    "bucket_threshold": LOWER_IS_TIGHTER,
    "data_class_multiplier": HIGHER_IS_TIGHTER,
    "tool_multiplier": HIGHER_IS_TIGHTER,
}
SCOPES = frozenset(SCOPE_POLARITY)
MULTIPLIER_SCOPES = frozenset({"data_class_multiplier", "tool_multiplier"})
CHANNELS = ("platform", "tenant", "recommendation")

WEIGHT_EVIDENCE_INVOCATION = "weight-changes"
SUGGESTION_BUMP = 2


def _schedule(prefix: str, table: Mapping[str, int]) -> dict[str, int]:
    return {f"{prefix}.{k}": v for k, v in table.items()}


FACTOR_DEFAULTS: dict[str, int] = {
    "base": 5,
    "write_tool": 4,
    "admin_tool": 8,
    "can_override": 12,
    "can_revert": 8,
    **_schedule("access", model.ACCESS_WEIGHTS),
    **_schedule("governance", model.GOVERNANCE_WEIGHTS),
    **_schedule("data_sensitivity", model.DATA_CLASS_WEIGHTS),
    **_schedule("security_caps", model.SECURITY_CAP_WEIGHTS),
    **_schedule("provenance", model.PROVENANCE_WEIGHTS),
    **_schedule("model_trust", model.MODEL_TRUST_WEIGHTS),
    **_schedule("deployment", model.DEPLOYMENT_WEIGHTS),
    **_schedule("supply_chain", model.SUPPLY_CHAIN_WEIGHTS),
    "supply_chain.breadth": 5,
    **_schedule("input_sources", model.INPUT_SOURCE_WEIGHTS),
    "input_sources.breadth": 5,
    **_schedule("approval", model.APPROVAL_WEIGHTS),
    "lifecycle.brand_new": 8,
    "lifecycle.churn": 10,
    "lifecycle.unowned": 5,
    "blast_radius.multi_tenant": 10,
    "blast_radius.downstream_write": 5,
    "delegation.per_hop": 5,
    "delegation_premium.per_delegate": 8,
    # credits are negative; a smaller credit is tighter
    "audit.red_team": -5,
    "audit.fairness": -3,
    "audit.citation": -2,
    "audit.untested": 3,
    "cost.burst": 6,
    "cost.budget_exhausted": 4,
}

# Caps per factor family; a key's cap is the cap of its prefix.
FACTOR_CAPS: dict[str, int] = {
    "data_sensitivity": 60,
    "security_caps": 60,
    "provenance": 20,
    "model_trust": 10,
    "blast_radius": 30,
    "deployment": 25,
    "delegation": 25,
    "supply_chain": 35,
    "input_sources": 25,
    "delegation_premium": 25,
}

# Magnitudes of the trust debits; the debit applied is the negation.
SIGNAL_DEFAULTS: dict[str, int] = {
    "oos_tool": 3,
    "rbac_refusal": 2,
    "governance_block": 2,
    "data_leak": 10,
    "cross_tenant": 15,
    "policy_violation": 4,
}

BUCKET_DEFAULTS: dict[str, int] = {"medium": 30, "high": 60, "critical": 85}

DATA_CLASS_MULTIPLIER_DEFAULTS: dict[str, Decimal] = {"ofac_lookup:us_classified": Decimal("1.20")}
TOOL_MULTIPLIER_DEFAULTS: dict[str, Decimal] = {}


def factor_cap(key: str) -> int | None:
    return FACTOR_CAPS.get(key.split(".", 1)[0])


@dataclass(frozen=True)
class WeightKey:
    scope: str
    key: str

    @property
    def polarity(self) -> str:
        return SCOPE_POLARITY[self.scope]

    def __str__(self) -> str:
        return f"{self.scope}:{self.key}"

    @classmethod
    def parse(cls, text: str) -> "WeightKey":
        scope, sep, key = text.partition(":")
        if not sep:
            raise UnknownWeightKey(text, "")
        return validate_key(cls(scope, key))


def validate_key(wk: WeightKey) -> WeightKey:
    """Reject keys outside the scope's vocabulary."""
    scope, key = wk.scope, wk.key
    if scope not in SCOPES or not isinstance(key, str) or not key:
        raise UnknownWeightKey(scope, key)
    if scope == "factor_weight" and key not in FACTOR_DEFAULTS:
        raise UnknownWeightKey(scope, key)
    if scope == "signal_delta" and key not in SIGNAL_DEFAULTS:
        raise UnknownWeightKey(scope, key)
    if scope == "bucket_threshold" and key not in BUCKET_DEFAULTS:
        raise UnknownWeightKey(scope, key)
    if scope == "data_class_multiplier":
        tool, sep, cls = key.rpartition(":")
        if not sep or not tool or cls not in model.DATA_CLASSES:
            raise UnknownWeightKey(scope, key)
    return wk


def coerce_value(scope: str, value: Any) -> int | Decimal:
    """Normalise a raw value for its scope, rejecting out-of-range input."""
    if isinstance(value, bool):
        raise ValueError(f"{scope}: booleans are not weights")
    if scope in MULTIPLIER_SCOPES:
        try:
            out = Decimal(str(value))
        except InvalidOperation:
            raise ValueError(f"{scope}: {value!r} is not a decimal") from None
        if not out.is_finite() or out < 1:
            raise ValueError(f"{scope}: multipliers must be finite and >= 1.0")
        return out
    if isinstance(value, str):
        value = value.strip()
    try:
        as_dec = Decimal(str(value))
    except InvalidOperation:
        raise ValueError(f"{scope}: {value!r} is not an integer") from None
    if not as_dec.is_finite() or as_dec != as_dec.to_integral_value():
        raise ValueError(f"{scope}: {value!r} is not an integer")
    out = int(as_dec)
    if scope == "signal_delta" and out < 0:
        raise ValueError("signal_delta magnitudes are nonnegative")
    if scope == "bucket_threshold" and not 1 <= out <= 100:
        raise ValueError("bucket thresholds lie in [1, 100]")
    return out


def dominates(scope: str, candidate: Any, reference: Any) -> bool:
    """``candidate`` is at least as tight as ``reference``."""
    if SCOPE_POLARITY[scope] == LOWER_IS_TIGHTER:
        return candidate <= reference
    return candidate >= reference


def meet(scope: str, values: Iterable[Any]) -> Any:
    """Tightest of ``values`` under the scope's polarity."""
    values = list(values)
    return min(values) if SCOPE_POLARITY[scope] == LOWER_IS_TIGHTER else max(values)


def _default(wk: WeightKey) -> int | Decimal:
    if wk.scope == "factor_weight":
        return FACTOR_DEFAULTS[wk.key]
    if wk.scope == "signal_delta":
        return SIGNAL_DEFAULTS[wk.key]
    if wk.scope == "bucket_threshold":
        return BUCKET_DEFAULTS[wk.key]
    if wk.scope == "data_class_multiplier":
        return DATA_CLASS_MULTIPLIER_DEFAULTS.get(wk.key, Decimal(1))
    return TOOL_MULTIPLIER_DEFAULTS.get(wk.key, Decimal(1))


def _value_text(value: int | Decimal) -> str | int:
    return value if isinstance(value, int) else str(value)


def _value_from(scope: str, stored: Any) -> int | Decimal:
    return Decimal(stored) if scope in MULTIPLIER_SCOPES else int(stored)


class WeightTable:
    """Immutable effective-weight snapshot consumed by scoring and the gate."""

    def __init__(self, overrides: Mapping[tuple[str, str], int | Decimal] | None = None):
        self._factors = dict(FACTOR_DEFAULTS)
        self._signals = dict(SIGNAL_DEFAULTS)
        self._buckets = dict(BUCKET_DEFAULTS)
        self._dc_mult = dict(DATA_CLASS_MULTIPLIER_DEFAULTS)
        self._tool_mult = dict(TOOL_MULTIPLIER_DEFAULTS)
        tables = {
            "factor_weight": self._factors,
            "signal_delta": self._signals,
            "bucket_threshold": self._buckets,
            "data_class_multiplier": self._dc_mult,
            "tool_multiplier": self._tool_mult,
        }
        for (scope, key), value in (overrides or {}).items():
            tables[scope][key] = value

    @classmethod
    @lru_cache(maxsize=1)
    def defaults(cls) -> "WeightTable":
        return cls()

    def factor(self, key: str) -> int:
        return self._factors[key]

    def signal_delta(self, kind: str) -> int:
        """Signed trust delta (always <= 0) for a rogue signal."""
        return -self._signals[kind]

    def signal_weight(self, kind: str) -> int:
        return self._signals[kind]

    @property
    def bucket_thresholds(self) -> dict[str, int]:
        return dict(self._buckets)

    def tool_multiplier(self, tool: str) -> Decimal:
        return self._tool_mult.get(tool, Decimal(1))

    def data_class_multiplier(self, tool: str, classes: Iterable[str]) -> Decimal:
        """Largest multiplier over the classes, tool-specific entries first."""
        best = Decimal(1)
        for cls in classes:
            for key in (f"{tool}:{cls}", f"*:{cls}"):
                if key in self._dc_mult:
                    best = max(best, self._dc_mult[key])
        return best

    def get(self, wk: WeightKey) -> int | Decimal:
        if wk.scope == "factor_weight":
            return self._factors[wk.key]
        if wk.scope == "signal_delta":
            return self._signals[wk.key]
        if wk.scope == "bucket_threshold":
            return self._buckets[wk.key]
        if wk.scope == "data_class_multiplier":
            return self._dc_mult.get(wk.key, Decimal(1))
        return self._tool_mult.get(wk.key, Decimal(1))


@dataclass(frozen=True)
class WeightSuggestion:
    id: str
    tenant_id: str
    incident_id: str
    scope: str
    key: str
    proposed: int | Decimal
    status: str
    reviewer: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "tenant_id": self.tenant_id,
            "incident_id": self.incident_id,
            "scope": self.scope,
            "key": self.key,
            "proposed": _value_text(self.proposed),
            "status": self.status,
            "reviewer": self.reviewer,
        }


class TenantWeights:
    """Channel store plus the only-tighten guard.

    Concurrency: the dominance check and the write happen in one storage
    transaction, so a concurrent platform raise is either fully before or
    fully after the check.
    """

    def __init__(self, storage: Storage, evidence: "EvidenceLog | None" = None):
        self.storage = storage
        self.evidence = evidence

    # -- reads -------------------------------------------------------------

    def _stored(self, namespace: str, channel: str, wk: WeightKey) -> int | Decimal | None:
        row = self.storage.get("weight_overrides", (namespace, channel, wk.scope, wk.key))
        return None if row is None else _value_from(wk.scope, row["value"])

    def platform_value(self, wk: WeightKey) -> int | Decimal:
        validate_key(wk)
        stored = self._stored(PLATFORM, "platform", wk)
        return _default(wk) if stored is None else stored

    def effective_weight(self, tenant: str | None, wk: WeightKey) -> int | Decimal:
        """Tightest of the platform value and every applicable channel."""
        validate_key(wk)
        with self.storage.transaction():
            values = [self.platform_value(wk)]
            namespaces = [(PLATFORM, "recommendation")]
            if tenant is not None:
                namespaces += [(tenant, "tenant"), (tenant, "recommendation")]
            for ns, channel in namespaces:
                v = self._stored(ns, channel, wk)
                if v is not None:
                    values.append(v)
        return meet(wk.scope, values)

    def table(self, tenant: str | None = None) -> WeightTable:
        keys = set()
        with self.storage.transaction():
            prefixes = [(PLATFORM,)] + ([(tenant,)] if tenant is not None else [])
            for prefix in prefixes:
                for k, _ in self.storage.scan("weight_overrides", prefix):
                    keys.add(WeightKey(k[2], k[3]))
            if not keys:
                return WeightTable.defaults()
            return WeightTable({(wk.scope, wk.key): self.effective_weight(tenant, wk) for wk in keys})

    def overrides(self, tenant: str | None = None) -> list[dict[str, Any]]:
        rows = [v for _, v in self.storage.scan("weight_overrides", (PLATFORM,))]
        if tenant is not None:
            rows += [v for _, v in self.storage.scan("weight_overrides", (tenant,))]
        return rows

    def changes(self, tenant: str | None = None) -> list[dict[str, Any]]:
        return [v for _, v in self.storage.scan("weight_changes", (tenant or PLATFORM,))]

    # -- writes ------------------------------------------------------------

    def check_only_tighten(self, tenant: str | None, wk: WeightKey, value: Any, channel: str) -> None:
        """Raise if a non-platform write would loosen the platform default.

        Only platform-channel writes skip the check. A recommendation with no
        tenant still has to dominate the platform value it would sit beside.
        """
        if channel == "platform":
            return
        current = self.platform_value(wk)
        if not dominates(wk.scope, value, current):
            raise OverrideLoosensError(wk.scope, wk.key, _value_text(current), _value_text(value))

    def set_override(
        self,
        tenant: str | None,
        wk: WeightKey,
        value: Any,
        channel: str | None = None,
        applied_by: str = "system",
        source: str | None = None,
    ) -> dict[str, Any]:
        """Apply one write and return its audit row."""
        validate_key(wk)
        channel = channel or ("platform" if tenant is None else "tenant")
        if channel not in CHANNELS:
            raise ValueError(f"unknown channel {channel!r}")
        if channel == "platform" and tenant is not None:
            raise ValueError("platform-channel writes carry no tenant")
        if channel == "tenant" and tenant is None:
            raise ValueError("tenant-channel writes need a tenant")
        value = coerce_value(wk.scope, value)
        namespace = tenant if tenant is not None else PLATFORM
        key = (namespace, channel, wk.scope, wk.key)

        with self.storage.transaction():
            self.check_only_tighten(tenant, wk, value, channel)
            previous = self._stored(namespace, channel, wk)
            if channel == "platform" or previous is None:
                result = value
            else:
                result = meet(wk.scope, (previous, value))
            now = self.storage.now().isoformat()
            self.storage.put(
                "weight_overrides",
                key,
                {
                    "tenant_id": namespace,
                    "channel": channel,
                    "scope": wk.scope,
                    "key": wk.key,
                    "value": _value_text(result),
                    "applied_at": now,
                    "applied_by": applied_by,
                },
            )
            seq = self.storage.count("weight_changes", (namespace,))
            change = {
                "tenant_id": namespace,
                "seq": seq,
                "channel": channel,
                "scope": wk.scope,
                "key": wk.key,
                "previous": None if previous is None else _value_text(previous),
                "attempted": _value_text(value),
                "value": _value_text(result),
                "applied_at": now,
                "applied_by": applied_by,
                "source": source,
            }
            self.storage.insert("weight_changes", (namespace, seq), change)

        if self.evidence is not None:
            self.evidence.append(
                namespace, WEIGHT_EVIDENCE_INVOCATION, "system_message", {"weight_change": change}
            )
        return change

    # -- closed-loop suggestions --------------------------------------------

    def propose_from_incident(self, tenant: str, incident: Mapping[str, Any]) -> list[WeightSuggestion]:
        """Stage one pending bump per fired factor of a resolved critical incident.

        Nothing is applied here. Re-proposing an incident id returns the
        suggestions already staged for it.
        """
        if incident.get("severity") != "critical" or not incident.get("resolved", True):
            return []
        incident_id = str(incident["incident_id"])
        existing = [s for s in self.suggestions(tenant) if s.incident_id == incident_id]
        if existing:
            return existing

        out = []
        now = self.storage.now().isoformat()
        for raw in dict.fromkeys(incident.get("fired_factors", ())):
            factor_key = raw.replace(":", ".", 1)
            if factor_key not in FACTOR_DEFAULTS:
                log.info("incident %s: no tunable weight for factor %r", incident_id, raw)
                continue
            wk = WeightKey("factor_weight", factor_key)
            current = self.effective_weight(tenant, wk)
            proposed = current + SUGGESTION_BUMP
            cap = factor_cap(factor_key)
            if cap is not None:
                proposed = min(proposed, cap)
            if proposed <= current:
                continue
            sid = f"{incident_id}:{wk.scope}:{wk.key}"
            row = {
                "tenant_id": tenant,
                "id": sid,
                "incident_id": incident_id,
                "agent_key": incident.get("agent_key"),
                "scope": wk.scope,
                "key": wk.key,
                "proposed": proposed,
                "status": "pending",
                "reviewer": None,
                "created_at": now,
                "reviewed_at": None,
            }
            stored = self.storage.upsert("weight_suggestions", (tenant, sid), lambda cur, row=row: cur or row)
            out.append(_suggestion(stored))
        return out

    def suggestions(self, tenant: str, status: str | None = None) -> list[WeightSuggestion]:
        rows = [_suggestion(v) for _, v in self.storage.scan("weight_suggestions", (tenant,))]
        return [s for s in rows if status is None or s.status == status]

    def _pending_suggestion(self, tenant: str, sid: str) -> dict[str, Any]:
        row = self.storage.get("weight_suggestions", (tenant, sid))
        if row is None or row["status"] != "pending":
            raise NotPending(f"suggestion {sid!r} is not pending")
        return row

    def approve_suggestion(self, tenant: str, sid: str, reviewer: str) -> dict[str, Any]:
        if not reviewer:
            raise ValueError("approving a suggestion needs a reviewer identity")
        row = self._pending_suggestion(tenant, sid)
        wk = WeightKey(row["scope"], row["key"])
        # raises OverrideLoosensError with the suggestion left pending
        change = self.set_override(
            tenant, wk, row["proposed"], channel="tenant", applied_by=reviewer, source=f"suggestion:{sid}"
        )
        self._close(tenant, sid, "approved", reviewer)
        return change

    def reject_suggestion(self, tenant: str, sid: str, reviewer: str) -> WeightSuggestion:
        if not reviewer:
            raise ValueError("rejecting a suggestion needs a reviewer identity")
        self._pending_suggestion(tenant, sid)
        return _suggestion(self._close(tenant, sid, "rejected", reviewer))

    def _close(self, tenant: str, sid: str, status: str, reviewer: str) -> dict[str, Any]:
        now = self.storage.now().isoformat()

        def merge(cur: dict[str, Any] | None) -> dict[str, Any]:
            if cur is None or cur["status"] != "pending":
                raise NotPending(f"suggestion {sid!r} is not pending")
            return dict(cur, status=status, reviewer=reviewer, reviewed_at=now)

        row = self.storage.upsert("weight_suggestions", (tenant, sid), merge)
        if self.evidence is not None:
            self.evidence.append(
                tenant,
                WEIGHT_EVIDENCE_INVOCATION,
                "hil_decision",
                {"suggestion": sid, "status": status, "reviewer": reviewer},
            )
        return row


def _suggestion(row: Mapping[str, Any]) -> WeightSuggestion:
    return WeightSuggestion(
        id=row["id"],
        tenant_id=row["tenant_id"],
        incident_id=row["incident_id"],
        scope=row["scope"],
        key=row["key"],
        proposed=_value_from(row["scope"], row["proposed"]),
        status=row["status"],
        reviewer=row["reviewer"],
    )
