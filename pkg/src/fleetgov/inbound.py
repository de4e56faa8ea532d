"""Signed external weight recommendations and the four-gate apply pipeline.

Gates run strictly in order and the first failure stops the envelope:

1. Ed25519 signature against a pinned anchor (no fallback of any kind).
2. ``expires_at`` against the storage clock at persist time.
3. The only-tighten check the weights module applies to every write.
4. Operator approval: the recommendation waits as ``pending`` unless its
   ``(scope, key)`` is on the tenant's auto-apply allowlist.

The pending -> auto_applied transition only ever starts from ``pending``,
so re-ingesting an envelope the operator already applied leaves it alone.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import logging
import os
from dataclasses import dataclass
from datetime import datetime
from typing import TYPE_CHECKING, Any, Iterable, Mapping

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .canonical import canonical_bytes
from .errors import (
    GovernanceError,
    MalformedAnchor,
    MalformedEnvelope,
    NotPending,
    OverrideLoosensError,
    SignatureInvalid,
    UnknownKeyId,
)
from .model import parse_timestamp
from .storage import PLATFORM, Storage
from .weights import TenantWeights, WeightKey, coerce_value, validate_key

if TYPE_CHECKING:
    from .evidence import EvidenceLog

log = logging.getLogger(__name__)

ENV_ANCHORS = "KYA_INBOUND_PUBLIC_KEY"
INBOUND_INVOCATION = "inbound"
ENVELOPE_FIELDS = frozenset(
    {"recommendation_id", "key_id", "signature", "expires_at", "target", "tenant_id", "rationale"}
)

PENDING = "pending"
APPLIED = "applied"
AUTO_APPLIED = "auto_applied"
REJECTED = "rejected"


# -- anchors ---------------------------------------------------------------------


def parse_trust_anchors(env_value: str | None) -> dict[str, Ed25519PublicKey]:
    """``"k1:<b64>,k2:<b64>"`` -> {key_id: public key}. Empty means inbound off."""
    anchors: dict[str, Ed25519PublicKey] = {}
    for entry in (env_value or "").split(","):
        entry = entry.strip()
        if not entry:
            continue
        key_id, sep, encoded = entry.partition(":")
        key_id = key_id.strip()
        if not sep or not key_id or not encoded.strip():
            raise MalformedAnchor(f"expected <keyid>:<base64-pubkey>, got {entry!r}")
        try:
            raw = base64.b64decode(encoded.strip(), validate=True)
        except (binascii.Error, ValueError):
            raise MalformedAnchor(f"anchor {key_id!r}: key is not valid base64") from None
        if len(raw) != 32:
            raise MalformedAnchor(f"anchor {key_id!r}: Ed25519 public keys are 32 bytes, got {len(raw)}")
        if key_id in anchors:
            raise MalformedAnchor(f"anchor {key_id!r} pinned twice")
        anchors[key_id] = Ed25519PublicKey.from_public_bytes(raw)
    return anchors


def anchors_from_env(environ: Mapping[str, str] | None = None) -> dict[str, Ed25519PublicKey]:
    env = os.environ if environ is None else environ
    return parse_trust_anchors(env.get(ENV_ANCHORS, ""))


# -- envelopes -------------------------------------------------------------------


def signing_bytes(envelope: Mapping[str, Any]) -> bytes:
    """Canonical bytes with the signature field stripped."""
    body = {k: v for k, v in envelope.items() if k != "signature"}
    try:
        return canonical_bytes(body)
    except GovernanceError as exc:
        raise MalformedEnvelope(str(exc)) from None


def sign_envelope(body: Mapping[str, Any], key_id: str, private_key: Ed25519PrivateKey) -> dict[str, Any]:
    envelope = {k: v for k, v in body.items() if k != "signature"}
    envelope["key_id"] = key_id
    envelope["signature"] = base64.b64encode(private_key.sign(signing_bytes(envelope))).decode("ascii")
    return envelope


@dataclass(frozen=True)
class RecommendationEnvelope:
    recommendation_id: str
    key_id: str
    signature: str
    expires_at: datetime
    target: WeightKey
    value: Any
    tenant_id: str | None
    rationale: str

    @classmethod
    def parse(cls, raw: Mapping[str, Any]) -> "RecommendationEnvelope":
        if not isinstance(raw, Mapping):
            raise MalformedEnvelope("envelope must be a JSON object")
        unknown = set(raw) - ENVELOPE_FIELDS
        if unknown:
            raise MalformedEnvelope(f"unknown envelope fields {sorted(unknown)}")
        for name in ("recommendation_id", "key_id", "signature", "expires_at", "target"):
            if name not in raw:
                raise MalformedEnvelope(f"missing {name}")
        target = raw["target"]
        if not isinstance(target, Mapping) or set(target) != {"scope", "key", "value"}:
            raise MalformedEnvelope("target needs exactly scope, key and value")
        tenant = raw.get("tenant_id")
        for name, v in (("recommendation_id", raw["recommendation_id"]), ("key_id", raw["key_id"])):
            if not isinstance(v, str) or not v:
                raise MalformedEnvelope(f"{name} must be a non-empty string")
        if tenant is not None and (not isinstance(tenant, str) or not tenant or tenant == PLATFORM):
            raise MalformedEnvelope("tenant_id must be a non-empty string or absent")
        try:
            expires = parse_timestamp(raw["expires_at"])
        except (TypeError, ValueError):
            raise MalformedEnvelope("expires_at is not a timestamp") from None
        return cls(
            recommendation_id=raw["recommendation_id"],
            key_id=raw["key_id"],
            signature=raw["signature"],
            expires_at=expires,
            target=WeightKey(str(target["scope"]), str(target["key"])),
            value=target["value"],
            tenant_id=tenant,
            rationale=str(raw.get("rationale", "")),
        )


def verify_envelope(envelope: Mapping[str, Any], anchors: Mapping[str, Ed25519PublicKey]) -> None:
    """Gate 1. Returns nothing on success; raises on any failure."""
    if not anchors:
        raise SignatureInvalid("no trust anchors pinned; inbound is disabled")
    key_id = envelope.get("key_id") if isinstance(envelope, Mapping) else None
    if key_id not in anchors:
        raise UnknownKeyId(f"key_id {key_id!r} is not pinned")
    sig = envelope.get("signature")
    try:
        raw_sig = base64.b64decode(sig, validate=True) if isinstance(sig, str) else None
    except (binascii.Error, ValueError):
        raw_sig = None
    if raw_sig is None or len(raw_sig) != 64:
        raise SignatureInvalid("signature is not a base64 Ed25519 signature")
    try:
        anchors[key_id].verify(raw_sig, signing_bytes(envelope))
    except (InvalidSignature, MalformedEnvelope):
        raise SignatureInvalid(f"signature does not verify under {key_id!r}") from None


# -- pipeline --------------------------------------------------------------------


@dataclass(frozen=True)
class PendingRecommendation:
    recommendation_id: str
    tenant_id: str | None
    status: str
    gate_rejected: int | None
    reason: str
    envelope: Mapping[str, Any]
    reviewed_by: str | None = None
    received_at: str | None = None
    decided_at: str | None = None

    @property
    def stopped_at_gate(self) -> int | None:
        """Gate that stopped the envelope: the rejecting gate, or 4 while pending."""
        if self.gate_rejected is not None:
            return self.gate_rejected
        return 4 if self.status == PENDING else None

    @property
    def applied(self) -> bool:
        return self.status in (APPLIED, AUTO_APPLIED)

    def to_dict(self) -> dict[str, Any]:
        return {
            "recommendation_id": self.recommendation_id,
            "tenant_id": self.tenant_id,
            "status": self.status,
            "gate_rejected": self.gate_rejected,
            "reason": self.reason,
            "reviewed_by": self.reviewed_by,
            "received_at": self.received_at,
            "decided_at": self.decided_at,
            "envelope": dict(self.envelope),
        }


def _from_row(row: Mapping[str, Any]) -> PendingRecommendation:
    tenant = row["tenant_id"]
    return PendingRecommendation(
        recommendation_id=row["recommendation_id"],
        tenant_id=None if tenant == PLATFORM else tenant,
        status=row["status"],
        gate_rejected=row.get("gate_rejected"),
        reason=row.get("reason", ""),
        envelope=row.get("envelope", {}),
        reviewed_by=row.get("reviewed_by"),
        received_at=row.get("received_at"),
        decided_at=row.get("decided_at"),
    )


class InboundPipeline:
    def __init__(
        self,
        storage: Storage,
        weights: TenantWeights,
        anchors: Mapping[str, Ed25519PublicKey] | None = None,
        auto_apply_allowlist: Iterable[tuple[str, str]] = (),
        evidence: "EvidenceLog | None" = None,
    ):
        self.storage = storage
        self.weights = weights
        self.anchors = dict(anchors) if anchors is not None else anchors_from_env()
        self.allowlist = frozenset(tuple(x) for x in auto_apply_allowlist)
        self.evidence = evidence

    @property
    def enabled(self) -> bool:
        return bool(self.anchors)

    def _audit(self, namespace: str, outcome: Mapping[str, Any]) -> None:
        if self.evidence is not None:
            self.evidence.append(namespace, INBOUND_INVOCATION, "system_message", {"inbound": dict(outcome)})

    def _insert_if_absent(self, namespace: str, rid: str, row: dict[str, Any]) -> PendingRecommendation:
        stored = self.storage.upsert("pending_recommendations", (namespace, rid), lambda cur: cur or row)
        return _from_row(stored)

    def _reject(
        self, namespace: str, rid: str, gate: int, reason: str, raw: Any
    ) -> PendingRecommendation:
        now = self.storage.now().isoformat()
        envelope = raw if isinstance(raw, Mapping) else {}
        row = {
            "tenant_id": namespace,
            "recommendation_id": rid,
            "status": REJECTED,
            "gate_rejected": gate,
            "reason": reason,
            "envelope": _json_safe(envelope),
            "reviewed_by": None,
            "received_at": now,
            "decided_at": now,
        }
        # an existing record under this id is never overwritten by a rejection
        stored = self._insert_if_absent(namespace, rid, row)
        self._audit(namespace, {"recommendation_id": rid, "status": REJECTED, "gate": gate, "reason": reason})
        if stored.status == REJECTED and stored.gate_rejected == gate and stored.reason == reason:
            return stored
        return PendingRecommendation(rid, _tenant(namespace), REJECTED, gate, reason, row["envelope"], None, now, now)

    def ingest_recommendation(self, raw: Mapping[str, Any]) -> PendingRecommendation:
        """Run the four gates. Gate failures are returned, never raised."""
        namespace, rid = _routing(raw)

        # Gate 1
        try:
            verify_envelope(raw, self.anchors)
            env = RecommendationEnvelope.parse(raw)
        except (UnknownKeyId, SignatureInvalid, MalformedEnvelope) as exc:
            return self._reject(namespace, rid, 1, f"{type(exc).__name__}: {exc}", raw)

        # Gate 2, against the store's clock at persist time
        now = self.storage.now()
        if env.expires_at <= now:
            return self._reject(namespace, rid, 2, f"expired at {env.expires_at.isoformat()}", raw)

        # Gate 3
        try:
            wk = validate_key(env.target)
            value = coerce_value(wk.scope, env.value)
            self.weights.check_only_tighten(env.tenant_id, wk, value, "recommendation")
        except OverrideLoosensError as exc:
            return self._reject(namespace, rid, 3, f"OverrideLoosensError: {exc}", raw)
        except (GovernanceError, ValueError) as exc:
            return self._reject(namespace, rid, 3, f"{type(exc).__name__}: {exc}", raw)

        # Gate 4
        row = {
            "tenant_id": namespace,
            "recommendation_id": rid,
            "status": PENDING,
            "gate_rejected": None,
            "reason": "awaiting operator approval",
            "envelope": dict(raw),
            "reviewed_by": None,
            "received_at": now.isoformat(),
            "decided_at": None,
        }
        rec = self._insert_if_absent(namespace, rid, row)
        if rec.status != PENDING:
            return rec  # already decided; re-ingest never rolls it back
        if env.tenant_id is None or (wk.scope, wk.key) not in self.allowlist:
            self._audit(namespace, {"recommendation_id": rid, "status": PENDING, "gate": 4})
            return rec
        return self._apply(namespace, rid, env, AUTO_APPLIED, "auto-apply allowlist")

    def _apply(
        self, namespace: str, rid: str, env: RecommendationEnvelope, status: str, reviewer: str
    ) -> PendingRecommendation:
        wk = env.target
        try:
            self.weights.set_override(
                env.tenant_id, wk, env.value, channel="recommendation", applied_by=reviewer, source=f"recommendation:{rid}"
            )
        except OverrideLoosensError as exc:
            self._decide(namespace, rid, REJECTED, reviewer, gate=3, reason=f"rejected on apply: {exc}")
            raise
        return self._decide(namespace, rid, status, reviewer)

    def _decide(
        self, namespace: str, rid: str, status: str, reviewer: str, gate: int | None = None, reason: str | None = None
    ) -> PendingRecommendation:
        now = self.storage.now().isoformat()

        def merge(cur: dict[str, Any] | None) -> dict[str, Any]:
            # the status guard: only a pending row can move
            if cur is None or cur["status"] != PENDING:
                raise NotPending(f"recommendation {rid!r} is not pending")
            out = dict(cur, status=status, reviewed_by=reviewer, decided_at=now)
            if gate is not None:
                out["gate_rejected"] = gate
            if reason is not None:
                out["reason"] = reason
            return out

        try:
            row = self.storage.upsert("pending_recommendations", (namespace, rid), merge)
        except NotPending:
            current = self.storage.get("pending_recommendations", (namespace, rid))
            if current is None:
                raise
            return _from_row(current)
        self._audit(namespace, {"recommendation_id": rid, "status": status, "reviewer": reviewer, "gate": gate})
        return _from_row(row)

    def get(self, recommendation_id: str, tenant: str | None = None) -> PendingRecommendation | None:
        for ns in ([tenant] if tenant else []) + [PLATFORM]:
            row = self.storage.get("pending_recommendations", (ns, recommendation_id))
            if row is not None:
                return _from_row(row)
        return None

    def list(self, tenant: str | None = None, status: str | None = None) -> list[PendingRecommendation]:
        rows = []
        for ns in ([tenant] if tenant else []) + [PLATFORM]:
            rows += [_from_row(v) for _, v in self.storage.scan("pending_recommendations", (ns,))]
        return [r for r in rows if status is None or r.status == status]

    def list_pending(self, tenant: str | None = None) -> list[PendingRecommendation]:
        return self.list(tenant, PENDING)

    def approve_recommendation(
        self, recommendation_id: str, operator: str, tenant: str | None = None
    ) -> PendingRecommendation:
        """Apply a pending recommendation, re-checking only-tighten now."""
        if not operator:
            raise ValueError("approval needs an operator identity")
        rec = self.get(recommendation_id, tenant)
        if rec is None or rec.status != PENDING:
            raise NotPending(f"recommendation {recommendation_id!r} is not pending")
        env = RecommendationEnvelope.parse(rec.envelope)
        namespace = rec.tenant_id or PLATFORM
        result = self._apply(namespace, recommendation_id, env, APPLIED, operator)
        if result.status != APPLIED:
            raise NotPending(f"recommendation {recommendation_id!r} was decided concurrently ({result.status})")
        return result

    def reject_recommendation(
        self, recommendation_id: str, operator: str, tenant: str | None = None
    ) -> PendingRecommendation:
        rec = self.get(recommendation_id, tenant)
        if rec is None or rec.status != PENDING:
            raise NotPending(f"recommendation {recommendation_id!r} is not pending")
        return self._decide(rec.tenant_id or PLATFORM, recommendation_id, REJECTED, operator, gate=4, reason="operator rejected")


def _tenant(namespace: str) -> str | None:
    return None if namespace == PLATFORM else namespace


def _routing(raw: Any) -> tuple[str, str]:
    """Namespace and id for a possibly malformed envelope."""
    if not isinstance(raw, Mapping):
        return PLATFORM, "malformed:" + hashlib.sha256(repr(raw).encode()).hexdigest()[:16]
    tenant = raw.get("tenant_id")
    namespace = tenant if isinstance(tenant, str) and tenant and tenant != PLATFORM else PLATFORM
    rid = raw.get("recommendation_id")
    if not isinstance(rid, str) or not rid:
        try:
            digest = hashlib.sha256(canonical_bytes(dict(raw))).hexdigest()
        except Exception:
            digest = hashlib.sha256(repr(sorted(raw.items(), key=str)).encode()).hexdigest()
        rid = "malformed:" + digest[:16]
    return namespace, rid


def _json_safe(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if value is None or isinstance(value, (str, int, float, bool)):
        return value
    return repr(value)
