"""Per-(tenant, invocation) HMAC-SHA256 chained evidence log.

Each event stores ``signed_hash = HMAC_K(prev_hash || canonical(event))``
where the canonical form covers every stored field except the two hashes.
The first event of a chain links to a per-chain seed derived from the fixed
domain-separation tag and the chain identifiers.

Retention pruning only ever removes a prefix of a chain and records the cut
in the chain's ledger row, so the verifier can tell an expected clean cut
from tampering.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import importlib
import logging
import os
import secrets
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Any, Iterable, Mapping

from .canonical import canonical_bytes, decode_tree, encode_tree
from .compliance import RegimeRegistry, default_registry
from .errors import InvalidEvidenceKind, LockTimeout, LockUnavailable, ProviderLoadFailure
from .model import DATA_CLASSES, EVIDENCE_KINDS, parse_timestamp
from .storage import Storage

log = logging.getLogger(__name__)

DOMAIN_TAG = b"KYA-v1-evidence"

VALID = "valid"
PAYLOAD_TAMPER = "payload_tamper"
CHAIN_BREAK = "chain_break"
CLEAN_CUT = "clean_cut"

ENV_PROVIDER = "KYA_EVIDENCE_KEY_PROVIDER"
ENV_KEY = "KYA_EVIDENCE_SIGNING_KEY"


# -- signing key resolution ------------------------------------------------


@dataclass(frozen=True)
class SigningKey:
    material: bytes = field(repr=False)
    source: str  # "provider", "env" or "ephemeral"


_fallback_lock = threading.Lock()
_fallback_key: bytes | None = None
_fallback_warned = False


def resolve_signing_key(environ: Mapping[str, str] | None = None) -> SigningKey:
    """Provider reference, then base64 env key, then a process-local random key.

    Never fails closed: a broken provider or a malformed env key falls
    through to the next tier with a warning.
    """
    global _fallback_key, _fallback_warned
    env = os.environ if environ is None else environ

    ref = env.get(ENV_PROVIDER)
    if ref:
        try:
            return SigningKey(_load_provider(ref), "provider")
        except ProviderLoadFailure as exc:
            log.warning("evidence key provider failed, falling through: %s", exc)

    encoded = env.get(ENV_KEY)
    if encoded:
        try:
            material = base64.b64decode(encoded, validate=True)
            if material:
                return SigningKey(material, "env")
        except (binascii.Error, ValueError):
            pass
        log.warning("%s is not valid base64, falling through", ENV_KEY)

    with _fallback_lock:
        if _fallback_key is None:
            _fallback_key = secrets.token_bytes(32)
        if not _fallback_warned:
            _fallback_warned = True
            log.warning(
                "no evidence signing key configured; using a process-local random key. "
                "Chains written now will not verify in another process."
            )
        return SigningKey(_fallback_key, "ephemeral")


def _load_provider(ref: str) -> bytes:
    module_name, sep, attr = ref.partition(":")
    if not sep or not module_name or not attr:
        raise ProviderLoadFailure(f"expected module:function, got {ref!r}")
    try:
        fn = getattr(importlib.import_module(module_name), attr)
        material = fn()
    except Exception as exc:
        raise ProviderLoadFailure(f"{ref}: {exc}") from exc
    if isinstance(material, str):
        material = material.encode("utf-8")
    if not isinstance(material, (bytes, bytearray)) or not material:
        raise ProviderLoadFailure(f"{ref} returned no key material")
    return bytes(material)


# -- events ----------------------------------------------------------------


@dataclass(frozen=True)
class EvidenceEvent:
    tenant_id: str
    invocation_id: str
    seq: int
    kind: str
    payload: Any
    occurred_at: datetime
    prev_hash: bytes
    signed_hash: bytes
    sensitivity_tags: frozenset[str] = frozenset()
    actor_agent_key: str | None = None

    def body(self) -> dict[str, Any]:
        """Everything the signed hash covers."""
        return {
            "tenant_id": self.tenant_id,
            "invocation_id": self.invocation_id,
            "seq": self.seq,
            "kind": self.kind,
            "payload": self.payload,
            "occurred_at": self.occurred_at,
            "sensitivity_tags": self.sensitivity_tags,
            "actor_agent_key": self.actor_agent_key,
        }

    def to_record(self) -> dict[str, Any]:
        return {
            "tenant_id": self.tenant_id,
            "invocation_id": self.invocation_id,
            "seq": self.seq,
            "kind": self.kind,
            "payload": encode_tree(self.payload),
            "occurred_at": self.occurred_at.isoformat(),
            "prev_hash": self.prev_hash.hex(),
            "signed_hash": self.signed_hash.hex(),
            "sensitivity_tags": sorted(self.sensitivity_tags),
            "actor_agent_key": self.actor_agent_key,
        }

    def to_dict(self) -> dict[str, Any]:
        return self.to_record()

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "EvidenceEvent":
        return cls(
            tenant_id=rec["tenant_id"],
            invocation_id=rec["invocation_id"],
            seq=rec["seq"],
            kind=rec["kind"],
            payload=decode_tree(rec["payload"]),
            occurred_at=parse_timestamp(rec["occurred_at"]),
            prev_hash=bytes.fromhex(rec["prev_hash"]),
            signed_hash=bytes.fromhex(rec["signed_hash"]),
            sensitivity_tags=frozenset(rec["sensitivity_tags"]),
            actor_agent_key=rec["actor_agent_key"],
        )


def chain_seed(key: bytes, tenant: str, invocation: str) -> bytes:
    """h_{-1}: the domain tag bound to one chain's identifiers."""
    ids = canonical_bytes({"tenant_id": tenant, "invocation_id": invocation})
    return hmac.new(key, DOMAIN_TAG + b"\x00" + ids, hashlib.sha256).digest()


def compute_hash(key: bytes, prev_hash: bytes, body: Mapping[str, Any]) -> bytes:
    return hmac.new(key, prev_hash + canonical_bytes(dict(body)), hashlib.sha256).digest()


@dataclass(frozen=True)
class EventCheck:
    ok: bool
    status: str = VALID
    detail: str = ""


def verify_event(event: EvidenceEvent, predecessor: "EvidenceEvent | bytes", key: bytes) -> EventCheck:
    """O(1) check of one event against its predecessor (or the chain seed).

    Linkage is checked before content, so an overwritten prev_hash reads as a
    chain break rather than a payload tamper.
    """
    if isinstance(predecessor, EvidenceEvent):
        if event.seq != predecessor.seq + 1:
            return EventCheck(False, CHAIN_BREAK, f"seq {event.seq} follows {predecessor.seq}")
        expected_prev = predecessor.signed_hash
    else:
        expected_prev = predecessor
    if not hmac.compare_digest(event.prev_hash, expected_prev):
        return EventCheck(False, CHAIN_BREAK, "prev_hash does not match predecessor")
    if event.kind not in EVIDENCE_KINDS:
        return EventCheck(False, PAYLOAD_TAMPER, f"invalid kind {event.kind!r}")
    try:
        recomputed = compute_hash(key, event.prev_hash, event.body())
    except Exception as exc:  # an unencodable stored value is itself tampering
        return EventCheck(False, PAYLOAD_TAMPER, f"unencodable event: {exc}")
    if not hmac.compare_digest(recomputed, event.signed_hash):
        return EventCheck(False, PAYLOAD_TAMPER, "signed_hash does not match content")
    return EventCheck(True)


@dataclass(frozen=True)
class VerificationReport:
    status: str
    index: int | None = None
    detail: str = ""
    events: int = 0

    @property
    def ok(self) -> bool:
        return self.status in (VALID, CLEAN_CUT)

    def to_dict(self) -> dict[str, Any]:
        return {"status": self.status, "index": self.index, "detail": self.detail, "events": self.events}


@dataclass(frozen=True)
class RetentionPolicy:
    """Per-tenant regimes plus optional operator retention.

    The effective retention of an event is the largest of the regime floors
    implied by the tenant's regimes and the event's sensitivity tags and the
    operator's own retention. Operators can retain longer, never shorter.
    Events with no applicable retention at all are kept.
    """

    tenant_regimes: Mapping[str, Iterable[str]] = field(default_factory=dict)
    tenant_retention: Mapping[str, timedelta] = field(default_factory=dict)
    registry: RegimeRegistry | None = None

    def retention_for(self, tenant: str, tags: Iterable[str]) -> timedelta | None:
        registry = self.registry or default_registry()
        floor = registry.required_retention(self.tenant_regimes.get(tenant, ()), tags)
        chosen = max(floor, self.tenant_retention.get(tenant, timedelta(0)))
        return chosen if chosen > timedelta(0) else None


@dataclass(frozen=True)
class PruneResult:
    pruned: int
    cuts: list[dict[str, Any]]


class EvidenceLog:
    def __init__(self, storage: Storage, key: bytes | SigningKey | None = None):
        self.storage = storage
        if key is None:
            key = resolve_signing_key()
        self.key = key.material if isinstance(key, SigningKey) else key

    def seed(self, tenant: str, invocation: str) -> bytes:
        return chain_seed(self.key, tenant, invocation)

    def append(
        self,
        tenant: str,
        invocation: str,
        kind: str,
        payload: Any,
        tags: Iterable[str] = (),
        actor_agent_key: str | None = None,
        occurred_at: datetime | None = None,
        lock_timeout: float = 10.0,
    ) -> EvidenceEvent:
        if kind not in EVIDENCE_KINDS:
            raise InvalidEvidenceKind(kind)
        tags = frozenset(tags)
        unknown = tags - DATA_CLASSES
        if unknown:
            raise ValueError(f"unknown sensitivity tags {sorted(unknown)}")
        encode_tree(payload)  # reject unencodable payloads before locking

        def write() -> EvidenceEvent:
            head = self.storage.get("cut_ledger", (tenant, invocation)) or _empty_head(tenant, invocation)
            prev = bytes.fromhex(head["tail_hash"]) if head["tail_hash"] else self.seed(tenant, invocation)
            partial = EvidenceEvent(
                tenant_id=tenant,
                invocation_id=invocation,
                seq=head["next_seq"],
                kind=kind,
                payload=decode_tree(encode_tree(payload)),
                occurred_at=occurred_at or self.storage.now(),
                prev_hash=prev,
                signed_hash=b"",
                sensitivity_tags=tags,
                actor_agent_key=actor_agent_key,
            )
            event = _with_hash(partial, compute_hash(self.key, prev, partial.body()))
            self.storage.insert("evidence", (tenant, invocation, event.seq), event.to_record())
            head["next_seq"] = event.seq + 1
            head["tail_hash"] = event.signed_hash.hex()
            self.storage.put("cut_ledger", (tenant, invocation), head)
            return event

        try:
            return self.storage.with_chain_lock(tenant, invocation, write, timeout=lock_timeout)
        except LockTimeout as exc:
            raise LockUnavailable(tenant, invocation, lock_timeout) from exc

    def events(self, tenant: str, invocation: str) -> list[EvidenceEvent]:
        return [EvidenceEvent.from_record(v) for _, v in self.storage.scan("evidence", (tenant, invocation))]

    def invocations(self, tenant: str) -> list[str]:
        seen = {k[1] for k, _ in self.storage.scan("evidence", (tenant,))}
        seen |= {k[1] for k, _ in self.storage.scan("cut_ledger", (tenant,))}
        return sorted(seen)

    def verify_chain(self, tenant: str, invocation: str) -> VerificationReport:
        """O(n) walk over one chain, reporting the first failure."""
        rows = self.storage.scan("evidence", (tenant, invocation))
        head = self.storage.get("cut_ledger", (tenant, invocation))
        cut = head["cuts"][-1] if head and head.get("cuts") else None

        events: list[EvidenceEvent] = []
        for key, rec in rows:
            try:
                events.append(EvidenceEvent.from_record(rec))
            except Exception as exc:
                return VerificationReport(PAYLOAD_TAMPER, key[2], f"unreadable event: {exc}", len(rows))
        n = len(events)

        if not events:
            if head and head["next_seq"] > (cut["cut_seq"] if cut else 0):
                return VerificationReport(CHAIN_BREAK, head["next_seq"] - 1, "events missing from chain", 0)
            return VerificationReport(CLEAN_CUT if cut else VALID, cut["cut_seq"] if cut else None, "", 0)

        first = events[0]
        seed = self.seed(tenant, invocation)
        status = VALID
        index = None
        if first.seq == 0 and cut is None:
            predecessor: EvidenceEvent | bytes = seed
        elif cut is not None and _is_clean_cut(first, cut):
            predecessor = bytes.fromhex(cut["pruned_tail_hash"])
            status, index = CLEAN_CUT, first.seq
        else:
            return VerificationReport(CHAIN_BREAK, first.seq, "chain head does not link to the seed", n)

        for event in events:
            check = verify_event(event, predecessor, self.key)
            if not check.ok:
                return VerificationReport(check.status, event.seq, check.detail, n)
            predecessor = event

        last = events[-1]
        if head is None or head["next_seq"] != last.seq + 1 or head["tail_hash"] != last.signed_hash.hex():
            return VerificationReport(CHAIN_BREAK, last.seq + 1, "chain tail does not match the ledger head", n)
        detail = "prefix pruned under retention; remainder verifies" if status == CLEAN_CUT else ""
        return VerificationReport(status, index, detail, n)

    def prune_expired_evidence(self, now: datetime, policy: RetentionPolicy) -> PruneResult:
        """Remove the longest expired prefix of every chain, recording cuts."""
        pruned = 0
        cuts: list[dict[str, Any]] = []
        for tenant in self.storage.tenants("evidence"):
            for invocation in sorted({k[1] for k, _ in self.storage.scan("evidence", (tenant,))}):

                def prune_chain(tenant: str = tenant, invocation: str = invocation) -> tuple[int, dict | None]:
                    rows = self.storage.scan("evidence", (tenant, invocation))
                    doomed = []
                    for key, rec in rows:
                        keep_for = policy.retention_for(tenant, rec["sensitivity_tags"])
                        if keep_for is None or now - parse_timestamp(rec["occurred_at"]) <= keep_for:
                            break
                        doomed.append((key, rec))
                    if not doomed:
                        return 0, None
                    for key, _ in doomed:
                        self.storage.delete("evidence", key)
                    survivor = rows[len(doomed)][1] if len(doomed) < len(rows) else None
                    entry = {
                        "cut_seq": doomed[-1][1]["seq"] + 1,
                        "surviving_head_hash": survivor["signed_hash"] if survivor else None,
                        "pruned_tail_hash": doomed[-1][1]["signed_hash"],
                        "pruned_at": now.isoformat(),
                    }
                    head = self.storage.get("cut_ledger", (tenant, invocation)) or _empty_head(tenant, invocation)
                    head.setdefault("cuts", []).append(entry)
                    self.storage.put("cut_ledger", (tenant, invocation), head)
                    return len(doomed), dict(entry, tenant_id=tenant, invocation_id=invocation)

                count, entry = self.storage.with_chain_lock(tenant, invocation, prune_chain)
                pruned += count
                if entry:
                    cuts.append(entry)
        return PruneResult(pruned, cuts)


def _empty_head(tenant: str, invocation: str) -> dict[str, Any]:
    return {"tenant_id": tenant, "invocation_id": invocation, "next_seq": 0, "tail_hash": None, "cuts": []}


def _with_hash(event: EvidenceEvent, signed: bytes) -> EvidenceEvent:
    from dataclasses import replace

    return replace(event, signed_hash=signed)


def _is_clean_cut(first: EvidenceEvent, cut: Mapping[str, Any]) -> bool:
    if first.seq != cut["cut_seq"] or first.prev_hash.hex() != cut["pruned_tail_hash"]:
        return False
    survivor = cut.get("surviving_head_hash")
    return survivor is None or survivor == first.signed_hash.hex()
