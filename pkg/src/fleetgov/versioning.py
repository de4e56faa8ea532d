"""Append-only definition history, drift detection, lineage and signatures."""

from __future__ import annotations

import base64
import binascii
from collections import deque
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import TYPE_CHECKING, Any, Mapping

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .canonical import DefinitionHash, definition_hash, encode_tree, project
from .errors import DeclaredHashUnknown, MalformedSignature, UnknownMode, VersionNotFound
from .model import HASHED_FIELDS, HUMAN_LOOP_MODES, MODE_ALIASES, AgentDefinition, parse_timestamp, validate_definition
from .scoring import MAX_GRAPH_NODES, MAX_HOPS
from .storage import Storage

if TYPE_CHECKING:
    from .evidence import EvidenceLog

LINEAGE_INCREMENTS = {1: 8, 2: 4, 3: 2}
LINEAGE_FLOOR = 1
MODE_GAP_SHARE = 0.5
MODE_GAP_MIN_INVOCATIONS = 20


def _mode(value: str) -> str:
    mode = MODE_ALIASES.get(value, value) if isinstance(value, str) else value
    if mode not in HUMAN_LOOP_MODES:
        raise UnknownMode(value)
    return mode


@dataclass(frozen=True)
class VersionSnapshot:
    tenant_id: str
    agent_key: str
    version_no: int
    definition: AgentDefinition
    definition_hash: DefinitionHash
    occurred_at: datetime
    created_at: datetime
    parent_agent_key: str | None = None
    note: str = ""

    @property
    def ingest_lag(self) -> timedelta:
        """created_at - occurred_at: how long the change took to reach the store."""
        return self.created_at - self.occurred_at

    def to_record(self) -> dict[str, Any]:
        return {
            "tenant_id": self.tenant_id,
            "agent_key": self.agent_key,
            "version_no": self.version_no,
            "definition": self.definition.to_dict(),
            "definition_hash": self.definition_hash.hex(),
            "occurred_at": self.occurred_at.isoformat(),
            "created_at": self.created_at.isoformat(),
            "parent_agent_key": self.parent_agent_key,
            "note": self.note,
        }

    to_dict = to_record

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "VersionSnapshot":
        return cls(
            tenant_id=rec["tenant_id"],
            agent_key=rec["agent_key"],
            version_no=rec["version_no"],
            definition=validate_definition(rec["definition"]),
            definition_hash=DefinitionHash.from_hex(rec["definition_hash"]),
            occurred_at=parse_timestamp(rec["occurred_at"]),
            created_at=parse_timestamp(rec["created_at"]),
            parent_agent_key=rec.get("parent_agent_key"),
            note=rec.get("note", ""),
        )


@dataclass(frozen=True)
class DriftDiff:
    agent_key: str
    declared_hash: str
    current_hash: str
    changed_fields: tuple[str, ...]
    old: Mapping[str, Any]
    new: Mapping[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {
            "agent_key": self.agent_key,
            "declared_hash": self.declared_hash,
            "current_hash": self.current_hash,
            "changed_fields": list(self.changed_fields),
            "old": dict(self.old),
            "new": dict(self.new),
        }


def structural_diff(old: AgentDefinition, new: AgentDefinition) -> tuple[tuple[str, ...], dict, dict]:
    a, b = project(old), project(new)
    changed = tuple(name for name in HASHED_FIELDS if encode_tree(a[name]) != encode_tree(b[name]))
    to_json = lambda d: {n: d.to_dict()[n] for n in changed}  # noqa: E731
    return changed, to_json(old), to_json(new)


@dataclass(frozen=True)
class ModeDistribution:
    agent_key: str
    configured_mode: str | None
    total: int
    counts: Mapping[str, int]
    gap: bool

    def share(self, mode: str) -> float:
        return self.counts.get(mode, 0) / self.total if self.total else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "agent_key": self.agent_key,
            "configured_mode": self.configured_mode,
            "total": self.total,
            "counts": dict(sorted(self.counts.items())),
            "gap": self.gap,
        }


def propagate_lineage_elevation(
    parent_agent_key: str,
    lineage: Mapping[str, str | None],
    max_nodes: int = MAX_GRAPH_NODES,
    max_hops: int = MAX_HOPS,
) -> list[tuple[str, int]]:
    """Risk increments inherited by descendants of ``parent_agent_key``.

    ``lineage`` maps each agent to its parent (its ``extends`` field). The
    increment halves per generation and bottoms out at 1.
    """
    children: dict[str, list[str]] = {}
    for child, parent in lineage.items():
        if parent is not None:
            children.setdefault(parent, []).append(child)

    out = []
    seen = {parent_agent_key}
    queue = deque([(parent_agent_key, 0)])
    while queue and len(seen) < max_nodes:
        node, gen = queue.popleft()
        if gen >= max_hops:
            continue
        for child in sorted(children.get(node, ())):
            if child in seen:
                continue
            seen.add(child)
            out.append((child, LINEAGE_INCREMENTS.get(gen + 1, LINEAGE_FLOOR)))
            queue.append((child, gen + 1))
    return out


# -- signatures ----------------------------------------------------------------


def sign_definition(defn: AgentDefinition, private_key: Ed25519PrivateKey) -> bytes:
    return private_key.sign(definition_hash(defn).digest)


def _public_key(key: Ed25519PublicKey | bytes | str) -> Ed25519PublicKey:
    if isinstance(key, Ed25519PublicKey):
        return key
    if isinstance(key, str):
        key = base64.b64decode(key)
    return Ed25519PublicKey.from_public_bytes(key)


def _signature_bytes(signature: bytes | str) -> bytes:
    if isinstance(signature, str):
        try:
            signature = base64.b64decode(signature, validate=True)
        except (binascii.Error, ValueError):
            raise MalformedSignature("signature is not valid base64") from None
    if not isinstance(signature, (bytes, bytearray)) or len(signature) != 64:
        raise MalformedSignature("Ed25519 signatures are exactly 64 bytes")
    return bytes(signature)


class VersionStore:
    def __init__(self, storage: Storage, evidence: "EvidenceLog | None" = None):
        self.storage = storage
        self.evidence = evidence

    # -- snapshots ---------------------------------------------------------

    def snapshot(
        self,
        tenant: str,
        defn: AgentDefinition,
        occurred_at: datetime | None = None,
        parent: str | None = None,
        note: str = "",
    ) -> VersionSnapshot:
        with self.storage.transaction():
            created = self.storage.now()
            rows = self.storage.scan("versions", (tenant, defn.agent_key))
            version_no = (rows[-1][1]["version_no"] + 1) if rows else 1
            snap = VersionSnapshot(
                tenant_id=tenant,
                agent_key=defn.agent_key,
                version_no=version_no,
                definition=defn,
                definition_hash=definition_hash(defn),
                occurred_at=occurred_at or created,
                created_at=created,
                parent_agent_key=parent if parent is not None else defn.extends,
                note=note,
            )
            self.storage.insert("versions", (tenant, defn.agent_key, version_no), snap.to_record())
        return snap

    def history(self, tenant: str, agent_key: str) -> list[VersionSnapshot]:
        return [VersionSnapshot.from_record(v) for _, v in self.storage.scan("versions", (tenant, agent_key))]

    def get(self, tenant: str, agent_key: str, version_no: int) -> VersionSnapshot:
        rec = self.storage.get("versions", (tenant, agent_key, version_no))
        if rec is None:
            raise VersionNotFound(f"{agent_key} v{version_no}")
        return VersionSnapshot.from_record(rec)

    def latest(self, tenant: str, agent_key: str) -> VersionSnapshot | None:
        rows = self.storage.scan("versions", (tenant, agent_key))
        return VersionSnapshot.from_record(rows[-1][1]) if rows else None

    def agents(self, tenant: str) -> list[str]:
        return sorted({k[1] for k, _ in self.storage.scan("versions", (tenant,))})

    def find_by_hash(self, tenant: str, agent_key: str, digest: str) -> VersionSnapshot | None:
        for _, rec in self.storage.scan("versions", (tenant, agent_key)):
            if rec["definition_hash"] == digest:
                return VersionSnapshot.from_record(rec)
        return None

    def rollback_to(self, tenant: str, agent_key: str, version_no: int) -> VersionSnapshot:
        old = self.get(tenant, agent_key, version_no)
        return self.snapshot(tenant, old.definition, parent=old.parent_agent_key, note=f"rollback to v{version_no}")

    # -- drift -------------------------------------------------------------

    def detect_drift(self, tenant: str, declared_hash: str | DefinitionHash, current: AgentDefinition) -> DriftDiff | None:
        declared = declared_hash.hex() if isinstance(declared_hash, DefinitionHash) else declared_hash.lower()
        current_hash = definition_hash(current).hex()
        if current_hash == declared:
            return None
        base = self.find_by_hash(tenant, current.agent_key, declared)
        if base is None:
            raise DeclaredHashUnknown(f"no snapshot of {current.agent_key} has hash {declared}")
        changed, old, new = structural_diff(base.definition, current)
        diff = DriftDiff(current.agent_key, declared, current_hash, changed, old, new)
        if self.evidence is not None:
            self.evidence.append(
                tenant,
                f"drift:{current.agent_key}",
                "system_message",
                {"drift": True, **diff.to_dict()},
                actor_agent_key=current.agent_key,
            )
        return diff

    # -- exercised modes -----------------------------------------------------

    def record_invocation_mode(self, tenant: str, agent_key: str, configured_mode: str, exercised_mode: str) -> None:
        configured, exercised = _mode(configured_mode), _mode(exercised_mode)

        def merge(cur: dict[str, Any] | None) -> dict[str, Any]:
            row = cur or {"tenant_id": tenant, "agent_key": agent_key, "count": 0, "modes": {}}
            modes = dict(row["modes"])
            modes[exercised] = modes.get(exercised, 0) + 1
            return dict(row, count=row["count"] + 1, modes=modes, configured_mode=configured)

        self.storage.upsert("invocations", (tenant, agent_key), merge)

    def observations(self, tenant: str, agent_key: str) -> int:
        row = self.storage.get("invocations", (tenant, agent_key))
        return 0 if row is None else row["count"]

    def mode_distribution(
        self,
        tenant: str,
        agent_key: str,
        threshold: float = MODE_GAP_SHARE,
        min_invocations: int = MODE_GAP_MIN_INVOCATIONS,
    ) -> ModeDistribution:
        row = self.storage.get("invocations", (tenant, agent_key))
        if row is None:
            return ModeDistribution(agent_key, None, 0, {}, False)
        total, counts, configured = row["count"], row["modes"], row.get("configured_mode")
        share = counts.get(configured, 0) / total if total else 1.0
        gap = total >= min_invocations and share < threshold
        return ModeDistribution(agent_key, configured, total, counts, gap)

    # -- signatures ----------------------------------------------------------

    def verify_definition_signature(
        self,
        tenant: str,
        defn: AgentDefinition,
        signature: bytes | str,
        public_key: Ed25519PublicKey | bytes | str,
    ) -> bool:
        ok = verify_definition_signature(defn, signature, public_key)
        if ok and self.evidence is not None:
            self.evidence.append(
                tenant,
                f"signatures:{defn.agent_key}",
                "system_message",
                {"definition_signed": True, "agent_key": defn.agent_key, "definition_hash": definition_hash(defn).hex()},
                actor_agent_key=defn.agent_key,
            )
        return ok


def verify_definition_signature(
    defn: AgentDefinition, signature: bytes | str, public_key: Ed25519PublicKey | bytes | str
) -> bool:
    sig = _signature_bytes(signature)
    try:
        _public_key(public_key).verify(sig, definition_hash(defn).digest)
    except InvalidSignature:
        return False
    return True
