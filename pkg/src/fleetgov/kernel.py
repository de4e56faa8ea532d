"""One object wiring every service to a shared store and evidence key."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from .compliance import BreachNotifier, RegimeRegistry, default_registry
from .evidence import EvidenceLog, SigningKey
from .inbound import InboundPipeline
from .storage import Clock, Storage, open_storage
from .trust import TrustService
from .versioning import VersionStore
from .weights import TenantWeights


@dataclass
class Kernel:
    storage: Storage
    evidence: EvidenceLog
    weights: TenantWeights
    trust: TrustService
    versions: VersionStore
    notifier: BreachNotifier
    registry: RegimeRegistry

    @classmethod
    def open(
        cls,
        data_dir: str | Path | None = None,
        key: bytes | SigningKey | None = None,
        clock: Clock | None = None,
        attribution: bool = True,
    ) -> "Kernel":
        storage = open_storage(data_dir, clock)
        evidence = EvidenceLog(storage, key)
        weights = TenantWeights(storage, evidence)
        registry = default_registry()
        return cls(
            storage=storage,
            evidence=evidence,
            weights=weights,
            trust=TrustService(storage, evidence, weights, attribution=attribution),
            versions=VersionStore(storage, evidence),
            notifier=BreachNotifier(storage, registry),
            registry=registry,
        )

    def inbound(
        self,
        anchors: Mapping[str, Ed25519PublicKey] | None = None,
        auto_apply_allowlist: Iterable[tuple[str, str]] = (),
    ) -> InboundPipeline:
        return InboundPipeline(self.storage, self.weights, anchors, auto_apply_allowlist, self.evidence)

    def close(self) -> None:
        self.storage.close()
