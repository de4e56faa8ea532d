"""Regulatory regime registry, retention floors and breach-notice fan-out."""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timedelta
from functools import lru_cache
from importlib import resources
from typing import Any, Iterable

from .errors import UnknownRegime
from .storage import Storage

YEAR = timedelta(days=365)


@dataclass(frozen=True)
class Regime:
    id: str
    name: str
    retention_floor: timedelta
    breach_sla: timedelta | None
    tier_model: str | None
    notification_format: str | None
    severity_factor: float
    controls: tuple[str, ...] = ()
    note: str | None = None

    @property
    def retention_years(self) -> float:
        return self.retention_floor / YEAR


@dataclass(frozen=True)
class IncidentNotification:
    tenant_id: str
    incident_id: str
    regime: str
    due_at: datetime
    format: str
    emitted_at: datetime

    def to_dict(self) -> dict[str, Any]:
        return {
            "tenant_id": self.tenant_id,
            "incident_id": self.incident_id,
            "regime": self.regime,
            "due_at": self.due_at.isoformat(),
            "format": self.format,
            "emitted_at": self.emitted_at.isoformat(),
        }


class RegimeRegistry:
    def __init__(self, table: dict[str, Any]):
        self.regimes: dict[str, Regime] = {}
        for row in table["regimes"]:
            sla = row.get("breach_sla_hours")
            self.regimes[row["id"]] = Regime(
                id=row["id"],
                name=row["name"],
                retention_floor=YEAR * row["retention_years"],
                breach_sla=None if sla is None else timedelta(hours=sla),
                tier_model=row.get("tier_model"),
                notification_format=row.get("notification_format"),
                severity_factor=float(row.get("severity_factor", 1.0)),
                controls=tuple(row.get("controls", ())),
                note=row.get("note"),
            )
        self.class_implications: dict[str, frozenset[str]] = {
            k: frozenset(v) for k, v in table.get("class_implications", {}).items()
        }
        self._by_folded = {_fold(r.id): r.id for r in self.regimes.values()}
        self._by_folded.update({_fold(r.name): r.id for r in self.regimes.values()})
        for row in table["regimes"]:
            self._by_folded.update({_fold(a): row["id"] for a in row.get("aliases", ())})

    def __len__(self) -> int:
        return len(self.regimes)

    def normalize(self, regime: str) -> str:
        try:
            return self._by_folded[_fold(regime)]
        except (KeyError, TypeError, AttributeError):
            raise UnknownRegime(regime) from None

    def get(self, regime: str) -> Regime:
        return self.regimes[self.normalize(regime)]

    def applicable(self, regimes: Iterable[str], data_classes: Iterable[str] = ()) -> list[Regime]:
        """Declared regimes plus the ones implied by the data classes handled."""
        ids = {self.normalize(r) for r in regimes}
        for cls in data_classes:
            ids |= self.class_implications.get(cls, frozenset())
        return sorted((self.regimes[i] for i in ids), key=lambda r: r.id)

    def required_retention(self, regimes: Iterable[str], data_classes: Iterable[str] = ()) -> timedelta:
        """Largest floor across every applicable regime; zero when none apply."""
        floors = [r.retention_floor for r in self.applicable(regimes, data_classes)]
        return max(floors, default=timedelta(0))

    def severity_factor(self, regimes: Iterable[str]) -> float:
        return max((self.get(r).severity_factor for r in regimes), default=1.0)


def _fold(text: str) -> str:
    return "".join(ch for ch in text.upper() if ch.isalnum())


@lru_cache(maxsize=1)
def default_registry() -> RegimeRegistry:
    text = resources.files("fleetgov").joinpath("data/regimes.json").read_text(encoding="utf-8")
    return RegimeRegistry(json.loads(text))


def normalize_regime(regime: str) -> str:
    return default_registry().normalize(regime)


def required_retention(regimes: Iterable[str], data_classes: Iterable[str] = ()) -> timedelta:
    return default_registry().required_retention(regimes, data_classes)


@dataclass(frozen=True)
class ComplianceRow:
    regime: str
    retention: timedelta
    breach_sla: timedelta | None
    controls: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "regime": self.regime,
            "retention_years": round(self.retention / YEAR, 2),
            "breach_sla_hours": None if self.breach_sla is None else self.breach_sla / timedelta(hours=1),
            "controls": list(self.controls),
        }


def compliance_summary(defn, registry: RegimeRegistry | None = None) -> list[ComplianceRow]:
    registry = registry or default_registry()
    return [
        ComplianceRow(r.id, r.retention_floor, r.breach_sla, r.controls)
        for r in registry.applicable(defn.compliance_scope, defn.data_classes)
    ]


class BreachNotifier:
    """Idempotent multi-regime notification emitter.

    One row per (incident, regime); re-emitting an incident returns the rows
    already written instead of creating new ones.
    """

    def __init__(self, storage: Storage, registry: RegimeRegistry | None = None):
        self.storage = storage
        self.registry = registry or default_registry()

    def emit(
        self,
        tenant: str,
        incident_id: str,
        regimes: Iterable[str],
        data_classes: Iterable[str] = (),
        detected_at: datetime | None = None,
    ) -> list[IncidentNotification]:
        detected_at = detected_at or self.storage.now()
        emitted_at = self.storage.now()
        out = []
        for regime in self.registry.applicable(regimes, data_classes):
            if regime.breach_sla is None:
                continue
            fresh = {
                "tenant_id": tenant,
                "incident_id": incident_id,
                "regime": regime.id,
                "due_at": (detected_at + regime.breach_sla).isoformat(),
                "format": regime.notification_format or regime.id,
                "emitted_at": emitted_at.isoformat(),
            }
            row = self.storage.upsert(
                "breach_notifications", (tenant, incident_id, regime.id), lambda cur, fresh=fresh: cur or fresh
            )
            out.append(_notification(row))
        return out

    def list(self, tenant: str, incident_id: str | None = None) -> list[IncidentNotification]:
        prefix = (tenant,) if incident_id is None else (tenant, incident_id)
        return [_notification(v) for _, v in self.storage.scan("breach_notifications", prefix)]


def _notification(row: dict[str, Any]) -> IncidentNotification:
    return IncidentNotification(
        tenant_id=row["tenant_id"],
        incident_id=row["incident_id"],
        regime=row["regime"],
        due_at=datetime.fromisoformat(row["due_at"]),
        format=row["format"],
        emitted_at=datetime.fromisoformat(row["emitted_at"]),
    )
