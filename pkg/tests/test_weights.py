from __future__ import annotations

from decimal import Decimal

import pytest

from fleetgov.errors import NotPending, OverrideLoosensError, UnknownWeightKey
from fleetgov.weights import (
    FACTOR_DEFAULTS,
    SUGGESTION_BUMP,
    TenantWeights,
    WeightKey,
    WeightTable,
    coerce_value,
    factor_cap,
)

PII = WeightKey("factor_weight", "data_sensitivity.pii")
CRITICAL = WeightKey("bucket_threshold", "critical")
OFAC = WeightKey("data_class_multiplier", "ofac_lookup:us_classified")


@pytest.fixture
def weights(storage, evidence):
    return TenantWeights(storage, evidence)


def test_defaults_without_overrides(weights):
    assert weights.effective_weight("t1", PII) == FACTOR_DEFAULTS["data_sensitivity.pii"]
    assert weights.effective_weight("t1", CRITICAL) == 85


def test_platform_then_tenant_tighten(weights):
    weights.set_override(None, PII, 12)
    weights.set_override("t1", PII, 30)
    assert weights.effective_weight("t1", PII) == 30
    assert weights.effective_weight("t2", PII) == 12


def test_tenant_loosen_rejected(weights):
    weights.set_override(None, PII, 12)
    with pytest.raises(OverrideLoosensError) as info:
        weights.set_override("t1", PII, 5)
    assert "12" in str(info.value) and "5" in str(info.value)
    assert weights.effective_weight("t1", PII) == 12


def test_platform_may_lower(weights):
    weights.set_override(None, PII, 12)
    weights.set_override(None, PII, 10)
    assert weights.platform_value(PII) == 10


def test_lower_is_tighter_for_thresholds(weights):
    weights.set_override("t1", CRITICAL, 80)
    assert weights.effective_weight("t1", CRITICAL) == 80
    with pytest.raises(OverrideLoosensError):
        weights.set_override("t1", CRITICAL, 90)
    assert weights.table("t1").bucket_thresholds["critical"] == 80


def test_tenant_channel_never_relaxes(weights):
    weights.set_override("t1", PII, 30)
    weights.set_override("t1", PII, 20)  # still dominates platform, but the stored value keeps 30
    assert weights.effective_weight("t1", PII) == 30


def test_platform_raise_above_tenant_wins(weights):
    weights.set_override("t1", PII, 20)
    weights.set_override(None, PII, 25)
    assert weights.effective_weight("t1", PII) == 25


def test_platform_recommendation_reaches_every_tenant(weights):
    weights.set_override(None, PII, 18, channel="recommendation")
    assert weights.effective_weight("t9", PII) == 18


def test_multiplier_scope_is_decimal(weights):
    weights.set_override("t1", OFAC, "1.30", channel="recommendation")
    assert weights.effective_weight("t1", OFAC) == Decimal("1.30")
    assert weights.table("t1").data_class_multiplier("ofac_lookup", ["us_classified"]) == Decimal("1.30")


@pytest.mark.parametrize(
    "scope,value",
    [("data_class_multiplier", "0.9"), ("bucket_threshold", 0), ("bucket_threshold", 101), ("signal_delta", -1),
     ("factor_weight", 1.5), ("factor_weight", True), ("factor_weight", "abc")],
)
def test_bad_values(scope, value):
    with pytest.raises(ValueError):
        coerce_value(scope, value)


@pytest.mark.parametrize("text", ["factor_weight:nope", "colour:red", "data_class_multiplier:tool:gossip", "signal_delta:"])
def test_unknown_keys(text):
    with pytest.raises(UnknownWeightKey):
        WeightKey.parse(text)


def test_platform_channel_rejects_tenant(weights):
    with pytest.raises(ValueError):
        weights.set_override("t1", PII, 30, channel="platform")
    with pytest.raises(ValueError):
        weights.set_override(None, PII, 30, channel="tenant")


def test_every_accepted_write_is_audited(weights, evidence):
    weights.set_override("t1", PII, 20)
    weights.set_override("t1", PII, 25)
    with pytest.raises(OverrideLoosensError):
        weights.set_override("t1", PII, 1)
    assert len(weights.changes("t1")) == 2
    assert len(evidence.events("t1", "weight-changes")) == 2
    assert evidence.verify_chain("t1", "weight-changes").ok


def test_table_carries_tenant_overrides(weights):
    weights.set_override("t1", WeightKey("factor_weight", "base"), 9)
    assert weights.table("t1").factor("base") == 9
    assert weights.table("t2").factor("base") == FACTOR_DEFAULTS["base"]
    assert WeightTable.defaults().factor("base") == FACTOR_DEFAULTS["base"]


# -- suggestions -----------------------------------------------------------------

INCIDENT = {"incident_id": "inc-1", "agent_key": "a", "severity": "critical", "resolved": True,
            "fired_factors": ["data_sensitivity:pii", "governance.none", "not_a_factor"]}


def test_incident_proposes_pending_bumps(weights):
    out = weights.propose_from_incident("t1", INCIDENT)
    assert {s.key for s in out} == {"data_sensitivity.pii", "governance.none"}
    pii = next(s for s in out if s.key == "data_sensitivity.pii")
    assert pii.proposed == FACTOR_DEFAULTS["data_sensitivity.pii"] + SUGGESTION_BUMP
    assert all(s.status == "pending" for s in out)
    assert weights.effective_weight("t1", PII) == FACTOR_DEFAULTS["data_sensitivity.pii"]  # nothing applied


def test_bumps_respect_factor_caps(weights):
    key = "data_sensitivity.us_top_secret"
    out = weights.propose_from_incident("t1", dict(INCIDENT, fired_factors=[key]))
    cap = factor_cap(key)
    assert all(s.proposed <= cap for s in out)


def test_non_critical_or_open_incidents_ignored(weights):
    assert weights.propose_from_incident("t1", dict(INCIDENT, severity="high")) == []
    assert weights.propose_from_incident("t1", dict(INCIDENT, resolved=False)) == []


def test_proposal_idempotent(weights):
    a = weights.propose_from_incident("t1", INCIDENT)
    b = weights.propose_from_incident("t1", INCIDENT)
    assert [s.id for s in a] == [s.id for s in b]
    assert len(weights.suggestions("t1")) == 2


def test_approve_applies_and_records_reviewer(weights):
    sid = weights.propose_from_incident("t1", INCIDENT)[0].id
    change = weights.approve_suggestion("t1", sid, "alice")
    assert change["applied_by"] == "alice"
    assert weights.suggestions("t1", "approved")[0].reviewer == "alice"
    with pytest.raises(NotPending):
        weights.approve_suggestion("t1", sid, "alice")


def test_approve_needs_reviewer(weights):
    sid = weights.propose_from_incident("t1", INCIDENT)[0].id
    with pytest.raises(ValueError):
        weights.approve_suggestion("t1", sid, "")


def test_loosening_suggestion_stays_pending(weights):
    sid = next(s.id for s in weights.propose_from_incident("t1", INCIDENT) if s.key == "data_sensitivity.pii")
    weights.set_override(None, PII, 40)  # platform moves past the proposal
    with pytest.raises(OverrideLoosensError):
        weights.approve_suggestion("t1", sid, "alice")
    assert next(s for s in weights.suggestions("t1") if s.id == sid).status == "pending"


def test_reject_leaves_weights(weights):
    sid = weights.propose_from_incident("t1", INCIDENT)[0].id
    weights.reject_suggestion("t1", sid, "bob")
    assert weights.suggestions("t1", "rejected")[0].id == sid
    assert weights.changes("t1") == []
