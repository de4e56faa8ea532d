from __future__ import annotations

import logging
from datetime import timedelta
from decimal import Decimal

import pytest
from hypothesis import given, settings, strategies as st

from fleetgov.errors import DuplicateCode, MultiplierBelowOne
from fleetgov.model import validate_definition
from fleetgov.scoring import (
    MAX_HOPS,
    DelegateObservation,
    InteractionRule,
    ScoringContext,
    apply_interactions,
    bucket_for_score,
    default_interactions,
    delegation_depth_of,
    delegation_trust_premium,
    register_interaction,
    score_agent,
)
from fleetgov.weights import WeightTable
from helpers import ABLATION, T0, ablation_definition

CTX = ScoringContext(now=T0)


@pytest.mark.parametrize("name", sorted(ABLATION))
def test_ablation_rows(name):
    s = score_agent(ablation_definition(name), context=CTX)
    assert (s.additive, s.additive_bucket, s.final, s.bucket, s.applied_multiplier) == ABLATION[name][1]


def test_decomposition_sums_to_additive():
    s = score_agent(ablation_definition("untrusted_chain_hil"), context=CTX)
    assert sum(f.delta for f in s.factors) == s.additive
    assert [f.name for f in s.factors][:3] == ["base", "write_tools", "admin_tools"]


def test_disable_interactions_returns_clamped_additive():
    s = score_agent(ablation_definition("autonomous_sql_shell"), disable_interactions=True, context=CTX)
    assert s.fired_codes == ()
    assert s.final == min(100, max(0, s.additive))
    assert s.applied_multiplier == 1


@pytest.mark.parametrize(
    "score,bucket", [(0, "low"), (29, "low"), (30, "medium"), (59, "medium"), (60, "high"), (84, "high"), (85, "critical"), (100, "critical")]
)
def test_bucket_edges(score, bucket):
    assert bucket_for_score(score) == bucket


def test_tightened_thresholds_consulted():
    assert bucket_for_score(80, {"medium": 30, "high": 60, "critical": 80}) == "critical"


def test_multiplier_capped_at_two():
    rules = [r for r in default_interactions() if r.code in ("code_exec_with_user_input", "classified_autonomous", "rejected_in_prod")]
    final, applied = apply_interactions(50, rules)
    assert applied == Decimal("2.0")
    assert final == 100


def test_round_half_even():
    rule = InteractionRule("x", "x", lambda d, f: True, Decimal("1.5"))
    assert apply_interactions(45, [rule])[0] == 68  # 67.5 -> 68
    assert apply_interactions(43, [rule])[0] == 64  # 64.5 -> 64


def test_registry_rejects_bad_rules():
    reg = default_interactions()
    with pytest.raises(MultiplierBelowOne):
        register_interaction(reg, "soft", "soft", lambda d, f: True, "0.9")
    with pytest.raises(DuplicateCode):
        register_interaction(reg, "untrusted_chain", "again", lambda d, f: True, "1.1")


def test_registry_is_copy_on_write():
    reg = default_interactions()
    bigger = register_interaction(reg, "always", "always", lambda d, f: True, "1.1")
    assert "always" in bigger and "always" not in reg
    assert len(reg) == 10


def test_broken_predicate_does_not_break_scoring(caplog):
    def boom(d, f):
        raise RuntimeError("bad rule")

    reg = register_interaction(default_interactions(), "broken", "broken", boom, "1.5")
    with caplog.at_level(logging.WARNING):
        s = score_agent(ablation_definition("benign_readonly_hil"), registry=reg, context=CTX)
    assert s.final == 34
    assert "broken" in caplog.text


def test_depth_chain_and_cycle():
    graph = {"a": ["b"], "b": ["c"], "c": []}
    assert delegation_depth_of(graph, "a").depth == 2
    cyc = delegation_depth_of({"a": ["b"], "b": ["a"]}, "a")
    assert cyc.truncated and cyc.depth == MAX_HOPS


def test_depth_handles_long_chains_without_recursion():
    graph = {f"n{i}": [f"n{i + 1}"] for i in range(3000)}
    r = delegation_depth_of(graph, "n0")
    assert r.depth == MAX_HOPS and r.truncated


def test_depth_node_cap():
    graph = {"root": [f"c{i}" for i in range(100)]}
    assert delegation_depth_of(graph, "root", max_nodes=10).truncated


def test_premium_respects_observation_gate():
    new = [DelegateObservation("x", "critical", 0), DelegateObservation("y", "high", 9)]
    assert delegation_trust_premium(new).delta == 0
    seasoned = [DelegateObservation("x", "critical", 10), DelegateObservation("y", "medium", 50)]
    assert delegation_trust_premium(seasoned).delta == 8


def test_premium_only_counts_declared_delegates():
    d = validate_definition({"agent_key": "o", "can_delegate_to": ["x"]})
    ctx = ScoringContext(now=T0, delegates=[DelegateObservation("x", "high", 20), DelegateObservation("z", "high", 20)])
    assert score_agent(d, context=ctx).factor("delegation_premium").delta == 8


def test_expired_review_scored_as_expired():
    d = ablation_definition("benign_readonly_hil").replace(review_expires_at=T0 - timedelta(days=1))
    assert score_agent(d, context=CTX).factor("lifecycle").weight_keys[0] == "approval.expired"


def test_old_audit_credit_halves():
    d = ablation_definition("benign_readonly_hil")
    fresh = score_agent(d, context=CTX).factor("trust_signals").delta
    stale = score_agent(d, context=ScoringContext(now=T0 + timedelta(days=400))).factor("trust_signals").delta
    assert (fresh, stale) == (-2, -1)


def test_tenant_weights_change_score():
    d = ablation_definition("benign_readonly_hil")
    w = WeightTable({("factor_weight", "base"): 15})
    assert score_agent(d, weights=w, context=CTX).additive == 44


def test_catalog_marks_admin_tools():
    d = validate_definition({"agent_key": "a", "tools": ["rotate_keys"]})
    ctx = ScoringContext(now=T0, tool_catalog={"rotate_keys": ["admin"]})
    s = score_agent(d, context=ctx)
    assert s.factor("admin_tools").delta == 8
    assert s.factor("write_tools").delta == 4


def test_unknown_blast_component_warns_not_raises():
    d = validate_definition({"agent_key": "a", "blast_radius_components": ["mystery"]})
    assert score_agent(d, context=CTX).factor("blast_radius").warning


def test_lineage_increment_is_a_transient_factor():
    d = ablation_definition("benign_readonly_hil")
    s = score_agent(d, context=ScoringContext(now=T0, lineage_increment=8))
    assert s.factor("lineage").delta == 8 and s.additive == 42


defs = st.fixed_dictionaries(
    {"agent_key": st.just("p")},
    optional={
        "human_loop": st.sampled_from(["in_loop", "on_loop", "hybrid", "none"]),
        "access_level": st.sampled_from(["read", "write", "admin"]),
        "data_classes": st.lists(st.sampled_from(["pii", "phi", "financial", "us_classified", "public"]), unique=True),
        "security_caps": st.lists(st.sampled_from(["code_execution", "shell_access", "network_egress"]), unique=True),
        "provenance": st.sampled_from(["builtin", "custom", "marketplace", "third_party"]),
        "deployment_env": st.sampled_from(["dev", "staging", "prod", "enclave"]),
        "input_sources": st.lists(st.sampled_from(["internal", "email", "web_fetch", "user_upload", "unknown"]), unique=True),
        "can_override": st.booleans(),
        "owner": st.none() | st.just("ops"),
    },
)


@settings(max_examples=200, deadline=None)
@given(defs)
def test_score_always_in_range_and_consistent(raw):
    try:
        d = validate_definition(raw)
    except ValueError:
        return
    s = score_agent(d, context=CTX)
    assert 0 <= s.final <= 100
    assert 1 <= s.applied_multiplier <= 2
    assert s.final >= min(100, max(0, s.additive))
