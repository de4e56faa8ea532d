"""Static risk scoring.

``score_agent`` sums independent factor deltas into an additive score, then
applies the product of every fired interaction multiplier (capped at 2.0),
rounds half-to-even and clamps to [0, 100]. The full per-factor breakdown
and the fired interaction codes are returned with the score.

Scoring is fail-soft: a factor that cannot be computed from a malformed
optional field contributes a fallback delta and a warning instead of
raising.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Callable, Iterable, Mapping, Sequence

from .compliance import RegimeRegistry, default_registry as default_regimes
from .errors import DuplicateCode, MultiplierBelowOne
from .model import (
    CLASSIFIED_DATA_CLASSES,
    CODE_EXEC_CAPS,
    PERSONAL_DATA_CLASSES,
    USER_INPUT_SOURCES,
    AgentDefinition,
)
from .weights import FACTOR_CAPS, WeightTable

log = logging.getLogger(__name__)

MAX_MULTIPLIER = Decimal("2.0")
BUCKETS = ("low", "medium", "high", "critical")
BUCKET_RANK = {b: i for i, b in enumerate(BUCKETS)}

WRITE_PREFIXES = (
    "create_",
    "delete_",
    "update_",
    "override_",
    "revert_",
    "ingest_",
    "execute_",
    "publish_",
    "ack_",
    "suspend_",
    "remove_",
    "write_",
    "insert_",
    "drop_",
    "modify_",
    "set_",
    "send_",
    "approve_",
    "transfer_",
    "flag_",
)

# Traversal hard caps for delegation graphs.
MAX_GRAPH_NODES = 5000
MAX_HOPS = 50
MAX_PATHS = 50

OBSERVATION_GATE = 10
AUDIT_HALF_LIFE = timedelta(days=180)
BRAND_NEW = timedelta(days=7)
CHURN_VERSIONS = 20
HOURS_PER_MONTH = Decimal(730)
COST_BURST_FACTOR = Decimal(5)


def round_half_even(value: Decimal) -> int:
    return int(value.quantize(Decimal(1), rounding=ROUND_HALF_EVEN))


def clamp(value: int, lo: int = 0, hi: int = 100) -> int:
    return max(lo, min(hi, value))


@dataclass(frozen=True)
class RiskFactor:
    name: str
    label: str
    delta: int
    weight_keys: tuple[str, ...] = ()
    warning: str | None = None

    def to_dict(self) -> dict:
        out = {"name": self.name, "label": self.label, "delta": self.delta}
        if self.weight_keys:
            out["weight_keys"] = list(self.weight_keys)
        if self.warning:
            out["warning"] = self.warning
        return out


@dataclass(frozen=True)
class DelegateObservation:
    agent_key: str
    bucket: str
    observations: int


@dataclass(frozen=True)
class DepthResult:
    depth: int
    truncated: bool
    nodes_visited: int


@dataclass(frozen=True)
class ScoringContext:
    """Inputs beyond the definition itself. Every field is optional."""

    now: datetime | None = None
    tool_catalog: Mapping[str, Iterable[str]] = field(default_factory=dict)
    delegation_graph: Mapping[str, Sequence[str]] = field(default_factory=dict)
    delegates: Sequence[DelegateObservation] = ()
    lineage_increment: int = 0
    regimes: RegimeRegistry | None = None


@dataclass(frozen=True)
class AgentRiskScore:
    agent_key: str
    additive: int
    additive_bucket: str
    fired_codes: tuple[str, ...]
    applied_multiplier: Decimal
    final: int
    bucket: str
    factors: tuple[RiskFactor, ...]

    def factor(self, name: str) -> RiskFactor | None:
        return next((f for f in self.factors if f.name == name), None)

    def weight_keys(self) -> list[str]:
        """Schedule keys of every factor that contributed a positive delta."""
        return [k for f in self.factors if f.delta > 0 for k in f.weight_keys]

    def to_dict(self) -> dict:
        return {
            "agent_key": self.agent_key,
            "additive": self.additive,
            "additive_bucket": self.additive_bucket,
            "fired_codes": list(self.fired_codes),
            "applied_multiplier": f"{self.applied_multiplier:.2f}",
            "final": self.final,
            "bucket": self.bucket,
            "factors": [f.to_dict() for f in self.factors],
        }


# -- buckets ---------------------------------------------------------------


def bucket_for_score(score: int, thresholds: Mapping[str, int] | None = None) -> str:
    t = thresholds or {"medium": 30, "high": 60, "critical": 85}
    if score >= t["critical"]:
        return "critical"
    if score >= t["high"]:
        return "high"
    if score >= t["medium"]:
        return "medium"
    return "low"


# -- interactions ----------------------------------------------------------

Condition = Callable[[AgentDefinition, Sequence[RiskFactor]], bool]


@dataclass(frozen=True)
class InteractionRule:
    code: str
    name: str
    condition: Condition = field(compare=False)
    multiplier: Decimal
    description: str = ""
    severity: str = "warning"

    def __post_init__(self) -> None:
        object.__setattr__(self, "multiplier", Decimal(str(self.multiplier)))
        if self.severity not in ("warning", "critical"):
            raise ValueError(f"severity must be warning or critical, not {self.severity!r}")


class InteractionRegistry:
    """Ordered, copy-on-write set of interaction rules keyed by code."""

    def __init__(self, rules: Iterable[InteractionRule] = ()):
        self._rules: tuple[InteractionRule, ...] = ()
        for rule in rules:
            self._rules = self._with(rule)

    def _with(self, rule: InteractionRule) -> tuple[InteractionRule, ...]:
        if rule.multiplier < 1:
            raise MultiplierBelowOne(rule.code, rule.multiplier)
        if any(r.code == rule.code for r in self._rules):
            raise DuplicateCode(rule.code)
        return self._rules + (rule,)

    def register(self, rule: InteractionRule) -> "InteractionRegistry":
        out = InteractionRegistry()
        out._rules = self._with(rule)
        return out

    def __iter__(self):
        return iter(self._rules)

    def __len__(self) -> int:
        return len(self._rules)

    def __contains__(self, code: object) -> bool:
        return any(r.code == code for r in self._rules)

    def get(self, code: str) -> InteractionRule:
        for r in self._rules:
            if r.code == code:
                return r
        raise KeyError(code)

    def fired(self, defn: AgentDefinition, factors: Sequence[RiskFactor]) -> list[InteractionRule]:
        out = []
        for rule in self._rules:
            try:
                if rule.condition(defn, factors):
                    out.append(rule)
            except Exception as exc:  # a broken predicate never breaks scoring
                log.warning("interaction %s predicate failed: %s", rule.code, exc)
        return out


def register_interaction(
    registry: InteractionRegistry,
    code: str,
    name: str,
    condition: Condition,
    multiplier: Decimal | float | str,
    description: str = "",
    severity: str = "warning",
) -> InteractionRegistry:
    return registry.register(InteractionRule(code, name, condition, Decimal(str(multiplier)), description, severity))


def apply_interactions(additive: int, fired: Iterable[InteractionRule]) -> tuple[int, Decimal]:
    product = Decimal(1)
    for rule in fired:
        product *= rule.multiplier
    applied = min(MAX_MULTIPLIER, product)
    return clamp(round_half_even(Decimal(additive) * applied)), applied


def _in_prod(d: AgentDefinition) -> bool:
    return d.deployment_env in ("prod", "enclave")


def _has_factor_key(factors: Sequence[RiskFactor], key: str) -> bool:
    return any(key in f.weight_keys for f in factors)


def _write_capable(d: AgentDefinition, factors: Sequence[RiskFactor]) -> bool:
    return d.writes or any(f.name == "write_tools" and f.delta > 0 for f in factors)


def _builtin_rules() -> list[InteractionRule]:
    D = Decimal
    return [
        InteractionRule(
            "autonomous_writer_in_prod",
            "Autonomous writer in production",
            lambda d, f: d.human_loop == "none" and _write_capable(d, f) and _in_prod(d),
            D("1.3"),
            "Write capability with no human oversight in a production environment.",
            "critical",
        ),
        InteractionRule(
            "code_exec_with_user_input",
            "Code execution fed by user-controlled input",
            lambda d, f: bool(d.security_caps & CODE_EXEC_CAPS) and bool(d.input_sources & USER_INPUT_SOURCES),
            D("1.5"),
            "Prompt injection through user input reaches a code-execution capability.",
            "critical",
        ),
        InteractionRule(
            "classified_autonomous",
            "Classified data without human oversight",
            lambda d, f: bool(d.data_classes & CLASSIFIED_DATA_CLASSES) and d.human_loop == "none",
            D("1.4"),
            "Classified material handled with no effective human oversight.",
            "critical",
        ),
        InteractionRule(
            "untrusted_chain",
            "Untrusted agent fanning out",
            lambda d, f: d.provenance in ("marketplace", "third_party") and len(d.can_delegate_to) >= 3,
            D("1.2"),
            "Agent of untrusted provenance delegating to three or more agents.",
            "warning",
        ),
        InteractionRule(
            "unaudited_classified",
            "Classified data with no audit evidence",
            lambda d, f: bool(d.data_classes & CLASSIFIED_DATA_CLASSES)
            and not any(a.kind in ("red_team", "fairness") for a in d.audits),
            D("1.25"),
            "Classified data handled without red-team or fairness audit evidence on file.",
            "critical",
        ),
        InteractionRule(
            "rejected_in_prod",
            "Rejected agent running in production",
            lambda d, f: _in_prod(d) and _has_factor_key(f, "approval.rejected"),
            D("1.4"),
            "Security review rejected the agent but it is deployed to production.",
            "critical",
        ),
        InteractionRule(
            "orphan_writer_in_prod",
            "Unowned writer in production",
            lambda d, f: d.owner is None and _write_capable(d, f) and _in_prod(d),
            D("1.2"),
            "No accountable owner for a production agent with write capability.",
            "warning",
        ),
        InteractionRule(
            "prod_marketplace_writer",
            "Marketplace writer in production",
            lambda d, f: d.provenance == "marketplace" and _write_capable(d, f) and _in_prod(d),
            D("1.2"),
            "Marketplace-sourced agent with write capability in production.",
            "warning",
        ),
        InteractionRule(
            "self_hosted_with_pii",
            "Self-hosted model on personal data",
            lambda d, f: d.model_trust == "self_hosted" and bool(d.data_classes & PERSONAL_DATA_CLASSES),
            D("1.2"),
            "Personal data processed by a self-hosted model outside vendor controls.",
            "warning",
        ),
        InteractionRule(
            "unowned_high_risk",
            "Unowned high-risk agent",
            lambda d, f: d.owner is None and sum(x.delta for x in f) >= 60,
            D("1.15"),
            "High additive risk with no accountable owner.",
            "warning",
        ),
    ]


_DEFAULT_REGISTRY = InteractionRegistry(_builtin_rules())


def default_interactions() -> InteractionRegistry:
    return _DEFAULT_REGISTRY


# -- factor functions ------------------------------------------------------


def _capped(name: str, label: str, raw: int, keys: Iterable[str] = ()) -> RiskFactor:
    cap = FACTOR_CAPS.get(name)
    delta = raw if cap is None else min(raw, cap)
    return RiskFactor(name, label, delta, tuple(keys))


def data_sensitivity_delta(classes: Iterable[str], weights: WeightTable | None = None) -> RiskFactor:
    w = weights or WeightTable.defaults()
    best, best_key = 0, None
    for cls in sorted(classes):
        v = w.factor(f"data_sensitivity.{cls}")
        if best_key is None or v > best:
            best, best_key = v, f"data_sensitivity.{cls}"
    return _capped("data_sensitivity", "Data sensitivity (max)", best, [best_key] if best_key else [])


def security_caps_delta(caps: Iterable[str], weights: WeightTable | None = None) -> RiskFactor:
    w = weights or WeightTable.defaults()
    keys = [f"security_caps.{c}" for c in sorted(caps)]
    return _capped("security_caps", "Security capabilities (sum)", sum(w.factor(k) for k in keys), keys)


def delegation_depth_of(
    graph: Mapping[str, Sequence[str]],
    agent: str,
    max_nodes: int = MAX_GRAPH_NODES,
    max_hops: int = MAX_HOPS,
) -> DepthResult:
    """Longest delegation chain (in hops) reachable from ``agent``.

    A cycle makes the chain unbounded; it is reported as the hop cap with
    the truncation flag set. Hitting the node or hop cap also truncates.
    """
    memo: dict[str, int] = {}
    on_path: set[str] = set()
    truncated = False
    visited = 0

    # iterative post-order DFS so deep chains never hit the recursion limit
    stack: list[tuple[str, int]] = [(agent, 0)]
    while stack:
        node, state = stack.pop()
        if state == 0:
            if node in memo:
                continue
            if visited >= max_nodes:
                truncated = True
                memo[node] = 0
                continue
            visited += 1
            on_path.add(node)
            stack.append((node, 1))
            for child in graph.get(node, ()):
                if child in on_path:
                    truncated = True
                    memo[node] = max_hops
                elif child not in memo:
                    stack.append((child, 0))
        else:
            on_path.discard(node)
            best = memo.get(node, 0)
            for child in graph.get(node, ()):
                best = max(best, 1 + memo.get(child, max_hops if child in on_path else 0))
            if best > max_hops:
                truncated = True
                best = max_hops
            memo[node] = best
    return DepthResult(memo.get(agent, 0), truncated, visited)


def delegation_depth(
    graph: Mapping[str, Sequence[str]], agent: str, weights: WeightTable | None = None
) -> tuple[RiskFactor, DepthResult]:
    w = weights or WeightTable.defaults()
    result = delegation_depth_of(graph, agent)
    factor = _capped("delegation", "Delegation depth", w.factor("delegation.per_hop") * result.depth, ["delegation.per_hop"])
    if result.truncated:
        factor = RiskFactor(factor.name, factor.label, factor.delta, factor.weight_keys, "traversal truncated")
    return factor, result


def delegation_trust_premium(
    delegates: Iterable[DelegateObservation | tuple[str, str, int]],
    weights: WeightTable | None = None,
    gate: int = OBSERVATION_GATE,
) -> RiskFactor:
    """Premium for delegating to observed high-risk agents.

    Unobserved delegates (below the gate) contribute nothing, so a fleet
    of brand-new sub-agents cannot trigger it.
    """
    w = weights or WeightTable.defaults()
    per = w.factor("delegation_premium.per_delegate")
    total = 0
    for d in delegates:
        d = d if isinstance(d, DelegateObservation) else DelegateObservation(*d)
        if d.observations >= gate and BUCKET_RANK.get(d.bucket, 0) >= BUCKET_RANK["high"]:
            total += per
    return _capped("delegation_premium", "Delegation-trust premium", total, ["delegation_premium.per_delegate"])


def _is_write_tool(tool: str, catalog: Mapping[str, Iterable[str]]) -> bool:
    return tool.startswith(WRITE_PREFIXES) or bool(list(catalog.get(tool, ())))


def _is_admin_tool(tool: str, catalog: Mapping[str, Iterable[str]]) -> bool:
    return "admin" in set(catalog.get(tool, ()))


def _effective_approval(d: AgentDefinition, now: datetime) -> str:
    if d.approval_status == "approved" and d.review_expires_at is not None and d.review_expires_at < now:
        return "expired"
    return d.approval_status


def _lifecycle(d: AgentDefinition, w: WeightTable, now: datetime) -> RiskFactor:
    status = _effective_approval(d, now)
    keys = [f"approval.{status}"]
    total = w.factor(keys[0])
    if d.created_at is not None and now - d.created_at < BRAND_NEW:
        keys.append("lifecycle.brand_new")
        total += w.factor("lifecycle.brand_new")
    if d.version_count_30d >= CHURN_VERSIONS:
        keys.append("lifecycle.churn")
        total += w.factor("lifecycle.churn")
    if d.owner is None:
        keys.append("lifecycle.unowned")
        total += w.factor("lifecycle.unowned")
    return RiskFactor("lifecycle", f"Lifecycle (approval {status})", total, tuple(keys))


def _trust_signals(d: AgentDefinition, w: WeightTable, now: datetime) -> RiskFactor:
    if not d.audits:
        return RiskFactor("trust_signals", "No audit evidence on file", w.factor("audit.untested"), ("audit.untested",))
    latest: dict[str, datetime] = {}
    for a in d.audits:
        if a.kind not in latest or a.at > latest[a.kind]:
            latest[a.kind] = a.at
    total = 0
    keys = []
    for kind in sorted(latest):
        credit = Decimal(w.factor(f"audit.{kind}"))
        if now - latest[kind] > AUDIT_HALF_LIFE:
            credit /= 2
        total += round_half_even(credit)
        keys.append(f"audit.{kind}")
    return RiskFactor("trust_signals", "Audit evidence credits", total, tuple(keys))


def _cost_burn(d: AgentDefinition, w: WeightTable) -> RiskFactor:
    total, keys = 0, []
    hourly_avg = d.monthly_cost_avg / HOURS_PER_MONTH
    if d.monthly_cost_avg > 0 and d.hourly_cost_peak > COST_BURST_FACTOR * hourly_avg:
        total += w.factor("cost.burst")
        keys.append("cost.burst")
    budget = d.monthly_budget
    if budget is not None and d.monthly_cost_avg >= budget and (budget > 0 or d.monthly_cost_avg > 0):
        total += w.factor("cost.budget_exhausted")
        keys.append("cost.budget_exhausted")
    return RiskFactor("cost_burn", "Cost-burn anomaly", total, tuple(keys))


def _blast_radius(d: AgentDefinition, w: WeightTable) -> RiskFactor:
    total, keys, unknown = 0, [], []
    for comp in d.blast_radius_components:
        if comp == "multi_tenant":
            total += w.factor("blast_radius.multi_tenant")
            keys.append("blast_radius.multi_tenant")
        elif comp.startswith("downstream_write:"):
            total += w.factor("blast_radius.downstream_write")
            keys.append("blast_radius.downstream_write")
        else:
            unknown.append(comp)
    factor = _capped("blast_radius", "Blast radius (sum)", total, dict.fromkeys(keys))
    if unknown:
        factor = RiskFactor(factor.name, factor.label, factor.delta, factor.weight_keys, f"unrecognised components {unknown}")
    return factor


def _factors(d: AgentDefinition, w: WeightTable, ctx: ScoringContext, now: datetime) -> list[RiskFactor]:
    """Every factor, in decomposition order, each computed fail-soft."""
    catalog = ctx.tool_catalog
    out: list[RiskFactor] = []

    def add(name: str, fn: Callable[[], RiskFactor], fallback_key: str | None = None) -> None:
        try:
            out.append(fn())
        except Exception as exc:
            delta = w.factor(fallback_key) if fallback_key else 0
            log.warning("factor %s fell back for %s: %s", name, d.agent_key, exc)
            out.append(RiskFactor(name, f"{name} (unscorable)", delta, (fallback_key,) if fallback_key else (), str(exc)))

    def write_tools() -> RiskFactor:
        n = sum(1 for t in d.tools if _is_write_tool(t, catalog))
        return RiskFactor("write_tools", f"{n} write tool(s)", n * w.factor("write_tool"), ("write_tool",) * bool(n))

    def admin_tools() -> RiskFactor:
        n = sum(1 for t in d.tools if _is_admin_tool(t, catalog))
        return RiskFactor("admin_tools", f"{n} admin-gated tool(s)", n * w.factor("admin_tool"), ("admin_tool",) * bool(n))

    def flag(name: str, on: bool) -> Callable[[], RiskFactor]:
        return lambda: RiskFactor(name, name, w.factor(name) if on else 0, (name,) if on else ())

    def pick(name: str, label: str, key: str) -> Callable[[], RiskFactor]:
        return lambda: _capped(name, label, w.factor(key), [key])

    def supply_chain() -> RiskFactor:
        keys = [f"supply_chain.{k}" for k in sorted(d.supply_chain)]
        if d.dependency_count > 5:
            keys.append("supply_chain.breadth")
        return _capped("supply_chain", "Supply chain (sum + breadth)", sum(w.factor(k) for k in keys), keys)

    def input_sources() -> RiskFactor:
        keys = [f"input_sources.{s}" for s in sorted(d.input_sources)]
        if len(d.input_sources) >= 3:
            keys.append("input_sources.breadth")
        return _capped("input_sources", "Input sources (sum + breadth)", sum(w.factor(k) for k in keys), keys)

    def depth() -> RiskFactor:
        graph = dict(ctx.delegation_graph)
        graph[d.agent_key] = tuple(d.can_delegate_to)
        return delegation_depth(graph, d.agent_key, w)[0]

    add("base", lambda: RiskFactor("base", "Base score", w.factor("base"), ("base",)))
    add("write_tools", write_tools)
    add("admin_tools", admin_tools)
    add("governance", pick("governance", f"Governance mode {d.human_loop}", f"governance.{d.human_loop}"))
    add("can_override", flag("can_override", d.can_override))
    add("can_revert", flag("can_revert", d.can_revert))
    add("access", pick("access", f"Access level {d.access_level}", f"access.{d.access_level}"))
    add("data_sensitivity", lambda: data_sensitivity_delta(d.data_classes, w))
    add("security_caps", lambda: security_caps_delta(d.security_caps, w))
    add("provenance", pick("provenance", f"Provenance {d.provenance}", f"provenance.{d.provenance}"))
    add("model_trust", pick("model_trust", f"Model trust {d.model_trust}", f"model_trust.{d.model_trust}"))
    add("blast_radius", lambda: _blast_radius(d, w))
    add("deployment", pick("deployment", f"Deployment {d.deployment_env}", f"deployment.{d.deployment_env}"))
    add("delegation", depth)
    add("supply_chain", supply_chain)
    add("input_sources", input_sources, "input_sources.unknown")
    add("lifecycle", lambda: _lifecycle(d, w, now), "approval.unknown")

    def compliance() -> RiskFactor:
        registry = ctx.regimes or default_regimes()
        regimes = registry.applicable(d.compliance_scope, d.data_classes)
        if not regimes:
            return RiskFactor("compliance", "No regulatory scope", 0)
        top = max(regimes, key=lambda r: (r.severity_factor, r.id))
        partial = sum(f.delta for f in out)
        delta = round_half_even(Decimal(partial) * (Decimal(str(top.severity_factor)) - 1))
        return RiskFactor("compliance", f"Regulatory severity {top.id} x{top.severity_factor}", delta)

    add("compliance", compliance)
    add("trust_signals", lambda: _trust_signals(d, w, now))
    add("cost_burn", lambda: _cost_burn(d, w))
    add("delegation_premium", lambda: delegation_trust_premium(
        [x for x in ctx.delegates if x.agent_key in d.can_delegate_to], w))
    if ctx.lineage_increment:
        add("lineage", lambda: RiskFactor("lineage", "Inherited lineage elevation", int(ctx.lineage_increment)))
    return out


def score_agent(
    defn: AgentDefinition,
    weights: WeightTable | None = None,
    registry: InteractionRegistry | None = None,
    disable_interactions: bool = False,
    context: ScoringContext | None = None,
) -> AgentRiskScore:
    w = weights or WeightTable.defaults()
    reg = default_interactions() if registry is None else registry
    ctx = context or ScoringContext()
    now = ctx.now or datetime.now(timezone.utc)
    thresholds = w.bucket_thresholds

    factors = _factors(defn, w, ctx, now)
    additive = sum(f.delta for f in factors)
    fired = [] if disable_interactions else reg.fired(defn, factors)
    final, applied = apply_interactions(additive, fired)
    return AgentRiskScore(
        agent_key=defn.agent_key,
        additive=additive,
        additive_bucket=bucket_for_score(clamp(additive), thresholds),
        fired_codes=tuple(r.code for r in fired),
        applied_multiplier=applied,
        final=final,
        bucket=bucket_for_score(final, thresholds),
        factors=tuple(factors),
    )
