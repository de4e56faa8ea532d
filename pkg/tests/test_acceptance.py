"""Headline acceptance checks, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py`` or
``python3 tests/test_acceptance.py``; the lines appear in the
"acceptance" section of the terminal summary.
"""

from __future__ import annotations

import random
import statistics
import sys
import threading
import time
from datetime import timedelta
from decimal import Decimal
from pathlib import Path

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

sys.path.insert(0, str(Path(__file__).parent))

from fleetgov.attacksim import loan_fleet_scenario, run_matched_control, run_topology_attack  # noqa: E402
from fleetgov.canonical import definition_hash  # noqa: E402
from fleetgov.compliance import BreachNotifier, default_registry, required_retention  # noqa: E402
from fleetgov.errors import OverrideLoosensError  # noqa: E402
from fleetgov.evidence import CLEAN_CUT, VALID, EvidenceLog, RetentionPolicy  # noqa: E402
from fleetgov.inbound import AUTO_APPLIED, PENDING, REJECTED, InboundPipeline, sign_envelope  # noqa: E402
from fleetgov.scoring import ScoringContext, score_agent  # noqa: E402
from fleetgov.storage import MemoryStorage, SQLiteStorage  # noqa: E402
from fleetgov.trust import TrustService, bucket_for_trust  # noqa: E402
from fleetgov.versioning import VersionStore  # noqa: E402
from fleetgov.weights import SIGNAL_DEFAULTS, TenantWeights, WeightKey, dominates  # noqa: E402

from helpers import (  # noqa: E402
    ABLATION,
    EVENT_MUTATIONS,
    HASHED_MUTATIONS,
    KEY,
    OPERATIONAL_MUTATIONS,
    T0,
    StepClock,
    ablation_definition,
    base_definition,
    fill_chain,
)

RESULTS: list[tuple[str, bool, str]] = []


def report(name: str, failures: list[str], detail: str = "") -> None:
    ok = not failures
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    if failures:
        line += "  -- " + "; ".join(failures[:5])
    RESULTS.append((name, ok, line))
    assert ok, line


# -- 1. ablation ---------------------------------------------------------------------


def test_ablation_table():
    start = time.perf_counter()
    failures = []
    for name, (_, expected) in ABLATION.items():
        s = score_agent(ablation_definition(name), context=ScoringContext(now=T0))
        got = (s.additive, s.additive_bucket, s.final, s.bucket, s.applied_multiplier)
        if got != expected:
            failures.append(f"{name}: {got} != {expected}")
    elapsed = time.perf_counter() - start
    if elapsed >= 1.0:
        failures.append(f"took {elapsed:.3f}s")
    report("ablation: six fixtures reproduce (add, bucket, final, bucket, mult)", failures, f"{elapsed * 1000:.1f} ms")


# -- 2. topology attack ----------------------------------------------------------------


def test_topology_attack_crossings():
    start = time.perf_counter()
    failures = []
    for kind, risky, blocked in (("oos_tool", 4, 12), ("data_leak", 2, 4), ("cross_tenant", 1, 3)):
        res = run_topology_attack(loan_fleet_scenario(kind, 20))
        if (res.risky_at, res.blocked_at) != (risky, blocked):
            failures.append(f"{kind}: risky@{res.risky_at} blocked@{res.blocked_at}")
    control = run_matched_control(invocations=20)
    if any(p.trust != 50 or p.bucket != "neutral" for p in control.trajectory):
        failures.append("control left neutral")
    elapsed = time.perf_counter() - start
    if elapsed >= 1.0:
        failures.append(f"took {elapsed:.3f}s")
    report("topology attack: orchestrator crossings and neutral control", failures, f"{elapsed * 1000:.1f} ms")


# -- 3. four gates ---------------------------------------------------------------------

_SIGNER = Ed25519PrivateKey.from_private_bytes(bytes(range(32)))
_FORGER = Ed25519PrivateKey.from_private_bytes(bytes(range(100, 132)))
_PII = WeightKey("factor_weight", "data_sensitivity.pii")


def _gate_trial(gate: int, trial: int, run: int) -> str | None:
    clock = StepClock()
    storage = MemoryStorage(clock)
    weights = TenantWeights(storage)
    weights.set_override(None, _PII, 12)
    anchors = {"sector": _SIGNER.public_key()}
    pipe = InboundPipeline(storage, weights, anchors)
    body = {
        "recommendation_id": f"r{run}-{gate}-{trial}",
        "tenant_id": f"bank-{trial % 7}",
        "expires_at": (T0 + timedelta(days=1)).isoformat(),
        "target": {"scope": "factor_weight", "key": "data_sensitivity.pii", "value": 12 + 1 + trial % 20},
        "rationale": f"trial {trial}",
    }
    signer = _SIGNER
    if gate == 1:
        signer = _FORGER
    elif gate == 2:
        body["expires_at"] = (T0 - timedelta(seconds=1 + trial)).isoformat()
    elif gate == 3:
        body["target"]["value"] = trial % 12
    rec = pipe.ingest_recommendation(sign_envelope(body, "sector", signer))
    if gate == 4:
        ok = rec.status == PENDING and rec.stopped_at_gate == 4 and weights.effective_weight(body["tenant_id"], _PII) == 12
    else:
        ok = rec.status == REJECTED and rec.gate_rejected == gate and weights.effective_weight(body["tenant_id"], _PII) == 12
    return None if ok else f"gate {gate} trial {trial} run {run}: {rec.status}/{rec.gate_rejected}"


def test_four_gates():
    failures, stopped = [], 0
    for run in range(3):
        for gate in (1, 2, 3, 4):
            for trial in range(100):
                miss = _gate_trial(gate, trial, run)
                if miss:
                    failures.append(miss)
                else:
                    stopped += 1
    if stopped != 1200:
        failures.insert(0, f"{stopped}/1200")
    report("four gates: each gate stops its target input", failures, f"{stopped}/1200")


# -- 4. only-tighten -----------------------------------------------------------------

_TIGHTEN_KEYS = [
    WeightKey("factor_weight", "data_sensitivity.pii"),
    WeightKey("bucket_threshold", "critical"),
    WeightKey("signal_delta", "oos_tool"),
    WeightKey("data_class_multiplier", "ofac_lookup:us_classified"),
]


def _random_value(rng: random.Random, wk: WeightKey):
    if wk.scope == "data_class_multiplier":
        return Decimal(rng.randint(100, 250)) / 100
    if wk.scope == "bucket_threshold":
        return rng.randint(61, 100)
    return rng.randint(0, 40)


def _tighten_sequence(seed: int) -> list[str]:
    rng = random.Random(seed)
    storage = MemoryStorage(StepClock())
    weights = TenantWeights(storage)
    tenants = ["a", "b"]
    failures = []
    previous = {}
    for step in range(rng.randint(5, 25)):
        channel = rng.choice(["platform", "tenant", "recommendation"])
        tenant = None if channel == "platform" else rng.choice(tenants + [None] * (channel == "recommendation"))
        wk = rng.choice(_TIGHTEN_KEYS)
        try:
            weights.set_override(tenant, wk, _random_value(rng, wk), channel=channel)
        except OverrideLoosensError:
            continue
        for t in tenants:
            for key in _TIGHTEN_KEYS:
                eff, base = weights.effective_weight(t, key), weights.platform_value(key)
                if not dominates(key.scope, eff, base):
                    failures.append(f"seed {seed} step {step}: {t} {key} {eff} looser than {base}")
                prior = previous.get((t, key))
                if channel != "platform" and prior is not None and not dominates(key.scope, eff, prior):
                    failures.append(f"seed {seed} step {step}: {t} {key} relaxed {prior}->{eff}")
                previous[(t, key)] = eff
    return failures


def _six_attempt_witness() -> list[str]:
    storage = MemoryStorage(StepClock())
    weights = TenantWeights(storage)
    pipe = InboundPipeline(storage, weights, {"sector": _SIGNER.public_key()})
    weights.set_override(None, _PII, 10)

    def attempt(fn) -> str:
        try:
            fn()
            return "accept"
        except OverrideLoosensError:
            return "block"

    def signed(rid, tenant, value):
        body = {"recommendation_id": rid, "expires_at": (T0 + timedelta(days=1)).isoformat(),
                "target": {"scope": "factor_weight", "key": "data_sensitivity.pii", "value": value}, "rationale": "w"}
        if tenant:
            body["tenant_id"] = tenant
        rec = pipe.ingest_recommendation(sign_envelope(body, "sector", _SIGNER))
        if rec.status == REJECTED:
            return "block"
        return "accept" if pipe.approve_recommendation(rid, "officer", tenant).status != REJECTED else "block"

    outcomes = [
        attempt(lambda: weights.set_override(None, _PII, 12)),
        attempt(lambda: weights.set_override("bank", _PII, 30)),
        attempt(lambda: weights.set_override("bank", _PII, 5)),
        signed("sig-tighten", "bank", 32),
        signed("sig-loosen", "bank", 8),
        signed("sig-platform-lower", None, 6),
    ]
    expected = ["accept", "accept", "block", "accept", "block", "block"]
    failures = [] if outcomes == expected else [f"witness {outcomes} != {expected}"]
    if weights.effective_weight("bank", _PII) != 32 or weights.platform_value(_PII) != 12:
        failures.append("witness end state")
    return failures


def test_only_tighten():
    failures = []
    for seed in range(1000):
        failures += _tighten_sequence(seed)
    failures += _six_attempt_witness()
    report("only-tighten: 1000 random sequences plus six-attempt witness", failures)


# -- 5. evidence chain ---------------------------------------------------------------


def _tamper_matrix(storage: MemoryStorage, evidence: EvidenceLog) -> tuple[int, list[str]]:
    import json

    fill_chain(evidence, "t1", "inv", 100)
    checked, failures = 0, []
    for position in range(100):
        key = ("t1", "inv", position)
        original = storage._read("evidence", key)
        for name, mutate in EVENT_MUTATIONS.items():
            rec = json.loads(original)
            rec[name] = mutate(rec)
            with storage.transaction():
                storage._write("evidence", key, json.dumps(rec, sort_keys=True))
            if evidence.verify_chain("t1", "inv").status == VALID:
                failures.append(f"{name}@{position} undetected")
            checked += 1
            with storage.transaction():
                storage._write("evidence", key, original)
    if evidence.verify_chain("t1", "inv").status != VALID:
        failures.append("restored chain not valid")
    return checked, failures


def _prune_prefix() -> list[str]:
    clock = StepClock()
    evidence = EvidenceLog(MemoryStorage(clock), KEY)
    fill_chain(evidence, "t1", "inv", 10, tags=())
    clock.advance(days=30)
    fill_chain(evidence, "t1", "inv", 5, tags=())
    evidence.prune_expired_evidence(clock(), RetentionPolicy(tenant_retention={"t1": timedelta(days=7)}))
    report_ = evidence.verify_chain("t1", "inv")
    failures = [] if (report_.status, report_.index) == (CLEAN_CUT, 10) else [f"prune -> {report_.status}@{report_.index}"]
    fill_chain(evidence, "t1", "inv", 1, tags=())
    if not evidence.verify_chain("t1", "inv").ok:
        failures.append("append after cut breaks chain")
    if evidence.verify_chain("t1", "other").status != VALID:
        failures.append("empty chain not valid")
    return failures


def _cross_tenant() -> list[str]:
    from helpers import tamper

    storage = MemoryStorage(StepClock())
    evidence = EvidenceLog(storage, KEY)
    for t in ("t1", "t2", "t3"):
        fill_chain(evidence, t, "inv", 10)
    tamper(storage, "evidence", ("t1", "inv", 4), "payload", EVENT_MUTATIONS["payload"])
    failures = []
    if evidence.verify_chain("t1", "inv").ok:
        failures.append("t1 tamper undetected")
    if not all(evidence.verify_chain(t, "inv").status == VALID for t in ("t2", "t3")):
        failures.append("tamper leaked into another tenant")
    return failures


def _twenty_writers(storage) -> list[str]:
    evidence = EvidenceLog(storage, KEY)

    def writer(w):
        for i in range(10):
            evidence.append("t1", "shared", "tool_call", {"w": w, "i": i})

    threads = [threading.Thread(target=writer, args=(w,)) for w in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    failures = []
    if [e.seq for e in evidence.events("t1", "shared")] != list(range(200)):
        failures.append(f"{type(storage).__name__}: seqs not contiguous")
    if evidence.verify_chain("t1", "shared").status != VALID:
        failures.append(f"{type(storage).__name__}: concurrent chain invalid")
    return failures


def test_evidence_chain(tmp_path):
    storage = MemoryStorage(StepClock())
    checked, failures = _tamper_matrix(storage, EvidenceLog(storage, KEY))
    failures += _prune_prefix() + _cross_tenant()
    failures += _twenty_writers(MemoryStorage())
    sqlite = SQLiteStorage(tmp_path / "chain.sqlite3")
    try:
        failures += _twenty_writers(sqlite)
    finally:
        sqlite.close()
    report("evidence chain: tamper matrix, clean cut, isolation, 20 writers", failures, f"{checked} mutations")


# -- 6. drift --------------------------------------------------------------------------


def test_drift_exhaustive():
    versions = VersionStore(MemoryStorage(StepClock()))
    declared = versions.snapshot("t1", base_definition()).definition_hash
    failures, correct = [], 0
    for name, value in HASHED_MUTATIONS.items():
        diff = versions.detect_drift("t1", declared, base_definition(**{name: value}))
        if diff is None or diff.changed_fields != (name,):
            failures.append(f"{name} not reported")
        else:
            correct += 1
    for name, value in OPERATIONAL_MUTATIONS.items():
        mutated = base_definition(**{name: value})
        if versions.detect_drift("t1", declared, mutated) is not None or definition_hash(mutated) != declared:
            failures.append(f"{name} reported as drift")
        else:
            correct += 1
    if correct != 36:
        failures.insert(0, f"{correct}/36")
    report("drift: hashed fields detected, operational fields ignored", failures, f"{correct}/36")


# -- 7. principal trust ------------------------------------------------------------------


def test_principal_trust():
    failures = []
    svc = TrustService(MemoryStorage(StepClock()))
    if svc.get("t", "user", "new").trust_score != 50:
        failures.append("start != 50")
    edges = {75: "trusted", 74: "neutral", 40: "neutral", 39: "risky", 15: "risky", 14: "blocked"}
    failures += [f"{s} -> {bucket_for_trust(s)}" for s, b in edges.items() if bucket_for_trust(s) != b]

    rng = random.Random(11)
    kinds = sorted(SIGNAL_DEFAULTS)
    for i in range(10_000):
        principal = ("agent", f"a{rng.randint(0, 9)}") if i % 2 else ("user", f"u{rng.randint(0, 9)}")
        actor = f"orch{rng.randint(0, 2)}" if rng.random() < 0.5 else None
        kind = rng.choice(kinds)
        before = svc.get("t", *principal).trust_score
        before_actor = svc.get("t", "agent", actor).trust_score if actor else None
        out = svc.record_principal_signal("t", principal[0], principal[1], kind, actor_agent_key=actor)
        if any(not 0 <= r.trust_score <= 100 for r in out):
            failures.append(f"signal {i} left range")
        magnitude = SIGNAL_DEFAULTS[kind]
        if before - out[0].trust_score != min(before, magnitude):
            failures.append(f"signal {i}: emitter debit wrong")
        if actor and principal != ("agent", actor):
            # both sides take the same debit, short only by clamping at zero
            if len(out) != 2 or before_actor - out[1].trust_score != min(before_actor, magnitude):
                failures.append(f"signal {i}: actor debit wrong")
    failures += _fresh_actor_debits()
    report("principal trust: start, boundaries, clamping, actor debit", failures)


def _fresh_actor_debits() -> list[str]:
    failures = []
    rng = random.Random(5)
    for i in range(500):
        svc = TrustService(MemoryStorage(StepClock()))
        kind = rng.choice(sorted(SIGNAL_DEFAULTS))
        emitter, actor = svc.record_principal_signal("t", "agent", "sub", kind, actor_agent_key="orch")
        if not (50 - emitter.trust_score == 50 - actor.trust_score == SIGNAL_DEFAULTS[kind]):
            failures.append(f"{kind}: {emitter.trust_score} vs {actor.trust_score}")
    return failures


# -- 8. performance ------------------------------------------------------------------------


def test_performance():
    failures = []
    defn = ablation_definition("autonomous_sql_shell")
    for _ in range(200):
        score_agent(defn)
    samples = []
    for _ in range(10_000):
        t = time.perf_counter()
        score_agent(defn)
        samples.append(time.perf_counter() - t)
    score_median = statistics.median(samples)
    if score_median >= 1e-3:
        failures.append(f"score median {score_median * 1e6:.0f} us")

    storage = MemoryStorage()
    svc = TrustService(storage, EvidenceLog(storage, KEY), TenantWeights(storage))
    signal_samples = []
    for i in range(2_000):
        t = time.perf_counter()
        svc.record_principal_signal("t", "agent", f"a{i % 50}", "oos_tool", actor_agent_key="orch", invocation_id=f"inv{i % 50}")
        signal_samples.append(time.perf_counter() - t)
    signal_median = statistics.median(signal_samples)
    if signal_median >= 5e-3:
        failures.append(f"signal median {signal_median * 1e3:.2f} ms")
    report(
        "performance: score < 1 ms and signal record < 5 ms (medians)",
        failures,
        f"score {score_median * 1e6:.0f} us, signal {signal_median * 1e3:.2f} ms",
    )


# -- 9. compliance -------------------------------------------------------------------------


def test_compliance_fan_out():
    failures = []
    notifier = BreachNotifier(MemoryStorage(StepClock()))
    runs = [notifier.emit("bank", "inc-1", ["NYDFS"], ["pii"], detected_at=T0) for _ in range(5)]
    if len(runs[0]) != 2 or any(r != runs[0] for r in runs):
        failures.append(f"fan-out {[len(r) for r in runs]}")
    if len(notifier.list("bank", "inc-1")) != 2:
        failures.append("duplicate rows stored")

    registry = default_registry()
    ids = sorted(registry.regimes)
    rng = random.Random(17)
    for _ in range(1000):
        regimes = set(rng.sample(ids, rng.randint(0, 8)))
        got = required_retention(regimes)
        want = max((registry.regimes[r].retention_floor for r in regimes), default=timedelta(0))
        if got != want or required_retention(regimes | {rng.choice(ids)}) < got:
            failures.append(f"{sorted(regimes)} -> {got}")
    report("compliance: two notifications, idempotent; retention is the max floor", failures)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
