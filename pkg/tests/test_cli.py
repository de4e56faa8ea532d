from __future__ import annotations

import json
import random

import pytest

from fleetgov.cli import EXIT_DATA, EXIT_DRIFT, EXIT_GATE, EXIT_OK, EXIT_TAMPER, EXIT_USAGE, main
from fleetgov.inbound import sign_envelope
from fleetgov.storage import SQLiteStorage

from helpers import ABLATION, KEY_B64, EVENT_MUTATIONS, tamper

from test_inbound import OTHER, PRIV, pub_b64

EXIT_CODES = {EXIT_OK, EXIT_DRIFT, EXIT_TAMPER, EXIT_GATE, EXIT_USAGE, EXIT_DATA}


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.setenv("KYA_EVIDENCE_SIGNING_KEY", KEY_B64)
    monkeypatch.setenv("KYA_INBOUND_PUBLIC_KEY", f"sector:{pub_b64(PRIV)}")
    monkeypatch.delenv("KYA_EVIDENCE_KEY_PROVIDER", raising=False)
    return tmp_path


def run(env, *argv, capsys=None):
    return main(["--data-dir", str(env / "data"), "--tenant", "bank", *argv])


def write(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def benign(env, **extra):
    fields, _ = ABLATION["benign_readonly_hil"]
    return write(env / "benign.json", dict(agent_key="support_bot", owner="ops", approval_status="approved", **fields, **extra))


def test_score_benign_definition(env, capsys):
    assert run(env, "score", "--definition", benign(env), "--now", "2026-01-01T00:00:00Z") == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["final"] == 34 and out["bucket"] == "medium"


def test_register_then_score_by_agent(env, capsys):
    assert run(env, "register", "--definition", benign(env)) == EXIT_OK
    capsys.readouterr()
    assert run(env, "score", "--agent", "support_bot", "--now", "2026-01-01T00:00:00Z") == EXIT_OK
    assert json.loads(capsys.readouterr().out)["final"] == 34
    assert run(env, "score", "--agent", "ghost") == EXIT_DATA


def test_drift_check(env, capsys):
    path = benign(env)
    run(env, "register", "--definition", path)
    assert run(env, "drift-check", "--definition", path) == EXIT_OK
    benign(env, model="other-model")
    capsys.readouterr()
    assert run(env, "drift-check", "--definition", path) == EXIT_DRIFT
    assert json.loads(capsys.readouterr().out)["changed_fields"] == ["model"]
    assert run(env, "drift-check", "--definition", path, "--declared-hash", "0" * 64) == EXIT_DATA


def test_verify_chain_detects_tamper(env, capsys):
    path = benign(env)
    run(env, "register", "--definition", path)
    assert run(env, "verify-chain") == EXIT_OK
    storage = SQLiteStorage(env / "data" / "governance.sqlite3")
    tamper(storage, "evidence", ("bank", "registry:support_bot", 0), "payload", EVENT_MUTATIONS["payload"])
    storage.close()
    capsys.readouterr()
    assert run(env, "verify-chain", "--invocation", "registry:support_bot") == EXIT_TAMPER
    [row] = json.loads(capsys.readouterr().out)
    assert row["status"] == "payload_tamper"


def test_weights_set_and_loosen(env, capsys):
    assert run(env, "weights", "set", "factor_weight:data_sensitivity.pii", "30") == EXIT_OK
    assert run(env, "weights", "set", "factor_weight:data_sensitivity.pii", "5") == EXIT_GATE
    assert run(env, "weights", "set", "factor_weight:nope", "5") == EXIT_USAGE
    capsys.readouterr()
    assert run(env, "weights", "list", "--changes") == EXIT_OK
    assert len(json.loads(capsys.readouterr().out)) == 1


def _envelope(env, signer=PRIV, rid="rec-1", value=25):
    body = {
        "recommendation_id": rid,
        "tenant_id": "bank",
        "expires_at": "2099-01-01T00:00:00+00:00",
        "target": {"scope": "factor_weight", "key": "data_sensitivity.pii", "value": value},
        "rationale": "sector incident",
    }
    return write(env / f"{rid}.json", sign_envelope(body, "sector", signer))


def test_inbound_flow(env, capsys):
    assert run(env, "inbound", "ingest", _envelope(env)) == EXIT_OK
    capsys.readouterr()
    assert run(env, "inbound", "list-pending") == EXIT_OK
    assert [r["recommendation_id"] for r in json.loads(capsys.readouterr().out)] == ["rec-1"]
    assert run(env, "inbound", "approve", "rec-1", "--operator", "officer") == EXIT_OK
    assert run(env, "inbound", "approve", "rec-1", "--operator", "officer") == EXIT_GATE


def test_inbound_rejections_exit_gate(env):
    assert run(env, "inbound", "ingest", _envelope(env, signer=OTHER)) == EXIT_GATE
    assert run(env, "inbound", "approve", "unknown", "--operator", "officer") == EXIT_GATE


def test_inbound_bad_file(env):
    assert run(env, "inbound", "ingest", str(env / "missing.json")) == EXIT_DATA
    (env / "bad.json").write_text("{not json")
    assert run(env, "inbound", "ingest", str(env / "bad.json")) == EXIT_DATA


def test_suggestions_flow(env, capsys):
    incident = write(env / "inc.json", {"incident_id": "inc-1", "severity": "critical", "resolved": True,
                                        "fired_factors": ["data_sensitivity:pii"], "agent_key": "a"})
    assert run(env, "suggestions", "propose", "--incident", incident) == EXIT_OK
    [sug] = json.loads(capsys.readouterr().out)
    assert run(env, "suggestions", "approve", sug["id"], "--reviewer", "alice") == EXIT_OK
    assert run(env, "suggestions", "approve", sug["id"], "--reviewer", "alice") == EXIT_GATE


def test_compliance_commands(env, capsys):
    assert run(env, "compliance", "notify", "--incident-id", "i1", "--regime", "NYDFS", "--data-class", "pii") == EXIT_OK
    assert len(json.loads(capsys.readouterr().out)) == 2
    assert run(env, "compliance", "summary", "--definition", benign(env)) == EXIT_OK
    assert run(env, "compliance", "notify", "--incident-id", "i2", "--regime", "MADE_UP") == EXIT_DATA


def test_prune_and_counters(env, capsys):
    run(env, "register", "--definition", benign(env))
    assert run(env, "prune", "--now", "2040-01-01T00:00:00Z", "--retention-days", "1") == EXIT_OK
    assert run(env, "verify-chain") == EXIT_OK
    assert run(env, "counters") == EXIT_OK


def test_simulate_attack_offline(env, capsys):
    assert main(["simulate-attack", "--signal", "data_leak", "--invocations", "5"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert (out["risky_at"], out["blocked_at"]) == (2, 4)
    assert main(["simulate-attack", "--control", "--format", "table"]) == EXIT_OK
    assert main(["simulate-attack", "--signal", "gossip"]) == EXIT_DATA


def test_flags_after_verb(env, capsys):
    assert main(["score", "--definition", benign(env), "--data-dir", str(env / "d"), "--format", "table"]) == EXIT_OK
    assert "final" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["bogus"], ["score", "--format", "xml"], ["weights"], ["score"]])
def test_usage_errors(env, argv):
    assert run(env, *argv) == EXIT_USAGE


def test_exit_codes_are_closed(env):
    rng = random.Random(3)
    words = ["score", "register", "verify-chain", "drift-check", "weights", "set", "list", "inbound", "ingest",
             "approve", "prune", "counters", "compliance", "summary", "--definition", "--agent", "x", "1",
             "--operator", "--now", "simulate-attack", "--invocations", "-3", benign(env)]
    for _ in range(150):
        argv = [rng.choice(words) for _ in range(rng.randint(0, 5))]
        assert run(env, *argv) in EXIT_CODES, argv
