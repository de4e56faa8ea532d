"""Operator command line.

JSON is the primary output; ``--format table`` renders the same data for
people. Exit codes: 0 ok, 1 drift found, 2 chain tamper, 3 gate rejection
or review conflict, 64 usage error, 65 bad input data.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from datetime import datetime, timedelta
from decimal import Decimal
from pathlib import Path
from typing import Any, Sequence

from . import attacksim
from .compliance import compliance_summary
from .errors import (
    DeclaredHashUnknown,
    GovernanceError,
    NotPending,
    OverrideLoosensError,
    VersionNotFound,
)
from .evidence import CHAIN_BREAK, PAYLOAD_TAMPER, RetentionPolicy
from .inbound import anchors_from_env
from .kernel import Kernel
from .model import parse_timestamp, validate_definition
from .scoring import ScoringContext, score_agent
from .weights import SCOPES, WeightKey

log = logging.getLogger("fleetgov")

EXIT_OK = 0
EXIT_DRIFT = 1
EXIT_TAMPER = 2
EXIT_GATE = 3
EXIT_USAGE = 64
EXIT_DATA = 65

ENV_DATA_DIR = "FLEETGOV_DATA_DIR"
DEFAULT_DATA_DIR = ".fleetgov"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default
        raise UsageError(f"{self.prog}: {message}")


# -- output ----------------------------------------------------------------------


def _plain(value: Any) -> Any:
    if hasattr(value, "to_dict"):
        return _plain(value.to_dict())
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return _plain(dataclasses.asdict(value))
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        return [_plain(v) for v in value]
    if isinstance(value, datetime):
        return value.isoformat()
    if isinstance(value, timedelta):
        return value.total_seconds()
    if isinstance(value, Decimal):
        return str(value)
    return value


def _table(data: Any) -> str:
    if isinstance(data, list):
        if not data:
            return "(none)"
        if all(isinstance(r, dict) for r in data):
            cols = list(dict.fromkeys(k for r in data for k in r))
            cells = [[_cell(r.get(c)) for c in cols] for r in data]
            widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
            lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
            lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
            return "\n".join(lines)
        return "\n".join(_cell(v) for v in data)
    if isinstance(data, dict):
        width = max((len(k) for k in data), default=0)
        return "\n".join(f"{k.ljust(width)}  {_cell(v)}" for k, v in data.items())
    return _cell(data)


def _cell(v: Any) -> str:
    if isinstance(v, (dict, list)):
        return json.dumps(v, sort_keys=True)
    return "" if v is None else str(v)


def emit(args: argparse.Namespace, data: Any) -> None:
    data = _plain(data)
    if args.format == "table":
        print(_table(data))
    else:
        print(json.dumps(data, indent=2, sort_keys=True))


# -- inputs ----------------------------------------------------------------------


def _load_json(path: str) -> Any:
    try:
        text = sys.stdin.read() if path == "-" else Path(path).read_text(encoding="utf-8")
        return json.loads(text)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _definition(args: argparse.Namespace, kernel: Kernel):
    if getattr(args, "definition", None):
        return validate_definition(_load_json(args.definition))
    if getattr(args, "agent", None):
        snap = kernel.versions.latest(args.tenant, args.agent)
        if snap is None:
            raise DataError(f"agent {args.agent!r} is not registered for tenant {args.tenant!r}")
        return snap.definition
    raise UsageError("give --definition FILE or --agent KEY")


def _weight_key(text: str) -> WeightKey:
    try:
        return WeightKey.parse(text)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None


# -- commands --------------------------------------------------------------------


def cmd_register(args, kernel: Kernel) -> int:
    defn = validate_definition(_load_json(args.definition))
    occurred = parse_timestamp(args.occurred_at) if args.occurred_at else None
    snap = kernel.versions.snapshot(args.tenant, defn, occurred_at=occurred, note=args.note or "")
    kernel.evidence.append(
        args.tenant,
        f"registry:{defn.agent_key}",
        "system_message",
        {"registered": defn.agent_key, "version_no": snap.version_no, "definition_hash": snap.definition_hash.hex()},
        actor_agent_key=defn.agent_key,
    )
    emit(args, {"agent_key": defn.agent_key, "version_no": snap.version_no, "definition_hash": snap.definition_hash.hex()})
    return EXIT_OK


def cmd_score(args, kernel: Kernel) -> int:
    defn = _definition(args, kernel)
    now = parse_timestamp(args.now) if args.now else kernel.storage.now()
    score = score_agent(
        defn,
        weights=kernel.weights.table(args.tenant),
        disable_interactions=args.no_interactions,
        context=ScoringContext(now=now, regimes=kernel.registry),
    )
    emit(args, score)
    return EXIT_OK


def cmd_verify_chain(args, kernel: Kernel) -> int:
    chains = [args.invocation] if args.invocation else kernel.evidence.invocations(args.tenant)
    rows = []
    worst = EXIT_OK
    for inv in chains:
        report = kernel.evidence.verify_chain(args.tenant, inv)
        rows.append({"invocation_id": inv, **report.to_dict()})
        if report.status in (PAYLOAD_TAMPER, CHAIN_BREAK):
            worst = EXIT_TAMPER
    emit(args, rows)
    return worst


def cmd_drift_check(args, kernel: Kernel) -> int:
    current = validate_definition(_load_json(args.definition))
    declared = args.declared_hash
    if declared is None:
        base = kernel.versions.latest(args.tenant, current.agent_key)
        if base is None:
            raise DataError(f"agent {current.agent_key!r} has no registered version to compare against")
        declared = base.definition_hash.hex()
    diff = kernel.versions.detect_drift(args.tenant, declared, current)
    if diff is None:
        emit(args, {"agent_key": current.agent_key, "drift": False, "definition_hash": declared})
        return EXIT_OK
    emit(args, {"drift": True, **diff.to_dict()})
    return EXIT_DRIFT


def cmd_weights_list(args, kernel: Kernel) -> int:
    if args.changes:
        emit(args, kernel.weights.changes(args.tenant))
        return EXIT_OK
    rows = []
    for row in kernel.weights.overrides(args.tenant):
        wk = WeightKey(row["scope"], row["key"])
        rows.append(dict(row, effective=kernel.weights.effective_weight(args.tenant, wk)))
    emit(args, rows)
    return EXIT_OK


def cmd_weights_set(args, kernel: Kernel) -> int:
    wk = _weight_key(args.weight)
    channel = args.channel or "tenant"
    tenant = None if channel == "platform" or (channel == "recommendation" and args.platform) else args.tenant
    change = kernel.weights.set_override(tenant, wk, args.value, channel=channel, applied_by=args.by)
    emit(args, dict(change, effective=kernel.weights.effective_weight(tenant, wk)))
    return EXIT_OK


def cmd_suggestions_list(args, kernel: Kernel) -> int:
    emit(args, kernel.weights.suggestions(args.tenant, args.status))
    return EXIT_OK


def cmd_suggestions_propose(args, kernel: Kernel) -> int:
    incident = _load_json(args.incident)
    if not isinstance(incident, dict) or "incident_id" not in incident:
        raise DataError("incident must be an object with an incident_id")
    emit(args, kernel.weights.propose_from_incident(args.tenant, incident))
    return EXIT_OK


def cmd_suggestions_approve(args, kernel: Kernel) -> int:
    emit(args, kernel.weights.approve_suggestion(args.tenant, args.id, args.reviewer))
    return EXIT_OK


def cmd_suggestions_reject(args, kernel: Kernel) -> int:
    emit(args, kernel.weights.reject_suggestion(args.tenant, args.id, args.reviewer))
    return EXIT_OK


def _pipeline(args, kernel: Kernel):
    keys = [_weight_key(w) for w in getattr(args, "auto_apply", None) or ()]
    allow = [(wk.scope, wk.key) for wk in keys]
    return kernel.inbound(anchors_from_env(), allow)


def cmd_inbound_ingest(args, kernel: Kernel) -> int:
    rec = _pipeline(args, kernel).ingest_recommendation(_load_json(args.envelope))
    emit(args, rec)
    return EXIT_GATE if rec.gate_rejected is not None else EXIT_OK


def cmd_inbound_list(args, kernel: Kernel) -> int:
    pipeline = _pipeline(args, kernel)
    emit(args, pipeline.list(args.tenant, args.status) if args.status != "pending" else pipeline.list_pending(args.tenant))
    return EXIT_OK


def cmd_inbound_approve(args, kernel: Kernel) -> int:
    emit(args, _pipeline(args, kernel).approve_recommendation(args.id, args.operator, args.tenant))
    return EXIT_OK


def cmd_counters(args, kernel: Kernel) -> int:
    emit(
        args,
        {
            "counters": kernel.trust.counters_from_evidence(args.tenant),
            "principals": kernel.trust.records(args.tenant),
        },
    )
    return EXIT_OK


def cmd_compliance_summary(args, kernel: Kernel) -> int:
    defn = _definition(args, kernel)
    emit(args, {"agent_key": defn.agent_key, "regimes": compliance_summary(defn, kernel.registry)})
    return EXIT_OK


def cmd_compliance_notify(args, kernel: Kernel) -> int:
    detected = parse_timestamp(args.detected_at) if args.detected_at else None
    rows = kernel.notifier.emit(args.tenant, args.incident_id, args.regime or (), args.data_class or (), detected)
    emit(args, rows)
    return EXIT_OK


def cmd_prune(args, kernel: Kernel) -> int:
    now = parse_timestamp(args.now) if args.now else kernel.storage.now()
    retention = {args.tenant: timedelta(days=args.retention_days)} if args.retention_days else {}
    policy = RetentionPolicy({args.tenant: args.regime or ()}, retention, kernel.registry)
    emit(args, kernel.evidence.prune_expired_evidence(now, policy))
    return EXIT_OK


def cmd_simulate(args, kernel: Kernel | None) -> int:
    scenario = attacksim.loan_fleet_scenario(args.signal, args.invocations)
    if args.control:
        result = attacksim.run_matched_control(scenario)
    else:
        result = attacksim.run_topology_attack(scenario, attribution=not args.no_attribution)
    emit(args, result.trajectory if args.format == "table" else result)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fleetgov", description="Agent fleet governance kernel.")
    p.add_argument("--data-dir", default=os.environ.get(ENV_DATA_DIR, DEFAULT_DATA_DIR))
    p.add_argument("--tenant", default="default")
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.add_argument("-v", "--verbose", action="store_true")
    # the same flags are accepted after the verb; SUPPRESS keeps the top-level value
    common = _Parser(add_help=False)
    common.add_argument("--data-dir", default=argparse.SUPPRESS)
    common.add_argument("--tenant", default=argparse.SUPPRESS)
    common.add_argument("--format", choices=("json", "table"), default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("register", parents=[common], help="snapshot an agent definition")
    s.add_argument("--definition", required=True)
    s.add_argument("--occurred-at")
    s.add_argument("--note")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("score", parents=[common], help="static risk score")
    s.add_argument("--definition")
    s.add_argument("--agent")
    s.add_argument("--now", help="scoring time (ISO 8601)")
    s.add_argument("--no-interactions", action="store_true")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("verify-chain", parents=[common], help="verify evidence chains")
    s.add_argument("--invocation")
    s.set_defaults(func=cmd_verify_chain)

    s = sub.add_parser("drift-check", parents=[common], help="compare a live definition with a declared hash")
    s.add_argument("--definition", required=True)
    s.add_argument("--declared-hash")
    s.set_defaults(func=cmd_drift_check)

    w = sub.add_parser("weights", help="weight overrides").add_subparsers(dest="action", required=True)
    s = w.add_parser("list", parents=[common])
    s.add_argument("--changes", action="store_true", help="show the change log instead")
    s.set_defaults(func=cmd_weights_list)
    s = w.add_parser("set", parents=[common])
    s.add_argument("weight", help=f"scope:key, scope one of {', '.join(SCOPES)}")
    s.add_argument("value")
    s.add_argument("--channel", choices=("platform", "tenant", "recommendation"))
    s.add_argument("--platform", action="store_true", help="recommendation channel at platform level")
    s.add_argument("--by", default=os.environ.get("USER", "operator"))
    s.set_defaults(func=cmd_weights_set)

    g = sub.add_parser("suggestions", help="incident-driven weight suggestions").add_subparsers(
        dest="action", required=True
    )
    s = g.add_parser("list", parents=[common])
    s.add_argument("--status", choices=("pending", "approved", "rejected"))
    s.set_defaults(func=cmd_suggestions_list)
    s = g.add_parser("propose", parents=[common])
    s.add_argument("--incident", required=True)
    s.set_defaults(func=cmd_suggestions_propose)
    for name, func in (("approve", cmd_suggestions_approve), ("reject", cmd_suggestions_reject)):
        s = g.add_parser(name, parents=[common])
        s.add_argument("id")
        s.add_argument("--reviewer", required=True)
        s.set_defaults(func=func)

    i = sub.add_parser("inbound", help="signed external recommendations").add_subparsers(dest="action", required=True)
    s = i.add_parser("ingest", parents=[common])
    s.add_argument("envelope")
    s.add_argument("--auto-apply", action="append", metavar="SCOPE:KEY")
    s.set_defaults(func=cmd_inbound_ingest)
    s = i.add_parser("list-pending", parents=[common])
    s.add_argument("--status", default="pending", choices=("pending", "applied", "auto_applied", "rejected"))
    s.set_defaults(func=cmd_inbound_list)
    s = i.add_parser("approve", parents=[common])
    s.add_argument("id")
    s.add_argument("--operator", required=True)
    s.set_defaults(func=cmd_inbound_approve)

    s = sub.add_parser("counters", parents=[common], help="signal counters and principal trust")
    s.set_defaults(func=cmd_counters)

    c = sub.add_parser("compliance", help="regulatory views").add_subparsers(dest="action", required=True)
    s = c.add_parser("summary", parents=[common])
    s.add_argument("--definition")
    s.add_argument("--agent")
    s.set_defaults(func=cmd_compliance_summary)
    s = c.add_parser("notify", parents=[common])
    s.add_argument("--incident-id", required=True)
    s.add_argument("--regime", action="append")
    s.add_argument("--data-class", action="append")
    s.add_argument("--detected-at")
    s.set_defaults(func=cmd_compliance_notify)

    s = sub.add_parser("prune", parents=[common], help="drop evidence past retention")
    s.add_argument("--now")
    s.add_argument("--regime", action="append")
    s.add_argument("--retention-days", type=int)
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("simulate-attack", parents=[common], help="replay the orchestrator attack")
    s.add_argument("--signal", default="oos_tool")
    s.add_argument("--invocations", type=int, default=20)
    s.add_argument("--control", action="store_true")
    s.add_argument("--no-attribution", action="store_true")
    s.set_defaults(func=cmd_simulate, offline=True)
    return p


def _error(message: str, code: int, fmt: str = "json") -> int:
    if fmt == "json":
        print(json.dumps({"error": message, "exit_code": code}), file=sys.stderr)
    else:
        print(f"error: {message}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _error(str(exc), EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    kernel = None
    try:
        if not getattr(args, "offline", False):
            kernel = Kernel.open(args.data_dir)
        return args.func(args, kernel)
    except UsageError as exc:
        return _error(str(exc), EXIT_USAGE, args.format)
    except (NotPending, OverrideLoosensError) as exc:
        return _error(f"{type(exc).__name__}: {exc}", EXIT_GATE, args.format)
    except (DataError, DeclaredHashUnknown, VersionNotFound, GovernanceError, ValueError, KeyError) as exc:
        return _error(f"{type(exc).__name__}: {exc}", EXIT_DATA, args.format)
    finally:
        if kernel is not None:
            kernel.close()


if __name__ == "__main__":
    sys.exit(main())
