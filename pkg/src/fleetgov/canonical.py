"""Canonical JSON with type-marked wrapping, and the definition hash.

Plain JSON values encode RFC 8785 style: keys sorted by UTF-16 code units,
no insignificant whitespace, non-ASCII escaped. Values JSON cannot express
are wrapped as ``{"__t__": typename, "v": serialized_form}`` so that, e.g.,
a datetime and its ISO string never produce the same bytes.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from decimal import Decimal
from typing import Any

from .errors import UnsupportedValueType
from .model import HASHED_FIELDS, AgentDefinition

TYPE_MARK = "__t__"
WRAPPED_TYPES = ("datetime", "bytes", "decimal", "set")


def encode_tree(value: Any) -> Any:
    """Lower ``value`` to a plain JSON tree, wrapping non-JSON types."""
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise UnsupportedValueType(value)
        return value
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise UnsupportedValueType(k)
            if k == TYPE_MARK:
                raise UnsupportedValueType(value)
            out[k] = encode_tree(v)
        return out
    if isinstance(value, (list, tuple)):
        return [encode_tree(v) for v in value]
    if isinstance(value, datetime):
        if value.tzinfo is not None:
            value = value.astimezone(timezone.utc)
        return {TYPE_MARK: "datetime", "v": value.isoformat()}
    if isinstance(value, (bytes, bytearray, memoryview)):
        return {TYPE_MARK: "bytes", "v": base64.b64encode(bytes(value)).decode("ascii")}
    if isinstance(value, Decimal):
        if not value.is_finite():
            raise UnsupportedValueType(value)
        return {TYPE_MARK: "decimal", "v": _decimal_text(value)}
    if isinstance(value, (set, frozenset)):
        members = [encode_tree(v) for v in value]
        members.sort(key=_dump)
        return {TYPE_MARK: "set", "v": members}
    raise UnsupportedValueType(value)


def decode_tree(tree: Any) -> Any:
    """Inverse of :func:`encode_tree`."""
    if isinstance(tree, list):
        return [decode_tree(v) for v in tree]
    if isinstance(tree, dict):
        if TYPE_MARK in tree:
            kind, v = tree[TYPE_MARK], tree["v"]
            if kind == "datetime":
                return datetime.fromisoformat(v)
            if kind == "bytes":
                return base64.b64decode(v)
            if kind == "decimal":
                return Decimal(v)
            if kind == "set":
                return frozenset(_freeze(decode_tree(m)) for m in v)
            raise UnsupportedValueType(tree)
        return {k: decode_tree(v) for k, v in tree.items()}
    return tree


def canonical_bytes(value: Any) -> bytes:
    return _dump(encode_tree(value)).encode("ascii")


def canonical_text(value: Any) -> str:
    return _dump(encode_tree(value))


def parse_canonical(data: bytes | str) -> Any:
    return decode_tree(json.loads(data))


def _freeze(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _decimal_text(d: Decimal) -> str:
    d = d.normalize()
    text = format(d, "f")
    return "0" if text in ("-0", "0") else text


def _number(value: int | float) -> str:
    if isinstance(value, int):
        return str(value)
    if value == 0:
        return "0"
    if value.is_integer() and abs(value) < 1e21:
        return str(int(value))
    text = repr(value)
    if "e" in text:
        mantissa, exp = text.split("e")
        sign = "-" if exp.startswith("-") else "+"
        text = f"{mantissa}e{sign}{int(exp.lstrip('+-'))}"
    return text


def _dump(tree: Any) -> str:
    if tree is None:
        return "null"
    if tree is True:
        return "true"
    if tree is False:
        return "false"
    if isinstance(tree, str):
        return json.dumps(tree, ensure_ascii=True)
    if isinstance(tree, (int, float)):
        return _number(tree)
    if isinstance(tree, list):
        return "[" + ",".join(_dump(v) for v in tree) + "]"
    items = sorted(tree.items(), key=lambda kv: kv[0].encode("utf-16-be"))
    return "{" + ",".join(json.dumps(k, ensure_ascii=True) + ":" + _dump(v) for k, v in items) + "}"


# -- definition hash -------------------------------------------------------


@dataclass(frozen=True)
class DefinitionHash:
    digest: bytes

    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return self.digest.hex()

    @classmethod
    def from_hex(cls, text: str) -> "DefinitionHash":
        raw = bytes.fromhex(text)
        if len(raw) != 32:
            raise ValueError("definition hash must be 32 bytes")
        return cls(raw)


def project(defn: AgentDefinition) -> dict[str, Any]:
    """The 18-field policy-bearing projection that the hash covers."""
    return {name: getattr(defn, name) for name in HASHED_FIELDS}


def definition_hash(defn: AgentDefinition | dict[str, Any]) -> DefinitionHash:
    fields = defn if isinstance(defn, dict) else project(defn)
    projected = {name: fields.get(name) for name in HASHED_FIELDS}
    return DefinitionHash(hashlib.sha256(canonical_bytes(projected)).digest())
