"""Record stores with atomic upsert, per-chain locking and tenant namespaces.

Two backends share one contract: :class:`MemoryStorage` and the embedded
durable :class:`SQLiteStorage`. Records are JSON objects keyed by tuples whose
first component is the tenant id; a record's ``tenant_id`` must match its key,
so no store accepts a record for another tenant's namespace.

Concurrency contract: every backend is safe for concurrent use from multiple
threads of one process. Cross-process writers against one data directory are
out of contract (single writer per invocation).
"""

from __future__ import annotations

import json
import sqlite3
import threading
from abc import ABC, abstractmethod
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

from .errors import KeyExists, LockTimeout, TenantMismatch, UnknownStore

STORES = (
    "versions",
    "invocations",
    "principal_trust",
    "evidence",
    "weight_overrides",
    "weight_changes",
    "weight_suggestions",
    "pending_recommendations",
    "breach_notifications",
    "cut_ledger",
)

# Namespace for records that belong to no tenant (platform weights, etc.).
PLATFORM = "__platform__"

Key = tuple
Record = dict[str, Any]
Clock = Callable[[], datetime]


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def _encode(value: Record) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def _key_text(key: Key) -> str:
    return json.dumps(list(key), separators=(",", ":"), ensure_ascii=True)


class KeyedLocks:
    """Mutex registry keyed by identifiers rather than rows.

    A lock exists for a key whether or not any row does, so an empty chain
    can be locked before its first append.
    """

    def __init__(self) -> None:
        self._guard = threading.Lock()
        self._locks: dict[Any, list] = {}  # key -> [lock, refcount]

    @contextmanager
    def hold(self, key: Any, timeout: float) -> Iterator[None]:
        with self._guard:
            entry = self._locks.setdefault(key, [threading.Lock(), 0])
            entry[1] += 1
        acquired = entry[0].acquire(timeout=timeout)
        try:
            if not acquired:
                raise LockTimeout(*key, timeout)
            yield
        finally:
            if acquired:
                entry[0].release()
            with self._guard:
                entry[1] -= 1
                if entry[1] == 0:
                    del self._locks[key]


class Storage(ABC):
    def __init__(self, clock: Clock | None = None):
        self.clock = clock or utcnow
        self._lock = threading.RLock()
        self._depth = 0
        self._owner: int | None = None
        self._chain_locks = KeyedLocks()

    # -- backend primitives, called with the transaction held --------------

    @abstractmethod
    def _read(self, store: str, key: Key) -> str | None: ...

    @abstractmethod
    def _write(self, store: str, key: Key, text: str | None) -> None: ...

    @abstractmethod
    def _rows(self, store: str, tenant: str | None) -> list[tuple[Key, str]]: ...

    @abstractmethod
    def _begin(self) -> None: ...

    @abstractmethod
    def _commit(self) -> None: ...

    @abstractmethod
    def _rollback(self) -> None: ...

    # -- public contract ---------------------------------------------------

    def now(self) -> datetime:
        return self.clock()

    @contextmanager
    def transaction(self) -> Iterator["Storage"]:
        """All-or-nothing scope; nested uses join the outermost transaction."""
        with self._lock:
            outermost = self._depth == 0
            if outermost:
                self._owner = threading.get_ident()
                self._begin()
            self._depth += 1
            try:
                yield self
            except BaseException:
                self._depth -= 1
                if outermost:
                    self._owner = None
                    self._rollback()
                raise
            else:
                self._depth -= 1
                if outermost:
                    self._owner = None
                    self._commit()

    def in_transaction(self) -> bool:
        return self._owner == threading.get_ident()

    @contextmanager
    def chain_lock(self, tenant: str, invocation: str, timeout: float = 10.0) -> Iterator[None]:
        if self.in_transaction():
            # Taking a chain lock while holding the store lock can deadlock
            # against a writer that holds the chain lock and waits for us.
            raise RuntimeError("chain locks must be taken outside storage transactions")
        with self._chain_locks.hold((tenant, invocation), timeout):
            yield

    def with_chain_lock(self, tenant: str, invocation: str, action: Callable[[], Any], timeout: float = 10.0) -> Any:
        """Run ``action`` with exclusive access to one chain's tail.

        The action runs inside a transaction, so a raising action leaves the
        chain exactly as it was.
        """
        with self.chain_lock(tenant, invocation, timeout):
            with self.transaction():
                return action()

    def get(self, store: str, key: Key) -> Record | None:
        self._check(store, key)
        with self.transaction():
            text = self._read(store, key)
        return None if text is None else json.loads(text)

    def put(self, store: str, key: Key, value: Record) -> Record:
        self._check(store, key, value)
        with self.transaction():
            self._write(store, key, _encode(value))
        return value

    def insert(self, store: str, key: Key, value: Record) -> Record:
        self._check(store, key, value)
        with self.transaction():
            if self._read(store, key) is not None:
                raise KeyExists(f"{store}{list(key)}")
            self._write(store, key, _encode(value))
        return value

    def delete(self, store: str, key: Key) -> bool:
        self._check(store, key)
        with self.transaction():
            existed = self._read(store, key) is not None
            if existed:
                self._write(store, key, None)
        return existed

    def upsert(self, store: str, key: Key, merge: Callable[[Record | None], Record]) -> Record:
        """Atomic insert-or-merge: ``merge(current_or_None)`` becomes the record."""
        self._check(store, key)
        with self.transaction():
            text = self._read(store, key)
            value = merge(None if text is None else json.loads(text))
            self._check(store, key, value)
            self._write(store, key, _encode(value))
        return value

    def scan(self, store: str, prefix: Sequence = ()) -> list[tuple[Key, Record]]:
        """Records whose key starts with ``prefix``, ordered by key."""
        self._check_store(store)
        prefix = tuple(prefix)
        with self.transaction():
            rows = self._rows(store, prefix[0] if prefix else None)
        n = len(prefix)
        out = [(k, json.loads(t)) for k, t in rows if k[:n] == prefix]
        out.sort(key=lambda kv: kv[0])
        return out

    def count(self, store: str, prefix: Sequence = ()) -> int:
        return len(self.scan(store, prefix))

    def tenants(self, store: str) -> list[str]:
        with self.transaction():
            rows = self._rows(store, None)
        return sorted({k[0] for k, _ in rows})

    def dump(self, tenant: str | None = None) -> dict[str, list[tuple[Key, Record]]]:
        """Full dump of every store, optionally filtered to one tenant."""
        prefix = () if tenant is None else (tenant,)
        return {store: self.scan(store, prefix) for store in STORES}

    def export_ndjson(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for store in STORES:
            with self.transaction():
                rows = sorted(self._rows(store, None))
            with open(directory / f"{store}.ndjson", "w", encoding="utf-8") as fh:
                for key, text in rows:
                    fh.write('{"key":%s,"value":%s}\n' % (_key_text(key), text))

    def import_ndjson(self, directory: str | Path) -> int:
        directory = Path(directory)
        n = 0
        with self.transaction():
            for store in STORES:
                path = directory / f"{store}.ndjson"
                if not path.exists():
                    continue
                for line in path.read_text(encoding="utf-8").splitlines():
                    if not line.strip():
                        continue
                    row = json.loads(line)
                    self.put(store, tuple(row["key"]), row["value"])
                    n += 1
        return n

    def close(self) -> None:
        pass

    def __enter__(self) -> "Storage":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- validation --------------------------------------------------------

    @staticmethod
    def _check_store(store: str) -> None:
        if store not in STORES:
            raise UnknownStore(store)

    def _check(self, store: str, key: Key, value: Record | None = None) -> None:
        self._check_store(store)
        if not isinstance(key, tuple) or not key or not isinstance(key[0], str) or not key[0]:
            raise ValueError(f"malformed key {key!r}: first component must be a tenant id")
        for part in key:
            if not isinstance(part, (str, int)) or isinstance(part, bool):
                raise ValueError(f"malformed key component {part!r}")
        if value is not None and value.get("tenant_id", key[0]) != key[0]:
            raise TenantMismatch(f"record for {value.get('tenant_id')!r} written under {key[0]!r}")


class MemoryStorage(Storage):
    """Volatile backend. Records are held as encoded JSON text."""

    def __init__(self, clock: Clock | None = None):
        super().__init__(clock)
        self._data: dict[str, dict[Key, str]] = {s: {} for s in STORES}
        self._undo: list[tuple[str, Key, str | None]] = []

    def _read(self, store: str, key: Key) -> str | None:
        return self._data[store].get(key)

    def _write(self, store: str, key: Key, text: str | None) -> None:
        table = self._data[store]
        self._undo.append((store, key, table.get(key)))
        if text is None:
            table.pop(key, None)
        else:
            table[key] = text

    def _rows(self, store: str, tenant: str | None) -> list[tuple[Key, str]]:
        items = self._data[store].items()
        if tenant is None:
            return list(items)
        return [(k, t) for k, t in items if k[0] == tenant]

    def _begin(self) -> None:
        self._undo = []

    def _commit(self) -> None:
        self._undo = []

    def _rollback(self) -> None:
        for store, key, old in reversed(self._undo):
            if old is None:
                self._data[store].pop(key, None)
            else:
                self._data[store][key] = old
        self._undo = []


class SQLiteStorage(Storage):
    """Embedded durable backend on a single SQLite file."""

    def __init__(self, path: str | Path, clock: Clock | None = None):
        super().__init__(clock)
        self.path = str(path)
        self._conn = sqlite3.connect(self.path, isolation_level=None, check_same_thread=False)
        self._conn.execute("PRAGMA journal_mode=WAL")
        self._conn.execute(
            "CREATE TABLE IF NOT EXISTS records ("
            " store TEXT NOT NULL, tenant TEXT NOT NULL, k TEXT NOT NULL, v TEXT NOT NULL,"
            " PRIMARY KEY (store, k))"
        )
        self._conn.execute("CREATE INDEX IF NOT EXISTS records_tenant ON records (store, tenant)")

    def _read(self, store: str, key: Key) -> str | None:
        row = self._conn.execute(
            "SELECT v FROM records WHERE store = ? AND k = ?", (store, _key_text(key))
        ).fetchone()
        return None if row is None else row[0]

    def _write(self, store: str, key: Key, text: str | None) -> None:
        if text is None:
            self._conn.execute("DELETE FROM records WHERE store = ? AND k = ?", (store, _key_text(key)))
        else:
            self._conn.execute(
                "INSERT INTO records (store, tenant, k, v) VALUES (?, ?, ?, ?)"
                " ON CONFLICT (store, k) DO UPDATE SET v = excluded.v",
                (store, key[0], _key_text(key), text),
            )

    def _rows(self, store: str, tenant: str | None) -> list[tuple[Key, str]]:
        if tenant is None:
            cur = self._conn.execute("SELECT k, v FROM records WHERE store = ?", (store,))
        else:
            cur = self._conn.execute(
                "SELECT k, v FROM records WHERE store = ? AND tenant = ?", (store, tenant)
            )
        return [(tuple(json.loads(k)), v) for k, v in cur]

    def _begin(self) -> None:
        self._conn.execute("BEGIN IMMEDIATE")

    def _commit(self) -> None:
        self._conn.execute("COMMIT")

    def _rollback(self) -> None:
        self._conn.execute("ROLLBACK")

    def close(self) -> None:
        with self._lock:
            self._conn.close()


def open_storage(data_dir: str | Path | None = None, clock: Clock | None = None) -> Storage:
    """SQLite storage under ``data_dir``, or memory storage when it is None."""
    if data_dir is None:
        return MemoryStorage(clock)
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    return SQLiteStorage(data_dir / "governance.sqlite3", clock)
