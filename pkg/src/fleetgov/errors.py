"""Exception hierarchy shared across the governance kernel."""

from __future__ import annotations


class GovernanceError(Exception):
    """Base class for every error raised by fleetgov."""


# -- definitions -----------------------------------------------------------


class DefinitionInvalid(GovernanceError, ValueError):
    """A raw definition failed validation.

    The raised instance is the first violation found; ``violations`` holds
    every violation so callers can report them all at once.
    """

    def __init__(self, message: str):
        super().__init__(message)
        self.violations: list[DefinitionInvalid] = [self]


class UnknownEnumValue(DefinitionInvalid):
    def __init__(self, field: str, value: object):
        super().__init__(f"{field}: {value!r} is not a member of the closed set")
        self.field = field
        self.value = value


class DuplicateTool(DefinitionInvalid):
    def __init__(self, tools: frozenset[str] | set[str]):
        super().__init__(f"tools and denied_tools overlap: {sorted(tools)}")
        self.tools = frozenset(tools)


class MissingRequiredField(DefinitionInvalid):
    def __init__(self, field: str, agent_key: str | None = None):
        super().__init__(f"missing required field {field!r} (agent_key={agent_key!r})")
        self.field = field
        self.agent_key = agent_key


class UnknownField(DefinitionInvalid):
    def __init__(self, field: str):
        super().__init__(f"unknown definition field {field!r}")
        self.field = field


class InvalidFieldValue(DefinitionInvalid):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field


class UnknownKind(GovernanceError, ValueError):
    """A string outside one of the compiled-in closed sets."""

    def __init__(self, vocabulary: str, value: object):
        super().__init__(f"{value!r} is not a valid {vocabulary}")
        self.vocabulary = vocabulary
        self.value = value


class UnknownSignalKind(UnknownKind):
    def __init__(self, value: object):
        super().__init__("signal kind", value)


class UnknownPrincipalKind(UnknownKind):
    def __init__(self, value: object):
        super().__init__("principal kind", value)


class InvalidEvidenceKind(UnknownKind):
    def __init__(self, value: object):
        super().__init__("evidence kind", value)


class UnknownMode(UnknownKind):
    def __init__(self, value: object):
        super().__init__("human_loop mode", value)


# -- canonical encoding ----------------------------------------------------


class UnsupportedValueType(GovernanceError, TypeError):
    def __init__(self, value: object):
        super().__init__(f"no canonical wrapper registered for {type(value).__name__}")
        self.value = value


# -- scoring ---------------------------------------------------------------


class MultiplierBelowOne(GovernanceError, ValueError):
    def __init__(self, code: str, multiplier: object):
        super().__init__(
            f"interaction {code!r} has multiplier {multiplier} < 1.0; "
            "use credit factors for downward deltas"
        )
        self.code = code
        self.multiplier = multiplier


class DuplicateCode(GovernanceError, ValueError):
    def __init__(self, code: str):
        super().__init__(f"interaction code {code!r} is already registered")
        self.code = code


# -- storage ---------------------------------------------------------------


class StorageError(GovernanceError):
    pass


class LockTimeout(StorageError):
    def __init__(self, tenant: str, invocation: str, timeout: float):
        super().__init__(f"chain lock ({tenant}, {invocation}) not acquired in {timeout}s")


class LockUnavailable(LockTimeout):
    """Raised by evidence appends that could not take the chain lock."""


class KeyExists(StorageError):
    pass


class TenantMismatch(StorageError):
    pass


class UnknownStore(StorageError):
    pass


# -- evidence --------------------------------------------------------------


class ProviderLoadFailure(GovernanceError):
    pass


# -- versioning ------------------------------------------------------------


class DeclaredHashUnknown(GovernanceError, LookupError):
    pass


class VersionNotFound(GovernanceError, LookupError):
    pass


class MalformedSignature(GovernanceError, ValueError):
    pass


# -- weights ---------------------------------------------------------------


class OverrideLoosensError(GovernanceError):
    def __init__(self, scope: str, key: str, current_platform: object, attempted: object):
        super().__init__(
            f"{scope}:{key} override {attempted} would loosen platform default {current_platform}"
        )
        self.scope = scope
        self.key = key
        self.current_platform = current_platform
        self.attempted = attempted


class UnknownWeightKey(GovernanceError, KeyError):
    def __init__(self, scope: str, key: str):
        super().__init__(f"{scope}:{key}")
        self.scope = scope
        self.key = key

    def __str__(self) -> str:
        return f"unknown weight key {self.scope}:{self.key}"


class NotPending(GovernanceError):
    pass


# -- inbound ---------------------------------------------------------------


class MalformedAnchor(GovernanceError, ValueError):
    pass


class UnknownKeyId(GovernanceError):
    pass


class SignatureInvalid(GovernanceError):
    pass


class MalformedEnvelope(GovernanceError, ValueError):
    pass


# -- compliance ------------------------------------------------------------


class UnknownRegime(UnknownKind):
    def __init__(self, value: object):
        super().__init__("compliance regime", value)
