"""Exception types shared across the package.

Everything raised on purpose derives from MixrouteError so callers can
catch the package's failures with one clause while programming errors
(TypeError and friends) still propagate.
"""

from __future__ import annotations


class MixrouteError(Exception):
    """Base class for all deliberate failures."""


# ---- bank construction ----

class ZeroVector(MixrouteError):
    """Raised when an embedding to be normalized has (near-)zero norm."""


class MissingModelResponse(MixrouteError):
    """A record lacks a response, correctness bit, or token count for a registered model."""

    def __init__(self, query_id: str, model_id: str):
        super().__init__(f"record {query_id!r} has no complete entry for model {model_id!r}")
        self.query_id = query_id
        self.model_id = model_id


class EmbedderFailure(MixrouteError):
    """Embedding call failed; carries the offending query/model identity."""

    def __init__(self, what: str, cause: Exception | None = None):
        super().__init__(f"embedding failed for {what}" + (f": {cause}" if cause else ""))
        self.what = what
        self.cause = cause


class DuplicateModel(MixrouteError):
    """Extension would register a model_id that already exists in the bank."""


class IncompleteCoverage(MixrouteError):
    """Extension input leaves (query, model) cells without data."""

    def __init__(self, missing: list[tuple[str, str]]):
        shown = ", ".join(f"({q},{m})" for q, m in missing[:8])
        more = "" if len(missing) <= 8 else f" and {len(missing) - 8} more"
        super().__init__(f"missing (query, model) pairs: {shown}{more}")
        self.missing = missing


# ---- bank persistence ----

class FormatVersionMismatch(MixrouteError):
    """Stored bank was written under a different format version."""


class ChecksumMismatch(MixrouteError):
    """A sidecar file's digest does not match the manifest."""


class TruncatedFile(MixrouteError):
    """A sidecar file is missing bytes relative to the manifest."""


# ---- scoring ----

class AlphaOutOfRange(MixrouteError):
    """Rank parameter outside [1, len(values)]."""


class EmptyBank(MixrouteError):
    """Operation needs at least one bank row."""


class KOutOfRange(MixrouteError):
    """Candidate count outside [1, M]."""


class DegenerateScores(MixrouteError):
    """All fine-grained scores are zero; the switch has no signal."""


# ---- orchestrator ----

class TemplateMissingPlaceholder(MixrouteError):
    """Aggregation template lacks a required placeholder."""

    def __init__(self, placeholder: str):
        super().__init__(f"aggregation template is missing the {placeholder!r} placeholder")
        self.placeholder = placeholder


# ---- gateway ----

class GatewayError(MixrouteError):
    """Base class for provider-side failures."""


class ProviderError(GatewayError):
    """Provider returned a non-retryable error (bad status, malformed body, missing fixture key)."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class ProviderTimeout(GatewayError):
    """Call exceeded its time budget; retryable."""


class RateLimited(GatewayError):
    """Provider returned HTTP 429; retryable."""


class GatewayUnavailable(GatewayError):
    """No provider could serve a required call after retries."""


class UnknownModel(GatewayError):
    """Chat requested for a model_id with no registered backend."""


# ---- harness / interface ----

class FixtureIncomplete(MixrouteError):
    """Replay fixture lacks entries the evaluation needs."""

    def __init__(self, missing: list):
        shown = "; ".join(
            "/".join(str(p) for p in m) if isinstance(m, tuple) else str(m) for m in missing[:6]
        )
        more = "" if len(missing) <= 6 else f" ... and {len(missing) - 6} more"
        super().__init__(f"replay fixture incomplete: {shown}{more}")
        self.missing = missing


class ConfigError(MixrouteError):
    """Service or CLI configuration is invalid; message names the offending field."""


class MalformedBank(MixrouteError):
    """Bank directory cannot be read at all (not a bank, unreadable manifest)."""
