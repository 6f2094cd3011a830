"""Exception types shared across the data plane, control plane, and services.

Every error that can cross a process boundary carries a stable ``code`` so the
wire layer can round-trip it without losing its identity.
"""

from __future__ import annotations


class FlowlineError(Exception):
    """Base class for all package errors."""

    code = "ERROR"


class BadCoordinate(FlowlineError):
    """A row index falls outside the epoch's global range."""

    code = "BAD_COORDINATE"


class NotOwnedRow(FlowlineError):
    """A storage unit was asked to store a row it does not own."""

    code = "NOT_OWNED_ROW"


class DuplicateWrite(FlowlineError):
    """A cell that already holds a value was written again."""

    code = "DUPLICATE_WRITE"


class MissingCell(FlowlineError):
    """A read addressed a cell that has not been written."""

    code = "MISSING_CELL"


class AlreadyRegistered(FlowlineError):
    """A controller endpoint was registered twice with the same unit."""

    code = "ALREADY_REGISTERED"


class EpochRegression(FlowlineError):
    """An epoch reset did not strictly increase the epoch number."""

    code = "EPOCH_REGRESSION"


class WrongTask(FlowlineError):
    """A request addressed a controller serving a different task."""

    code = "WRONG_TASK"


class InvalidColumn(FlowlineError):
    """A column is not part of the addressed task's schema."""

    code = "INVALID_COLUMN"


class SizeMismatch(FlowlineError):
    """Parallel arguments (rows/values/lengths) disagree in length."""

    code = "SIZE_MISMATCH"


class LengthMismatch(FlowlineError):
    """A variable-length envelope's lengths do not sum to its payload."""

    code = "LENGTH_MISMATCH"


class ChannelBusy(FlowlineError):
    """An async weight transfer was submitted while one is in flight."""

    code = "CHANNEL_BUSY"


class StaleSubmission(FlowlineError):
    """A weight version at or below the last submitted one was offered."""

    code = "STALE_SUBMISSION"


class VersionRegression(FlowlineError):
    """A rollout instance was asked to load weights older than it runs."""

    code = "VERSION_REGRESSION"


class ControllerUnreachable(FlowlineError):
    """A client exhausted its retries talking to a controller."""

    code = "CONTROLLER_UNREACHABLE"


class FetchInconsistent(FlowlineError):
    """Granted metadata addressed a cell storage does not hold.

    This means the notification/consumption invariants were violated
    somewhere upstream, so it is surfaced loudly instead of retried.
    """

    code = "FETCH_INCONSISTENT"


class MemberUnreachable(FlowlineError):
    """A consumer-group member could not be reached during fan-out."""

    code = "MEMBER_UNREACHABLE"


class ProtocolError(FlowlineError):
    """A wire frame could not be decoded."""

    code = "PROTOCOL"


class ScenarioInvalid(FlowlineError):
    """A simulation scenario fails validation."""

    code = "SCENARIO_INVALID"


class SimInvariant(FlowlineError):
    """A runtime invariant check failed inside the simulator."""

    code = "SIM_INVARIANT"


class InfeasibleBudget(FlowlineError):
    """A device budget cannot cover one device per pipeline task."""

    code = "INFEASIBLE_BUDGET"


_BY_CODE: dict[str, type[FlowlineError]] = {
    cls.code: cls
    for cls in [
        FlowlineError,
        BadCoordinate,
        NotOwnedRow,
        DuplicateWrite,
        MissingCell,
        AlreadyRegistered,
        EpochRegression,
        WrongTask,
        InvalidColumn,
        SizeMismatch,
        LengthMismatch,
        ChannelBusy,
        StaleSubmission,
        VersionRegression,
        ControllerUnreachable,
        FetchInconsistent,
        MemberUnreachable,
        ProtocolError,
        ScenarioInvalid,
        SimInvariant,
        InfeasibleBudget,
    ]
}


def error_for_code(code: str, message: str) -> FlowlineError:
    """Rebuild the typed exception for a wire-transported error code."""
    cls = _BY_CODE.get(code, FlowlineError)
    return cls(message)
