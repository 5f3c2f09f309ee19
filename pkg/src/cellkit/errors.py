"""Exception hierarchy shared by every subsystem.

Each error carries a stable ``reason_code`` so it can travel over the wire
inside an ``error.rejected`` response and be re-raised as the same type on
the requesting side.
"""

from __future__ import annotations


class CellError(Exception):
    """Base class for all framework errors."""

    reason_code = "error"

    def __init__(self, detail: str = "", data: dict | None = None):
        super().__init__(detail or self.reason_code)
        self.detail = detail
        self.data = data or {}


# --- descriptor / model -------------------------------------------------

class SchemaViolation(CellError):
    reason_code = "schema_violation"

    def __init__(self, detail: str, path: str = ""):
        super().__init__(detail, {"path": path} if path else {})
        self.path = path


class DuplicateName(CellError):
    reason_code = "duplicate_name"


class UnknownOperation(CellError):
    reason_code = "unknown_operation"


class UnknownModel(CellError):
    reason_code = "unknown_model"


class UnknownPreference(CellError):
    reason_code = "unknown_preference"


# --- message bus --------------------------------------------------------

class DuplicateRegistration(CellError):
    reason_code = "duplicate_registration"


class ChainTypeMismatch(CellError):
    reason_code = "chain_type_mismatch"


class NoHandler(CellError):
    reason_code = "no_handler"


class HandlerFailure(CellError):
    reason_code = "handler_failure"


class RequestTimeout(CellError):
    reason_code = "timeout"


class ConnectionRefused(CellError):
    reason_code = "connection_refused"


class MalformedResponse(CellError):
    reason_code = "malformed_response"


# --- membership ---------------------------------------------------------

class PortInUse(CellError):
    reason_code = "port_in_use"


class InvalidInterface(CellError):
    reason_code = "invalid_interface"


class AllJoinAttemptsFailed(CellError):
    reason_code = "all_join_attempts_failed"


class DuplicateMember(CellError):
    reason_code = "duplicate_member"


class RegistryBusy(CellError):
    reason_code = "registry_busy"


class UnknownPrimary(CellError):
    reason_code = "unknown_primary"


class UnknownDestination(CellError):
    reason_code = "unknown_destination"


class SwitchFailed(CellError):
    reason_code = "switch_failed"


class UnknownMember(CellError):
    reason_code = "unknown_member"


# --- scheduler ----------------------------------------------------------

class NoFeasibleAllocation(CellError):
    reason_code = "no_feasible_allocation"


class NoCandidates(NoFeasibleAllocation):
    """Some task has an empty candidate set (vs. cumulative exhaustion)."""

    reason_code = "no_candidates"

    def __init__(self, task_id: str, detail: str = ""):
        super().__init__(detail or f"no feasible candidates for task {task_id!r}",
                         {"task_id": task_id})

    @property
    def task_id(self) -> str:
        return self.data.get("task_id", "")


class ExhaustedResource(CellError):
    reason_code = "exhausted_resource"


class SearchSpaceExceeded(CellError):
    reason_code = "search_space_exceeded"


# --- skill engine -------------------------------------------------------

class DuplicateExecutor(CellError):
    reason_code = "duplicate_executor"


class UnknownExecutor(CellError):
    reason_code = "unknown_executor"


class UnknownProtocol(CellError):
    reason_code = "unknown_protocol"


class LaunchFailed(CellError):
    reason_code = "launch_failed"


class EarlyExit(CellError):
    reason_code = "early_exit"


# --- deployment ---------------------------------------------------------

class BuildFailed(CellError):
    reason_code = "build_failed"


class UnknownTask(CellError):
    reason_code = "unknown_task"


class PartialTermination(CellError):
    reason_code = "partial_termination"

    def __init__(self, task_id: str, failed_nodes: list):
        super().__init__(f"termination of {task_id!r} incomplete",
                         {"task_id": task_id, "failed_nodes": failed_nodes})

    @property
    def task_id(self) -> str:
        return self.data.get("task_id", "")

    @property
    def failed_nodes(self) -> list:
        return self.data.get("failed_nodes", [])


# --- simnet -------------------------------------------------------------

class ScriptError(CellError):
    reason_code = "script_error"


_BY_CODE = {
    cls.reason_code: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, CellError)
}


def from_reason_code(code: str, detail: str = "", data: dict | None = None) -> CellError:
    """Rebuild a typed error from a wire-level rejection."""
    cls = _BY_CODE.get(code, CellError)
    err = CellError.__new__(cls)
    CellError.__init__(err, detail, data)
    return err
