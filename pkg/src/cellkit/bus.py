"""Typed request/response messaging with registry-pattern dispatch.

Every message is an envelope {msg_type, msg_id, payload} whose payload
validates against the vocabulary schema for its type; payloads that fail
validation never reach a handler. Services register either a dedicated
handler per message type or a pipeline chaining several handlers, with
chain compatibility checked at registration. Dispatch precedence is total:
pipeline > dedicated > typed rejection.

On the real transport the envelope travels as UTF-8 JSON behind a 4-byte
big-endian length prefix (framing lives in the socket runtime; the
simulated fabric is message-oriented and carries the same encoded bytes).
"""

from __future__ import annotations

import inspect
import json
from dataclasses import dataclass
from importlib import resources
from typing import Awaitable, Callable, Sequence, Union

import jsonschema

from .errors import (
    CellError,
    ChainTypeMismatch,
    DuplicateRegistration,
    HandlerFailure,
    MalformedResponse,
    NoHandler,
    SchemaViolation,
    from_reason_code,
)
from .model import parse_endpoint

MAX_MESSAGE_BYTES = 4 * 1024 * 1024


def _inline_refs(schema, defs: dict):
    """Resolve non-recursive #/$defs/... references at load time; ref
    indirection dominates validation cost otherwise."""
    if isinstance(schema, dict):
        ref = schema.get("$ref")
        if isinstance(ref, str) and ref.startswith("#/$defs/"):
            return _inline_refs(defs[ref.rsplit("/", 1)[1]], defs)
        return {k: _inline_refs(v, defs) for k, v in schema.items()}
    if isinstance(schema, list):
        return [_inline_refs(item, defs) for item in schema]
    return schema


def _load_vocabulary() -> dict:
    with resources.files("cellkit.schemas").joinpath("vocabulary.json").open("r") as fh:
        doc = json.load(fh)
    validators = {}
    for msg_type, schema in doc["messages"].items():
        inlined = _inline_refs(schema, doc["$defs"])
        validators[msg_type] = jsonschema.Draft202012Validator(inlined)
    return validators


VOCABULARY = _load_vocabulary()

_VERDICT_CACHE: dict[str, bool] = {}
_VERDICT_CACHE_MAX = 8192


def validate_payload(msg_type: str, payload: dict) -> None:
    validator = VOCABULARY.get(msg_type)
    if validator is None:
        raise SchemaViolation(f"message type {msg_type!r} not in vocabulary", "")
    # identical payloads repeat constantly (presence datagrams, acks):
    # remember byte-identical payloads already proven valid
    try:
        key = msg_type + "\x00" + json.dumps(payload, sort_keys=True,
                                             separators=(",", ":"))
    except (TypeError, ValueError):
        key = None
    if key is not None and key in _VERDICT_CACHE:
        return
    error = jsonschema.exceptions.best_match(validator.iter_errors(payload))
    if error is not None:
        pointer = "/" + "/".join(str(p) for p in error.absolute_path)
        raise SchemaViolation(f"{msg_type}: {error.message}", pointer)
    if key is not None:
        if len(_VERDICT_CACHE) >= _VERDICT_CACHE_MAX:
            _VERDICT_CACHE.pop(next(iter(_VERDICT_CACHE)))
        _VERDICT_CACHE[key] = True


@dataclass(frozen=True)
class Message:
    msg_type: str
    msg_id: str
    payload: dict

    @classmethod
    def make(cls, msg_type: str, payload: dict, msg_id: str) -> "Message":
        validate_payload(msg_type, payload)
        return cls(msg_type, msg_id, payload)

    def reply(self, msg_type: str, payload: dict) -> "Message":
        """Response correlated to this request by msg_id."""
        return Message.make(msg_type, payload, self.msg_id)

    def reject(self, error: CellError) -> "Message":
        return Message.make("error.rejected", {
            "reason_code": error.reason_code,
            "detail": error.detail or str(error),
            "data": error.data,
        }, self.msg_id)

    def encode(self) -> bytes:
        return json.dumps(
            {"msg_type": self.msg_type, "msg_id": self.msg_id, "payload": self.payload},
            separators=(",", ":")).encode("utf-8")

    @classmethod
    def decode(cls, data: bytes) -> "Message":
        if len(data) > MAX_MESSAGE_BYTES:
            raise SchemaViolation("message exceeds size limit", "")
        try:
            raw = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SchemaViolation(f"undecodable message: {exc}", "") from exc
        if (not isinstance(raw, dict)
                or not isinstance(raw.get("msg_type"), str)
                or not isinstance(raw.get("msg_id"), str)
                or not isinstance(raw.get("payload"), dict)):
            raise SchemaViolation("envelope must carry msg_type, msg_id, payload", "")
        return cls.make(raw["msg_type"], raw["payload"], raw["msg_id"])

    def raise_if_rejected(self) -> "Message":
        if self.msg_type == "error.rejected":
            raise from_reason_code(self.payload["reason_code"],
                                   self.payload.get("detail", ""),
                                   self.payload.get("data"))
        return self


HandlerFn = Callable[[Message], Union[Message, Awaitable[Message]]]


@dataclass(frozen=True)
class Handler:
    """A message processor with declared input/output types."""

    input_type: str
    output_type: str
    fn: HandlerFn

    def __post_init__(self):
        for t in (self.input_type, self.output_type):
            if t not in VOCABULARY:
                raise SchemaViolation(f"handler type {t!r} not in vocabulary", "")


class HandlerRegistry:
    """Dedicated handlers plus start-type-keyed pipelines; static after wiring."""

    def __init__(self):
        self._dedicated: dict[str, Handler] = {}
        self._pipelines: dict[str, tuple[Handler, ...]] = {}

    def register_handler(self, handler: Handler) -> None:
        if handler.input_type in self._dedicated:
            raise DuplicateRegistration(
                f"dedicated handler for {handler.input_type!r} already registered")
        self._dedicated[handler.input_type] = handler

    def register_pipeline(self, handlers: Sequence[Handler]) -> None:
        if not handlers:
            raise ChainTypeMismatch("pipeline must contain at least one handler")
        for left, right in zip(handlers, handlers[1:]):
            if left.output_type != right.input_type:
                raise ChainTypeMismatch(
                    f"handler output {left.output_type!r} does not feed "
                    f"handler input {right.input_type!r}")
        start = handlers[0].input_type
        if start in self._pipelines:
            raise DuplicateRegistration(
                f"pipeline starting at {start!r} already registered")
        self._pipelines[start] = tuple(handlers)

    def resolve(self, msg_type: str):
        """(kind, handlers) under pipeline > dedicated > None precedence."""
        if msg_type in self._pipelines:
            return "pipeline", self._pipelines[msg_type]
        if msg_type in self._dedicated:
            return "dedicated", (self._dedicated[msg_type],)
        return None, ()

    async def dispatch(self, message: Message) -> Message:
        """Run the matching pipeline or dedicated handler; raise NoHandler otherwise."""
        kind, handlers = self.resolve(message.msg_type)
        if kind is None:
            raise NoHandler(f"no handler registered for {message.msg_type!r}")
        current = message
        for index, handler in enumerate(handlers):
            try:
                result = handler.fn(current)
                if inspect.isawaitable(result):
                    result = await result
            except CellError:
                raise
            except Exception as exc:
                raise HandlerFailure(
                    f"handler {index} for {message.msg_type!r} failed: {exc}",
                    {"handler_index": index}) from exc
            if result.msg_type != handler.output_type:
                raise HandlerFailure(
                    f"handler {index} for {message.msg_type!r} produced "
                    f"{result.msg_type!r}, declared {handler.output_type!r}",
                    {"handler_index": index})
            current = result
        return current

    async def dispatch_or_reject(self, message: Message) -> Message:
        """Dispatch, mapping errors onto typed rejection responses."""
        try:
            response = await self.dispatch(message)
        except CellError as exc:
            return message.reject(exc)
        except Exception as exc:  # defensive: never leak a raw traceback on the wire
            return message.reject(CellError(f"internal error: {exc}"))
        return Message(response.msg_type, message.msg_id, response.payload)


async def send_request(runtime, endpoint: str, message: Message,
                       timeout: float = 5.0) -> Message:
    """One request, one correlated response; rejections re-raised as typed errors."""
    host, port = parse_endpoint(endpoint)
    raw = await runtime.request_bytes(host, port, message.encode(), timeout)
    try:
        response = Message.decode(raw)
    except SchemaViolation as exc:
        raise MalformedResponse(f"response from {endpoint}: {exc.detail}") from exc
    if response.msg_id != message.msg_id:
        raise MalformedResponse(
            f"response correlation mismatch: sent {message.msg_id}, "
            f"got {response.msg_id}")
    return response.raise_if_rejected()
