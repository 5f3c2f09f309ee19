"""Message envelope, dispatch precedence, and the framed TCP transport."""

import asyncio

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellkit.bus import (
    Handler,
    HandlerRegistry,
    Message,
    send_request,
    validate_payload,
)
from cellkit.errors import (
    ChainTypeMismatch,
    ConnectionRefused,
    DuplicateRegistration,
    HandlerFailure,
    MalformedResponse,
    NoHandler,
    RequestTimeout,
    SchemaViolation,
    UnknownMember,
)
from cellkit.runtime_real import RealRuntime


def msg(msg_type="cell.leave", payload=None, msg_id="ab" * 16):
    return Message.make(msg_type, payload if payload is not None else
                        {"node_id": "n1"}, msg_id)


class TestEnvelope:
    def test_encode_decode_roundtrip(self):
        m = msg()
        assert Message.decode(m.encode()) == m

    def test_unknown_type_rejected(self):
        with pytest.raises(SchemaViolation):
            Message.make("cell.explode", {}, "ab" * 16)

    def test_payload_validated_against_vocabulary(self):
        with pytest.raises(SchemaViolation):
            Message.make("cell.leave", {"node": "wrong-field"}, "ab" * 16)

    def test_extra_payload_fields_rejected(self):
        with pytest.raises(SchemaViolation):
            validate_payload("cell.query", {"surprise": 1})

    def test_announce_cell_size_only_for_coordinators(self):
        base = {"node_id": "n1", "role": "primary",
                "control_endpoint": "10.0.0.1:1", "registry_switch_endpoint": "10.0.0.1:2"}
        validate_payload("node.announce", base)
        with pytest.raises(SchemaViolation):
            validate_payload("node.announce", {**base, "cell_size": 3})
        coord = {**base, "role": "coordinator", "cell_size": 3}
        validate_payload("node.announce", coord)
        with pytest.raises(SchemaViolation):
            del coord["cell_size"]
            validate_payload("node.announce", coord)

    def test_rejection_roundtrips_as_typed_error(self):
        request = msg()
        rejection = request.reject(UnknownMember("nope"))
        assert rejection.msg_id == request.msg_id
        with pytest.raises(UnknownMember):
            Message.decode(rejection.encode()).raise_if_rejected()


def run(coro):
    return asyncio.run(coro)


def echo_handler(in_type="cell.leave", out_type="cell.leave.ok"):
    def fn(message):
        return message.reply(out_type, {"node_id": message.payload["node_id"]})
    return Handler(in_type, out_type, fn)


class TestRegistry:
    def test_dedicated_handler_invoked(self):
        registry = HandlerRegistry()
        registry.register_handler(echo_handler())
        response = run(registry.dispatch(msg()))
        assert response.msg_type == "cell.leave.ok"

    def test_duplicate_dedicated_registration(self):
        registry = HandlerRegistry()
        registry.register_handler(echo_handler())
        with pytest.raises(DuplicateRegistration):
            registry.register_handler(echo_handler())

    def test_chain_type_mismatch_checked_at_registration(self):
        registry = HandlerRegistry()
        a = Handler("cell.leave", "cell.leave.ok", lambda m: m)
        b = Handler("cell.query", "cell.query.ok", lambda m: m)
        with pytest.raises(ChainTypeMismatch):
            registry.register_pipeline([a, b])

    def test_pipeline_wins_over_dedicated(self):
        registry = HandlerRegistry()
        registry.register_handler(Handler(
            "cell.leave", "cell.leave.ok",
            lambda m: m.reply("cell.leave.ok", {"node_id": "dedicated"})))
        stage1 = Handler("cell.leave", "cell.leave",
                         lambda m: m.reply("cell.leave", {"node_id": "stage1"}))
        stage2 = Handler("cell.leave", "cell.leave.ok",
                         lambda m: m.reply("cell.leave.ok",
                                           {"node_id": m.payload["node_id"] + "+stage2"}))
        registry.register_pipeline([stage1, stage2])
        response = run(registry.dispatch(msg()))
        assert response.payload["node_id"] == "stage1+stage2"

    def test_unregistered_type_rejected(self):
        registry = HandlerRegistry()
        with pytest.raises(NoHandler):
            run(registry.dispatch(msg()))
        response = run(registry.dispatch_or_reject(msg()))
        assert response.msg_type == "error.rejected"
        assert response.payload["reason_code"] == "no_handler"

    def test_handler_failure_carries_pipeline_index(self):
        registry = HandlerRegistry()

        def boom(message):
            raise RuntimeError("kaput")

        stage1 = Handler("cell.leave", "cell.leave",
                         lambda m: m.reply("cell.leave", m.payload))
        stage2 = Handler("cell.leave", "cell.leave.ok", boom)
        registry.register_pipeline([stage1, stage2])
        with pytest.raises(HandlerFailure) as err:
            run(registry.dispatch(msg()))
        assert err.value.data["handler_index"] == 1

    def test_async_handlers_supported(self):
        registry = HandlerRegistry()

        async def fn(message):
            await asyncio.sleep(0)
            return message.reply("cell.leave.ok", {"node_id": "async"})

        registry.register_handler(Handler("cell.leave", "cell.leave.ok", fn))
        response = run(registry.dispatch(msg()))
        assert response.payload["node_id"] == "async"

    @settings(max_examples=60, deadline=None)
    @given(st.lists(
        st.sampled_from(["cell.leave", "cell.query", "node.announce", "cell.join"]),
        min_size=0, max_size=4, unique=True),
        st.lists(
        st.sampled_from(["cell.leave", "cell.query", "node.announce", "cell.join"]),
        min_size=0, max_size=4, unique=True))
    def test_dispatch_precedence_total_and_deterministic(self, dedicated, pipelines):
        registry = HandlerRegistry()
        ok_type = "cell.leave.ok"
        for t in dedicated:
            registry.register_handler(Handler(
                t, ok_type, lambda m: m.reply(ok_type, {"node_id": "dedicated"})))
        for t in pipelines:
            registry.register_pipeline([Handler(
                t, ok_type, lambda m: m.reply(ok_type, {"node_id": "pipeline"}))])
        for t in ["cell.leave", "cell.query", "node.announce", "cell.join",
                  "instance.status"]:
            kind, handlers = registry.resolve(t)
            if t in pipelines:
                assert kind == "pipeline"
            elif t in dedicated:
                assert kind == "dedicated"
            else:
                assert kind is None
            assert registry.resolve(t) == (kind, handlers)


class TestTransport:
    def make_server_registry(self):
        registry = HandlerRegistry()
        registry.register_handler(echo_handler())

        async def slow(message):
            await asyncio.sleep(1.0)
            return message.reply("cell.query.ok", {
                "coordinator": "c", "members": [], "deployments": {}})

        registry.register_handler(Handler("cell.query", "cell.query.ok", slow))
        return registry

    def test_echo_roundtrip(self):
        async def scenario():
            rt = RealRuntime()
            registry = self.make_server_registry()

            async def stream_handler(data):
                return (await registry.dispatch_or_reject(Message.decode(data))).encode()

            server = await rt.listen_stream("127.0.0.1", 0, stream_handler)
            try:
                request = Message.make("cell.leave", {"node_id": "x"}, rt.new_msg_id())
                response = await send_request(rt, server.endpoint, request, timeout=2.0)
                assert response.msg_type == "cell.leave.ok"
                assert response.msg_id == request.msg_id
            finally:
                server.close()

        run(scenario())

    def test_connection_refused(self):
        async def scenario():
            rt = RealRuntime()
            request = Message.make("cell.leave", {"node_id": "x"}, rt.new_msg_id())
            with pytest.raises(ConnectionRefused):
                await send_request(rt, "127.0.0.1:1", request, timeout=1.0)

        run(scenario())

    def test_timeout(self):
        async def scenario():
            rt = RealRuntime()
            registry = self.make_server_registry()

            async def stream_handler(data):
                return (await registry.dispatch_or_reject(Message.decode(data))).encode()

            server = await rt.listen_stream("127.0.0.1", 0, stream_handler)
            try:
                request = Message.make("cell.query", {}, rt.new_msg_id())
                with pytest.raises(RequestTimeout):
                    await send_request(rt, server.endpoint, request, timeout=0.1)
            finally:
                server.close()

        run(scenario())

    def test_malformed_response_detected(self):
        async def scenario():
            rt = RealRuntime()

            async def bad_handler(data):
                return b"this is not json"

            server = await rt.listen_stream("127.0.0.1", 0, bad_handler)
            try:
                request = Message.make("cell.leave", {"node_id": "x"}, rt.new_msg_id())
                with pytest.raises(MalformedResponse):
                    await send_request(rt, server.endpoint, request, timeout=1.0)
            finally:
                server.close()

        run(scenario())

    def test_concurrent_requests_keep_correlation(self):
        async def scenario():
            rt = RealRuntime()

            async def stream_handler(data):
                message = Message.decode(data)
                await asyncio.sleep(0.001 * (hash(message.msg_id) % 7))
                return message.reply("cell.leave.ok",
                                     {"node_id": message.payload["node_id"]}).encode()

            server = await rt.listen_stream("127.0.0.1", 0, stream_handler)
            try:
                async def one(i):
                    request = Message.make("cell.leave", {"node_id": f"n{i}"},
                                           rt.new_msg_id())
                    response = await send_request(rt, server.endpoint, request, 5.0)
                    assert response.msg_id == request.msg_id
                    assert response.payload["node_id"] == f"n{i}"

                await asyncio.gather(*(one(i) for i in range(50)))
            finally:
                server.close()

        run(scenario())

    def test_http_roundtrip(self):
        async def scenario():
            rt = RealRuntime()

            async def handler(method, path, body):
                if method == "PUT" and path == "/registration":
                    return 200, {"ok": True, "echo": body}
                return 404, {"error": "not found"}

            server = await rt.listen_http("127.0.0.1", 0, handler)
            try:
                status, data = await rt.http_json(
                    "127.0.0.1", server.port, "PUT", "/registration",
                    {"target_coordinator_endpoint": "1.2.3.4:5"}, 2.0)
                assert status == 200
                assert data["echo"]["target_coordinator_endpoint"] == "1.2.3.4:5"
                status, _ = await rt.http_json(
                    "127.0.0.1", server.port, "GET", "/nope", None, 2.0)
                assert status == 404
            finally:
                server.close()

        run(scenario())

    def test_port_in_use(self):
        from cellkit.errors import PortInUse

        async def scenario():
            rt = RealRuntime()
            server = await rt.listen_stream("127.0.0.1", 0, lambda d: d)
            try:
                with pytest.raises(PortInUse):
                    await rt.listen_stream("127.0.0.1", server.port, lambda d: d)
            finally:
                server.close()

        run(scenario())
