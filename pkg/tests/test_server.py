import asyncio
import json

from context_kernel.kernel import ContextKernel
from context_kernel.server import ContextServer

TIMEOUT = 5


class Client:
    def __init__(self, reader, writer):
        self.reader, self.writer = reader, writer

    @classmethod
    async def connect(cls, server):
        return cls(*await asyncio.open_connection(server.host, server.port))

    async def send(self, msg):
        line = msg if isinstance(msg, bytes) else json.dumps(msg).encode() + b"\n"
        self.writer.write(line)
        await self.writer.drain()

    async def recv(self):
        line = await asyncio.wait_for(self.reader.readline(), TIMEOUT)
        return json.loads(line) if line else None

    async def call(self, msg):
        await self.send(msg)
        return await self.recv()

    async def close(self):
        self.writer.close()
        await self.writer.wait_closed()


def with_server(stack, body):
    async def main():
        kernel = ContextKernel(*stack)
        server = await ContextServer(kernel, "127.0.0.1", 0).start()
        waiter = asyncio.ensure_future(server.serve_until_stopped())
        try:
            return await body(server)
        finally:
            server.stop()
            await waiter
    return asyncio.run(main())


WEATHER = {"provider_id": "w", "kind": "weather"}
SNOW = {"type": "event", "seq": 1, "payload": {"condition": "Snowing"},
        "time": "2009-03-03T09:00:00Z", "ref": "e1"}


def test_provider_and_service_sessions(stack):
    async def body(server):
        svc = await Client.connect(server)
        assert (await svc.call({"type": "hello", "role": "service"}))["role"] == "service"
        sub = await svc.call({"type": "subscribe", "pattern": "WeatherCond(?w, ?c)", "ref": 7})
        assert sub["ref"] == 7

        prov = await Client.connect(server)
        hello = await prov.call({"type": "hello", "role": "provider", "provider": WEATHER})
        assert hello["last_seen"] is None
        reply = await prov.call(SNOW)
        assert reply["type"] == "result" and reply["ref"] == "e1" and len(reply["fact_ids"]) == 1

        note = await svc.recv()
        assert note["type"] == "notification" and note["kind"] == "added"
        assert note["binding"] == {"?w": "Weather", "?c": "Snowing"}
        res = await svc.call({"type": "query", "pattern": "WeatherCond(Weather, ?c)",
                              "at": "2009-03-03T10:00:00Z"})
        assert res["bindings"] == [{"?c": "Snowing"}]

        stale = await prov.call(SNOW)
        assert (stale["code"], stale["reason"]) == ("rejected", "StaleEvent")
        await prov.close()

        again = await Client.connect(server)
        hello = await again.call({"type": "hello", "role": "provider", "provider": WEATHER})
        assert hello["last_seen"] == 1
        await again.close()
        await svc.close()
    with_server(stack, body)


def test_current_activity_query(stack):
    async def body(server):
        c = await Client.connect(server)
        await c.call({"type": "hello", "role": "service"})
        res = await c.call({"type": "query", "current_activity": "John",
                            "at": "2009-03-03T09:00:00Z"})
        assert res["current"] is None
        await c.close()
    with_server(stack, body)


def test_protocol_errors_close_the_session(stack):
    async def body(server):
        cases = [
            (b"{not json\n", "parse"),
            (b"[1, 2]\n", "parse"),
            (json.dumps({"type": "query", "pattern": "A(?x, ?y)"}).encode() + b"\n",
             "protocol"),
        ]
        for line, code in cases:
            c = await Client.connect(server)
            err = await c.call(line)
            assert (err["type"], err["code"]) == ("error", code)
            assert await c.recv() is None  # server hung up
            await c.close()

        c = await Client.connect(server)
        await c.call({"type": "hello", "role": "service"})
        err = await c.call({"type": "event", "seq": 1, "payload": {}})
        assert err["code"] == "protocol"
        assert await c.recv() is None
        await c.close()
    with_server(stack, body)


def test_rejections_keep_the_session(stack):
    async def body(server):
        c = await Client.connect(server)
        await c.call({"type": "hello", "role": "service"})
        bad = await c.call({"type": "query", "pattern": "Activity(John"})
        assert bad["code"] == "rejected"
        gone = await c.call({"type": "unsubscribe", "sub_id": 99})
        assert gone["reason"] == "UnknownSubscription"
        ok = await c.call({"type": "query", "pattern": "Activity(John, ?a)"})
        assert ok == {"type": "result", "bindings": []}
        await c.close()
    with_server(stack, body)


def test_conflicting_descriptor_refused(stack):
    async def body(server):
        a = await Client.connect(server)
        await a.call({"type": "hello", "role": "provider", "provider": WEATHER})
        b = await Client.connect(server)
        err = await b.call({"type": "hello", "role": "provider",
                            "provider": {**WEATHER, "kind": "calendar"}})
        assert err["code"] == "protocol"
        await a.close()
        await b.close()
    with_server(stack, body)
