"""Newline-delimited JSON over TCP.

Every session starts with ``hello`` naming its role.  Providers then push
``event`` (or raw ``fact``) messages; services send ``query``, ``subscribe``
and ``unsubscribe`` and receive ``result`` and ``notification`` messages.

Errors carry a ``code``: ``parse`` and ``protocol`` close the session,
``rejected`` reports a refused request and keeps it open.  All kernel calls
run on the event loop thread, so mutations form one serialized stream.
"""

from __future__ import annotations

import asyncio
import json
import logging
import signal
from datetime import datetime, timezone

from .acquisition import ProviderDescriptor, ProviderEvent
from .errors import ContextKernelError, DuplicateProvider
from .facts import Fact, format_time, parse_pattern, parse_time

log = logging.getLogger(__name__)

PROVIDER = "provider"
SERVICE = "service"
MAX_LINE = 1 << 20


class ProtocolError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _now():
    return datetime.now(timezone.utc)


def _require(msg, key, kind=None):
    if key not in msg:
        raise ProtocolError("protocol", f"{msg.get('type')} needs {key!r}")
    value = msg[key]
    if kind is not None and not isinstance(value, kind):
        raise ProtocolError("protocol", f"{key!r} has the wrong type")
    return value


class Session:
    def __init__(self, server, reader, writer):
        self.server = server
        self.reader = reader
        self.writer = writer
        self.role = None
        self.provider_id = None
        self.subs = set()
        self.outbox: asyncio.Queue = asyncio.Queue()
        self.closing = False
        self.last_line = False

    def send(self, msg: dict) -> None:
        if not self.closing:
            self.outbox.put_nowait(msg)

    async def _writer_loop(self):
        try:
            while True:
                msg = await self.outbox.get()
                if msg is None:
                    break
                self.writer.write(json.dumps(msg, sort_keys=True).encode() + b"\n")
                await self.writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass

    async def run(self):
        writer_task = asyncio.ensure_future(self._writer_loop())
        try:
            while not self.closing:
                try:
                    raw = await self.reader.readuntil(b"\n")
                except asyncio.IncompleteReadError as exc:
                    if not exc.partial.strip():
                        break
                    raw = exc.partial
                    self.last_line = True
                except asyncio.LimitOverrunError:
                    self._fail("parse", "line too long")
                    break
                if not raw.strip():
                    continue
                msg = None
                try:
                    msg = self._decode(raw)
                    self.handle(msg)
                except ProtocolError as exc:
                    self._fail(exc.code, str(exc), msg)
                    break
                if self.last_line:
                    break
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            self.close_subscriptions()
            self.outbox.put_nowait(None)
            self.closing = True
            try:
                await asyncio.wait_for(writer_task, timeout=5)
            except (asyncio.TimeoutError, asyncio.CancelledError):
                writer_task.cancel()
            try:
                self.writer.close()
                await self.writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    @staticmethod
    def _decode(raw: bytes) -> dict:
        try:
            msg = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise ProtocolError("parse", f"not a JSON line: {exc}") from None
        if not isinstance(msg, dict):
            raise ProtocolError("parse", "message must be a JSON object")
        return msg

    def _fail(self, code, message, msg=None):
        reply = {"type": "error", "code": code, "message": message}
        if isinstance(msg, dict) and "ref" in msg:
            reply["ref"] = msg["ref"]
        self.send(reply)

    def _reply(self, msg, **fields):
        reply = {"type": "result", **fields}
        if "ref" in msg:
            reply["ref"] = msg["ref"]
        self.send(reply)

    def close_subscriptions(self):
        for sub_id in sorted(self.subs):
            self.server.kernel.unsubscribe(sub_id)
        self.subs.clear()

    # -- dispatch ------------------------------------------------------------

    def handle(self, msg: dict) -> None:
        kind = msg.get("type")
        if kind == "hello":
            return self._hello(msg)
        if self.role is None:
            raise ProtocolError("protocol", "hello must come first")
        handler = {
            "event": self._event, "fact": self._fact, "query": self._query,
            "subscribe": self._subscribe, "unsubscribe": self._unsubscribe,
        }.get(kind)
        if handler is None:
            raise ProtocolError("protocol", f"unknown message type {kind!r}")
        try:
            handler(msg)
        except ContextKernelError as exc:
            self._reject(msg, exc.code, str(exc))
        except (ValueError, TypeError, KeyError) as exc:
            self._reject(msg, "BadRequest", str(exc))

    def _reject(self, msg, reason, message):
        reply = {"type": "error", "code": "rejected", "reason": reason, "message": message}
        if "ref" in msg:
            reply["ref"] = msg["ref"]
        self.send(reply)

    def _hello(self, msg):
        if self.role is not None:
            raise ProtocolError("protocol", "duplicate hello")
        role = msg.get("role")
        if role == SERVICE:
            self.role = SERVICE
            return self._reply(msg, role=SERVICE)
        if role != PROVIDER:
            raise ProtocolError("protocol", f"unknown role {role!r}")
        data = _require(msg, "provider", dict)
        try:
            descriptor = ProviderDescriptor.from_dict(data)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError("protocol", f"bad provider descriptor: {exc}") from None
        acq = self.server.kernel.acquisition
        try:
            self.server.kernel.register_provider(descriptor)
        except DuplicateProvider:
            # reconnect: the same descriptor may resume its stream
            if acq.providers[descriptor.provider_id] != descriptor:
                raise ProtocolError("protocol",
                                    f"provider {descriptor.provider_id} registered differently")
        except ContextKernelError as exc:
            raise ProtocolError("protocol", str(exc)) from None
        self.role = PROVIDER
        self.provider_id = descriptor.provider_id
        self._reply(msg, role=PROVIDER, provider=descriptor.provider_id,
                    last_seen=acq.last_seen(descriptor.provider_id))

    def _event(self, msg):
        if self.role != PROVIDER:
            raise ProtocolError("protocol", "only providers send events")
        seq = _require(msg, "seq", int)
        payload = _require(msg, "payload", dict)
        at = parse_time(msg["time"]) if msg.get("time") else _now()
        ids, report = self.server.kernel.ingest(ProviderEvent(self.provider_id, at, payload, seq))
        self._reply(msg, fact_ids=ids, derived=len(report.derived),
                    retracted=len(report.retracted))

    def _fact(self, msg):
        data = _require(msg, "fact", dict)
        fact = Fact.from_dict({**data, "fact_id": None})
        fid, report = self.server.kernel.add_fact(fact)
        self._reply(msg, fact_id=fid, derived=len(report.derived))

    def _query(self, msg):
        at = parse_time(msg["at"]) if msg.get("at") else None
        if "current_activity" in msg:
            subject = _require(msg, "current_activity", str)
            cur = self.server.kernel.current_activity(subject, at or _now())
            value = None if cur is None else {
                "activity": cur.activity, "confidence": cur.confidence,
                "source": cur.source.value}
            return self._reply(msg, subject=subject, current=value)
        text = _require(msg, "pattern", str)
        bindings = self.server.kernel.query(parse_pattern(text, time_at=at))
        self._reply(msg, bindings=bindings)

    def _subscribe(self, msg):
        pattern = parse_pattern(_require(msg, "pattern", str))

        def deliver(note):
            self.send({"type": "notification", **note.to_dict()})

        sub_id = self.server.kernel.subscribe(pattern, deliver)
        self.subs.add(sub_id)
        self._reply(msg, sub_id=sub_id)

    def _unsubscribe(self, msg):
        sub_id = _require(msg, "sub_id", int)
        if sub_id not in self.subs:
            return self._reject(msg, "UnknownSubscription",
                                f"no subscription {sub_id} in this session")
        self.subs.discard(sub_id)
        self.server.kernel.unsubscribe(sub_id)
        self._reply(msg, sub_id=sub_id)


class ContextServer:
    def __init__(self, kernel, host="127.0.0.1", port=7411):
        self.kernel = kernel
        self.host = host
        self.port = port
        self.sessions: set = set()
        self._server = None
        self._stopped = None

    async def start(self):
        self._stopped = asyncio.Event()
        self._server = await asyncio.start_server(self._accept, self.host, self.port,
                                                  limit=MAX_LINE)
        sock = self._server.sockets[0].getsockname()
        self.host, self.port = sock[0], sock[1]
        return self

    async def _accept(self, reader, writer):
        session = Session(self, reader, writer)
        task = asyncio.current_task()
        self.sessions.add(task)
        try:
            await session.run()
        except Exception:  # a broken session must never take the server down
            log.exception("session crashed")
        finally:
            self.sessions.discard(task)

    def stop(self):
        if self._stopped is not None:
            self._stopped.set()

    async def serve_until_stopped(self):
        await self._stopped.wait()
        self._server.close()
        await self._server.wait_closed()
        for task in list(self.sessions):
            task.cancel()
        if self.sessions:
            await asyncio.gather(*self.sessions, return_exceptions=True)
        self.kernel.close()


async def _main(kernel, host, port, announce):
    server = await ContextServer(kernel, host, port).start()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGTERM, signal.SIGINT):
        try:
            loop.add_signal_handler(sig, server.stop)
        except (NotImplementedError, RuntimeError):
            pass
    announce(f"listening on {server.host}:{server.port}")
    await server.serve_until_stopped()
    announce(f"stopped at {format_time(_now())}")


def serve(kernel, listen: str, announce=print) -> None:
    host, _, port = listen.rpartition(":")
    asyncio.run(_main(kernel, host, int(port), announce))
