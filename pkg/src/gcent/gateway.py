"""Network gateway: the NDJSON control protocol between operator clients
and a running fleet.

One asyncio loop owns everything. Client connections (raw TCP or the /ws
websocket endpoint) never touch sessions directly; their commands land in
per-robot FIFO queues that the tick loop drains, so a burst of keystrokes
from a console is applied in arrival order at the next tick boundary.

Two pacing modes. Free-run ticks the fleet at a wall-clock rate for human
use. Lockstep (ticks_per_second 0 plus explicit ``grant`` counts in speed
messages) advances the clock only when a client says so, which makes
integration transcripts reproducible.
"""

from __future__ import annotations

import asyncio
import contextlib
import itertools
import json
import logging
import socket
import threading
from collections import deque
from typing import Any, Awaitable, Callable, Optional

from . import TICK_RATE
from .domain import Action
from .fleet import FleetRuntime
from .gridworld import scene_json
from .session import (
    BeginRewind,
    Command,
    HumanAction,
    IllegalTransition,
    Reset,
    RewindTo,
    StartInference,
    Takeover,
)

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1

_SIMPLE_COMMANDS = {
    "start_inference": StartInference,
    "begin_rewind": BeginRewind,
    "takeover": Takeover,
    "reset": Reset,
}


def command_to_wire(command: Command) -> dict:
    """Session command -> JSON-safe object for the cmd envelope."""
    if isinstance(command, RewindTo):
        return {"name": "rewind_to", "k": command.k}
    if isinstance(command, HumanAction):
        return {"name": "human_action", "action": command.action.name}
    for name, cls in _SIMPLE_COMMANDS.items():
        if isinstance(command, cls):
            return {"name": name}
    raise ValueError(f"unknown command {command!r}")


def command_from_wire(obj: Any) -> Command:
    """Inverse of command_to_wire. Raises ValueError on anything off-wire."""
    if not isinstance(obj, dict) or "name" not in obj:
        raise ValueError("command must be an object with a 'name' field")
    name = obj["name"]
    if name in _SIMPLE_COMMANDS:
        return _SIMPLE_COMMANDS[name]()
    if name == "rewind_to":
        k = obj.get("k")
        if isinstance(k, bool) or not isinstance(k, int):
            raise ValueError("rewind_to needs an integer 'k'")
        return RewindTo(k)
    if name == "human_action":
        raw = obj.get("action")
        try:
            action = Action[str(raw).upper()]
        except KeyError:
            raise ValueError(f"unknown action {raw!r}") from None
        return HumanAction(action)
    raise ValueError(f"unknown command name {name!r}")


def state_message(runtime: FleetRuntime, robot_id: str) -> dict:
    session = runtime.sessions[robot_id]
    tracker = runtime.trackers[robot_id]
    return {
        "type": "state",
        "robot_id": robot_id,
        "tick": session.tick_counter,
        "mode": session.mode.value,
        "step_index": session.step_index,
        "scene": scene_json(session.world),
        "buffer_len": len(session.buffer),
        "sentinel_z": session.last_verdict,
        "score_so_far": [tracker.done, session.task.n_steps],
    }


class _Connection:
    """One client, whatever the transport. Subscribed to every robot until
    it says otherwise."""

    _ids = itertools.count()

    def __init__(self, send_line: Callable[[str], Awaitable[None]], robot_ids) -> None:
        self.conn_id = next(_Connection._ids)
        self._send_line = send_line
        self.subscriptions: set[str] = set(robot_ids)
        self.seen_cmd_ids: set = set()
        self.alive = True


class GatewayServer:
    """Bridges client sockets to one FleetRuntime.

    Meant to be constructed with a runtime whose config has operator=None
    (humans are the operator), though a scripted-operator fleet can be
    watched read-only through it just as well.
    """

    def __init__(
        self,
        runtime: FleetRuntime,
        host: str = "127.0.0.1",
        tcp_port: int = 0,
        ws_port: int = 0,
        ticks_per_second: float = TICK_RATE,
        enable_ws: bool = True,
    ) -> None:
        self.runtime = runtime
        self.host = host
        self._tcp_port_req = tcp_port
        self._ws_port_req = ws_port
        self._enable_ws = enable_ws
        self._tps = float(ticks_per_second)
        self.tcp_port: Optional[int] = None
        self.ws_port: Optional[int] = None
        self._connections: set[_Connection] = set()
        self._pending: dict[str, deque] = {rid: deque() for rid in runtime.sessions}
        self._requests_seen = 0
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._thread: Optional[threading.Thread] = None
        self._ready = threading.Event()
        self._stop_event: Optional[asyncio.Event] = None
        self._wake: Optional[asyncio.Event] = None
        self._on_ready: Optional[Callable[[GatewayServer], None]] = None

    # --- lifecycle --------------------------------------------------------

    def start(self) -> "GatewayServer":
        """Run the loop in a daemon thread; returns once ports are bound."""
        self._thread = threading.Thread(target=self._thread_main, daemon=True)
        self._thread.start()
        if not self._ready.wait(timeout=10.0):
            raise RuntimeError("gateway failed to start within 10s")
        return self

    def _thread_main(self) -> None:
        try:
            asyncio.run(self._main())
        except Exception:
            log.exception("gateway loop died")
            self._ready.set()

    def run_forever(self) -> None:
        """Blocking variant for the CLI."""
        asyncio.run(self._main())

    def stop(self) -> None:
        self._ready.wait(timeout=10.0)
        if self._loop is not None and self._stop_event is not None:
            loop, event = self._loop, self._stop_event
            with contextlib.suppress(RuntimeError):
                loop.call_soon_threadsafe(event.set)
        if self._thread is not None:
            self._thread.join(timeout=10.0)

    async def _main(self) -> None:
        self._loop = asyncio.get_running_loop()
        self._stop_event = asyncio.Event()
        self._wake = asyncio.Event()
        tcp_server = await asyncio.start_server(
            self._handle_tcp, self.host, self._tcp_port_req
        )
        self.tcp_port = tcp_server.sockets[0].getsockname()[1]
        ws_server = None
        if self._enable_ws:
            from websockets.asyncio.server import serve as ws_serve

            ws_server = await ws_serve(self._handle_ws, self.host, self._ws_port_req)
            self.ws_port = ws_server.sockets[0].getsockname()[1]
        if self._on_ready is not None:
            self._on_ready(self)
        self._ready.set()
        ticker = asyncio.create_task(self._ticker())
        try:
            await self._stop_event.wait()
        finally:
            ticker.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await ticker
            tcp_server.close()
            await tcp_server.wait_closed()
            if ws_server is not None:
                ws_server.close()
                await ws_server.wait_closed()

    # --- pacing -----------------------------------------------------------

    async def _ticker(self) -> None:
        while True:
            if self._tps > 0:
                try:
                    await asyncio.wait_for(self._wake.wait(), timeout=1.0 / self._tps)
                    self._wake.clear()
                except asyncio.TimeoutError:
                    await self._run_tick()
            else:
                await self._wake.wait()
                self._wake.clear()

    async def _run_tick(self) -> None:
        runtime = self.runtime
        for rid in runtime.sessions:
            queue = self._pending[rid]
            while queue:
                await self._apply_entry(queue.popleft())
        runtime.tick_once()
        await self._publish_requests()
        states = {rid: state_message(runtime, rid) for rid in runtime.sessions}
        for conn in list(self._connections):
            for rid in runtime.sessions:
                if rid in conn.subscriptions:
                    await self._send(conn, states[rid])

    async def _apply_entry(self, entry) -> None:
        conn, cmd_id, robot_id, command = entry
        try:
            self.runtime.inject_command(robot_id, command)
        except (IllegalTransition, ValueError) as exc:
            await self._send(conn, {"type": "error", "cmd_id": cmd_id, "reason": str(exc)})
        else:
            await self._send(conn, {"type": "ack", "cmd_id": cmd_id})

    async def _publish_requests(self) -> None:
        requests = self.runtime.log.requests
        while self._requests_seen < len(requests):
            req = requests[self._requests_seen]
            self._requests_seen += 1
            message = {
                "type": "request",
                "robot_id": req.robot_id,
                "request_tick": req.request_tick,
            }
            for conn in list(self._connections):
                if req.robot_id in conn.subscriptions:
                    await self._send(conn, message)

    # --- message handling -------------------------------------------------

    def _hello(self) -> dict:
        task = self.runtime.config.task
        return {
            "type": "hello",
            "protocol_version": PROTOCOL_VERSION,
            "robots": list(self.runtime.sessions),
            "task": {
                "name": task.template.value,
                "n_steps": task.n_steps,
                "steps": [s.instruction for s in task.steps],
            },
        }

    async def _send(self, conn: _Connection, obj: dict) -> None:
        if not conn.alive:
            return
        try:
            await conn._send_line(json.dumps(obj) + "\n")
        except Exception:
            conn.alive = False
            self._connections.discard(conn)

    async def _handle_message(self, conn: _Connection, raw: str) -> None:
        try:
            obj = json.loads(raw)
            if not isinstance(obj, dict):
                raise ValueError("not an object")
        except ValueError:
            await self._send(conn, {"type": "error", "cmd_id": None, "reason": "parse"})
            return
        mtype = obj.get("type")
        if mtype == "cmd":
            await self._handle_cmd(conn, obj)
        elif mtype == "subscribe":
            await self._handle_subscribe(conn, obj)
        elif mtype == "speed":
            await self._handle_speed(conn, obj)
        else:
            await self._send(
                conn,
                {
                    "type": "error",
                    "cmd_id": obj.get("cmd_id"),
                    "reason": f"unknown message type {mtype!r}",
                },
            )

    async def _handle_cmd(self, conn: _Connection, obj: dict) -> None:
        cmd_id = obj.get("cmd_id")
        if cmd_id is None:
            await self._send(
                conn, {"type": "error", "cmd_id": None, "reason": "cmd requires cmd_id"}
            )
            return
        if cmd_id in conn.seen_cmd_ids:
            await self._send(
                conn,
                {"type": "error", "cmd_id": cmd_id, "reason": "duplicate cmd_id"},
            )
            return
        conn.seen_cmd_ids.add(cmd_id)
        robot_id = obj.get("robot_id")
        if robot_id not in self.runtime.sessions:
            await self._send(
                conn,
                {"type": "error", "cmd_id": cmd_id, "reason": f"unknown robot {robot_id!r}"},
            )
            return
        try:
            command = command_from_wire(obj.get("command"))
        except ValueError as exc:
            await self._send(conn, {"type": "error", "cmd_id": cmd_id, "reason": str(exc)})
            return
        self._pending[robot_id].append((conn, cmd_id, robot_id, command))

    async def _handle_subscribe(self, conn: _Connection, obj: dict) -> None:
        ids = obj.get("robot_ids")
        if not isinstance(ids, list):
            await self._send(
                conn,
                {"type": "error", "cmd_id": None, "reason": "subscribe needs robot_ids"},
            )
            return
        conn.subscriptions = {r for r in ids if r in self.runtime.sessions}

    async def _handle_speed(self, conn: _Connection, obj: dict) -> None:
        tps = obj.get("ticks_per_second")
        if isinstance(tps, bool) or not isinstance(tps, (int, float)) or tps < 0:
            await self._send(
                conn,
                {
                    "type": "error",
                    "cmd_id": None,
                    "reason": "speed needs ticks_per_second >= 0",
                },
            )
            return
        self._tps = float(tps)
        self._wake.set()
        grant = obj.get("grant", 0)
        if isinstance(grant, bool) or not isinstance(grant, int) or grant < 0:
            await self._send(
                conn,
                {"type": "error", "cmd_id": None, "reason": "grant must be a count"},
            )
            return
        # lockstep: run the granted ticks right here so every message this
        # client sent beforehand is already queued, in order
        for _ in range(grant):
            await self._run_tick()

    # --- transports -------------------------------------------------------

    async def _handle_tcp(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        async def send_line(text: str) -> None:
            writer.write(text.encode("utf-8"))
            await writer.drain()

        conn = _Connection(send_line, self.runtime.sessions)
        self._connections.add(conn)
        try:
            await self._send(conn, self._hello())
            while True:
                line = await reader.readline()
                if not line:
                    break
                text = line.decode("utf-8", errors="replace").strip()
                if text:
                    await self._handle_message(conn, text)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            conn.alive = False
            self._connections.discard(conn)
            writer.close()
            with contextlib.suppress(Exception):
                await writer.wait_closed()

    async def _handle_ws(self, connection) -> None:
        request = getattr(connection, "request", None)
        path = getattr(request, "path", "/ws")
        if not path.startswith("/ws"):
            await connection.close(code=1008, reason="connect to /ws")
            return

        async def send_line(text: str) -> None:
            await connection.send(text)

        conn = _Connection(send_line, self.runtime.sessions)
        self._connections.add(conn)
        try:
            await self._send(conn, self._hello())
            async for message in connection:
                if isinstance(message, bytes):
                    message = message.decode("utf-8", errors="replace")
                for line in message.split("\n"):
                    if line.strip():
                        await self._handle_message(conn, line.strip())
        except Exception:
            log.debug("websocket client dropped", exc_info=True)
        finally:
            conn.alive = False
            self._connections.discard(conn)


def serve(
    runtime: FleetRuntime,
    port: int = 8765,
    *,
    host: str = "127.0.0.1",
    ws_port: Optional[int] = None,
    ticks_per_second: float = TICK_RATE,
    background: bool = False,
) -> GatewayServer:
    """Start a gateway on `port` (TCP NDJSON) and `ws_port` (websocket /ws,
    defaults to port+1; 0 for an ephemeral port). Prints one listening line
    so wrappers can discover the bound ports, then blocks unless
    background=True."""
    if ws_port is None:
        ws_port = port + 1 if port else 0
    server = GatewayServer(
        runtime,
        host=host,
        tcp_port=port,
        ws_port=ws_port,
        ticks_per_second=ticks_per_second,
    )

    def announce(s: GatewayServer) -> None:
        print(
            json.dumps(
                {
                    "event": "listening",
                    "host": s.host,
                    "tcp_port": s.tcp_port,
                    "ws_port": s.ws_port,
                    "protocol_version": PROTOCOL_VERSION,
                }
            ),
            flush=True,
        )

    server._on_ready = announce
    if background:
        server.start()
    else:
        server.run_forever()
    return server


def scripted_client(
    host: str,
    port: int,
    script: list,
    *,
    run_ticks: Optional[int] = None,
    timeout: float = 30.0,
) -> list[dict]:
    """Drive a lockstep gateway over TCP; returns every received message.

    script entries are (tick, message) pairs: each client message is sent
    once the granted lockstep clock reaches that tick, so commands sent at
    tick t are applied at the start of tick t. Transcripts are deterministic
    only against a server started with ticks_per_second=0. run_ticks fixes
    the total ticks granted (default: last script tick + 1, so trailing
    acks arrive).
    """
    entries = sorted(script, key=lambda e: e[0])
    if run_ticks is None:
        run_ticks = entries[-1][0] + 1 if entries else 0
    transcript: list[dict] = []
    with socket.create_connection((host, port), timeout=timeout) as sock:
        rfile = sock.makefile("r", encoding="utf-8", newline="\n")
        wfile = sock.makefile("w", encoding="utf-8", newline="\n")

        def send(obj: dict) -> None:
            wfile.write(json.dumps(obj) + "\n")
            wfile.flush()

        def recv() -> dict:
            line = rfile.readline()
            if not line:
                raise ConnectionError("gateway closed the stream")
            obj = json.loads(line)
            transcript.append(obj)
            return obj

        hello = recv()
        subscribed = len(hello.get("robots", []))
        granted = 0

        def grant(n: int) -> None:
            nonlocal granted
            if n <= 0:
                return
            send({"type": "speed", "ticks_per_second": 0, "grant": n})
            need = n * subscribed
            seen = 0
            while seen < need:
                if recv().get("type") == "state":
                    seen += 1
            granted += n

        for at_tick, message in entries:
            grant(at_tick - granted)
            send(message)
            if message.get("type") == "subscribe":
                subscribed = len(message.get("robot_ids", []))
        grant(run_ticks - granted)
    return transcript
