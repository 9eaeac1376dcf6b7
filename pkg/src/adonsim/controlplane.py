"""Controller surface: NDJSON request/response protocol, telemetry fan-out,
and the append-only operation log.

Wire format, bit-exact: one JSON object per line, UTF-8, canonical encoding
(sorted keys, no spaces). Requests are {"id": u64, "method": str, "params":
obj}; responses {"id": u64, "result": obj} or {"id": u64, "error": {"code":
int, "message": str}}. Telemetry pushed to subscribers rides the same
connection as {"telemetry": record} lines.
"""

from __future__ import annotations

import collections
import json
import socket
import threading
from dataclasses import dataclass, field

from . import scenario as scenario_mod

ERR_VALIDATION = 400
ERR_NOT_FOUND = 404
ERR_CONFLICT = 409
ERR_INTERNAL = 500

MAX_BACKLOG = 1000

METHODS = ("get-config", "edit-config", "subscribe-telemetry", "inject-event",
           "get-logs")


def encode_line(obj) -> bytes:
    """Canonical NDJSON encoding; the only writer anywhere in the package."""
    return (json.dumps(obj, separators=(",", ":"), sort_keys=True) + "\n") \
        .encode("utf-8")


def decode_line(line) -> dict:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    return json.loads(line)


class ServiceError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


class Conflict(ServiceError):
    def __init__(self, message: str = "concurrent configuration writer"):
        super().__init__(ERR_CONFLICT, message)


class BacklogOverflow(RuntimeError):
    pass


@dataclass
class LogEntry:
    tick: int
    sequence: int
    severity: str
    source: str
    text: str
    payload: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"tick": self.tick, "sequence": self.sequence,
                "severity": self.severity, "source": self.source,
                "text": self.text, "payload": self.payload}


class LogStore:
    """Append-only log, strictly ordered by (tick, sequence)."""

    def __init__(self):
        self._entries = []
        self._seq = 0
        self._lock = threading.Lock()

    def append(self, tick: int, severity: str, source: str, text: str,
               payload=None) -> LogEntry:
        with self._lock:
            entry = LogEntry(tick=int(tick), sequence=self._seq,
                             severity=severity, source=source, text=text,
                             payload=payload or {})
            self._seq += 1
            self._entries.append(entry)
            return entry

    def query(self, from_tick=None, to_tick=None) -> list:
        with self._lock:
            out = list(self._entries)
        if from_tick is not None:
            out = [e for e in out if e.tick >= from_tick]
        if to_tick is not None:
            out = [e for e in out if e.tick <= to_tick]
        return out

    def __len__(self):
        return len(self._entries)

    def write_jsonl(self, path) -> None:
        with open(path, "wb") as fh:
            for entry in self.query():
                fh.write(encode_line(entry.to_json()))


class Subscription:
    """Bounded per-subscriber telemetry queue.

    The producer never blocks: pushing beyond the backlog marks the
    subscriber dropped and the service disconnects it.
    """

    def __init__(self, sub_id: int, filter_spec=None,
                 max_backlog: int = MAX_BACKLOG):
        self.sub_id = sub_id
        self.filter_spec = filter_spec or {}
        self.max_backlog = max_backlog
        self.dropped = False
        self._queue = collections.deque()
        self._lock = threading.Lock()

    def push(self, obj: dict) -> bool:
        with self._lock:
            if self.dropped:
                return False
            if len(self._queue) >= self.max_backlog:
                self.dropped = True
                return False
            self._queue.append(obj)
            return True

    def drain(self) -> list:
        with self._lock:
            out = list(self._queue)
            self._queue.clear()
            return out

    def __len__(self):
        return len(self._queue)


def project_record(record_json: dict, filter_spec: dict) -> dict:
    """Apply a subscription filter; currently supports one-amplifier views."""
    if not filter_spec:
        return record_json
    amp = filter_spec.get("amplifier")
    if amp is None:
        return record_json
    amp = int(amp)
    return {
        "tick": record_json["tick"],
        "amplifier": amp,
        "gain_db": record_json["gains_db"][amp],
        "tilt_db": record_json["tilts_db"][amp],
        "in_dbm": record_json["amp_in_dbm"][amp],
        "out_dbm": record_json["amp_out_dbm"][amp],
    }


class Service:
    """Single state-owner behind the protocol; all writes serialize here."""

    def __init__(self, state, log: LogStore | None = None,
                 max_backlog: int = MAX_BACKLOG):
        self.state = state
        self.log = log if log is not None else LogStore()
        self.max_backlog = max_backlog
        self._write_lock = threading.Lock()
        self._subs = {}
        self._next_sub = 0
        self._sub_lock = threading.Lock()

    # -- method implementations ---------------------------------------------
    def get_config(self) -> dict:
        st = self.state
        return {
            "tick": st.tick,
            "config_version": st.config_version,
            "launch_dbm": st.launch_dbm,
            "amplifiers": [{"gain_db": float(a.gain_db),
                            "tilt_db": float(a.tilt_db)}
                           for a in st.link.amplifiers],
            "grid": {"active": [bool(v) for v in st.grid.active],
                     "real": [bool(v) for v in st.grid.is_real]},
            "spans": [{"length_km": float(s.length_km),
                       "attenuation_db_per_km":
                           float(s.attenuation_db_per_km)}
                      for s in st.link.spans],
        }

    def edit_config(self, changes: dict) -> dict:
        if not isinstance(changes, dict) or not changes:
            raise ServiceError(ERR_VALIDATION, "empty change set")
        unknown = set(changes) - {"gains_db", "tilts_db"}
        if unknown:
            raise ServiceError(ERR_VALIDATION,
                               f"unknown config fields: {sorted(unknown)}")
        if not self._write_lock.acquire(blocking=False):
            raise Conflict()
        try:
            try:
                self.state.set_config(gains_db=changes.get("gains_db"),
                                      tilts_db=changes.get("tilts_db"))
            except (scenario_mod.ValidationError, ValueError) as exc:
                raise ServiceError(ERR_VALIDATION, str(exc)) from exc
            applied = {k: [float(x) for x in v] for k, v in changes.items()}
            self.log.append(self.state.tick, "info", "control",
                            "config edit applied",
                            {"changes": applied,
                             "config_version": self.state.config_version})
            return {"applied": applied,
                    "config_version": self.state.config_version}
        finally:
            self._write_lock.release()

    def subscribe(self, filter_spec=None) -> Subscription:
        with self._sub_lock:
            sub = Subscription(self._next_sub, filter_spec, self.max_backlog)
            self._next_sub += 1
            self._subs[sub.sub_id] = sub
            return sub

    def unsubscribe(self, sub_id: int) -> None:
        with self._sub_lock:
            self._subs.pop(sub_id, None)

    def publish(self, record) -> None:
        """Fan one telemetry record out to every subscriber; never blocks."""
        rec_json = record.to_json()
        with self._sub_lock:
            subs = list(self._subs.values())
        for sub in subs:
            msg = {"telemetry": project_record(rec_json, sub.filter_spec)}
            if not sub.push(msg):
                self.unsubscribe(sub.sub_id)
                self.log.append(self.state.tick, "warning", "control",
                                "telemetry subscriber dropped "
                                "(backlog overflow)",
                                {"subscriber": sub.sub_id})

    def inject_event(self, params: dict) -> dict:
        spec = params.get("event")
        if not isinstance(spec, dict) or "kind" not in spec:
            raise ServiceError(ERR_VALIDATION, "event object with kind required")
        kind = spec["kind"]
        if kind not in scenario_mod.VALID_KINDS or kind == "end":
            raise ServiceError(ERR_VALIDATION, f"unknown event kind {kind!r}")
        at_tick = int(spec.get("at_tick", self.state.tick + 1))
        try:
            ev = scenario_mod.Event(
                at_tick=at_tick, kind=kind,
                span_id=int(spec.get("span_id", -1)),
                target_load=int(spec.get("target_load", -1)),
                n_batches=int(spec.get("n_batches", -1)),
                rate_db_per_tick=float(spec.get("rate_db_per_tick", 0.0)),
                cap_db=float(spec.get("cap_db", 0.0)))
            scenario_mod._validate_event(ev, 0)
        except (scenario_mod.ValidationError, ValueError) as exc:
            raise ServiceError(ERR_VALIDATION, str(exc)) from exc
        self.state.inject(ev)
        self.log.append(self.state.tick, "info", "control", "event injected",
                        {"kind": kind, "at_tick": at_tick,
                         "span_id": ev.span_id})
        return {"queued": True, "at_tick": at_tick}

    def get_logs(self, params: dict) -> dict:
        entries = self.log.query(params.get("from_tick"),
                                 params.get("to_tick"))
        return {"entries": [e.to_json() for e in entries]}

    # -- request dispatch -------------------------------------------------------
    def dispatch(self, request: dict, session=None) -> dict:
        rid = request.get("id")
        if not isinstance(rid, int) or rid < 0:
            return {"id": 0, "error": {"code": ERR_VALIDATION,
                                       "message": "id must be a u64"}}
        if session is not None:
            if rid in session.used_ids:
                return _err(rid, ERR_VALIDATION,
                            f"duplicate request id {rid}")
            session.used_ids.add(rid)
        method = request.get("method")
        params = request.get("params", {})
        if not isinstance(params, dict):
            return _err(rid, ERR_VALIDATION, "params must be an object")
        try:
            if method == "get-config":
                return {"id": rid, "result": self.get_config()}
            if method == "edit-config":
                return {"id": rid, "result": self.edit_config(
                    params.get("changes", {}))}
            if method == "subscribe-telemetry":
                sub = self.subscribe(params.get("filter"))
                if session is not None:
                    session.subscriptions.append(sub)
                return {"id": rid, "result": {"subscribed": True,
                                              "subscriber": sub.sub_id}}
            if method == "inject-event":
                return {"id": rid, "result": self.inject_event(params)}
            if method == "get-logs":
                return {"id": rid, "result": self.get_logs(params)}
            return _err(rid, ERR_NOT_FOUND, f"unknown method {method!r}")
        except ServiceError as exc:
            return _err(rid, exc.code, exc.message)
        except Exception as exc:  # internal errors must still answer
            return _err(rid, ERR_INTERNAL, f"{type(exc).__name__}: {exc}")


def _err(rid: int, code: int, message: str) -> dict:
    return {"id": rid, "error": {"code": code, "message": message}}


class LocalSession:
    """In-process session: same dispatch semantics as the wire, no socket."""

    def __init__(self, service: Service):
        self.service = service
        self.used_ids = set()
        self.subscriptions = []
        self._next_id = 0

    def request(self, method: str, params=None) -> dict:
        rid = self._next_id
        self._next_id += 1
        req = {"id": rid, "method": method, "params": params or {}}
        # round-trip through the codec so local use exercises the wire format
        resp = self.service.dispatch(decode_line(encode_line(req)), self)
        return decode_line(encode_line(resp))


class TcpServer:
    """Threaded NDJSON server over a local TCP socket."""

    def __init__(self, service: Service, host: str = "127.0.0.1",
                 port: int = 0):
        self.service = service
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(8)
        self.address = self._sock.getsockname()
        self._threads = []
        self._sessions = []
        self._closing = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)
        self._accept_thread.start()

    def _accept_loop(self):
        while not self._closing.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            handler = _WireSession(self, conn)
            self._sessions.append(handler)
            t = threading.Thread(target=handler.run, daemon=True)
            t.start()
            self._threads.append(t)

    def pump(self) -> None:
        """Flush queued telemetry to wire subscribers (called by the clock)."""
        for sess in list(self._sessions):
            sess.flush_telemetry()

    def close(self):
        self._closing.set()
        try:
            self._sock.close()
        except OSError:
            pass
        for sess in list(self._sessions):
            sess.close()


class _WireSession:
    def __init__(self, server: TcpServer, conn: socket.socket):
        self.server = server
        self.conn = conn
        self.used_ids = set()
        self.subscriptions = []
        self._write_lock = threading.Lock()
        self._open = True
        self._wake = threading.Event()
        self._writer = threading.Thread(target=self._writer_loop, daemon=True)
        self._writer.start()

    def run(self):
        try:
            with self.conn.makefile("rb") as reader:
                for raw in reader:
                    try:
                        request = decode_line(raw)
                    except json.JSONDecodeError as exc:
                        self._send(_err(0, ERR_VALIDATION,
                                        f"bad json: {exc.msg}"))
                        continue
                    response = self.server.service.dispatch(request, self)
                    self._send(response)
                    self._wake.set()
        except (OSError, ValueError):
            pass
        finally:
            self.close()

    def flush_telemetry(self):
        # called by the clock thread; hand off to the writer so a slow
        # consumer can only stall its own session
        self._wake.set()

    def _writer_loop(self):
        while self._open:
            self._wake.wait(timeout=0.05)
            self._wake.clear()
            for sub in list(self.subscriptions):
                for msg in sub.drain():
                    self._send(msg)
                    if not self._open:
                        return
                if sub.dropped:
                    self.close()
                    return

    def _send(self, obj: dict):
        if not self._open:
            return
        try:
            with self._write_lock:
                self.conn.sendall(encode_line(obj))
        except OSError:
            self.close()

    def close(self):
        if not self._open:
            return
        self._open = False
        for sub in self.subscriptions:
            self.server.service.unsubscribe(sub.sub_id)
        # shutdown, not just close: the reader thread holds a makefile on the
        # same fd, so close() alone would never send FIN to the peer
        try:
            self.conn.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.conn.close()
        except OSError:
            pass
        if self in self.server._sessions:
            self.server._sessions.remove(self)


class WireControl:
    """Client adapter: the agent's config/log operations over the socket."""

    def __init__(self, host: str, port: int, timeout_s: float = 10.0):
        self._conn = socket.create_connection((host, port), timeout=timeout_s)
        self._reader = self._conn.makefile("rb")
        self._next_id = 0
        self._pending_telemetry = []

    def _request(self, method: str, params=None) -> dict:
        rid = self._next_id
        self._next_id += 1
        self._conn.sendall(encode_line({"id": rid, "method": method,
                                        "params": params or {}}))
        while True:
            raw = self._reader.readline()
            if not raw:
                raise ConnectionError("service closed the connection")
            msg = decode_line(raw)
            if "telemetry" in msg:
                self._pending_telemetry.append(msg["telemetry"])
                continue
            if msg.get("id") != rid:
                continue
            if "error" in msg:
                err = msg["error"]
                raise ServiceError(err["code"], err["message"])
            return msg["result"]

    def get_config(self) -> dict:
        return self._request("get-config")

    def edit_config(self, gains_db=None, tilts_db=None) -> dict:
        changes = {}
        if gains_db is not None:
            changes["gains_db"] = [float(g) for g in gains_db]
        if tilts_db is not None:
            changes["tilts_db"] = [float(t) for t in tilts_db]
        return self._request("edit-config", {"changes": changes})

    def inject_event(self, event: dict) -> dict:
        return self._request("inject-event", {"event": event})

    def get_logs(self, from_tick=None, to_tick=None) -> dict:
        params = {}
        if from_tick is not None:
            params["from_tick"] = from_tick
        if to_tick is not None:
            params["to_tick"] = to_tick
        return self._request("get-logs", params)

    def close(self):
        try:
            self._conn.close()
        except OSError:
            pass
