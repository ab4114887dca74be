"""TCP fusion server plus the HTTP operator bridge.

Each connected sensor gets its own session thread; every engine call
(ingest, solve, query, registry changes) happens under one lock, and no
lock is ever held across a network write. A timer thread runs the fusion
cycle: solve at the newest measurement timestamp, assemble per-sensor
POSE_UPDATEs, broadcast to sessions whose solve time advanced, and push a
{snapshot, report} frame to operator stream subscribers.

Sessions are independent failure domains. A malformed line gets an ERROR
reply and closes only that session; an unknown message type gets an ERROR
and the session lives on. Closing a session (BYE, EOF, crash) removes its
sensor node, so the next cycle already excludes it.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import threading
import time
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import fusion, protocol
from .fusion import AnchorIneligible, FusionEngine, TargetNotAllowed
from .graph import UnknownNode, active, passive
from .protocol import ProtocolError

log = logging.getLogger(__name__)

DEFAULT_FUSION_HZ = 20.0


class BindFailure(OSError):
    """Listen address could not be bound."""


def _percentiles(samples) -> dict:
    if not samples:
        return {"p50": 0.0, "p99": 0.0, "max": 0.0}
    arr = np.asarray(samples)
    return {
        "p50": float(np.percentile(arr, 50)),
        "p99": float(np.percentile(arr, 99)),
        "max": float(arr.max()),
    }


def _report_json(report) -> dict | None:
    return None if report is None else report.to_json_dict()


class _Session:
    """One connected sensor client; writes serialized per session."""

    def __init__(self, sock: socket.socket, addr) -> None:
        self.sock = sock
        self.addr = addr
        self.sensor_id: str | None = None
        self.default_info: np.ndarray | None = None
        self.last_update_t = -1
        self.alive = True
        self._wlock = threading.Lock()

    def send(self, msg: dict) -> bool:
        data = protocol.encode(msg)
        try:
            with self._wlock:
                self.sock.sendall(data)
            return True
        except OSError:
            self.alive = False
            return False

    def close(self) -> None:
        self.alive = False
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


class FusionServer:
    """Measurement ingestion over TCP, solves on a timer, operator HTTP."""

    def __init__(
        self,
        listen=("127.0.0.1", 0),
        operator_listen=("127.0.0.1", 0),
        fusion_hz: float = DEFAULT_FUSION_HZ,
        stale_after_us: int | None = None,
        sync_window_us: int | None = None,
        allow_targets=None,
        log_path=None,
    ) -> None:
        if fusion_hz <= 0:
            raise ValueError("fusion_hz must be positive")
        kwargs = {}
        if stale_after_us is not None:
            kwargs["stale_after_us"] = stale_after_us
        if sync_window_us is not None:
            kwargs["sync_window_us"] = sync_window_us
        self.engine = FusionEngine(allow_targets=allow_targets, **kwargs)
        self.fusion_hz = fusion_hz
        self._listen_cfg = listen
        self._operator_cfg = operator_listen
        self._log_path = log_path
        self._log_file = None
        self._log_lock = threading.Lock()
        self._lock = threading.Lock()  # engine + session registry
        self._sessions: dict[str, _Session] = {}
        self._pending: set[_Session] = set()
        self._subscribers: list[queue.Queue] = []
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._listener: socket.socket | None = None
        self._http: ThreadingHTTPServer | None = None
        self._cycle_ms: deque = deque(maxlen=4096)
        self.cycles = 0
        self.protocol_errors = 0
        self._last_solved_t: int | None = None
        self.addr: tuple[str, int] | None = None
        self.operator_addr: tuple[str, int] | None = None

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> "FusionServer":
        try:
            self._listener = socket.create_server(self._listen_cfg)
        except OSError as exc:
            raise BindFailure(f"cannot bind {self._listen_cfg}: {exc}") from exc
        self.addr = self._listener.getsockname()[:2]
        if self._operator_cfg is not None:
            try:
                self._http = ThreadingHTTPServer(self._operator_cfg, _BridgeHandler)
            except OSError as exc:
                self._listener.close()
                raise BindFailure(f"cannot bind {self._operator_cfg}: {exc}") from exc
            self._http.daemon_threads = True
            self._http.fusion = self
            self.operator_addr = self._http.server_address[:2]
        if self._log_path is not None:
            self._log_file = open(self._log_path, "a", encoding="utf-8")
        for name, target in (
            ("accept", self._accept_loop),
            ("fusion", self._fusion_loop),
        ):
            t = threading.Thread(target=target, name=f"scenefuse-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        if self._http is not None:
            t = threading.Thread(
                target=self._http.serve_forever, name="scenefuse-operator", daemon=True
            )
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._listener is not None:
            self._listener.close()
        if self._http is not None:
            self._http.shutdown()
        with self._lock:
            sessions = list(self._sessions.values()) + list(self._pending)
        for sess in sessions:
            sess.close()
        for t in self._threads:
            t.join(timeout=5.0)
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    def __enter__(self) -> "FusionServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def request_stop(self) -> None:
        """Signal-handler-safe shutdown trigger; wait() returns after this."""
        self._stop.set()

    def wait(self) -> None:
        """Block until stop is requested from another thread or a signal."""
        while not self._stop.wait(0.2):
            pass

    # -- session handling ------------------------------------------------------

    def _accept_loop(self) -> None:
        # closing a listening socket does not wake a blocked accept() on
        # linux, so the listener polls with a short timeout instead
        self._listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                sock, addr = self._listener.accept()
            except TimeoutError:
                continue
            except OSError:
                return  # listener closed
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sess = _Session(sock, addr)
            with self._lock:
                self._pending.add(sess)
            t = threading.Thread(
                target=self._serve_session, args=(sess,), daemon=True,
                name=f"scenefuse-session-{addr[1]}",
            )
            t.start()

    def _serve_session(self, sess: _Session) -> None:
        reader = sess.sock.makefile("rb")
        try:
            for line in reader:
                if self._stop.is_set():
                    break
                try:
                    msg = protocol.parse_line(line)
                except ProtocolError as exc:
                    self.protocol_errors += 1
                    sess.send(protocol.error(exc.code, exc.detail))
                    if exc.code == "unknown_type":
                        continue  # the line framing is intact, keep going
                    break
                if not self._dispatch(sess, msg):
                    break
        except OSError:
            pass
        except Exception:
            log.exception("session %s crashed", sess.sensor_id or sess.addr)
        finally:
            self._deregister(sess)
            sess.close()

    def _dispatch(self, sess: _Session, msg: dict) -> bool:
        kind = msg["type"]
        if kind == "hello":
            return self._handle_hello(sess, msg)
        if kind == "bye":
            return False
        if sess.sensor_id is None:
            sess.send(protocol.error("not_registered", "hello required first"))
            return False
        if kind == "meas":
            return self._handle_measurement(sess, msg)
        if kind == "query":
            with self._lock:
                result = self.engine.query(sess.sensor_id, msg["target"])
            sess.send(result)
            return True
        # a known schema the server has no business receiving (update, result...)
        sess.send(protocol.error("unexpected_type", f"server cannot take {kind!r}"))
        return True

    def _handle_hello(self, sess: _Session, msg: dict) -> bool:
        if sess.sensor_id is not None:
            sess.send(protocol.error("already_registered", sess.sensor_id))
            return True
        sensor_id = msg["sensor_id"]
        refused = None
        displaced = None
        with self._lock:
            try:
                self.engine.ensure_sensor(sensor_id)
                for target in msg["targets"]:
                    self.engine.ensure_target(str(target))
                displaced = self._sessions.pop(sensor_id, None)
            except TargetNotAllowed as exc:
                refused = protocol.error("target_not_allowed", str(exc))
        if refused is not None:
            sess.send(refused)
            return False
        if displaced is not None:
            displaced.close()
        sess.sensor_id = sensor_id
        sess.default_info = fusion.info_diag_for(msg["sensor_type"])
        ok = sess.send(protocol.welcome(int(time.time() * 1e6)))
        if not ok:
            return False
        # joins the broadcast set only after the welcome went out
        with self._lock:
            self._pending.discard(sess)
            self._sessions[sensor_id] = sess
        return True

    def _handle_measurement(self, sess: _Session, msg: dict) -> bool:
        if msg["sensor_id"] != sess.sensor_id:
            sess.send(protocol.error("sensor_mismatch", msg["sensor_id"]))
            return True
        try:
            with self._lock:
                self.engine.ingest(msg, default_info_diag=sess.default_info)
        except TargetNotAllowed as exc:
            sess.send(protocol.error("target_not_allowed", str(exc)))
            return True
        self._log(msg)
        return True

    def _deregister(self, sess: _Session) -> None:
        with self._lock:
            self._pending.discard(sess)
            if sess.sensor_id is not None and self._sessions.get(sess.sensor_id) is sess:
                del self._sessions[sess.sensor_id]
                try:
                    self.engine.remove(active(sess.sensor_id))
                except UnknownNode:
                    pass  # operator deleted it first

    # -- fusion cycle ----------------------------------------------------------

    def _fusion_loop(self) -> None:
        period = 1.0 / self.fusion_hz
        next_due = time.monotonic()
        while not self._stop.is_set():
            next_due += period
            delay = next_due - time.monotonic()
            if delay > 0 and self._stop.wait(delay):
                return
            started = time.monotonic()
            try:
                outbox, frame, report_row = self._run_cycle()
                if report_row is not None:
                    self._log(report_row)
                for sess, upd in outbox:
                    if sess.send(upd):
                        sess.last_update_t = upd["solve_t_us"]
                        self._log(dict(upd, sensor_id=sess.sensor_id))
                self._push_frame(frame)
            except Exception:
                log.exception("fusion cycle failed")
                continue
            self._cycle_ms.append((time.monotonic() - started) * 1e3)
            self.cycles += 1

    def _run_cycle(self):
        """One solve + payload assembly pass, entirely under the lock."""
        outbox = []
        report_row = None
        with self._lock:
            now = self.engine.graph.latest_timestamp()
            if now is not None and now != self._last_solved_t:
                prev = self.engine.report
                self.engine.step(now)
                self._last_solved_t = now
                fresh = self.engine.report
                if self._log_file is not None and fresh is not None and fresh is not prev:
                    report_row = fusion.report_record(now, fresh)
            for sensor_id, sess in self._sessions.items():
                if not sess.alive:
                    continue
                upd = self.engine.update_for(sensor_id)
                if upd["solve_t_us"] > sess.last_update_t:
                    outbox.append((sess, upd))
            frame = {
                "cycle": self.cycles,
                "solve_t_us": self._last_solved_t or 0,
                "snapshot": self._live_graph_dict(),
                "report": _report_json(self.engine.report),
            }
        return outbox, frame, report_row

    def _push_frame(self, frame: dict) -> None:
        with self._lock:
            subs = list(self._subscribers)
        for q in subs:
            try:
                q.put_nowait(frame)
            except queue.Full:
                try:  # slow consumer: drop its oldest frame, not the newest
                    q.get_nowait()
                    q.put_nowait(frame)
                except (queue.Empty, queue.Full):
                    pass

    def _log(self, record: dict) -> None:
        if self._log_file is None:
            return
        line = json.dumps(record, separators=(",", ":")) + "\n"
        with self._log_lock:
            self._log_file.write(line)
            self._log_file.flush()

    # -- operator surface --------------------------------------------------------

    def graph_json(self) -> dict:
        with self._lock:
            return self._live_graph_dict()

    def _live_graph_dict(self) -> dict:
        # caller holds self._lock; the solve snapshot can be stale after a
        # node removal, so this always reads the graph as it stands now
        now = self.engine.graph.latest_timestamp()
        snap = self.engine.graph.snapshot(now if now is not None else 0)
        out = snap.to_json_dict()
        out["taken_at_us"] = snap.taken_at_us
        return out

    def report_json(self) -> dict | None:
        with self._lock:
            return _report_json(self.engine.report)

    def metrics_json(self) -> dict:
        with self._lock:
            return {
                "sessions": len(self._sessions),
                "cycles": self.cycles,
                "stale_drops": self.engine.stale_drops,
                "solve_failures": self.engine.solve_failures,
                "protocol_errors": self.protocol_errors,
                "cycle_ms": _percentiles(list(self._cycle_ms)),
            }

    def add_node(self, name: str, layer: str = "passive") -> None:
        with self._lock:
            if layer == "active":
                self.engine.ensure_sensor(name)
            else:
                self.engine.ensure_target(name)

    def delete_node(self, ident: str) -> None:
        layer, _, name = ident.rpartition(":")
        node = active(name) if layer == "active" else passive(name)
        victim = None
        with self._lock:
            self.engine.remove(node)  # raises UnknownNode for the 404 path
            if layer == "active":
                victim = self._sessions.pop(name, None)
        if victim is not None:
            victim.close()

    def force_anchor(self, ident: str) -> None:
        name = ident.rpartition(":")[2]
        with self._lock:
            self.engine.force_anchor(name)

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=8)
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    @property
    def stopping(self) -> bool:
        return self._stop.is_set()


class _BridgeHandler(BaseHTTPRequestHandler):
    """REST + event-stream endpoints in front of one FusionServer."""

    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet; the session log is the record
        pass

    @property
    def fusion(self) -> FusionServer:
        return self.server.fusion

    def _json(self, code: int, obj) -> None:
        body = json.dumps(obj).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return {}
        try:
            return json.loads(self.rfile.read(length))
        except json.JSONDecodeError:
            return {}

    def do_GET(self) -> None:
        if self.path == "/graph":
            self._json(200, self.fusion.graph_json())
        elif self.path == "/report":
            self._json(200, self.fusion.report_json() or {})
        elif self.path == "/metrics":
            self._json(200, self.fusion.metrics_json())
        elif self.path == "/stream":
            self._stream()
        else:
            self._json(404, {"error": "unknown path"})

    def do_POST(self) -> None:
        if self.path == "/nodes":
            body = self._body()
            name = body.get("name")
            if not isinstance(name, str) or not name:
                self._json(400, {"error": "body must carry a node name"})
                return
            try:
                self.fusion.add_node(name, body.get("layer", "passive"))
            except TargetNotAllowed:
                self._json(409, {"error": "target not in allow-list"})
                return
            self._json(200, {"ok": True})
        elif self.path.startswith("/anchor/"):
            try:
                self.fusion.force_anchor(self.path[len("/anchor/"):])
            except AnchorIneligible:
                self._json(409, {"error": "anchor ineligible"})
                return
            self._json(200, {"ok": True})
        else:
            self._json(404, {"error": "unknown path"})

    def do_DELETE(self) -> None:
        if self.path.startswith("/nodes/"):
            try:
                self.fusion.delete_node(self.path[len("/nodes/"):])
            except UnknownNode:
                self._json(404, {"error": "unknown node"})
                return
            self._json(200, {"ok": True})
        else:
            self._json(404, {"error": "unknown path"})

    def do_OPTIONS(self) -> None:
        # browser dashboards preflight POST/DELETE from another origin
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, DELETE")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def _stream(self) -> None:
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        q = self.fusion.subscribe()
        try:
            while not self.fusion.stopping:
                try:
                    frame = q.get(timeout=0.5)
                except queue.Empty:
                    continue
                data = json.dumps(frame, separators=(",", ":"))
                self.wfile.write(f"data: {data}\n\n".encode("utf-8"))
                self.wfile.flush()
        except OSError:
            pass  # subscriber went away
        finally:
            self.fusion.unsubscribe(q)
