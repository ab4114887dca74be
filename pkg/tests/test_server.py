"""Live server tests: session lifecycle, broadcast and query traffic,
failure isolation, the operator HTTP surface, and log replay."""

import json
import socket
import time
import urllib.error
import urllib.request

import pytest

from scenefuse import protocol, sim
from scenefuse.se3 import relative, rotation_distance, translation_distance
from scenefuse.server import BindFailure, FusionServer

from conftest import consistent_records, world_2x2

POLL_S = 0.01


def wait_for(pred, timeout=5.0, what="condition"):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return
        time.sleep(POLL_S)
    raise AssertionError(f"timed out waiting for {what}")


def http_json(addr, path, method="GET", body=None):
    """(status, parsed body) for one operator request; errors included."""
    url = f"http://{addr[0]}:{addr[1]}{path}"
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(url, data=data, method=method)
    if data is not None:
        req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, timeout=5.0) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


class Client:
    """Line-oriented test client over one TCP connection."""

    def __init__(self, addr):
        self.sock = socket.create_connection(addr, timeout=5.0)
        self.reader = self.sock.makefile("rb")

    def send(self, msg):
        self.sock.sendall(protocol.encode(msg))

    def send_raw(self, data: bytes):
        self.sock.sendall(data)

    def recv(self):
        line = self.reader.readline()
        return json.loads(line) if line else None

    def recv_type(self, kind, limit=200):
        # skips interleaved broadcast traffic until `kind` shows up
        for _ in range(limit):
            msg = self.recv()
            if msg is None:
                return None
            if msg["type"] == kind:
                return msg
        raise AssertionError(f"no {kind!r} within {limit} messages")

    def hello(self, sensor_id, sensor_type="ots", targets=()):
        self.send(protocol.hello(sensor_id, sensor_type, targets))
        return self.recv()

    def at_eof(self):
        try:
            return self.reader.readline() == b""
        except OSError:
            return True

    def close(self):
        try:
            self.reader.close()
            self.sock.close()
        except OSError:
            pass

    def kill(self):
        # sock.close() alone leaves the fd open while the reader holds an
        # io-ref; shutdown() forces the FIN out for disconnect tests
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.close()


@pytest.fixture
def srv():
    with FusionServer(fusion_hz=50.0) as server:
        yield server


@pytest.fixture
def scene():
    return world_2x2()


def stream_pair(addr, sensors, targets, n_steps=5, step_us=50_000):
    """Two registered clients feeding a consistent scene; returns them."""
    c1, c2 = Client(addr), Client(addr)
    assert c1.hello("s1", targets=["p1", "p2"])["type"] == "welcome"
    assert c2.hello("s2", targets=["p1", "p2"])["type"] == "welcome"
    last = 0
    for k in range(1, n_steps + 1):
        last = k * step_us
        for rec in consistent_records(last, sensors, targets):
            (c1 if rec["sensor_id"] == "s1" else c2).send(rec)
        time.sleep(0.03)  # let a cycle land between batches
    return c1, c2, last


class TestSessions:
    def test_hello_welcome(self, srv):
        c = Client(srv.addr)
        msg = c.hello("s1")
        assert msg["type"] == "welcome"
        assert msg["server_time_us"] > 0
        c.close()

    def test_measurement_before_hello_rejected(self, srv):
        c = Client(srv.addr)
        c.send(consistent_records(1_000, *world_2x2())[0])
        err = c.recv()
        assert err["type"] == "error" and err["code"] == "not_registered"
        assert c.at_eof()

    def test_second_hello_same_connection(self, srv):
        c = Client(srv.addr)
        c.hello("s1")
        err = c.hello("s1")
        assert err["code"] == "already_registered"
        # session stays usable
        c.send(consistent_records(1_000, *world_2x2())[0])
        assert c.recv_type("update")["solve_t_us"] == 1_000
        c.close()

    def test_sensor_mismatch_keeps_session(self, srv, scene):
        sensors, targets = scene
        c = Client(srv.addr)
        c.hello("s1")
        rogue = [r for r in consistent_records(1_000, sensors, targets)
                 if r["sensor_id"] == "s2"][0]
        c.send(rogue)
        assert c.recv_type("error")["code"] == "sensor_mismatch"
        c.send(consistent_records(2_000, sensors, targets)[0])
        assert c.recv_type("update") is not None
        c.close()

    def test_updates_reach_both_sensors(self, srv, scene):
        sensors, targets = scene
        c1, c2, last = stream_pair(srv.addr, sensors, targets)
        for client, name in ((c1, "s1"), (c2, "s2")):
            seen = []
            while not seen or seen[-1]["solve_t_us"] < last:
                msg = client.recv_type("update")
                assert msg is not None
                seen.append(msg)
            times = [m["solve_t_us"] for m in seen]
            assert times == sorted(set(times)), "solve times must advance"
            final = {e["target"]: e for e in seen[-1]["poses"]}
            assert set(final) == {"p1", "p2"}
            for tgt, entry in final.items():
                assert entry["direct"] and not entry["lose_track"]
                got = protocol.pose_from_wire(entry["pose"])
                want = relative(sensors[name], targets[tgt])
                assert translation_distance(got, want) < 1e-6
                assert rotation_distance(got, want) < 1e-6
        c1.close()
        c2.close()

    def test_query_roundtrip(self, srv, scene):
        sensors, targets = scene
        c1, c2, _ = stream_pair(srv.addr, sensors, targets, n_steps=2)
        wait_for(lambda: "passive:p2" in
                 (http_json(srv.operator_addr, "/report")[1].get("poses") or {}),
                 what="p2 solved")
        c1.send(protocol.query("p2"))
        res = c1.recv_type("result")
        assert res["target"] == "p2" and res["direct"] and not res["lose_track"]
        got = protocol.pose_from_wire(res["pose"])
        assert translation_distance(got, relative(sensors["s1"], targets["p2"])) < 1e-6
        c1.close()
        c2.close()

    def test_malformed_line_closes_only_that_session(self, srv, scene):
        sensors, targets = scene
        c1, c2, _ = stream_pair(srv.addr, sensors, targets, n_steps=2)
        c1.send_raw(b"{broken\n")
        assert c1.recv_type("error")["code"] == "bad_json"
        assert c1.at_eof()
        wait_for(lambda: "s1" not in http_json(srv.operator_addr, "/graph")[1]["active"],
                 what="s1 removal")
        # the surviving session still gets fresh updates
        for rec in consistent_records(900_000, sensors, targets):
            if rec["sensor_id"] == "s2":
                c2.send(rec)
        assert c2.recv_type("update") is not None
        assert "s2" in http_json(srv.operator_addr, "/graph")[1]["active"]
        c2.close()

    def test_unknown_type_keeps_session(self, srv):
        c = Client(srv.addr)
        c.hello("s1")
        c.send_raw(b'{"type": "chatter"}\n')
        assert c.recv_type("error")["code"] == "unknown_type"
        c.send(consistent_records(1_000, *world_2x2())[0])
        assert c.recv_type("update") is not None
        c.close()

    def test_client_bound_type_rejected_softly(self, srv):
        c = Client(srv.addr)
        c.hello("s1")
        c.send(protocol.pose_update(5, []))
        assert c.recv_type("error")["code"] == "unexpected_type"
        c.send(consistent_records(1_000, *world_2x2())[0])
        assert c.recv_type("update") is not None
        c.close()

    def test_bye_removes_sensor(self, srv):
        c = Client(srv.addr)
        c.hello("s1")
        c.send(consistent_records(1_000, *world_2x2())[0])
        wait_for(lambda: "s1" in http_json(srv.operator_addr, "/graph")[1]["active"],
                 what="s1 registration")
        c.send(protocol.bye())
        wait_for(lambda: "s1" not in http_json(srv.operator_addr, "/graph")[1]["active"],
                 what="s1 removal after bye")
        c.close()

    def test_abrupt_disconnect_removes_sensor(self, srv):
        c = Client(srv.addr)
        c.hello("s1")
        c.send(consistent_records(1_000, *world_2x2())[0])
        wait_for(lambda: "s1" in http_json(srv.operator_addr, "/graph")[1]["active"],
                 what="s1 registration")
        c.kill()
        wait_for(lambda: "s1" not in http_json(srv.operator_addr, "/graph")[1]["active"],
                 what="s1 removal after disconnect")

    def test_new_connection_displaces_old(self, srv):
        c1 = Client(srv.addr)
        c1.hello("s1")
        c2 = Client(srv.addr)
        assert c2.hello("s1")["type"] == "welcome"
        assert c1.at_eof(), "displaced session must be hung up"
        c2.send(consistent_records(1_000, *world_2x2())[0])
        assert c2.recv_type("update") is not None
        c2.close()


class TestAllowList:
    def test_hello_with_refused_target_closes(self):
        with FusionServer(fusion_hz=50.0, allow_targets={"p1"}) as srv:
            c = Client(srv.addr)
            err = c.hello("s1", targets=["rogue"])
            assert err["type"] == "error" and err["code"] == "target_not_allowed"
            assert c.at_eof()

    def test_measurement_to_refused_target_keeps_session(self, scene):
        sensors, targets = scene
        with FusionServer(fusion_hz=50.0, allow_targets={"p1", "p2"}) as srv:
            c = Client(srv.addr)
            c.hello("s1", targets=["p1"])
            bad = dict(consistent_records(1_000, sensors, targets)[0], target="rogue")
            c.send(bad)
            assert c.recv_type("error")["code"] == "target_not_allowed"
            c.send(consistent_records(2_000, sensors, targets)[0])
            assert c.recv_type("update") is not None
            c.close()


class TestOperator:
    def test_graph_report_metrics(self, srv, scene):
        sensors, targets = scene
        c1, c2, last = stream_pair(srv.addr, sensors, targets, n_steps=2)
        wait_for(lambda: http_json(srv.operator_addr, "/graph")[1]["taken_at_us"]
                 == last, what="full ingestion")
        wait_for(lambda: http_json(srv.operator_addr, "/report")[1].get("poses"),
                 what="first solve")
        status, graph = http_json(srv.operator_addr, "/graph")
        assert status == 200
        assert graph["active"] == ["s1", "s2"]
        assert sorted(graph["passive"]) == ["p1", "p2"]
        assert len(graph["edges"]) == 4 and graph["taken_at_us"] == last
        status, report = http_json(srv.operator_addr, "/report")
        assert status == 200 and report["converged"]
        assert report["anchor"].startswith("active:")
        assert set(report["poses"]) >= {"active:s1", "passive:p1"}
        status, metrics = http_json(srv.operator_addr, "/metrics")
        assert status == 200
        assert metrics["sessions"] == 2 and metrics["cycles"] > 0
        assert metrics["cycle_ms"]["p99"] >= metrics["cycle_ms"]["p50"] >= 0.0
        c1.close()
        c2.close()

    def test_node_add_delete_roundtrip(self, srv):
        status, _ = http_json(srv.operator_addr, "/nodes", "POST", {"name": "extra"})
        assert status == 200
        assert "extra" in http_json(srv.operator_addr, "/graph")[1]["passive"]
        status, _ = http_json(srv.operator_addr, "/nodes/passive:extra", "DELETE")
        assert status == 200
        assert "extra" not in http_json(srv.operator_addr, "/graph")[1]["passive"]
        status, _ = http_json(srv.operator_addr, "/nodes/passive:extra", "DELETE")
        assert status == 404

    def test_post_nodes_requires_name(self, srv):
        status, body = http_json(srv.operator_addr, "/nodes", "POST", {})
        assert status == 400 and "error" in body

    def test_post_nodes_respects_allow_list(self):
        with FusionServer(fusion_hz=50.0, allow_targets={"p1"}) as srv:
            status, _ = http_json(srv.operator_addr, "/nodes", "POST", {"name": "x"})
            assert status == 409

    def test_delete_live_sensor_hangs_up_client(self, srv):
        c = Client(srv.addr)
        c.hello("s1")
        c.send(consistent_records(1_000, *world_2x2())[0])
        wait_for(lambda: "s1" in http_json(srv.operator_addr, "/graph")[1]["active"],
                 what="s1 registration")
        status, _ = http_json(srv.operator_addr, "/nodes/active:s1", "DELETE")
        assert status == 200
        assert c.at_eof()
        assert "s1" not in http_json(srv.operator_addr, "/graph")[1]["active"]

    def test_force_anchor_takes_effect(self, srv, scene):
        sensors, targets = scene
        c1, c2, last = stream_pair(srv.addr, sensors, targets, n_steps=2)
        status, _ = http_json(srv.operator_addr, "/anchor/active:s2", "POST")
        assert status == 200
        for rec in consistent_records(last + 50_000, sensors, targets):
            (c1 if rec["sensor_id"] == "s1" else c2).send(rec)
        wait_for(lambda: http_json(srv.operator_addr, "/report")[1].get("anchor")
                 == "active:s2", what="anchor switch")
        c1.close()
        c2.close()

    def test_force_anchor_unknown_is_conflict(self, srv):
        status, body = http_json(srv.operator_addr, "/anchor/active:ghost", "POST")
        assert status == 409 and "error" in body

    def test_unknown_paths(self, srv):
        assert http_json(srv.operator_addr, "/nope")[0] == 404
        assert http_json(srv.operator_addr, "/nope", "POST", {})[0] == 404
        assert http_json(srv.operator_addr, "/nope", "DELETE")[0] == 404

    def test_preflight_allows_browser_writes(self, srv):
        url = f"http://{srv.operator_addr[0]}:{srv.operator_addr[1]}/nodes"
        req = urllib.request.Request(url, method="OPTIONS")
        with urllib.request.urlopen(req, timeout=5.0) as resp:
            assert resp.status == 204
            allow = resp.headers["Access-Control-Allow-Methods"]
            assert "DELETE" in allow and "POST" in allow
            assert resp.headers["Access-Control-Allow-Origin"] == "*"

    def test_stream_emits_frames(self, srv, scene):
        sensors, targets = scene
        c1, c2, last = stream_pair(srv.addr, sensors, targets, n_steps=2)
        url = f"http://{srv.operator_addr[0]}:{srv.operator_addr[1]}/stream"
        with urllib.request.urlopen(url, timeout=5.0) as resp:
            assert resp.headers["Content-Type"].startswith("text/event-stream")
            frame = None
            for _ in range(50):
                line = resp.readline()
                if line.startswith(b"data: "):
                    frame = json.loads(line[len(b"data: "):])
                    if frame["solve_t_us"] == last:
                        break
        assert frame is not None
        assert set(frame) == {"cycle", "solve_t_us", "snapshot", "report"}
        assert frame["snapshot"]["active"] == ["s1", "s2"]
        assert frame["report"]["converged"]
        c1.close()
        c2.close()


class TestBind:
    def test_occupied_port_raises(self):
        blocker = socket.create_server(("127.0.0.1", 0))
        addr = blocker.getsockname()[:2]
        try:
            with pytest.raises(BindFailure):
                FusionServer(listen=addr).start()
        finally:
            blocker.close()

    def test_occupied_operator_port_raises(self):
        blocker = socket.create_server(("127.0.0.1", 0))
        addr = blocker.getsockname()[:2]
        try:
            with pytest.raises(BindFailure):
                FusionServer(operator_listen=addr).start()
        finally:
            blocker.close()


class TestSessionLog:
    def test_log_carries_both_directions(self, tmp_path, scene):
        sensors, targets = scene
        log_path = tmp_path / "session.ndjson"
        with FusionServer(fusion_hz=50.0, log_path=log_path) as srv:
            c1, c2, last = stream_pair(srv.addr, sensors, targets, n_steps=3)
            while c1.recv_type("update")["solve_t_us"] < last:
                pass
            c1.close()
            c2.close()
        records = list(protocol.read_ndjson(log_path))
        meas = [r for r in records if r["type"] == "meas"]
        upd = [r for r in records if r["type"] == "update"]
        assert len(meas) == 3 * 4  # every ingested measurement is on disk
        assert upd and all("sensor_id" in r for r in upd)
        assert {r["sensor_id"] for r in upd} == {"s1", "s2"}
        # meas rows are byte-faithful copies of what the clients sent
        sent = {json.dumps(r, sort_keys=True)
                for t in (50_000, 100_000, 150_000)
                for r in consistent_records(t, sensors, targets)}
        assert {json.dumps(r, sort_keys=True) for r in meas} == sent


class TestDriveReplay:
    def test_simulated_log_roundtrip(self, srv):
        cfg = sim.ScenarioConfig(seed=3, duration_s=1.0, n_sensors=2, n_targets=2,
                                 p_block=0.0)
        meas = sim.observe(sim.generate(cfg), cfg)
        results = sim.drive(srv.addr, meas, speed="max")
        assert results
        assert all(r["type"] == "update" for r in results)
        assert {r["sensor_id"] for r in results} == {"sensor-0", "sensor-1"}
        keys = [(r["solve_t_us"], r["sensor_id"]) for r in results]
        assert keys == sorted(keys)
        by_sensor = {}
        for r in results:
            by_sensor.setdefault(r["sensor_id"], []).append(r["solve_t_us"])
        for times in by_sensor.values():
            assert times == sorted(set(times))
