"""Streaming mitigation service and its binary wire protocol.

A client streams raw RGB frames over one long-lived TCP connection; the
server mitigates each frame with the connection's noise configuration and
answers, in order, with the mitigated raster under the same frame id and
timestamp. Region data rides an optional trailer on each raw frame, or
comes from a region file configured server-side. Mitigation calls the same
engine as the offline path with the same per-(seed, frame id) RNG policy,
so online output is bit-identical to the offline CLI's.

Wire format (all integers little-endian):

    magic      4 bytes  b"GGF1"
    version    u8       1
    msg_type   u8       0=RawFrame 1=MitigatedFrame 2=Config 3=Stats 4=Error
    reserved   u16      0
    frame_id   u32
    width      u16
    height     u16
    timestamp  u64      microseconds
    payload    u32 length, then that many bytes

RawFrame payload: width*height*3 raster bytes, optionally followed by a
u32-length-prefixed JSON region record ({"frame_id","boxes","keypoints"}).
Config payload: JSON with any of approach/distribution/lambda/
kpm_patch_px/seed/enabled; the reply echoes the effective config. Stats
requests carry an empty payload and are answered with the meter JSON.
Error payloads are {"error","detail"} JSON.
"""

from __future__ import annotations

import json
import socket
import socketserver
import statistics
import struct
import threading
import time
import warnings
from collections import deque
from dataclasses import dataclass, replace

from .errors import ValidationError
from .keypoint_io import Frame
from .mitigate import (
    Approach,
    Distribution,
    NoiseConfig,
    RegionProvider,
    RegionRecord,
    mitigate_frame,
)

MAGIC = b"GGF1"
VERSION = 1
HEADER = struct.Struct("<4sBBHIHHQI")
HEADER_SIZE = HEADER.size  # 28 bytes

MSG_RAW_FRAME = 0
MSG_MITIGATED_FRAME = 1
MSG_CONFIG = 2
MSG_STATS = 3
MSG_ERROR = 4

DEFAULT_PAYLOAD_CAP = 32 * 1024 * 1024


@dataclass(frozen=True)
class WireMessage:
    msg_type: int
    frame_id: int = 0
    width: int = 0
    height: int = 0
    timestamp_us: int = 0
    payload: bytes = b""

    def encode(self) -> bytes:
        return HEADER.pack(MAGIC, VERSION, self.msg_type, 0, self.frame_id,
                           self.width, self.height, self.timestamp_us,
                           len(self.payload)) + self.payload


class ProtocolError(ValidationError):
    """Malformed wire data; fatal=True means framing is lost and the
    connection must close."""

    def __init__(self, code, detail, fatal=False):
        super().__init__(detail)
        self.code = code
        self.detail = detail
        self.fatal = fatal


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


def read_message(sock: socket.socket,
                 payload_cap: int = DEFAULT_PAYLOAD_CAP) -> WireMessage | None:
    """Read one framed message; None on clean EOF before a header."""
    head = _recv_exact(sock, HEADER_SIZE)
    if head is None:
        return None
    magic, version, msg_type, _, frame_id, width, height, ts, plen = HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError("bad-magic", f"expected {MAGIC!r}, got {magic!r}", fatal=True)
    if version != VERSION:
        raise ProtocolError("bad-version", f"unsupported version {version}", fatal=True)
    if plen > payload_cap:
        raise ProtocolError("oversized-payload",
                            f"payload {plen} exceeds cap {payload_cap}", fatal=True)
    payload = _recv_exact(sock, plen) if plen else b""
    if plen and payload is None:
        return None
    return WireMessage(msg_type, frame_id, width, height, ts, payload)


def error_message(code: str, detail: str) -> WireMessage:
    payload = json.dumps({"error": code, "detail": detail},
                         separators=(",", ":")).encode()
    return WireMessage(MSG_ERROR, payload=payload)


def split_raw_frame(msg: WireMessage) -> tuple[Frame, RegionRecord | None]:
    """Raster plus the optional trailing region record."""
    raster_len = msg.width * msg.height * 3
    if raster_len == 0 or len(msg.payload) < raster_len:
        raise ProtocolError(
            "short-payload",
            f"frame {msg.frame_id}: payload {len(msg.payload)} < "
            f"{msg.width}x{msg.height}x3")
    frame = Frame.from_bytes(msg.frame_id, msg.width, msg.height,
                             msg.timestamp_us, msg.payload[:raster_len])
    trailer = msg.payload[raster_len:]
    if not trailer:
        return frame, None
    if len(trailer) < 4:
        raise ProtocolError("bad-trailer", f"frame {msg.frame_id}: truncated trailer")
    (jlen,) = struct.unpack("<I", trailer[:4])
    if len(trailer) != 4 + jlen:
        raise ProtocolError(
            "bad-trailer",
            f"frame {msg.frame_id}: trailer length {len(trailer) - 4} != {jlen}")
    try:
        record = RegionRecord.from_json(trailer[4:].decode())
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ProtocolError("bad-trailer",
                            f"frame {msg.frame_id}: {exc}") from exc
    return frame, record


def raw_frame_message(frame: Frame, record: RegionRecord | None = None) -> WireMessage:
    payload = frame.to_bytes()
    if record is not None:
        body = record.to_json().encode()
        payload += struct.pack("<I", len(body)) + body
    return WireMessage(MSG_RAW_FRAME, frame.frame_id, frame.width, frame.height,
                       frame.timestamp_us, payload)


# --- throughput metering ---------------------------------------------------

class ThroughputMeter:
    """Sliding-window frame rates plus whole-session rates and per-frame
    receive-to-send latency."""

    _EVENTS = ("received", "processed", "sent")

    def __init__(self, window_s: float = 2.0):
        self.window_s = window_s
        self._window = {e: deque() for e in self._EVENTS}
        self._count = {e: 0 for e in self._EVENTS}
        self._first = {e: None for e in self._EVENTS}
        self._last = {e: None for e in self._EVENTS}
        self._received_at: dict[int, float] = {}
        self._latencies_ms: list[float] = []
        self.frames_total = 0

    def record(self, event: str, t: float, frame_id: int | None = None) -> None:
        q = self._window[event]
        q.append(t)
        while q and q[0] < t - self.window_s:
            q.popleft()
        self._count[event] += 1
        if self._first[event] is None:
            self._first[event] = t
        self._last[event] = t
        if event == "received" and frame_id is not None:
            self._received_at[frame_id] = t
        if event == "sent":
            self.frames_total += 1
            if frame_id is not None and frame_id in self._received_at:
                self._latencies_ms.append((t - self._received_at.pop(frame_id)) * 1e3)

    def _window_rate(self, event: str) -> float:
        return len(self._window[event]) / self.window_s

    def _session_rate(self, event: str) -> float:
        count = self._count[event]
        first, last = self._first[event], self._last[event]
        if count < 2 or first is None or last <= first:
            return float(count)
        return (count - 1) / (last - first)

    @property
    def in_fps(self) -> float:
        return self._window_rate("received")

    @property
    def processed_fps(self) -> float:
        return self._window_rate("processed")

    @property
    def out_fps(self) -> float:
        return self._window_rate("sent")

    def latency_ms(self) -> dict:
        if not self._latencies_ms:
            return {"mean": 0.0, "p50": 0.0, "p95": 0.0}
        xs = sorted(self._latencies_ms)
        p95 = xs[min(len(xs) - 1, int(round(0.95 * (len(xs) - 1))))]
        return {"mean": statistics.fmean(xs), "p50": statistics.median(xs), "p95": p95}

    def stats(self) -> dict:
        return {
            "in_fps": self.in_fps,
            "processed_fps": self.processed_fps,
            "out_fps": self.out_fps,
            "latency_ms": self.latency_ms(),
            "frames_total": self.frames_total,
            "session": self.session_rates(),
        }

    def session_rates(self) -> dict:
        return {
            "in_fps": self._session_rate("received"),
            "processed_fps": self._session_rate("processed"),
            "out_fps": self._session_rate("sent"),
        }


def meter_update(meter: ThroughputMeter, event: str, t: float,
                 frame_id: int | None = None) -> ThroughputMeter:
    meter.record(event, t, frame_id)
    return meter


# --- server ------------------------------------------------------------------

def parse_config_update(current: NoiseConfig, payload: bytes) -> NoiseConfig:
    try:
        obj = json.loads(payload.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError("bad-config", f"config is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("bad-config", "config must be a JSON object")
    kwargs = {}
    try:
        if "approach" in obj:
            kwargs["approach"] = Approach(str(obj["approach"]).lower())
        if "distribution" in obj:
            kwargs["distribution"] = Distribution.parse(str(obj["distribution"]))
        if "lambda" in obj:
            kwargs["lam"] = float(obj["lambda"])
        if "kpm_patch_px" in obj:
            kwargs["kpm_patch_px"] = int(obj["kpm_patch_px"])
        if "seed" in obj:
            kwargs["seed"] = int(obj["seed"])
        if "enabled" in obj:
            kwargs["enabled"] = bool(obj["enabled"])
        return replace(current, **kwargs)
    except (ValueError, ValidationError) as exc:
        raise ProtocolError("bad-config", str(exc)) from exc


def config_json(cfg: NoiseConfig) -> bytes:
    return json.dumps({
        "approach": cfg.approach.value,
        "distribution": cfg.distribution.value,
        "lambda": cfg.lam,
        "kpm_patch_px": cfg.kpm_patch_px,
        "seed": cfg.seed,
        "enabled": cfg.enabled,
    }, separators=(",", ":"), sort_keys=True).encode()


class _ConnectionHandler(socketserver.BaseRequestHandler):
    def handle(self):
        server: MitigationServer = self.server
        cfg = server.default_config
        meter = ThroughputMeter(server.meter_window_s)
        server.register_meter(meter)
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                msg = read_message(sock, server.payload_cap)
            except ProtocolError as exc:
                self._send(sock, error_message(exc.code, exc.detail))
                return
            except OSError:
                return
            if msg is None:
                return
            try:
                if msg.msg_type == MSG_RAW_FRAME:
                    cfg = self._handle_frame(sock, server, msg, cfg, meter)
                elif msg.msg_type == MSG_CONFIG:
                    cfg = parse_config_update(cfg, msg.payload)
                    self._send(sock, WireMessage(MSG_CONFIG, payload=config_json(cfg)))
                elif msg.msg_type == MSG_STATS:
                    payload = json.dumps(meter.stats(), separators=(",", ":"),
                                         sort_keys=True).encode()
                    self._send(sock, WireMessage(MSG_STATS, payload=payload))
                else:
                    self._send(sock, error_message(
                        "bad-type", f"unexpected msg_type {msg.msg_type}"))
            except ProtocolError as exc:
                self._send(sock, error_message(exc.code, exc.detail))
                if exc.fatal:
                    return
            except OSError:
                return

    def _handle_frame(self, sock, server, msg, cfg, meter):
        t = time.monotonic()
        meter.record("received", t, msg.frame_id)
        frame, record = split_raw_frame(msg)
        if record is None and server.regions is not None:
            record = server.regions.get(frame.frame_id)
        box = record.boxes[0] if record and record.boxes else None
        kps = record.keypoints if record else None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = mitigate_frame(frame, cfg, region=box, keypoints=kps)
        meter.record("processed", time.monotonic(), msg.frame_id)
        reply = WireMessage(MSG_MITIGATED_FRAME, frame.frame_id, frame.width,
                            frame.height, frame.timestamp_us, out.to_bytes())
        self._send(sock, reply)
        meter.record("sent", time.monotonic(), msg.frame_id)
        return cfg

    @staticmethod
    def _send(sock, msg: WireMessage):
        try:
            sock.sendall(msg.encode())
        except OSError:
            pass


class MitigationServer(socketserver.ThreadingTCPServer):
    """Long-running mitigation service; one handler thread per client,
    frames answered strictly in order of receipt per connection."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, default_config: NoiseConfig | None = None,
                 regions: RegionProvider | None = None,
                 payload_cap: int = DEFAULT_PAYLOAD_CAP,
                 meter_window_s: float = 2.0):
        super().__init__(address, _ConnectionHandler)
        self.default_config = default_config or NoiseConfig()
        self.regions = regions
        self.payload_cap = payload_cap
        self.meter_window_s = meter_window_s
        self._meters: list[ThroughputMeter] = []
        self._meter_lock = threading.Lock()

    def register_meter(self, meter: ThroughputMeter) -> None:
        with self._meter_lock:
            self._meters.append(meter)

    @property
    def bound_address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def aggregate_stats(self) -> dict:
        with self._meter_lock:
            meters = list(self._meters)
        total = sum(m.frames_total for m in meters)
        return {"connections": len(meters), "frames_total": total}


def serve(address: tuple[str, int], default_config: NoiseConfig | None = None,
          regions: RegionProvider | None = None, **kwargs) -> None:
    """Run the mitigation server until interrupted."""
    with MitigationServer(address, default_config, regions, **kwargs) as server:
        server.serve_forever()


# --- replay client -------------------------------------------------------------

@dataclass
class ReplayResult:
    sent: int
    received: int
    lost: int
    in_fps: float
    out_fps: float
    replies: list[Frame]
    reply_order: list[int]
    server_stats: dict | None = None


def replay(address: tuple[str, int], frames: list[Frame], fps: float,
           records: dict[int, RegionRecord] | None = None,
           config: dict | None = None,
           collect_replies: bool = True,
           request_stats: bool = False) -> ReplayResult:
    """Stream frames to a server at a fixed rate and gather the replies.

    A reader thread drains replies while the writer paces sends, so socket
    buffers never deadlock. With request_stats the server's meter snapshot
    for this connection is fetched after the last frame.
    """
    sock = socket.create_connection(address)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    replies: list[Frame] = []
    order: list[int] = []
    recv_times: list[float] = []
    stats_box: list[dict] = []
    expected = len(frames) + (1 if config is not None else 0) \
        + (1 if request_stats else 0)

    def reader():
        got = 0
        while got < expected:
            try:
                msg = read_message(sock)
            except (ProtocolError, OSError):
                break
            if msg is None:
                break
            got += 1
            if msg.msg_type == MSG_MITIGATED_FRAME:
                recv_times.append(time.monotonic())
                order.append(msg.frame_id)
                if collect_replies:
                    replies.append(Frame.from_bytes(
                        msg.frame_id, msg.width, msg.height, msg.timestamp_us,
                        msg.payload))
            elif msg.msg_type == MSG_STATS:
                stats_box.append(json.loads(msg.payload))

    thread = threading.Thread(target=reader, daemon=True)
    thread.start()

    if config is not None:
        sock.sendall(WireMessage(
            MSG_CONFIG, payload=json.dumps(config, separators=(",", ":")).encode()
        ).encode())

    interval = 1.0 / fps if fps > 0 else 0.0
    start = time.monotonic()
    send_times = []
    for i, frame in enumerate(frames):
        target = start + i * interval
        now = time.monotonic()
        if target > now:
            time.sleep(target - now)
        record = records.get(frame.frame_id) if records else None
        sock.sendall(raw_frame_message(frame, record).encode())
        send_times.append(time.monotonic())
    if request_stats:
        sock.sendall(WireMessage(MSG_STATS).encode())
    thread.join(timeout=max(30.0, 3 * len(frames) * interval + 10))
    sock.close()

    def rate(times):
        if len(times) < 2 or times[-1] <= times[0]:
            return float(len(times))
        return (len(times) - 1) / (times[-1] - times[0])

    received = len(order)
    return ReplayResult(
        sent=len(frames),
        received=received,
        lost=len(frames) - received,
        in_fps=rate(send_times),
        out_fps=rate(recv_times),
        replies=replies,
        reply_order=order,
        server_stats=stats_box[0] if stats_box else None,
    )
