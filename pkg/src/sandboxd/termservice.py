"""Terminal service: WebSocket endpoint bridging browser terminals to guest
shells.

Per session: a JSON text handshake {version, cols, rows} answered with
{"ok": true, "version": 1}, then length-prefixed binary frames both ways
(u8 kind, u32 little-endian length, payload).  Frame kinds: 0 stdin,
1 stdout, 2 stderr, 3 resize (u16 cols, u16 rows), 4 exit (i32 code, final).
A 0x03 byte in the stdin stream maps to SIGINT for the session's shell; a
dropped connection SIGKILLs the session's process tree.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from websockets.sync.server import serve

from . import wire
from .errors import status_to_shell
from .kernel import Kernel, ProcessHandle

PROTOCOL_VERSION = 1

FRAME_STDIN = 0
FRAME_STDOUT = 1
FRAME_STDERR = 2
FRAME_RESIZE = 3
FRAME_EXIT = 4

_HDR = struct.Struct("<BI")


def encode_frame(kind: int, payload: bytes) -> bytes:
    return _HDR.pack(kind, len(payload)) + payload


def decode_frame(data: bytes) -> tuple[int, bytes]:
    if len(data) < _HDR.size:
        raise ValueError("short frame")
    kind, length = _HDR.unpack_from(data, 0)
    payload = data[_HDR.size:_HDR.size + length]
    if len(payload) != length:
        raise ValueError("frame length mismatch")
    return kind, payload


def encode_resize(cols: int, rows: int) -> bytes:
    return encode_frame(FRAME_RESIZE, struct.pack("<HH", cols, rows))


def encode_exit(code: int) -> bytes:
    return encode_frame(FRAME_EXIT, struct.pack("<i", code))


@dataclass
class Session:
    sid: int
    pid: int
    cols: int
    rows: int
    live: bool = True


class TermService:
    """One kernel, many isolated shell sessions."""

    def __init__(self, kernel: Kernel, host: str = "127.0.0.1", port: int = 0,
                 audit_path: Optional[str] = None):
        self.kernel = kernel
        self.host = host
        self.port = port
        self.audit_path = audit_path
        self.sessions: Dict[int, Session] = {}
        self._next_sid = 1
        self._lock = threading.Lock()
        self._server = None
        self._thread: Optional[threading.Thread] = None

    def start(self) -> int:
        """Bind and serve in a background thread; returns the bound port."""
        self._server = serve(self._handle, self.host, self.port)
        self.port = self._server.socket.getsockname()[1]
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="term-service", daemon=True)
        self._thread.start()
        self._write_audit()
        return self.port

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def _write_audit(self) -> None:
        if self.audit_path is None:
            return
        with self._lock:
            doc = {
                "sessions": [
                    {"sid": s.sid, "pid": s.pid, "live": s.live,
                     "cols": s.cols, "rows": s.rows}
                    for s in self.sessions.values()
                ],
                "tasks": self.kernel.task_snapshot(),
            }
        tmp = self.audit_path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(doc, f, indent=1)
        import os
        os.replace(tmp, self.audit_path)

    def _handle(self, conn) -> None:
        # handshake
        try:
            raw = conn.recv()
            hello = json.loads(raw)
            cols = int(hello.get("cols", 80))
            rows = int(hello.get("rows", 24))
        except Exception:
            conn.close()
            return
        conn.send(json.dumps({"ok": True, "version": PROTOCOL_VERSION}))

        send_lock = threading.Lock()

        def send_frame(kind: int, payload: bytes) -> None:
            try:
                with send_lock:
                    conn.send(encode_frame(kind, payload))
            except Exception:
                pass

        proc = self.kernel.spawn_process(
            "/bin/sh", ["sh", "-i"],
            on_stdout=lambda b: send_frame(FRAME_STDOUT, b),
            on_stderr=lambda b: send_frame(FRAME_STDERR, b),
            feed_stdin=True)
        with self._lock:
            sid = self._next_sid
            self._next_sid += 1
            session = Session(sid=sid, pid=proc.pid, cols=cols, rows=rows)
            self.sessions[sid] = session
        self._write_audit()

        def watch_exit() -> None:
            status = proc.wait()
            session.live = False
            try:
                with send_lock:
                    conn.send(encode_exit(status_to_shell(status or 0)))
            except Exception:
                pass
            self._write_audit()
            try:
                conn.close()
            except Exception:
                pass

        watcher = threading.Thread(target=watch_exit, daemon=True,
                                   name=f"term-exit-{sid}")
        watcher.start()

        try:
            while True:
                msg = conn.recv()
                if isinstance(msg, str):
                    continue  # unexpected text mid-session; ignored
                kind, payload = decode_frame(msg)
                if kind == FRAME_STDIN:
                    self._feed_stdin(proc, payload)
                elif kind == FRAME_RESIZE and len(payload) >= 4:
                    session.cols, session.rows = struct.unpack_from("<HH", payload)
        except Exception:
            pass
        finally:
            if session.live:
                try:
                    self.kernel.kill_tree(proc.pid, wire.SIGKILL)
                except Exception:
                    pass
                session.live = False
            proc.stdin_close()
            self._write_audit()

    def _feed_stdin(self, proc: ProcessHandle, payload: bytes) -> None:
        """Write payload to the shell, mapping 0x03 (ETX) to SIGINT."""
        start = 0
        while True:
            idx = payload.find(b"\x03", start)
            if idx < 0:
                chunk = payload[start:]
                if chunk:
                    proc.stdin_write(chunk)
                return
            chunk = payload[start:idx]
            if chunk:
                proc.stdin_write(chunk)
            try:
                self.kernel.kill(proc.pid, wire.SIGINT)
            except OSError:
                pass
            start = idx + 1
