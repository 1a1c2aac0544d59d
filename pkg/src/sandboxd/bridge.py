"""Host-to-guest HTTP bridge.

Serializes a request object to HTTP/1.1 bytes, connects an in-kernel socket
to the target port, streams the exchange through the loopback socket pipes,
and parses the (possibly chunked) response, mirroring a remote HTTP call
from the host's point of view.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from . import ipc
from .errors import MalformedResponse
from .http1 import Headers, ResponseParser, header_get, serialize_request
from .kernel import Kernel

DEFAULT_BRIDGE_PORT = 8080


@dataclass
class HttpBridgeRequest:
    method: str = "GET"
    path: str = "/"
    headers: Headers = field(default_factory=list)
    body: bytes = b""
    port: int = DEFAULT_BRIDGE_PORT

    def __post_init__(self):
        seen = set()
        for name, _ in self.headers:
            lname = name.lower()
            if lname in seen:
                raise ValueError(f"duplicate header {name!r}")
            seen.add(lname)
        cl = header_get(self.headers, "Content-Length")
        if cl is not None and int(cl) != len(self.body):
            raise ValueError("Content-Length inconsistent with body")

    def wire_headers(self) -> Headers:
        headers = list(self.headers)
        if header_get(headers, "Host") is None:
            headers.append(("Host", "sandboxd"))
        if header_get(headers, "Connection") is None:
            headers.append(("Connection", "close"))
        if self.body and header_get(headers, "Content-Length") is None:
            headers.append(("Content-Length", str(len(self.body))))
        return headers


def http_request(kernel: Kernel, req: HttpBridgeRequest,
                 timeout: float = 30.0) -> Tuple[int, Headers, bytes]:
    """Blocking host call; raises OSError(ECONNREFUSED) with no listener and
    MalformedResponse on unparsable responses."""
    raw = serialize_request(req.method, req.path, req.wire_headers(), req.body)
    done = threading.Event()
    box: List[object] = []

    def finish(result: object) -> None:
        box.append(result)
        done.set()

    def go() -> None:
        ep = kernel.sockets.new_endpoint()
        parser = ResponseParser()

        def on_connect(err: int, _v: object) -> None:
            if err:
                finish(OSError(err, os.strerror(err)))
                return
            ep.tx.write(raw, on_written)

        def on_written(err: int, _count: object) -> None:
            if err:
                ep.close()
                finish(OSError(err, os.strerror(err)))
                return
            ep.rx.read(65536, on_data)

        def on_data(err: int, data: object) -> None:
            if err:
                ep.close()
                finish(OSError(err, os.strerror(err)))
                return
            try:
                if data:
                    parser.feed(data)
                    if not parser.done:
                        ep.rx.read(65536, on_data)
                        return
                else:
                    parser.finish()
            except MalformedResponse as e:
                ep.close()
                finish(e)
                return
            ep.close()
            finish((parser.status, parser.headers, parser.body))

        kernel.sockets.connect(ep, req.port, on_connect)

    kernel.post(go)
    if not done.wait(timeout):
        raise TimeoutError("http_request timed out")
    result = box[0]
    if isinstance(result, Exception):
        raise result
    return result
