"""HTTP/1.1 message serialization and parsing.

Covers what the in-kernel bridge and the demo server need: request
serialization with explicit framing headers, incremental request/response
parsing, and chunked transfer decoding.  Responses may be framed by
Content-Length, chunked encoding, or connection close.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

from .errors import MalformedResponse

Headers = List[Tuple[str, str]]

CRLF = b"\r\n"


def header_get(headers: Headers, name: str) -> Optional[str]:
    lname = name.lower()
    for k, v in headers:
        if k.lower() == lname:
            return v
    return None


def serialize_request(method: str, path: str, headers: Headers,
                      body: bytes = b"") -> bytes:
    out = bytearray()
    out += f"{method} {path} HTTP/1.1".encode("ascii") + CRLF
    for k, v in headers:
        out += f"{k}: {v}".encode("latin-1") + CRLF
    out += CRLF
    out += body
    return bytes(out)


def serialize_response(status: int, reason: str, headers: Headers,
                       body: bytes = b"") -> bytes:
    out = bytearray()
    out += f"HTTP/1.1 {status} {reason}".encode("ascii") + CRLF
    for k, v in headers:
        out += f"{k}: {v}".encode("latin-1") + CRLF
    out += CRLF
    out += body
    return bytes(out)


def serialize_chunked_body(chunks: List[bytes]) -> bytes:
    out = bytearray()
    for chunk in chunks:
        if not chunk:
            continue
        out += f"{len(chunk):x}".encode("ascii") + CRLF
        out += chunk + CRLF
    out += b"0" + CRLF + CRLF
    return bytes(out)


def _parse_headers(block: bytes) -> Headers:
    headers: Headers = []
    for line in block.split(CRLF):
        if not line:
            continue
        if b":" not in line:
            raise MalformedResponse(f"bad header line: {line!r}")
        name, _, value = line.partition(b":")
        headers.append((name.decode("latin-1").strip(),
                        value.decode("latin-1").strip()))
    return headers


class RequestParser:
    """Incremental request parser (framing by Content-Length only)."""

    def __init__(self):
        self._buf = bytearray()
        self._head_done = False
        self.method = ""
        self.path = ""
        self.version = ""
        self.headers: Headers = []
        self.body = b""
        self._body_len = 0
        self.done = False

    def feed(self, data: bytes) -> None:
        if self.done:
            return
        self._buf += data
        if not self._head_done:
            idx = self._buf.find(CRLF + CRLF)
            if idx < 0:
                return
            head = bytes(self._buf[:idx])
            del self._buf[:idx + 4]
            lines = head.split(CRLF)
            parts = lines[0].split(b" ")
            if len(parts) != 3:
                raise MalformedResponse(f"bad request line: {lines[0]!r}")
            self.method = parts[0].decode("ascii")
            self.path = parts[1].decode("latin-1")
            self.version = parts[2].decode("ascii")
            self.headers = _parse_headers(CRLF.join(lines[1:]))
            cl = header_get(self.headers, "Content-Length")
            self._body_len = int(cl) if cl else 0
            self._head_done = True
        if self._head_done and len(self._buf) >= self._body_len:
            self.body = bytes(self._buf[:self._body_len])
            del self._buf[:self._body_len]
            self.done = True


class ResponseParser:
    """Incremental response parser handling Content-Length, chunked
    transfer coding, and read-until-close framing."""

    _STATUS, _HEADERS_DONE = 0, 1
    _BODY_LEN, _BODY_CLOSE = 2, 3
    _CHUNK_SIZE, _CHUNK_DATA, _CHUNK_CRLF, _TRAILERS = 4, 5, 6, 7
    _DONE = 8

    def __init__(self):
        self._buf = bytearray()
        self._state = self._STATUS
        self.status = 0
        self.reason = ""
        self.headers: Headers = []
        self._body = bytearray()
        self._need = 0
        self.done = False

    @property
    def body(self) -> bytes:
        return bytes(self._body)

    def feed(self, data: bytes) -> None:
        self._buf += data
        self._advance()

    def finish(self) -> None:
        """The peer closed the connection; validate completeness."""
        self._advance()
        if self._state == self._BODY_CLOSE:
            self._state = self._DONE
            self.done = True
            return
        if not self.done:
            raise MalformedResponse("connection closed mid-message")

    def _advance(self) -> None:
        while True:
            if self._state == self._STATUS:
                idx = self._buf.find(CRLF + CRLF)
                if idx < 0:
                    return
                head = bytes(self._buf[:idx])
                del self._buf[:idx + 4]
                lines = head.split(CRLF)
                parts = lines[0].split(b" ", 2)
                if len(parts) < 2 or not parts[0].startswith(b"HTTP/1."):
                    raise MalformedResponse(f"bad status line: {lines[0]!r}")
                try:
                    self.status = int(parts[1])
                except ValueError:
                    raise MalformedResponse(f"bad status code: {parts[1]!r}")
                self.reason = parts[2].decode("latin-1") if len(parts) > 2 else ""
                self.headers = _parse_headers(CRLF.join(lines[1:]))
                te = (header_get(self.headers, "Transfer-Encoding") or "").lower()
                cl = header_get(self.headers, "Content-Length")
                if "chunked" in te:
                    self._state = self._CHUNK_SIZE
                elif cl is not None:
                    try:
                        self._need = int(cl)
                    except ValueError:
                        raise MalformedResponse(f"bad Content-Length: {cl!r}")
                    self._state = self._BODY_LEN
                else:
                    self._state = self._BODY_CLOSE
                continue
            if self._state == self._BODY_LEN:
                take = min(self._need, len(self._buf))
                self._body += self._buf[:take]
                del self._buf[:take]
                self._need -= take
                if self._need == 0:
                    self._state = self._DONE
                    self.done = True
                return
            if self._state == self._BODY_CLOSE:
                self._body += self._buf
                self._buf.clear()
                return
            if self._state == self._CHUNK_SIZE:
                idx = self._buf.find(CRLF)
                if idx < 0:
                    return
                line = bytes(self._buf[:idx]).split(b";", 1)[0].strip()
                del self._buf[:idx + 2]
                try:
                    size = int(line, 16)
                except ValueError:
                    raise MalformedResponse(f"bad chunk size: {line!r}")
                if size == 0:
                    self._state = self._TRAILERS
                else:
                    self._need = size
                    self._state = self._CHUNK_DATA
                continue
            if self._state == self._CHUNK_DATA:
                take = min(self._need, len(self._buf))
                self._body += self._buf[:take]
                del self._buf[:take]
                self._need -= take
                if self._need > 0:
                    return
                self._state = self._CHUNK_CRLF
                continue
            if self._state == self._CHUNK_CRLF:
                if len(self._buf) < 2:
                    return
                if bytes(self._buf[:2]) != CRLF:
                    raise MalformedResponse("missing CRLF after chunk data")
                del self._buf[:2]
                self._state = self._CHUNK_SIZE
                continue
            if self._state == self._TRAILERS:
                # trailers are discarded; they end at an empty line
                idx = self._buf.find(CRLF)
                if idx < 0:
                    return
                line = bytes(self._buf[:idx])
                del self._buf[:idx + 2]
                if line == b"":
                    self._state = self._DONE
                    self.done = True
                    return
                continue
            return  # _DONE

    @classmethod
    def parse(cls, raw: bytes) -> "ResponseParser":
        p = cls()
        p.feed(raw)
        p.finish()
        return p
