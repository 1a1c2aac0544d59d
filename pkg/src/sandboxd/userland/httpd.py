"""Socket server guests: a static-file HTTP server and a byte echo server."""

from __future__ import annotations

from typing import List

from .. import wire
from ..errors import EISDIR, ENOENT
from ..guest import GuestContext, GuestOSError
from ..http1 import (
    RequestParser, serialize_chunked_body, serialize_response,
)
from . import register


def _serve_request(ctx: GuestContext, conn: int, docroot: str, chunked: bool) -> None:
    parser = RequestParser()
    while not parser.done:
        data = ctx.read(conn, 65536)
        if not data:
            return
        try:
            parser.feed(data)
        except Exception:
            ctx.write_all(conn, serialize_response(
                400, "Bad Request", [("Content-Length", "0"), ("Connection", "close")]))
            return
    if parser.method != "GET":
        ctx.write_all(conn, serialize_response(
            405, "Method Not Allowed",
            [("Content-Length", "0"), ("Connection", "close")]))
        return
    path = parser.path.split("?", 1)[0]
    full = docroot.rstrip("/") + "/" + path.lstrip("/")
    try:
        fd = ctx.open(full, wire.O_RDONLY)
        body = ctx.read_all(fd)
        ctx.close(fd)
    except GuestOSError as e:
        status, reason = (404, "Not Found") if e.errno in (ENOENT, EISDIR) \
            else (500, "Internal Server Error")
        msg = reason.encode("ascii")
        ctx.write_all(conn, serialize_response(
            status, reason,
            [("Content-Length", str(len(msg))), ("Connection", "close")], msg))
        return
    if chunked:
        chunks = [body[i:i + 1024] for i in range(0, len(body), 1024)]
        ctx.write_all(conn, serialize_response(
            200, "OK",
            [("Transfer-Encoding", "chunked"), ("Connection", "close")]))
        ctx.write_all(conn, serialize_chunked_body(chunks))
    else:
        ctx.write_all(conn, serialize_response(
            200, "OK",
            [("Content-Length", str(len(body))), ("Connection", "close")], body))


def httpd_main(ctx: GuestContext, argv: List[str]) -> int:
    """httpd [-p PORT] [-d DOCROOT] [--chunked] [--max-requests N]"""
    port, docroot, chunked, max_requests = 8080, "/www", False, 0
    args = argv[1:]
    i = 0
    while i < len(args):
        a = args[i]
        if a == "-p":
            port = int(args[i + 1]); i += 2
        elif a == "-d":
            docroot = args[i + 1]; i += 2
        elif a == "--chunked":
            chunked = True; i += 1
        elif a == "--max-requests":
            max_requests = int(args[i + 1]); i += 2
        else:
            ctx.stderr.write_str(f"httpd: unknown argument {a}\n")
            return 2
    sock = ctx.socket()
    try:
        ctx.bind(sock, port)
        ctx.listen(sock, 16)
    except GuestOSError as e:
        ctx.stderr.write_str(f"httpd: port {port}: {e}\n")
        return 1
    served = 0
    while max_requests == 0 or served < max_requests:
        conn = ctx.accept(sock)
        try:
            _serve_request(ctx, conn, docroot, chunked)
        finally:
            ctx.close(conn)
        served += 1
    return 0


def echod_main(ctx: GuestContext, argv: List[str]) -> int:
    """echod [-p PORT] [--max-conns N]: echo each connection until EOF."""
    port, max_conns = 7007, 0
    args = argv[1:]
    i = 0
    while i < len(args):
        a = args[i]
        if a == "-p":
            port = int(args[i + 1]); i += 2
        elif a == "--max-conns":
            max_conns = int(args[i + 1]); i += 2
        else:
            ctx.stderr.write_str(f"echod: unknown argument {a}\n")
            return 2
    sock = ctx.socket()
    ctx.bind(sock, port)
    ctx.listen(sock, 16)
    served = 0
    while max_conns == 0 or served < max_conns:
        conn = ctx.accept(sock)
        while True:
            data = ctx.read(conn, 65536)
            if not data:
                break
            ctx.write_all(conn, data)
        ctx.close(conn)
        served += 1
    return 0


register("httpd", httpd_main)
register("echod", echod_main)
