"""Message transport over ordered byte streams (loopback TCP)."""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Callable, Iterable, Optional, Tuple, Union

from . import protocol as P

log = logging.getLogger(__name__)

Address = Tuple[str, int]


class ConnectionClosed(ConnectionError):
    pass


class RemoteError(Exception):
    """The peer answered with an ``Error`` message."""

    def __init__(self, kind: str, reason: str):
        super().__init__(f"{kind}: {reason}")
        self.kind = kind
        self.reason = reason


class Throttle:
    """Leaky-bucket rate limit shared by every connection that holds it."""

    def __init__(self, rate: Optional[float]):
        self.rate = rate
        self._lock = threading.Lock()
        self._next = 0.0

    def set_rate(self, rate: Optional[float]) -> None:
        with self._lock:
            self.rate = rate
            self._next = 0.0

    def consume(self, nbytes: int) -> None:
        if not self.rate:
            return
        with self._lock:
            now = time.monotonic()
            start = max(self._next, now)
            self._next = start + nbytes / self.rate
            wait = self._next - now
        if wait > 0:
            time.sleep(wait)


class Connection:
    """One framed, bidirectional message stream."""

    def __init__(self, sock: socket.socket, throttle: Optional[Throttle] = None):
        self.sock = sock
        self.throttle = throttle
        self.lock = threading.RLock()
        self._decoder = P.FrameDecoder()
        self.closed = False
        try:
            self.peer = sock.getpeername()
        except OSError:
            self.peer = None

    @classmethod
    def connect(cls, addr: Address, timeout: float = 10.0, throttle: Optional[Throttle] = None) -> "Connection":
        sock = socket.create_connection(tuple(addr), timeout=timeout)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock, throttle)

    def send(self, msg: P.Message) -> None:
        self.send_raw(P.encode(msg))

    def send_raw(self, data: bytes, limit: Optional[int] = None) -> None:
        """Write encoded frames; ``limit`` truncates the write (fault injection)."""
        if self.closed:
            raise ConnectionClosed("connection closed")
        view = memoryview(data)
        if limit is not None:
            view = view[:limit]
        step = 1 << 20
        try:
            for start in range(0, len(view), step):
                piece = view[start : start + step]
                if self.throttle is not None:
                    self.throttle.consume(len(piece))
                self.sock.sendall(piece)
        except OSError as exc:
            self.closed = True
            raise ConnectionClosed(str(exc)) from exc

    def recv(self, timeout: Optional[float] = None) -> P.Message:
        for msg in self._decoder:
            return msg
        self.sock.settimeout(timeout)
        try:
            while True:
                try:
                    chunk = self.sock.recv(1 << 20)
                except socket.timeout:
                    raise
                except OSError as exc:
                    self.closed = True
                    raise ConnectionClosed(str(exc)) from exc
                if not chunk:
                    self.closed = True
                    raise ConnectionClosed("peer closed the connection")
                self._decoder.feed(chunk)
                for msg in self._decoder:
                    return msg
        finally:
            if not self.closed:
                self.sock.settimeout(None)

    def call(self, msg: P.Message, timeout: Optional[float] = None, expect=None) -> P.Message:
        """Send a request and wait for one reply; ``Error`` replies raise :class:`RemoteError`."""
        with self.lock:
            self.send(msg)
            reply = self.recv(timeout)
        if isinstance(reply, P.Error):
            raise RemoteError(reply.kind, reply.reason)
        if expect is not None and not isinstance(reply, expect):
            raise P.ProtocolError("msg_type", f"expected {expect}, got {reply.name}")
        return reply

    def __enter__(self) -> "Connection":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    def abort(self) -> None:
        """Drop the connection without a clean shutdown (crash simulation)."""
        self.closed = True
        try:
            self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, b"\x01\x00\x00\x00\x00\x00\x00\x00")
        except OSError:
            pass
        self.sock.close()


def request(addr: Address, msg: P.Message, timeout: Optional[float] = 30.0, expect=None) -> P.Message:
    """One-shot request/response on a fresh connection."""
    conn = Connection.connect(addr, timeout=min(timeout or 10.0, 10.0))
    try:
        return conn.call(msg, timeout=timeout, expect=expect)
    finally:
        conn.close()


Reply = Union[None, P.Message, Iterable[P.Message]]


class Server:
    """Threaded accept loop.

    ``handler_factory(conn)`` returns a callable invoked once per inbound
    message; it returns a reply, an iterable of replies, or None. Exceptions
    become ``Error`` replies.
    """

    def __init__(self, handler_factory: Callable[[Connection], Callable[[P.Message], Reply]],
                 host: str = "127.0.0.1", port: int = 0, name: str = "server"):
        self.name = name
        self._factory = handler_factory
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(128)
        self.address: Address = self._sock.getsockname()
        self._conns = set()
        self._lock = threading.Lock()
        self._stopped = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> "Server":
        self._thread = threading.Thread(target=self._accept_loop, name=f"{self.name}-accept", daemon=True)
        self._thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                sock, _ = self._sock.accept()
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = Connection(sock)
            with self._lock:
                if self._stopped.is_set():
                    conn.close()
                    break
                self._conns.add(conn)
            threading.Thread(target=self._serve, args=(conn,), name=f"{self.name}-conn", daemon=True).start()

    def _serve(self, conn: Connection) -> None:
        try:
            handle = self._factory(conn)
            while not self._stopped.is_set():
                try:
                    msg = conn.recv()
                except (ConnectionClosed, OSError):
                    break
                except P.ProtocolError as exc:
                    log.warning("%s: protocol error from %s: %s", self.name, conn.peer, exc)
                    try:
                        conn.send(P.Error("protocol", str(exc)))
                    except ConnectionClosed:
                        pass
                    break
                try:
                    reply = handle(msg)
                except RemoteError as exc:
                    reply = P.Error(exc.kind, exc.reason)
                except Exception as exc:  # reported to the peer, connection stays usable
                    log.debug("%s: handler error for %s", self.name, msg.name, exc_info=True)
                    reply = P.Error(getattr(exc, "kind", type(exc).__name__), str(exc))
                if reply is None:
                    continue
                try:
                    if isinstance(reply, P.Message):
                        conn.send(reply)
                    else:
                        for r in reply:
                            conn.send(r)
                except ConnectionClosed:
                    break
            closer = getattr(handle, "close", None)
            if closer is not None:
                closer()
        finally:
            with self._lock:
                self._conns.discard(conn)
            conn.close()

    def stop(self, abort: bool = False) -> None:
        self._stopped.set()
        try:
            self._sock.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
            self._conns.clear()
        for c in conns:
            c.abort() if abort else c.close()


class ConnectionPool:
    """Reuses one connection per address; a failed call drops it."""

    def __init__(self, timeout: float = 30.0):
        self.timeout = timeout
        self._conns = {}
        self._lock = threading.Lock()

    def call(self, addr: Address, msg: P.Message, timeout: Optional[float] = None, expect=None) -> P.Message:
        addr = tuple(addr)
        with self._lock:
            conn = self._conns.pop(addr, None)
        if conn is None or conn.closed:
            conn = Connection.connect(addr, timeout=10.0)
        try:
            reply = conn.call(msg, timeout=timeout or self.timeout, expect=expect)
        except RemoteError:
            self._put(addr, conn)
            raise
        except BaseException:
            conn.close()
            raise
        self._put(addr, conn)
        return reply

    def _put(self, addr, conn) -> None:
        with self._lock:
            old = self._conns.get(addr)
            if old is None:
                self._conns[addr] = conn
                return
        conn.close()

    def close(self) -> None:
        with self._lock:
            conns = list(self._conns.values())
            self._conns.clear()
        for c in conns:
            c.close()
