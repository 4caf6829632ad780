"""Binary wire protocol.

Frame layout::

    magic "ICHK" | version u8 (=1) | msg_type u8 | payload_len u32 BE | payload

Payload fields are written in declaration order: fixed-width big-endian
integers, strings as u16 length + UTF-8, blobs as u32 length + bytes, lists
as u32 count + items. A payload larger than :data:`MAX_FRAME_PAYLOAD` is
split over several frames; every frame but the last carries the
:data:`MORE` bit in ``msg_type``.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Type

MAGIC = b"ICHK"
VERSION = 1
HEADER = struct.Struct(">4sBBI")
HEADER_SIZE = HEADER.size
MAX_FRAME_PAYLOAD = 64 * 1024 * 1024
MORE = 0x80

_INT_FORMATS = {"u8": ">B", "u16": ">H", "u32": ">I", "u64": ">Q", "f64": ">d", "bool": ">?"}
_INTS = {k: struct.Struct(v) for k, v in _INT_FORMATS.items()}
_INT_LIMITS = {"u8": 0xFF, "u16": 0xFFFF, "u32": 0xFFFFFFFF, "u64": 0xFFFFFFFFFFFFFFFF}


class ProtocolError(Exception):
    """Malformed input; ``field`` names the offending part of the frame."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class EncodeError(ValueError):
    pass


def f(kind: str, default=None):
    """Declare a wire field of the given kind."""
    if default is None:
        if kind.startswith("["):
            return field(default_factory=list, metadata={"kind": kind})
        if kind in _STRUCTS_PENDING:
            return field(default_factory=_STRUCTS_PENDING[kind], metadata={"kind": kind})
        default = {"str": "", "blob": b"", "f64": 0.0, "bool": False}.get(kind, 0)
    return field(default=default, metadata={"kind": kind})


_STRUCTS_PENDING: Dict[str, type] = {}
STRUCTS: Dict[str, type] = {}
MESSAGES: Dict[int, Type["Message"]] = {}


def wire_struct(cls):
    cls = dataclass(cls)
    STRUCTS[cls.__name__] = cls
    _STRUCTS_PENDING[cls.__name__] = cls
    cls._fields = [(fl.name, fl.metadata["kind"]) for fl in dataclasses.fields(cls)]
    return cls


class Message:
    msg_type: int = 0
    _fields: List[Tuple[str, str]] = []

    @property
    def name(self) -> str:
        return type(self).__name__


def message(code: int):
    def wrap(cls):
        if code in MESSAGES:
            raise RuntimeError(f"duplicate msg_type {code}")
        if code & MORE:
            raise RuntimeError(f"msg_type {code} collides with continuation bit")
        cls = dataclass(cls)
        cls.msg_type = code
        cls._fields = [(fl.name, fl.metadata["kind"]) for fl in dataclasses.fields(cls)]
        MESSAGES[code] = cls
        return cls

    return wrap


# --- composite field types ---------------------------------------------------


@wire_struct
class AgentInfo:
    agent_id: int = f("u64")
    node_id: str = f("str")
    host: str = f("str")
    port: int = f("u16")
    ranks: List[int] = f("[u32]")


@wire_struct
class AgentSpec:
    agent_id: int = f("u64")
    app_id: int = f("u64")
    ranks: List[int] = f("[u32]")
    budget: int = f("u64")


@wire_struct
class RegionDecl:
    region_id: str = f("str")
    elem_size: int = f("u32")
    count: int = f("u64")
    scheme: int = f("u8")
    total_n: int = f("u64")


@wire_struct
class RegionSum:
    region_id: str = f("str")
    elem_size: int = f("u32")
    count: int = f("u64")
    scheme: int = f("u8")
    total_n: int = f("u64")
    size: int = f("u64")
    crc: int = f("u32")


@wire_struct
class RegionDesc:
    region_id: str = f("str")
    elem_size: int = f("u32")
    scheme: int = f("u8")
    count_per_rank: List[int] = f("[u64]")


@wire_struct
class LayoutSpec:
    total_n: int = f("u64")
    p: int = f("u32")
    scheme: int = f("u8")


@wire_struct
class Run:
    src_rank: int = f("u32")
    src_offset: int = f("u64")
    dst_rank: int = f("u32")
    dst_offset: int = f("u64")
    length: int = f("u64")


@wire_struct
class RankLocation:
    rank: int = f("u32")
    agent_id: int = f("u64")  # 0: bytes live only on the PFS tier
    level: int = f("u8")


@wire_struct
class RankChecksum:
    rank: int = f("u32")
    region_id: str = f("str")
    size: int = f("u64")
    crc: int = f("u32")


@wire_struct
class NodeStatsRec:
    node_id: str = f("str")
    mem_capacity: int = f("u64")
    mem_used: int = f("u64")
    bw_used: float = f("f64")
    mem_predicted: float = f("f64")
    bw_predicted: float = f("f64")
    sample_time: float = f("f64")


# --- generic replies ---------------------------------------------------------


@message(8)
class Ok(Message):
    detail: str = f("str")


@message(9)
class Error(Message):
    kind: str = f("str")
    reason: str = f("str")


# --- client <-> controller ---------------------------------------------------


@message(1)
class Register(Message):
    name: str = f("str")
    rank: int = f("u32")
    world_size: int = f("u32")
    process_type: int = f("u8")
    launch_id: int = f("u64")
    regions: List[RegionDesc] = f("[RegionDesc]")


@message(2)
class RegisterAck(Message):
    app_id: int = f("u64")
    epoch: int = f("u64")
    world_size: int = f("u32")
    prev_world_size: int = f("u32")
    next_version: int = f("u64")
    generation: int = f("u64")
    assignments: List[AgentInfo] = f("[AgentInfo]")


@message(3)
class ProbeAgents(Message):
    app_id: int = f("u64")
    rank: int = f("u32")
    generation: int = f("u64")
    refresh_only: bool = f("bool")


NO_CHANGE = 0
NEW_ASSIGNMENTS = 1


@message(4)
class ProbeAgentsAck(Message):
    change: int = f("u8")
    generation: int = f("u64")
    assignments: List[AgentInfo] = f("[AgentInfo]")


@message(5)
class RestartQuery(Message):
    app_id: int = f("u64")
    name: str = f("str")


@message(6)
class RestartInfo(Message):
    found: bool = f("bool")
    app_id: int = f("u64")
    version: int = f("u64")
    epoch: int = f("u64")
    world_size: int = f("u32")
    regions: List[RegionDesc] = f("[RegionDesc]")
    assignments: List[AgentInfo] = f("[AgentInfo]")
    locations: List[RankLocation] = f("[RankLocation]")
    checksums: List[RankChecksum] = f("[RankChecksum]")
    pfs_root: str = f("str")


@message(7)
class Deregister(Message):
    app_id: int = f("u64")


@message(10)
class AdaptBegin(Message):
    app_id: int = f("u64")
    rank: int = f("u32")
    new_world_size: int = f("u32")


@message(11)
class AdaptCommit(Message):
    app_id: int = f("u64")
    rank: int = f("u32")
    epoch: int = f("u64")


@message(12)
class DirectoryQuery(Message):
    app_id: int = f("u64")
    epoch: int = f("u64")


@message(13)
class Directory(Message):
    epoch: int = f("u64")
    assignments: List[AgentInfo] = f("[AgentInfo]")


@message(14)
class VersionQuery(Message):
    app_id: int = f("u64")
    version: int = f("u64")


@message(15)
class VersionStatus(Message):
    version: int = f("u64")
    complete: bool = f("bool")


# --- client <-> agent --------------------------------------------------------


@message(16)
class Connect(Message):
    app_id: int = f("u64")
    rank: int = f("u32")
    epoch: int = f("u64")


@message(17)
class MemRegister(Message):
    app_id: int = f("u64")
    rank: int = f("u32")
    epoch: int = f("u64")
    regions: List[RegionDecl] = f("[RegionDecl]")


@message(18)
class CommitBegin(Message):
    app_id: int = f("u64")
    epoch: int = f("u64")
    version: int = f("u64")
    rank: int = f("u32")
    regions: List[RegionSum] = f("[RegionSum]")


@message(19)
class CommitData(Message):
    region_id: str = f("str")
    offset: int = f("u64")
    data: bytes = f("blob")


@message(20)
class CommitEnd(Message):
    app_id: int = f("u64")
    version: int = f("u64")
    rank: int = f("u32")


ACK_OK = 0
ACK_INTEGRITY = 1
ACK_UNREGISTERED = 2
ACK_CAPACITY = 3
ACK_FAILED = 4


@message(21)
class CommitAck(Message):
    version: int = f("u64")
    rank: int = f("u32")
    status: int = f("u8")
    reason: str = f("str")


@message(22)
class RestoreReq(Message):
    app_id: int = f("u64")
    epoch: int = f("u64")
    version: int = f("u64")
    rank: int = f("u32")
    region_id: str = f("str")


@message(23)
class RestoreData(Message):
    region_id: str = f("str")
    offset: int = f("u64")
    total: int = f("u64")
    crc: int = f("u32")
    last: bool = f("bool")
    data: bytes = f("blob")


@message(24)
class RedistReq(Message):
    app_id: int = f("u64")
    epoch: int = f("u64")
    region_id: str = f("str")
    elem_size: int = f("u32")
    old: LayoutSpec = f("LayoutSpec")
    new: LayoutSpec = f("LayoutSpec")
    dst_rank: int = f("u32")


@message(25)
class RedistData(Message):
    region_id: str = f("str")
    offset: int = f("u64")
    total: int = f("u64")
    last: bool = f("bool")
    data: bytes = f("blob")


@message(26)
class SnapshotPush(Message):
    app_id: int = f("u64")
    epoch: int = f("u64")
    rank: int = f("u32")
    regions: List[RegionSum] = f("[RegionSum]")


@message(27)
class PlanPush(Message):
    app_id: int = f("u64")
    epoch: int = f("u64")
    region_id: str = f("str")
    old: LayoutSpec = f("LayoutSpec")
    new: LayoutSpec = f("LayoutSpec")
    runs: List[Run] = f("[Run]")
    sources: List[AgentInfo] = f("[AgentInfo]")


@message(28)
class AgentStatsQuery(Message):
    pass


@message(29)
class AgentStats(Message):
    agent_id: int = f("u64")
    bytes_staged: int = f("u64")
    bytes_moved: int = f("u64")
    plans_computed: int = f("u64")
    plans_pushed_used: int = f("u64")
    directory_queries: int = f("u64")
    entries: int = f("u64")


@message(30)
class Purge(Message):
    app_id: int = f("u64")
    epoch: int = f("u64")
    below_version: int = f("u64")


# --- controller <-> manager --------------------------------------------------


@message(32)
class LaunchAgents(Message):
    agents: List[AgentSpec] = f("[AgentSpec]")
    controller_host: str = f("str")
    controller_port: int = f("u16")
    pfs_root: str = f("str")


@message(33)
class AgentReady(Message):
    node_id: str = f("str")
    agents: List[AgentInfo] = f("[AgentInfo]")
    failed: List[int] = f("[u64]")


@message(34)
class StatsReport(Message):
    stats: NodeStatsRec = f("NodeStatsRec")
    host: str = f("str")
    port: int = f("u16")
    live_agents: List[int] = f("[u64]")
    dead_agents: List[int] = f("[u64]")


@message(35)
class FlushOrder(Message):
    app_id: int = f("u64")
    app_name: str = f("str")
    world_size: int = f("u32")
    epoch: int = f("u64")
    version: int = f("u64")
    ranks: List[int] = f("[u32]")
    agent_id: int = f("u64")
    evict: bool = f("bool")


@message(36)
class MigrateOrder(Message):
    app_id: int = f("u64")
    ranks: List[int] = f("[u32]")
    target_node: str = f("str")
    source_agent: int = f("u64")
    target: AgentInfo = f("AgentInfo")


@message(37)
class Shutdown(Message):
    agent_ids: List[int] = f("[u64]")


@message(38)
class FlushAck(Message):
    app_id: int = f("u64")
    epoch: int = f("u64")
    version: int = f("u64")
    agent_id: int = f("u64")
    ranks: List[int] = f("[u32]")
    ok: bool = f("bool")
    evicted: bool = f("bool")
    reason: str = f("str")


@message(39)
class MigrateAck(Message):
    app_id: int = f("u64")
    source_agent: int = f("u64")
    target_agent: int = f("u64")
    ranks: List[int] = f("[u32]")
    entries: int = f("u64")
    ok: bool = f("bool")
    reason: str = f("str")


@message(40)
class CommitReport(Message):
    app_id: int = f("u64")
    epoch: int = f("u64")
    version: int = f("u64")
    rank: int = f("u32")
    agent_id: int = f("u64")
    regions: List[RegionSum] = f("[RegionSum]")
    nbytes: int = f("u64")
    duration: float = f("f64")


@message(41)
class KillAgent(Message):
    agent_id: int = f("u64")


@message(42)
class CapacityAlert(Message):
    agent_id: int = f("u64")
    app_id: int = f("u64")
    requested: int = f("u64")


# --- controller <-> resource manager -----------------------------------------


@message(48)
class NodeRequest(Message):
    count: int = f("u32")
    reason: str = f("str")


@message(49)
class NodeGrant(Message):
    nodes: List[str] = f("[str]")
    partial: bool = f("bool")


@message(50)
class NodeReclaim(Message):
    nodes: List[str] = f("[str]")
    deadline: float = f("f64")


@message(51)
class MigrateHint(Message):
    node_from: str = f("str")
    node_to: str = f("str")


@message(52)
class AppAdaptNotice(Message):
    app_id: int = f("u64")
    name: str = f("str")
    new_world_size: int = f("u32")
    epoch: int = f("u64")


@message(53)
class NodeDeny(Message):
    reason: str = f("str")


@message(54)
class NodeReleased(Message):
    nodes: List[str] = f("[str]")
    degraded: bool = f("bool")


# --- agent <-> agent ---------------------------------------------------------


@message(64)
class MigrateStream(Message):
    app_id: int = f("u64")
    epoch: int = f("u64")
    version: int = f("u64")  # 0: adapt snapshot
    rank: int = f("u32")
    region: RegionSum = f("RegionSum")
    level: int = f("u8")
    data: bytes = f("blob")


@message(65)
class PeerFetch(Message):
    app_id: int = f("u64")
    epoch: int = f("u64")
    rank: int = f("u32")
    region_id: str = f("str")
    offset: int = f("u64")
    length: int = f("u64")
    timeout: float = f("f64")


@message(66)
class PeerData(Message):
    crc: int = f("u32")
    data: bytes = f("blob")


# --- encoding ----------------------------------------------------------------


def _encode_value(kind: str, value, out: bytearray, path: str) -> None:
    if kind in _INTS:
        if kind in _INT_LIMITS and not (isinstance(value, int) and 0 <= value <= _INT_LIMITS[kind]):
            raise EncodeError(f"{path}: {value!r} does not fit {kind}")
        out += _INTS[kind].pack(value)
    elif kind == "str":
        raw = value.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise EncodeError(f"{path}: string of {len(raw)} bytes exceeds u16 length")
        out += _INTS["u16"].pack(len(raw))
        out += raw
    elif kind == "blob":
        if len(value) > 0xFFFFFFFF:
            raise EncodeError(f"{path}: blob too large")
        out += _INTS["u32"].pack(len(value))
        out += value
    elif kind.startswith("["):
        inner = kind[1:-1]
        out += _INTS["u32"].pack(len(value))
        for i, item in enumerate(value):
            _encode_value(inner, item, out, f"{path}[{i}]")
    else:
        for name, sub in STRUCTS[kind]._fields:
            _encode_value(sub, getattr(value, name), out, f"{path}.{name}")


def encode_payload(msg: Message, out: Optional[bytearray] = None) -> bytearray:
    out = bytearray() if out is None else out
    for name, kind in msg._fields:
        _encode_value(kind, getattr(msg, name), out, f"{msg.name}.{name}")
    return out


def encode(msg: Message, max_payload: int = MAX_FRAME_PAYLOAD) -> bytes:
    """Encode ``msg`` as one or more frames."""
    # encode behind a reserved header so the common single-frame case needs no second copy
    out = encode_payload(msg, bytearray(HEADER_SIZE))
    size = len(out) - HEADER_SIZE
    if size <= max_payload:
        HEADER.pack_into(out, 0, MAGIC, VERSION, msg.msg_type, size)
        return bytes(out) if size < 4096 else out
    payload = memoryview(out)[HEADER_SIZE:]
    parts = []
    view = payload
    for start in range(0, len(payload), max_payload):
        chunk = view[start : start + max_payload]
        more = start + max_payload < len(payload)
        parts.append(HEADER.pack(MAGIC, VERSION, msg.msg_type | (MORE if more else 0), len(chunk)))
        parts.append(chunk)
    return b"".join(parts)


class _Reader:
    __slots__ = ("buf", "pos", "end", "name")

    def __init__(self, buf, name: str):
        self.buf = buf
        self.pos = 0
        self.end = len(buf)
        self.name = name

    def take(self, n: int, path: str):
        if self.pos + n > self.end:
            raise ProtocolError(path, f"truncated payload ({self.end - self.pos} bytes left, need {n})")
        v = self.buf[self.pos : self.pos + n]
        self.pos += n
        return v


def _decode_value(kind: str, r: _Reader, path: str):
    if kind in _INTS:
        st = _INTS[kind]
        return st.unpack(r.take(st.size, path))[0]
    if kind == "str":
        (n,) = _INTS["u16"].unpack(r.take(2, path))
        try:
            return bytes(r.take(n, path)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(path, f"invalid UTF-8: {exc}") from None
    if kind == "blob":
        (n,) = _INTS["u32"].unpack(r.take(4, path))
        return bytes(r.take(n, path))
    if kind.startswith("["):
        inner = kind[1:-1]
        (n,) = _INTS["u32"].unpack(r.take(4, path))
        if n > r.end - r.pos:
            # every item occupies at least one byte
            raise ProtocolError(path, f"list count {n} exceeds remaining payload")
        return [_decode_value(inner, r, f"{path}[{i}]") for i in range(n)]
    cls = STRUCTS[kind]
    return cls(**{name: _decode_value(sub, r, f"{path}.{name}") for name, sub in cls._fields})


def decode_payload(msg_type: int, payload) -> Message:
    cls = MESSAGES.get(msg_type)
    if cls is None:
        raise ProtocolError("msg_type", f"unknown message type {msg_type}")
    r = _Reader(memoryview(payload), cls.__name__)
    values = {name: _decode_value(kind, r, f"{cls.__name__}.{name}") for name, kind in cls._fields}
    if r.pos != r.end:
        raise ProtocolError("payload_len", f"{r.end - r.pos} trailing bytes after {cls.__name__}")
    return cls(**values)


def parse_header(buf) -> Tuple[int, bool, int]:
    """Validate a frame header; returns (msg_type, more, payload_len)."""
    magic, version, msg_type, length = HEADER.unpack(bytes(buf[:HEADER_SIZE]))
    if magic != MAGIC:
        raise ProtocolError("magic", f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError("version", f"unknown version {version}")
    base = msg_type & ~MORE
    if base not in MESSAGES:
        raise ProtocolError("msg_type", f"unknown message type {base}")
    if length > MAX_FRAME_PAYLOAD:
        raise ProtocolError("payload_len", f"frame payload {length} exceeds {MAX_FRAME_PAYLOAD}")
    return base, bool(msg_type & MORE), length


def decode(data) -> Tuple[Optional[Message], int]:
    """Decode one message from the front of ``data``.

    Returns ``(message, consumed)``, or ``(None, 0)`` when more bytes are
    needed to complete the frame set.
    """
    view = memoryview(data)
    pos = 0
    parts = []
    first_type = None
    while True:
        avail = len(view) - pos
        if avail >= 4 and view[pos : pos + 4] != MAGIC:
            raise ProtocolError("magic", f"bad magic {bytes(view[pos : pos + 4])!r}")
        if avail < HEADER_SIZE:
            return None, 0
        msg_type, more, length = parse_header(view[pos : pos + HEADER_SIZE])
        if first_type is None:
            first_type = msg_type
        elif msg_type != first_type:
            raise ProtocolError("msg_type", f"continuation of type {msg_type} inside {first_type}")
        if len(view) - pos - HEADER_SIZE < length:
            return None, 0
        parts.append(view[pos + HEADER_SIZE : pos + HEADER_SIZE + length])
        pos += HEADER_SIZE + length
        if not more:
            break
    payload = parts[0] if len(parts) == 1 else b"".join(parts)
    return decode_payload(first_type, payload), pos


class FrameDecoder:
    """Incremental decoder: feed arbitrary chunks, pop complete messages."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk) -> None:
        self._buf += chunk

    def __iter__(self):
        return self

    def __next__(self) -> Message:
        msg, used = decode(self._buf)
        if msg is None:
            raise StopIteration
        del self._buf[:used]
        return msg

    @property
    def pending(self) -> int:
        return len(self._buf)


def to_layout_spec(layout) -> LayoutSpec:
    return LayoutSpec(layout.total_n, layout.p, int(layout.scheme))


def from_layout_spec(spec: LayoutSpec):
    from .layout import Layout

    return Layout(spec.total_n, spec.p, spec.scheme)
