"""Canonical binary encoding.

Layout: one version byte, one kind tag, then the fields in declaration order.
Integers are big-endian and fixed width, sequences carry a u32 count and
optional fields a presence byte. The encoding doubles as the simulator's wire
format and is the preimage of every digest and signature.
"""

from __future__ import annotations

import struct
from functools import lru_cache
from typing import Any, Callable

from .core import (
    CertVariant,
    InvalidMessage,
    MultiVote,
    MultiVoteContent,
    NoVoteCertificate,
    NoVoteMessage,
    RbcAck,
    RbcCert,
    RbcEcho,
    RbcReady,
    RbcSend,
    TimeoutCertificate,
    TimeoutMessage,
    Tx,
    Vertex,
    VertexRef,
    Vote,
    VoteCertificate,
    VoteContent,
    VoteRole,
)
from .crypto import DIGEST_SIZE, AggregateSignature, Signature, digest

WIRE_VERSION = 1

_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_REF = struct.Struct(f">IH{DIGEST_SIZE}s")
_TX = struct.Struct(">QQI")


class DecodeError(ValueError):
    pass


class _Writer:
    __slots__ = ("buf",)

    def __init__(self) -> None:
        self.buf = bytearray()

    def u8(self, x: int) -> None:
        self.buf += _U8.pack(x)

    def u16(self, x: int) -> None:
        self.buf += _U16.pack(x)

    def u32(self, x: int) -> None:
        self.buf += _U32.pack(x)

    def u64(self, x: int) -> None:
        self.buf += _U64.pack(x)

    def digest(self, d: bytes) -> None:
        if len(d) != DIGEST_SIZE:
            raise InvalidMessage("digest has the wrong width")
        self.buf += d

    def ref(self, e: VertexRef) -> None:
        if len(e.digest) != DIGEST_SIZE:
            raise InvalidMessage("digest has the wrong width")
        self.buf += _REF.pack(e.round, e.source, e.digest)

    def seq(self, items, put: Callable[[Any], None]) -> None:
        self.u32(len(items))
        for item in items:
            put(item)

    def opt(self, item, put: Callable[[Any], None]) -> None:
        if item is None:
            self.u8(0)
        else:
            self.u8(1)
            put(item)


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes) -> None:
        self.data = memoryview(data)
        self.pos = 0

    def _take(self, k: int) -> memoryview:
        end = self.pos + k
        if end > len(self.data):
            raise DecodeError("truncated message")
        out = self.data[self.pos:end]
        self.pos = end
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self._take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def boolean(self) -> bool:
        b = self.u8()
        if b > 1:
            raise DecodeError("bad boolean")
        return bool(b)

    def digest(self) -> bytes:
        return bytes(self._take(DIGEST_SIZE))

    def ref(self) -> VertexRef:
        r, s, d = _REF.unpack(self._take(_REF.size))
        return VertexRef(r, s, d)

    def seq(self, get: Callable[[], Any]) -> list:
        return [get() for _ in range(self.u32())]

    def opt(self, get: Callable[[], Any]):
        flag = self.u8()
        if flag > 1:
            raise DecodeError("bad presence byte")
        return get() if flag else None


# -- field groups ------------------------------------------------------------


def _put_sig(w: _Writer, s: Signature) -> None:
    w.u16(s.signer)
    w.digest(s.content_digest)


def _get_sig(r: _Reader) -> Signature:
    return Signature(r.u16(), r.digest())


def _put_agg(w: _Writer, a: AggregateSignature) -> None:
    w.seq(sorted(a.signer_set), w.u16)
    w.digest(a.content_digest)


def _get_agg(r: _Reader) -> AggregateSignature:
    signers = r.seq(r.u16)
    if signers != sorted(set(signers)):
        raise DecodeError("signer list not canonical")
    return AggregateSignature(frozenset(signers), r.digest())


def _put_tx(w: _Writer, tx: Tx) -> None:
    w.buf += _TX.pack(tx.tx_id, tx.created_at, tx.size)
    w.buf += bytes(tx.size)


def _get_tx(r: _Reader) -> Tx:
    tx_id, created, size = _TX.unpack(r._take(_TX.size))
    if any(r._take(size)):
        raise DecodeError("synthetic payload must be zero bytes")
    return Tx(tx_id, created, size)


def _put_tc(w: _Writer, tc: TimeoutCertificate) -> None:
    w.u32(tc.round)
    _put_agg(w, tc.agg)


def _get_tc(r: _Reader) -> TimeoutCertificate:
    return TimeoutCertificate(r.u32(), _get_agg(r))


def _put_nvc(w: _Writer, c: NoVoteCertificate) -> None:
    w.u32(c.round)
    w.u16(c.target)
    _put_agg(w, c.agg)


def _get_nvc(r: _Reader) -> NoVoteCertificate:
    return NoVoteCertificate(r.u32(), r.u16(), _get_agg(r))


def _put_vertex(w: _Writer, v: Vertex) -> None:
    w.u32(v.round)
    w.u16(v.source)
    w.seq(v.block, lambda tx: _put_tx(w, tx))
    w.u8(int(v.propose))
    for edges in (v.strong_edges, v.weak_edges, v.leader_edges):
        w.seq(edges, w.ref)
    w.seq(v.tcs, lambda tc: _put_tc(w, tc))
    w.opt(v.nvc, lambda c: _put_nvc(w, c))


def _get_vertex(r: _Reader) -> Vertex:
    rnd, src = r.u32(), r.u16()
    block = tuple(r.seq(lambda: _get_tx(r)))
    propose = r.boolean()
    strong, weak, leader = (tuple(r.seq(r.ref)) for _ in range(3))
    tcs = tuple(r.seq(lambda: _get_tc(r)))
    nvc = r.opt(lambda: _get_nvc(r))
    v = Vertex(rnd, src, block, propose, strong, weak, leader, tcs, nvc)
    if (v.strong_edges, v.weak_edges, v.leader_edges, v.tcs) != (strong, weak, leader, tcs):
        raise DecodeError("vertex fields not in canonical order")
    return v


def _put_vote_content(w: _Writer, c: VoteContent) -> None:
    w.u32(c.round)
    w.u8(int(c.propose))
    w.opt(c.strong_edge, w.ref)


def _get_vote_content(r: _Reader) -> VoteContent:
    return VoteContent(r.u32(), r.boolean(), r.opt(r.ref))


def _put_multi_content(w: _Writer, c: MultiVoteContent) -> None:
    w.u32(c.round)
    w.u8(int(c.propose))
    w.seq(c.strong_edges, w.ref)


def _get_multi_content(r: _Reader) -> MultiVoteContent:
    return MultiVoteContent(r.u32(), r.boolean(), tuple(r.seq(r.ref)))


# -- message kinds -----------------------------------------------------------

_ENCODERS: dict[type, tuple[int, Callable[[_Writer, Any], None]]] = {}
_DECODERS: dict[int, Callable[[_Reader], Any]] = {}


def _register(tag: int, cls: type, put, get) -> None:
    _ENCODERS[cls] = (tag, put)
    _DECODERS[tag] = get


_register(0x01, Vertex, _put_vertex, _get_vertex)


def _put_vote(w: _Writer, m: Vote) -> None:
    w.u16(m.source)
    _put_vote_content(w, m.content)
    _put_sig(w, m.sig)


def _get_vote(r: _Reader) -> Vote:
    src = r.u16()
    c = _get_vote_content(r)
    return Vote(c.round, src, c.propose, c.strong_edge, _get_sig(r))


_register(0x02, Vote, _put_vote, _get_vote)


def _put_mvote(w: _Writer, m: MultiVote) -> None:
    w.u16(m.source)
    _put_multi_content(w, m.content)
    _put_sig(w, m.sig)


def _get_mvote(r: _Reader) -> MultiVote:
    src = r.u16()
    c = _get_multi_content(r)
    return MultiVote(c.round, src, c.propose, c.strong_edges, _get_sig(r))


_register(0x03, MultiVote, _put_mvote, _get_mvote)


def _put_timeout(w: _Writer, m: TimeoutMessage) -> None:
    w.u32(m.round)
    w.u16(m.source)
    _put_sig(w, m.sig)


_register(
    0x04,
    TimeoutMessage,
    _put_timeout,
    lambda r: TimeoutMessage(r.u32(), r.u16(), _get_sig(r)),
)
_register(0x05, TimeoutCertificate, _put_tc, _get_tc)


def _put_cert(w: _Writer, c: VoteCertificate) -> None:
    w.u32(c.round)
    w.u16(c.issuer)
    w.u8(int(c.role))

    def put_variant(v: CertVariant) -> None:
        _put_vote_content(w, v.content)
        _put_agg(w, v.agg)

    w.seq(c.variants, put_variant)


def _get_cert(r: _Reader) -> VoteCertificate:
    rnd, issuer, role = r.u32(), r.u16(), r.u8()
    try:
        role = VoteRole(role)
    except ValueError as exc:
        raise DecodeError("unknown certificate role") from exc
    variants = r.seq(lambda: CertVariant(_get_vote_content(r), _get_agg(r)))
    return VoteCertificate(rnd, issuer, role, tuple(variants))


_register(0x06, VoteCertificate, _put_cert, _get_cert)


def _put_novote(w: _Writer, m: NoVoteMessage) -> None:
    w.u32(m.round)
    w.u16(m.target)
    w.u16(m.source)
    _put_sig(w, m.sig)


_register(
    0x07,
    NoVoteMessage,
    _put_novote,
    lambda r: NoVoteMessage(r.u32(), r.u16(), r.u16(), _get_sig(r)),
)
_register(0x08, NoVoteCertificate, _put_nvc, _get_nvc)


def _put_rbc_head(w: _Writer, m) -> None:
    w.u16(m.sender)
    w.u32(m.round)


_register(
    0x10,
    RbcSend,
    lambda w, m: (_put_rbc_head(w, m), _put_vertex(w, m.vertex)),
    lambda r: RbcSend(r.u16(), r.u32(), _get_vertex(r)),
)
_register(
    0x11,
    RbcEcho,
    lambda w, m: (
        _put_rbc_head(w, m),
        w.digest(m.digest),
        w.opt(m.vertex, lambda v: _put_vertex(w, v)),
    ),
    lambda r: RbcEcho(r.u16(), r.u32(), r.digest(), r.opt(lambda: _get_vertex(r))),
)
_register(
    0x12,
    RbcReady,
    lambda w, m: (_put_rbc_head(w, m), w.digest(m.digest)),
    lambda r: RbcReady(r.u16(), r.u32(), r.digest()),
)
_register(
    0x13,
    RbcAck,
    lambda w, m: (_put_rbc_head(w, m), w.digest(m.digest), _put_sig(w, m.sig)),
    lambda r: RbcAck(r.u16(), r.u32(), r.digest(), _get_sig(r)),
)
_register(
    0x14,
    RbcCert,
    lambda w, m: (_put_rbc_head(w, m), _put_vertex(w, m.vertex), _put_agg(w, m.agg)),
    lambda r: RbcCert(r.u16(), r.u32(), _get_vertex(r), _get_agg(r)),
)

# Signed contents. Tags here never collide with message tags, so a signature
# over one kind of content cannot be replayed as another.
_register(0x20, VoteContent, _put_vote_content, _get_vote_content)
_register(0x21, MultiVoteContent, _put_multi_content, _get_multi_content)


def encode(msg: Any) -> bytes:
    try:
        tag, put = _ENCODERS[type(msg)]
    except KeyError:
        raise InvalidMessage(f"no wire encoding for {type(msg).__name__}") from None
    w = _Writer()
    w.u8(WIRE_VERSION)
    w.u8(tag)
    try:
        put(w, msg)
    except struct.error as exc:
        raise InvalidMessage(f"field out of range: {exc}") from None
    return bytes(w.buf)


def decode(data: bytes) -> Any:
    r = _Reader(data)
    if r.u8() != WIRE_VERSION:
        raise DecodeError("unsupported wire version")
    tag = r.u8()
    try:
        get = _DECODERS[tag]
    except KeyError:
        raise DecodeError(f"unknown kind tag {tag:#x}") from None
    try:
        msg = get(r)
    except InvalidMessage as exc:
        raise DecodeError(str(exc)) from exc
    if r.pos != len(data):
        raise DecodeError("trailing bytes")
    return msg


def vertex_digest(v: Vertex) -> bytes:
    return digest(encode(v))


def timeout_content(r: int) -> bytes:
    return b"\x01\x30" + _U32.pack(r)


def no_vote_content(r: int, target: int) -> bytes:
    return b"\x01\x31" + _U32.pack(r) + _U16.pack(target)


def ack_content(sender: int, r: int, d: bytes) -> bytes:
    return b"\x01\x32" + _U16.pack(sender) + _U32.pack(r) + d


def vote_content(c: "VoteContent | MultiVoteContent") -> bytes:
    return encode(c)


@lru_cache(maxsize=1 << 16)
def content_digest(c: "VoteContent | MultiVoteContent") -> bytes:
    """Digest of a vote content; votes of one round share a handful of contents."""
    return digest(encode(c))


def wire_size(msg: Any) -> int:
    return len(encode(msg))

