"""Reliable broadcast endpoints.

One :class:`RbcEndpoint` per node runs every RBC instance that node takes part
in, keyed by (sender, round). Each instance reports two events to the owner:
the first payload-bearing message it sees and the final delivery.

Three variants are provided:

``bracha``
    SEND(payload), ECHO(payload), READY(digest). Ready on n-f echoes or f+1
    readies, deliver on n-f readies once the payload is known.
``two_step_certified``
    SEND(payload); receivers ACK the first SEND back to the sender with a
    signature; the sender multicasts CERT(payload, n-f acks). A valid CERT
    delivers and is forwarded once, which gives totality.
``fast_path``
    SEND(payload) then ECHO(digest); deliver on n-f echoes. With an honest
    sender this completes after two hops. It does not guarantee agreement
    against an equivocating sender and is only meant for latency runs.
"""

from __future__ import annotations

from typing import Callable, Optional, Protocol

from .core import (
    ProtocolConfig,
    RbcAck,
    RbcCert,
    RbcEcho,
    RbcKind,
    RbcReady,
    RbcSend,
    Vertex,
)
from .crypto import Keyring, Signature, aggregate
from .wire import ack_content


class Transport(Protocol):
    def send(self, src: int, dst: int, msg: object) -> None: ...

    def multicast(self, src: int, msg: object) -> None: ...


RbcEvent = Callable[[int, int, Vertex], None]


class RbcInstance:
    __slots__ = (
        "sender",
        "round",
        "payloads",
        "echoes",
        "readies",
        "acks",
        "echoed",
        "readied",
        "acked",
        "first_seen",
        "delivered",
        "equivocation",
        "cert_sent",
    )

    def __init__(self, sender: int, r: int) -> None:
        self.sender = sender
        self.round = r
        self.payloads: dict[bytes, Vertex] = {}
        self.echoes: dict[bytes, set[int]] = {}
        self.readies: dict[bytes, set[int]] = {}
        self.acks: dict[int, Signature] = {}
        self.echoed: set[int] = set()  # parties whose echo was counted
        self.readied: set[int] = set()
        self.acked = False  # this node already echoed / acked
        self.first_seen = False
        self.delivered: Optional[bytes] = None
        self.equivocation = False
        self.cert_sent = False


class RbcEndpoint:
    def __init__(
        self,
        me: int,
        cfg: ProtocolConfig,
        keyring: Keyring,
        net: Transport,
        on_first: RbcEvent,
        on_deliver: RbcEvent,
    ) -> None:
        self.me = me
        self.n, self.f = cfg.n, cfg.f
        self.quorum = cfg.n - cfg.f
        self.kind = cfg.rbc_kind
        self.keyring = keyring
        self.net = net
        self.on_first = on_first
        self.on_deliver = on_deliver
        self.instances: dict[tuple[int, int], RbcInstance] = {}
        self._ready_sent: set[tuple[int, int]] = set()
        self.handlers = {
            RbcSend: self._on_send,
            RbcEcho: self._on_echo,
            RbcReady: self._on_ready,
            RbcAck: self._on_ack,
            RbcCert: self._on_cert,
        }

    def instance(self, sender: int, r: int) -> RbcInstance:
        key = (sender, r)
        inst = self.instances.get(key)
        if inst is None:
            inst = self.instances[key] = RbcInstance(sender, r)
        return inst

    def broadcast(self, r: int, vertex: Vertex) -> None:
        self.net.multicast(self.me, RbcSend(self.me, r, vertex))

    def receive(self, src: int, msg) -> None:
        self.handlers[type(msg)](src, msg)

    # -- shared --------------------------------------------------------------

    def _learn(self, inst: RbcInstance, v: Vertex) -> bool:
        """Record a payload; False if it does not belong to this instance."""
        if v.source != inst.sender or v.round != inst.round:
            return False
        d = v.id
        fresh = d not in inst.payloads
        if fresh:
            if inst.payloads:
                inst.equivocation = True
            inst.payloads[d] = v
        if not inst.first_seen:
            inst.first_seen = True
            self.on_first(inst.sender, inst.round, v)
        if fresh and inst.delivered is None:
            # a quorum may have formed before the payload arrived
            quorum_votes = inst.echoes if self.kind is RbcKind.FAST_PATH else inst.readies
            voters = quorum_votes.get(d)
            if voters is not None and len(voters) >= self.quorum:
                self._deliver(inst, d)
        return True

    def _deliver(self, inst: RbcInstance, d: bytes) -> None:
        if inst.delivered is None and d in inst.payloads:
            inst.delivered = d
            self.on_deliver(inst.sender, inst.round, inst.payloads[d])

    # -- handlers ------------------------------------------------------------

    def _on_send(self, src: int, m: RbcSend) -> None:
        if src != m.sender:
            return
        inst = self.instance(m.sender, m.round)
        if not self._learn(inst, m.vertex):
            return
        if inst.acked:
            return
        inst.acked = True
        kind = self.kind
        d = m.vertex.id
        if kind is RbcKind.BRACHA:
            self.net.multicast(self.me, RbcEcho(m.sender, m.round, d, m.vertex))
        elif kind is RbcKind.FAST_PATH:
            self.net.multicast(self.me, RbcEcho(m.sender, m.round, d, None))
            self._maybe_fast_deliver(inst, d)
        else:
            sig = self.keyring.sign(self.me, ack_content(m.sender, m.round, d))
            self.net.send(self.me, m.sender, RbcAck(m.sender, m.round, d, sig))

    def _on_echo(self, src: int, m: RbcEcho) -> None:
        if self.kind is RbcKind.TWO_STEP:
            return
        inst = self.instances.get((m.sender, m.round)) or self.instance(m.sender, m.round)
        if inst.delivered is not None:
            # the ready for a delivered instance was already sent
            return
        if m.vertex is not None and m.vertex.id == m.digest:
            self._learn(inst, m.vertex)
        if src in inst.echoed:
            return
        inst.echoed.add(src)
        voters = inst.echoes.get(m.digest)
        if voters is None:
            voters = inst.echoes[m.digest] = set()
        voters.add(src)
        if self.kind is RbcKind.FAST_PATH:
            self._maybe_fast_deliver(inst, m.digest)
        elif len(voters) >= self.quorum:
            self._send_ready(inst, m.digest)

    def _maybe_fast_deliver(self, inst: RbcInstance, d: bytes) -> None:
        voters = inst.echoes.get(d)
        if voters is not None and len(voters) >= self.quorum:
            self._deliver(inst, d)

    def _send_ready(self, inst: RbcInstance, d: bytes) -> None:
        key = (inst.sender, inst.round)
        if key not in self._ready_sent:
            self._ready_sent.add(key)
            self.net.multicast(self.me, RbcReady(inst.sender, inst.round, d))

    def _on_ready(self, src: int, m: RbcReady) -> None:
        if self.kind is not RbcKind.BRACHA:
            return
        inst = self.instances.get((m.sender, m.round)) or self.instance(m.sender, m.round)
        if inst.delivered is not None or src in inst.readied:
            return
        inst.readied.add(src)
        voters = inst.readies.get(m.digest)
        if voters is None:
            voters = inst.readies[m.digest] = set()
        voters.add(src)
        if len(voters) > self.f:
            self._send_ready(inst, m.digest)
        if len(voters) >= self.quorum:
            self._deliver(inst, m.digest)

    def _on_ack(self, src: int, m: RbcAck) -> None:
        if self.kind is not RbcKind.TWO_STEP or m.sender != self.me:
            return
        inst = self.instance(m.sender, m.round)
        if inst.cert_sent or m.sig.signer != src:
            return
        mine = next(iter(inst.payloads.values()), None)
        if mine is None or mine.id != m.digest:
            return
        if not self.keyring.verify(m.sig, ack_content(m.sender, m.round, m.digest)):
            return
        inst.acks[src] = m.sig
        if len(inst.acks) >= self.quorum:
            inst.cert_sent = True
            agg = aggregate(inst.acks.values())
            self.net.multicast(self.me, RbcCert(m.sender, m.round, mine, agg))

    def _on_cert(self, src: int, m: RbcCert) -> None:
        if self.kind is not RbcKind.TWO_STEP:
            return
        inst = self.instance(m.sender, m.round)
        if inst.delivered is not None:
            return
        d = m.vertex.id
        if not self.keyring.verify_aggregate(
            m.agg, ack_content(m.sender, m.round, d), self.quorum
        ):
            return
        if not self._learn(inst, m.vertex):
            return
        self._deliver(inst, d)
        self.net.multicast(self.me, m)
