"""Protocol configuration, identifiers, messages and the leader schedule.

Every message is an immutable value. Structural invariants that do not depend
on the leader schedule are enforced on construction; schedule-dependent ones
live in :func:`check_vertex`.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import NamedTuple, Optional

from .crypto import AggregateSignature, Signature


class InvalidMessage(ValueError):
    pass


class RbcKind(str, enum.Enum):
    BRACHA = "bracha"
    TWO_STEP = "two_step_certified"
    FAST_PATH = "fast_path"

    @classmethod
    def parse(cls, value: "str | RbcKind") -> "RbcKind":
        if isinstance(value, RbcKind):
            return value
        if value == "two_step":
            return cls.TWO_STEP
        return cls(value)


@dataclass(frozen=True)
class ProtocolConfig:
    n: int
    f: int
    timeout_tau: int = 4
    rbc_kind: RbcKind = RbcKind.BRACHA
    leader_schedule_seed: int = 0
    leaders_per_round: int = 1
    propose_rate: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "rbc_kind", RbcKind.parse(self.rbc_kind))
        if self.n <= 0 or self.f < 0:
            raise ValueError("n must be positive and f non-negative")
        if self.n <= 3 * self.f:
            raise ValueError(f"n={self.n} must exceed 3f={3 * self.f}")
        if not 1 <= self.leaders_per_round <= self.n:
            raise ValueError("leaders_per_round must be in [1, n]")
        if self.timeout_tau <= 0:
            raise ValueError("timeout_tau must be positive")
        if not 0.0 <= self.propose_rate <= 1.0:
            raise ValueError("propose_rate must be in [0, 1]")

    @classmethod
    def for_n(cls, n: int, **kwargs) -> "ProtocolConfig":
        return cls(n=n, f=(n - 1) // 3, **kwargs)

    @property
    def quorum(self) -> int:
        return self.n - self.f

    @property
    def long_timeout(self) -> int:
        # 5Δ when the short timer is 2Δ.
        return (self.timeout_tau * 5 + 1) // 2


# -- leader schedule ---------------------------------------------------------


@lru_cache(maxsize=4096)
def _window_permutation(n: int, seed: int, window: int) -> tuple[int, ...]:
    order = list(range(n))
    random.Random(f"leaders:{seed}:{window}").shuffle(order)
    return tuple(order)


def leader_of(r: int, cfg: ProtocolConfig) -> int:
    if r < 1:
        raise ValueError("rounds start at 1")
    seed = cfg.leader_schedule_seed
    if seed == 0:
        return r % cfg.n
    window, pos = divmod(r - 1, cfg.n)
    return _window_permutation(cfg.n, seed, window)[pos]


def multiple_leaders_of(r: int, cfg: ProtocolConfig) -> tuple[int, ...]:
    main = leader_of(r, cfg)
    n, k = cfg.n, cfg.leaders_per_round
    if cfg.leader_schedule_seed == 0:
        return tuple((main + i) % n for i in range(k))
    rest = [p for p in range(n) if p != main]
    rng = random.Random(f"multi:{cfg.leader_schedule_seed}:{r}")
    return (main, *rng.sample(rest, k - 1))


# -- values ------------------------------------------------------------------


class Tx(NamedTuple):
    tx_id: int
    created_at: int
    size: int = 0  # synthetic payload bytes carried on the wire


class VertexRef(NamedTuple):
    round: int
    source: int
    digest: bytes


@dataclass(frozen=True)
class TimeoutMessage:
    round: int
    source: int
    sig: Signature


@dataclass(frozen=True)
class TimeoutCertificate:
    round: int
    agg: AggregateSignature

    @property
    def signer_set(self) -> frozenset[int]:
        return self.agg.signer_set


@dataclass(frozen=True)
class NoVoteMessage:
    round: int
    target: int
    source: int
    sig: Signature


@dataclass(frozen=True)
class NoVoteCertificate:
    round: int
    target: int
    agg: AggregateSignature

    @property
    def signer_set(self) -> frozenset[int]:
        return self.agg.signer_set


def _canonical_refs(refs) -> tuple[VertexRef, ...]:
    return tuple(sorted(set(refs)))


@dataclass(frozen=True, eq=False)
class Vertex:
    round: int
    source: int
    block: tuple[Tx, ...] = ()
    propose: bool = False
    strong_edges: tuple[VertexRef, ...] = ()
    weak_edges: tuple[VertexRef, ...] = ()
    leader_edges: tuple[VertexRef, ...] = ()
    tcs: tuple[TimeoutCertificate, ...] = ()
    nvc: Optional[NoVoteCertificate] = None

    def __post_init__(self) -> None:
        r = self.round
        if r < 1 or self.source < 0:
            raise InvalidMessage("vertex round must be >= 1 and source >= 0")
        set_ = object.__setattr__
        set_(self, "block", tuple(self.block))
        set_(self, "strong_edges", _canonical_refs(self.strong_edges))
        set_(self, "weak_edges", _canonical_refs(self.weak_edges))
        set_(self, "leader_edges", _canonical_refs(self.leader_edges))
        tcs = tuple(sorted(self.tcs, key=lambda tc: tc.round))
        set_(self, "tcs", tcs)
        if any(e.round != r - 1 for e in self.strong_edges):
            raise InvalidMessage("strong edge not at round-1")
        if any(e.round > r - 2 or e.round < 1 for e in self.weak_edges):
            raise InvalidMessage("weak edge not at a round <= round-2")
        if len({(e.round, e.source) for e in self.strong_edges}) != len(self.strong_edges):
            raise InvalidMessage("two strong edges to one (round, source)")
        tc_rounds = [tc.round for tc in tcs]
        if len(set(tc_rounds)) != len(tc_rounds) or any(
            not 1 <= x <= r - 1 for x in tc_rounds
        ):
            raise InvalidMessage("timeout certificates must be distinct rounds < round")
        if self.leader_edges:
            lr = self.leader_edges[0].round
            if any(e.round != lr for e in self.leader_edges) or not 1 <= lr < r - 1:
                raise InvalidMessage("leader edges must share one round < round-1")
            if tc_rounds != list(range(lr + 1, r)):
                raise InvalidMessage("leader edge needs one TC per skipped round")

    @cached_property
    def id(self) -> bytes:
        from .wire import vertex_digest

        return vertex_digest(self)

    @cached_property
    def ref(self) -> VertexRef:
        return VertexRef(self.round, self.source, self.id)

    @cached_property
    def strong_ids(self) -> frozenset[bytes]:
        return frozenset(e.digest for e in self.strong_edges)

    @property
    def leader_edge(self) -> Optional[VertexRef]:
        return self.leader_edges[0] if self.leader_edges else None

    @property
    def parents(self) -> tuple[VertexRef, ...]:
        return self.strong_edges + self.weak_edges + self.leader_edges

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vertex) and self.id == other.id

    def __hash__(self) -> int:
        return hash(self.id)

    def __repr__(self) -> str:
        return f"Vertex(r={self.round}, src={self.source}, id={self.id[:4].hex()})"


def check_vertex(v: Vertex, cfg: ProtocolConfig) -> None:
    """Schedule-dependent structural checks, applied on creation and receipt."""
    if v.source >= cfg.n or any(e.source >= cfg.n for e in v.parents):
        raise InvalidMessage("party index out of range")
    if cfg.leaders_per_round == 1 and (len(v.leader_edges) > 1 or v.nvc is not None):
        raise InvalidMessage("single-leader vertex with multi-leader fields")
    if v.leader_edges or v.tcs or v.nvc is not None:
        if v.source != leader_of(v.round, cfg):
            raise InvalidMessage("only the main leader may carry leader edges or certificates")
    if v.leader_edges:
        prev = leader_of(v.round - 1, cfg)
        if any(e.source == prev for e in v.strong_edges):
            raise InvalidMessage("leader edge alongside strong edge to previous leader")


class VoteContent(NamedTuple):
    round: int
    propose: bool
    strong_edge: Optional[VertexRef]


class MultiVoteContent(NamedTuple):
    round: int
    propose: bool
    strong_edges: tuple[VertexRef, ...]


@dataclass(frozen=True)
class Vote:
    round: int
    source: int
    propose: bool
    strong_edge: Optional[VertexRef]
    sig: Signature

    def __post_init__(self) -> None:
        if self.strong_edge is not None and self.strong_edge.round != self.round - 1:
            raise InvalidMessage("vote edge must target round-1")

    @property
    def content(self) -> VoteContent:
        return VoteContent(self.round, self.propose, self.strong_edge)


@dataclass(frozen=True)
class MultiVote:
    round: int
    source: int
    propose: bool
    strong_edges: tuple[VertexRef, ...]
    sig: Signature

    def __post_init__(self) -> None:
        object.__setattr__(self, "strong_edges", _canonical_refs(self.strong_edges))
        if any(e.round != self.round - 1 for e in self.strong_edges):
            raise InvalidMessage("vote edge must target round-1")

    @property
    def content(self) -> MultiVoteContent:
        return MultiVoteContent(self.round, self.propose, self.strong_edges)


class VoteRole(enum.IntEnum):
    PROPOSE = 1
    NO_PROPOSE = 2
    COMMIT = 3


class CertVariant(NamedTuple):
    content: VoteContent
    agg: AggregateSignature


@dataclass(frozen=True)
class VoteCertificate:
    """PVC, NPVC or CVC. For CVC, ``round`` is the endorsed leader's round."""

    round: int
    issuer: int
    role: VoteRole
    variants: tuple[CertVariant, ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", VoteRole(self.role))
        object.__setattr__(self, "variants", tuple(self.variants))
        if not self.variants:
            raise InvalidMessage("empty vote certificate")
        seen: set[int] = set()
        for content, agg in self.variants:
            if seen & agg.signer_set:
                raise InvalidMessage("overlapping signer sets in one certificate")
            seen |= agg.signer_set
            if self.role is VoteRole.COMMIT:
                e = content.strong_edge
                if content.round != self.round + 1 or e is None or e.round != self.round:
                    raise InvalidMessage("commit certificate variant does not endorse round")
            else:
                if content.round != self.round:
                    raise InvalidMessage("certificate variant from another round")
                if content.propose != (self.role is VoteRole.PROPOSE):
                    raise InvalidMessage("propose flag does not match certificate role")

    @property
    def signers(self) -> frozenset[int]:
        return frozenset().union(*(v.agg.signer_set for v in self.variants))


# -- reliable broadcast wire messages ---------------------------------------


class RbcSend(NamedTuple):
    sender: int
    round: int
    vertex: Vertex


class RbcEcho(NamedTuple):
    sender: int
    round: int
    digest: bytes
    vertex: Optional[Vertex]  # bracha echoes carry the payload, fast-path ones do not


class RbcReady(NamedTuple):
    sender: int
    round: int
    digest: bytes


class RbcAck(NamedTuple):
    sender: int
    round: int
    digest: bytes
    sig: Signature


class RbcCert(NamedTuple):
    sender: int
    round: int
    vertex: Vertex
    agg: AggregateSignature


RBC_MESSAGES = (RbcSend, RbcEcho, RbcReady, RbcAck, RbcCert)
