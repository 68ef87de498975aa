"""Single-leader Angelfish state machine for one party.

Handlers only record what arrived. All "wait until" conditions of the
protocol are guards re-evaluated by :meth:`AngelfishNode.step`, which the
simulator calls once a node has consumed every message delivered to it at
the current instant.
"""

from __future__ import annotations

import random
from collections import defaultdict, deque
from functools import lru_cache
from typing import Optional, Protocol

from .broadcast import RbcEndpoint
from .core import (
    RBC_MESSAGES,
    CertVariant,
    InvalidMessage,
    ProtocolConfig,
    TimeoutCertificate,
    TimeoutMessage,
    Tx,
    Vertex,
    VertexRef,
    Vote,
    VoteCertificate,
    VoteContent,
    VoteRole,
    check_vertex,
    leader_of,
)
from .crypto import AggregateSignature, Keyring, aggregate, merge_aggregates
from .dag import DagStore
from .wire import content_digest, encode, timeout_content


class Net(Protocol):
    now: int

    def send(self, src: int, dst: int, msg: object) -> None: ...

    def multicast(self, src: int, msg: object) -> None: ...

    def set_timer(self, node: int, delay: int, r: int) -> None: ...


class Observer:
    """Hooks for tracing; every method is a no-op here."""

    def entered_round(self, node: int, r: int, jumped: bool) -> None:
        pass

    def vertex_created(self, node: int, v: Vertex, sequential: bool, need: int) -> None:
        pass

    def committed(self, node: int, v: Vertex, direct: bool) -> None:
        pass

    def a_delivered(self, node: int, v: Vertex) -> None:
        pass

    def timeout_sent(self, node: int, r: int) -> None:
        pass

    def dropped(self, node: int, reason: str, msg: object) -> None:
        pass


@lru_cache(maxsize=65536)
def selected_proposers(r: int, n: int, rate: float, seed: int) -> frozenset[int]:
    """Parties that intend to propose a vertex in round ``r``.

    Exactly round(n * rate) parties are drawn per round; the leader always
    proposes on top of that.
    """
    count = round(n * rate)
    return frozenset(random.Random(f"proposers:{seed}:{r}").sample(range(n), count))


def _add_agg(table: dict, key, agg: AggregateSignature) -> None:
    old = table.get(key)
    table[key] = agg if old is None else merge_aggregates(old, agg)


class AngelfishNode:
    def __init__(
        self,
        me: int,
        cfg: ProtocolConfig,
        keyring: Keyring,
        net: Net,
        observer: Optional[Observer] = None,
        *,
        policy_seed: int = 0,
        tx_per_vertex: int = 1,
        tx_bytes: int = 0,
        jump_rule: str = "angelfish",
    ) -> None:
        self.me = me
        self.cfg = cfg
        self.n, self.f = cfg.n, cfg.f
        self.quorum = cfg.n - cfg.f
        self.keyring = keyring
        self.net = net
        self.obs = observer or Observer()
        self.policy_seed = policy_seed
        self.tx_per_vertex = tx_per_vertex
        self.tx_bytes = tx_bytes
        if jump_rule not in ("angelfish", "sailfish"):
            raise ValueError(f"unknown jump rule {jump_rule!r}")
        self.jump_rule = jump_rule

        self.round = 0
        self.dag = DagStore(self.is_leader_pos)
        self.rbc = RbcEndpoint(me, cfg, keyring, net, self._on_first, self._on_delivered)
        self.round_sources: dict[int, set[int]] = defaultdict(set)
        self.votes: dict[int, dict[int, object]] = defaultdict(dict)
        self.sig_propose: dict[int, dict[VoteContent, AggregateSignature]] = defaultdict(dict)
        self.sig_no_propose: dict[int, dict[VoteContent, AggregateSignature]] = defaultdict(dict)
        # leader round -> leader vertex digest -> vote content -> aggregate
        self.commit_support: dict[int, dict[bytes, dict]] = defaultdict(dict)
        self.commit_signers: dict[tuple[int, bytes], set[int]] = defaultdict(set)
        # (round, digest) -> sources of round+1 first messages with a strong edge to it
        self.endorsers: dict[tuple[int, bytes], set[int]] = defaultdict(set)
        self.vertex_proposers: dict[int, set[int]] = defaultdict(set)
        self.voters: dict[int, set[int]] = defaultdict(set)
        self.timeout_sent: set[int] = set()
        self.timeout_msgs: dict[int, dict[int, TimeoutMessage]] = defaultdict(dict)
        self.tcs: dict[int, TimeoutCertificate] = {}
        self.committed_round = 0
        self.leader_stack: list[Vertex] = []
        self.blocks_to_propose: deque[tuple[Tx, ...]] = deque()
        self.output: list[Vertex] = []
        self.committed_leaders: list[tuple[Vertex, bool]] = []
        self.jumps: list[dict] = []
        self.max_seen_round = 0
        self.pending: Optional[tuple[int, bool]] = None
        self._certs_sent: set[int] = set()
        self._cvc_sent: set[int] = set()
        self._tc_forwarded: set[int] = set()
        self._commit_pending: set[int] = set()
        self._tx_counter = 0
        self._leaders: dict[int, int] = {}
        self._dirty = False
        self._dispatch = {cls: self.rbc.handlers[cls] for cls in RBC_MESSAGES}
        self._dispatch.update(
            {
                Vote: self._on_vote,
                VoteCertificate: self._on_vote_certificate,
                TimeoutMessage: self._on_timeout,
                TimeoutCertificate: self._on_tc,
            }
        )

    # -- schedule ------------------------------------------------------------

    def leader(self, r: int) -> int:
        p = self._leaders.get(r)
        if p is None:
            p = self._leaders[r] = leader_of(r, self.cfg)
        return p

    def is_leader_pos(self, r: int, source: int) -> bool:
        return r >= 1 and source == self.leader(r)

    def lv(self, r: int) -> Optional[Vertex]:
        """The delivered (main) leader vertex of round ``r``."""
        if r < 1:
            return None
        return self.dag.get_vertex(self.leader(r), r)

    def intends(self, r: int) -> bool:
        if self.leader(r) == self.me:
            return True
        cfg = self.cfg
        return self.me in selected_proposers(r, cfg.n, cfg.propose_rate, self.policy_seed)

    def announce(self, r: int) -> bool:
        """Propose flag carried by this node's round-r vertex or vote."""
        return self.intends(r + 1)

    # -- external entry points -----------------------------------------------

    def start(self) -> None:
        self._enter_round(1, via_leader=True, jumped=False)
        self.step()

    def a_bcast(self, block: tuple[Tx, ...]) -> None:
        self.blocks_to_propose.append(tuple(block))

    def receive(self, src: int, msg: object) -> None:
        self._dispatch[type(msg)](src, msg)

    def handle(self, src: int, msg: object) -> None:
        self.receive(src, msg)
        self.step()

    def on_timer(self, r: int) -> None:
        if r != self.round or r in self.timeout_sent:
            return
        if self.lv(r) is None:
            self._send_timeout(r)
        if self.pending is not None and self.pending[0] == r and self.leader(r) == self.me:
            if self._leader_plan(r) is None:
                # timed out the previous leader yet delivered it, and no TC
                # arrived in time: give up this leader slot with a vote
                self.pending = None
                self._create_vote(r)

    def step(self) -> None:
        while self._dirty:
            self._dirty = False
            if self._commit_pending:
                pending = sorted(self._commit_pending)
                self._commit_pending.clear()
                for r in pending:
                    self._try_commit(r)
            if self._try_jump() or self._try_advance():
                continue
            self._try_create_pending()

    # -- RBC events ----------------------------------------------------------

    def leaders_at(self, r: int) -> tuple[int, ...]:
        return (self.leader(r),)

    def _on_first(self, sender: int, r: int, v: Vertex) -> None:
        if r < 2:
            return
        members = self.leaders_at(r - 1)
        for e in v.strong_edges:
            if e.source in members:
                self.endorsers[(e.round, e.digest)].add(sender)
                self._commit_pending.add(e.round)
                self._dirty = True

    def _on_delivered(self, sender: int, r: int, v: Vertex) -> None:
        try:
            check_vertex(v, self.cfg)
        except InvalidMessage as exc:
            self.obs.dropped(self.me, str(exc), v)
            return
        if v.source == self.leader(r) and not self.is_valid(v):
            self.obs.dropped(self.me, "invalid leader vertex", v)
            return
        if v.propose:
            self.vertex_proposers[r].add(sender)
        self._store(v)

    def _store(self, v: Vertex) -> None:
        for w in self.dag.add(v):
            self.round_sources[w.round].add(w.source)
            if w.round > self.max_seen_round:
                self.max_seen_round = w.round
            if self.is_leader_pos(w.round, w.source):
                self._commit_pending.add(w.round)
        self._dirty = True

    # -- validity ------------------------------------------------------------

    def valid_tc(self, tc: TimeoutCertificate) -> bool:
        return self.keyring.verify_aggregate(tc.agg, timeout_content(tc.round), self.quorum)

    def _tc_chain_ok(self, v: Vertex, lo: int) -> bool:
        return [tc.round for tc in v.tcs] == list(range(lo + 1, v.round)) and all(
            self.valid_tc(tc) for tc in v.tcs
        )

    def is_valid(self, v: Vertex) -> bool:
        r = v.round
        if r == 1:
            return True
        prev = self.leader(r - 1)
        if any(e.source == prev for e in v.strong_edges):
            return True
        if v.leader_edges:
            le = v.leader_edges[0]
            if le.source != self.leader(le.round):
                return False
            return self._tc_chain_ok(v, le.round)
        # no delivered leader anywhere below: the chain reaches genesis
        return self._tc_chain_ok(v, 0)

    # -- votes and certificates ----------------------------------------------

    def _on_vote(self, src: int, vt: Vote) -> None:
        r, s = vt.round, vt.source
        if r < 1 or not 0 <= s < self.n or s in self.votes[r] or vt.sig.signer != s:
            return
        e = vt.strong_edge
        if e is not None and not self.is_leader_pos(e.round, e.source):
            self.obs.dropped(self.me, "vote edge to a non-leader vertex", vt)
            return
        content = vt.content
        cd = content_digest(content)
        if not self.keyring.verify_digest(vt.sig, cd):
            self.obs.dropped(self.me, "bad vote signature", vt)
            return
        self.votes[r][s] = vt
        agg = AggregateSignature(frozenset((s,)), cd)
        _add_agg(self.sig_propose[r] if vt.propose else self.sig_no_propose[r], content, agg)
        if vt.propose:
            self.vertex_proposers[r].add(s)
        self.voters[r].add(s)
        self.round_sources[r].add(s)
        if r > self.max_seen_round:
            self.max_seen_round = r
        if e is not None:
            self._add_commit_support(e, content, agg)
        self._dirty = True

    def _add_commit_support(self, e: VertexRef, content, agg: AggregateSignature) -> None:
        _add_agg(self.commit_support[e.round].setdefault(e.digest, {}), content, agg)
        self.commit_signers[(e.round, e.digest)] |= agg.signer_set
        self._commit_pending.add(e.round)

    def _variant_ok(self, c: CertVariant) -> bool:
        return self.keyring.verify_aggregate_digest(c.agg, content_digest(c.content))

    def _on_vote_certificate(self, src: int, cert: VoteCertificate) -> None:
        if not all(self._variant_ok(c) for c in cert.variants):
            self.obs.dropped(self.me, "bad certificate aggregate", cert)
            return
        r = cert.round
        if cert.role is VoteRole.COMMIT:
            for content, agg in cert.variants:
                e = content.strong_edge
                if not self.is_leader_pos(e.round, e.source):
                    self.obs.dropped(self.me, "commit certificate for a non-leader", cert)
                    return
            for content, agg in cert.variants:
                self._add_commit_support(content.strong_edge, content, agg)
        else:
            propose = cert.role is VoteRole.PROPOSE
            table = self.sig_propose[r] if propose else self.sig_no_propose[r]
            for content, agg in cert.variants:
                _add_agg(table, content, agg)
                self.round_sources[r] |= agg.signer_set
                self.voters[r] |= agg.signer_set
                if propose:
                    self.vertex_proposers[r] |= agg.signer_set
            if r > self.max_seen_round:
                self.max_seen_round = r
        self._dirty = True

    @staticmethod
    def _disjoint_variants(table: dict) -> list[CertVariant]:
        out, seen = [], set()
        for content, agg in table.items():
            if not agg.signer_set & seen:
                out.append(CertVariant(content, agg))
                seen |= agg.signer_set
        return out

    def _send_vote_certs(self, r: int) -> None:
        for role, table in (
            (VoteRole.PROPOSE, self.sig_propose.get(r)),
            (VoteRole.NO_PROPOSE, self.sig_no_propose.get(r)),
        ):
            if table:
                variants = self._disjoint_variants(table)
                self.net.multicast(self.me, VoteCertificate(r, self.me, role, tuple(variants)))

    # -- timeouts ------------------------------------------------------------

    def _send_timeout(self, r: int) -> None:
        self.timeout_sent.add(r)
        sig = self.keyring.sign(self.me, timeout_content(r))
        self.obs.timeout_sent(self.me, r)
        self.net.multicast(self.me, TimeoutMessage(r, self.me, sig))

    def _on_timeout(self, src: int, tm: TimeoutMessage) -> None:
        r = tm.round
        if r < 1 or r in self.tcs or tm.sig.signer != tm.source:
            return
        if not self.keyring.verify(tm.sig, timeout_content(r)):
            self.obs.dropped(self.me, "bad timeout signature", tm)
            return
        bucket = self.timeout_msgs[r]
        bucket[tm.source] = tm
        if len(bucket) >= self.quorum:
            self._store_tc(TimeoutCertificate(r, aggregate(m.sig for m in bucket.values())))

    def _on_tc(self, src: int, tc: TimeoutCertificate) -> None:
        if tc.round in self.tcs:
            return
        if not self.valid_tc(tc):
            self.obs.dropped(self.me, "invalid timeout certificate", tc)
            return
        self._store_tc(tc)

    def _store_tc(self, tc: TimeoutCertificate) -> None:
        r = tc.round
        self.tcs[r] = tc
        if r >= self.round and r not in self._tc_forwarded:
            self._tc_forwarded.add(r)
            self.net.multicast(self.me, tc)
        if r > self.max_seen_round:
            self.max_seen_round = r
        self._dirty = True

    # -- round movement ------------------------------------------------------

    def _leader_chain_ready(self, r: int) -> bool:
        """Can the leader of round r+1 justify its vertex from round ``r``?"""
        if self.lv(r) is not None and r not in self.timeout_sent:
            return True
        if r not in self.tcs:
            return False
        for rr in range(r - 1, 0, -1):
            if self.lv(rr) is not None:
                return True
            if rr not in self.tcs:
                return False
        return True

    def _try_advance(self) -> bool:
        r = self.round
        if r < 1 or len(self.round_sources[r]) < self.quorum:
            return False
        lv = self.lv(r)
        if lv is None and r not in self.tcs:
            return False
        if r not in self._certs_sent and self.dag.round_size(r) < self.quorum:
            self._certs_sent.add(r)
            self._send_vote_certs(r)
        if self.leader(r + 1) == self.me and lv is None and not self._leader_chain_ready(r):
            return False
        self._enter_round(r + 1, via_leader=lv is not None, jumped=False)
        return True

    def _jump_support(self, r: int) -> bool:
        if self.jump_rule == "sailfish":
            return self.dag.round_size(r) >= self.quorum
        return len(self.round_sources[r]) > self.f

    def _try_jump(self) -> bool:
        for r in range(self.max_seen_round, self.round, -1):
            if not self._jump_support(r):
                continue
            lv = self.lv(r)
            if lv is None and r not in self.tcs:
                continue
            if self.leader(r + 1) == self.me and lv is None and not self._leader_chain_ready(r):
                continue
            self.jumps.append(
                {
                    "time": self.net.now,
                    "from": self.round,
                    "to": r + 1,
                    "support": len(self.round_sources[r]),
                    "vertices": self.dag.round_size(r),
                    "leader_vertex": lv is not None,
                    "tc": r in self.tcs,
                }
            )
            self._enter_round(r + 1, via_leader=lv is not None, jumped=True)
            return True
        return False

    def _on_enter(self, r: int) -> None:
        """Hook run on round entry before the vertex or vote is produced."""

    def _enter_round(self, r: int, via_leader: bool, jumped: bool) -> None:
        prev = self.round
        # never leave a round silently: parties still in it may need this
        # party's message to reach n-f
        if self.pending is not None and self.pending[0] == prev:
            self.pending = None
            self._create_vote(prev)
        if jumped and r - 1 > prev:
            self._create_vote(r - 1)
        self.round = r
        tau = self.cfg.timeout_tau if via_leader else self.cfg.long_timeout
        self.net.set_timer(self.me, tau, r)
        self.obs.entered_round(self.me, r, jumped)
        self._dirty = True
        self._on_enter(r)
        if self.intends(r):
            self.pending = (r, jumped)
        else:
            self.pending = None
            self._create_vote(r)

    # -- vertex and vote creation --------------------------------------------

    def _pacing_need(self, r: int) -> int:
        if r < 3:
            return 0
        # an announcer already seen voting in round r-1 will not send a vertex
        expected = self.vertex_proposers[r - 2] - self.voters.get(r - 1, set())
        return max(len(expected - self._skipped(r - 1)) - self.f, 0)

    def _leader_plan(self, r: int):
        """Leader edges, TCs and NVC for this node's round-r leader vertex.

        Returns None while the required certificates are still missing.
        """
        if not self._leader_chain_ready(r - 1):
            return None
        if self.lv(r - 1) is not None and r - 1 not in self.timeout_sent:
            return (), (), None
        tcs = [self.tcs[r - 1]]
        for rr in range(r - 2, 0, -1):
            u = self.lv(rr)
            if u is not None:
                return (u.ref,), tuple(tcs), None
            tcs.append(self.tcs[rr])
        return (), tuple(tcs), None

    def _skipped(self, r: int) -> set[int]:
        """Round-r sources this node must not reference with strong edges."""
        return {self.leader(r)} if r in self.timeout_sent else set()

    def _strong_refs(self, r: int) -> list[VertexRef]:
        if r < 2:
            return []
        skip = self._skipped(r - 1)
        return [u.ref for s, u in self.dag.rounds.get(r - 1, {}).items() if s not in skip]

    def _try_create_pending(self) -> None:
        if self.pending is None:
            return
        r, jumped = self.pending
        if r != self.round:
            self.pending = None
            return
        need = 0 if jumped else self._pacing_need(r)
        strong = self._strong_refs(r)
        if len(strong) < need:
            return
        plan = ((), (), None)
        if self.leader(r) == self.me and r > 1:
            plan = self._leader_plan(r)
            if plan is None:
                return
        self.pending = None
        leader_edges, tcs, nvc = plan
        weak = self.dag.weak_edges_for(strong + list(leader_edges), r)
        v = Vertex(
            r,
            self.me,
            self._next_block(),
            self.announce(r),
            tuple(strong),
            weak,
            leader_edges,
            tcs,
            nvc,
        )
        check_vertex(v, self.cfg)
        self.obs.vertex_created(self.me, v, not jumped, need)
        if v.propose:
            self.vertex_proposers[r].add(self.me)
        self._store(v)
        self.rbc.broadcast(r, v)

    def _next_block(self) -> tuple[Tx, ...]:
        if self.blocks_to_propose:
            return self.blocks_to_propose.popleft()
        now = self.net.now
        txs = []
        for _ in range(self.tx_per_vertex):
            self._tx_counter += 1
            txs.append(Tx(self._tx_counter * self.n + self.me, now, self.tx_bytes))
        return tuple(txs)

    def _vote_edge(self, r: int) -> Optional[VertexRef]:
        if r < 2 or r - 1 in self.timeout_sent:
            return None
        u = self.lv(r - 1)
        return None if u is None else u.ref

    def _create_vote(self, r: int) -> None:
        content = VoteContent(r, self.announce(r), self._vote_edge(r))
        sig = self.keyring.sign(self.me, encode(content))
        self.net.multicast(self.me, Vote(r, self.me, content.propose, content.strong_edge, sig))

    # -- commit --------------------------------------------------------------

    def _try_commit(self, r: int) -> None:
        if r <= self.committed_round:
            return
        lv = self.lv(r)
        if lv is None:
            return
        w = self.endorsers.get((r, lv.id), set())
        if len(w) < self.quorum:
            support = w | self.commit_signers.get((r, lv.id), set())
            if len(support) < self.quorum:
                return
            if r not in self._cvc_sent:
                self._cvc_sent.add(r)
                variants = self._disjoint_variants(self.commit_support[r][lv.id])
                self.net.multicast(
                    self.me, VoteCertificate(r, self.me, VoteRole.COMMIT, tuple(variants))
                )
        self.commit_leader(lv)

    def commit_leader(self, v: Vertex) -> None:
        self.leader_stack.append(v)
        cur = v
        for rr in range(v.round - 1, self.committed_round, -1):
            u = self.lv(rr)
            if u is not None and self.dag.leader_path(cur, u):
                self.leader_stack.append(u)
                cur = u
        self.committed_round = v.round
        self.order_vertices()

    def _record_commit(self, v: Vertex, direct: bool) -> None:
        self.committed_leaders.append((v, direct))
        self.obs.committed(self.me, v, direct)

    def order_vertices(self) -> None:
        while self.leader_stack:
            v = self.leader_stack.pop()
            self._record_commit(v, not self.leader_stack)
            self._output_history(v)

    def _output_history(self, v: Vertex) -> None:
        for u in self.dag.take_history(v):
            self.output.append(u)
            self.obs.a_delivered(self.me, u)
