"""Deterministic discrete-event simulator.

Virtual time is an integer number of delay units. Events live in a calendar
queue: one FIFO bucket per instant plus a heap of occupied instants, so
ordering is (time, insertion order) and a run is a pure function of its
configuration and seed.

All events that reach a node at one instant are consumed before the node
evaluates its guards (``step``). A node's own multicasts reach itself with
delay 0 and are processed within the same instant.
"""

from __future__ import annotations

import dataclasses
import enum
import heapq
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .core import (
    ProtocolConfig,
    RbcSend,
    TimeoutMessage,
    Tx,
    Vertex,
    Vote,
    VoteCertificate,
)
from .crypto import Keyring
from .multileader import MultiLeaderNode
from .node import AngelfishNode, Observer
from .wire import encode

MSG, TIMER, CONTROL = 0, 1, 2


# -- delay models ------------------------------------------------------------


def _uniform(rng: random.Random, lo: int, hi: int) -> int:
    # randint is several times slower and this sits on the per-message path
    return lo + int(rng.random() * (hi - lo + 1))


class DelayModel:
    """Draws the network delay of one message; the simulator applies the GST bound."""

    delta_max: int

    def span(self, now: int, gst: int) -> tuple[int, int]:
        """Inclusive delay range for a message sent at ``now``."""
        raise NotImplementedError

    def draw(self, rng: random.Random, now: int, gst: int) -> int:
        lo, hi = self.span(now, gst)
        return lo if lo == hi else _uniform(rng, lo, hi)


@dataclass(frozen=True)
class FixedDelay(DelayModel):
    delta: int = 1

    @property
    def delta_max(self) -> int:
        return self.delta

    def span(self, now: int, gst: int) -> tuple[int, int]:
        return self.delta, self.delta


@dataclass(frozen=True)
class JitterDelay(DelayModel):
    delta_min: int = 1
    delta_max: int = 2

    def span(self, now: int, gst: int) -> tuple[int, int]:
        return self.delta_min, self.delta_max


@dataclass(frozen=True)
class AdversarialDelay(DelayModel):
    """Seeded random scheduling: wide delays before GST, at most Δ after."""

    delta_min: int = 1
    delta_max: int = 2
    pre_gst_max: int = 12

    def span(self, now: int, gst: int) -> tuple[int, int]:
        return self.delta_min, self.pre_gst_max if now < gst else self.delta_max


# -- faults ------------------------------------------------------------------


class Behavior(str, enum.Enum):
    EQUIVOCATE_VERTEX = "equivocate_vertex"
    WITHHOLD_VERTEX = "withhold_vertex"
    FALSE_PROPOSE_FLAG = "false_propose_flag"
    PREMATURE_VOTE = "premature_vote"
    SILENT = "silent"


@dataclass
class FaultScript:
    crashes: dict[int, int] = field(default_factory=dict)  # party -> crash time
    byzantine: dict[int, Behavior] = field(default_factory=dict)
    pauses: list[tuple[int, int, int]] = field(default_factory=list)  # (party, start, end)

    def __post_init__(self) -> None:
        self.byzantine = {p: Behavior(b) for p, b in self.byzantine.items()}
        both = set(self.crashes) & set(self.byzantine)
        if both:
            raise ValueError(f"parties {sorted(both)} are both crashed and Byzantine")

    def faulty(self) -> set[int]:
        return set(self.crashes) | set(self.byzantine)

    def validate(self, cfg: ProtocolConfig) -> None:
        bad = [p for p in self.faulty() | {p for p, _, _ in self.pauses} if not 0 <= p < cfg.n]
        if bad:
            raise ValueError(f"fault script names unknown parties {bad}")
        if len(self.faulty()) > cfg.f:
            raise ValueError(f"{len(self.faulty())} faulty parties exceed f={cfg.f}")

    @classmethod
    def from_dict(cls, d: dict) -> "FaultScript":
        unknown = set(d) - {"crashes", "byzantine", "pauses"}
        if unknown:
            raise ValueError(f"unknown fault keys {sorted(unknown)}")
        return cls(
            crashes={int(k): int(v) for k, v in d.get("crashes", {}).items()},
            byzantine={int(k): Behavior(v) for k, v in d.get("byzantine", {}).items()},
            pauses=[tuple(map(int, p)) for p in d.get("pauses", [])],
        )


class _Port:
    """The network as seen by one node."""

    def __init__(self, sim: "Simulator", me: int) -> None:
        self.sim = sim
        self.me = me

    @property
    def now(self) -> int:
        return self.sim.now

    def send(self, src: int, dst: int, msg: object) -> None:
        self.sim.send(src, dst, msg)

    def multicast(self, src: int, msg: object) -> None:
        self.sim.multicast(src, msg)

    def set_timer(self, node: int, delay: int, r: int) -> None:
        self.sim.set_timer(node, delay, r)


class _ByzantinePort(_Port):
    """Rewrites a faulty node's outgoing traffic according to its behavior."""

    def __init__(self, sim: "Simulator", me: int, behavior: Behavior) -> None:
        super().__init__(sim, me)
        self.behavior = behavior
        others = [p for p in range(sim.cfg.n) if p != me]
        half = len(others) // 2
        self.group_a = {me, *others[:half]}
        self.group_b = set(others[half:])

    def send(self, src: int, dst: int, msg: object) -> None:
        if self.behavior is not Behavior.SILENT:
            self.sim.send(src, dst, msg)

    def multicast(self, src: int, msg: object) -> None:
        b = self.behavior
        sim = self.sim
        if b is Behavior.SILENT:
            return
        own_send = type(msg) is RbcSend and msg.sender == self.me
        if b is Behavior.EQUIVOCATE_VERTEX and own_send:
            v = msg.vertex
            twin = dataclasses.replace(v, block=v.block + (Tx(2**63 + v.round, sim.now, 0),))
            sim.multicast(src, msg, only=self.group_a)
            sim.multicast(src, RbcSend(msg.sender, msg.round, twin), only=self.group_b)
            return
        if b is Behavior.WITHHOLD_VERTEX and own_send:
            sim.multicast(src, msg, only=self.group_a)
            return
        if type(msg) is Vote and msg.source == self.me:
            if b is Behavior.FALSE_PROPOSE_FLAG:
                flipped = self._vote(msg.round, not msg.propose, msg.strong_edge)
                sim.multicast(src, msg, only=self.group_a)
                sim.multicast(src, flipped, only=self.group_b)
                return
            if b is Behavior.PREMATURE_VOTE:
                sim.multicast(src, msg)
                sim.multicast(src, self._vote(msg.round + 1, True, None))
                return
        sim.multicast(src, msg)

    def _vote(self, r: int, propose: bool, edge) -> Vote:
        from .core import VoteContent

        content = VoteContent(r, propose, edge)
        sig = self.sim.keyring.sign(self.me, encode(content))
        return Vote(r, self.me, propose, edge, sig)


def _byzantine_class(base: type[AngelfishNode], behavior: Behavior) -> type[AngelfishNode]:
    if behavior is not Behavior.FALSE_PROPOSE_FLAG:
        return base

    class LyingNode(base):  # type: ignore[misc, valid-type]
        def announce(self, r: int) -> bool:
            return True

    return LyingNode


# -- observation -------------------------------------------------------------


class RunObserver(Observer):
    """Collects the facts the checks and metrics need."""

    def __init__(self, sim: "Simulator") -> None:
        self.sim = sim
        self.created: dict[bytes, tuple[int, Vertex, bool, int]] = {}
        self.first_commit: dict[bytes, int] = {}
        self.first_direct_commit: dict[bytes, int] = {}
        self.first_deliver: dict[bytes, int] = {}
        self.direct_commits: set[tuple[int, int, bytes]] = set()  # (round, source, digest)
        self.pacing: list[tuple[int, int, int, int]] = []  # (node, round, edges, need)
        self.max_round = [0] * sim.cfg.n
        self.timeouts: Counter = Counter()
        self.drops: Counter = Counter()
        self.deliver_counts: Counter = Counter()
        self.last_progress = 0

    def entered_round(self, node: int, r: int, jumped: bool) -> None:
        self.max_round[node] = r
        self.last_progress = self.sim.now
        self.sim.trace_event("round", node, None, r, None)

    def vertex_created(self, node: int, v: Vertex, sequential: bool, need: int) -> None:
        now = self.sim.now
        self.created[v.id] = (now, v, sequential, need)
        if sequential and node in self.sim.honest:
            self.pacing.append((node, v.round, len(v.strong_edges), need))
        self.sim.on_created(node, v)
        self.sim.trace_event("create", node, None, v.round, v.id)

    def committed(self, node: int, v: Vertex, direct: bool) -> None:
        if node not in self.sim.honest:
            return
        now = self.sim.now
        self.first_commit.setdefault(v.id, now)
        if direct:
            self.first_direct_commit.setdefault(v.id, now)
            self.direct_commits.add((v.round, v.source, v.id))
        self.sim.trace_event("commit" if direct else "commit_indirect", node, None, v.round, v.id)

    def a_delivered(self, node: int, v: Vertex) -> None:
        if node not in self.sim.honest:
            return
        self.first_deliver.setdefault(v.id, self.sim.now)
        self.last_progress = self.sim.now
        self.sim.on_a_deliver(node, v)

    def timeout_sent(self, node: int, r: int) -> None:
        self.timeouts[r] += 1

    def dropped(self, node: int, reason: str, msg: object) -> None:
        self.drops[reason] += 1


# -- simulator ---------------------------------------------------------------


@dataclass
class SimConfig:
    protocol: ProtocolConfig
    delay: DelayModel = field(default_factory=FixedDelay)
    gst: int = 0
    seed: int = 0
    faults: FaultScript = field(default_factory=FaultScript)
    mode: str = "single"
    tx_per_vertex: int = 1
    tx_bytes: int = 0
    jump_rule: str = "angelfish"
    count_bytes: bool = False
    trace: bool = False


class Simulator:
    def __init__(self, config: SimConfig) -> None:
        self.config = config
        cfg = self.cfg = config.protocol
        config.faults.validate(cfg)
        if config.mode not in ("single", "multi"):
            raise ValueError(f"unknown mode {config.mode!r}")
        self.rng = random.Random(f"net:{config.seed}")
        self.delay = config.delay
        self.delta = config.delay.delta_max
        self.gst = config.gst
        self.keyring = Keyring(cfg.n)
        self.now = 0
        self._buckets: dict[int, list] = {}
        self._times: list[int] = []
        self.crashed: set[int] = set()
        self.paused: dict[int, list] = {}
        faults = config.faults
        self.byzantine = dict(faults.byzantine)
        self.honest = frozenset(p for p in range(cfg.n) if p not in self.byzantine)
        self.messages: Counter = Counter()
        self.bytes_by_round: Counter = Counter()
        self.bytes_by_kind: Counter = Counter()
        self.trace: Optional[list[dict]] = [] if config.trace else None
        self.obs = RunObserver(self)
        self.liveness_flag: Optional[str] = None
        base = MultiLeaderNode if config.mode == "multi" else AngelfishNode
        self.nodes: list[AngelfishNode] = []
        for p in range(cfg.n):
            behavior = self.byzantine.get(p)
            port = _Port(self, p) if behavior is None else _ByzantinePort(self, p, behavior)
            cls = base if behavior is None else _byzantine_class(base, behavior)
            self.nodes.append(
                cls(
                    p,
                    cfg,
                    self.keyring,
                    port,
                    self.obs,
                    policy_seed=config.seed,
                    tx_per_vertex=config.tx_per_vertex,
                    tx_bytes=config.tx_bytes,
                    jump_rule=config.jump_rule,
                )
            )
        for p, t in faults.crashes.items():
            self.schedule(t, CONTROL, p, -1, ("crash",))
        for p, start, end in faults.pauses:
            self.schedule(start, CONTROL, p, -1, ("pause",))
            self.schedule(end, CONTROL, p, -1, ("resume",))
        # validity bookkeeping: honest pre-GST vertices not yet output everywhere
        self._validity_pending: dict[bytes, set[int]] = {}
        self._live = frozenset(self.live_honest())
        self._gst_round = 0
        self._started = False

    # -- queue ---------------------------------------------------------------

    def schedule(self, t: int, kind: int, dst: int, src: int, payload) -> None:
        bucket = self._buckets.get(t)
        if bucket is None:
            bucket = self._buckets[t] = []
            heapq.heappush(self._times, t)
        bucket.append((kind, dst, src, payload))

    def _arrival(self, now: int) -> int:
        d = self.delay.draw(self.rng, now, self.gst)
        return min(now + d, max(now, self.gst) + self.delta)

    def send(self, src: int, dst: int, msg: object) -> None:
        if src in self.crashed:
            return
        if self.config.count_bytes:
            self._account(msg, 1 if dst != src else 0)
        t = self.now if dst == src else self._arrival(self.now)
        self.schedule(t, MSG, dst, src, msg)
        if self.trace is not None:
            self.trace_event("send", src, dst, getattr(msg, "round", None), None, type(msg).__name__)

    def multicast(self, src: int, msg: object, only: Optional[Iterable[int]] = None) -> None:
        if src in self.crashed:
            return
        targets = range(self.cfg.n) if only is None else sorted(only)
        if self.config.count_bytes:
            self._account(msg, sum(1 for d in targets if d != src))
        now = self.now
        lo, hi = self.delay.span(now, self.gst)
        # same draws as DelayModel.draw, inlined for the per-message path
        base, width = now + lo, hi - lo + 1
        rand = self.rng.random
        cap = max(now, self.gst) + self.delta
        buckets = self._buckets
        for dst in targets:
            if dst == src:
                t = now
            else:
                t = base if width == 1 else base + int(rand() * width)
                if t > cap:
                    t = cap
            bucket = buckets.get(t)
            if bucket is None:
                bucket = buckets[t] = []
                heapq.heappush(self._times, t)
            bucket.append((MSG, dst, src, msg))
        if self.trace is not None:
            self.trace_event("multicast", src, None, getattr(msg, "round", None), None, type(msg).__name__)

    def _account(self, msg: object, copies: int) -> None:
        if copies <= 0:
            return
        size = len(encode(msg)) * copies
        kind = type(msg).__name__
        self.messages[kind] += copies
        self.bytes_by_kind[kind] += size
        self.bytes_by_round[getattr(msg, "round", 0)] += size

    def set_timer(self, node: int, delay: int, r: int) -> None:
        self.schedule(self.now + delay, TIMER, node, node, r)

    # -- tracing -------------------------------------------------------------

    def trace_event(self, kind, src, dst, r, d, msg_kind=None) -> None:
        if self.trace is None:
            return
        rec = {"time": self.now, "kind": kind, "src": src, "dst": dst, "round": r}
        rec["digest_prefix"] = None if d is None else d[:4].hex()
        if msg_kind is not None:
            rec["msg"] = msg_kind
        self.trace.append(rec)

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.trace or ())

    # -- validity ------------------------------------------------------------

    def live_honest(self) -> list[int]:
        crashes = self.config.faults.crashes
        return [p for p in sorted(self.honest) if p not in crashes]

    def on_created(self, node: int, v: Vertex) -> None:
        if self.now < self.gst and node in self._live:
            self._validity_pending[v.id] = set(self._live)

    def on_a_deliver(self, node: int, v: Vertex) -> None:
        waiting = self._validity_pending.get(v.id)
        if waiting is not None:
            waiting.discard(node)
            if not waiting:
                del self._validity_pending[v.id]

    @property
    def validity_pending(self) -> int:
        return len(self._validity_pending)

    # -- driving -------------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for p, node in enumerate(self.nodes):
            if p not in self.crashed:
                node.start()

    def _control(self, p: int, payload: tuple) -> None:
        what = payload[0]
        if what == "crash":
            self.crashed.add(p)
            self.paused.pop(p, None)
            for vid in list(self._validity_pending):
                self._validity_pending[vid].discard(p)
                if not self._validity_pending[vid]:
                    del self._validity_pending[vid]
        elif what == "pause":
            self.paused[p] = []
        elif what == "resume":
            held = self.paused.pop(p, None) or []
            node = self.nodes[p]
            for src, msg in held:
                node.receive(src, msg)
            node.step()

    def run(
        self,
        until: int,
        stop: Optional[Callable[["Simulator"], bool]] = None,
        max_round: Optional[int] = None,
    ) -> "Simulator":
        self.start()
        nodes = self.nodes
        crashed = self.crashed
        paused = self.paused
        buckets = self._buckets
        times = self._times
        gst_noted = self.now >= self.gst
        while times:
            t = times[0]
            if t > until:
                break
            heapq.heappop(times)
            self.now = t
            bucket = buckets[t]
            i = 0
            touched: set[int] = set()
            timers: list[tuple[int, int]] = []
            while True:
                while i < len(bucket):
                    kind, dst, src, payload = bucket[i]
                    i += 1
                    if dst in crashed:
                        continue
                    if kind == MSG:
                        if dst in paused:
                            self._hold(dst, src, payload)
                            continue
                        nodes[dst].receive(src, payload)
                        touched.add(dst)
                    elif kind == TIMER:
                        # a deadline sees every message of its own instant
                        timers.append((dst, payload))
                    else:
                        self._control(dst, payload)
                if touched:
                    for d in sorted(touched):
                        if d not in crashed and d not in paused:
                            nodes[d].step()
                    touched.clear()
                    continue
                if i < len(bucket):
                    continue
                if not timers:
                    break
                for dst, r in timers:
                    if dst not in crashed and dst not in paused:
                        nodes[dst].on_timer(r)
                        touched.add(dst)
                timers.clear()
            del buckets[t]
            if not gst_noted and t >= self.gst:
                gst_noted = True
                self._gst_round = self.honest_round()
            if stop is not None and stop(self):
                break
            if max_round is not None and max(self.obs.max_round) >= max_round:
                break
        return self

    def _hold(self, dst: int, src: int, msg: object) -> None:
        # a paused node keeps reliable-broadcast traffic and certificates and
        # loses best-effort votes and timeout messages
        if type(msg) in (Vote, VoteCertificate, TimeoutMessage):
            return
        self.paused[dst].append((src, msg))

    # -- run-level predicates ------------------------------------------------

    @property
    def gst_round(self) -> int:
        return self._gst_round

    def validity_met(self) -> bool:
        return self.now >= self.gst and not self._validity_pending

    def honest_round(self) -> int:
        live = self.live_honest()
        return max((self.obs.max_round[p] for p in live), default=0)

    def known_tc_rounds(self) -> set[int]:
        out: set[int] = set()
        for p in self.honest:
            out.update(self.nodes[p].tcs)
        return out

    def outputs(self) -> dict[int, list[Vertex]]:
        return {p: self.nodes[p].output for p in sorted(self.honest)}


def run_until_valid(sim: Simulator, rounds_after_gst: int = 20, horizon: int = 100_000) -> Simulator:
    """Run past GST until every honest pre-GST vertex is output by every live
    honest node, or flag liveness when that takes more than ``rounds_after_gst``
    rounds or the system stops making progress."""
    idle_limit = 10 * sim.delta

    def stop(s: Simulator) -> bool:
        if s.now < s.gst:
            return False
        if not s._validity_pending:
            return True
        if s.honest_round() >= s.gst_round + rounds_after_gst:
            s.liveness_flag = "validity not reached within the round budget"
            return True
        if s.now - max(s.obs.last_progress, s.gst) > idle_limit:
            s.liveness_flag = "no progress"
            return True
        return False

    sim.run(horizon, stop=stop)
    if sim.liveness_flag is None and sim._validity_pending:
        sim.liveness_flag = "horizon reached"
    return sim
