"""Scenario configuration, batch execution and metrics."""

from __future__ import annotations

import dataclasses
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .checks import SafetyReport, check_run
from .core import ProtocolConfig, RbcKind
from .dag import to_dot
from .sim import (
    AdversarialDelay,
    Behavior,
    DelayModel,
    FaultScript,
    FixedDelay,
    JitterDelay,
    SimConfig,
    Simulator,
    run_until_valid,
)


@dataclass
class ScenarioConfig:
    n: int = 4
    f: Optional[int] = None
    timeout_tau: Optional[int] = None  # defaults to 2Δ
    rbc: str = "bracha"
    leader_schedule_seed: int = 0
    leaders_per_round: int = 1
    propose_rate: float = 1.0
    mode: str = "single"
    seeds: list[int] = field(default_factory=lambda: [0])
    delay_model: str = "fixed"
    delta: int = 2  # Δ, the post-GST bound
    delta_min: int = 1  # δ
    pre_gst_max: int = 8
    gst: int = 0
    faults: dict = field(default_factory=dict)
    tx_per_vertex: int = 1
    tx_bytes: int = 0
    max_time: int = 200
    rounds: Optional[int] = None
    rounds_after_gst: int = 20
    check: str = "all"
    count_bytes: bool = False
    trace: bool = False
    out: Optional[str] = None
    dot: Optional[str] = None

    def __post_init__(self) -> None:
        if self.f is None:
            self.f = (self.n - 1) // 3
        if self.timeout_tau is None:
            self.timeout_tau = 2 * self.delta
        if self.delay_model not in ("fixed", "jitter", "adversarial"):
            raise ValueError(f"unknown delay model {self.delay_model!r}")
        if self.check not in ("safety", "liveness", "all", "none"):
            raise ValueError(f"unknown check {self.check!r}")
        if self.mode not in ("single", "multi"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.protocol(0)  # validates the protocol fields

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScenarioConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def protocol(self, seed: int) -> ProtocolConfig:
        return ProtocolConfig(
            n=self.n,
            f=self.f,
            timeout_tau=self.timeout_tau,
            rbc_kind=RbcKind.parse(self.rbc),
            leader_schedule_seed=self.leader_schedule_seed,
            leaders_per_round=self.leaders_per_round,
            propose_rate=self.propose_rate,
        )

    def delay(self) -> DelayModel:
        if self.delay_model == "fixed":
            return FixedDelay(self.delta_min)
        if self.delay_model == "jitter":
            return JitterDelay(self.delta_min, self.delta)
        return AdversarialDelay(self.delta_min, self.delta, self.pre_gst_max)

    def sim_config(self, seed: int) -> SimConfig:
        return SimConfig(
            protocol=self.protocol(seed),
            delay=self.delay(),
            gst=self.gst,
            seed=seed,
            faults=FaultScript.from_dict(self.faults),
            mode=self.mode,
            tx_per_vertex=self.tx_per_vertex,
            tx_bytes=self.tx_bytes,
            count_bytes=self.count_bytes,
            trace=self.trace,
        )


# -- metrics -------------------------------------------------------------------


def _hist(values) -> dict[int, int]:
    return dict(sorted(Counter(values).items()))


@dataclass
class Metrics:
    lv_commit_latency: dict[int, int] = field(default_factory=dict)
    nlv_commit_latency: dict[int, int] = field(default_factory=dict)
    nlv_weak_only_latency: dict[int, int] = field(default_factory=dict)
    tx_commit_latency: dict[int, int] = field(default_factory=dict)
    rounds_reached: dict[int, int] = field(default_factory=dict)
    messages_by_kind: dict[str, int] = field(default_factory=dict)
    bytes_by_kind: dict[str, int] = field(default_factory=dict)
    bytes_by_round: dict[int, int] = field(default_factory=dict)
    safety: dict[str, bool] = field(default_factory=dict)
    liveness_flag: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        # JSON object keys are strings; keep numeric order stable
        for k in ("lv_commit_latency", "nlv_commit_latency", "nlv_weak_only_latency",
                  "tx_commit_latency", "rounds_reached", "bytes_by_round"):
            d[k] = {str(x): y for x, y in sorted(d[k].items())}
        return d


def strong_referenced(sim: Simulator) -> set[bytes]:
    out: set[bytes] = set()
    for p in sim.honest:
        for v in sim.nodes[p].dag.vertices():
            out |= v.strong_ids
    return out


def collect_metrics(sim: Simulator, report: Optional[SafetyReport] = None) -> Metrics:
    obs = sim.obs
    leader = sim.nodes[0].leader
    strong = strong_referenced(sim)
    lv, nlv, weak, txs = [], [], [], []
    for vid, (t, v, _, _) in obs.created.items():
        if v.source not in sim.honest:
            continue
        if v.source == leader(v.round):
            if vid in obs.first_commit:
                lv.append(obs.first_commit[vid] - t)
        elif vid in obs.first_deliver:
            (nlv if vid in strong else weak).append(obs.first_deliver[vid] - t)
        if vid in obs.first_deliver:
            done = obs.first_deliver[vid]
            txs.extend(done - tx.created_at for tx in v.block)
    m = Metrics(
        lv_commit_latency=_hist(lv),
        nlv_commit_latency=_hist(nlv),
        nlv_weak_only_latency=_hist(weak),
        tx_commit_latency=_hist(txs),
        rounds_reached={p: sim.nodes[p].round for p in sorted(sim.honest)},
        messages_by_kind=dict(sorted(sim.messages.items())),
        bytes_by_kind=dict(sorted(sim.bytes_by_kind.items())),
        bytes_by_round=dict(sorted(sim.bytes_by_round.items())),
        liveness_flag=sim.liveness_flag,
    )
    if report is not None:
        m.safety = {v.name: v.ok for v in report.verdicts}
    return m


def merge_metrics(items: list[Metrics]) -> dict[str, Any]:
    def add(key: str) -> dict:
        total: Counter = Counter()
        for m in items:
            total.update(getattr(m, key))
        return {str(k): v for k, v in sorted(total.items())}

    return {
        "runs": len(items),
        "lv_commit_latency": add("lv_commit_latency"),
        "nlv_commit_latency": add("nlv_commit_latency"),
        "nlv_weak_only_latency": add("nlv_weak_only_latency"),
        "tx_commit_latency": add("tx_commit_latency"),
        "messages_by_kind": add("messages_by_kind"),
        "bytes_by_kind": add("bytes_by_kind"),
        "safety_failures": sum(1 for m in items if not all(m.safety.values())),
        "liveness_flags": sum(1 for m in items if m.liveness_flag),
    }


# -- execution -----------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    sim: Simulator
    report: Optional[SafetyReport]
    metrics: Metrics

    @property
    def safe(self) -> bool:
        return self.report is None or self.report.ok

    @property
    def live(self) -> bool:
        return self.sim.liveness_flag is None


def run_seed(cfg: ScenarioConfig, seed: int) -> SeedResult:
    sim = Simulator(cfg.sim_config(seed))
    if cfg.check in ("liveness", "all"):
        run_until_valid(sim, cfg.rounds_after_gst, horizon=max(cfg.max_time, cfg.gst + 10_000))
    else:
        sim.run(cfg.max_time, max_round=cfg.rounds)
    report = check_run(sim) if cfg.check in ("safety", "all") else None
    return SeedResult(seed, sim, report, collect_metrics(sim, report))


def parse_dot_spec(spec: str) -> tuple[int, Optional[range]]:
    node, _, span = spec.partition(":")
    if not span:
        return int(node), None
    lo, _, hi = span.partition("-")
    return int(node), range(int(lo), int(hi or lo) + 1)


def write_artifacts(cfg: ScenarioConfig, results: list[SeedResult], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.to_dict(), "seeds": [r.seed for r in results]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    summary = merge_metrics([r.metrics for r in results])
    summary["per_seed"] = {str(r.seed): r.metrics.to_dict() for r in results}
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for r in results:
        if r.sim.trace is not None:
            (out / f"trace_seed{r.seed}.jsonl").write_text(r.sim.trace_jsonl())
    if cfg.dot:
        node, rounds = parse_dot_spec(cfg.dot)
        for r in results:
            text = to_dot(r.sim.nodes[node].dag, rounds, name=f"node{node}")
            (out / f"dag_seed{r.seed}_node{node}.dot").write_text(text)


def trace_excerpt(cfg: ScenarioConfig, seed: int, limit: int = 40) -> list[dict]:
    """Re-run one seed with tracing and return its last ``limit`` records."""
    traced = dataclasses.replace(cfg, trace=True, seeds=[seed])
    res = run_seed(traced, seed)
    return (res.sim.trace or [])[-limit:]


# -- suites --------------------------------------------------------------------

SUITE_FAULTS = ("fault_free", "crash") + tuple(b.value for b in Behavior)


def suite_scenario(n: int, rbc: str, fault: str, seed: int, gst: int = 20) -> ScenarioConfig:
    """One run of the randomized safety suite.

    Faulty parties and crash times are drawn from the seed; the leader
    schedule is permuted per seed as well.
    """
    f = (n - 1) // 3
    rng = random.Random(f"faults:{n}:{rbc}:{fault}:{seed}")
    faulty = rng.sample(range(n), f)
    if fault == "fault_free":
        faults: dict = {}
    elif fault == "crash":
        faults = {"crashes": {p: rng.randint(0, gst) for p in faulty}}
    else:
        faults = {"byzantine": {p: Behavior(fault).value for p in faulty}}
    return ScenarioConfig(
        n=n,
        rbc=rbc,
        propose_rate=0.5,
        leader_schedule_seed=seed + 1,
        seeds=[seed],
        delay_model="adversarial",
        delta=2,
        delta_min=1,
        pre_gst_max=8,
        gst=gst,
        faults=faults,
        check="all",
    )
