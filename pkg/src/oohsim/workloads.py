"""Workload generators: the page-sweep micro-benchmark, a synthetic
key-value store with skewed writes, random churn traces, and the
brute-force dirty-set oracle used to judge what a tracker collected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .costs import CostTable
from .trackers import TrackerConfig, TrackerPhaseReport, run_tracker

__all__ = [
    "MB",
    "PAGE",
    "KV_FOOTPRINTS",
    "MicroBenchSpec",
    "KvWorkloadSpec",
    "TraceWorkload",
    "WorkloadReport",
    "run_microbench",
    "random_trace",
    "churn_trace",
    "OracleResult",
    "replay_dirty_oracle",
]

PAGE = 0x1000
MB = 1 << 20

# synthetic key-value store engines and their resident-set footprints
KV_FOOTPRINTS: dict[str, int] = {
    "baby": 833 * MB,
    "cache": 596 * MB,
    "stdhash": 2400 * MB,
    "stdtree": int(2.4 * MB),
    "tiny": 2200 * MB,
}


@dataclass
class TraceWorkload:
    """A literal sequence of memory operations.

    Ops are tuples: ``("write", gva)``, ``("map", gva)``, ``("unmap", gva)``,
    ``("remap", old_gva, new_gva)``.  Pages named by the run's
    ``memory_bytes`` are pre-mapped at 0x1000, 0x2000, ... before the first
    op executes.
    """

    ops: list[tuple] = field(default_factory=list)
    name: str = ""
    initial_pages: int = 0  # pages pre-mapped before the first op

    @property
    def n_writes(self) -> int:
        return sum(1 for op in self.ops if op[0] == "write")

    @property
    def memory_bytes(self) -> int:
        return max(1, self.initial_pages) * PAGE

    def initial_gvas(self) -> list[int]:
        return [(i + 1) * PAGE for i in range(self.initial_pages)]


@dataclass
class MicroBenchSpec:
    """One write per page per round over a fixed region."""

    memory_bytes: int
    rounds: int = 13

    @property
    def num_pages(self) -> int:
        return max(1, -(-self.memory_bytes // PAGE))


@dataclass
class WorkloadReport:
    ideal_us: float
    tracked_us: float
    overhead_pct: float
    n_sched_events: int
    phase: TrackerPhaseReport | None = None


def run_microbench(
    spec: MicroBenchSpec,
    tracked_by: TrackerConfig | str | None = None,
    *,
    table: CostTable | None = None,
    quantum_us: float = 10_000.0,
    mechanical: bool = False,
) -> WorkloadReport:
    """Run the sweep untracked (the ideal baseline) or under a tracker.

    ``tracked_by`` may be a technique name or a full tracker config; when
    None the run is the vanilla baseline — the same writes, no tracking,
    only scheduler pairs — whose time and event count feed the estimator.
    """
    t = table or CostTable.default()
    if tracked_by is None:
        w = t.param("write_cost_us")
        ideal = spec.num_pages * spec.rounds * w
        pairs = int(ideal // quantum_us)
        return WorkloadReport(
            ideal_us=ideal,
            tracked_us=ideal,
            overhead_pct=0.0,
            n_sched_events=2 * pairs + 2,
        )
    if isinstance(tracked_by, TrackerConfig):
        cfg = tracked_by
    else:
        cfg = TrackerConfig(
            technique=tracked_by,
            memory_bytes=spec.memory_bytes,
            rounds=spec.rounds,
            quantum_us=quantum_us,
            table=t,
            mechanical=mechanical,
        )
    rep = run_tracker(cfg)
    return WorkloadReport(
        ideal_us=rep.ideal_us,
        tracked_us=rep.tracked_us,
        overhead_pct=rep.overhead_tracked_pct,
        n_sched_events=rep.n_sched_events,
        phase=rep,
    )


@dataclass
class KvWorkloadSpec:
    """Synthetic key-value store: skewed page writes over a big footprint.

    Writes follow a zipf(``write_skew``) popularity law over the footprint's
    pages (rank-to-page assignment is a seeded permutation).  ``churn_rate``
    unmap events per second of ideal write time retire the most recently
    written page and map a fresh one in its place — the pattern that makes
    physical-address logging lose pages.
    """

    name: str
    footprint_bytes: int
    write_skew: float = 0.99
    churn_rate: float = 0.0
    n_ops: int = 20_000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.footprint_bytes <= 0:
            raise ValueError("footprint must be positive")

    @property
    def num_pages(self) -> int:
        return max(1, -(-self.footprint_bytes // PAGE))

    def make_trace(self, table: CostTable | None = None) -> TraceWorkload:
        t = table or CostTable.default()
        rng = np.random.default_rng(self.seed)
        pages = self.num_pages
        ranks = np.arange(1, pages + 1, dtype=np.float64)
        cdf = np.cumsum(ranks ** (-self.write_skew))
        slot_of_rank = rng.permutation(pages)
        # slot -> current gva; churned slots move to fresh addresses
        gva_of_slot = [(i + 1) * PAGE for i in range(pages)]
        next_fresh = (pages + 1) * PAGE

        draws = np.searchsorted(cdf, rng.random(self.n_ops) * cdf[-1])
        write_us = t.param("write_cost_us")
        churns = int(self.churn_rate * (self.n_ops * write_us) / 1e6)
        churn_every = self.n_ops // (churns + 1) if churns else 0

        ops: list[tuple] = []
        churned = 0
        for i, rank_idx in enumerate(draws, start=1):
            slot = int(slot_of_rank[rank_idx])
            ops.append(("write", gva_of_slot[slot]))
            if churns and churned < churns and i % churn_every == 0:
                old = gva_of_slot[slot]
                ops.append(("unmap", old))
                gva_of_slot[slot] = next_fresh
                ops.append(("map", next_fresh))
                next_fresh += PAGE
                churned += 1
        return TraceWorkload(ops=ops, name=self.name, initial_pages=pages)


def random_trace(
    seed: int,
    max_pages: int = 4096,
    n_ops: int = 200,
    p_unmap: float = 0.1,
    p_map: float = 0.1,
) -> TraceWorkload:
    """A fuzzed write/map/unmap trace over at most ``max_pages`` pages.

    Unmapped addresses are never reused, so every name identifies one page
    for the oracle.  Writes target currently mapped pages.
    """
    rng = np.random.default_rng(seed)
    n_initial = int(rng.integers(1, max_pages + 1))
    mapped = [(i + 1) * PAGE for i in range(n_initial)]
    next_fresh = (max_pages + 1) * PAGE
    ops: list[tuple] = []
    for _ in range(n_ops):
        r = rng.random()
        if r < p_unmap and len(mapped) > 1:
            idx = int(rng.integers(len(mapped)))
            ops.append(("unmap", mapped.pop(idx)))
        elif r < p_unmap + p_map:
            ops.append(("map", next_fresh))
            mapped.append(next_fresh)
            next_fresh += PAGE
        else:
            gva = mapped[int(rng.integers(len(mapped)))]
            ops.append(("write", gva))
    return TraceWorkload(ops=ops, name=f"fuzz-{seed}", initial_pages=n_initial)


def churn_trace(working_set_pages: int, churn_events: int, seed: int = 0) -> TraceWorkload:
    """Dirty every page once, then retire the most recent ``churn_events``.

    The unmaps are last-in-first-out over the write order, so the retired
    pages are exactly the ones whose log entries are least likely to have
    been harvested yet — the worst case for physical-address logging.
    """
    if churn_events >= working_set_pages:
        raise ValueError("churn must retire fewer pages than the working set")
    rng = np.random.default_rng(seed)
    order = rng.permutation(working_set_pages)
    ops: list[tuple] = [("write", (int(i) + 1) * PAGE) for i in order]
    if churn_events:
        for i in reversed(order[-churn_events:]):
            ops.append(("unmap", (int(i) + 1) * PAGE))
    return TraceWorkload(
        ops=ops,
        name=f"churn-{working_set_pages}-{churn_events}",
        initial_pages=working_set_pages,
    )


@dataclass
class OracleResult:
    """Ground truth from brute-force replay of a trace.

    ``dirty`` holds every name that a lossless tracker should report:
    currently mapped dirty pages under their current name, plus pages that
    were unmapped while dirty (frozen under the name they had).
    ``unmapped_dirty`` is the subset gone from the address space at the end
    — what physical-address logging cannot reverse-map anymore.
    """

    dirty: set[int]
    unmapped_dirty: set[int]


def replay_dirty_oracle(ops, initial_pages) -> OracleResult:
    mapped = set(initial_pages)
    dirty: set[int] = set()
    frozen: set[int] = set()
    for op in ops:
        kind = op[0]
        if kind == "write":
            if op[1] in mapped:
                dirty.add(op[1])
        elif kind == "map":
            mapped.add(op[1])
        elif kind == "unmap":
            mapped.discard(op[1])
            if op[1] in dirty:
                dirty.discard(op[1])
                frozen.add(op[1])
        elif kind == "remap":
            old, new = op[1], op[2]
            mapped.discard(old)
            mapped.add(new)
            if old in dirty:
                dirty.discard(old)
                dirty.add(new)
        else:
            raise ValueError(f"unknown trace op {kind!r}")
    return OracleResult(dirty=dirty | frozen, unmapped_dirty=frozen - mapped)
